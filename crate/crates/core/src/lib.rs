// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod hessian;
pub mod landscape;
pub mod linalg;
pub mod masking;
pub mod net;
pub mod oracle;
pub mod par;
pub mod probe;
pub mod protocol;
pub mod saliency;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use net::{Batch, Head, LayerSpec, Network, TaskId};
pub use par::ExecMode;
