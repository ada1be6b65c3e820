//! Dense bias-free feed-forward encoder with per-task linear heads.
//!
//! The network computes `f(x) = φ(x, W)ᵀ ξ_task` where `φ` is a stack of
//! dense layers and `ξ_task` is an `h × C` head matrix.
//!
//! Layer `l` holds an `m_l × h_l` weight matrix stored row-major inside the
//! flat parameter vector, layers concatenated in order. The pre-activation is
//! `z_l = W_lᵀ a_{l-1}`, so the gradient of layer `l` is the outer product
//! `a_{l-1} (∇z_l L)ᵀ` and its flattening is `a_{l-1} ⊗ ∇z_l L`.
//!
//! Batches are processed as column blocks: a row-major `n × d` input buffer
//! is read as a column-major `d × n` matrix, one column per example. A
//! row-major `m × h` weight block is likewise the column-major `h × m`
//! matrix `W_lᵀ`, which lets every layer run as a single matrix product.

use std::collections::BTreeMap;

use nalgebra::DMatrixView;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// ReLU after the layer when set, identity otherwise.
    pub has_activation: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, has_activation: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            has_activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim
    }
}

/// Labelled examples, inputs stored row-major (`n × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must hold at least one example".into()));
        }
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::dim("batch inputs", labels.len() * dim, inputs.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Column view `d × n`, one example per column.
    pub fn columns(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.inputs, self.dim, self.len())
    }

    /// New batch holding the given examples in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// One-hot targets as a `C × n` matrix.
    pub fn one_hot(&self) -> Matrix {
        let mut y = Matrix::zeros(self.classes, self.len());
        for (i, &l) in self.labels.iter().enumerate() {
            y[(l, i)] = 1.0;
        }
        y
    }
}

/// Linear head `ξ` of shape `h × C`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub features: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl Head {
    pub fn new(features: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != features * classes {
            return Err(Error::dim("head matrix", features * classes, values.len()));
        }
        Ok(Self {
            features,
            classes,
            values,
        })
    }

    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            features,
            classes,
            values: vec![0.0; features * classes],
        }
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.classes + c]
    }

    /// `ξᵀ` as a `C × h` view.
    fn transposed(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.values, self.classes, self.features)
    }
}

/// Per-layer quantities recorded on a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct LayerSignals {
    /// Layer inputs `a_{l-1}`, `m_l × n`.
    pub inputs: Matrix,
    /// Loss gradients w.r.t. the pre-activation output `z_l`, `h_l × n`,
    /// for the per-example (unaveraged) loss.
    pub pre_grads: Matrix,
}

struct Trace {
    /// `a_0 .. a_L`; `a_0` is the raw input.
    activations: Vec<Matrix>,
    /// `z_1 .. z_L`.
    pre: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    weights: Vec<f64>,
    offsets: Vec<usize>,
    heads: BTreeMap<TaskId, Head>,
}

impl Network {
    /// Zero-initialised encoder with the given layers and no heads.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, spec) in layers.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::InvalidArgument(format!("layer {l} has a zero dimension")));
            }
            if l > 0 && layers[l - 1].out_dim != spec.in_dim {
                return Err(Error::dim(
                    format!("layer {l} input"),
                    layers[l - 1].out_dim,
                    spec.in_dim,
                ));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for spec in &layers {
            offsets.push(total);
            total += spec.param_count();
        }
        offsets.push(total);
        Ok(Self {
            layers,
            weights: vec![0.0; total],
            offsets,
            heads: BTreeMap::new(),
        })
    }

    /// MLP over `dims` (input first, feature dimension last) with ReLU between
    /// layers and no activation on the final layer.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| LayerSpec::new(dims[l], dims[l + 1], l + 1 < n))
            .collect();
        Self::new(layers)
    }

    /// He-normal initialisation of the encoder weights.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (l, spec) in self.layers.iter().enumerate() {
            let std = (2.0 / spec.in_dim as f64).sqrt();
            for w in &mut self.weights[self.offsets[l]..self.offsets[l + 1]] {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::dim("encoder weights", self.weights.len(), weights.len()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_weights(weights)?;
        Ok(out)
    }

    /// Flat index range of layer `l`.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    /// `(layer, row, col)` of a flat parameter index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize, usize)> {
        if index >= self.weights.len() {
            return None;
        }
        let l = self.offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.offsets[l];
        let h = self.layers[l].out_dim;
        Some((l, local / h, local % h))
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, Head> {
        &self.heads
    }

    pub fn head(&self, task: TaskId) -> Result<&Head> {
        self.heads.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn set_head(&mut self, task: TaskId, head: Head) -> Result<()> {
        if head.features != self.feature_dim() {
            return Err(Error::dim("head feature dimension", self.feature_dim(), head.features));
        }
        self.heads.insert(task, head);
        Ok(())
    }

    fn layer_t(&self, l: usize) -> DMatrixView<'_, f64> {
        let s = &self.layers[l];
        DMatrixView::from_slice(&self.weights[self.layer_range(l)], s.out_dim, s.in_dim)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), batch.dim()));
        }
        Ok(())
    }

    fn trace(&self, x: DMatrixView<'_, f64>) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.into_owned());
        for (l, spec) in self.layers.iter().enumerate() {
            let z = self.layer_t(l) * &activations[l];
            let a = if spec.has_activation {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(a);
        }
        Trace { activations, pre }
    }

    /// Features for a single input vector.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), x.len()));
        }
        let view = DMatrixView::from_slice(x, x.len(), 1);
        let mut t = self.trace(view);
        Ok(t.activations.pop().expect("non-empty").as_slice().to_vec())
    }

    /// Logits `φ(x)ᵀ ξ_task` for a single input vector.
    pub fn forward(&self, x: &[f64], task: TaskId) -> Result<Vec<f64>> {
        let head = self.head(task)?;
        let phi = self.features(x)?;
        let phi = DMatrixView::from_slice(&phi, phi.len(), 1);
        Ok((head.transposed() * phi).as_slice().to_vec())
    }

    /// Features of every example, `h × n`.
    pub fn batch_features(&self, batch: &Batch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let mut t = self.trace(batch.columns());
        Ok(t.activations.pop().expect("non-empty"))
    }

    /// Logits of every example, `C × n`.
    pub fn batch_logits(&self, batch: &Batch, task: TaskId) -> Result<Matrix> {
        let head = self.head(task)?;
        self.check_head_classes(head, batch)?;
        Ok(head.transposed() * self.batch_features(batch)?)
    }

    fn check_head_classes(&self, head: &Head, batch: &Batch) -> Result<()> {
        if head.classes != batch.classes() {
            return Err(Error::dim("head classes", head.classes, batch.classes()));
        }
        Ok(())
    }

    /// Mean MSE loss over the batch.
    pub fn loss(&self, batch: &Batch, task: TaskId) -> Result<f64> {
        let logits = self.batch_logits(batch, task)?;
        Ok(batch_mse(&logits, batch))
    }

    /// Gradient of the mean batch loss w.r.t. the encoder weights; heads are
    /// treated as constants.
    pub fn grad(&self, batch: &Batch, task: TaskId) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(batch, task)?.1)
    }

    pub fn loss_and_grad(&self, batch: &Batch, task: TaskId) -> Result<(f64, Vec<f64>)> {
        let (loss, mut g, _) = self.backprop_sum(batch, task, false)?;
        let inv = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok((loss, g))
    }

    /// Summed (not averaged) encoder gradient over the batch, optionally with
    /// the summed head gradient; returns the mean loss alongside.
    pub fn backprop_sum(
        &self,
        batch: &Batch,
        task: TaskId,
        with_head: bool,
    ) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        let head = self.head(task)?;
        self.check_head_classes(head, batch)?;
        self.check_batch(batch)?;
        let trace = self.trace(batch.columns());
        let phi = &trace.activations[self.layers.len()];
        let logits = head.transposed() * phi;
        let loss = batch_mse(&logits, batch);
        let dlogits = logit_residual_grad(&logits, batch);
        let head_grad = with_head.then(|| {
            // row-major h × C buffer equals column-major C × h: dlogits · φᵀ
            (&dlogits * phi.transpose()).as_slice().to_vec()
        });
        let signals = self.backward(&trace, head.transposed().tr_mul(&dlogits));
        let mut g = vec![0.0; self.param_count()];
        for (l, sig) in signals.iter().enumerate() {
            let block = &sig.pre_grads * sig.inputs.transpose();
            g[self.layer_range(l)].copy_from_slice(block.as_slice());
        }
        Ok((loss, g, head_grad))
    }

    fn backward(&self, trace: &Trace, dphi: Matrix) -> Vec<LayerSignals> {
        let n_layers = self.layers.len();
        let mut out: Vec<Option<LayerSignals>> = vec![None; n_layers];
        let mut upstream = dphi;
        for l in (0..n_layers).rev() {
            let mut dz = upstream;
            if self.layers[l].has_activation {
                dz.zip_apply(&trace.pre[l], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            upstream = if l > 0 {
                self.layer_t(l).tr_mul(&dz)
            } else {
                Matrix::zeros(0, 0)
            };
            out[l] = Some(LayerSignals {
                inputs: trace.activations[l].clone(),
                pre_grads: dz,
            });
        }
        out.into_iter().map(|s| s.expect("filled")).collect()
    }

    /// Per-layer input activations and pre-activation gradients of each
    /// example's own loss.
    pub fn layer_signals(&self, batch: &Batch, task: TaskId) -> Result<Vec<LayerSignals>> {
        let head = self.head(task)?;
        self.check_head_classes(head, batch)?;
        self.check_batch(batch)?;
        let trace = self.trace(batch.columns());
        let logits = head.transposed() * &trace.activations[self.layers.len()];
        let dlogits = logit_residual_grad(&logits, batch);
        Ok(self.backward(&trace, head.transposed().tr_mul(&dlogits)))
    }

    /// Row `i` is the encoder gradient of example `i`'s loss alone (`n × p`).
    pub fn per_example_grads(&self, batch: &Batch, task: TaskId) -> Result<Matrix> {
        let signals = self.layer_signals(batch, task)?;
        let mut out = Matrix::zeros(batch.len(), self.param_count());
        for (l, sig) in signals.iter().enumerate() {
            let start = self.offsets[l];
            let (m, h) = (self.layers[l].in_dim, self.layers[l].out_dim);
            for i in 0..batch.len() {
                for r in 0..m {
                    let a = sig.inputs[(r, i)];
                    for k in 0..h {
                        out[(i, start + r * h + k)] = a * sig.pre_grads[(k, i)];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `(1/C) Σ_c (logit_c − onehot_c)²`.
pub fn mse_loss(logits: &[f64], label: usize) -> Result<f64> {
    let c = logits.len();
    if label >= c {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let t = if k == label { 1.0 } else { 0.0 };
            (v - t) * (v - t)
        })
        .sum();
    Ok(sum / c as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn batch_mse(logits: &Matrix, batch: &Batch) -> f64 {
    let c = logits.nrows() as f64;
    let mut total = 0.0;
    for (i, &label) in batch.labels().iter().enumerate() {
        let col = logits.column(i);
        let mut s = 0.0;
        for (k, &v) in col.iter().enumerate() {
            let d = if k == label { v - 1.0 } else { v };
            s += d * d;
        }
        total += s / c;
    }
    total / batch.len() as f64
}

/// `∂L_i/∂logits = (2/C)(logits − onehot)` per column.
fn logit_residual_grad(logits: &Matrix, batch: &Batch) -> Matrix {
    let scale = 2.0 / logits.nrows() as f64;
    let mut d = logits.clone();
    for (i, &label) in batch.labels().iter().enumerate() {
        d[(label, i)] -= 1.0;
    }
    d *= scale;
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::mlp(dims).unwrap();
        net.init_he(&mut rng);
        let h = net.feature_dim();
        let vals = (0..h * classes)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        net.set_head(0, Head::new(h, classes, vals).unwrap()).unwrap();
        net
    }

    fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Batch::new(inputs, labels, d, classes).unwrap()
    }

    /// Scalar-loop reimplementation of the forward pass.
    fn forward_oracle(net: &Network, x: &[f64], task: TaskId) -> Vec<f64> {
        let mut a = x.to_vec();
        let w = net.weights();
        for (l, spec) in net.layers().iter().enumerate() {
            let base = net.layer_range(l).start;
            let mut z = vec![0.0; spec.out_dim];
            for (k, zk) in z.iter_mut().enumerate() {
                for (r, ar) in a.iter().enumerate() {
                    *zk += ar * w[base + r * spec.out_dim + k];
                }
            }
            if spec.has_activation {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        let head = net.head(task).unwrap();
        (0..head.classes)
            .map(|c| (0..head.features).map(|k| a[k] * head.get(k, c)).sum())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = Network::mlp(&[3, 4, 2]).unwrap();
        net.set_head(0, Head::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(net.features(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_and_head() {
        let mut net = Network::new(vec![LayerSpec::new(3, 3, false)]).unwrap();
        net.set_weights(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        net.set_head(0, Head::new(3, 3, net.weights().to_vec()).unwrap()).unwrap();
        assert_eq!(net.forward(&[1.0, 0.0, 0.0], 0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(net.features(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let net = random_net(&[2, 4, 3], 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let fast = net.forward(&x, 0).unwrap();
            let slow = forward_oracle(&net, &x, 0);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            let phi = net.features(&x).unwrap();
            let head = net.head(0).unwrap();
            for c in 0..3 {
                let composed: f64 = (0..3).map(|k| phi[k] * head.get(k, c)).sum();
                assert!((composed - fast[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(&[5, 8, 4], 3, 3);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        let a = net.forward(&x, 0).unwrap();
        let b = net.forward(&x, 0).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_errors_name_the_layer() {
        let net = random_net(&[2, 4, 3], 3, 7);
        let err = net.forward(&[1.0, 2.0, 3.0], 0).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
        assert!(matches!(net.forward(&[1.0, 2.0], 9), Err(Error::UnknownTask(9))));
        let bad = Network::new(vec![LayerSpec::new(2, 3, true), LayerSpec::new(4, 1, false)]);
        assert!(bad.unwrap_err().to_string().contains("layer 1"));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((mse_loss(&[0.0; 10], 3).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(mse_loss(&[0.0; 3], 3), Err(Error::LabelOutOfRange { .. })));
        let logits = [0.3, -1.2, 2.5, 0.7];
        let oracle = ((0.3f64).powi(2) + (-1.2f64).powi(2) + (1.5f64).powi(2) + 0.7f64.powi(2)) / 4.0;
        assert!((mse_loss(&logits, 2).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax([0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn batch_rejects_bad_labels() {
        assert!(Batch::new(vec![0.0, 1.0], vec![3], 2, 3).is_err());
        assert!(Batch::new(vec![], vec![], 2, 3).is_err());
    }

    #[test]
    fn locate_round_trips() {
        let net = Network::mlp(&[3, 4, 2]).unwrap();
        assert_eq!(net.locate(0), Some((0, 0, 0)));
        assert_eq!(net.locate(5), Some((0, 1, 1)));
        assert_eq!(net.locate(12), Some((1, 0, 0)));
        assert_eq!(net.locate(19), Some((1, 3, 1)));
        assert_eq!(net.locate(20), None);
    }

    #[test]
    fn batch_grad_is_mean_of_rows() {
        let net = random_net(&[3, 5, 4], 3, 11);
        let batch = random_batch(7, 3, 3, 12);
        let g = net.grad(&batch, 0).unwrap();
        let rows = net.per_example_grads(&batch, 0).unwrap();
        for j in 0..g.len() {
            let mean = rows.column(j).sum() / 7.0;
            assert!((mean - g[j]).abs() < 1e-12);
        }
        let single = batch.select(&[2]);
        let g1 = net.grad(&single, 0).unwrap();
        let r1 = net.per_example_grads(&single, 0).unwrap();
        for j in 0..g1.len() {
            assert!((g1[j] - r1[(0, j)]).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_single_layer_inputs_are_raw() {
        let mut net = Network::new(vec![LayerSpec::new(3, 2, false)]).unwrap();
        net.set_weights(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        net.set_head(0, Head::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let batch = random_batch(4, 3, 2, 5);
        let sig = net.layer_signals(&batch, 0).unwrap();
        assert_eq!(sig[0].inputs.as_slice(), batch.inputs());
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        // first layer maps every positive input to negative pre-activations
        let mut net = Network::mlp(&[2, 2, 2]).unwrap();
        net.set_weights(vec![-1.0, -1.0, -1.0, -1.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        net.set_head(0, Head::new(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap()).unwrap();
        let batch = Batch::new(vec![1.0, 2.0, 0.5, 0.1], vec![0, 1], 2, 2).unwrap();
        let sig = net.layer_signals(&batch, 0).unwrap();
        assert!(sig[0].pre_grads.iter().all(|&v| v == 0.0));
        assert!(net.grad(&batch, 0).unwrap()[..4].iter().all(|&v| v == 0.0));
    }
}
