use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{Damping, EXACT_HESSIAN_CAP, KFAC_RELATIVE_DAMPING};
use crate::masking::DEFAULT_SPARSITY_GRID;
use crate::probe::DEFAULT_ALPHA;
use crate::saliency::{Method, ScoreOptions, EXACT_RELATIVE_DAMPING};
use crate::synth::TaskParams;
use crate::trainer::SgdSchedule;

/// Encoder widths after the input layer; the last entry is the feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { widths: vec![128, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Rank SNIP by `|g·θ|` rather than the signed product.
    pub snip_absolute: bool,
    /// Relative damping per Kronecker factor.
    pub block_damping: f64,
    /// Relative damping of the dense Hessian.
    pub exact_damping: f64,
    /// Largest encoder for which the dense Hessian is formed.
    pub exact_cap: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            snip_absolute: true,
            block_damping: KFAC_RELATIVE_DAMPING,
            exact_damping: EXACT_RELATIVE_DAMPING,
            exact_cap: EXACT_HESSIAN_CAP,
        }
    }
}

impl ScoringConfig {
    pub fn options(&self) -> ScoreOptions {
        ScoreOptions {
            snip_absolute: self.snip_absolute,
            block_damping: Damping::Relative(self.block_damping),
            exact_damping: Damping::Relative(self.exact_damping),
            exact_cap: self.exact_cap,
        }
    }
}

/// Everything a sweep depends on. Written back, fully resolved, next to the
/// results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    /// Percent, strictly increasing, each in `[0, 100)`.
    pub sparsities: Vec<f64>,
    /// Source tasks to rotate through; empty means every task.
    pub rotations: Vec<usize>,
    pub alpha: f64,
    pub apply_obs_update: bool,
    pub report_heldout: bool,
    /// Side length of the loss-surface grid; 0 disables it.
    pub landscape_resolution: usize,
    pub tasks: TaskParams,
    pub network: NetworkConfig,
    pub pretrain: SgdSchedule,
    pub retrain: SgdSchedule,
    pub scoring: ScoringConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: PathBuf::from("runs/default"),
            methods: vec![
                Method::Magnitude,
                Method::DiagHessian,
                Method::BlockHessian,
                Method::Snip,
                Method::Grasp,
            ],
            sparsities: DEFAULT_SPARSITY_GRID.to_vec(),
            rotations: Vec::new(),
            alpha: DEFAULT_ALPHA,
            apply_obs_update: false,
            report_heldout: true,
            landscape_resolution: 41,
            tasks: TaskParams::default(),
            network: NetworkConfig::default(),
            pretrain: SgdSchedule::default(),
            retrain: SgdSchedule::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let location = match e.span() {
                Some(span) => format!("{}:{}", path.display(), 1 + text[..span.start].matches('\n').count()),
                None => path.display().to_string(),
            };
            Error::parse(location, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.sparsities.is_empty() {
            return bad("the sparsity grid is empty".into());
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(**s >= 0.0 && **s < 100.0)) {
            return bad(format!("sparsity {s} is outside [0, 100)"));
        }
        if self.sparsities.windows(2).any(|w| w[1] <= w[0]) {
            return bad("sparsities must be strictly increasing".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods are listed twice".into());
        }
        if let Some(r) = self.rotations.iter().find(|r| **r >= self.tasks.n_tasks) {
            return bad(format!("rotation {r} is not a task index (n_tasks = {})", self.tasks.n_tasks));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.network.widths.is_empty() || self.network.widths.contains(&0) {
            return bad("network widths must be non-empty and positive".into());
        }
        if self.landscape_resolution == 1 {
            return bad("landscape_resolution must be 0 or at least 2".into());
        }
        self.pretrain.validate()?;
        self.retrain.validate()?;
        Ok(())
    }

    /// Input dimension followed by the encoder widths.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.tasks.dim];
        dims.extend(&self.network.widths);
        dims
    }

    pub fn source_tasks(&self) -> Vec<usize> {
        if self.rotations.is_empty() {
            (0..self.tasks.n_tasks).collect()
        } else {
            self.rotations.clone()
        }
    }

    pub fn sparsity_fractions(&self) -> Vec<f64> {
        self.sparsities.iter().map(|s| s / 100.0).collect()
    }

    /// Result rows a complete sweep produces.
    pub fn expected_rows(&self) -> usize {
        self.seeds.len()
            * self.source_tasks().len()
            * self.methods.len()
            * (1 + 2 * self.sparsities.len())
            * self.tasks.n_tasks
    }
}
