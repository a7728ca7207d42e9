//! The experiment document: one JSON file with `model`, `data`, `train`,
//! `eval`, `sweep` and `output` sections. Every field has a default, unknown
//! keys are rejected, and the fully resolved form is what gets written next
//! to each run.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use markov_mamba::model::{Head, InitScheme, MambaConfig, MlpCombine, Variant};
use markov_mamba::train::{DataConfig, OptimizerConfig, TrainConfig};

use crate::usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

/// Model hyperparameters. Options left unset follow the variant: MambaZero
/// turns off ReLU and gating and uses the L1 head; the alphabet follows the
/// data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub d: usize,
    pub state: usize,
    pub expand: usize,
    pub window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<Head>,
    pub use_conv: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_relu: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_gating: Option<bool>,
    pub mlp_combine: MlpCombine,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Full,
            d: 8,
            state: 8,
            expand: 2,
            window: 2,
            window_c: None,
            head: None,
            use_conv: true,
            use_relu: None,
            use_gating: None,
            mlp_combine: MlpCombine::Product,
            alphabet: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, data: &DataConfig) -> MambaConfig {
        let mut cfg = match self.variant {
            Variant::Full => MambaConfig::full(self.d, self.state, self.expand, self.window),
            Variant::Zero => MambaConfig::zero(self.d, self.state, self.expand, self.window),
        };
        // a conv width equal to the window is stored as unset so both spellings
        // describe the same model
        cfg.window_c = self.window_c.filter(|&c| c != self.window);
        cfg.use_conv = self.use_conv;
        cfg.mlp_combine = self.mlp_combine;
        cfg.head = self.head.unwrap_or(cfg.head);
        cfg.use_relu = self.use_relu.unwrap_or(cfg.use_relu);
        cfg.use_gating = self.use_gating.unwrap_or(cfg.use_gating);
        cfg.alphabet = self.alphabet.unwrap_or(data.alphabet());
        cfg
    }
}

impl From<&MambaConfig> for ModelSection {
    fn from(cfg: &MambaConfig) -> Self {
        ModelSection {
            variant: cfg.variant,
            d: cfg.d,
            state: cfg.state,
            expand: cfg.expand,
            window: cfg.window,
            window_c: cfg.window_c,
            head: Some(cfg.head),
            use_conv: cfg.use_conv,
            use_relu: Some(cfg.use_relu),
            use_gating: Some(cfg.use_gating),
            mlp_combine: cfg.mlp_combine,
            alphabet: Some(cfg.alphabet),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: OptimizerConfig,
    pub init: InitScheme,
    pub iterations: usize,
    pub lr_min_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Size of the held-out batch used for logging and evaluation.
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::new(MambaConfig::full(1, 1, 1, 1), DataConfig::default());
        TrainSection {
            optimizer: base.optimizer,
            init: base.init,
            iterations: base.iterations,
            lr_min_fraction: base.lr_min_fraction,
            seed: base.seed,
            eval_every: base.eval_every,
            eval_batch: base.eval_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out sequence whose match curves and `a_t` trajectory are written.
    pub curve_sequence: usize,
    /// First 1-based position of the `a_t` average.
    pub at_from: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            curve_sequence: 0,
            at_from: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub orders: Vec<usize>,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            orders: vec![1, 2],
            windows: vec![2, 3],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl ExperimentConfig {
    /// Reads a config file; parse failures are usage errors.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
    }

    pub fn model_config(&self) -> MambaConfig {
        self.model.resolve(&self.data)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model_config(),
            data: self.data,
            optimizer: t.optimizer,
            init: t.init,
            iterations: t.iterations,
            lr_min_fraction: t.lr_min_fraction,
            seed: t.seed,
            eval_every: t.eval_every,
            eval_batch: t.eval_batch,
        }
    }

    /// Every defaulted option filled in; this is the form echoed into run
    /// directories.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let model = self.model_config();
        out.model = ModelSection::from(&model);
        out.model.window_c = Some(model.window_c());
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train_config().validate().map_err(|e| usage(e.to_string()))?;
        let s = &self.sweep;
        if s.orders.is_empty() || s.windows.is_empty() || s.seeds.is_empty() {
            return Err(usage("sweep orders, windows and seeds must be non-empty"));
        }
        Ok(())
    }

    /// The sections that determine a training run's results. Two configs
    /// with the same key produce identical runs.
    pub fn run_key(&self) -> serde_json::Value {
        let r = self.resolved();
        serde_json::json!({ "model": r.model, "data": r.data, "train": r.train })
    }

    /// Default run directory name for a training run.
    pub fn default_run_id(&self) -> String {
        let m = self.model_config();
        let variant = match m.variant {
            Variant::Full => "full",
            Variant::Zero => "zero",
        };
        let mut id = format!("{variant}-k{}-w{}-s{}", self.data.order, m.window, self.train.seed);
        let tags = [
            (!m.use_conv, "noconv"),
            (m.variant == Variant::Full && !m.use_relu, "norelu"),
            (m.variant == Variant::Full && !m.use_gating, "nogating"),
            (m.variant == Variant::Full && m.mlp_combine == MlpCombine::Sum, "summlp"),
            (self.data.p_switch.is_some(), "switch"),
        ];
        for (on, tag) in tags {
            if on {
                id.push('-');
                id.push_str(tag);
            }
        }
        id
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        crate::output::write_json(path, &self.resolved()).with_context(|| format!("writing {}", path.display()))
    }
}
