use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{Head, MambaConfig};
use crate::autodiff::{softplus_inverse, Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gated MLP weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `4d × d`
    pub w1: Tensor,
    /// `d × 4d`
    pub w2: Tensor,
    /// `4d × d`
    pub w3: Tensor,
}

/// Every learnable tensor of the single-layer model.
///
/// The input projection is kept as separate matrices (`w_x`, `w_b`, `w_c`,
/// `w_z`, `w_delta`); stacking them row-wise gives the fused
/// `(2ed + 2N + 1) × d` in-projection of the reference implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams {
    /// `alphabet × d`, row `i` is the embedding of token `i`.
    pub embedding: Tensor,
    /// Scalar `a ≥ 0` in `a_t = exp(-a Δ_t)`.
    pub a: Tensor,
    /// Scalar bias inside `Δ_t = softplus(<w_Δ, x_t> + δ)`.
    pub delta: Tensor,
    /// `d`
    pub w_delta: Tensor,
    /// `ed × d`
    pub w_x: Tensor,
    /// `N × d`
    pub w_b: Tensor,
    /// `N × d`
    pub w_c: Tensor,
    /// `ed × w`, column `w-1` multiplies the current step.
    pub conv_x: Tensor,
    /// `N × w`
    pub conv_b: Tensor,
    /// `N × w_C`
    pub conv_c: Tensor,
    /// `ed × d`, full variant only.
    pub w_z: Option<Tensor>,
    /// `d × ed`
    pub w_o: Tensor,
    /// Full variant only.
    pub mlp: Option<Mlp>,
    /// `alphabet × d`
    pub head: Tensor,
}

/// Standard deviation of [`InitScheme::Gaussian`] in the reference setup.
pub const INIT_STD: f64 = 0.02;
/// Initial value of `a`.
pub const INIT_A: f64 = 0.5;

impl MambaParams {
    /// All-zero parameters with the shapes `cfg` requires.
    pub fn zeros(cfg: &MambaConfig) -> Self {
        let (d, ed, n, h, a) = (cfg.d, cfg.inner(), cfg.state, cfg.hidden(), cfg.alphabet);
        let m = |r, c| Tensor::zeros(Shape::Matrix(r, c));
        MambaParams {
            embedding: m(a, d),
            a: Tensor::scalar(0.0),
            delta: Tensor::scalar(0.0),
            w_delta: Tensor::zeros(Shape::Vector(d)),
            w_x: m(ed, d),
            w_b: m(n, d),
            w_c: m(n, d),
            conv_x: m(ed, cfg.window),
            conv_b: m(n, cfg.window),
            conv_c: m(n, cfg.window_c()),
            w_z: cfg.has_mlp().then(|| m(ed, d)),
            w_o: m(d, ed),
            mlp: cfg.has_mlp().then(|| Mlp {
                w1: m(h, d),
                w2: m(d, h),
                w3: m(h, d),
            }),
            head: m(a, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(0.0));
        z
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("embedding", &self.embedding),
            ("a", &self.a),
            ("delta", &self.delta),
            ("w_delta", &self.w_delta),
            ("w_x", &self.w_x),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("conv_x", &self.conv_x),
            ("conv_b", &self.conv_b),
            ("conv_c", &self.conv_c),
        ];
        if let Some(w_z) = &self.w_z {
            out.push(("w_z", w_z));
        }
        out.push(("w_o", &self.w_o));
        if let Some(mlp) = &self.mlp {
            out.extend([("mlp.w1", &mlp.w1), ("mlp.w2", &mlp.w2), ("mlp.w3", &mlp.w3)]);
        }
        out.push(("head", &self.head));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor)) {
        f("embedding", &mut self.embedding);
        f("a", &mut self.a);
        f("delta", &mut self.delta);
        f("w_delta", &mut self.w_delta);
        f("w_x", &mut self.w_x);
        f("w_b", &mut self.w_b);
        f("w_c", &mut self.w_c);
        f("conv_x", &mut self.conv_x);
        f("conv_b", &mut self.conv_b);
        f("conv_c", &mut self.conv_c);
        if let Some(w_z) = &mut self.w_z {
            f("w_z", w_z);
        }
        f("w_o", &mut self.w_o);
        if let Some(mlp) = &mut self.mlp {
            f("mlp.w1", &mut mlp.w1);
            f("mlp.w2", &mut mlp.w2);
            f("mlp.w3", &mut mlp.w3);
        }
        f("head", &mut self.head);
    }

    /// Visits matching tensors of `self` and `other` (same layout).
    pub fn zip_mut(&mut self, other: &MambaParams, mut f: impl FnMut(&'static str, &mut Tensor, &Tensor)) {
        let theirs = other.named();
        let mut i = 0;
        self.for_each_mut(|name, t| {
            debug_assert_eq!(theirs[i].0, name);
            f(name, t, theirs[i].1);
            i += 1;
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values flattened in [`named`](Self::named) order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, values: &[f64]) {
        let mut off = 0;
        self.for_each_mut(|_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        debug_assert_eq!(off, values.len());
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &MambaParams, scale: f64) {
        self.zip_mut(other, |_, a, b| a.add_scaled(b, scale));
    }

    pub fn sq_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sq_norm()).sum()
    }

    /// Checks shapes against `cfg` and the `a ≥ 0` constraint.
    pub fn validate(&self, cfg: &MambaConfig) -> Result<()> {
        let expected = MambaParams::zeros(cfg);
        let ours = self.named();
        let theirs = expected.named();
        if ours.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} tensors, configuration needs {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ename, e)) in ours.iter().zip(&theirs) {
            if name != ename || t.shape() != e.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {} but configuration needs {}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        if !(self.a.item() >= 0.0) {
            return Err(Error::Parameter(format!("a must be non-negative, got {}", self.a.item())));
        }
        Ok(())
    }
}

/// How weights are drawn before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Embedding rows from N(0, 1); every matrix and the `w_Δ` vector from
    /// U(-1/√fan_in, 1/√fan_in), where fan_in is the column count.
    #[default]
    FanIn,
    /// Every weight from N(0, std).
    Gaussian { std: f64 },
}

/// Draws weights per `scheme`, then sets `a = 0.5` and `δ` with
/// `softplus(δ) = 1`.
///
/// With the L1 head the embedding and head entries are drawn as absolute
/// values so the initial logits are positive.
pub fn init_params_with(cfg: &MambaConfig, scheme: InitScheme, rng: &mut Rng) -> Result<MambaParams> {
    cfg.validate()?;
    let mut params = MambaParams::zeros(cfg);
    match scheme {
        InitScheme::Gaussian { std } => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(format!("init std {std}: {e}")))?;
            params.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng)));
        }
        InitScheme::FanIn => {
            let unit = Normal::new(0.0, 1.0).expect("valid std");
            params.for_each_mut(|name, t| {
                if name == "embedding" {
                    t.data_mut().iter_mut().for_each(|v| *v = unit.sample(rng));
                    return;
                }
                let fan_in = match t.shape() {
                    Shape::Matrix(_, c) => c,
                    Shape::Vector(n) => n,
                    Shape::Scalar => 1,
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                t.data_mut().iter_mut().for_each(|v| *v = uniform.sample(rng));
            });
        }
    }
    params.a = Tensor::scalar(INIT_A);
    params.delta = Tensor::scalar(softplus_inverse(1.0));
    if cfg.head == Head::L1norm {
        for t in [&mut params.embedding, &mut params.head] {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        }
    }
    Ok(params)
}

/// [`init_params_with`] under the default [`InitScheme`].
pub fn init_params(cfg: &MambaConfig, rng: &mut Rng) -> Result<MambaParams> {
    init_params_with(cfg, InitScheme::default(), rng)
}

/// Serialized tensor: dimension list plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: configuration block plus named flat arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: MambaConfig,
    pub params: BTreeMap<String, NamedArray>,
    /// Training iterations completed when the checkpoint was written.
    #[serde(default)]
    pub iteration: usize,
}

impl Checkpoint {
    pub fn new(config: MambaConfig, params: &MambaParams, iteration: usize) -> Self {
        let params = params
            .named()
            .into_iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    NamedArray {
                        shape: t.shape().dims(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint { config, params, iteration }
    }

    pub fn to_params(&self) -> Result<MambaParams> {
        self.config.validate()?;
        let mut params = MambaParams::zeros(&self.config);
        let mut missing = Vec::new();
        let mut err = None;
        params.for_each_mut(|name, t| match self.params.get(name) {
            Some(arr) => match Shape::from_dims(&arr.shape).and_then(|s| Tensor::new(s, arr.data.clone())) {
                Ok(v) if v.shape() == t.shape() => *t = v,
                Ok(v) => {
                    err.get_or_insert(Error::Shape(format!("{name}: stored {} expected {}", v.shape(), t.shape())));
                }
                Err(e) => {
                    err.get_or_insert(e);
                }
            },
            None => missing.push(name),
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Parameter(format!("checkpoint is missing {missing:?}")));
        }
        let known: Vec<&str> = params.named().iter().map(|(n, _)| *n).collect();
        if let Some(extra) = self.params.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Parameter(format!("checkpoint has unknown tensor {extra}")));
        }
        params.validate(&self.config)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
