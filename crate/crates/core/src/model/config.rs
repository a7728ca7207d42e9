use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Embedding, selective SSM block with gating, gated MLP, linear head.
    Full,
    /// Embedding, convolution-only selectivity, linear state recurrence,
    /// linear head.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax,
    /// `logit / ||logit||_1` after clamping at [`L1_FLOOR`].
    L1norm,
}

/// How the MLP combines its two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpCombine {
    /// `W2 [ReLU(W1 u) ⊙ W3 u]`
    #[default]
    Product,
    /// `W2 [ReLU(W1 u) + W3 u]`
    Sum,
}

/// Logit floor of the L1 head.
pub const L1_FLOOR: f64 = 1e-12;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    /// Embedding dimension `d`.
    pub d: usize,
    /// State dimension `N`.
    pub state: usize,
    /// Expansion factor `e`; the SSM runs at width `e·d`.
    pub expand: usize,
    /// Convolution window of `x̃_t` and `b_t`.
    pub window: usize,
    /// Convolution window of `c_t`; defaults to `window`.
    #[serde(default)]
    pub window_c: Option<usize>,
    pub variant: Variant,
    pub head: Head,
    #[serde(default = "default_true")]
    pub use_conv: bool,
    #[serde(default = "default_true")]
    pub use_relu: bool,
    #[serde(default = "default_true")]
    pub use_gating: bool,
    #[serde(default)]
    pub mlp_combine: MlpCombine,
    /// 2 for `{0, 1}`, 3 for `{0, 1, S}`.
    pub alphabet: usize,
}

impl MambaConfig {
    pub fn full(d: usize, state: usize, expand: usize, window: usize) -> Self {
        MambaConfig {
            d,
            state,
            expand,
            window,
            window_c: None,
            variant: Variant::Full,
            head: Head::Softmax,
            use_conv: true,
            use_relu: true,
            use_gating: true,
            mlp_combine: MlpCombine::Product,
            alphabet: 2,
        }
    }

    /// MambaZero: no ReLU, no gating, no MLP, L1 head.
    pub fn zero(d: usize, state: usize, expand: usize, window: usize) -> Self {
        MambaConfig {
            variant: Variant::Zero,
            head: Head::L1norm,
            use_relu: false,
            use_gating: false,
            ..MambaConfig::full(d, state, expand, window)
        }
    }

    pub fn with_alphabet(mut self, alphabet: usize) -> Self {
        self.alphabet = alphabet;
        self
    }

    pub fn with_window_c(mut self, window_c: usize) -> Self {
        self.window_c = Some(window_c);
        self
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d
    }

    pub fn hidden(&self) -> usize {
        4 * self.d
    }

    pub fn window_c(&self) -> usize {
        self.window_c.unwrap_or(self.window)
    }

    /// Longest token history any convolution reads.
    pub fn history(&self) -> usize {
        if self.use_conv {
            self.window.max(self.window_c())
        } else {
            1
        }
    }

    pub fn relu_active(&self) -> bool {
        self.use_relu && self.variant == Variant::Full
    }

    pub fn gating_active(&self) -> bool {
        self.use_gating && self.variant == Variant::Full
    }

    pub fn has_mlp(&self) -> bool {
        self.variant == Variant::Full
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("state", self.state),
            ("expand", self.expand),
            ("window", self.window),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.window_c() == 0 {
            return Err(Error::Parameter("window_c must be at least 1".into()));
        }
        if !(2..=3).contains(&self.alphabet) {
            return Err(Error::Parameter(format!("alphabet size must be 2 or 3, got {}", self.alphabet)));
        }
        Ok(())
    }
}
