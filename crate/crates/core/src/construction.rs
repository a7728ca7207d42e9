//! Explicit MambaZero parameters that reproduce add-β smoothing on
//! first-order binary chains up to a KL slack of `ε`, and an exhaustive
//! verifier for them.
//!
//! With `a = 0` the state never decays, so `H_t` is a sum of rank-one
//! updates, one per position. A window-2 convolution on `x̃` and `b` turns
//! each update into a function of the transition `(x_{s-1}, x_s)`; with the
//! kernel conditions below, the column of `H_t` selected by `c_t = e_{x_t}`
//! holds the transition counts out of `x_t`, shifted by `β`, up to a single
//! boundary term of relative size `βε` that appears only when
//! `x_1 = x_t`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inverse, Tensor};
use crate::error::{Error, Result};
use crate::markov::TokenSequence;
use crate::metrics::kl_divergence;
use crate::model::{MambaConfig, MambaParams, Model, RecurrentState};
use crate::oracle::{add_beta_predict, TransitionCounts};
use crate::par::{self, Execution};

/// Positions where the construction must match add-β exactly are held to
/// this KL.
pub const EXACT_TOLERANCE: f64 = 1e-12;

/// Kernel coefficients, head scales and embedding entries of the
/// construction for one `(β, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructionSpec {
    pub beta: f64,
    pub epsilon: f64,
    /// `conv_X` weight on the previous step.
    pub alpha0: f64,
    /// `conv_X` weight on the current step.
    pub alpha1: f64,
    /// `conv_B` weight on the previous step.
    pub gamma0: f64,
    /// `conv_B` weight on the current step.
    pub gamma1: f64,
    pub c0: f64,
    pub c1: f64,
    pub e00: f64,
    pub e01: f64,
    pub e10: f64,
    pub e11: f64,
}

impl ConstructionSpec {
    /// Solves the kernel conditions in closed form with `α_1 = γ_1 = 1`
    /// and `c_0 = c_1 = 1`.
    pub fn new(beta: f64, epsilon: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Parameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        let s = beta * epsilon;
        let (alpha1, gamma1, c) = (1.0, 1.0, 1.0);
        let alpha0 = -(s / (1.0 + s)).sqrt();
        let gamma0 = -alpha1 * gamma1 / alpha0;
        let k = alpha0 * gamma1 + alpha1 * gamma0;
        let same = k * beta * c - alpha1 * gamma1 * c;
        let cross = k * beta * c - alpha0 * gamma1 * c;
        let spec = ConstructionSpec {
            beta,
            epsilon,
            alpha0,
            alpha1,
            gamma0,
            gamma1,
            c0: c,
            c1: c,
            e00: same,
            e01: cross,
            e10: cross,
            e11: same,
        };
        spec.check()?;
        Ok(spec)
    }

    /// `α_0 γ_1 + α_1 γ_0`
    pub fn count_scale(&self) -> f64 {
        self.alpha0 * self.gamma1 + self.alpha1 * self.gamma0
    }

    /// Verifies the kernel conditions and that the two embeddings are
    /// linearly independent.
    pub fn check(&self) -> Result<()> {
        let k = self.count_scale();
        let fail = |what: &str| {
            Err(Error::Parameter(format!(
                "construction for beta={} epsilon={}: {what}",
                self.beta, self.epsilon
            )))
        };
        if (self.alpha0 * self.gamma0 + self.alpha1 * self.gamma1).abs() > 1e-12 {
            return fail("diagonal kernel products do not cancel");
        }
        if !(k > 0.0) {
            return fail("count scale is not positive");
        }
        if self.alpha0 == self.alpha1 {
            return fail("previous and current conv weights coincide");
        }
        if (self.alpha0 * self.gamma1 / k + self.beta * self.epsilon).abs() > 1e-12 {
            return fail("boundary ratio differs from -beta*epsilon");
        }
        let det = self.e00 * self.e11 - self.e01 * self.e10;
        if det.abs() < 1e-12 * (self.e00.abs() + self.e01.abs()).powi(2).max(1e-300) {
            return fail("token embeddings are collinear");
        }
        Ok(())
    }

    /// `e_0 = (e00, e01)`, `e_1 = (e10, e11)`.
    pub fn embedding(&self) -> [[f64; 2]; 2] {
        [[self.e00, self.e01], [self.e10, self.e11]]
    }
}

/// MambaZero shape of the construction: `d = N = 2`, `e = 1`, `w = 2`,
/// `w_C = 1`, binary alphabet.
pub fn construction_config() -> MambaConfig {
    MambaConfig::zero(2, 2, 1, 2).with_window_c(1)
}

/// Parameters realizing [`ConstructionSpec::new`]`(beta, epsilon)`.
pub fn build_construction_params(beta: f64, epsilon: f64) -> Result<MambaParams> {
    params_from_spec(&ConstructionSpec::new(beta, epsilon)?)
}

pub fn params_from_spec(spec: &ConstructionSpec) -> Result<MambaParams> {
    spec.check()?;
    let cfg = construction_config();
    let [e0, e1] = spec.embedding();
    // columns e0, e1; W_X is its inverse so that e_i ↦ unit vector i
    let det = e0[0] * e1[1] - e1[0] * e0[1];
    let inv = [[e1[1] / det, -e1[0] / det], [-e0[1] / det, e0[0] / det]];
    let m = |rows: Vec<Vec<f64>>| Tensor::from_rows(&rows);
    let mut p = MambaParams::zeros(&cfg);
    p.embedding = m(vec![e0.to_vec(), e1.to_vec()])?;
    p.a = Tensor::scalar(0.0);
    p.delta = Tensor::scalar(softplus_inverse(1.0));
    p.w_x = m(vec![inv[0].to_vec(), inv[1].to_vec()])?;
    p.w_b = p.w_x.clone();
    p.w_c = m(vec![
        vec![spec.c0 * inv[0][0], spec.c0 * inv[0][1]],
        vec![spec.c1 * inv[1][0], spec.c1 * inv[1][1]],
    ])?;
    p.conv_x = m(vec![vec![spec.alpha0, spec.alpha1]; 2])?;
    p.conv_b = m(vec![vec![spec.gamma0, spec.gamma1]; 2])?;
    p.conv_c = m(vec![vec![1.0]; 2])?;
    p.w_o = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    p.head = p.w_o.clone();
    p.validate(&cfg)?;
    Ok(p)
}

/// Scales the previous-step weight of `conv_X` by `1 + relative`.
pub fn perturb_previous_weight(params: &mut MambaParams, relative: f64) {
    let w = params.conv_x.cols();
    for r in 0..params.conv_x.rows() {
        params.conv_x.row_mut(r)[w - 2] *= 1.0 + relative;
    }
}

/// The construction's prediction after `x_1^t`, written directly in terms
/// of the transition counts of `x_1^t`.
pub fn closed_form_prediction(first: u8, current: u8, counts: &TransitionCounts, beta: f64, epsilon: f64) -> [f64; 2] {
    let boundary = if first == current { beta * epsilon } else { 0.0 };
    let from = current as usize;
    let stay = counts.n[from][from] as f64 + beta;
    let leave = counts.n[from][1 - from] as f64 + beta + boundary;
    let total = stay + leave;
    if current == 0 {
        [stay / total, leave / total]
    } else {
        [leave / total, stay / total]
    }
}

/// Largest KL between the closed form and add-β over all count pairs with
/// entries up to `n_max`, for both current tokens and both first tokens.
pub fn closed_form_max_kl(beta: f64, epsilon: f64, n_max: u32) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for current in 0..2u8 {
        for first in 0..2u8 {
            for same in 0..=n_max {
                for other in 0..=n_max {
                    let mut counts = TransitionCounts::default();
                    let c = current as usize;
                    counts.n[c][c] = same;
                    counts.n[c][1 - c] = other;
                    let model = closed_form_prediction(first, current, &counts, beta, epsilon);
                    let total = (same + other) as f64 + 2.0 * beta;
                    let mut oracle = [0.0; 2];
                    oracle[c] = (same as f64 + beta) / total;
                    oracle[1 - c] = (other as f64 + beta) / total;
                    worst = worst.max(kl_divergence(&oracle, &model)?);
                }
            }
        }
    }
    Ok(worst)
}

/// A sequence prefix and the 1-based position scored on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub sequence: String,
    pub position: usize,
    pub kl: f64,
}

/// The model produced something other than a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sequence: String,
    pub position: usize,
    pub reason: String,
}

/// Outcome of [`verify_construction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub beta: f64,
    pub epsilon: f64,
    pub t_max: usize,
    /// Scored positions: `2 + 4 + … + 2^t_max`.
    pub positions: u64,
    pub max_kl: f64,
    pub witness: Option<Witness>,
    /// Positions with `x_1 ≠ x_t`.
    pub exact_match_count: u64,
    pub max_kl_exact: f64,
    pub exact_witness: Option<Witness>,
    /// Largest KL where `x_1 = x_t`.
    pub max_kl_boundary: f64,
    pub min_logit: f64,
    pub failure: Option<Failure>,
    pub certified: bool,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone)]
struct Partial {
    positions: u64,
    max_kl: f64,
    witness: Option<Witness>,
    exact_match_count: u64,
    max_kl_exact: f64,
    exact_witness: Option<Witness>,
    max_kl_boundary: f64,
    min_logit: f64,
    failure: Option<Failure>,
}

impl Partial {
    fn empty() -> Self {
        Partial {
            positions: 0,
            max_kl: 0.0,
            witness: None,
            exact_match_count: 0,
            max_kl_exact: 0.0,
            exact_witness: None,
            max_kl_boundary: 0.0,
            min_logit: f64::INFINITY,
            failure: None,
        }
    }

    /// Earlier parts win ties, so the merged result is independent of how
    /// the work was split.
    fn merge(mut self, other: Partial) -> Partial {
        self.positions += other.positions;
        self.exact_match_count += other.exact_match_count;
        if other.max_kl > self.max_kl {
            self.max_kl = other.max_kl;
            self.witness = other.witness;
        }
        if other.max_kl_exact > self.max_kl_exact {
            self.max_kl_exact = other.max_kl_exact;
            self.exact_witness = other.exact_witness;
        }
        self.max_kl_boundary = self.max_kl_boundary.max(other.max_kl_boundary);
        self.min_logit = self.min_logit.min(other.min_logit);
        if self.failure.is_none() {
            self.failure = other.failure;
        }
        self
    }
}

fn render(tokens: &[u8]) -> String {
    TokenSequence::binary(tokens.to_vec()).to_line()
}

struct Verifier<'m> {
    model: &'m Model<'m>,
    beta: f64,
    t_max: usize,
}

impl Verifier<'_> {
    /// Scores the last position of `prefix` and recurses into both children.
    fn visit(&self, prefix: &mut Vec<u8>, state: &RecurrentState, acc: &mut Partial) {
        let t = prefix.len();
        let mut state = state.clone();
        let tok = *prefix.last().expect("non-empty prefix");
        let out = match self.model.step(&mut state, tok) {
            Ok(out) => out,
            Err(e) => {
                acc.failure.get_or_insert(Failure {
                    sequence: render(prefix),
                    position: t,
                    reason: e.to_string(),
                });
                return;
            }
        };
        acc.positions += 1;
        acc.min_logit = out.logit.iter().copied().fold(acc.min_logit, f64::min);
        let sum: f64 = out.prob.iter().sum();
        if out.prob.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            acc.failure.get_or_insert(Failure {
                sequence: render(prefix),
                position: t,
                reason: format!("model output {:?} is not a distribution", out.prob),
            });
            return;
        }
        let seq = TokenSequence::binary(prefix.clone());
        let oracle = add_beta_predict(&seq, t, 1, self.beta).expect("valid binary prefix");
        let kl = match kl_divergence(&oracle, &out.prob) {
            Ok(kl) => kl,
            Err(e) => {
                acc.failure.get_or_insert(Failure {
                    sequence: render(prefix),
                    position: t,
                    reason: e.to_string(),
                });
                f64::INFINITY
            }
        };
        let witness = || {
            Some(Witness {
                sequence: render(prefix),
                position: t,
                kl,
            })
        };
        if kl > acc.max_kl || acc.witness.is_none() {
            acc.max_kl = acc.max_kl.max(kl);
            acc.witness = witness();
        }
        if prefix[0] != tok {
            acc.exact_match_count += 1;
            if kl > acc.max_kl_exact || acc.exact_witness.is_none() {
                acc.max_kl_exact = acc.max_kl_exact.max(kl);
                acc.exact_witness = witness();
            }
        } else {
            acc.max_kl_boundary = acc.max_kl_boundary.max(kl);
        }
        if t < self.t_max {
            for next in 0..2u8 {
                prefix.push(next);
                self.visit(prefix, &state, acc);
                prefix.pop();
            }
        }
    }
}

/// Runs the model on every binary sequence of length `1..=t_max`, reusing
/// the recurrent state along shared prefixes, and compares each prediction
/// with add-β. Subtrees below a fixed split depth are independent and run
/// through [`par::map`].
pub fn verify_construction(params: &MambaParams, beta: f64, epsilon: f64, t_max: usize, exec: Execution) -> Result<Certificate> {
    if t_max == 0 {
        return Err(Error::Parameter("t_max must be at least 1".into()));
    }
    if !(epsilon > 0.0) || !(beta > 0.0) {
        return Err(Error::Parameter("beta and epsilon must be positive".into()));
    }
    let start = Instant::now();
    let cfg = construction_config();
    let model = Model::new(params, &cfg)?;
    let verifier = Verifier {
        model: &model,
        beta,
        t_max,
    };

    // walk the top of the tree sequentially, hand out subtrees of depth `split`
    let split = t_max.min(4);
    let mut top = Partial::empty();
    let mut roots: Vec<(Vec<u8>, RecurrentState)> = vec![(Vec::new(), RecurrentState::new(&cfg))];
    for depth in 1..split {
        let mut next = Vec::with_capacity(roots.len() * 2);
        for (prefix, state) in &roots {
            for tok in 0..2u8 {
                let mut p = prefix.clone();
                p.push(tok);
                let mut s = state.clone();
                let mut one = Partial::empty();
                // score this node only: a shallow verifier stops at its own depth
                let shallow = Verifier {
                    model: &model,
                    beta,
                    t_max: depth,
                };
                shallow.visit(&mut p, &s, &mut one);
                top = top.merge(one);
                if model.step(&mut s, tok).is_ok() {
                    next.push((p, s));
                }
            }
        }
        roots = next;
    }
    let parts = par::map(exec, &roots, |(prefix, state)| {
        let mut acc = Partial::empty();
        for tok in 0..2u8 {
            let mut p = prefix.clone();
            p.push(tok);
            verifier.visit(&mut p, state, &mut acc);
        }
        acc
    });
    let total = parts.into_iter().fold(top, Partial::merge);
    let certified = total.failure.is_none() && total.max_kl <= epsilon && total.max_kl_exact <= EXACT_TOLERANCE;
    Ok(Certificate {
        beta,
        epsilon,
        t_max,
        positions: total.positions,
        max_kl: total.max_kl,
        witness: total.witness,
        exact_match_count: total.exact_match_count,
        max_kl_exact: total.max_kl_exact,
        exact_witness: total.exact_witness,
        max_kl_boundary: total.max_kl_boundary,
        min_logit: total.min_logit,
        failure: total.failure,
        certified,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
