//! Measurements that compare a model against the Bayes-optimal estimator.
//!
//! Every metric takes a [`Predictor`] so the oracle itself can stand in for
//! the model; distances against the oracle are then exactly zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{TokenSequence, SWITCH};
use crate::model::{MambaConfig, MambaParams, Model};
use crate::oracle::{add_beta_trace, csv_err, switching_trace};
use crate::par::{self, Execution};
use crate::train::{cross_entropy_loss, TrainConfig, Trainer};

/// Gap at or below which a sweep cell counts as having learned the
/// estimator.
pub const SWEEP_PASS_GAP: f64 = 0.05;

/// `Σ p ln(p / q)` in nats. Terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("KL between supports of size {} and {}", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InfiniteDivergence { p: pi });
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total.max(0.0))
}

pub fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Anything that maps a token sequence to next-token laws, one per prefix.
pub trait Predictor: Sync {
    /// `out[t-1]` is the law after reading `tokens[..t]`.
    fn predict(&self, tokens: &[u8]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Model<'_> {
    fn predict(&self, tokens: &[u8]) -> Result<Vec<Vec<f64>>> {
        Ok(self.trace(tokens, false)?.probs)
    }
}

/// The Bayes-optimal estimator for a data source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    AddBeta { order: usize, beta: f64 },
    Switching { order: usize, beta: f64, p_switch: f64 },
}

impl Reference {
    pub fn order(&self) -> usize {
        match *self {
            Reference::AddBeta { order, .. } | Reference::Switching { order, .. } => order,
        }
    }

    pub fn for_training(cfg: &TrainConfig) -> Self {
        let (order, beta) = (cfg.data.order, cfg.data.beta);
        match cfg.data.p_switch {
            Some(p_switch) => Reference::Switching { order, beta, p_switch },
            None => Reference::AddBeta { order, beta },
        }
    }
}

impl Predictor for Reference {
    fn predict(&self, tokens: &[u8]) -> Result<Vec<Vec<f64>>> {
        Ok(match *self {
            Reference::AddBeta { order, beta } => add_beta_trace(tokens, order, beta)?.iter().map(|p| p.to_vec()).collect(),
            Reference::Switching { order, beta, p_switch } => {
                switching_trace(tokens, order, beta, p_switch)?.iter().map(|p| p.to_vec()).collect()
            }
        })
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn trace_of(predictor: &dyn Predictor, seq: &TokenSequence) -> Result<crate::model::PredictionTrace> {
    let probs = predictor.predict(&seq.tokens)?;
    let len = probs.len();
    Ok(crate::model::PredictionTrace {
        probs,
        a_t: vec![f64::NAN; len],
        diagnostics: None,
    })
}

/// Mean cross-entropy of `predictor` on `batch`, positions `t ≥ k`.
pub fn batch_cross_entropy(predictor: &dyn Predictor, batch: &[TokenSequence], k: usize, exec: Execution) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let losses = par::map(exec, batch, |seq| cross_entropy_loss(&trace_of(predictor, seq)?, seq, k));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// `|L(model) - L(oracle)|` on the same batch.
pub fn loss_gap_between(predictor: &dyn Predictor, reference: &Reference, batch: &[TokenSequence], exec: Execution) -> Result<f64> {
    let k = reference.order();
    let model = batch_cross_entropy(predictor, batch, k, exec)?;
    let oracle = batch_cross_entropy(reference, batch, k, exec)?;
    Ok((model - oracle).abs())
}

/// Mean over sequences of the mean over `t ∈ [k, T-1]` of
/// `‖f(x_1^t) - P(·|x_1^t)‖_1`.
pub fn l1_distance_between(predictor: &dyn Predictor, reference: &Reference, batch: &[TokenSequence], exec: Execution) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let k = reference.order();
    let per_seq = par::map(exec, batch, |seq| -> Result<f64> {
        let model = predictor.predict(&seq.tokens)?;
        let oracle = reference.predict(&seq.tokens)?;
        if seq.len() <= k {
            return Err(Error::Contract(format!(
                "sequence of length {} has no positions past k={k}",
                seq.len()
            )));
        }
        Ok(mean((k.max(1)..seq.len()).map(|t| l1(&model[t - 1], &oracle[t - 1]))))
    });
    let mut total = 0.0;
    for v in per_seq {
        total += v?;
    }
    Ok(total / batch.len() as f64)
}

pub fn loss_gap(params: &MambaParams, cfg: &MambaConfig, batch: &[TokenSequence], k: usize, beta: f64) -> Result<f64> {
    let model = Model::new(params, cfg)?;
    loss_gap_between(&model, &Reference::AddBeta { order: k, beta }, batch, Execution::default())
}

pub fn l1_distance(params: &MambaParams, cfg: &MambaConfig, batch: &[TokenSequence], k: usize, beta: f64) -> Result<f64> {
    let model = Model::new(params, cfg)?;
    l1_distance_between(&model, &Reference::AddBeta { order: k, beta }, batch, Execution::default())
}

/// Model and oracle `P(1 | x_1^t)` at the positions where `x_t` equals the
/// conditioning token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCurve {
    pub condition: u8,
    /// 1-based positions.
    pub positions: Vec<usize>,
    pub model: Vec<f64>,
    pub oracle: Vec<f64>,
}

impl MatchCurve {
    pub fn max_abs_gap(&self) -> f64 {
        self.model.iter().zip(&self.oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn mean_abs_gap(&self) -> f64 {
        mean(self.model.iter().zip(&self.oracle).map(|(a, b)| (a - b).abs()))
    }
}

pub fn match_curve_between(predictor: &dyn Predictor, reference: &Reference, seq: &TokenSequence, condition: u8) -> Result<MatchCurve> {
    let model = predictor.predict(&seq.tokens)?;
    let oracle = reference.predict(&seq.tokens)?;
    let mut curve = MatchCurve {
        condition,
        positions: Vec::new(),
        model: Vec::new(),
        oracle: Vec::new(),
    };
    for t in reference.order().max(1)..=seq.len() {
        if seq.tokens[t - 1] == condition {
            curve.positions.push(t);
            curve.model.push(model[t - 1][1]);
            curve.oracle.push(oracle[t - 1][1]);
        }
    }
    Ok(curve)
}

pub fn match_curve(params: &MambaParams, cfg: &MambaConfig, seq: &TokenSequence, condition: u8, beta: f64) -> Result<MatchCurve> {
    let model = Model::new(params, cfg)?;
    match_curve_between(&model, &Reference::AddBeta { order: 1, beta }, seq, condition)
}

/// `a_t` along a sequence with switch positions marked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtTrajectory {
    pub a_t: Vec<f64>,
    pub is_switch: Vec<bool>,
}

impl AtTrajectory {
    /// Mean over 1-based positions `t ≥ from`.
    pub fn mean_from(&self, from: usize) -> f64 {
        mean(self.a_t.iter().skip(from.saturating_sub(1)).copied())
    }

    /// `(mean at switch tokens, mean elsewhere)`.
    pub fn split_means(&self) -> (f64, f64) {
        let at = |want: bool| mean(self.a_t.iter().zip(&self.is_switch).filter(|(_, &s)| s == want).map(|(a, _)| *a));
        (at(true), at(false))
    }
}

pub fn at_trajectory(params: &MambaParams, cfg: &MambaConfig, seq: &TokenSequence) -> Result<AtTrajectory> {
    let trace = Model::new(params, cfg)?.trace(&seq.tokens, false)?;
    Ok(AtTrajectory {
        a_t: trace.a_t,
        is_switch: seq.tokens.iter().map(|&t| t == SWITCH).collect(),
    })
}

/// One `(k, w, seed)` cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub order: usize,
    pub window: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("k{}-w{}-s{}", self.order, self.window, self.seed)
    }

    /// `base` with this cell's order, window and seed.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.data.order = self.order;
        cfg.model.window = self.window;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub key: CellKey,
    pub loss_gap: Option<f64>,
    pub error: Option<String>,
    pub pass: bool,
}

impl SweepCell {
    pub fn from_gap(key: CellKey, gap: Result<f64>) -> Self {
        match gap {
            Ok(g) => SweepCell {
                key,
                loss_gap: Some(g),
                error: None,
                pass: g <= SWEEP_PASS_GAP,
            },
            Err(e) => SweepCell {
                key,
                loss_gap: None,
                error: Some(e.to_string()),
                pass: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub orders: Vec<usize>,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pass_gap: f64,
    /// Row-major over (order, window, seed).
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, order: usize, window: usize, seed: u64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.key == CellKey { order, window, seed })
    }
}

pub fn sweep_cells(orders: &[usize], windows: &[usize], seeds: &[u64]) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for &order in orders {
        for &window in windows {
            for &seed in seeds {
                keys.push(CellKey { order, window, seed });
            }
        }
    }
    keys
}

/// Trains one cell sequentially and reports its final held-out gap.
pub fn train_cell(base: &TrainConfig, key: CellKey) -> SweepCell {
    let gap = (|| {
        let mut trainer = Trainer::new(key.config(base))?.with_execution(Execution::Sequential);
        let log = trainer.run(|_, _| Ok(()))?;
        Ok(log.last().expect("at least one row").loss_gap)
    })();
    SweepCell::from_gap(key, gap)
}

/// Trains one model per grid cell, cells in parallel. Failed cells are
/// recorded and the sweep continues.
pub fn window_order_sweep(orders: &[usize], windows: &[usize], seeds: &[u64], base: &TrainConfig, exec: Execution) -> SweepResult {
    let keys = sweep_cells(orders, windows, seeds);
    let cells = par::map(exec, &keys, |&key| train_cell(base, key));
    SweepResult {
        orders: orders.to_vec(),
        windows: windows.to_vec(),
        seeds: seeds.to_vec(),
        pass_gap: SWEEP_PASS_GAP,
        cells,
    }
}

pub fn write_match_curve_csv(path: &Path, curve: &MatchCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "condition", "model_p1", "oracle_p1"]).map_err(csv_err)?;
    for i in 0..curve.positions.len() {
        w.write_record([
            curve.positions[i].to_string(),
            curve.condition.to_string(),
            curve.model[i].to_string(),
            curve.oracle[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_at_csv(path: &Path, traj: &AtTrajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "a_t", "is_switch"]).map_err(csv_err)?;
    for (i, (a, s)) in traj.a_t.iter().zip(&traj.is_switch).enumerate() {
        w.write_record([(i + 1).to_string(), a.to_string(), (*s as u8).to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `name,value` rows.
pub fn write_summary_csv(path: &Path, rows: &[(&str, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (name, v) in rows {
        w.write_record([name.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["order", "window", "seed", "loss_gap", "pass", "error"])
        .map_err(csv_err)?;
    for c in &result.cells {
        w.write_record([
            c.key.order.to_string(),
            c.key.window.to_string(),
            c.key.seed.to_string(),
            c.loss_gap.map(|g| g.to_string()).unwrap_or_default(),
            c.pass.to_string(),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
