//! Online next-token training: a fresh batch of kernels and sequences every
//! iteration, AdamW with a cosine schedule, periodic held-out evaluation
//! against the add-β oracle.

mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, cosine_lr, OptimizerConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::markov::{sample_batch, sample_switching_batch, SwitchingConfig, TokenSequence};
use crate::model::{batch_loss, batch_loss_grad, init_params_with, InitScheme, MambaConfig, MambaParams, Model, PredictionTrace};
use crate::oracle::{oracle_loss, switching_oracle_loss};
use crate::par::Execution;
use crate::rng::{self, tag};

/// Mean negative log-likelihood of `seq[t]` under `trace.probs[t-1]` for
/// `t ≥ start` (0-based token index, so `start = k` scores `x_{k+1}` onward).
pub fn cross_entropy_loss(trace: &PredictionTrace, seq: &TokenSequence, start: usize) -> Result<f64> {
    if start == 0 || start >= seq.len() {
        return Err(Error::Contract(format!("no scored positions in length {} from {start}", seq.len())));
    }
    if trace.len() + 1 < seq.len() {
        return Err(Error::Contract(format!(
            "trace of length {} does not cover {} tokens",
            trace.len(),
            seq.len()
        )));
    }
    let mut total = 0.0;
    for t in start..seq.len() {
        let p = trace.probs[t - 1][seq.tokens[t] as usize];
        if p <= 0.0 {
            return Err(Error::InfiniteLoss { position: t });
        }
        total -= p.ln();
    }
    Ok(total / (seq.len() - start) as f64)
}

/// Where training sequences come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Markov order `k`; scoring starts after the first `k` tokens.
    pub order: usize,
    pub beta: f64,
    pub length: usize,
    pub batch: usize,
    /// Switch probability of the switching process; plain chains if absent.
    #[serde(default)]
    pub p_switch: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            order: 1,
            beta: 1.0,
            length: 256,
            batch: 64,
            p_switch: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length <= self.order {
            return Err(Error::Parameter(format!(
                "length {} leaves no positions past order {}",
                self.length, self.order
            )));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        self.switching_config(self.length).map(|c| c.validate()).transpose()?;
        if self.order == 0 || !(self.beta > 0.0) {
            return Err(Error::Parameter("order ≥ 1 and beta > 0 required".into()));
        }
        Ok(())
    }

    fn switching_config(&self, length: usize) -> Option<SwitchingConfig> {
        self.p_switch.map(|p_switch| SwitchingConfig {
            order: self.order,
            beta: self.beta,
            p_switch,
            length,
        })
    }

    pub fn alphabet(&self) -> usize {
        if self.p_switch.is_some() {
            3
        } else {
            2
        }
    }

    /// `batch` sequences from the stream `seed`.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Vec<TokenSequence>> {
        match self.switching_config(self.length) {
            Some(cfg) => sample_switching_batch(&cfg, batch, seed),
            None => sample_batch(self.order, self.beta, self.length, batch, seed),
        }
    }

    /// Bayes-optimal loss on `sequences`.
    pub fn oracle_loss(&self, sequences: &[TokenSequence]) -> Result<f64> {
        match self.p_switch {
            Some(p) => switching_oracle_loss(sequences, self.order, self.beta, p),
            None => oracle_loss(sequences, self.order, self.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: MambaConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Final learning rate as a fraction of the peak.
    #[serde(default)]
    pub lr_min_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_iterations() -> usize {
    10_000
}

fn default_eval_every() -> usize {
    500
}

fn default_eval_batch() -> usize {
    256
}

impl TrainConfig {
    pub fn new(model: MambaConfig, data: DataConfig) -> Self {
        TrainConfig {
            model,
            data,
            optimizer: OptimizerConfig::default(),
            init: InitScheme::default(),
            iterations: default_iterations(),
            lr_min_fraction: 0.0,
            seed: 0,
            eval_every: default_eval_every(),
            eval_batch: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        if self.iterations == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Parameter("iterations, eval_every and eval_batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_min_fraction) {
            return Err(Error::Parameter(format!("lr_min_fraction {} outside [0, 1]", self.lr_min_fraction)));
        }
        if self.model.alphabet != self.data.alphabet() {
            return Err(Error::Parameter(format!(
                "model alphabet {} does not match the data alphabet {}",
                self.model.alphabet,
                self.data.alphabet()
            )));
        }
        Ok(())
    }

    /// Learning rate of update number `iter + 1`.
    pub fn lr(&self, iter: usize) -> f64 {
        let lr = self.optimizer.lr;
        cosine_lr(iter, self.iterations, lr, lr * self.lr_min_fraction)
    }

    /// The held-out evaluation batch.
    pub fn eval_data(&self) -> Result<Vec<TokenSequence>> {
        self.data.sample(self.eval_batch, rng::derive(self.seed, &[tag::EVAL]))
    }

    /// The training batch of update `iter + 1`.
    pub fn train_data(&self, iter: usize) -> Result<Vec<TokenSequence>> {
        self.data
            .sample(self.data.batch, rng::derive(self.seed, &[tag::TRAIN, iter as u64]))
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Updates applied so far.
    pub iter: usize,
    /// Learning rate of the latest update (of the first one at `iter = 0`).
    pub lr: f64,
    /// Mean training loss since the previous row; absent at `iter = 0`.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub loss_gap: f64,
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: MambaParams,
    pub opt: OptimizerState,
    pub iteration: usize,
    pub exec: Execution,
    eval_batch: Vec<TokenSequence>,
    eval_oracle: f64,
    window_loss: f64,
    window_len: usize,
}

impl Trainer {
    /// Fresh parameters from the seeded initialization.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params_with(&cfg.model, cfg.init, &mut rng::stream(cfg.seed, &[tag::INIT]))?;
        Trainer::resume(cfg, params, None, 0)
    }

    /// Continues from saved parameters and optimizer moments. Runs resumed at
    /// an evaluation boundary reproduce the uninterrupted log exactly.
    pub fn resume(cfg: TrainConfig, params: MambaParams, opt: Option<OptimizerState>, iteration: usize) -> Result<Self> {
        cfg.validate()?;
        params.validate(&cfg.model)?;
        let opt = opt.unwrap_or_else(|| OptimizerState::new(&params));
        if opt.m.len() != params.num_values() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        let eval_batch = cfg.eval_data()?;
        let eval_oracle = cfg.data.oracle_loss(&eval_batch)?;
        Ok(Trainer {
            cfg,
            params,
            opt,
            iteration,
            exec: Execution::default(),
            eval_batch,
            eval_oracle,
            window_loss: 0.0,
            window_len: 0,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Oracle loss on the held-out batch.
    pub fn eval_oracle_loss(&self) -> f64 {
        self.eval_oracle
    }

    pub fn eval_batch(&self) -> &[TokenSequence] {
        &self.eval_batch
    }

    /// Applies one update and returns its training loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.cfg.train_data(self.iteration)?;
        let lr = self.cfg.lr(self.iteration);
        let model = Model::new(&self.params, &self.cfg.model)?;
        let (loss, mut grads) = batch_loss_grad(&model, &batch, self.cfg.data.order, self.exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration + 1,
            });
        }
        if let Some(c) = self.cfg.optimizer.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, &self.cfg.optimizer)?;
        // keep a_t ≤ 1
        let a = &mut self.params.a.data_mut()[0];
        *a = a.max(0.0);
        self.iteration += 1;
        self.window_loss += loss;
        self.window_len += 1;
        Ok(loss)
    }

    /// Held-out loss and its gap to the oracle.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let model = Model::new(&self.params, &self.cfg.model)?;
        let loss = batch_loss(&model, &self.eval_batch, self.cfg.data.order, self.exec)?;
        Ok((loss, (loss - self.eval_oracle).abs()))
    }

    /// Evaluates and closes the current logging window.
    pub fn log_row(&mut self) -> Result<MetricsRow> {
        let (eval_loss, loss_gap) = self.evaluate()?;
        let train_loss = (self.window_len > 0).then(|| self.window_loss / self.window_len as f64);
        self.window_loss = 0.0;
        self.window_len = 0;
        Ok(MetricsRow {
            iter: self.iteration,
            lr: self.cfg.lr(self.iteration.saturating_sub(1)),
            train_loss,
            eval_loss,
            loss_gap,
        })
    }

    /// Trains to the configured iteration count. `on_row` sees every log row
    /// as it is produced, together with the trainer (for checkpointing).
    pub fn run(&mut self, on_row: impl FnMut(&MetricsRow, &Trainer) -> Result<()>) -> Result<Vec<MetricsRow>> {
        self.run_until(self.cfg.iterations, on_row)
    }

    /// Like [`Trainer::run`], but stops once `stop` updates have been applied.
    /// Stopping on a multiple of `eval_every` leaves the trainer exactly at a
    /// log row, which is where checkpoints are taken.
    pub fn run_until(&mut self, stop: usize, mut on_row: impl FnMut(&MetricsRow, &Trainer) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let stop = stop.min(self.cfg.iterations);
        let mut log = Vec::new();
        if self.iteration == 0 {
            let row = self.log_row()?;
            on_row(&row, self)?;
            log.push(row);
        }
        while self.iteration < stop {
            self.step()?;
            if self.iteration.is_multiple_of(self.cfg.eval_every) || self.is_done() {
                let row = self.log_row()?;
                on_row(&row, self)?;
                log.push(row);
            }
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final parameters and the log.
pub fn train(cfg: TrainConfig) -> Result<(MambaParams, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(cfg)?;
    let log = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.params, log))
}

pub const METRICS_HEADER: &str = "iter,lr,train_loss,eval_loss,loss_gap";

/// Formats a metrics row as a CSV line (no newline).
pub fn metrics_line(row: &MetricsRow) -> String {
    let train = row.train_loss.map(|v| format!("{v}")).unwrap_or_default();
    format!("{},{},{},{},{}", row.iter, row.lr, train, row.eval_loss, row.loss_gap)
}

/// Appends `row` to the CSV at `path`, writing the header first if needed.
pub fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", metrics_line(row))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::markov::TokenSequence;

    fn uniform_trace(len: usize) -> PredictionTrace {
        PredictionTrace {
            probs: vec![vec![0.5, 0.5]; len],
            a_t: vec![1.0; len],
            diagnostics: None,
        }
    }

    #[test]
    fn uniform_predictions_cost_ln2() {
        let seq = TokenSequence::binary(vec![0, 1, 1, 0, 1]);
        let loss = cross_entropy_loss(&uniform_trace(5), &seq, 1).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let seq = TokenSequence::binary(vec![0, 1, 0]);
        let trace = PredictionTrace {
            probs: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            a_t: vec![1.0; 2],
            diagnostics: None,
        };
        assert_eq!(cross_entropy_loss(&trace, &seq, 1).unwrap(), 0.0);
        let wrong = PredictionTrace {
            probs: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            a_t: vec![1.0; 2],
            diagnostics: None,
        };
        assert!(matches!(
            cross_entropy_loss(&wrong, &seq, 1),
            Err(Error::InfiniteLoss { position: 1 })
        ));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-18);
    }

    fn scalar_problem() -> (MambaParams, MambaConfig) {
        let cfg = MambaConfig::zero(1, 1, 1, 1);
        (MambaParams::zeros(&cfg), cfg)
    }

    #[test]
    fn null_update_and_pure_decay() {
        let (mut p, _) = scalar_problem();
        p.w_o = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let before = p.clone();
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, before);
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.w_o.item(), 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let (mut p, _) = scalar_problem();
        let mut st = OptimizerState::new(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..500 {
            let w = p.w_o.item();
            let mut g = p.zeros_like();
            g.w_o.data_mut()[0] = 2.0 * (w - 3.0);
            adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        }
        assert!((p.w_o.item() - 3.0).abs() < 1e-3, "{}", p.w_o.item());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut p, _) = scalar_problem();
        let mut g = p.zeros_like();
        g.head.data_mut()[1] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, 0.1, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "head"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (p, _) = scalar_problem();
        let mut g = p.zeros_like();
        g.w_o.data_mut()[0] = 3.0;
        g.head.data_mut()[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-15);
    }

    fn tiny_config() -> TrainConfig {
        let data = DataConfig {
            order: 1,
            beta: 1.0,
            length: 24,
            batch: 4,
            p_switch: None,
        };
        TrainConfig {
            iterations: 6,
            eval_every: 2,
            eval_batch: 8,
            seed: 5,
            ..TrainConfig::new(MambaConfig::full(4, 4, 1, 2), data)
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_config();
        let (p1, log1) = train(cfg.clone()).unwrap();
        let (p2, log2) = train(cfg.clone()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert_eq!(log1.len(), 4);
        assert!(log1[0].train_loss.is_none());

        let mut first = Trainer::new(cfg.clone()).unwrap();
        let mut saved = None;
        first
            .run(|row, t| {
                if row.iter == 2 {
                    saved = Some((t.params.clone(), t.opt.clone()));
                }
                Ok(())
            })
            .unwrap();
        let (params, opt) = saved.unwrap();
        let mut resumed = Trainer::resume(cfg, params, Some(opt), 2).unwrap();
        let tail = resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(tail, log1[2..].to_vec());
        assert_eq!(resumed.params, p1);
    }

    #[test]
    fn sequential_and_parallel_training_agree() {
        let cfg = tiny_config();
        let mut a = Trainer::new(cfg.clone()).unwrap().with_execution(Execution::Sequential);
        let mut b = Trainer::new(cfg).unwrap().with_execution(Execution::Parallel);
        assert_eq!(a.run(|_, _| Ok(())).unwrap(), b.run(|_, _| Ok(())).unwrap());
    }

    #[test]
    fn rejects_mismatched_alphabet() {
        let mut cfg = tiny_config();
        cfg.data.p_switch = Some(0.1);
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        cfg.model = cfg.model.with_alphabet(3);
        cfg.validate().unwrap();
    }
}
