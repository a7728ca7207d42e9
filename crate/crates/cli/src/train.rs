//! Checkpointed training runs, shared by `train` and `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use markov_mamba::model::Checkpoint;
use markov_mamba::par::Execution;
use markov_mamba::train::{append_metrics, MetricsRow, OptimizerState, Trainer, METRICS_HEADER};

use crate::config::ExperimentConfig;
use crate::output::{read_json, write_json};
use crate::usage;

pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    pub fn optimizer(&self) -> PathBuf {
        self.dir.join("optimizer.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    /// Final log row, written once the run completes.
    pub fn summary(&self) -> PathBuf {
        self.dir.join("train_summary.json")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Discard any existing checkpoint in the run directory.
    pub fresh: bool,
    /// Stop after this many updates (rounded down to a log row).
    pub stop_after: Option<usize>,
    pub exec: Execution,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_row: MetricsRow,
}

pub enum RunState {
    Complete(TrainSummary),
    Stopped { iteration: usize },
}

/// Trains `cfg` in `files.dir`, resuming from the checkpoint there when one
/// exists for the same configuration.
pub fn run(files: &RunFiles, cfg: &ExperimentConfig, opts: RunOptions) -> anyhow::Result<RunState> {
    cfg.validate()?;
    let tcfg = cfg.train_config();
    if let Some(stop) = opts.stop_after {
        if stop % tcfg.eval_every != 0 {
            return Err(usage(format!(
                "--stop-after {stop} is not a multiple of eval_every {}",
                tcfg.eval_every
            )));
        }
    }

    let resumable = !opts.fresh && files.checkpoint().exists();
    let mut trainer = if resumable {
        let stored: ExperimentConfig = read_json(&files.config())?;
        if stored.run_key() != cfg.run_key() {
            return Err(usage(format!(
                "{} holds a run with a different configuration; pass --fresh or another --run-id",
                files.dir.display()
            )));
        }
        let ck: Checkpoint = read_json(&files.checkpoint())?;
        let opt: OptimizerState = read_json(&files.optimizer())?;
        if ck.iteration >= tcfg.iterations && files.summary().exists() {
            return Ok(RunState::Complete(read_json(&files.summary())?));
        }
        truncate_metrics(&files.metrics(), ck.iteration)?;
        let params = ck.to_params().context("loading checkpoint")?;
        if !opts.quiet {
            eprintln!("resuming {} at iteration {}", files.dir.display(), ck.iteration);
        }
        Trainer::resume(tcfg, params, Some(opt), ck.iteration)?
    } else {
        for path in [files.checkpoint(), files.optimizer(), files.metrics(), files.summary()] {
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        Trainer::new(tcfg)?
    }
    .with_execution(opts.exec);
    cfg.write(&files.config())?;

    let stop = opts.stop_after.unwrap_or(usize::MAX);
    let log = trainer.run_until(stop, |row, tr| {
        // checkpoint first: a crash between the two writes leaves a metrics
        // row that is dropped on resume, never a missing one
        write_json(&files.checkpoint(), &Checkpoint::new(tr.cfg.model, &tr.params, tr.iteration))
            .and_then(|_| write_json(&files.optimizer(), &tr.opt))
            .map_err(|e| markov_mamba::Error::Io(std::io::Error::other(e.to_string())))?;
        append_metrics(&files.metrics(), row)?;
        if !opts.quiet {
            eprintln!(
                "iter {:>6}  lr {:.2e}  eval {:.5}  gap {:.5}",
                row.iter, row.lr, row.eval_loss, row.loss_gap
            );
        }
        Ok(())
    })?;

    if trainer.is_done() {
        let final_row = match log.last() {
            Some(row) => row.clone(),
            None => trainer.log_row()?,
        };
        let summary = TrainSummary {
            iterations: trainer.iteration,
            final_row,
        };
        write_json(&files.summary(), &summary)?;
        Ok(RunState::Complete(summary))
    } else {
        Ok(RunState::Stopped {
            iteration: trainer.iteration,
        })
    }
}

/// Drops log rows past `iteration`, keeping the header.
fn truncate_metrics(path: &Path, iteration: usize) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let keep = line == METRICS_HEADER
            || line
                .split(',')
                .next()
                .and_then(|it| it.parse::<usize>().ok())
                .is_some_and(|it| it <= iteration);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    crate::output::write_atomic(path, kept.as_bytes())?;
    Ok(())
}
