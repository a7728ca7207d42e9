//! Measurements of a trained (or constructed) model against the
//! Bayes-optimal reference on the held-out batch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use markov_mamba::metrics::{
    at_trajectory, batch_cross_entropy, l1_distance_between, match_curve_between, write_at_csv, write_match_curve_csv, write_summary_csv,
    AtTrajectory, Predictor, Reference,
};
use markov_mamba::model::{Checkpoint, MambaConfig, MambaParams, Model};
use markov_mamba::par::Execution;

use crate::config::ExperimentConfig;
use crate::output::{read_json, write_json};
use crate::usage;

/// What is being evaluated. Only one exists per invocation, so the size
/// difference between variants does not matter.
#[allow(clippy::large_enum_variant)]
pub enum Subject {
    Model {
        params: MambaParams,
        config: MambaConfig,
    },
    /// The reference estimator itself; its gap is zero by construction.
    Oracle,
}

impl Subject {
    /// `oracle` is the sentinel for the reference; anything else is a
    /// checkpoint file or a run directory holding `checkpoint.json`.
    pub fn load(source: &str) -> anyhow::Result<Self> {
        if source == "oracle" {
            return Ok(Subject::Oracle);
        }
        let path = checkpoint_path(Path::new(source));
        if !path.is_file() {
            return Err(usage(format!("checkpoint {} not found", path.display())));
        }
        let ck: Checkpoint = read_json(&path).map_err(|e| usage(e.to_string()))?;
        let params = ck.to_params().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(Subject::Model { params, config: ck.config })
    }
}

pub fn checkpoint_path(source: &Path) -> PathBuf {
    if source.is_dir() {
        source.join("checkpoint.json")
    } else {
        source.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub sequences: usize,
    pub eval_loss: f64,
    pub oracle_loss: f64,
    pub loss_gap: f64,
    pub l1_distance: f64,
    /// Largest `|model - oracle|` of `P(1 | ·)` on the curve sequence, per
    /// conditioning token.
    pub curve_max_gap: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_a_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_t_at_switch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_t_elsewhere: Option<f64>,
}

impl EvalSummary {
    fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![
            ("sequences", self.sequences as f64),
            ("eval_loss", self.eval_loss),
            ("oracle_loss", self.oracle_loss),
            ("loss_gap", self.loss_gap),
            ("l1_distance", self.l1_distance),
            ("curve_max_gap_x0", self.curve_max_gap[0]),
            ("curve_max_gap_x1", self.curve_max_gap[1]),
        ];
        let optional = [
            ("mean_a_t", self.mean_a_t),
            ("a_t_at_switch", self.a_t_at_switch),
            ("a_t_elsewhere", self.a_t_elsewhere),
        ];
        rows.extend(optional.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))));
        rows
    }
}

/// Evaluates `subject` on the config's held-out batch and writes the CSVs
/// and `eval.json` into `out`.
pub fn evaluate(subject: &Subject, cfg: &ExperimentConfig, out: &Path, exec: Execution) -> anyhow::Result<EvalSummary> {
    cfg.validate()?;
    let tcfg = cfg.train_config();
    let batch = tcfg.eval_data()?;
    let reference = Reference::for_training(&tcfg);
    let model = match subject {
        Subject::Model { params, config } => {
            if config.alphabet != tcfg.data.alphabet() {
                return Err(usage(format!(
                    "checkpoint alphabet {} does not match the data alphabet {}",
                    config.alphabet,
                    tcfg.data.alphabet()
                )));
            }
            Some(Model::new(params, config)?)
        }
        Subject::Oracle => None,
    };
    let predictor: &dyn Predictor = match &model {
        Some(m) => m,
        None => &reference,
    };
    let k = reference.order();
    let eval_loss = batch_cross_entropy(predictor, &batch, k, exec)?;
    let oracle_loss = batch_cross_entropy(&reference, &batch, k, exec)?;
    let l1_distance = l1_distance_between(predictor, &reference, &batch, exec)?;

    std::fs::create_dir_all(out)?;
    let curve_seq = batch.get(cfg.eval.curve_sequence).ok_or_else(|| {
        usage(format!(
            "curve_sequence {} outside the batch of {}",
            cfg.eval.curve_sequence,
            batch.len()
        ))
    })?;
    let mut curve_max_gap = [0.0; 2];
    for condition in [0u8, 1] {
        let curve = match_curve_between(predictor, &reference, curve_seq, condition)?;
        curve_max_gap[condition as usize] = curve.max_abs_gap();
        write_match_curve_csv(&out.join(format!("match_curve_x{condition}.csv")), &curve)?;
    }

    let mut summary = EvalSummary {
        sequences: batch.len(),
        eval_loss,
        oracle_loss,
        loss_gap: (eval_loss - oracle_loss).abs(),
        l1_distance,
        curve_max_gap,
        mean_a_t: None,
        a_t_at_switch: None,
        a_t_elsewhere: None,
    };
    if let Subject::Model { params, config } = subject {
        let trajectories = batch
            .iter()
            .map(|s| at_trajectory(params, config, s))
            .collect::<Result<Vec<_>, _>>()?;
        write_at_csv(&out.join("a_t.csv"), &trajectories[cfg.eval.curve_sequence])?;
        summary.mean_a_t = Some(mean_a_t(&trajectories, cfg.eval.at_from));
        if tcfg.data.p_switch.is_some() {
            let (at_switch, elsewhere) = pooled(&trajectories).split_means();
            summary.a_t_at_switch = Some(at_switch).filter(|v| v.is_finite());
            summary.a_t_elsewhere = Some(elsewhere).filter(|v| v.is_finite());
        }
    }
    write_summary_csv(&out.join("summary.csv"), &summary.rows())?;
    write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

fn mean_a_t(trajectories: &[AtTrajectory], from: usize) -> f64 {
    trajectories.iter().map(|t| t.mean_from(from)).sum::<f64>() / trajectories.len() as f64
}

/// All trajectories concatenated, so split means pool every position.
fn pooled(trajectories: &[AtTrajectory]) -> AtTrajectory {
    AtTrajectory {
        a_t: trajectories.iter().flat_map(|t| t.a_t.iter().copied()).collect(),
        is_switch: trajectories.iter().flat_map(|t| t.is_switch.iter().copied()).collect(),
    }
}
