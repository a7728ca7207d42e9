//! Window-order grid: one checkpointed training run per `(k, w, seed)`
//! cell. Cells run on up to `jobs` worker threads and resume individually.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use markov_mamba::metrics::{sweep_cells, write_sweep_csv, CellKey, SweepCell, SweepResult, SWEEP_PASS_GAP};
use markov_mamba::par::Execution;

use crate::config::ExperimentConfig;
use crate::output::write_json;
use crate::train::{self, RunFiles, RunOptions, RunState};

pub fn cell_config(base: &ExperimentConfig, key: CellKey) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.data.order = key.order;
    cfg.model.window = key.window;
    cfg.train.seed = key.seed;
    cfg
}

/// Trains every cell under `dir/cells/<id>` and writes `sweep.json` and
/// `sweep.csv`. A cell that errors is recorded as failed.
pub fn run(base: &ExperimentConfig, dir: &Path, jobs: usize, exec: Execution, quiet: bool) -> anyhow::Result<SweepResult> {
    base.validate()?;
    let s = &base.sweep;
    let keys = sweep_cells(&s.orders, &s.windows, &s.seeds);
    for &key in &keys {
        cell_config(base, key).validate()?;
    }
    let jobs = jobs.clamp(1, keys.len());
    // one cell per worker; inner batches only go parallel when cells do not
    let inner = if jobs > 1 { Execution::Sequential } else { exec };

    let next = AtomicUsize::new(0);
    let cells: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; keys.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&key) = keys.get(i) else { break };
                let cell = train_cell(base, key, dir, inner, quiet);
                if !quiet {
                    match (&cell.loss_gap, &cell.error) {
                        (Some(g), _) => eprintln!("cell {} gap {g:.5} pass {}", key.id(), cell.pass),
                        (_, Some(e)) => eprintln!("cell {} failed: {e}", key.id()),
                        _ => {}
                    }
                }
                cells.lock().expect("no worker panics while holding the lock")[i] = Some(cell);
            });
        }
    });
    let cells = cells
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();

    let result = SweepResult {
        orders: s.orders.clone(),
        windows: s.windows.clone(),
        seeds: s.seeds.clone(),
        pass_gap: SWEEP_PASS_GAP,
        cells,
    };
    write_json(&dir.join("sweep.json"), &result)?;
    write_sweep_csv(&dir.join("sweep.csv"), &result)?;
    Ok(result)
}

fn train_cell(base: &ExperimentConfig, key: CellKey, dir: &Path, exec: Execution, quiet: bool) -> SweepCell {
    let outcome = (|| -> anyhow::Result<f64> {
        let cell_dir = dir.join("cells").join(key.id());
        std::fs::create_dir_all(&cell_dir)?;
        let opts = RunOptions {
            fresh: false,
            stop_after: None,
            exec,
            quiet: true,
        };
        if !quiet {
            eprintln!("cell {} starting", key.id());
        }
        match train::run(&RunFiles::new(cell_dir), &cell_config(base, key), opts)? {
            RunState::Complete(summary) => Ok(summary.final_row.loss_gap),
            RunState::Stopped { iteration } => anyhow::bail!("stopped early at iteration {iteration}"),
        }
    })();
    match outcome {
        Ok(gap) => SweepCell::from_gap(key, Ok(gap)),
        Err(e) => SweepCell {
            key,
            loss_gap: None,
            error: Some(format!("{e:#}")),
            pass: false,
        },
    }
}
