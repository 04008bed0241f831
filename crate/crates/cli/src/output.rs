//! Result files. Every CSV is a pure function of the results, so identical
//! runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use daisi::drift::NetDrift;
use daisi::io::{metrics_csv, save_model, write_ensemble};
use daisi::metrics::WindowSummary;
use daisi::training::TrainReport;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;
use crate::experiments::{CheckOutcome, GridResult, L63Result};

/// Creates the run directory and writes `config_echo.toml` into it.
pub fn prepare_run_dir(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir(kind);
    fs::create_dir_all(&dir)?;
    let mut echo = cfg.clone();
    echo.experiment = Some(kind);
    fs::write(dir.join("config_echo.toml"), echo.to_toml())?;
    Ok(dir)
}

/// `t_min,eps,<value>,seed`, one row per cell and repeat.
pub fn grid_csv(result: &GridResult, value: &str) -> String {
    let mut s = format!("t_min,eps,{value},seed\n");
    for r in &result.rows {
        s.push_str(&format!("{},{},{},{}\n", r.t_min, r.eps, r.value, r.seed));
    }
    s
}

pub const SUMMARY_HEADER: &str = "repeat,seed,steps,rmse,ens_rmse,crps,spread,ssr";

fn summary_row(label: &str, seed: &str, w: &WindowSummary) -> String {
    format!(
        "{label},{seed},{},{},{},{},{},{}\n",
        w.steps, w.rmse, w.ens_rmse, w.crps, w.spread, w.ssr
    )
}

/// Per-trajectory window summaries followed by their mean.
pub fn summary_csv(result: &L63Result) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (i, r) in result.repeats.iter().enumerate() {
        s.push_str(&summary_row(&i.to_string(), &r.seed.to_string(), &r.summary));
    }
    s.push_str(&summary_row("mean", "", &result.mean()));
    s
}

pub fn losses_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        s.push_str(&format!("{},{t},{v}\n", e + 1));
    }
    s
}

pub fn check_csv(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::from("check,statistic,threshold,passed\n");
    for c in outcomes {
        s.push_str(&format!("{},{},{},{}\n", c.name, c.statistic, c.threshold, c.passed()));
    }
    s
}

pub fn write_grid(dir: &Path, file: &str, value: &str, result: &GridResult) -> Result<(), CliError> {
    fs::write(dir.join(file), grid_csv(result, value))?;
    Ok(())
}

/// `metrics.csv` (summaries), `traces/repeat_<r>.csv` (per-step metrics) and,
/// when kept, `ensembles/repeat_<r>/step_<n>.ens`.
pub fn write_l63(dir: &Path, result: &L63Result) -> Result<(), CliError> {
    fs::write(dir.join("metrics.csv"), summary_csv(result))?;
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    for (i, r) in result.repeats.iter().enumerate() {
        fs::write(traces.join(format!("repeat_{i}.csv")), metrics_csv(&r.trace.reports))?;
        if !r.trace.ensembles.is_empty() {
            let ens_dir = dir.join("ensembles").join(format!("repeat_{i}"));
            fs::create_dir_all(&ens_dir)?;
            for (n, e) in r.trace.ensembles.iter().enumerate() {
                let mut f = fs::File::create(ens_dir.join(format!("step_{n}.ens")))?;
                write_ensemble(&mut f, e)?;
            }
        }
    }
    Ok(())
}

pub fn write_train(dir: &Path, model: &NetDrift, report: &TrainReport) -> Result<(), CliError> {
    save_model(&dir.join("model.bin"), model)?;
    fs::write(dir.join("losses.csv"), losses_csv(report))?;
    Ok(())
}

pub fn write_check(dir: &Path, outcomes: &[CheckOutcome]) -> Result<(), CliError> {
    fs::write(dir.join("check.csv"), check_csv(outcomes))?;
    Ok(())
}
