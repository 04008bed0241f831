//! Experiment harness for the `daisi` filter: configuration, runners for the
//! Gaussian-mixture ablation, Lorenz '63 filtering, hyperparameter sweeps,
//! drift training and the linear-Gaussian oracle battery.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use config::{ExperimentConfig, ExperimentKind};
use error::CliError;

/// Validates, runs and persists one experiment. Returns a short report for
/// the terminal; a failing check battery is reported as [`CliError::CheckFailed`]
/// after its results have been written.
pub fn execute(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate(kind)?;
    let dir = output::prepare_run_dir(cfg, kind)?;
    let report = match kind {
        ExperimentKind::GmmAblation => {
            let res = experiments::run_gmm_ablation(cfg)?;
            output::write_grid(&dir, "heatmap.csv", "mmd", &res)?;
            format!(
                "best cell t_min = {}, eps = {} (mean mmd {:.5})",
                res.best.0, res.best.1, res.best_value
            )
        }
        ExperimentKind::Sweep => {
            let res = experiments::run_sweep(cfg)?;
            output::write_grid(&dir, "sweep.csv", "crps", &res)?;
            format!(
                "best cell t_min = {}, eps = {} (mean crps {:.4})",
                res.best.0, res.best.1, res.best_value
            )
        }
        ExperimentKind::L63Filter => {
            let res = experiments::run_l63_filter(cfg)?;
            output::write_l63(&dir, &res)?;
            let m = res.mean();
            format!(
                "{} trajectories: rmse {:.3} crps {:.3} spread {:.3} ssr {:.3}",
                res.repeats.len(),
                m.rmse,
                m.crps,
                m.spread,
                m.ssr
            )
        }
        ExperimentKind::Train => {
            let (model, rep) = experiments::run_train(cfg)?;
            output::write_train(&dir, &model, &rep)?;
            format!(
                "final losses: train {:.5}, validation {:.5}",
                rep.train_loss.last().copied().unwrap_or(f64::NAN),
                rep.val_loss.last().copied().unwrap_or(f64::NAN)
            )
        }
        ExperimentKind::LinearGaussianCheck => {
            let outcomes = experiments::linear_gaussian_check(cfg)?;
            output::write_check(&dir, &outcomes)?;
            let mut lines = String::new();
            for c in &outcomes {
                let verdict = if c.passed() { "PASS" } else { "FAIL" };
                lines.push_str(&format!(
                    "{verdict} {} {:.4} (<= {})\n",
                    c.name, c.statistic, c.threshold
                ));
            }
            if outcomes.iter().any(|c| !c.passed()) {
                return Err(CliError::CheckFailed(lines.trim_end().to_string()));
            }
            lines.trim_end().to_string()
        }
    };
    Ok(format!("{report}\noutputs in {}", dir.display()))
}
