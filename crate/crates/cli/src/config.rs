//! Experiment configuration: a TOML document with one section per concern.
//!
//! Every section rejects unknown keys. Relative paths are resolved against the
//! directory of the config file. See `docs/config.md` for the full key list.

use std::path::{Path, PathBuf};

use daisi::filters::Resampling;
use daisi::training::TrainConfig;
use daisi::GuidanceKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GmmAblation,
    L63Filter,
    Sweep,
    LinearGaussianCheck,
    Train,
}

impl ExperimentKind {
    /// Directory name under the output root.
    pub fn dir_name(self) -> &'static str {
        match self {
            ExperimentKind::GmmAblation => "gmm_ablation",
            ExperimentKind::L63Filter => "l63_filter",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::LinearGaussianCheck => "linear_gaussian_check",
            ExperimentKind::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when set it must agree with the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default)]
    pub gmm: GmmSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub l63: L63Section,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub check: CheckSection,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: None,
            seed: 0,
            repeats: 1,
            out: default_out(),
            tag: None,
            gmm: GmmSection::default(),
            grid: GridSection::default(),
            filter: FilterSection::default(),
            l63: L63Section::default(),
            sweep: SweepSection::default(),
            train: TrainSection::default(),
            check: CheckSection::default(),
        }
    }
}

/// Which sample set the ablation MMD is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Posterior,
    Forecast,
    StationaryPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    pub particles: usize,
    pub pool: usize,
    pub y: f64,
    pub sigma_obs: f64,
    pub tilt_mean: f64,
    pub tilt_std: f64,
    pub steps: usize,
    pub zeta: f64,
    pub reference: Reference,
}

impl Default for GmmSection {
    fn default() -> Self {
        GmmSection {
            particles: 10_000,
            pool: 10_000,
            y: 2.5,
            sigma_obs: 1.0,
            tilt_mean: 0.5,
            tilt_std: 1.5,
            steps: 200,
            zeta: 1.0,
            reference: Reference::Posterior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_min: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            t_min: vec![0.01, 0.3, 0.6],
            eps: vec![0.0, 0.1, 1.0],
        }
    }
}

impl GridSection {
    /// Cells in row-major order (`t_min` outer, `eps` inner).
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.t_min
            .iter()
            .flat_map(|&t| self.eps.iter().map(move |&e| (t, e)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Daisi,
    Bpf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceChoice {
    Mc,
    Dps,
    Mmps,
}

impl GuidanceChoice {
    pub fn kind(self) -> GuidanceKind {
        match self {
            GuidanceChoice::Mc => GuidanceKind::MonteCarlo,
            GuidanceChoice::Dps => GuidanceKind::Dps,
            GuidanceChoice::Mmps => GuidanceKind::Mmps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingChoice {
    Systematic,
    Multinomial,
}

impl From<ResamplingChoice> for Resampling {
    fn from(c: ResamplingChoice) -> Self {
        match c {
            ResamplingChoice::Systematic => Resampling::Systematic,
            ResamplingChoice::Multinomial => Resampling::Multinomial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub method: FilterMethod,
    pub t_min: f64,
    pub eps: f64,
    pub sde_steps: usize,
    pub guidance: GuidanceChoice,
    pub zeta: f64,
    pub pool: usize,
    pub no_inversion: bool,
    pub members: usize,
    pub jitter: f64,
    pub resampling: ResamplingChoice,
    pub keep_ensembles: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            method: FilterMethod::Daisi,
            t_min: 0.65,
            eps: 0.15,
            sde_steps: 50,
            guidance: GuidanceChoice::Mc,
            zeta: 1.0,
            pool: 2000,
            no_inversion: false,
            members: 100,
            jitter: 0.0,
            resampling: ResamplingChoice::Systematic,
            keep_ensembles: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L63Section {
    pub model: PathBuf,
    pub dataset_steps: usize,
    pub dataset_seed: u64,
    pub spinup: usize,
    pub steps: usize,
    pub window: usize,
    pub sigma_obs: f64,
    pub observed: Vec<usize>,
    pub init_sd: f64,
}

impl Default for L63Section {
    fn default() -> Self {
        L63Section {
            model: PathBuf::from("model.bin"),
            dataset_steps: 1_000_000,
            dataset_seed: 0,
            spinup: 4500,
            steps: 500,
            window: 100,
            sigma_obs: 5.0,
            observed: vec![0],
            init_sd: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub spinup: usize,
    pub steps: usize,
    pub window: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            spinup: 4800,
            steps: 200,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub split: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            hidden: vec![128, 128],
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            split: t.split,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            split: self.split,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    /// Draws from the guided sampler in the conjugate check.
    pub samples: usize,
    /// Assimilation steps of the AR(1) checks.
    pub steps: usize,
    /// DAISI ensemble size on the AR(1) model.
    pub members: usize,
    /// Particle filter size on the AR(1) model.
    pub particles: usize,
    /// Independent particle filter runs used for the standard error.
    pub replicates: usize,
    pub sde_steps: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            samples: 10_000,
            steps: 50,
            members: 2000,
            particles: 10_000,
            replicates: 20,
            sde_steps: 200,
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_daisi_cell(t_min: f64, eps: f64, guided: bool, no_inversion: bool) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&t_min) {
        return Err(bad(format!("t_min must lie in [0, 1), got {t_min}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(bad(format!("eps must be finite and >= 0, got {eps}")));
    }
    if guided && t_min == 0.0 && !no_inversion {
        return Err(bad(
            "t_min = 0 with active guidance is singular; use t_min > 0 or zeta = 0",
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config document. Relative paths are kept as written.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out = base.join(&cfg.out);
        cfg.l63.model = base.join(&cfg.l63.model);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Directory receiving this run's outputs.
    pub fn run_dir(&self, kind: ExperimentKind) -> PathBuf {
        let leaf = self.tag.clone().unwrap_or_else(|| format!("seed{}", self.seed));
        self.out.join(kind.dir_name()).join(leaf)
    }

    /// Checks everything the given experiment will use, before any work starts.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), CliError> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(bad(format!(
                    "config declares experiment {:?} but {:?} was requested",
                    k, kind
                )));
            }
        }
        if self.repeats == 0 {
            return Err(bad("repeats must be at least 1"));
        }
        if let Some(tag) = &self.tag {
            if tag.is_empty() || tag.contains(['/', '\\']) || tag == "." || tag == ".." {
                return Err(bad(format!("tag {tag:?} is not a plain directory name")));
            }
        }
        match kind {
            ExperimentKind::GmmAblation => self.validate_gmm(),
            ExperimentKind::L63Filter => {
                self.validate_l63(self.l63.steps, self.l63.window)?;
                let f = &self.filter;
                if f.method == FilterMethod::Daisi {
                    check_daisi_cell(f.t_min, f.eps, f.zeta > 0.0, f.no_inversion)?;
                }
                self.validate_filter()
            }
            ExperimentKind::Sweep => {
                self.validate_l63(self.sweep.steps, self.sweep.window)?;
                if self.filter.method != FilterMethod::Daisi {
                    return Err(bad("sweep tunes DAISI; set filter.method = \"daisi\""));
                }
                self.validate_grid(self.filter.zeta > 0.0, self.filter.no_inversion)?;
                self.validate_filter()
            }
            ExperimentKind::LinearGaussianCheck => {
                let c = &self.check;
                if c.samples < 2 || c.members < 2 || c.particles < 2 || c.replicates < 2 {
                    return Err(bad("check sizes must be at least 2"));
                }
                if c.steps == 0 || c.sde_steps == 0 {
                    return Err(bad("check step counts must be positive"));
                }
                Ok(())
            }
            ExperimentKind::Train => {
                if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
                    return Err(bad("train.hidden needs at least one non-empty layer"));
                }
                if self.l63.dataset_steps < 10 {
                    return Err(bad("l63.dataset_steps is too small to split"));
                }
                self.train
                    .train_config(self.seed)
                    .validate()
                    .map_err(|e| bad(e.to_string()))
            }
        }
    }

    fn validate_grid(&self, guided: bool, no_inversion: bool) -> Result<(), CliError> {
        if self.grid.t_min.is_empty() || self.grid.eps.is_empty() {
            return Err(bad("grid.t_min and grid.eps must be non-empty"));
        }
        for (t, e) in self.grid.cells() {
            check_daisi_cell(t, e, guided, no_inversion)?;
        }
        Ok(())
    }

    fn validate_gmm(&self) -> Result<(), CliError> {
        let g = &self.gmm;
        if g.particles < 2 || g.pool == 0 || g.steps == 0 {
            return Err(bad("gmm.particles >= 2, gmm.pool > 0 and gmm.steps > 0 are required"));
        }
        if !(g.sigma_obs > 0.0 && g.tilt_std > 0.0) {
            return Err(bad("gmm.sigma_obs and gmm.tilt_std must be positive"));
        }
        if !(g.zeta >= 0.0 && g.zeta.is_finite()) {
            return Err(bad("gmm.zeta must be >= 0"));
        }
        self.validate_grid(g.zeta > 0.0, false)
    }

    fn validate_l63(&self, steps: usize, window: usize) -> Result<(), CliError> {
        let l = &self.l63;
        if steps == 0 || window == 0 || window > steps {
            return Err(bad("need 0 < window <= assimilated steps"));
        }
        if l.observed.is_empty() || l.observed.iter().any(|&i| i >= 3) {
            return Err(bad("l63.observed must list state indices in 0..3"));
        }
        if !(l.sigma_obs > 0.0 && l.init_sd >= 0.0) {
            return Err(bad("l63.sigma_obs must be positive and l63.init_sd non-negative"));
        }
        if l.dataset_steps < 10 {
            return Err(bad("l63.dataset_steps is too small"));
        }
        Ok(())
    }

    fn validate_filter(&self) -> Result<(), CliError> {
        let f = &self.filter;
        if f.members < 2 {
            return Err(bad("filter.members must be at least 2"));
        }
        if !(f.jitter >= 0.0 && f.jitter.is_finite()) {
            return Err(bad("filter.jitter must be >= 0"));
        }
        if f.method == FilterMethod::Daisi {
            if f.sde_steps == 0 {
                return Err(bad("filter.sde_steps must be positive"));
            }
            if !(f.zeta >= 0.0 && f.zeta.is_finite()) {
                return Err(bad("filter.zeta must be >= 0"));
            }
            if f.guidance == GuidanceChoice::Mc && f.pool == 0 {
                return Err(bad("Monte Carlo guidance needs filter.pool > 0"));
            }
            if !self.l63.model.is_file() {
                return Err(bad(format!(
                    "drift model {} not found; run `daisi train` first",
                    self.l63.model.display()
                )));
            }
        }
        Ok(())
    }
}
