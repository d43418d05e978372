use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editing::{EditMethod, SdeditMode, SdeditNull};
use crate::error::{Error, Result};
use crate::inversion::{Method, OptimizerConfig};
use crate::schedule::{NoiseSchedule, StepPlan};

/// Gaussian-cluster dataset description, or a path to a dataset file.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dim: usize,
    pub classes: usize,
    pub points_per_class: usize,
    /// Isotropic standard deviation shared by all clusters unless `spreads` is set.
    pub spread: f64,
    /// Distance of each default cluster mean from the origin.
    pub separation: f64,
    pub means: Option<Vec<Vec<f64>>>,
    pub spreads: Option<Vec<f64>>,
    /// Load points from this file instead of sampling them.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 2,
            points_per_class: 500,
            spread: 0.5,
            separation: 2.0,
            means: None,
            spreads: None,
            path: None,
        }
    }
}

impl DatasetConfig {
    /// Cluster means: explicit, or spaced evenly on a circle of radius `separation`
    /// in the first two coordinates (on a line when `dim == 1`).
    pub fn cluster_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        (0..self.classes)
            .map(|k| {
                let mut mean = vec![0.0; self.dim];
                if self.classes == 1 {
                    return mean;
                }
                if self.dim == 1 {
                    mean[0] = self.separation * (2.0 * k as f64 / (self.classes - 1) as f64 - 1.0);
                } else {
                    let angle = std::f64::consts::PI * (1.0 + 2.0 * k as f64 / self.classes as f64);
                    mean[0] = self.separation * angle.cos();
                    mean[1] = self.separation * angle.sin();
                    // Cleans up the sin(pi) residue so two classes sit exactly on an axis.
                    for v in &mut mean[..2] {
                        if v.abs() < 1e-12 {
                            *v = 0.0;
                        }
                    }
                }
                mean
            })
            .collect()
    }

    pub fn cluster_spreads(&self) -> Vec<f64> {
        self.spreads.clone().unwrap_or_else(|| vec![self.spread; self.classes])
    }

    pub fn validate(&self) -> Result<()> {
        if self.path.is_some() {
            return Ok(());
        }
        if self.dim == 0 || self.classes == 0 || self.points_per_class == 0 {
            return Err(Error::Config("dataset dim, classes and points_per_class must be >= 1".into()));
        }
        let means = self.cluster_means();
        if means.len() != self.classes || means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config(format!("expected {} cluster means of dimension {}", self.classes, self.dim)));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("cluster means must be finite".into()));
        }
        let spreads = self.cluster_spreads();
        if spreads.len() != self.classes || spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(format!("expected {} non-negative spreads", self.classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    pub plan_sizes: Vec<usize>,
    pub guidance: Vec<f64>,
    pub methods: Vec<Method>,
    /// Bootstrap resamples for the summary confidence intervals.
    pub bootstrap: usize,
    /// Plan size used by the similarity and edit runs.
    pub analysis_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 50,
            out: PathBuf::from("out"),
            plan_sizes: vec![20, 50, 100, 200],
            guidance: vec![7.5],
            methods: Method::ALL.to_vec(),
            bootstrap: 1000,
            analysis_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropcheckConfig {
    /// Forward-process samples per gap estimate.
    pub runs: usize,
    pub sigma_scales: Vec<f64>,
    pub lags: Vec<usize>,
    /// Steps at which the gap is measured.
    pub steps: Vec<usize>,
    /// Random configurations per algebraic identity.
    pub samples: usize,
}

impl Default for PropcheckConfig {
    fn default() -> Self {
        Self {
            runs: 2000,
            sigma_scales: vec![1.0, 0.5, 0.1, 0.0],
            lags: vec![1, 5, 20],
            steps: vec![1000, 500],
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub method: EditMethod,
    pub t0_ratio: f64,
    pub mode: SdeditMode,
    pub null: SdeditNull,
    /// Target class is `(source + target_offset) mod K`.
    pub target_offset: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            method: EditMethod::ConditionSwap,
            t0_ratio: 0.5,
            mode: SdeditMode::Noise,
            null: SdeditNull::Original,
            target_offset: 1,
        }
    }
}

/// Complete experiment description, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub experiment: RunConfig,
    pub optimizer: OptimizerConfig,
    pub propcheck: PropcheckConfig,
    pub edit: EditConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let schedule = self.schedule.build()?;
        let run = &self.experiment;
        if run.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if run.plan_sizes.is_empty() || run.guidance.is_empty() || run.methods.is_empty() {
            return Err(Error::Config("plan_sizes, guidance and methods must be non-empty".into()));
        }
        for &n in run.plan_sizes.iter().chain([&run.analysis_steps]) {
            StepPlan::new(&schedule, n)?;
        }
        if let Some(w) = run.guidance.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("guidance scale must be finite and >= 0, got {w}")));
        }
        if run.bootstrap == 0 {
            return Err(Error::Config("bootstrap must be >= 1".into()));
        }
        self.optimizer.validate()?;
        let p = &self.propcheck;
        if p.runs < 2 || p.samples == 0 || p.sigma_scales.is_empty() || p.lags.is_empty() || p.steps.is_empty() {
            return Err(Error::Config("propcheck needs runs >= 2 and non-empty scales, lags, steps".into()));
        }
        if p.sigma_scales.iter().any(|s| !(s.is_finite() && (0.0..=1.0).contains(s))) {
            return Err(Error::Config("sigma scales must lie in [0, 1]".into()));
        }
        if p.steps.iter().any(|&t| t > schedule.steps()) || p.lags.contains(&0) {
            return Err(Error::Config("propcheck steps must be <= T and lags >= 1".into()));
        }
        if p.steps.iter().any(|&t| p.lags.iter().any(|&m| m >= t)) {
            return Err(Error::Config("each propcheck lag must be smaller than every step".into()));
        }
        if !(self.edit.t0_ratio > 0.0 && self.edit.t0_ratio <= 1.0) {
            return Err(Error::Config(format!("t0_ratio must lie in (0, 1], got {}", self.edit.t0_ratio)));
        }
        Ok(())
    }
}
