//! Noise levels, sampling-step plans and forward-process stochasticity.

use crate::error::{Error, Result};

/// Cumulative signal levels `alpha_0 = 1 > alpha_1 > ... > alpha_T > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // alphas[0] is the clean level, fixed to 1.
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta schedule: `alpha_t = prod_{s <= t} (1 - beta_s)` with beta
    /// interpolated linearly from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        let mut acc = 1.0;
        for s in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas.push(acc);
        }
        Self::from_alphas(alphas)
    }

    /// Builds a schedule from explicit levels `alpha_0..alpha_T`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Config("schedule needs alpha_0 and at least alpha_1".into()));
        }
        if alphas[0] != 1.0 {
            return Err(Error::Config("alpha_0 must equal 1".into()));
        }
        for t in 1..alphas.len() {
            let a = alphas[t];
            if !(a.is_finite() && a > 0.0 && a < alphas[t - 1]) {
                return Err(Error::Config(format!(
                    "alpha_{t} = {a} breaks 0 < alpha_t < alpha_(t-1)"
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!(
                "step {t} outside schedule of {} steps",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

/// Uniform-stride sub-sequence `0 = t_0 < t_1 < ... < t_N = T` of diffusion steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    indices: Vec<usize>,
}

impl StepPlan {
    pub fn new(schedule: &NoiseSchedule, count: usize) -> Result<Self> {
        let total = schedule.steps();
        if count == 0 || count > total {
            return Err(Error::Config(format!(
                "sampling steps must lie in 1..={total}, got {count}"
            )));
        }
        if !total.is_multiple_of(count) {
            return Err(Error::Config(format!(
                "{count} sampling steps do not divide {total} diffusion steps evenly"
            )));
        }
        let stride = total / count;
        Ok(Self { indices: (0..=count).map(|i| i * stride).collect() })
    }

    /// Number of sampling steps `N`.
    pub fn count(&self) -> usize {
        self.indices.len() - 1
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn stride(&self) -> usize {
        self.indices[1] - self.indices[0]
    }

    pub fn last(&self) -> usize {
        *self.indices.last().expect("plan is never empty")
    }

    pub fn position(&self, t: usize) -> Option<usize> {
        self.indices.binary_search(&t).ok()
    }

    /// Consecutive `(t_prev, t)` pairs in increasing order.
    pub fn transitions(&self) -> impl DoubleEndedIterator<Item = (usize, usize)> + '_ {
        self.indices.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Forward-process standard deviations `sigma_t`, indexed by diffusion step.
/// Entries for `t < 2` are unused and held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(schedule: &NoiseSchedule, sigmas: Vec<f64>) -> Result<Self> {
        let mut out = Self { sigmas };
        out.validate_for(schedule)?;
        for s in out.sigmas.iter_mut().take(2) {
            *s = 0.0;
        }
        Ok(out)
    }

    /// Checks length and `sigma_t^2 < 1 - alpha_(t-1)` against `schedule`.
    pub fn validate_for(&self, schedule: &NoiseSchedule) -> Result<()> {
        let sigmas = &self.sigmas;
        if sigmas.len() != schedule.steps() + 1 {
            return Err(Error::Config(format!(
                "expected {} sigma entries (indexed 0..=T), got {}",
                schedule.steps() + 1,
                sigmas.len()
            )));
        }
        for (t, &s) in sigmas.iter().enumerate().skip(2) {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("sigma_{t} = {s} must be finite and >= 0")));
            }
            if s * s >= 1.0 - schedule.alpha(t - 1) {
                return Err(Error::Config(format!(
                    "sigma_{t}^2 = {} must stay below 1 - alpha_(t-1) = {}",
                    s * s,
                    1.0 - schedule.alpha(t - 1)
                )));
            }
        }
        Ok(())
    }

    /// The deterministic limit `sigma = 0`.
    pub fn zeros(schedule: &NoiseSchedule) -> Self {
        Self { sigmas: vec![0.0; schedule.steps() + 1] }
    }

    /// `eta` times the DDPM posterior standard deviation
    /// `sqrt((1 - a_{t-1}) / (1 - a_t) * (1 - a_t / a_{t-1}))`.
    pub fn ddpm(schedule: &NoiseSchedule, eta: f64) -> Result<Self> {
        let mut sigmas = vec![0.0; schedule.steps() + 1];
        for (t, s) in sigmas.iter_mut().enumerate().skip(2) {
            let (a, ap) = (schedule.alpha(t), schedule.alpha(t - 1));
            *s = eta * ((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)).sqrt();
        }
        Self::new(schedule, sigmas)
    }

    pub fn scaled(&self, schedule: &NoiseSchedule, factor: f64) -> Result<Self> {
        Self::new(schedule, self.sigmas.iter().map(|s| s * factor).collect())
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// Closed-form `E ||d_{t-m} - d_t||^2` given `z_0`, for `D`-dimensional latents.
    pub fn expected_gap(&self, schedule: &NoiseSchedule, t: usize, m: usize, dim: usize) -> f64 {
        let mut corr = 1.0;
        for i in 0..m {
            let s = t - i;
            corr *= (1.0 - self.sigmas[s].powi(2) / (1.0 - schedule.alpha(s - 1))).sqrt();
        }
        2.0 * dim as f64 * (1.0 - corr)
    }
}
