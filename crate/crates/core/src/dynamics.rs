//! DDIM transition kernels, the stochastic non-Markovian forward process and
//! full-trajectory runners.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::oracle::{cfg_combine, predict_noise, Embedding, OracleDataset};
use crate::schedule::{NoiseSchedule, SigmaSchedule, StepPlan};

/// Latent state `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(Vec<f64>);

impl Latent {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("latent entries must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Bit patterns of every entry, for exact comparisons.
    pub fn bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

impl Deref for Latent {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Latent {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Latents indexed by diffusion step over a [`StepPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    plan: StepPlan,
    entries: BTreeMap<usize, Latent>,
}

impl Trajectory {
    pub fn new(plan: StepPlan) -> Self {
        Self { plan, entries: BTreeMap::new() }
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn insert(&mut self, t: usize, z: Latent) -> Result<()> {
        if self.plan.position(t).is_none() {
            return Err(Error::Domain(format!("step {t} is not part of the plan")));
        }
        self.entries.insert(t, z);
        Ok(())
    }

    pub fn get(&self, t: usize) -> Option<&Latent> {
        self.entries.get(&t)
    }

    /// Latent at step `t`, or a domain error when absent.
    pub fn at(&self, t: usize) -> Result<&Latent> {
        self.get(t).ok_or_else(|| Error::Domain(format!("trajectory has no latent at step {t}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.plan.indices().len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Latent)> + '_ {
        self.entries.iter().map(|(&t, z)| (t, z))
    }

    /// `step_index` followed by one column per latent coordinate.
    pub fn to_csv(&self) -> String {
        let dim = self.entries.values().next().map_or(0, |z| z.dim());
        let mut out = String::from("step_index");
        for j in 0..dim {
            let _ = write!(out, ",v{j}");
        }
        out.push('\n');
        for (t, z) in self.iter() {
            let _ = write!(out, "{t}");
            for v in z.iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn bitwise_eq(&self, other: &Trajectory) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ta, a), (tb, b))| ta == tb && a.bits() == b.bits())
    }
}

/// Trajectory plus the number of noise-model evaluations spent producing it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub model_calls: usize,
}

/// Null embedding used by the unconditional branch at each reverse step.
#[derive(Debug, Clone, PartialEq)]
pub enum NullSchedule {
    Constant(Embedding),
    /// Keyed by the step a reverse transition starts from.
    PerStep(BTreeMap<usize, Embedding>),
}

impl NullSchedule {
    pub fn get(&self, t: usize) -> Option<&Embedding> {
        match self {
            NullSchedule::Constant(e) => Some(e),
            NullSchedule::PerStep(map) => map.get(&t),
        }
    }
}

/// Coefficient multiplying the noise when moving from level `alpha_from` to `alpha_to`:
/// `sqrt(a_to) (sqrt(1/a_to - 1) - sqrt(1/a_from - 1))`.
pub fn noise_coefficient(alpha_from: f64, alpha_to: f64) -> f64 {
    alpha_to.sqrt() * ((1.0 / alpha_to - 1.0).sqrt() - (1.0 / alpha_from - 1.0).sqrt())
}

/// DDIM move between arbitrary signal levels; shared by both directions.
pub fn ddim_move(z: &[f64], alpha_from: f64, alpha_to: f64, eps: &[f64]) -> Vec<f64> {
    let scale = (alpha_to / alpha_from).sqrt();
    let c = noise_coefficient(alpha_from, alpha_to);
    z.iter().zip(eps).map(|(zi, ei)| scale * zi + c * ei).collect()
}

fn check_pair(t_prev: usize, t: usize, schedule: &NoiseSchedule) -> Result<()> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Domain(format!("need t_prev < t, got t_prev = {t_prev}, t = {t}")));
    }
    Ok(())
}

fn check_dims(z: &[f64], eps: &[f64]) -> Result<()> {
    if z.len() != eps.len() {
        return Err(Error::Domain(format!(
            "latent dimension {} does not match noise dimension {}",
            z.len(),
            eps.len()
        )));
    }
    Ok(())
}

/// Deterministic DDIM sampling step from `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &[f64],
    t: usize,
    t_prev: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    check_pair(t_prev, t, schedule)?;
    check_dims(z_t, eps)?;
    Ok(Latent(ddim_move(z_t, schedule.alpha(t), schedule.alpha(t_prev), eps)))
}

/// DDIM inversion step from `t_prev` up to `t`; the exact inverse of
/// [`ddim_step`] for a shared noise vector.
pub fn ddim_inverse_step(
    z_prev: &[f64],
    t_prev: usize,
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    check_pair(t_prev, t, schedule)?;
    check_dims(z_prev, eps)?;
    Ok(Latent(ddim_move(z_prev, schedule.alpha(t_prev), schedule.alpha(t), eps)))
}

/// Step at which the inversion evaluates the noise on the move `t_prev -> t`.
///
/// The noise is undefined at the clean level, so the first inversion step
/// queries the model at its destination step instead.
pub fn inversion_eval_step(t_prev: usize, t: usize) -> usize {
    if t_prev == 0 {
        t
    } else {
        t_prev
    }
}

/// Normalized noise component `d_t = (z_t - sqrt(a_t) z_0) / sqrt(1 - a_t)`.
pub fn noise_component(z_t: &[f64], z0: &[f64], alpha: f64) -> Vec<f64> {
    let (root, scale) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z_t.iter().zip(z0).map(|(z, x)| (z - root * x) / scale).collect()
}

/// Samples `z_{1:T}` from the sigma-indexed non-Markovian forward process
/// given `z_0`: first `z_T`, then each `z_{t-1} | z_t, z_0` for `t = T..2`.
pub fn stochastic_forward(
    z0: &Latent,
    schedule: &NoiseSchedule,
    sigmas: &SigmaSchedule,
    seed: u64,
) -> Result<Trajectory> {
    sigmas.validate_for(schedule)?;
    let total = schedule.steps();
    let plan = StepPlan::new(schedule, total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traj = Trajectory::new(plan);
    let dim = z0.dim();

    let a_t = schedule.alpha(total);
    let mut z: Vec<f64> = z0
        .iter()
        .map(|x| {
            let n: f64 = StandardNormal.sample(&mut rng);
            a_t.sqrt() * x + (1.0 - a_t).sqrt() * n
        })
        .collect();
    traj.insert(total, Latent(z.clone()))?;
    for t in (2..=total).rev() {
        let (a, ap, s) = (schedule.alpha(t), schedule.alpha(t - 1), sigmas.sigma(t));
        let d = noise_component(&z, z0, a);
        let keep = (1.0 - ap - s * s).sqrt();
        let mut next = Vec::with_capacity(dim);
        for (x, di) in z0.iter().zip(&d) {
            let n: f64 = StandardNormal.sample(&mut rng);
            next.push(ap.sqrt() * x + keep * di + s * n);
        }
        z = next;
        traj.insert(t - 1, Latent(z.clone()))?;
    }
    traj.insert(0, z0.clone())?;
    Ok(traj)
}

/// CFG-guided DDIM sampling from `z_T` down to step 0 along `plan`.
pub fn run_reverse(
    z_t: &Latent,
    plan: &StepPlan,
    cond: &Embedding,
    nulls: &NullSchedule,
    w: f64,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<RunOutput> {
    run_reverse_from(z_t, plan, plan.count(), cond, nulls, w, dataset, schedule)
}

/// [`run_reverse`] starting at plan position `start` instead of the last one.
#[allow(clippy::too_many_arguments)]
pub fn run_reverse_from(
    z_start: &Latent,
    plan: &StepPlan,
    start: usize,
    cond: &Embedding,
    nulls: &NullSchedule,
    w: f64,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<RunOutput> {
    let idx = plan.indices();
    if start >= idx.len() {
        return Err(Error::Domain(format!("plan position {start} out of range")));
    }
    if let Some(&t) = idx[1..=start].iter().find(|&&t| nulls.get(t).is_none()) {
        return Err(Error::Domain(format!("no null embedding for step {t}")));
    }
    let mut traj = Trajectory::new(plan.clone());
    let mut z = z_start.clone();
    traj.insert(idx[start], z.clone())?;
    let mut calls = 0;
    for pos in (1..=start).rev() {
        let (t, t_prev) = (idx[pos], idx[pos - 1]);
        let null = nulls.get(t).expect("checked above");
        let eps_c = predict_noise(dataset, &z, t, cond, schedule)?.epsilon;
        let eps_u = predict_noise(dataset, &z, t, null, schedule)?.epsilon;
        calls += 2;
        let eps = cfg_combine(&eps_c, &eps_u, w)?;
        z = ddim_step(&z, t, t_prev, &eps, schedule)?;
        traj.insert(t_prev, z.clone())?;
    }
    Ok(RunOutput { trajectory: traj, model_calls: calls })
}

/// DDIM inversion of `z0` under the conditional prediction, up to step `T`.
pub fn run_forward_inversion(
    z0: &Latent,
    plan: &StepPlan,
    cond: &Embedding,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<RunOutput> {
    run_forward_inversion_until(z0, plan, plan.count(), cond, dataset, schedule)
}

/// DDIM inversion stopped at plan position `end`.
pub fn run_forward_inversion_until(
    z0: &Latent,
    plan: &StepPlan,
    end: usize,
    cond: &Embedding,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<RunOutput> {
    let idx = plan.indices();
    if end >= idx.len() {
        return Err(Error::Domain(format!("plan position {end} out of range")));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("z0 has non-finite entries".into()));
    }
    let mut traj = Trajectory::new(plan.clone());
    let mut z = z0.clone();
    traj.insert(0, z.clone())?;
    for pos in 1..=end {
        let (t_prev, t) = (idx[pos - 1], idx[pos]);
        let eps = predict_noise(dataset, &z, inversion_eval_step(t_prev, t), cond, schedule)?.epsilon;
        z = ddim_inverse_step(&z, t_prev, t, &eps, schedule)?;
        traj.insert(t, z.clone())?;
    }
    Ok(RunOutput { trajectory: traj, model_calls: end })
}
