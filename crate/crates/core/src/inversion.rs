//! The three inversion strategies: DDIM inversion followed by guided
//! reconstruction, null-text inversion and negative-prompt inversion.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::dynamics::{
    ddim_step, inversion_eval_step, noise_coefficient, run_forward_inversion, run_reverse,
    Latent, NullSchedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::oracle::{cfg_combine, predict_noise, predict_noise_grad, Embedding, OracleDataset};
use crate::schedule::{NoiseSchedule, StepPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DdimCfg,
    NullText,
    NegativePrompt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DdimCfg, Method::NullText, Method::NegativePrompt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DdimCfg => "ddim_cfg",
            Method::NullText => "null_text",
            Method::NegativePrompt => "negative_prompt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddim_cfg" => Ok(Method::DdimCfg),
            "null_text" => Ok(Method::NullText),
            "negative_prompt" => Ok(Method::NegativePrompt),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Per-step optimizer settings for null-text inversion.
///
/// The learning rate decreases linearly over sampling-step position and ends
/// at `lr_final` on the last step; the early-stop threshold grows linearly
/// from `early_stop_base`.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub lr_final: f64,
    pub lr_step_factor: f64,
    pub early_stop_base: f64,
    pub early_stop_factor: f64,
    /// Backtracking halvings tried before a step is abandoned.
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            lr_final: 5e-3,
            lr_step_factor: 1e-4,
            early_stop_base: 1e-5,
            early_stop_factor: 2e-5,
            max_halvings: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_final, self.lr_step_factor, self.early_stop_base, self.early_stop_factor];
        if self.max_iters == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("optimizer settings must be positive, max_iters >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at sampling-step position `pos` (0 at `t = T`) of `count`.
    pub fn learning_rate(&self, pos: usize, count: usize) -> f64 {
        self.lr_final + self.lr_step_factor * (count - 1 - pos) as f64
    }

    pub fn threshold(&self, pos: usize) -> f64 {
        self.early_stop_base + self.early_stop_factor * pos as f64
    }
}

/// Optimized null embeddings, keyed by the step each reverse transition starts from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NullTextSchedule {
    pub embeddings: BTreeMap<usize, Embedding>,
    pub initial_losses: BTreeMap<usize, f64>,
    pub losses: BTreeMap<usize, f64>,
    pub iterations: BTreeMap<usize, usize>,
}

impl NullTextSchedule {
    pub fn to_null_schedule(&self) -> NullSchedule {
        NullSchedule::PerStep(self.embeddings.clone())
    }

    /// `step`, one column per class weight, then `loss` and `iterations`.
    pub fn to_csv(&self) -> String {
        let classes = self.embeddings.values().next().map_or(0, |e| e.classes());
        let mut out = String::from("step");
        for k in 0..classes {
            let _ = write!(out, ",w{k}");
        }
        out.push_str(",loss,iterations\n");
        for (t, e) in &self.embeddings {
            let _ = write!(out, "{t}");
            for v in e.weights() {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", self.losses[t], self.iterations[t]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct NullTextOutput {
    pub schedule: NullTextSchedule,
    pub trajectory: Trajectory,
    pub model_calls: usize,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub method: Method,
    pub reconstruction: Latent,
    pub forward_trajectory: Trajectory,
    pub reverse_trajectory: Trajectory,
    pub null_schedule: Option<NullTextSchedule>,
    pub model_calls: usize,
    pub wall_time: Duration,
}

/// Runs `method` with default optimizer settings where relevant.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    method: Method,
    z0: &Latent,
    cond: &Embedding,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
    opt: &OptimizerConfig,
) -> Result<InversionResult> {
    match method {
        Method::DdimCfg => invert_ddim_cfg(z0, cond, w, plan, dataset, schedule),
        Method::NullText => invert_null_text(z0, cond, w, plan, dataset, schedule, opt),
        Method::NegativePrompt => invert_negative_prompt(z0, cond, w, plan, dataset, schedule),
    }
}

fn check_guidance(w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::Precondition(format!("guidance scale must be finite and >= 0, got {w}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn reconstruct_with(
    method: Method,
    z0: &Latent,
    cond: &Embedding,
    nulls: NullSchedule,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    check_guidance(w)?;
    let start = Instant::now();
    let fwd = run_forward_inversion(z0, plan, cond, dataset, schedule)?;
    let rev = run_reverse(fwd.trajectory.at(plan.last())?, plan, cond, &nulls, w, dataset, schedule)?;
    let wall_time = start.elapsed();
    Ok(InversionResult {
        method,
        reconstruction: rev.trajectory.at(0)?.clone(),
        forward_trajectory: fwd.trajectory,
        reverse_trajectory: rev.trajectory,
        null_schedule: None,
        model_calls: fwd.model_calls + rev.model_calls,
        wall_time,
    })
}

/// DDIM inversion, then guided reconstruction with the plain null embedding.
pub fn invert_ddim_cfg(
    z0: &Latent,
    cond: &Embedding,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    let null = NullSchedule::Constant(Embedding::uniform(cond.classes()));
    reconstruct_with(Method::DdimCfg, z0, cond, null, w, plan, dataset, schedule)
}

/// DDIM inversion, then guided reconstruction with the prompt itself as the
/// null embedding at every step.
pub fn invert_negative_prompt(
    z0: &Latent,
    cond: &Embedding,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    let null = NullSchedule::Constant(cond.clone());
    reconstruct_with(Method::NegativePrompt, z0, cond, null, w, plan, dataset, schedule)
}

#[allow(clippy::too_many_arguments)]
pub fn invert_null_text(
    z0: &Latent,
    cond: &Embedding,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
    opt: &OptimizerConfig,
) -> Result<InversionResult> {
    check_guidance(w)?;
    let start = Instant::now();
    let fwd = run_forward_inversion(z0, plan, cond, dataset, schedule)?;
    let nt = optimize_null_text(&fwd.trajectory, cond, w, plan, dataset, schedule, opt)?;
    let wall_time = start.elapsed();
    Ok(InversionResult {
        method: Method::NullText,
        reconstruction: nt.trajectory.at(0)?.clone(),
        forward_trajectory: fwd.trajectory,
        reverse_trajectory: nt.trajectory,
        null_schedule: Some(nt.schedule),
        model_calls: fwd.model_calls + nt.model_calls,
        wall_time,
    })
}

struct StepEval {
    loss: f64,
    grad: Vec<f64>,
    next: Latent,
}

/// Per-step optimization of the null embedding so that the guided reverse
/// step reproduces the inversion trajectory `z_star`.
///
/// Steps run from `t = T` downward. Each starts from the previous step's
/// embedding (uniform at `T`) and takes normalized projected-gradient steps of
/// the scheduled learning rate, halving on any loss increase. The accepted
/// loss is therefore non-increasing within a step.
#[allow(clippy::too_many_arguments)]
pub fn optimize_null_text(
    z_star: &Trajectory,
    cond: &Embedding,
    w: f64,
    plan: &StepPlan,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
    opt: &OptimizerConfig,
) -> Result<NullTextOutput> {
    check_guidance(w)?;
    opt.validate()?;
    let idx = plan.indices();
    if let Some(&t) = idx.iter().find(|&&t| z_star.get(t).is_none()) {
        return Err(Error::Precondition(format!("inversion trajectory lacks step {t}")));
    }
    let count = plan.count();
    let dim = dataset.dim() as f64;

    let mut out = NullTextSchedule::default();
    let mut traj = Trajectory::new(plan.clone());
    let mut z = z_star.at(plan.last())?.clone();
    traj.insert(plan.last(), z.clone())?;
    let mut null = Embedding::uniform(cond.classes());
    let mut calls = 0usize;

    for pos in 0..count {
        let (t, t_prev) = (idx[count - pos], idx[count - pos - 1]);
        let target = z_star.at(t_prev)?;
        let eps_c = predict_noise(dataset, &z, t, cond, schedule)?.epsilon;
        calls += 1;
        let coef = noise_coefficient(schedule.alpha(t), schedule.alpha(t_prev)) * (1.0 - w);

        let evaluate = |e: &Embedding, calls: &mut usize| -> Result<StepEval> {
            let (pred, jac) = predict_noise_grad(dataset, &z, t, e, schedule)?;
            *calls += 1;
            let eps = cfg_combine(&eps_c, &pred.epsilon, w)?;
            let next = ddim_step(&z, t, t_prev, &eps, schedule)?;
            let resid: Vec<f64> = next.iter().zip(target.iter()).map(|(a, b)| a - b).collect();
            let loss = resid.iter().map(|r| r * r).sum::<f64>() / dim;
            if !loss.is_finite() {
                return Err(Error::Optimizer { step: t, message: format!("loss is {loss}") });
            }
            let grad = jac.transpose_mul(&resid).into_iter().map(|g| 2.0 / dim * coef * g).collect();
            Ok(StepEval { loss, grad, next })
        };

        let mut cur = evaluate(&null, &mut calls)?;
        out.initial_losses.insert(t, cur.loss);
        let lr = opt.learning_rate(pos, count);
        let threshold = opt.threshold(pos);
        let mut accepted = 0;
        for _ in 0..opt.max_iters {
            if cur.loss < threshold {
                break;
            }
            let gmax = cur.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !gmax.is_finite() {
                return Err(Error::Optimizer { step: t, message: "non-finite gradient".into() });
            }
            if gmax == 0.0 {
                break;
            }
            let mut step = lr;
            let mut moved = false;
            for _ in 0..=opt.max_halvings {
                let raw: Vec<f64> =
                    null.weights().iter().zip(&cur.grad).map(|(e, g)| e - step * g / gmax).collect();
                let cand = Embedding::project(&raw)?;
                if cand == null {
                    break;
                }
                let eval = evaluate(&cand, &mut calls)?;
                if eval.loss < cur.loss {
                    null = cand;
                    cur = eval;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
            accepted += 1;
        }

        out.embeddings.insert(t, null.clone());
        out.losses.insert(t, cur.loss);
        out.iterations.insert(t, accepted);
        z = cur.next;
        traj.insert(t_prev, z.clone())?;
    }

    Ok(NullTextOutput { schedule: out, trajectory: traj, model_calls: calls })
}

/// Residual of the one-step error expansion used in the optimality argument
/// for the prompt as null embedding.
///
/// With `zbar_t = z*_t`, returns
/// `|| (z*_{t'} - zbar_{t'}) - c (eps(z*_{t'}, t', C) - eps~(zbar_t, t, C, null)) ||`
/// where `t'` precedes `t` in the plan and `c` is the DDIM noise coefficient.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop2_identity(
    z_star: &Trajectory,
    cond: &Embedding,
    null: &Embedding,
    w: f64,
    t: usize,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if w == 1.0 {
        return Err(Error::Precondition("the identity requires a guidance scale other than 1".into()));
    }
    check_guidance(w)?;
    let pos = z_star
        .plan()
        .position(t)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::Precondition(format!("step {t} is not a positive plan step")))?;
    let t_prev = z_star.plan().indices()[pos - 1];
    let (zs_t, zs_prev) = (z_star.at(t)?, z_star.at(t_prev)?);

    let eps_c = predict_noise(dataset, zs_t, t, cond, schedule)?.epsilon;
    let eps_u = predict_noise(dataset, zs_t, t, null, schedule)?.epsilon;
    let guided = cfg_combine(&eps_c, &eps_u, w)?;
    let zbar_prev = ddim_step(zs_t, t, t_prev, &guided, schedule)?;
    let eps_star = predict_noise(dataset, zs_prev, inversion_eval_step(t_prev, t), cond, schedule)?.epsilon;
    let c = noise_coefficient(schedule.alpha(t), schedule.alpha(t_prev));

    let sq: f64 = (0..zs_t.len())
        .map(|j| {
            let lhs = zs_prev[j] - zbar_prev[j];
            let rhs = c * (eps_star[j] - guided[j]);
            (lhs - rhs).powi(2)
        })
        .sum();
    Ok(sq.sqrt())
}
