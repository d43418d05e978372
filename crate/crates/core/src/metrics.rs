//! Reconstruction error and null-embedding similarity measurements.

use std::fmt::Write as _;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::inversion::NullTextSchedule;
use crate::oracle::{predict_noise, Embedding, OracleDataset};
use crate::schedule::NoiseSchedule;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Domain("mse of empty vectors".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the inputs coincide.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-step L1 distances between noise predictions under the optimized null
/// embedding, the prompt `C` and another prompt `C'`, along the reconstruction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseGaps {
    pub steps: Vec<usize>,
    pub null_vs_cond: Vec<f64>,
    pub null_vs_other: Vec<f64>,
    pub cond_vs_other: Vec<f64>,
}

pub fn noise_gap_l1(
    traj: &Trajectory,
    opt_nulls: &NullTextSchedule,
    cond: &Embedding,
    other: &Embedding,
    dataset: &OracleDataset,
    schedule: &NoiseSchedule,
) -> Result<NoiseGaps> {
    let mut gaps = NoiseGaps::default();
    for (&t, null) in &opt_nulls.embeddings {
        let z = traj.at(t)?;
        let e_null = predict_noise(dataset, z, t, null, schedule)?.epsilon;
        let e_cond = predict_noise(dataset, z, t, cond, schedule)?.epsilon;
        let e_other = predict_noise(dataset, z, t, other, schedule)?.epsilon;
        gaps.steps.push(t);
        gaps.null_vs_cond.push(l1(&e_null, &e_cond));
        gaps.null_vs_other.push(l1(&e_null, &e_other));
        gaps.cond_vs_other.push(l1(&e_cond, &e_other));
    }
    Ok(gaps)
}

fn centered(e: &Embedding, mean: &[f64]) -> Vec<f64> {
    e.weights().iter().zip(mean).map(|(a, m)| a - m).collect()
}

/// Cosine similarity with the zero-vector convention: 0 if either side vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean of a non-empty embedding pool.
pub fn pool_mean(pool: &[Embedding]) -> Result<Vec<f64>> {
    let first = pool.first().ok_or_else(|| Error::Precondition("centering pool is empty".into()))?;
    let mut mean = vec![0.0; first.classes()];
    for e in pool {
        for (m, v) in mean.iter_mut().zip(e.weights()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= pool.len() as f64);
    Ok(mean)
}

/// Per-step cosine similarity between each optimized null embedding and
/// `cond`, both centered by the pool mean. Ordered by ascending step.
pub fn centered_cosine(
    opt_nulls: &NullTextSchedule,
    cond: &Embedding,
    pool: &[Embedding],
) -> Result<Vec<f64>> {
    let mean = pool_mean(pool)?;
    let c = centered(cond, &mean);
    Ok(opt_nulls.embeddings.values().map(|e| cosine(&centered(e, &mean), &c)).collect())
}

/// Everything measured for one null-text reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub gaps: NoiseGaps,
    pub cosine_null_vs_cond: Vec<f64>,
    pub cosine_null_vs_other: Vec<f64>,
    pub cosine_cond_vs_other: f64,
}

impl MetricReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        z0: &[f64],
        traj: &Trajectory,
        opt_nulls: &NullTextSchedule,
        cond: &Embedding,
        other: &Embedding,
        pool: &[Embedding],
        data_range: f64,
        dataset: &OracleDataset,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let recon = traj.at(0)?;
        let mse = mse(recon, z0)?;
        let mean = pool_mean(pool)?;
        Ok(Self {
            mse,
            psnr_db: psnr_from_mse(mse, data_range),
            gaps: noise_gap_l1(traj, opt_nulls, cond, other, dataset, schedule)?,
            cosine_null_vs_cond: centered_cosine(opt_nulls, cond, pool)?,
            cosine_null_vs_other: centered_cosine(opt_nulls, other, pool)?,
            cosine_cond_vs_other: cosine(&centered(cond, &mean), &centered(other, &mean)),
        })
    }

    /// Long-format rows `step,series,value`, prefixed by `prefix` (e.g. a trial id).
    pub fn write_long(&self, prefix: &str, out: &mut String) {
        let series: [(&str, &[f64]); 5] = [
            ("l1_null_vs_cond", &self.gaps.null_vs_cond),
            ("l1_null_vs_other", &self.gaps.null_vs_other),
            ("l1_cond_vs_other", &self.gaps.cond_vs_other),
            ("cos_null_vs_cond", &self.cosine_null_vs_cond),
            ("cos_null_vs_other", &self.cosine_null_vs_other),
        ];
        for (i, &t) in self.gaps.steps.iter().enumerate() {
            for (name, values) in series {
                let _ = writeln!(out, "{prefix}{t},{name},{}", values[i]);
            }
            let _ = writeln!(out, "{prefix}{t},cos_cond_vs_other,{}", self.cosine_cond_vs_other);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{run_forward_inversion, Latent};
    use crate::inversion::{optimize_null_text, OptimizerConfig};
    use crate::schedule::StepPlan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mse_matches_two_pass_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let mut acc = 0.0;
            for d in &diffs {
                acc += d * d;
            }
            let want = acc / n as f64;
            let got = mse(&a, &b).unwrap();
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.0], &[2.0], 2.0).unwrap(), 0.0);
        assert_eq!(psnr(&[1.0], &[1.0], 2.0).unwrap(), f64::INFINITY);
        assert_eq!(format!("{}", psnr(&[1.0], &[1.0], 2.0).unwrap()), "inf");
        assert!((psnr(&[0.0], &[0.2], 2.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&[0.0], &[0.2], 0.0).is_err());
        let mut last = f64::INFINITY;
        for m in [1e-6, 1e-3, 0.1, 1.0, 10.0] {
            let p = psnr_from_mse(m, 3.0);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn centering_conventions() {
        let c = Embedding::one_hot(3, 0).unwrap();
        let mut nulls = NullTextSchedule::default();
        nulls.embeddings.insert(20, c.clone());
        nulls.embeddings.insert(40, c.clone());
        let pool = [c.clone(), Embedding::one_hot(3, 2).unwrap()];
        assert!(centered_cosine(&nulls, &c, &pool).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(centered_cosine(&nulls, &c, std::slice::from_ref(&c)).unwrap(), vec![0.0, 0.0]);
        assert!(centered_cosine(&nulls, &c, &[]).is_err());
    }

    fn gaps_for(ds: &OracleDataset, w: f64) -> (NoiseGaps, NoiseGaps) {
        let s = NoiseSchedule::default();
        let plan = StepPlan::new(&s, 20).unwrap();
        let c = Embedding::one_hot(ds.classes(), 0).unwrap();
        let other = Embedding::one_hot(ds.classes(), ds.classes() - 1).unwrap();
        let z0 = Latent::new(vec![-1.9, 0.2]).unwrap();
        let fwd = run_forward_inversion(&z0, &plan, &c, ds, &s).unwrap();
        let nt = optimize_null_text(&fwd.trajectory, &c, w, &plan, ds, &s, &OptimizerConfig::default()).unwrap();
        (
            noise_gap_l1(&nt.trajectory, &nt.schedule, &c, &other, ds, &s).unwrap(),
            noise_gap_l1(&nt.trajectory, &nt.schedule, &other, &c, ds, &s).unwrap(),
        )
    }

    fn two_class() -> OracleDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for k in 0..2 {
            for _ in 0..30 {
                let cx = if k == 0 { -2.0 } else { 2.0 };
                pts.push(vec![cx + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
                labels.push(k);
            }
        }
        OracleDataset::new(pts, labels, 2).unwrap()
    }

    #[test]
    fn gaps_swap_with_prompts() {
        let (a, b) = gaps_for(&two_class(), 7.5);
        assert_eq!(a.null_vs_cond, b.null_vs_other);
        assert_eq!(a.null_vs_other, b.null_vs_cond);
        assert_eq!(a.steps.len(), 20);
    }

    #[test]
    fn single_class_gaps_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = (0..20).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ds = OracleDataset::new(pts, vec![0; 20], 1).unwrap();
        let (g, _) = gaps_for(&ds, 7.5);
        for v in g.null_vs_cond.iter().chain(&g.null_vs_other).chain(&g.cond_vs_other) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn null_equal_to_cond_has_zero_first_gap() {
        let ds = two_class();
        let s = NoiseSchedule::default();
        let plan = StepPlan::new(&s, 10).unwrap();
        let c = Embedding::one_hot(2, 1).unwrap();
        let z0 = Latent::new(vec![2.2, 0.0]).unwrap();
        let fwd = run_forward_inversion(&z0, &plan, &c, &ds, &s).unwrap();
        let mut nulls = NullTextSchedule::default();
        for &t in &plan.indices()[1..] {
            nulls.embeddings.insert(t, c.clone());
        }
        let g = noise_gap_l1(&fwd.trajectory, &nulls, &c, &Embedding::one_hot(2, 0).unwrap(), &ds, &s).unwrap();
        assert!(g.null_vs_cond.iter().all(|&v| v == 0.0));
    }
}
