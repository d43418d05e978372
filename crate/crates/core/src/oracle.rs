//! Exact conditional noise model over a finite labeled dataset.
//!
//! With `p(z_0) ∝ sum_k e_k p(z_0 | k)` and each `p(z_0 | k)` the empirical
//! distribution of class-`k` points, the noise a perfectly trained model would
//! predict at `(z, t)` is the posterior mean of
//! `d = (z - sqrt(a_t) z_0) / sqrt(1 - a_t)`, i.e. a softmax-weighted average of
//! the per-point noise directions. Weights are evaluated in the log domain with
//! the maximum subtracted, so the leading weight is exactly one.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const SIMPLEX_TOL: f64 = 1e-12;

/// Finite set of `D`-dimensional points, each carrying a class label `< K`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDataset {
    coords: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl OracleDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("dataset must contain at least one point".into()));
        }
        if points.len() != labels.len() {
            return Err(Error::Config("one label per point is required".into()));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Config("points must have dimension >= 1".into()));
        }
        let mut counts = vec![0usize; classes];
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (p, &l) in points.iter().zip(&labels) {
            if p.len() != dim {
                return Err(Error::Config(format!(
                    "mixed point dimensions {} and {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("dataset coordinates must be finite".into()));
            }
            if l >= classes {
                return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
            }
            counts[l] += 1;
            coords.extend_from_slice(p);
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("class {k} has no points")));
        }
        Ok(Self { coords, labels, dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.coords.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        let mut n = 0usize;
        for (p, _) in self.iter().filter(|&(_, l)| l == k) {
            n += 1;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    }

    /// Largest coordinate minus smallest coordinate over the whole dataset.
    pub fn data_range(&self) -> f64 {
        let (lo, hi) = self
            .coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }

    /// Points of class `k` only, relabeled as a single-class dataset.
    pub fn class_subset(&self, k: usize) -> Result<Self> {
        let points: Vec<Vec<f64>> =
            self.iter().filter(|&(_, l)| l == k).map(|(p, _)| p.to_vec()).collect();
        let n = points.len();
        Self::new(points, vec![0; n], 1)
    }

    /// Same points with label `l` replaced by `perm[l]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let points = self.iter().map(|(p, _)| p.to_vec()).collect();
        let labels = self.labels.iter().map(|&l| perm[l]).collect();
        Self::new(points, labels, self.classes)
    }

    /// One point per line: `D` floats then the integer label.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, l) in self.iter() {
            for v in p {
                let _ = write!(out, "{v} ");
            }
            let _ = writeln!(out, "{l}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 {
                return Err(Error::Parse(format!("line {}: need coordinates and a label", lineno + 1)));
            }
            let (coords, label) = fields.split_at(fields.len() - 1);
            let p = coords
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            let l = label[0]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: bad label: {e}", lineno + 1)))?;
            points.push(p);
            labels.push(l);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(points, labels, classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Conditioning vector on the probability simplex over the `K` classes.
///
/// One-hot vectors play the role of prompt embeddings; the uniform vector is
/// the null-text embedding and yields the unconditional prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    weights: Vec<f64>,
}

impl Embedding {
    pub fn one_hot(classes: usize, k: usize) -> Result<Self> {
        if k >= classes {
            return Err(Error::Config(format!("class {k} out of range for {classes} classes")));
        }
        let mut weights = vec![0.0; classes];
        weights[k] = 1.0;
        Ok(Self { weights })
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes > 0, "embedding needs at least one class");
        Self { weights: vec![1.0 / classes as f64; classes] }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("embedding needs at least one class".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("embedding weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Config(format!("embedding weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Maps an arbitrary vector back onto the simplex by clamping negative
    /// entries to zero and renormalizing.
    pub fn project(raw: &[f64]) -> Result<Self> {
        let clamped: Vec<f64> = raw.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let sum: f64 = clamped.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::Domain("projection onto the simplex has no mass".into()));
        }
        Ok(Self { weights: clamped.into_iter().map(|v| v / sum).collect() })
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

/// Posterior-mean noise at one `(z, t, e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub epsilon: Vec<f64>,
    /// Log of the prior expectation of the standard-normal density of `d`.
    pub log_partition: f64,
}

/// `D x K` matrix of partial derivatives of the noise with respect to the
/// embedding weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    dim: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Jacobian {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.classes + k]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `J^T r` for a `D`-vector `r`.
    pub fn transpose_mul(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        for (i, ri) in r.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += self.get(i, k) * ri;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Exact noise prediction for latent `z` at diffusion step `t >= 1`.
pub fn predict_noise(
    dataset: &OracleDataset,
    z: &[f64],
    t: usize,
    e: &Embedding,
    schedule: &NoiseSchedule,
) -> Result<NoisePrediction> {
    let alpha = step_alpha(schedule, t)?;
    check_embedding(dataset, e)?;
    posterior_noise(dataset, z, alpha, e.weights()).map(|(p, _)| p)
}

/// [`predict_noise`] together with its analytic Jacobian with respect to `e`.
pub fn predict_noise_grad(
    dataset: &OracleDataset,
    z: &[f64],
    t: usize,
    e: &Embedding,
    schedule: &NoiseSchedule,
) -> Result<(NoisePrediction, Jacobian)> {
    let alpha = step_alpha(schedule, t)?;
    check_embedding(dataset, e)?;
    posterior_noise(dataset, z, alpha, e.weights())
}

/// Posterior-mean noise at signal level `alpha` under unnormalized,
/// non-negative class weights. The Jacobian is taken with respect to the raw
/// weights (no simplex constraint), which is what finite differences probe.
pub fn posterior_noise(
    dataset: &OracleDataset,
    z: &[f64],
    alpha: f64,
    weights: &[f64],
) -> Result<(NoisePrediction, Jacobian)> {
    let dim = dataset.dim();
    let classes = dataset.classes();
    if z.len() != dim {
        return Err(Error::Domain(format!("latent has dimension {}, dataset {dim}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("latent has non-finite entries".into()));
    }
    if weights.len() != classes {
        return Err(Error::Domain(format!(
            "embedding has {} classes, dataset {classes}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Domain("class weights must be non-negative with positive mass".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("signal level {alpha} outside (0, 1)")));
    }

    let scale = (1.0 - alpha).sqrt();
    let root = alpha.sqrt();
    let n = dataset.len();
    let mut dirs = vec![0.0; n * dim];
    let mut half_sq = vec![0.0; n];
    for (i, (p, _)) in dataset.iter().enumerate() {
        let d = &mut dirs[i * dim..(i + 1) * dim];
        let mut sq = 0.0;
        for ((di, zi), xi) in d.iter_mut().zip(z).zip(p) {
            *di = (zi - root * xi) / scale;
            sq += *di * *di;
        }
        half_sq[i] = -0.5 * sq;
    }

    let log_weight = |i: usize| weights[dataset.label(i)].ln() + half_sq[i];
    let shift = (0..n)
        .filter(|&i| weights[dataset.label(i)] > 0.0)
        .map(log_weight)
        .fold(f64::NEG_INFINITY, f64::max);

    // Gaussian factors relative to the shift, shared by every class.
    let gauss: Vec<f64> = half_sq.iter().map(|q| (q - shift).exp()).collect();
    let mut mass = vec![0.0; classes];
    let mut moment = vec![0.0; classes * dim];
    let mut total = 0.0;
    let mut unnorm = vec![0.0; n];
    for i in 0..n {
        let k = dataset.label(i);
        if weights[k] > 0.0 {
            unnorm[i] = (log_weight(i) - shift).exp();
            total += unnorm[i];
        }
        mass[k] += gauss[i];
        for j in 0..dim {
            moment[k * dim + j] += gauss[i] * dirs[i * dim + j];
        }
    }

    let mut epsilon = vec![0.0; dim];
    for i in 0..n {
        if unnorm[i] == 0.0 {
            continue;
        }
        let w = unnorm[i] / total;
        for (e, d) in epsilon.iter_mut().zip(&dirs[i * dim..(i + 1) * dim]) {
            *e += w * d;
        }
    }

    // Z = sum_k e_k A_k with A_k the class mass relative to the same shift.
    let partition: f64 = weights.iter().zip(&mass).map(|(w, a)| w * a).sum();
    let mut data = vec![0.0; dim * classes];
    for k in 0..classes {
        for j in 0..dim {
            data[j * classes + k] = (moment[k * dim + j] - epsilon[j] * mass[k]) / partition;
        }
    }

    let prior_mass: f64 = dataset.iter().map(|(_, l)| weights[l]).sum();
    let log_partition = shift + total.ln()
        - prior_mass.ln()
        - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();

    Ok((NoisePrediction { epsilon, log_partition }, Jacobian { dim, classes, data }))
}

fn step_alpha(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("noise is undefined at the clean step t = 0".into()));
    }
    schedule.check_step(t)?;
    Ok(schedule.alpha(t))
}

fn check_embedding(dataset: &OracleDataset, e: &Embedding) -> Result<()> {
    if e.classes() != dataset.classes() {
        return Err(Error::Domain(format!(
            "embedding has {} classes, dataset {}",
            e.classes(),
            dataset.classes()
        )));
    }
    Ok(())
}

/// Classifier-free guidance: `eps_uncond + w (eps_cond - eps_uncond)`.
///
/// At `w = 1` the conditional prediction is returned as-is so that guidance at
/// unit scale is bitwise inert.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::Domain(format!(
            "guidance inputs differ in dimension: {} vs {}",
            eps_cond.len(),
            eps_uncond.len()
        )));
    }
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::Precondition(format!("guidance scale must be finite and >= 0, got {w}")));
    }
    if w == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(eps_cond.iter().zip(eps_uncond).map(|(c, u)| u + w * (c - u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> OracleDataset {
        let points = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        OracleDataset::new(points, labels, classes).unwrap()
    }

    // Direct evaluation of the ratio of prior expectations, density included.
    fn brute_force(ds: &OracleDataset, z: &[f64], alpha: f64, e: &[f64]) -> Vec<f64> {
        let d = ds.dim();
        let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0);
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for i in 0..ds.len() {
            let x = ds.point(i);
            let dir: Vec<f64> =
                (0..d).map(|j| (z[j] - alpha.sqrt() * x[j]) / (1.0 - alpha).sqrt()).collect();
            let sq: f64 = dir.iter().map(|v| v * v).sum();
            let pg = norm * (-sq / 2.0).exp();
            let prior = e[ds.label(i)];
            for j in 0..d {
                num[j] += prior * pg * dir[j];
            }
            den += prior * pg;
        }
        num.iter().map(|v| v / den).collect()
    }

    #[test]
    fn single_point_collapses() {
        let s = schedule();
        let ds = OracleDataset::new(vec![vec![0.3, -1.2]], vec![0], 1).unwrap();
        let z = [0.7, 0.1];
        for t in [1, 17, 500, 1000] {
            let p = predict_noise(&ds, &z, t, &Embedding::uniform(1), &s).unwrap();
            let a = s.alpha(t);
            for (j, zj) in z.iter().enumerate() {
                let expect = (zj - a.sqrt() * ds.point(0)[j]) / (1.0 - a).sqrt();
                assert_eq!(p.epsilon[j], expect);
            }
        }
    }

    #[test]
    fn symmetric_pair_cancels() {
        let s = schedule();
        let ds = OracleDataset::new(vec![vec![-1.5], vec![1.5]], vec![0, 0], 1).unwrap();
        let p = predict_noise(&ds, &[0.0], 300, &Embedding::uniform(1), &s).unwrap();
        assert_eq!(p.epsilon, vec![0.0]);
    }

    #[test]
    fn matches_brute_force_summation() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let ds = random_dataset(&mut rng, 8, 2, 2);
            let t = rng.random_range(50..=1000);
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let e = Embedding::uniform(2);
            let got = predict_noise(&ds, &z, t, &e, &s).unwrap().epsilon;
            let want = brute_force(&ds, &z, s.alpha(t), e.weights());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn log_partition_matches_direct_density() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_dataset(&mut rng, 6, 2, 2);
        let e = Embedding::from_weights(vec![0.25, 0.75]).unwrap();
        let z = [0.4, -0.2];
        let t = 600;
        let a = s.alpha(t);
        let mut den = 0.0;
        let mut prior_mass = 0.0;
        for i in 0..ds.len() {
            let x = ds.point(i);
            let sq: f64 = (0..2).map(|j| ((z[j] - a.sqrt() * x[j]) / (1.0 - a).sqrt()).powi(2)).sum();
            den += e.weight(ds.label(i)) * (-sq / 2.0).exp() / (2.0 * std::f64::consts::PI);
            prior_mass += e.weight(ds.label(i));
        }
        let p = predict_noise(&ds, &z, t, &e, &s).unwrap();
        assert!((p.log_partition - (den / prior_mass).ln()).abs() < 1e-12);
    }

    #[test]
    fn step_zero_is_a_domain_error() {
        let ds = OracleDataset::new(vec![vec![0.0]], vec![0], 1).unwrap();
        let r = predict_noise(&ds, &[1.0], 0, &Embedding::uniform(1), &schedule());
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = predict_noise(&ds, &[1.0, 2.0], 3, &Embedding::uniform(1), &schedule());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn single_class_jacobian_is_zero() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_dataset(&mut rng, 10, 3, 1);
        let (_, j) = predict_noise_grad(&ds, &[0.1, 0.2, -0.3], 400, &Embedding::uniform(1), &s).unwrap();
        assert!(j.max_abs() < 1e-12);
    }

    #[test]
    fn duplicated_classes_carry_no_information() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<Vec<f64>> =
            (0..5).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut points = base.clone();
        points.extend(base);
        let labels = (0..10).map(|i| i / 5).collect();
        let ds = OracleDataset::new(points, labels, 2).unwrap();
        let e = Embedding::from_weights(vec![0.3, 0.7]).unwrap();
        let (_, j) = predict_noise_grad(&ds, &[0.5, -0.5], 250, &e, &s).unwrap();
        assert!(j.max_abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for case in 0..60 {
            let classes = 2 + case % 3;
            let ds = random_dataset(&mut rng, 12, 2, classes);
            let t = [1, 500, 1000][case % 3];
            let a = s.alpha(t);
            let anchor = ds.point(rng.random_range(0..ds.len())).to_vec();
            let z: Vec<f64> = anchor
                .iter()
                .map(|x| a.sqrt() * x + (1.0 - a).sqrt() * rng.random_range(-1.0..1.0))
                .collect();
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let (_, jac) = posterior_noise(&ds, &z, a, &w).unwrap();
            for k in 0..classes {
                let mut up = w.clone();
                let mut down = w.clone();
                up[k] += h;
                down[k] -= h;
                let (pu, _) = posterior_noise(&ds, &z, a, &up).unwrap();
                let (pd, _) = posterior_noise(&ds, &z, a, &down).unwrap();
                for j in 0..2 {
                    let fd = (pu.epsilon[j] - pd.epsilon[j]) / (2.0 * h);
                    let rel = (jac.get(j, k) - fd).abs() / fd.abs().max(1e-3);
                    assert!(rel < 1e-4, "case {case} t={t} ({j},{k}): {} vs {fd}", jac.get(j, k));
                }
            }
        }
    }

    #[test]
    fn stable_far_from_data() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_dataset(&mut rng, 20, 2, 2);
        for t in [1, 2, 999, 1000] {
            for z in [[1e3, -1e3], [-1e3, 0.0], [0.0, 1e3]] {
                let (p, j) =
                    predict_noise_grad(&ds, &z, t, &Embedding::uniform(2), &s).unwrap();
                assert!(p.epsilon.iter().all(|v| v.is_finite()));
                assert!(p.log_partition.is_finite());
                assert!(j.max_abs().is_finite());
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let v = [0.3, -1.25, 7.0];
        for w in [0.0, 1.0, 3.0, 7.5, 10.0] {
            assert_eq!(cfg_combine(&v, &v, w).unwrap(), v.to_vec());
        }
        assert_eq!(cfg_combine(&[2.0], &[0.0], 1.0).unwrap(), vec![2.0]);
        assert_eq!(cfg_combine(&[2.0], &[0.0], 3.0).unwrap(), vec![6.0]);
        assert!(matches!(cfg_combine(&[1.0], &[1.0, 2.0], 2.0), Err(Error::Domain(_))));
        assert!(cfg_combine(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn dataset_text_roundtrip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = random_dataset(&mut rng, 9, 3, 3);
        assert_eq!(OracleDataset::from_text(&ds.to_text()).unwrap(), ds);
        assert!(OracleDataset::from_text("").is_err());
        assert!(OracleDataset::from_text("1.0 2.0 x\n").is_err());
        // class 1 missing
        assert!(OracleDataset::new(vec![vec![0.0], vec![1.0]], vec![0, 2], 3).is_err());
    }

    #[test]
    fn projection_stays_on_simplex() {
        let e = Embedding::project(&[0.7, -0.2, 0.6]).unwrap();
        assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.weight(1), 0.0);
        assert!(Embedding::project(&[-1.0, 0.0]).is_err());
        assert!(Embedding::from_weights(vec![0.5, 0.6]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn one_hot_equals_class_restriction(seed in any::<u64>(), k in 0usize..3, t in 1usize..=1000) {
            let s = schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, 9, 2, 3);
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let full = predict_noise(&ds, &z, t, &Embedding::one_hot(3, k).unwrap(), &s).unwrap();
            let sub = ds.class_subset(k).unwrap();
            let restricted = predict_noise(&sub, &z, t, &Embedding::uniform(1), &s).unwrap();
            for (a, b) in full.epsilon.iter().zip(&restricted.epsilon) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn relabeling_with_permuted_embedding(seed in any::<u64>(), t in 1usize..=1000) {
            let s = schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, 9, 2, 3);
            let perm = [2usize, 0, 1];
            let raw = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.2];
            let sum: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut pw = vec![0.0; 3];
            for (l, &p) in perm.iter().enumerate() {
                pw[p] = w[l];
            }
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let a = predict_noise(&ds, &z, t, &Embedding::project(&w).unwrap(), &s).unwrap();
            let b = predict_noise(&ds.relabeled(&perm).unwrap(), &z, t, &Embedding::project(&pw).unwrap(), &s).unwrap();
            for (x, y) in a.epsilon.iter().zip(&b.epsilon) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
