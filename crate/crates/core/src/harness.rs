//! Experiment driver behind the `diffinv` CLI: dataset synthesis, seeded
//! method comparisons, property checks, similarity traces and edits, all
//! emitted as CSV.

mod config;

pub use config::{DatasetConfig, EditConfig, ExperimentConfig, PropcheckConfig, RunConfig, ScheduleConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{
    ddim_inverse_step, ddim_step, noise_component, run_forward_inversion, run_reverse, stochastic_forward,
    Latent, NullSchedule,
};
use crate::editing::{edit_condition_swap, edit_sdedit, EditMethod, EditSpec, SdeditMode, SdeditNull};
use crate::error::{Error, Result};
use crate::inversion::{invert, invert_null_text, verify_prop2_identity, Method};
use crate::metrics::{psnr_from_mse, MetricReport};
use crate::oracle::{cfg_combine, predict_noise, Embedding, OracleDataset};
use crate::schedule::{NoiseSchedule, SigmaSchedule, StepPlan};

/// Per-class Gaussian model used to draw held-out test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub means: Vec<Vec<f64>>,
    pub spreads: Vec<f64>,
}

impl ClusterModel {
    /// Moment estimate from a dataset: class means and isotropic per-class spread.
    pub fn estimate(ds: &OracleDataset) -> Self {
        let means: Vec<Vec<f64>> = (0..ds.classes()).map(|k| ds.class_mean(k)).collect();
        let mut sq = vec![0.0; ds.classes()];
        let mut n = vec![0usize; ds.classes()];
        for (p, k) in ds.iter() {
            sq[k] += p.iter().zip(&means[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n[k] += 1;
        }
        let spreads = sq.iter().zip(&n).map(|(s, &c)| (s / (c.max(1) * ds.dim()) as f64).sqrt()).collect();
        Self { means, spreads }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn sample(&self, class: usize, rng: &mut impl Rng) -> Latent {
        let s = self.spreads[class];
        Latent::from(
            self.means[class]
                .iter()
                .map(|m| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + s * n
                })
                .collect::<Vec<f64>>(),
        )
    }
}

/// Seeded Gaussian clusters, or the configured dataset file.
pub fn gen_dataset(spec: &DatasetConfig, seed: u64) -> Result<(OracleDataset, ClusterModel)> {
    spec.validate()?;
    if let Some(path) = &spec.path {
        let ds = OracleDataset::load(path)?;
        let model = ClusterModel::estimate(&ds);
        return Ok((ds, model));
    }
    let model = ClusterModel { means: spec.cluster_means(), spreads: spec.cluster_spreads() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(spec.classes * spec.points_per_class);
    let mut labels = Vec::with_capacity(points.capacity());
    for k in 0..spec.classes {
        for _ in 0..spec.points_per_class {
            points.push(model.sample(k, &mut rng).into_vec());
            labels.push(k);
        }
    }
    Ok((OracleDataset::new(points, labels, spec.classes)?, model))
}

/// Independent RNG stream for one trial, derived from `(seed, trial)`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

/// Class and held-out input for a trial; classes cycle through `0..K`.
pub fn trial_input(model: &ClusterModel, seed: u64, trial: usize) -> (usize, Latent) {
    let class = trial % model.classes();
    let mut rng = trial_rng(seed, trial);
    (class, model.sample(class, &mut rng))
}

fn gauss(rng: &mut impl Rng, scale: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    scale * n
}

fn fmt_w(w: f64) -> String {
    format!("{w}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Shared setup: schedule, dataset and cluster model.
pub struct Setup {
    pub schedule: NoiseSchedule,
    pub dataset: OracleDataset,
    pub model: ClusterModel,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let (dataset, model) = gen_dataset(&cfg.dataset, cfg.experiment.seed)?;
        Ok(Self { schedule, dataset, model })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub steps: usize,
    pub w: f64,
    pub trial: usize,
    pub seed: u64,
    pub mse: f64,
    pub psnr_db: f64,
    pub model_calls: usize,
    pub wall_ms: f64,
}

pub const RUNS_HEADER: &str = "method,steps,w,trial,seed,mse,psnr_db,model_calls,wall_ms";

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{:?},{},{:?}",
            self.method,
            self.steps,
            fmt_w(self.w),
            self.trial,
            self.seed,
            self.mse,
            self.psnr_db,
            self.model_calls,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub method: Method,
    pub steps: usize,
    pub w: f64,
    pub trial: usize,
    pub code: &'static str,
    pub message: String,
}

/// Median of one cell with a percentile-bootstrap 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub median: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub steps: usize,
    pub w: f64,
    pub n: usize,
    pub mse: Interval,
    pub psnr_db: Interval,
    pub model_calls_median: f64,
    pub wall_ms_median: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareOutput {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<SummaryRow>,
}

impl CompareOutput {
    pub fn runs_csv(&self) -> String {
        let mut out = format!("{RUNS_HEADER}\n");
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "method,steps,w,n,mse_median,mse_ci_low,mse_ci_high,psnr_median,psnr_ci_low,psnr_ci_high,model_calls_median,wall_ms_median\n",
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.method,
                s.steps,
                fmt_w(s.w),
                s.n,
                s.mse.median,
                s.mse.low,
                s.mse.high,
                s.psnr_db.median,
                s.psnr_db.low,
                s.psnr_db.high,
                s.model_calls_median,
                s.wall_ms_median
            );
        }
        out
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from("method,steps,w,trial,code,message\n");
        for f in &self.failures {
            let _ = writeln!(out, "{},{},{},{},{},{}", f.method, f.steps, fmt_w(f.w), f.trial, f.code, csv_field(&f.message));
        }
        out
    }

    /// Records of one `(method, steps, w)` cell, in trial order.
    pub fn cell(&self, method: Method, steps: usize, w: f64) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.method == method && r.steps == steps && r.w == w).collect()
    }

    pub fn summary_for(&self, method: Method, steps: usize, w: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.method == method && s.steps == steps && s.w == w)
    }
}

/// Median with the mean-of-middle-pair rule for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b { a } else { 0.5 * (a + b) }
    }
}

/// Percentile-bootstrap 95% interval for the median.
pub fn bootstrap_median(values: &[f64], resamples: usize, rng: &mut impl Rng) -> Interval {
    let mut meds: Vec<f64> = (0..resamples)
        .map(|_| {
            let sample: Vec<f64> = (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).collect();
            median(&sample)
        })
        .collect();
    meds.sort_by(f64::total_cmp);
    let lo = ((0.025 * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = ((0.975 * resamples as f64).ceil() as usize).saturating_sub(1).min(resamples - 1);
    Interval { median: median(values), low: meds[lo], high: meds[hi] }
}

fn summarize(records: &[RunRecord], cfg: &ExperimentConfig) -> Vec<SummaryRow> {
    let run = &cfg.experiment;
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &method in &run.methods {
        for &steps in &run.plan_sizes {
            for &w in &run.guidance {
                cell += 1;
                let recs: Vec<&RunRecord> =
                    records.iter().filter(|r| r.method == method && r.steps == steps && r.w == w).collect();
                if recs.is_empty() {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
                rng.set_stream(u64::MAX - cell);
                let mse: Vec<f64> = recs.iter().map(|r| r.mse).collect();
                let psnr: Vec<f64> = recs.iter().map(|r| r.psnr_db).collect();
                let calls: Vec<f64> = recs.iter().map(|r| r.model_calls as f64).collect();
                let wall: Vec<f64> = recs.iter().map(|r| r.wall_ms).collect();
                rows.push(SummaryRow {
                    method,
                    steps,
                    w,
                    n: recs.len(),
                    mse: bootstrap_median(&mse, run.bootstrap, &mut rng),
                    psnr_db: bootstrap_median(&psnr, run.bootstrap, &mut rng),
                    model_calls_median: median(&calls),
                    wall_ms_median: median(&wall),
                });
            }
        }
    }
    rows
}

/// Every `(method, N, w, trial)` reconstruction. Trial failures are
/// collected rather than aborting the sweep.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareOutput> {
    let setup = Setup::new(cfg)?;
    let run = &cfg.experiment;
    let range = setup.dataset.data_range();
    if range <= 0.0 || range.is_nan() {
        return Err(Error::Config("dataset has zero coordinate range; PSNR is undefined".into()));
    }
    let classes = setup.dataset.classes();
    let mut out = CompareOutput::default();
    for &method in &run.methods {
        for &steps in &run.plan_sizes {
            let plan = StepPlan::new(&setup.schedule, steps)?;
            for &w in &run.guidance {
                for trial in 0..run.trials {
                    let (class, z0) = trial_input(&setup.model, run.seed, trial);
                    let cond = Embedding::one_hot(classes, class)?;
                    let result = invert(method, &z0, &cond, w, &plan, &setup.dataset, &setup.schedule, &cfg.optimizer)
                        .and_then(|r| {
                            let mse = crate::metrics::mse(&r.reconstruction, &z0)?;
                            Ok((r, mse))
                        });
                    match result {
                        Ok((r, mse)) => out.records.push(RunRecord {
                            method,
                            steps,
                            w,
                            trial,
                            seed: run.seed,
                            mse,
                            psnr_db: psnr_from_mse(mse, range),
                            model_calls: r.model_calls,
                            wall_ms: r.wall_time.as_secs_f64() * 1e3,
                        }),
                        Err(e) => out.failures.push(RunFailure {
                            method,
                            steps,
                            w,
                            trial,
                            code: e.code(),
                            message: e.to_string(),
                        }),
                    }
                }
            }
        }
    }
    out.summary = summarize(&out.records, cfg);
    Ok(out)
}

/// [`compare`] plus `runs.csv`, `summary.csv` and `errors.csv` in `dir`.
pub fn run_compare(cfg: &ExperimentConfig, dir: &Path) -> Result<CompareOutput> {
    let out = compare(cfg)?;
    write_file(dir, "runs.csv", &out.runs_csv())?;
    write_file(dir, "summary.csv", &out.summary_csv())?;
    write_file(dir, "errors.csv", &out.errors_csv())?;
    Ok(out)
}

/// Monte-Carlo estimate of the forward-process gap `E||d_{t-m} - d_t||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub t: usize,
    pub lag: usize,
    pub mean: f64,
    pub std_err: f64,
    pub expected: f64,
}

/// Gap estimates for every lag from the same `runs` seeded forward samples.
pub fn forward_gaps(
    z0: &Latent,
    schedule: &NoiseSchedule,
    sigmas: &SigmaSchedule,
    t: usize,
    lags: &[usize],
    runs: usize,
    seed: u64,
) -> Result<Vec<GapEstimate>> {
    if lags.iter().any(|&m| m == 0 || m >= t) || t > schedule.steps() {
        return Err(Error::Precondition(format!("lags must lie in 1..{t} and t <= T")));
    }
    let mut samples = vec![Vec::with_capacity(runs); lags.len()];
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let traj = stochastic_forward(z0, schedule, sigmas, rng.next_u64())?;
        let d = |s: usize| -> Result<Vec<f64>> { Ok(noise_component(traj.at(s)?, z0, schedule.alpha(s))) };
        let d_t = d(t)?;
        for (i, &m) in lags.iter().enumerate() {
            let d_m = d(t - m)?;
            samples[i].push(d_m.iter().zip(&d_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        }
    }
    Ok(lags
        .iter()
        .zip(samples)
        .map(|(&m, s)| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            GapEstimate {
                t,
                lag: m,
                mean,
                std_err: (var / n).sqrt(),
                expected: sigmas.expected_gap(schedule, t, m, z0.dim()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropRow {
    pub property: String,
    pub params: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn propcheck_csv(rows: &[PropRow]) -> String {
    let mut out = String::from("property,params,measured,expected,tolerance,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{}",
            r.property,
            csv_field(&r.params),
            r.measured,
            r.expected,
            r.tolerance,
            r.pass
        );
    }
    out
}

/// Count of `(z, t, w)` triples where `cfg_combine(e, e, w)` is not bitwise `e`.
pub fn cfg_identity_mismatches(setup: &Setup, samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, classes, steps) = (setup.dataset.dim(), setup.dataset.classes(), setup.schedule.steps());
    let mut bad = 0;
    for _ in 0..samples {
        let z: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, 3.0)).collect();
        let t = rng.random_range(1..=steps);
        let w = rng.random_range(0.0..=10.0);
        let e = Embedding::one_hot(classes, rng.random_range(0..classes))?;
        let eps = predict_noise(&setup.dataset, &z, t, &e, &setup.schedule)?.epsilon;
        let mixed = cfg_combine(&eps, &eps, w)?;
        if mixed.iter().zip(&eps).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Whether guided sampling with `null = cond` is bitwise identical across `ws`.
pub fn reverse_guidance_invariant(setup: &Setup, steps: usize, ws: &[f64], seed: u64) -> Result<bool> {
    let plan = StepPlan::new(&setup.schedule, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = setup.dataset.classes();
    for _ in 0..8 {
        let z: Vec<f64> = (0..setup.dataset.dim()).map(|_| gauss(&mut rng, 1.0)).collect();
        let z = Latent::new(z)?;
        let cond = Embedding::one_hot(classes, rng.random_range(0..classes))?;
        let nulls = NullSchedule::Constant(cond.clone());
        let mut first = None;
        for &w in ws {
            let traj = run_reverse(&z, &plan, &cond, &nulls, w, &setup.dataset, &setup.schedule)?.trajectory;
            match &first {
                None => first = Some(traj),
                Some(f) if !f.bitwise_eq(&traj) => return Ok(false),
                Some(_) => {}
            }
        }
    }
    Ok(true)
}

/// Largest relative error of `ddim_step(ddim_inverse_step(z))` against `z`
/// over random latents, noise vectors and step pairs.
pub fn roundtrip_max_error(setup: &Setup, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = setup.schedule.steps();
    let dim = setup.dataset.dim();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let t = rng.random_range(1..=steps);
        let t_prev = rng.random_range(0..t);
        let z: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, 3.0)).collect();
        let eps: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let up = ddim_inverse_step(&z, t_prev, t, &eps, &setup.schedule)?;
        let back = ddim_step(&up, t, t_prev, &eps, &setup.schedule)?;
        let num = back.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        worst = worst.max(num / den);
    }
    Ok(worst)
}

/// Largest error-expansion residual over random inputs, nulls and steps at guidance `w`.
pub fn prop2_max_residual(setup: &Setup, steps: usize, w: f64, samples: usize, seed: u64) -> Result<f64> {
    let plan = StepPlan::new(&setup.schedule, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = setup.dataset.classes();
    let mut worst = 0.0f64;
    let mut trial = 0;
    while trial < samples {
        let class = rng.random_range(0..classes);
        let z0 = setup.model.sample(class, &mut rng);
        let cond = Embedding::one_hot(classes, class)?;
        let fwd = run_forward_inversion(&z0, &plan, &cond, &setup.dataset, &setup.schedule)?.trajectory;
        for _ in 0..10.min(samples - trial) {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
            let null = Embedding::project(&raw)?;
            let t = plan.indices()[rng.random_range(1..=plan.count())];
            let r = verify_prop2_identity(&fwd, &cond, &null, w, t, &setup.dataset, &setup.schedule)?;
            worst = worst.max(r);
            trial += 1;
        }
    }
    Ok(worst)
}

/// Gap-formula, algebraic-identity and invariance checks, one row each.
pub fn propcheck(cfg: &ExperimentConfig) -> Result<Vec<PropRow>> {
    let setup = Setup::new(cfg)?;
    let p = &cfg.propcheck;
    let seed = cfg.experiment.seed;
    let mut rows = Vec::new();

    let (_, z0) = trial_input(&setup.model, seed, 0);
    let base = SigmaSchedule::ddpm(&setup.schedule, 1.0)?;
    for &t in &p.steps {
        let mut by_scale = Vec::new();
        for &scale in &p.sigma_scales {
            let sigmas = base.scaled(&setup.schedule, scale)?;
            let gaps = forward_gaps(&z0, &setup.schedule, &sigmas, t, &p.lags, p.runs, seed)?;
            for g in &gaps {
                let tol = 3.0 * g.std_err + 1e-12;
                rows.push(PropRow {
                    property: "forward_gap".into(),
                    params: format!("scale={scale};t={t};m={}", g.lag),
                    measured: g.mean,
                    expected: g.expected,
                    tolerance: tol,
                    pass: (g.mean - g.expected).abs() <= tol,
                });
            }
            by_scale.push((scale, gaps));
        }
        by_scale.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (i, &m) in p.lags.iter().enumerate() {
            let means: Vec<f64> = by_scale.iter().map(|(_, g)| g[i].mean).collect();
            let decreasing = means.windows(2).all(|w| w[1] < w[0]);
            rows.push(PropRow {
                property: "forward_gap_monotone".into(),
                params: format!("t={t};m={m}"),
                measured: if decreasing { 1.0 } else { 0.0 },
                expected: 1.0,
                tolerance: 0.0,
                pass: decreasing,
            });
        }
    }

    let bad = cfg_identity_mismatches(&setup, p.samples, seed)?;
    rows.push(PropRow {
        property: "cfg_identity".into(),
        params: format!("samples={}", p.samples),
        measured: bad as f64,
        expected: 0.0,
        tolerance: 0.0,
        pass: bad == 0,
    });
    let steps = cfg.experiment.analysis_steps;
    let invariant = reverse_guidance_invariant(&setup, steps, &[1.0, 3.0, 7.5], seed)?;
    rows.push(PropRow {
        property: "prompt_null_guidance_invariance".into(),
        params: format!("steps={steps};w=1|3|7.5"),
        measured: if invariant { 0.0 } else { 1.0 },
        expected: 0.0,
        tolerance: 0.0,
        pass: invariant,
    });
    let rt = roundtrip_max_error(&setup, 10 * p.samples, seed)?;
    rows.push(PropRow {
        property: "ddim_roundtrip".into(),
        params: format!("samples={}", 10 * p.samples),
        measured: rt,
        expected: 0.0,
        tolerance: 1e-12,
        pass: rt < 1e-12,
    });
    for w in [0.0, 2.0, 7.5] {
        let r = prop2_max_residual(&setup, steps, w, p.samples, seed)?;
        rows.push(PropRow {
            property: "error_expansion_identity".into(),
            params: format!("w={w};samples={}", p.samples),
            measured: r,
            expected: 0.0,
            tolerance: 1e-10,
            pass: r < 1e-10,
        });
    }
    Ok(rows)
}

pub fn run_propcheck(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PropRow>> {
    let rows = propcheck(cfg)?;
    write_file(dir, "propcheck.csv", &propcheck_csv(&rows))?;
    Ok(rows)
}

/// One null-text trial of the similarity study.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTrial {
    pub trial: usize,
    pub report: MetricReport,
    /// Mean over steps of the optimized-null vs `C` L1 gap is below the gap to `C'`.
    pub gap_ordered: bool,
    /// Over steps `t <= T/2`, mean centered cosine to `C` exceeds that to `C'`.
    pub cosine_ordered: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Null-text inversion per trial, with per-step noise gaps and centered
/// cosine similarities against the input prompt and another prompt.
pub fn similarity(cfg: &ExperimentConfig) -> Result<Vec<SimilarityTrial>> {
    let setup = Setup::new(cfg)?;
    let run = &cfg.experiment;
    let plan = StepPlan::new(&setup.schedule, run.analysis_steps)?;
    let w = run.guidance[0];
    let classes = setup.dataset.classes();
    let pool: Vec<Embedding> = (0..classes).map(|k| Embedding::one_hot(classes, k)).collect::<Result<_>>()?;
    let range = setup.dataset.data_range();
    let half = setup.schedule.steps() / 2;
    let mut trials = Vec::with_capacity(run.trials);
    for trial in 0..run.trials {
        let (class, z0) = trial_input(&setup.model, run.seed, trial);
        let cond = pool[class].clone();
        let other = pool[(class + 1) % classes].clone();
        let r = invert_null_text(&z0, &cond, w, &plan, &setup.dataset, &setup.schedule, &cfg.optimizer)?;
        let nulls = r.null_schedule.as_ref().expect("null-text output carries a schedule");
        let report = MetricReport::compute(
            &z0,
            &r.reverse_trajectory,
            nulls,
            &cond,
            &other,
            &pool,
            range,
            &setup.dataset,
            &setup.schedule,
        )?;
        let gap_ordered = mean(&report.gaps.null_vs_cond) < mean(&report.gaps.null_vs_other);
        let lower: Vec<usize> = (0..report.gaps.steps.len()).filter(|&i| report.gaps.steps[i] <= half).collect();
        let pick = |v: &[f64]| lower.iter().map(|&i| v[i]).sum::<f64>() / lower.len().max(1) as f64;
        let cosine_ordered = pick(&report.cosine_null_vs_cond) > pick(&report.cosine_null_vs_other);
        trials.push(SimilarityTrial { trial, report, gap_ordered, cosine_ordered });
    }
    Ok(trials)
}

pub fn similarity_csv(trials: &[SimilarityTrial]) -> String {
    let mut out = String::from("trial,step,series,value\n");
    for t in trials {
        t.report.write_long(&format!("{},", t.trial), &mut out);
    }
    out
}

pub fn run_similarity(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SimilarityTrial>> {
    let trials = similarity(cfg)?;
    write_file(dir, "similarity.csv", &similarity_csv(&trials))?;
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRecord {
    pub trial: usize,
    pub method: EditMethod,
    pub w: f64,
    pub t0_ratio: f64,
    pub source_class: usize,
    pub target_class: usize,
    pub cluster_distance_original: f64,
    pub cluster_distance_target: f64,
}

impl EditRecord {
    pub fn on_target(&self) -> bool {
        self.cluster_distance_target < self.cluster_distance_original
    }
}

fn edit_method_name(m: EditMethod) -> &'static str {
    match m {
        EditMethod::ConditionSwap => "condition_swap",
        EditMethod::Sdedit => "sdedit",
    }
}

fn sdedit_label(mode: SdeditMode, null: SdeditNull) -> &'static str {
    match (mode, null) {
        (SdeditMode::Noise, SdeditNull::Original) => "noise_original",
        (SdeditMode::Noise, SdeditNull::Uniform) => "noise_uniform",
        (SdeditMode::DdimForward, SdeditNull::Original) => "ddim_forward_original",
        (SdeditMode::DdimForward, SdeditNull::Uniform) => "ddim_forward_uniform",
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Re-targets each trial input from its own class to `(class + offset) mod K`.
pub fn edit(cfg: &ExperimentConfig) -> Result<Vec<EditRecord>> {
    let setup = Setup::new(cfg)?;
    let run = &cfg.experiment;
    let e = &cfg.edit;
    let plan = StepPlan::new(&setup.schedule, run.analysis_steps)?;
    let classes = setup.dataset.classes();
    let means: Vec<Vec<f64>> = (0..classes).map(|k| setup.dataset.class_mean(k)).collect();
    let w = run.guidance[0];
    let mut out = Vec::with_capacity(run.trials);
    for trial in 0..run.trials {
        let source = trial % classes;
        let target = (source + e.target_offset) % classes;
        let mut rng = trial_rng(run.seed, trial);
        let z0 = setup.model.sample(source, &mut rng);
        let (c, c_edit) = (Embedding::one_hot(classes, source)?, Embedding::one_hot(classes, target)?);
        let result = match e.method {
            EditMethod::ConditionSwap => {
                let spec = EditSpec::condition_swap(c, c_edit, w)?;
                edit_condition_swap(&z0, &spec, &plan, &setup.dataset, &setup.schedule)?
            }
            EditMethod::Sdedit => {
                let spec = EditSpec::sdedit(c, c_edit, e.t0_ratio, w)?;
                let noise_seed = rng.next_u64();
                edit_sdedit(&z0, &spec, &plan, &setup.dataset, &setup.schedule, e.mode, e.null, noise_seed)?
            }
        };
        out.push(EditRecord {
            trial,
            method: e.method,
            w,
            t0_ratio: e.t0_ratio,
            source_class: source,
            target_class: target,
            cluster_distance_original: distance(&result, &means[source]),
            cluster_distance_target: distance(&result, &means[target]),
        });
    }
    Ok(out)
}

pub fn edit_csv(records: &[EditRecord], cfg: &EditConfig) -> String {
    let mut out = String::from(
        "trial,method,variant,w,t0_ratio,source_class,target_class,cluster_distance_original,cluster_distance_target,on_target\n",
    );
    for r in records {
        let variant = match r.method {
            EditMethod::ConditionSwap => "negative_prompt",
            EditMethod::Sdedit => sdedit_label(cfg.mode, cfg.null),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.trial,
            edit_method_name(r.method),
            variant,
            fmt_w(r.w),
            r.t0_ratio,
            r.source_class,
            r.target_class,
            r.cluster_distance_original,
            r.cluster_distance_target,
            r.on_target()
        );
    }
    out
}

pub fn run_edit(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<EditRecord>> {
    let records = edit(cfg)?;
    write_file(dir, "edit.csv", &edit_csv(&records, &cfg.edit))?;
    Ok(records)
}

/// Writes the synthesized (or loaded) dataset as `dataset.txt`.
pub fn run_gen_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<OracleDataset> {
    cfg.dataset.validate()?;
    let (ds, _) = gen_dataset(&cfg.dataset, cfg.experiment.seed)?;
    write_file(dir, "dataset.txt", &ds.to_text())?;
    Ok(ds)
}
