use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffinv::harness::{self, ExperimentConfig};
use diffinv::inversion::Method;
use diffinv::Result;

#[derive(Parser)]
#[command(name = "diffinv", version, about = "DDIM, null-text and negative-prompt inversion on an exact noise oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as dataset.txt.
    GenDataset(Overrides),
    /// Reconstruction quality and cost for every method, plan size and guidance scale.
    Compare(Overrides),
    /// Forward-process gap formula and algebraic identities.
    Propcheck(Overrides),
    /// Per-step noise gaps and embedding similarity after null-text inversion.
    Similarity(Overrides),
    /// Condition-swap or SDEdit edits toward another class.
    Edit(Overrides),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated plan sizes.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Comma-separated guidance scales.
    #[arg(long, value_delimiter = ',')]
    w: Option<Vec<f64>>,
    /// Comma-separated methods: ddim_cfg, null_text, negative_prompt.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let run = &mut cfg.experiment;
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.steps {
            run.plan_sizes = v;
        }
        if let Some(v) = self.w {
            run.guidance = v;
        }
        if let Some(v) = self.methods {
            run.methods = v;
        }
        if let Some(v) = self.trials {
            run.trials = v;
        }
        if let Some(v) = self.out {
            run.out = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<bool> {
    let (cmd, overrides) = match command {
        Command::GenDataset(o) => ("gen-dataset", o),
        Command::Compare(o) => ("compare", o),
        Command::Propcheck(o) => ("propcheck", o),
        Command::Similarity(o) => ("similarity", o),
        Command::Edit(o) => ("edit", o),
    };
    let cfg = overrides.resolve()?;
    let dir = cfg.experiment.out.clone();
    match cmd {
        "gen-dataset" => {
            let ds = harness::run_gen_dataset(&cfg, &dir)?;
            eprintln!("wrote {} points to {}", ds.len(), dir.join("dataset.txt").display());
            Ok(true)
        }
        "compare" => {
            let out = harness::run_compare(&cfg, &dir)?;
            for s in &out.summary {
                eprintln!(
                    "{:<16} N={:<4} w={:<5} median mse {:.3e} [{:.3e}, {:.3e}]  calls {}  wall {:.3} ms",
                    s.method, s.steps, s.w, s.mse.median, s.mse.low, s.mse.high, s.model_calls_median, s.wall_ms_median
                );
            }
            if !out.failures.is_empty() {
                eprintln!("{} runs failed, see errors.csv", out.failures.len());
            }
            Ok(out.failures.is_empty())
        }
        "propcheck" => {
            let rows = harness::run_propcheck(&cfg, &dir)?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            eprintln!("{} property rows, {failed} failing", rows.len());
            Ok(true)
        }
        "similarity" => {
            let trials = harness::run_similarity(&cfg, &dir)?;
            let gap = trials.iter().filter(|t| t.gap_ordered).count();
            let cos = trials.iter().filter(|t| t.cosine_ordered).count();
            eprintln!("{} trials: gap ordered in {gap}, cosine ordered in {cos}", trials.len());
            Ok(true)
        }
        _ => {
            let records = harness::run_edit(&cfg, &dir)?;
            let hits = records.iter().filter(|r| r.on_target()).count();
            eprintln!("{} edits, {hits} closer to the target cluster", records.len());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
