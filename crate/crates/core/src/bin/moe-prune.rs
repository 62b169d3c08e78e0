use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moe_prune::config::{parse_rho_list, ExperimentConfig};
use moe_prune::harness;
use moe_prune::manifest::{self, CheckpointManifest};
use moe_prune::pruning::Criterion;
use moe_prune::{Error, Result, RoutingMode};

#[derive(Parser)]
#[command(name = "moe-prune", version, about = "Train, score and prune mixture-of-experts layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize, train, prune at one ratio, evaluate and fine-tune.
    Run(ExperimentArgs),
    /// Train once and prune at every ratio of --rho.
    Sweep(ExperimentArgs),
    /// Score the checkpoints of a manifest (given with --config).
    Score(ScoreArgs),
    /// Compare closed-form gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    criterion: Option<String>,
    /// Comma-separated pruning ratios.
    #[arg(long)]
    rho: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint manifest.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ratio for the pruning plan (first value used).
    #[arg(long, default_value = "0")]
    rho: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instances per routing mode.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(c) = &args.criterion {
        cfg.prune.criterion = c.parse::<Criterion>()?;
    }
    if let Some(r) = &args.rho {
        cfg.prune.rho = parse_rho_list(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &ExperimentArgs) -> Result<()> {
    let cfg = experiment_config(args)?;
    let report = harness::run_full_pipeline(&cfg, Some(&args.out))?;
    let p = &report.prepared;
    println!("final training error: {}", p.final_train_error());
    println!("gamma: {}", p.assumptions.gamma);
    println!("unpruned accuracy: {}", p.unpruned_accuracy);
    println!("retained experts: {:?}", report.point.retained.indices());
    println!("pruned accuracy: {}", report.point.accuracy);
    if let Some(ft) = &report.point.finetuned {
        println!("fine-tuned accuracy: {}", ft.accuracy);
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn sweep(args: &ExperimentArgs) -> Result<()> {
    let cfg = experiment_config(args)?;
    let report = harness::run_pruning_sweep(&cfg, &cfg.prune.rho, Some(&args.out))?;
    for row in &report.rows {
        if let Some(w) = &row.warning {
            eprintln!("warning: rho {} skipped: {w}", row.rho);
        }
    }
    print!("{}", report.accuracy_csv());
    Ok(())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let rho = parse_rho_list(&args.rho)?[0];
    let m = CheckpointManifest::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let scores = manifest::score_checkpoints(&m, base, rho)?;
    for path in manifest::write_scores(&scores, rho, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = harness::gradcheck_suite(args.instances, args.seed)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let path = dir.join("gradcheck.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    let mut worst: f64 = 0.0;
    for (mode, name) in [(RoutingMode::TokenChoice, "token_choice"), (RoutingMode::ExpertChoice, "expert_choice")] {
        let err = report.max_error(mode);
        worst = worst.max(err);
        println!("{name}: {} instances, max relative error {err:.3e}", report.count(mode));
    }
    println!("skipped non-differentiable draws: {}", report.skipped);
    if worst >= harness::GRADCHECK_TOLERANCE {
        return Err(Error::Numerical(format!(
            "gradient mismatch {worst:.3e} exceeds {:.0e}",
            harness::GRADCHECK_TOLERANCE
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Score(a) => score(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
