use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use submia::attacks::AttackKind;
use submia::pipeline::{load_config, ExperimentConfig, Pipeline, PipelineError, Profile, Stage, StageStatus, PRESETS};

#[derive(Parser)]
#[command(name = "submia", version, about = "Membership inference experiments with subpopulation calibration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a shipped preset.
    #[arg(long, global = true, default_value = "mnist-mlp")]
    config: String,
    /// Profile override (small or full).
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Rebuild stale or missing upstream artifacts and re-run the stage.
    #[arg(long, global = true)]
    force: bool,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build splits, manifests and the evaluation split.
    PrepareData,
    /// Train and checkpoint the victim.
    TrainVictim,
    /// Train the shadow pool and the per-target IN models.
    TrainShadows {
        /// Shadow pool size override.
        count: Option<usize>,
    },
    /// Train the subpopulation generator(s).
    TrainBigan,
    /// Materialize subpopulations for the evaluation targets.
    Craft,
    /// Score the evaluation targets with the named attacks (default: all configured).
    Attack { names: Vec<AttackKind> },
    /// Compute AUCs, write the report and the cost ledger.
    Evaluate,
    /// Run every stage, skipping those whose artifacts are current.
    All,
    /// List the shipped presets.
    Presets,
}

fn configure(common: &Common, command: &Command) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = load_config(&common.config, common.profile)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    match command {
        Command::TrainShadows { count: Some(c) } => cfg.attack.shadow_count = *c,
        Command::Attack { names } if !names.is_empty() => {
            if let Some(n) = names.iter().find(|n| !cfg.wants(**n)) {
                return Err(PipelineError::Config(format!("attack `{n}` is not in the configured attack list")));
            }
            cfg.attacks.retain(|a| names.contains(a));
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Presets = cli.command {
        for p in PRESETS {
            println!("{p}");
        }
        return Ok(());
    }
    let cfg = configure(&cli.common, &cli.command)?;
    let mut p = Pipeline::new(cfg, cli.common.force)?;
    match &cli.command {
        Command::PrepareData => drop(p.run_stage(Stage::Data)?),
        Command::TrainVictim => {
            p.run_stage(Stage::Victim)?;
            let v = p.victim_summary()?;
            let c = p.config();
            println!("| dataset | model | train acc | test acc |");
            println!("|---|---|---|---|");
            println!(
                "| {} | {} | {:.2}% | {:.2}% |",
                c.dataset.as_str(),
                c.architecture.as_str(),
                100.0 * v.train_acc,
                100.0 * v.test_acc
            );
        }
        Command::TrainShadows { .. } => {
            p.run_stage(Stage::Shadows)?;
            p.run_stage(Stage::InModels)?;
        }
        Command::TrainBigan => drop(p.run_stage(Stage::Bigan)?),
        Command::Craft => drop(p.run_stage(Stage::Craft)?),
        Command::Attack { .. } => {
            p.run_stage(Stage::Attack)?;
            for kind in &p.config().attacks {
                println!("scores/{kind}.csv");
            }
        }
        Command::Evaluate => {
            p.run_stage(Stage::Evaluate)?;
            print_results(&p)?;
        }
        Command::All => {
            p.run_all()?;
            print_results(&p)?;
        }
        Command::Presets => unreachable!(),
    }
    for (stage, status) in p.status() {
        let s = match status {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::NotRequired => "not required",
        };
        eprintln!("{stage}: {s}");
    }
    Ok(())
}

fn print_results(p: &Pipeline) -> Result<(), PipelineError> {
    for r in p.results()? {
        println!("{:<32} AUC {:6.2}%", r.attack.title(), 100.0 * r.auc);
    }
    println!("report: {}", p.output_dir().join("results.md").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
