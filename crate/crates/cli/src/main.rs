use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tdgrpc::checkpoint::load_model;
use tdgrpc::config::TrainConfig;
use tdgrpc::envs::make_env;
use tdgrpc::grpc::variance_diagnostic;
use tdgrpc::metrics::{read_metrics, write_csv, write_json};
use tdgrpc::trainer::{evaluate, evaluate_random, Trainer};
use tdgrpc::world_model::WorldModel;

#[derive(Parser)]
#[command(name = "tdgrpc", version, about = "Train and evaluate TD-GRPC agents on toy control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained model (or a random policy) with exploration off.
    Eval(EvalArgs),
    /// Compare gradient variance of softmax and std-normalized advantages.
    DiagVariance(DiagArgs),
    /// Convert a run's metrics file to CSV or JSON.
    ExportMetrics(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set planner.num_samples=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<String>,
    /// Enable an ablation switch; repeatable.
    #[arg(long = "ablation", value_name = "NAME")]
    ablations: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(e) = &self.env {
            overrides.push(format!("env=\"{e}\""));
        }
        let mut cfg = TrainConfig::from_toml_with_overrides(text.as_deref(), &overrides)?;
        for a in &self.ablations {
            cfg.ablation.enable(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to runs/<env>-seed<seed>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue the run in --run-dir from its latest checkpoint.
    #[arg(long, requires = "run_dir")]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding model.json and config.toml.
    #[arg(long, conflicts_with = "random")]
    run_dir: Option<PathBuf>,
    /// Evaluate uniform-random actions instead of a model.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Use the model from this run directory instead of a fresh one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    group_size: usize,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory, or a metrics.jsonl file.
    path: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn run_config(dir: &Path) -> Result<TrainConfig> {
    let p = dir.join("config.toml");
    Ok(TrainConfig::from_file(&p).with_context(|| format!("loading {}", p.display()))?)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut trainer = if args.resume {
        let dir = args.run_dir.as_ref().expect("clap enforces run_dir");
        Trainer::resume(dir).with_context(|| format!("resuming {}", dir.display()))?
    } else {
        let cfg = args.config.load()?;
        let dir = args
            .run_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", cfg.env, cfg.seed)));
        let mut t = Trainer::new(cfg)?;
        t.attach_run_dir(&dir)?;
        eprintln!("run directory: {}", dir.display());
        t
    };
    let report = trainer.run()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let record = if args.random {
        let env = args.env.unwrap_or_else(|| "pendulum".into());
        let d = TrainConfig::default();
        evaluate_random(&env, args.episodes.unwrap_or(d.eval_episodes), args.seed.unwrap_or(d.eval_seed))?
    } else {
        let Some(dir) = args.run_dir else {
            bail!("eval needs --run-dir or --random");
        };
        let cfg = run_config(&dir)?;
        let model = load_model(&dir.join("model.json"))?;
        let env = args.env.unwrap_or(cfg.env.clone());
        evaluate(
            &model,
            &env,
            &cfg.planner,
            args.episodes.unwrap_or(cfg.eval_episodes),
            args.seed.unwrap_or(cfg.eval_seed),
        )?
    };
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn diag_variance(args: DiagArgs) -> Result<()> {
    let (cfg, model) = match &args.run_dir {
        Some(dir) => (run_config(dir)?, load_model(&dir.join("model.json"))?),
        None => {
            let cfg = args.config.load()?;
            let spec = make_env(&cfg.env)?.spec().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let m = WorldModel::new(spec.state_dim, spec.action_box, cfg.model.clone(), cfg.gamma, &mut rng)?;
            (cfg, m)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut env = make_env(&cfg.env)?;
    let z = model.encode(&env.reset(&mut rng))?;
    let report = variance_diagnostic(&model, &z, args.group_size, args.trials, cfg.constraint.tau_adv, &mut rng)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn export_metrics(args: ExportArgs) -> Result<()> {
    let path = if args.path.is_dir() {
        args.path.join("metrics.jsonl")
    } else {
        args.path
    };
    let records = read_metrics(&path).with_context(|| format!("reading {}", path.display()))?;
    let out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    match args.format {
        Format::Csv => write_csv(&records, out)?,
        Format::Json => write_json(&records, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DiagVariance(a) => diag_variance(a),
        Command::ExportMetrics(a) => export_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
