use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chaindistill::harness::{commands, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "chaindistill", version, about = "Chained distillation of navigation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one config value, e.g. `--set chain.makd.beta=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark splits as JSON-lines scene files.
    GenScenes(Common),
    /// Train the teacher (first ladder model).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Distill the last ladder model from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Co-train a teacher and student pair.
    Cotrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Adapters from the distillation run.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Run the whole ladder.
    Chain(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "split", default_values_t = ["val_seen".to_string(), "val_unseen".to_string()])]
        splits: Vec<String>,
    },
    /// Distill over a grid of config values and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One axis, e.g. `--grid beta=0,0.5,1`. Repeat for a product.
        #[arg(long)]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Teacher checkpoint; trained first when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Turn the logs of finished runs into CSV series.
    PlotData {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let src = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config { line: None, msg: format!("{}: {e}", path.display()) })?;
            ExperimentConfig::parse(&src)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| HarnessError::Config { line: None, msg: format!("`--set {o}` is not KEY=VALUE") })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("serializes"));
}

fn written(out: &Path, what: &str) {
    println!("{what} written to {}", out.display());
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenScenes(common) => {
            let (cfg, out) = load(&common)?;
            for p in commands::gen_scenes(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { common, resume } => {
            let (cfg, out) = load(&common)?;
            commands::train(&cfg, &out, resume)?;
            written(&out, "teacher");
        }
        Command::Distill { common, teacher, resume } => {
            let (cfg, out) = load(&common)?;
            commands::distill(&cfg, &out, &teacher, resume)?;
            written(&out, "student");
        }
        Command::Cotrain { common, teacher, student, adapters, resume } => {
            let (cfg, out) = load(&common)?;
            commands::cotrain(&cfg, &out, &teacher, &student, adapters.as_deref(), resume)?;
            written(&out, "co-trained pair");
        }
        Command::Chain(common) => {
            let (cfg, out) = load(&common)?;
            commands::chain(&cfg, &out)?;
            written(&out, "chain");
        }
        Command::Eval { common, checkpoint, splits } => {
            let (cfg, out) = load(&common)?;
            for r in commands::eval(&cfg, &out, &checkpoint, &splits)? {
                print_json(&r);
            }
        }
        Command::Ablate { common, grid, seeds, teacher } => {
            let (cfg, out) = load(&common)?;
            commands::ablate(&cfg, &out, &grid, &seeds, teacher.as_deref())?;
            written(&out.join("ablate.csv"), "ablation summary");
        }
        Command::PlotData { runs, out } => {
            for p in commands::plot_data(&runs, &out)? {
                println!("{}", p.display());
            }
        }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
