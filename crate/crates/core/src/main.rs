use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use part_reid::pipeline::{self, RunConfig};
use part_reid::Error;

/// Pose-token transformer for occlusion-aware person re-identification.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `data.root`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Synthesize the dataset into `data.root`.
    Generate,
    /// Train and write checkpoints plus a JSON-lines log to `output_dir`.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Weight of the pose-attention loss.
        #[arg(long)]
        lambda: Option<f32>,
        /// Continue from `output_dir/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the clean and occluded splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report the as-is, off and round visibility modes.
        #[arg(long)]
        ablate_visibility: bool,
        /// Print per-query average precision.
        #[arg(long)]
        per_query: bool,
    },
    /// Render attention panels for selected samples.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "query")]
        split: String,
        /// Comma-separated sample indices within the split.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        #[arg(long, default_value = "vis")]
        out: PathBuf,
    },
}

/// Process exit codes.
mod exit {
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const INTERNAL: u8 = 6;
}

fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::OutOfRange { .. } => (exit::CONFIG, "E_CONFIG"),
        Error::Io { .. } | Error::Image { .. } | Error::Container { .. } => (exit::DATA, "E_DATA"),
        Error::Diverged { .. } => (exit::DIVERGED, "E_DIVERGED"),
        _ => (exit::INTERNAL, "E_INTERNAL"),
    }
}

fn load_config(cli: &Cli) -> part_reid::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data.root = d.clone();
    }
    if let Command::Train {
        epochs,
        lr,
        eval_every,
        lambda,
        ..
    } = &cli.command
    {
        if let Some(v) = epochs {
            cfg.optim.epochs = *v;
        }
        if let Some(v) = lr {
            cfg.optim.lr = *v;
        }
        if let Some(v) = eval_every {
            cfg.optim.eval_every = *v;
        }
        if let Some(v) = lambda {
            cfg.loss.lambda_pose = *v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> part_reid::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Generate => {
            let root = pipeline::cmd_generate(&cfg)?;
            println!("dataset written to {}", root.display());
        }
        Command::Train { resume, .. } => {
            let out = pipeline::cmd_train(&cfg, *resume)?;
            for (epoch, m) in &out.evals {
                info!("epoch {epoch}: {m:?}");
            }
            if let Some((epoch, m)) = out.evals.last() {
                println!(
                    "epoch {epoch}: mAP {:.4} rank-1 {:.4} (occluded mAP {:.4})",
                    m.map, m.rank1, m.occluded_map
                );
            }
            println!("last checkpoint: {}", out.last_checkpoint.display());
            if let Some(best) = &out.best_checkpoint {
                println!("best checkpoint: {}", best.display());
            }
        }
        Command::Eval {
            checkpoint,
            ablate_visibility,
            per_query,
        } => {
            let report = pipeline::cmd_eval(&cfg, checkpoint, *ablate_visibility)?;
            print!("{}", report.render());
            if *per_query {
                for (split, rows) in [("clean", &report.clean), ("occluded", &report.occluded)] {
                    for r in rows {
                        for (q, ap) in r.report.per_query_ap.iter().enumerate() {
                            let ap = ap.map_or("skipped".to_string(), |a| format!("{a:.4}"));
                            println!("{split}\t{}\t{q}\t{ap}", r.mode.name());
                        }
                    }
                }
            }
        }
        Command::Visualize {
            checkpoint,
            split,
            samples,
            out,
        } => {
            for p in pipeline::cmd_visualize(&cfg, checkpoint, split, samples, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
