use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use semst::cluster::F1Average;
use semst::pipeline::{self, RunConfig};
use semst::synth::SynthConfig;
use semst::{Error, Result};

#[derive(Parser)]
#[command(name = "semst", version, about = "Spatial domain clustering with semantic modulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Preset hyperparameters (dlpfc, hbc, mba, me, mvc).
    #[arg(long)]
    preset: Option<String>,
    /// Override a configuration key, e.g. `--set epochs=300`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut pairs = Vec::new();
        if let Some(p) = &self.preset {
            pairs.push(("preset".to_string(), p.clone()));
        }
        for s in &self.overrides {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if !pairs.is_empty() {
            cfg = cfg.with_overrides(&pairs)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, cluster and evaluate; writes a run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
    },
    /// Compute embeddings with the configured provider and store them.
    Embed {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; a `.semb` extension selects the binary format.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with known domains.
    Synth {
        /// JSON generator configuration; missing keys take defaults.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short, default_value = "synth")]
        out: PathBuf,
    },
    /// Score predicted clusters against truth labels.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "weighted")]
        average: String,
    },
    /// Finite-difference check of all gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seed: u64,
    },
    /// Draw a run's clusters as an SVG scatter.
    Plot { run_dir: PathBuf },
}

fn execute(cli: Cli) -> Result<()> {
    pipeline::configure_threads()?;
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.resolve()?;
            let outcome = pipeline::cmd_run(&cfg, &out)?;
            match outcome.metrics {
                Some(m) => {
                    let [ari, nmi, acc, f1] = m.scaled();
                    println!("ARI {ari:.2}  NMI {nmi:.2}  ACC {acc:.2}  F1 {f1:.2}");
                }
                None => println!("{} spots clustered", outcome.labels.len()),
            }
            println!("run written to {} in {:.1}s", out.display(), outcome.seconds);
        }
        Command::Embed { config, out } => {
            let cfg = config.resolve()?;
            let emb = pipeline::cmd_embed(&cfg, &out)?;
            println!("{} x {} embeddings written to {}", emb.matrix.rows(), emb.d_prime(), out.display());
        }
        Command::Synth { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            pipeline::cmd_synth(&cfg, &out)?;
            println!("synthetic dataset written to {}", out.display());
        }
        Command::Eval { labels, truth, average } => {
            let avg: F1Average = average.parse()?;
            let [ari, nmi, acc, f1] = pipeline::cmd_eval(&labels, &truth, avg)?.scaled();
            println!("ari,nmi,acc,f1");
            println!("{ari:.4},{nmi:.4},{acc:.4},{f1:.4}");
        }
        Command::Gradcheck { seed } => {
            let report = pipeline::cmd_gradcheck(seed)?;
            println!("term,checked,skipped,max_rel_error,max_abs_error,status");
            for t in &report.terms {
                println!(
                    "{},{},{},{:.3e},{:.3e},{}",
                    t.term,
                    t.checked,
                    t.skipped_at_kinks,
                    t.max_rel_error,
                    t.max_abs_error,
                    if t.passed { "pass" } else { "fail" }
                );
            }
            if !report.passed() {
                return Err(Error::Domain {
                    op: "gradcheck",
                    detail: "analytic and numeric gradients disagree".into(),
                });
            }
        }
        Command::Plot { run_dir } => {
            let path = pipeline::cmd_plot(&run_dir)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
