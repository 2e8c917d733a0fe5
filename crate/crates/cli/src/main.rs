//! Command-line front end: run experiments, evaluate predictors, check
//! configurations and dump synthetic streams.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diffadapt::config::{self, ExperimentConfig, Resolved};
use diffadapt::engine::EngineError;
use diffadapt::io::{write_edge_list, write_jsonl, write_libsvm};
use diffadapt::report::{self, ReportError, TheoryContext};
use diffadapt::risk::Sample;

/// Output directory override; beats the config file, loses to `--out`.
const OUT_ENV: &str = "DIFFADAPT_OUT";

#[derive(Parser)]
#[command(name = "diffadapt", version, about = "Diffusion adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSVs plus a manifest.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Worker threads for repetitions; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a closed-form predictor and print one JSON line.
    Predict {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(report::FORMULAS))]
        formula: String,
        /// Diffusion learner to evaluate; the first one by default.
        #[arg(long)]
        learner: Option<String>,
    },
    /// Parse, validate and print the resolved configuration.
    ValidateConfig {
        #[command(flatten)]
        source: Source,
        /// List the shipped presets and exit.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        list_presets: bool,
    },
    /// Write the stream or network a configuration describes.
    GenData {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
        /// Ticks to emit; the horizon by default.
        #[arg(long)]
        ticks: Option<usize>,
        /// Repetition whose stream is emitted.
        #[arg(long, default_value_t = 0)]
        repetition: u64,
        /// Destination file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// One JSON record per node and tick.
    Jsonl,
    /// LIBSVM rows; labeled streams only.
    Libsvm,
    /// The network as a 0-indexed edge list.
    Edges,
}

#[derive(Args)]
struct Source {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset, e.g. `paper:stagger`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    repetitions: Option<u64>,
    /// Step size for every learner.
    #[arg(long)]
    step_size: Option<f64>,
    /// Comma-separated learner variants replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    learners: Option<Vec<String>>,
    /// LIBSVM file for dataset streams.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Source {
    /// Loads, applies overrides, and returns the config with its base path.
    fn load(&self) -> Result<(ExperimentConfig, Option<PathBuf>)> {
        let (mut cfg, base) = match (&self.config, &self.preset) {
            (Some(path), _) => (
                ExperimentConfig::from_file(path)?,
                path.parent().map(Path::to_path_buf),
            ),
            (None, Some(name)) => (ExperimentConfig::preset(name)?, None),
            (None, None) => bail!("give --config FILE or --preset NAME"),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
            cfg.metrics.roc_ticks.retain(|&t| t <= h);
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        if let Some(mu) = self.step_size {
            cfg.step_size = Some(mu);
            for l in &mut cfg.learners {
                l.step_size = None;
            }
        }
        if let Some(list) = &self.learners {
            let names: Vec<&str> = list.iter().map(String::as_str).collect();
            cfg.set_learners(&names);
        }
        let mut base = base;
        if let Some(d) = &self.data {
            if cfg.drift.kind != "dataset" {
                bail!("--data applies only to dataset streams");
            }
            cfg.drift.path = Some(fs::canonicalize(d).with_context(|| d.display().to_string())?);
            if base.is_none() {
                base = std::env::current_dir().ok();
            }
        }
        Ok((cfg, base))
    }

    fn resolve(&self) -> Result<Resolved> {
        let (cfg, base) = self.load()?;
        Ok(cfg.resolve(base.as_deref())?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let engine = e
                .downcast_ref::<ReportError>()
                .is_some_and(|r| matches!(r, ReportError::Engine(EngineError::Divergence { .. })));
            ExitCode::from(if engine { 3 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            source,
            out,
            threads,
        } => {
            let r = source.resolve()?;
            let dir = out
                .or_else(|| r.config.output.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let outcome = report::run_to_dir(&r, &dir, threads, "run")?;
            println!(
                "wrote {} files and {}",
                outcome.files.len(),
                outcome.manifest.display()
            );
            Ok(())
        }
        Command::Predict {
            source,
            formula,
            learner,
        } => {
            let r = source.resolve()?;
            let ctx = TheoryContext::build(&r, formula != "simplified-er")?;
            let v = report::predict(&r, &ctx, &formula, learner.as_deref(), None)?;
            println!("{}", serde_json::to_string(&v)?);
            Ok(())
        }
        Command::ValidateConfig {
            source,
            list_presets,
        } => {
            if list_presets {
                for name in config::preset_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let r = source.resolve()?;
            print!("{}", r.config.to_toml());
            eprintln!(
                "ok: {} nodes, dimension {}, {} learners, hash {}",
                r.network.n_nodes(),
                r.experiment.model.dim,
                r.experiment.learners.len(),
                r.config.hash()
            );
            Ok(())
        }
        Command::GenData {
            source,
            format,
            ticks,
            repetition,
            out,
        } => {
            let r = source.resolve()?;
            let mut buf = Vec::new();
            match format {
                Format::Edges => write_edge_list(&r.network, &mut buf)?,
                Format::Jsonl | Format::Libsvm => {
                    let ticks = ticks.unwrap_or(r.config.horizon);
                    let recs = report::stream_records(&r, repetition, ticks)?;
                    if matches!(format, Format::Jsonl) {
                        write_jsonl(&recs, &mut buf)?;
                    } else {
                        if !r.experiment.is_classification() {
                            bail!("LIBSVM output needs a labeled (classification) stream");
                        }
                        let samples: Vec<Sample> = recs
                            .into_iter()
                            .map(|t| Sample::new(t.features, t.label))
                            .collect();
                        write_libsvm(&samples, &mut buf)?;
                    }
                }
            }
            match out {
                Some(path) => fs::write(&path, buf).with_context(|| path.display().to_string())?,
                None => io::stdout().lock().write_all(&buf)?,
            }
            Ok(())
        }
    }
}
