use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfa_core::config::RunConfig;
use cfa_core::pipeline::{Pipeline, CONFIG_SNAPSHOT};
use cfa_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Counterfactual attribution maps on synthetic lesion images.
#[derive(Parser, Debug)]
#[command(name = "cfa", version)]
struct Cli {
    /// TOML run configuration. Defaults to the snapshot in the run directory, if any.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `output` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `classifier.epochs=3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Treat config-hash mismatches between stages as errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Root for relative run directories.
    #[arg(long, env = "CFA_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Generate,
    /// Train one stage.
    Train { stage: TrainStage },
    /// Attribute image files (16-bit grayscale PNG).
    Attribute {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Output directory; defaults to `<run>/attributions`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run the evaluation protocol on the test split.
    Evaluate,
    /// Measure attribution throughput.
    Benchmark,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainStage {
    Classifier,
    Inpainter,
    Attributor,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency(_) => 3,
        _ => 4,
    }
}

fn run_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    match &cli.out {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => cli.output_root.join(p),
        None => cfg.run_dir(&cli.output_root),
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut dir = run_dir(cli, &cfg);
    if cli.config.is_none() {
        let snap = dir.join(CONFIG_SNAPSHOT);
        if snap.is_file() {
            cfg = RunConfig::load(&snap)?;
            dir = run_dir(cli, &cfg);
            if cli.out.is_none() {
                // the snapshot lives in the directory we found it in
                dir = snap.parent().map_or(dir, Path::to_path_buf);
            }
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok((cfg, dir))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (cfg, dir) = load_config(cli)?;
    let pipe = Pipeline::new(cfg, &dir, cli.strict)?;
    match &cli.command {
        Command::Generate => {
            let m = pipe.generate()?;
            println!("generated {} images into {}", m.samples.len(), pipe.data_dir().display());
        }
        Command::Train { stage } => match stage {
            TrainStage::Classifier => {
                let (_, log) = pipe.train_classifier()?;
                let auc = log.epochs.iter().find(|e| e.epoch == log.best_epoch).map_or(f64::NAN, |e| e.val_auc);
                println!("classifier: theta {:.4}, validation auc {:.4}", log.theta, auc);
            }
            TrainStage::Inpainter => {
                let (_, log) = pipe.train_inpainter()?;
                if let Some((phase, loss)) = log.epochs.last() {
                    println!("inpainter: {} epochs, final loss {loss:.4} (phase {phase})", log.epochs.len());
                }
            }
            TrainStage::Attributor => {
                let (_, log) = pipe.train_attributor()?;
                if let Some(e) = log.epochs.iter().find(|e| e.epoch == log.best_epoch) {
                    println!(
                        "attributor: best epoch {}, validation satisfaction {:.3}, mean area {:.1}",
                        e.epoch, e.val_satisfaction, e.val_mean_area
                    );
                }
            }
        },
        Command::Attribute { images, dest } => {
            let out = dest.clone().unwrap_or_else(|| pipe.dir.join("attributions"));
            let results = pipe.attribute_files(images, &out)?;
            for (p, r) in images.iter().zip(&results) {
                let note = if r.below_threshold { " (below threshold)" } else { "" };
                println!(
                    "{}: score {:.4} -> {:.4}, area {}{note}",
                    p.display(),
                    r.score_original,
                    r.score_marginalized,
                    r.area
                );
            }
        }
        Command::Evaluate => {
            let s = pipe.evaluate()?;
            println!("classifier auc {:.4}", s.classifier_auc);
            println!(
                "constraint satisfaction {:.3} (score {:.3}, area {:.3})",
                s.attribution.satisfaction, s.attribution.score_ok, s.attribution.area_ok
            );
            println!("randomization check {}", if s.randomization.pass { "pass" } else { "fail" });
            print!("{}", s.report.to_text());
        }
        Command::Benchmark => {
            let e = pipe.benchmark()?;
            println!(
                "{:.2} maps/s over {} repetitions",
                e.maps_per_second.unwrap_or(f64::NAN),
                e.repetitions.unwrap_or(0)
            );
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
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
