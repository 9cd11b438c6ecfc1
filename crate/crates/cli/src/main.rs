//! Command-line front end for the audio class-incremental learning toolkit.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crescendo_core::audio::DATASET_REGISTRY;
use crescendo_core::runner::{
    emit_plot, results_path, run_experiment, ExperimentConfig, ResultsBundle,
};
use crescendo_core::{LEARNER_REGISTRY, UNIMPLEMENTED_LEARNERS};

#[derive(Parser)]
#[command(
    name = "crescendo",
    version,
    about = "Audio class-incremental learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config
    Run {
        /// Path to the experiment config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write an accuracy curve (SVG) next to the results
        #[arg(long)]
        plot: bool,
    },
    /// List the implemented learners
    ListModels,
    /// List the registered datasets
    ListDatasets,
    /// Plot accuracy curves from saved results bundles
    Plot {
        /// One results.json per curve
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output SVG path
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            output,
            plot,
        } => run(config, seed, output, plot),
        Command::ListModels => {
            println!("implemented learners:");
            for name in LEARNER_REGISTRY {
                println!("  {name}");
            }
            println!("declared but not implemented:");
            for name in UNIMPLEMENTED_LEARNERS {
                println!("  {name}");
            }
            Ok(())
        }
        Command::ListDatasets => {
            for name in DATASET_REGISTRY {
                println!("{name}");
            }
            Ok(())
        }
        Command::Plot { inputs, out } => {
            let bundles: Vec<ResultsBundle> = inputs
                .iter()
                .map(|path| -> Result<ResultsBundle> {
                    let doc = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&doc)
                        .with_context(|| format!("parsing {}", path.display()))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ResultsBundle> = bundles.iter().collect();
            emit_plot(&refs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn run(config: PathBuf, seed: Option<u64>, output: Option<PathBuf>, plot: bool) -> Result<()> {
    let mut config = ExperimentConfig::from_path(&config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(output) = output {
        config.output_dir = Some(output);
    }
    if plot && config.output_dir.is_none() {
        bail!("--plot needs an output directory (config output_dir or --output)");
    }

    let bundle = run_experiment(&config)?;
    println!(
        "{} on {} ({} tasks)",
        config.model_name,
        config.dataset,
        bundle.per_stage_accuracy.len()
    );
    for (i, (classes, acc)) in bundle
        .classes_seen_per_stage
        .iter()
        .zip(&bundle.per_stage_accuracy)
        .enumerate()
    {
        println!("  stage {i}: {classes:>4} classes  accuracy {acc:.4}");
    }
    println!(
        "average incremental accuracy: {:.4}",
        bundle.average_accuracy
    );
    if let Some(path) = results_path(&config) {
        println!("results: {}", path.display());
    }
    if plot {
        let dir = config.output_dir.as_ref().expect("checked above");
        let out = dir.join("accuracy.svg");
        emit_plot(&[&bundle], &out)?;
        println!("plot: {}", out.display());
    }
    Ok(())
}
