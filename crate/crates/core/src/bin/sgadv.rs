//! Command-line front end: dataset generation, threshold calibration,
//! single attacks, the full benchmark, and report rendering.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use sgadv::authsys::{save_system, AuthSystem};
use sgadv::data::save_dataset;
use sgadv::harness::{
    self, example_seed, load_results, run_bench, Experiment, ExperimentConfig, Technique,
};
use sgadv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sgadv",
    about = "Similarity-based adversarial attacks against a feature-embedding \
             authentication benchmark",
    version
)]
struct Cli {
    /// Path to a JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TechniqueArg {
    #[value(name = "fgsm-cbce")]
    FgsmCbce,
    #[value(name = "pgd-cbce")]
    PgdCbce,
    #[value(name = "sgadv")]
    Sgadv,
}

impl From<TechniqueArg> for Technique {
    fn from(t: TechniqueArg) -> Self {
        match t {
            TechniqueArg::FgsmCbce => Technique::FgsmCbce,
            TechniqueArg::PgdCbce => Technique::PgdCbce,
            TechniqueArg::Sgadv => Technique::Sgadv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target and source datasets and write them to disk.
    GenData {
        /// Output directory; receives targets/, sources/, and config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the model, enroll the targets, calibrate the EER threshold,
    /// and save the system state.
    Calibrate {
        /// Output directory; receives model.bin and system.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single attack instance and print its loss trace.
    Attack {
        #[arg(long, value_enum)]
        technique: TechniqueArg,
        /// Index into the flattened source sample list.
        #[arg(long, default_value_t = 0)]
        source_index: usize,
        /// Target identity index.
        #[arg(long, default_value_t = 0)]
        target_index: usize,
        /// Optional CSV path for the loss trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the configured scenario suites and write the full report.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Override the configured worker count (0 = library default).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-render the report files from a saved results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { out } => {
            let config = load_config(&cli)?;
            let exp = Experiment::build(config)?;
            save_dataset(&exp.targets, out.join("targets"))?;
            save_dataset(&exp.sources, out.join("sources"))?;
            exp.config.to_file(out.join("config.json"))?;
            println!(
                "wrote {} target and {} source identities to {}",
                exp.targets.n_identities(),
                exp.sources.n_identities(),
                out.display()
            );
        }
        Command::Calibrate { out } => {
            let config = load_config(&cli)?;
            let exp = Experiment::build(config)?;
            std::fs::create_dir_all(out)?;
            let model_path = out.join("model.bin");
            exp.model.save(&model_path)?;
            let mut system = AuthSystem::new(exp.model.clone() as Arc<_>);
            for (id, samples) in &exp.targets.identities {
                system.enroll(id, &samples[0])?;
            }
            system.set_threshold(exp.tau, exp.eer)?;
            save_system(&system, &model_path.to_string_lossy(), out.join("system.json"))?;
            println!("tau = {:.6}", exp.tau);
            println!("eer = {:.6}", exp.eer);
        }
        Command::Attack {
            technique,
            source_index,
            target_index,
            trace,
        } => {
            let config = load_config(&cli)?;
            let technique: Technique = (*technique).into();
            if !config.techniques.contains(&technique) {
                return Err(Error::invalid(format!(
                    "technique {technique} not enabled in the configuration"
                )));
            }
            let exp = Experiment::build(config)?;
            let sources = exp.sources.flat_samples();
            let (source_id, source_sample, source) = *sources
                .get(*source_index)
                .ok_or_else(|| Error::invalid("source index out of range"))?;
            let (target_id, samples) = exp
                .targets
                .identities
                .get(*target_index)
                .ok_or_else(|| Error::invalid("target index out of range"))?;
            let target = &samples[0];

            let seed = example_seed(exp.config.seed, target_id, *source_index, technique);
            let cfg = exp.single_attack_config(technique, seed);
            let result = exp.single_attack(technique, source, target, &cfg)?;

            println!("source   = {source_id} sample {source_sample}");
            println!("target   = {target_id}");
            println!("steps    = {}", result.steps_taken);
            println!("stopped  = {}", result.stop_reason);
            println!("final d  = {:.6}", result.final_dissimilarity);
            println!("tau      = {:.6}", exp.tau);
            println!(
                "accepted = {}",
                result.final_dissimilarity <= exp.tau
            );
            if let Some(path) = trace {
                let mut csv = String::from("step,loss\n");
                for (i, loss) in result.loss_trace.iter().enumerate() {
                    csv.push_str(&format!("{i},{loss:.9}\n"));
                }
                std::fs::write(path, csv)?;
            }
        }
        Command::Bench { out, workers } => {
            let mut config = load_config(&cli)?;
            if let Some(w) = workers {
                config.workers = *w;
            }
            let results = run_bench(config)?;
            harness::report(&results, out)?;
            println!("tau = {:.6}, eer = {:.6}", results.tau, results.eer);
            for r in &results.reports {
                println!(
                    "{:10} asr_white = {:.4}  asr_gray = {:.4}  mean_ssim = {:.4}",
                    r.technique, r.asr_white, r.asr_gray, r.mean_ssim
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Report { results, out } => {
            let results = load_results(results)?;
            harness::report(&results, out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
