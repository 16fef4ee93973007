use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use conceptfaith::catalog::{self, SetKey, Source};
use conceptfaith::cav::Pooling;
use conceptfaith::report::{self, toy_project, CellFailure, Run, RunConfig};

#[derive(Parser)]
#[command(
    name = "conceptfaith",
    version,
    about = "Faithfulness of synthetic concept image sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic concept images with the configured providers.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Remove each concept from its class images with the configured editor.
    Remove {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Write the activations of one image set at one layer.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        #[arg(long)]
        layer: String,
        /// Set key, e.g. `concept:striped/real`, `concept:striped/gen:flux`, `class:zebra`.
        #[arg(long)]
        set: String,
    },
    /// Compute and write a difference-of-means CAV.
    Cav {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        concept: String,
        /// `real` or `gen:<provider>`.
        #[arg(long, default_value = "real")]
        source: String,
        #[arg(long, default_value = "gap")]
        pooling: String,
    },
    /// Representation alignment of generated and real CAVs.
    Rq1(Stage),
    /// Intra-similarity curves.
    Rq2(Stage),
    /// Importance deltas.
    Rq3(Stage),
    /// Counterfactual concept removal.
    Rq4(Stage),
    /// All analyses, appendix tables and (optionally) figures.
    Report(Stage),
    /// Write the procedural toy corpus, mock generated sets, removed sets,
    /// trained toy CNN and a run configuration into a directory.
    ToyProject {
        #[arg(long)]
        out: PathBuf,
        /// Fewer images and IG steps.
        #[arg(long)]
        small: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy CNN on the classes of a catalog.
    TrainToy {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        model_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Stage {
    #[command(flatten)]
    common: Common,
    /// Also draw SVG figures.
    #[arg(long)]
    figures: bool,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report_failures(failures: &[CellFailure]) -> ExitCode {
    for f in failures {
        eprintln!("failed [{}] {}: {}", f.stage, f.cell, f.error);
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} cell(s) failed", failures.len());
        ExitCode::FAILURE
    }
}

fn parse_source(s: &str) -> Result<Source> {
    let source: Source = s.parse().with_context(|| format!("bad source `{s}`"))?;
    if matches!(source, Source::Removed(_)) {
        bail!("CAVs are built from concept sets: use `real` or `gen:<provider>`");
    }
    Ok(source)
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "gap" => Ok(Pooling::Gap),
        "flatten" => Ok(Pooling::Flatten),
        _ => bail!("pooling must be `gap` or `flatten`"),
    }
}

fn run_stage(which: &str, stage: Stage) -> Result<ExitCode> {
    let run = Run::open(load_config(&stage.common)?)?;
    if which == "report" {
        let summary = run.run_report(stage.figures)?;
        println!("results in {}", run.config.output_dir.display());
        return Ok(report_failures(&summary.failures));
    }
    let (mut r1, mut r2, mut r3, mut r4) = Default::default();
    let failures = match which {
        "rq1" => {
            r1 = run.run_rq1()?;
            r1.failures.clone()
        }
        "rq2" => {
            r2 = run.run_rq2()?;
            r2.failures.clone()
        }
        "rq3" => {
            r3 = run.run_rq3()?;
            r3.failures.clone()
        }
        _ => {
            r4 = run.run_rq4()?;
            r4.failures.clone()
        }
    };
    if stage.figures || run.config.figures {
        report::figures::write_figures(&run.config.output_dir.join("figures"), &r1, &r2, &r3, &r4)?;
    }
    run.write_manifest(&[which], &failures)?;
    println!("results in {}", run.config.output_dir.display());
    Ok(report_failures(&failures))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            common,
            provider,
            concept,
            count,
            resume,
        } => {
            let cfg = load_config(&common)?;
            let cat = catalog::load_catalog(&cfg.catalog)?;
            let (sets, failures) = report::generate_images(
                &cfg,
                &cat,
                provider.as_deref(),
                concept.as_deref(),
                count,
                resume,
            )?;
            for s in &sets {
                println!("{}: {} images", s.key, s.len());
            }
            Ok(report_failures(&failures))
        }
        Command::Remove {
            common,
            concept,
            resume,
        } => {
            let cfg = load_config(&common)?;
            let cat = catalog::load_catalog(&cfg.catalog)?;
            let (sets, failures) = report::remove_concepts(&cfg, &cat, concept.as_deref(), resume)?;
            for s in &sets {
                println!("{}: {} images", s.key, s.len());
            }
            Ok(report_failures(&failures))
        }
        Command::Extract {
            common,
            model,
            layer,
            set,
        } => {
            let run = Run::open(load_config(&common)?)?;
            let key: SetKey = set
                .parse()
                .with_context(|| format!("bad set key `{set}`"))?;
            let stem = run.extract(&model, &layer, &key)?;
            println!("{}", stem.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Cav {
            common,
            model,
            layer,
            concept,
            source,
            pooling,
        } => {
            let run = Run::open(load_config(&common)?)?;
            let (cav, path) = run.cav(
                &model,
                &layer,
                &concept,
                &parse_source(&source)?,
                parse_pooling(&pooling)?,
            )?;
            println!("{} (norm {:.6})", path.display(), cav.norm());
            Ok(ExitCode::SUCCESS)
        }
        Command::Rq1(s) => run_stage("rq1", s),
        Command::Rq2(s) => run_stage("rq2", s),
        Command::Rq3(s) => run_stage("rq3", s),
        Command::Rq4(s) => run_stage("rq4", s),
        Command::Report(s) => run_stage("report", s),
        Command::ToyProject { out, small, seed } => {
            let mut spec = if small {
                toy_project::ToyProjectSpec::small()
            } else {
                Default::default()
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let project = toy_project::write_toy_project(&out, &spec)?;
            println!(
                "trained toy CNN: {:.1}% train accuracy after {} epochs",
                100.0 * project.train.train_accuracy,
                project.train.epochs
            );
            println!("config: {}", project.config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainToy {
            catalog: path,
            out,
            model_seed,
            seed,
        } => {
            let cat = catalog::load_catalog(&path)?;
            let cfg = conceptfaith::extract::toy::TrainConfig {
                seed,
                ..Default::default()
            };
            let (model, rep) = toy_project::train_toy_model(&cat, model_seed, &cfg)?;
            save_model(&model, &out)?;
            println!(
                "{:.1}% train accuracy after {} epochs",
                100.0 * rep.train_accuracy,
                rep.epochs
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn save_model(model: &conceptfaith::extract::ToyCnn, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(out)?;
    Ok(())
}
