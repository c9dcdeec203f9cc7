use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gaitgender::config::{PipelineConfig, PropagationMode};
use gaitgender::pipeline::{self, EvalOptions, FaceSource, Project, TrainOptions};
use gaitgender::skeleton::ViewAngle;
use gaitgender::synth::{generate_synthetic_dataset, SynthConfig, SYNTH_MANIFEST};
use gaitgender::train::{GroupBy, LossKind};

/// Gait-based gender estimation from pose sequences.
#[derive(Debug, Parser)]
#[command(name = "gaitgender", version)]
struct Cli {
    /// Dataset manifest; artifacts are written next to it.
    #[arg(long, global = true, default_value = "manifest.tsv")]
    manifest: PathBuf,

    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the seed recorded in the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-style walking dataset.
    Synth(SynthArgs),
    /// Add pose files to the manifest, check them and assign splits.
    Ingest {
        /// Directory of pose files (.csv or AlphaPose .json).
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Label front-view sequences from face traces.
    AnnotateFaces {
        /// Directory of `<sequence_id>.faces.csv` traces.
        #[arg(long)]
        fixture_dir: Option<PathBuf>,
        /// Copy ground truth instead of running face analysis.
        #[arg(long, conflicts_with = "fixture_dir")]
        from_truth: bool,
    },
    /// Normalize every pose sequence.
    Normalize,
    /// Write TSSI tensors as .npy files.
    Encode,
    /// Compute gait embeddings.
    Embed,
    /// Spread front-view labels to the other views.
    Propagate {
        #[arg(long)]
        mode: Option<PropagationMode>,
        /// Confidence threshold used for the reported count.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train the classifier.
    Train {
        #[arg(long)]
        loss: Option<LossKind>,
        /// Minimum confidence of propagated labels.
        #[arg(long)]
        tau: Option<f64>,
        /// Use front-view labels only (baseline).
        #[arg(long)]
        front_only: bool,
        #[arg(long, default_value = pipeline::DEFAULT_MODEL)]
        model: PathBuf,
    },
    /// Evaluate a model on the validation split.
    Eval {
        #[arg(long, default_value = pipeline::DEFAULT_MODEL)]
        model: PathBuf,
        #[arg(long)]
        group_by: Option<GroupBy>,
        #[arg(long, default_value = pipeline::DEFAULT_METRICS)]
        out: PathBuf,
        /// Row name in reports; defaults to the model file stem.
        #[arg(long)]
        label: Option<String>,
    },
    /// Collect pseudo-label and metrics tables.
    Report {
        /// Metrics files; defaults to every metrics table next to the manifest.
        #[arg(long)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    /// Comma-separated view angles; all eleven by default.
    #[arg(long, value_delimiter = ',')]
    angles: Vec<u16>,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Skip face-trace fixtures.
    #[arg(long)]
    no_faces: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let angles = if args.angles.is_empty() {
        ViewAngle::all().collect()
    } else {
        args.angles.iter().map(|&a| ViewAngle::new(a)).collect::<Result<_, _>>()?
    };
    let cfg = SynthConfig {
        subjects_per_style: args.subjects,
        angles,
        frames: args.frames,
        noise_std: args.noise,
        seed: cli.seed.unwrap_or(0),
        face_fixtures: !args.no_faces,
        ..Default::default()
    };
    let dir = gaitgender::manifest::manifest_dir(&cli.manifest);
    let m = generate_synthetic_dataset(&cfg, &dir)?;
    let written = dir.join(SYNTH_MANIFEST);
    if cli.manifest.file_name() != written.file_name() {
        std::fs::rename(&written, &cli.manifest)
            .with_context(|| format!("moving {} to {}", written.display(), cli.manifest.display()))?;
    }
    println!("wrote {} sequences to {}", m.entries.len(), dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        return synth(cli, args);
    }
    let mut cfg = load_config(cli)?;
    let project = Project::new(&cli.manifest);
    match &cli.command {
        Command::Synth(_) => unreachable!(),
        Command::Ingest { poses } => {
            let r = pipeline::ingest(&project, &cfg, poses.as_deref())?;
            println!(
                "added {}, checked {}, flagged {}; new subjects: {} train, {} val",
                r.added,
                r.checked,
                r.flagged.len(),
                r.train_subjects,
                r.val_subjects
            );
        }
        Command::AnnotateFaces { fixture_dir, from_truth } => {
            let source = if *from_truth {
                FaceSource::Truth
            } else {
                FaceSource::resolve(&project, &cfg, fixture_dir.as_deref())
            };
            let s = pipeline::annotate_faces(&project, &cfg, &source)?;
            println!(
                "labeled {}, kept {} true labels, {} without a usable face, {} failed, {} non-front skipped",
                s.labeled,
                s.kept_true,
                s.no_face.len(),
                s.failed.len(),
                s.skipped_non_front
            );
            if let Some((id, err)) = s.failed.first() {
                bail!("{} sequences could not be analyzed, first: {id}: {err}", s.failed.len());
            }
        }
        Command::Normalize => println!("normalized {} sequences", pipeline::normalize(&project, &cfg)?),
        Command::Encode => println!("encoded {} sequences", pipeline::encode(&project, &cfg)?),
        Command::Embed => println!("embedded {} sequences", pipeline::embed(&project, &cfg)?),
        Command::Propagate { mode, tau } => {
            if let Some(m) = mode {
                cfg.propagation.mode = *m;
            }
            if let Some(t) = tau {
                cfg.propagation.tau = *t;
            }
            cfg.validate()?;
            let r = pipeline::propagate(&project, &cfg)?;
            println!(
                "{} sources, {} propagated, {} with confidence >= {}",
                r.sources, r.propagated, r.confident, cfg.propagation.tau
            );
            if let Some(acc) = &r.accuracy {
                print!("{}", pipeline::pseudo_label_table(acc));
            }
        }
        Command::Train {
            loss,
            tau,
            front_only,
            model,
        } => {
            if let Some(l) = loss {
                cfg.train.loss = *l;
            }
            if let Some(t) = tau {
                cfg.propagation.tau = *t;
            }
            cfg.validate()?;
            let opts = TrainOptions {
                front_only: *front_only,
                model_path: model.clone(),
            };
            let r = pipeline::train(&project, &cfg, &opts)?;
            println!(
                "trained on {} front + {} propagated samples for {} epochs; model {}, log {}",
                r.front,
                r.propagated,
                r.epochs,
                r.model_path.display(),
                r.log_path.display()
            );
        }
        Command::Eval {
            model,
            group_by,
            out,
            label,
        } => {
            let opts = EvalOptions {
                model_path: model.clone(),
                out: out.clone(),
                label: label.clone(),
                group_by: group_by.unwrap_or(cfg.group_by),
            };
            let (_, table) = pipeline::eval(&project, &opts)?;
            print!("{}", table.to_tsv());
        }
        Command::Report { metrics } => print!("{}", pipeline::report(&project, metrics)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
