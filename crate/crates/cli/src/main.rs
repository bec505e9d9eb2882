use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use msmv_core::checkpoint;
use msmv_core::config::RunConfig;
use msmv_core::dataset::{generate_synthetic, ingest_cbis, write_synthetic, Manifest, Split, SyntheticConfig};
use msmv_core::fusion::FusionStrategy;
use msmv_core::imaging::{ProcessSegmenter, SegmenterBackend};
use msmv_core::metrics::{write_predictions, MetricsReport};
use msmv_core::pipeline::{config_path, evaluate, load_exams, per_exam_path, prep_manifest, run_training};
use msmv_core::training::write_epoch_log;
use msmv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "msmv", version, about = "Two-scale, two-view mammogram classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Classical,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Maxpool,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Markdown,
}

#[derive(clap::Args)]
struct SegmenterArgs {
    /// Lobe segmentation backend.
    #[arg(long, value_enum, default_value = "classical")]
    backend: Backend,
    /// External segmenter program, run as `<program> [args..] <input.png> <mask.png>`.
    #[arg(long)]
    segmenter: Option<String>,
    /// Extra argument for the external segmenter (repeatable).
    #[arg(long = "segmenter-arg", allow_hyphen_values = true)]
    segmenter_args: Vec<String>,
}

impl SegmenterArgs {
    fn backend(&self) -> SegmenterBackend {
        match self.backend {
            Backend::Classical => SegmenterBackend::Classical,
            Backend::External => SegmenterBackend::External(self.segmenter.as_ref().map(|p| {
                Arc::new(ProcessSegmenter {
                    program: p.clone(),
                    args: self.segmenter_args.clone(),
                }) as _
            })),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment, crop and resize the views of a raw manifest.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        side: usize,
        #[command(flatten)]
        seg: SegmenterArgs,
    },
    /// Build a manifest from CBIS-DDSM metadata CSVs.
    Ingest {
        #[arg(long)]
        cbis_meta: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset (PNG images plus manifest.csv).
    GenSynthetic {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        side: usize,
        /// Fraction of both-view exams placed in the test split.
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
    },
    /// Train on the train split of a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        fusion: Option<Fusion>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to `<out>.epochs.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Initial weights: any checkpoint with matching array names.
        #[arg(long)]
        init_weights: Option<PathBuf>,
        /// Store `eval.test_augment=false` in the checkpoint's configuration.
        #[arg(long)]
        no_test_augment: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Extra `key=value` override (repeatable).
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[command(flatten)]
        seg: SegmenterArgs,
    },
    /// Evaluate a checkpoint on the test split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_preds: Option<PathBuf>,
        /// Evaluate original exams only.
        #[arg(long)]
        no_test_augment: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        seg: SegmenterArgs,
    },
    /// Render a report.json as a table.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// `MSMV_SEED` takes precedence over `--seed`.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var("MSMV_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("MSMV_SEED=`{v}` is not an integer"))),
        Err(_) => Ok(flag),
    }
}

fn read_split(path: &Path, split: Split) -> Result<Manifest> {
    Ok(Manifest::read_csv(path)?.filter_split(split))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep {
            manifest,
            out,
            side,
            seg,
        } => {
            let m = Manifest::read_csv(&manifest)?;
            let prepared = prep_manifest(&m, &out, &seg.backend(), side)?;
            println!("prepared {} exams -> {}", prepared.len(), out.join("manifest.csv").display());
        }
        Command::Ingest { cbis_meta, images, out } => {
            let (train, test, counts) = ingest_cbis(&cbis_meta, &images)?;
            let all = Manifest {
                rows: train.rows.into_iter().chain(test.rows).collect(),
            };
            all.validate()?;
            all.write_csv(&out, None)?;
            println!("{counts:#?}");
        }
        Command::GenSynthetic {
            n,
            missing_rate,
            seed,
            out,
            side,
            test_fraction,
        } => {
            let cfg = SyntheticConfig {
                n,
                missing_rate,
                seed: resolve_seed(Some(seed))?.unwrap_or(seed),
                side,
                test_fraction,
            };
            let exams = generate_synthetic(&cfg)?;
            let m = write_synthetic(&exams, &out)?;
            println!("wrote {} exams -> {}", m.len(), out.join("manifest.csv").display());
        }
        Command::Train {
            config,
            manifest,
            fusion,
            epochs,
            seed,
            out,
            log,
            init_weights,
            no_test_augment,
            workers,
            overrides,
            seg,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidConfig(format!("--set expects key=value, got `{kv}`")))?;
                rc.set(k.trim(), v.trim())?;
            }
            if let Some(f) = fusion {
                rc.fusion.strategy = match f {
                    Fusion::Maxpool => FusionStrategy::MaxPool,
                    Fusion::Conv => FusionStrategy::Conv,
                };
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(s) = resolve_seed(seed)? {
                rc.train.seed = s;
            }
            if no_test_augment {
                rc.test_augment = false;
            }
            if let Some(w) = workers {
                rc.workers = w;
            }
            rc.validate()?;
            let m = read_split(&manifest, Split::Train)?;
            let exams = load_exams(&m, &seg.backend(), rc.backbone.input_side)?;
            let outcome = run_training(&exams, &rc, init_weights.as_deref())?;
            checkpoint::save(&out, &outcome.model, &rc)?;
            rc.save(&config_path(&out))?;
            let log_path = log.unwrap_or_else(|| out.with_extension("epochs.csv"));
            write_epoch_log(&log_path, &outcome.log)?;
            info!("best epoch {:?}", outcome.best_epoch);
            println!("checkpoint -> {}", out.display());
        }
        Command::Eval {
            checkpoint: ckpt,
            manifest,
            out,
            dump_preds,
            no_test_augment,
            workers,
            seg,
        } => {
            let (mut rc, model) = checkpoint::load(&ckpt)?;
            if no_test_augment {
                rc.test_augment = false;
            }
            if let Some(w) = workers {
                rc.workers = w;
            }
            let m = read_split(&manifest, Split::Test)?;
            let exams = load_exams(&m, &seg.backend(), rc.backbone.input_side)?;
            let ev = evaluate(&model, &exams, rc.test_augment, rc.workers)?;
            ev.report.write(&out)?;
            if let Some(per_exam) = &ev.per_exam {
                per_exam.write(&per_exam_path(&out))?;
            }
            if let Some(p) = dump_preds {
                write_predictions(&p, &ev.records)?;
            }
            rc.save(&config_path(&out))?;
            print!("{}", ev.report.render_text());
        }
        Command::Report { report, format } => {
            let r = MetricsReport::read(&report)?;
            print!(
                "{}",
                match format {
                    Format::Text => r.render_text(),
                    Format::Markdown => r.render_markdown(),
                }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
