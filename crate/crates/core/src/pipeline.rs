//! End-to-end steps shared by the command-line tool and the tests:
//! preprocessing to disk, loading exams, training and evaluation.

use std::path::{Path, PathBuf};

use log::info;

use crate::augment::augment_exam;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_prepared, load_raw_sources, BreastExam, ExamRecord, Manifest, PlanePaths, ViewRef};
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::imaging::{preprocess_exam, write_png16, PreparedViews, SegmenterBackend, View};
use crate::metrics::{aggregate_by_exam, MetricsReport, PredictionRecord};
use crate::model::Model;
use crate::training::{train, TrainOutcome};

pub fn resample_comment(side: usize) -> String {
    format!("planes resampled with corner-aligned bilinear interpolation to side={side}")
}

fn preprocess_record(record: &ExamRecord, backend: &SegmenterBackend, side: usize) -> Result<PreparedViews> {
    let [cc, mlo] = load_raw_sources(record)?;
    preprocess_exam(cc.as_ref(), mlo.as_ref(), backend, side)
}

/// Segments, crops and resizes every exam of a raw manifest, writing the
/// planes as 16-bit PNGs under `out_dir/planes` and `out_dir/manifest.csv`.
pub fn prep_manifest(manifest: &Manifest, out_dir: &Path, backend: &SegmenterBackend, side: usize) -> Result<Manifest> {
    let planes_dir = out_dir.join("planes");
    std::fs::create_dir_all(&planes_dir)?;
    let mut rows = Vec::with_capacity(manifest.len());
    for record in &manifest.rows {
        let views = preprocess_record(record, backend, side)?;
        let mut out = record.clone();
        for v in View::ALL {
            let planes = views.get(v).map(|p| -> Result<ViewRef> {
                let path = |scale: &str| planes_dir.join(format!("{}_{v}_{scale}.png", record.breast_id));
                let (masked, cropped) = (path("masked"), path("cropped"));
                write_png16(&masked, &p.masked.to_grid())?;
                write_png16(&cropped, &p.cropped.to_grid())?;
                Ok(ViewRef::Prepared(PlanePaths { masked, cropped }))
            });
            let planes = planes.transpose()?;
            match v {
                View::Cc => out.cc = planes,
                View::Mlo => out.mlo = planes,
            }
        }
        rows.push(out);
    }
    let prepared = Manifest { rows };
    prepared.write_csv(&out_dir.join("manifest.csv"), Some(&resample_comment(side)))?;
    info!("prepared {} exams into {}", prepared.len(), out_dir.display());
    Ok(prepared)
}

/// Loads every row as a `BreastExam`; raw rows are preprocessed in memory.
pub fn load_exams(manifest: &Manifest, backend: &SegmenterBackend, side: usize) -> Result<Vec<BreastExam>> {
    manifest
        .rows
        .iter()
        .map(|r| {
            let raw = [r.cc.as_ref(), r.mlo.as_ref()]
                .into_iter()
                .flatten()
                .any(|v| matches!(v, ViewRef::Raw(_)));
            if raw {
                Ok(BreastExam {
                    breast_id: r.breast_id.clone(),
                    patient_id: r.patient_id.clone(),
                    label: r.label,
                    views: preprocess_record(r, backend, side)?,
                    augment: Default::default(),
                })
            } else {
                load_prepared(r, Some(side))
            }
        })
        .collect()
}

/// Builds the model described by `config`, optionally importing weights,
/// and trains it.
pub fn run_training(exams: &[BreastExam], config: &RunConfig, init_weights: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::new(config.backbone.clone(), config.fusion.clone(), config.train.seed)?;
    if let Some(path) = init_weights {
        let n = checkpoint::load_weights(path, &mut model)?;
        info!("imported {n} arrays from {}", path.display());
    }
    train(model, exams, &config.train)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// One record per evaluated sample (six per exam with test augmentation).
    pub records: Vec<PredictionRecord>,
    pub report: MetricsReport,
    /// Scores averaged over the variants of each exam; only with test augmentation.
    pub per_exam: Option<MetricsReport>,
}

pub fn evaluate(model: &Model, exams: &[BreastExam], test_augment: bool, workers: usize) -> Result<Evaluation> {
    if exams.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples: Vec<BreastExam> = if test_augment {
        let mut v = Vec::with_capacity(exams.len() * 6);
        for e in exams {
            v.extend(augment_exam(e)?);
        }
        v
    } else {
        exams.to_vec()
    };
    let views: Vec<&PreparedViews> = samples.iter().map(|e| &e.views).collect();
    let logits = model.logits(&views, workers)?;
    let records: Vec<PredictionRecord> = samples
        .iter()
        .zip(logits)
        .map(|(e, z)| PredictionRecord {
            breast_id: e.breast_id.clone(),
            cohort: e.cohort(),
            augment: e.augment,
            label: e.label,
            score: sigmoid(z),
        })
        .collect();
    let report = MetricsReport::from_records(&records);
    let per_exam = test_augment.then(|| MetricsReport::from_records(&aggregate_by_exam(&records)));
    Ok(Evaluation {
        records,
        report,
        per_exam,
    })
}

/// `report.json` → `report.per_exam.json`.
pub fn per_exam_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().unwrap_or_default().to_string_lossy();
    report.with_file_name(format!("{stem}.per_exam.json"))
}

/// `out.ckpt` → `out.config`, the resolved configuration next to an artifact.
pub fn config_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("config")
}
