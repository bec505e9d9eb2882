//! Exam records, manifests, CBIS-DDSM-style ingestion and a synthetic
//! exam generator.
//!
//! Raw manifest header: `breast_id,patient_id,label,cc_path,cc_roi,mlo_path,mlo_roi,split`
//! with ROIs encoded `r0:c0:r1:c1` and empty cells for an absent view.
//! Prepared manifests (written by `prep`) instead carry the four plane paths:
//! `breast_id,patient_id,label,cc_masked,cc_cropped,mlo_masked,mlo_cropped,split`,
//! preceded by a `#` comment line describing the resampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentOp;
use crate::error::{Error, Result};
use crate::imaging::{
    read_png, tight_bbox, write_png16, Bbox, Grid, ImagePlane, PreparedViews, RawMammogram, Scale,
    View, ViewPlanes, ViewSource,
};

pub const RAW_HEADER: [&str; 8] = [
    "breast_id",
    "patient_id",
    "label",
    "cc_path",
    "cc_roi",
    "mlo_path",
    "mlo_roi",
    "split",
];

pub const PREPARED_HEADER: [&str; 8] = [
    "breast_id",
    "patient_id",
    "label",
    "cc_masked",
    "cc_cropped",
    "mlo_masked",
    "mlo_cropped",
    "split",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "test" | "testing" => Ok(Split::Test),
            other => Err(Error::MalformedManifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cohort {
    BothViews,
    MissingView,
}

/// Unprocessed reference to one view: full image path plus ROI.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawView {
    pub path: PathBuf,
    pub roi: Bbox,
}

/// Paths of the two processed planes of one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanePaths {
    pub masked: PathBuf,
    pub cropped: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViewRef {
    Raw(RawView),
    Prepared(PlanePaths),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExamRecord {
    pub breast_id: String,
    pub patient_id: String,
    pub label: u8,
    pub cc: Option<ViewRef>,
    pub mlo: Option<ViewRef>,
    pub split: Split,
}

impl ExamRecord {
    pub fn view(&self, v: View) -> Option<&ViewRef> {
        match v {
            View::Cc => self.cc.as_ref(),
            View::Mlo => self.mlo.as_ref(),
        }
    }

    pub fn num_views(&self) -> usize {
        self.cc.is_some() as usize + self.mlo.is_some() as usize
    }

    pub fn cohort(&self) -> Cohort {
        if self.num_views() == 2 {
            Cohort::BothViews
        } else {
            Cohort::MissingView
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ExamRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Raw,
    Prepared,
}

fn rel_to(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

fn resolve(base: &Path, cell: &str) -> PathBuf {
    let p = PathBuf::from(cell);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            rows: self.rows.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn kind(&self) -> Option<ManifestKind> {
        self.rows
            .iter()
            .flat_map(|r| [r.cc.as_ref(), r.mlo.as_ref()])
            .flatten()
            .map(|v| match v {
                ViewRef::Raw(_) => ManifestKind::Raw,
                ViewRef::Prepared(_) => ManifestKind::Prepared,
            })
            .next()
    }

    /// Checks unique breast ids within each split, patient-disjoint splits
    /// and at least one view per row.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut patients: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.rows {
            if r.num_views() == 0 {
                return Err(Error::MalformedManifest(format!("{} has no views", r.breast_id)));
            }
            if r.label > 1 {
                return Err(Error::MalformedManifest(format!("{} has label {}", r.breast_id, r.label)));
            }
            if !seen.insert((r.split, r.breast_id.as_str())) {
                return Err(Error::MalformedManifest(format!("duplicate breast_id {}", r.breast_id)));
            }
            patients.entry(r.split).or_default().insert(&r.patient_id);
        }
        if let (Some(tr), Some(te)) = (patients.get(&Split::Train), patients.get(&Split::Test)) {
            if let Some(p) = tr.intersection(te).next() {
                return Err(Error::MalformedManifest(format!("patient {p} is in both splits")));
            }
        }
        Ok(())
    }

    /// Writes the manifest; paths are stored relative to the manifest's directory when possible.
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let kind = self.kind().unwrap_or(ManifestKind::Raw);
        let mut out = Vec::new();
        if let Some(c) = comment {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(match kind {
                ManifestKind::Raw => RAW_HEADER,
                ManifestKind::Prepared => PREPARED_HEADER,
            })?;
            for r in &self.rows {
                let mut cells = vec![r.breast_id.clone(), r.patient_id.clone(), r.label.to_string()];
                for v in View::ALL {
                    match (kind, r.view(v)) {
                        (_, None) => cells.extend([String::new(), String::new()]),
                        (ManifestKind::Raw, Some(ViewRef::Raw(rv))) => {
                            cells.extend([rel_to(&base, &rv.path), rv.roi.encode()])
                        }
                        (ManifestKind::Prepared, Some(ViewRef::Prepared(pp))) => {
                            cells.extend([rel_to(&base, &pp.masked), rel_to(&base, &pp.cropped)])
                        }
                        _ => {
                            return Err(Error::MalformedManifest(format!(
                                "{} mixes raw and prepared views",
                                r.breast_id
                            )))
                        }
                    }
                }
                cells.push(r.split.to_string());
                w.write_record(&cells)?;
            }
            w.flush()?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let kind = if header.iter().any(|h| h == "cc_masked") {
            ManifestKind::Prepared
        } else {
            ManifestKind::Raw
        };
        let names = match kind {
            ManifestKind::Raw => RAW_HEADER,
            ManifestKind::Prepared => PREPARED_HEADER,
        };
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let cols: Vec<usize> = names.iter().map(|n| col(n)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cell = |i: usize| rec.get(cols[i]).unwrap_or("").trim();
            let label: u8 = cell(2)
                .parse()
                .map_err(|_| Error::MalformedManifest(format!("row {}: bad label `{}`", line + 1, cell(2))))?;
            let mut views = [None, None];
            for (vi, view) in views.iter_mut().enumerate() {
                let (a, b) = (cell(3 + 2 * vi), cell(4 + 2 * vi));
                if a.is_empty() && b.is_empty() {
                    continue;
                }
                *view = Some(match kind {
                    ManifestKind::Raw => ViewRef::Raw(RawView {
                        path: resolve(&base, a),
                        roi: Bbox::parse(b).ok_or_else(|| {
                            Error::MalformedManifest(format!("row {}: bad roi `{b}`", line + 1))
                        })?,
                    }),
                    ManifestKind::Prepared => ViewRef::Prepared(PlanePaths {
                        masked: resolve(&base, a),
                        cropped: resolve(&base, b),
                    }),
                });
            }
            let [cc, mlo] = views;
            rows.push(ExamRecord {
                breast_id: cell(0).to_string(),
                patient_id: cell(1).to_string(),
                label,
                cc,
                mlo,
                split: cell(7).parse()?,
            });
        }
        let m = Manifest { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn cohort_split(&self) -> (Manifest, Manifest) {
        let (both, missing) = self.rows.iter().cloned().partition(|r| r.num_views() == 2);
        (Manifest { rows: both }, Manifest { rows: missing })
    }
}

/// One breast with its prepared planes.
#[derive(Clone, Debug, PartialEq)]
pub struct BreastExam {
    pub breast_id: String,
    pub patient_id: String,
    pub label: u8,
    pub views: PreparedViews,
    pub augment: AugmentOp,
}

impl BreastExam {
    pub fn cohort(&self) -> Cohort {
        if self.views.num_present() == 2 {
            Cohort::BothViews
        } else {
            Cohort::MissingView
        }
    }

    pub fn present(&self, view: View) -> bool {
        self.views.present(view)
    }
}

/// Partitions exams by presence, preserving order within each cohort.
pub fn cohort_split(exams: &[BreastExam]) -> (Vec<BreastExam>, Vec<BreastExam>) {
    exams
        .iter()
        .cloned()
        .partition(|e| e.cohort() == Cohort::BothViews)
}

fn load_plane(path: &Path, side: Option<usize>, view: View, scale: Scale) -> Result<ImagePlane> {
    let g = read_png(path)?;
    if g.height != g.width || side.is_some_and(|s| s != g.height) {
        return Err(Error::ConfigMismatch(format!(
            "{} is {}x{}, expected a square plane of side {side:?}",
            path.display(),
            g.height,
            g.width
        )));
    }
    ImagePlane::new(g.height, g.data, view, scale)
}

/// Loads the planes referenced by a prepared manifest row.
pub fn load_prepared(record: &ExamRecord, side: Option<usize>) -> Result<BreastExam> {
    let mut views = PreparedViews::default();
    for v in View::ALL {
        match record.view(v) {
            None => {}
            Some(ViewRef::Prepared(pp)) => views.set(
                v,
                Some(ViewPlanes {
                    masked: load_plane(&pp.masked, side, v, Scale::Masked)?,
                    cropped: load_plane(&pp.cropped, side, v, Scale::Cropped)?,
                }),
            ),
            Some(ViewRef::Raw(_)) => {
                return Err(Error::MalformedManifest(format!(
                    "{} references raw images; run prep first",
                    record.breast_id
                )))
            }
        }
    }
    if views.num_present() == 0 {
        return Err(Error::NoViews);
    }
    Ok(BreastExam {
        breast_id: record.breast_id.clone(),
        patient_id: record.patient_id.clone(),
        label: record.label,
        views,
        augment: AugmentOp::Identity,
    })
}

/// Loads the raw view sources of a raw manifest row.
pub fn load_raw_sources(record: &ExamRecord) -> Result<[Option<ViewSource>; 2]> {
    let mut out = [None, None];
    for (slot, v) in out.iter_mut().zip(View::ALL) {
        match record.view(v) {
            None => {}
            Some(ViewRef::Raw(rv)) => {
                let g = read_png(&rv.path)?;
                let image = RawMammogram::new(g, v, rv.path.to_string_lossy())?;
                *slot = Some(ViewSource { image, roi: rv.roi });
            }
            Some(ViewRef::Prepared(_)) => {
                return Err(Error::MalformedManifest(format!(
                    "{} is already prepared",
                    record.breast_id
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CBIS-DDSM ingestion

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestCounts {
    pub rows_read: usize,
    pub rows_unreadable: usize,
    pub duplicate_views: usize,
    pub train_both: usize,
    pub train_single_excluded: usize,
    pub test_both: usize,
    pub test_single: usize,
    pub test_dropped_patient_overlap: usize,
}

fn norm_col(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Tries the path as given, then with a `.png` extension.
fn locate_image(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = rel.trim().trim_matches('"').replace('\\', "/");
    let direct = root.join(rel.trim());
    if direct.is_file() {
        return Some(direct);
    }
    let png = direct.with_extension("png");
    png.is_file().then_some(png)
}

struct CbisRow {
    breast_id: String,
    patient_id: String,
    view: View,
    malignant: bool,
    image: PathBuf,
    roi: Bbox,
    sort_key: (String, String),
}

fn read_cbis_csv(
    path: &Path,
    images: &Path,
    counts: &mut IngestCounts,
) -> Result<Vec<CbisRow>> {
    if std::fs::metadata(path)?.len() == 0 {
        return Ok(vec![]);
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(norm_col).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_patient = col("patient_id")?;
    let c_side = col("left_or_right_breast")?;
    let c_view = col("image_view")?;
    let c_path = col("pathology")?;
    let c_image = col("image_file_path")?;
    let c_roi = col("roi_mask_file_path")?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        counts.rows_read += 1;
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let view = match get(c_view).to_ascii_uppercase().as_str() {
            "CC" => View::Cc,
            "MLO" => View::Mlo,
            other => {
                warn!("{}: skipping row with view `{other}`", path.display());
                continue;
            }
        };
        let (patient, side) = (get(c_patient), get(c_side).to_ascii_uppercase());
        let (image_rel, roi_rel) = (get(c_image), get(c_roi));
        let Some(image) = locate_image(images, &image_rel) else {
            warn!("unreadable image {image_rel} (row skipped)");
            counts.rows_unreadable += 1;
            continue;
        };
        let roi = match locate_image(images, &roi_rel).map(|p| read_png(&p)) {
            Some(Ok(mask)) => {
                let fg: Vec<bool> = mask.data.iter().map(|v| *v > 0.0).collect();
                match tight_bbox(&fg, mask.width) {
                    Some(b) => b,
                    None => {
                        warn!("empty ROI mask {roi_rel} (row skipped)");
                        counts.rows_unreadable += 1;
                        continue;
                    }
                }
            }
            Some(Err(e)) => {
                warn!("{e} (row skipped)");
                counts.rows_unreadable += 1;
                continue;
            }
            None => {
                warn!("unreadable ROI mask {roi_rel} (row skipped)");
                counts.rows_unreadable += 1;
                continue;
            }
        };
        rows.push(CbisRow {
            breast_id: format!("{patient}_{side}"),
            patient_id: patient,
            view,
            malignant: get(c_path).eq_ignore_ascii_case("MALIGNANT"),
            image,
            roi,
            sort_key: (image_rel, roi_rel),
        });
    }
    Ok(rows)
}

/// Pairs CC/MLO records per breast from every `*.csv` under `meta_dir`
/// (split taken from the file name). Training keeps only both-view breasts;
/// single-view breasts go to the test pool only.
pub fn ingest_cbis(meta_dir: &Path, images: &Path) -> Result<(Manifest, Manifest, IngestCounts)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(meta_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    let mut counts = IngestCounts::default();
    // split -> breast -> view -> candidate rows
    let mut pools: BTreeMap<Split, BTreeMap<String, Vec<CbisRow>>> = BTreeMap::new();
    for f in &files {
        let name = f.file_name().unwrap_or_default().to_string_lossy().to_ascii_lowercase();
        let split = if name.contains("train") {
            Split::Train
        } else if name.contains("test") {
            Split::Test
        } else {
            warn!("{}: cannot tell train from test, skipped", f.display());
            continue;
        };
        for row in read_cbis_csv(f, images, &mut counts)? {
            pools
                .entry(split)
                .or_default()
                .entry(row.breast_id.clone())
                .or_default()
                .push(row);
        }
    }
    let mut out: BTreeMap<Split, Vec<ExamRecord>> = BTreeMap::new();
    for (split, breasts) in pools {
        for (breast_id, mut rows) in breasts {
            let label = rows.iter().any(|r| r.malignant) as u8;
            rows.sort_by(|a, b| a.sort_key.cmp(&b.sort_key));
            let mut pick = |view: View| {
                let mut it = rows.iter().filter(|r| r.view == view);
                let first = it.next();
                let extra = it.count();
                if extra > 0 {
                    info!("{breast_id}: {extra} extra {view} record(s) ignored");
                    counts.duplicate_views += extra;
                }
                first.map(|r| {
                    ViewRef::Raw(RawView {
                        path: r.image.clone(),
                        roi: r.roi,
                    })
                })
            };
            let (cc, mlo) = (pick(View::Cc), pick(View::Mlo));
            let record = ExamRecord {
                breast_id,
                patient_id: rows[0].patient_id.clone(),
                label,
                cc,
                mlo,
                split,
            };
            match (split, record.num_views()) {
                (Split::Train, 2) => counts.train_both += 1,
                (Split::Train, _) => {
                    counts.train_single_excluded += 1;
                    continue;
                }
                (Split::Test, 2) => counts.test_both += 1,
                (Split::Test, _) => counts.test_single += 1,
            }
            out.entry(split).or_default().push(record);
        }
    }
    let train = Manifest {
        rows: out.remove(&Split::Train).unwrap_or_default(),
    };
    let train_patients: HashSet<&str> = train.rows.iter().map(|r| r.patient_id.as_str()).collect();
    let mut test_rows = out.remove(&Split::Test).unwrap_or_default();
    let before = test_rows.len();
    test_rows.retain(|r| {
        let keep = !train_patients.contains(r.patient_id.as_str());
        if !keep {
            match r.num_views() {
                2 => counts.test_both -= 1,
                _ => counts.test_single -= 1,
            }
        }
        keep
    });
    counts.test_dropped_patient_overlap = before - test_rows.len();
    info!("ingestion counts: {counts:?}");
    Ok((train, Manifest { rows: test_rows }, counts))
}

// ---------------------------------------------------------------------------
// Synthetic exams

/// Malignant blob pixels exceed the lobe's mean luminance by at least this much.
pub const MALIGNANT_MARGIN: f64 = 0.3;

const BACKGROUND: f64 = 0.03;
const LOBE_BASE: f64 = 0.38;
const BLOB_VALUE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub missing_rate: f64,
    pub seed: u64,
    pub side: usize,
    /// Fraction of both-view exams assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 100,
            missing_rate: 0.0,
            seed: 0,
            side: 128,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticExam {
    pub breast_id: String,
    pub patient_id: String,
    pub label: u8,
    pub split: Split,
    pub cc: Option<ViewSource>,
    pub mlo: Option<ViewSource>,
}

impl SyntheticExam {
    pub fn source(&self, v: View) -> Option<&ViewSource> {
        match v {
            View::Cc => self.cc.as_ref(),
            View::Mlo => self.mlo.as_ref(),
        }
    }
}

struct Scene {
    lobe_center: (f64, f64),
    lobe_axes: (f64, f64),
    texture_phase: (f64, f64),
    lesion: Lesion,
}

enum Lesion {
    Blob {
        center: (f64, f64),
        radius: f64,
        lobes: [(f64, f64); 2],
    },
    Faint {
        center: (f64, f64),
        sigma: f64,
        amplitude: f64,
        box_half: (f64, f64),
    },
}

impl Scene {
    fn in_lobe(&self, y: f64, x: f64) -> bool {
        let (cy, cx) = self.lobe_center;
        let (ay, ax) = self.lobe_axes;
        ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2) <= 1.0
    }

    fn in_blob(&self, y: f64, x: f64) -> bool {
        match self.lesion {
            Lesion::Blob {
                center,
                radius,
                lobes,
            } => {
                let (dy, dx) = (y - center.0, x - center.1);
                let theta = dy.atan2(dx);
                let r = radius * (1.0 + 0.25 * (3.0 * theta + lobes[0].1).sin() * lobes[0].0
                    + 0.15 * (5.0 * theta + lobes[1].1).sin() * lobes[1].0);
                dy.hypot(dx) <= r
            }
            Lesion::Faint { .. } => false,
        }
    }

    /// The ROI region: the blob itself, or the benign lesion's box.
    fn in_roi(&self, y: f64, x: f64) -> bool {
        match self.lesion {
            Lesion::Blob { .. } => self.in_blob(y, x),
            Lesion::Faint { center, box_half, .. } => {
                (y - center.0).abs() <= box_half.0 && (x - center.1).abs() <= box_half.1
            }
        }
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        if !self.in_lobe(y, x) {
            return BACKGROUND;
        }
        let (p, q) = self.texture_phase;
        let mut v = LOBE_BASE + 0.03 * (y / 9.0 + p).sin() * (x / 11.0 + q).cos();
        match self.lesion {
            Lesion::Blob { .. } if self.in_blob(y, x) => v = BLOB_VALUE,
            Lesion::Faint {
                center,
                sigma,
                amplitude,
                ..
            } => {
                let d2 = (y - center.0).powi(2) + (x - center.1).powi(2);
                v += amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            _ => {}
        }
        v
    }
}

fn random_scene<R: Rng>(rng: &mut R, side: f64, malignant: bool) -> Scene {
    let lobe_center = (side * rng.random_range(0.45..0.55), side * rng.random_range(0.12..0.22));
    let lobe_axes = (side * rng.random_range(0.36..0.44), side * rng.random_range(0.55..0.68));
    let texture_phase = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    // A point well inside the lobe, to the right of the chest wall.
    let (cy, cx) = lobe_center;
    let (ay, ax) = lobe_axes;
    let center = (
        cy + ay * rng.random_range(-0.4..0.4),
        (cx + ax * rng.random_range(0.25..0.55)).min(side * 0.85),
    );
    let lesion = if malignant {
        Lesion::Blob {
            center,
            radius: side * rng.random_range(0.05..0.08),
            lobes: [
                (rng.random_range(0.5..1.0), rng.random_range(0.0..6.28)),
                (rng.random_range(0.5..1.0), rng.random_range(0.0..6.28)),
            ],
        }
    } else {
        Lesion::Faint {
            center,
            sigma: side * rng.random_range(0.04..0.07),
            amplitude: rng.random_range(0.03..0.06),
            box_half: (side * rng.random_range(0.06..0.1), side * rng.random_range(0.06..0.1)),
        }
    };
    Scene {
        lobe_center,
        lobe_axes,
        texture_phase,
        lesion,
    }
}

/// Renders a scene through the inverse shear `y' = y - shear·(x - side/2)`.
fn render<R: Rng>(scene: &Scene, side: usize, shear: f64, rng: &mut R) -> (Grid, Option<Bbox>) {
    let half = side as f64 / 2.0;
    let mut roi_mask = vec![false; side * side];
    let mut g = Grid::filled(side, side, 0.0);
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 - shear * (c as f64 - half), c as f64);
            let noise = rng.random_range(-0.01..0.01);
            g.data[r * side + c] = (scene.value(y, x) + noise).clamp(0.0, 1.0);
            roi_mask[r * side + c] = scene.in_roi(y, x);
        }
    }
    (g, tight_bbox(&roi_mask, side))
}

fn binomial_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i < n / 2) as u8).collect();
    labels.shuffle(rng);
    labels
}

/// Generates `n` synthetic exams. Malignant breasts carry a bright irregular
/// blob inside an elliptical lobe, benign ones a faint smooth bump; the MLO
/// view is a sheared rendering of the CC scene.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticExam>> {
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::BadRate(cfg.missing_rate));
    }
    if cfg.n == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.side < 32 {
        return Err(Error::InvalidConfig(format!("synthetic side {} < 32", cfg.side)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = binomial_labels(&mut rng, cfg.n);
    let mut exams = Vec::with_capacity(cfg.n);
    for (i, &label) in labels.iter().enumerate() {
        let patient_id = format!("SYN{i:05}");
        let scene = random_scene(&mut rng, cfg.side as f64, label == 1);
        let shear = rng.random_range(0.15..0.3);
        let drop = if rng.random::<f64>() < cfg.missing_rate {
            Some(if rng.random::<bool>() { View::Cc } else { View::Mlo })
        } else {
            None
        };
        let mut sources = [None, None];
        for (slot, view) in sources.iter_mut().zip(View::ALL) {
            let s = if view == View::Cc { 0.0 } else { shear };
            let (grid, roi) = render(&scene, cfg.side, s, &mut rng);
            if drop == Some(view) {
                continue;
            }
            let roi = roi.ok_or_else(|| Error::InvalidImage(format!("{patient_id}: lesion left the image")))?;
            let image = RawMammogram::new(grid, view, format!("{patient_id}_{view}"))?;
            *slot = Some(ViewSource { image, roi });
        }
        let [cc, mlo] = sources;
        exams.push(SyntheticExam {
            breast_id: format!("{patient_id}_L"),
            patient_id,
            label,
            split: Split::Train,
            cc,
            mlo,
        });
    }
    // Single-view breasts are test-only; a fraction of both-view breasts joins them.
    let mut both: Vec<usize> = (0..exams.len()).filter(|&i| exams[i].cc.is_some() && exams[i].mlo.is_some()).collect();
    both.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * both.len() as f64).round() as usize;
    for &i in &both[..n_test.min(both.len())] {
        exams[i].split = Split::Test;
    }
    for e in exams.iter_mut().filter(|e| e.cc.is_none() || e.mlo.is_none()) {
        e.split = Split::Test;
    }
    Ok(exams)
}

/// Writes synthetic exams as 16-bit PNGs under `dir/images` plus `dir/manifest.csv`.
pub fn write_synthetic(exams: &[SyntheticExam], dir: &Path) -> Result<Manifest> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut rows = Vec::with_capacity(exams.len());
    for e in exams {
        let mut refs = [None, None];
        for (slot, v) in refs.iter_mut().zip(View::ALL) {
            if let Some(src) = e.source(v) {
                let path = img_dir.join(format!("{}_{v}.png", e.breast_id));
                write_png16(&path, &src.image.pixels)?;
                *slot = Some(ViewRef::Raw(RawView { path, roi: src.roi }));
            }
        }
        let [cc, mlo] = refs;
        rows.push(ExamRecord {
            breast_id: e.breast_id.clone(),
            patient_id: e.patient_id.clone(),
            label: e.label,
            cc,
            mlo,
            split: e.split,
        });
    }
    let m = Manifest { rows };
    m.write_csv(&dir.join("manifest.csv"), None)?;
    Ok(m)
}
