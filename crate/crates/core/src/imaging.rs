//! Breast-lobe isolation and the two input scales.
//!
//! The masked scale is the raw image with everything outside the segmented
//! lobe zeroed, cropped to the lobe's bounding box. The cropped scale is the
//! raw (unmasked) image under the annotated ROI. Both are resampled to a
//! square network input with corner-aligned bilinear interpolation.

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentOp;
use crate::error::{Error, Result};

pub const DEFAULT_SIDE: usize = 224;
pub const MIN_RAW_SIDE: usize = 8;
const OTSU_BINS: usize = 256;

/// Row-major 2-D luminance grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub const ALL: [View; 2] = [View::Cc, View::Mlo];
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    Masked,
    Cropped,
}

/// Inclusive pixel box `(row_min, col_min, row_max, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bbox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl Bbox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        Bbox {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Bbox::new(0, 0, height - 1, width - 1)
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.row_min, self.col_min, self.row_max, self.col_max)
    }

    /// Manifest encoding `r0:c0:r1:c1`.
    pub fn encode(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.row_min, self.col_min, self.row_max, self.col_max
        )
    }

    pub fn parse(s: &str) -> Option<Bbox> {
        let parts: Vec<usize> = s
            .trim()
            .split(':')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<_>>()?;
        match parts.as_slice() {
            &[r0, c0, r1, c1] if r0 <= r1 && c0 <= c1 => Some(Bbox::new(r0, c0, r1, c1)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawMammogram {
    pub pixels: Grid,
    pub view: View,
    pub source_id: String,
}

impl RawMammogram {
    pub fn new(pixels: Grid, view: View, source_id: impl Into<String>) -> Result<Self> {
        let img = RawMammogram {
            pixels,
            view,
            source_id: source_id.into(),
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.pixels;
        if g.height < MIN_RAW_SIDE || g.width < MIN_RAW_SIDE {
            return Err(Error::InvalidImage(format!(
                "{}: {}x{} is below the {MIN_RAW_SIDE}x{MIN_RAW_SIDE} minimum",
                self.source_id, g.height, g.width
            )));
        }
        if g.data.len() != g.height * g.width {
            return Err(Error::InvalidImage(format!("{}: ragged grid", self.source_id)));
        }
        if let Some(v) = g.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "{}: pixel value {v} outside [0,1]",
                self.source_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterOutput {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub bbox: Bbox,
}

impl SegmenterOutput {
    /// Wraps a mask, deriving its tight bounding box.
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {height}x{width}",
                mask.len()
            )));
        }
        let bbox = tight_bbox(&mask, width).ok_or(Error::NoForeground)?;
        Ok(SegmenterOutput {
            height,
            width,
            mask,
            bbox,
        })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn tight_bbox(mask: &[bool], width: usize) -> Option<Bbox> {
    let mut bbox: Option<Bbox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (r, c) = (i / width, i % width);
        bbox = Some(match bbox {
            None => Bbox::new(r, c, r, c),
            Some(b) => Bbox::new(
                b.row_min.min(r),
                b.col_min.min(c),
                b.row_max.max(r),
                b.col_max.max(c),
            ),
        });
    }
    bbox
}

/// A lobe segmenter living outside this crate (e.g. a SAM deployment).
pub trait Segmenter: Send + Sync {
    fn segment(&self, img: &RawMammogram) -> Result<SegmenterOutput>;
}

impl<F> Segmenter for F
where
    F: Fn(&RawMammogram) -> Result<SegmenterOutput> + Send + Sync,
{
    fn segment(&self, img: &RawMammogram) -> Result<SegmenterOutput> {
        self(img)
    }
}

/// Runs `program [args..] <input.png> <mask.png>`; any nonzero pixel of the
/// written mask is foreground.
#[derive(Clone, Debug)]
pub struct ProcessSegmenter {
    pub program: String,
    pub args: Vec<String>,
}

impl Segmenter for ProcessSegmenter {
    fn segment(&self, img: &RawMammogram) -> Result<SegmenterOutput> {
        let dir = std::env::temp_dir().join(format!(
            "msmv-seg-{}-{}",
            std::process::id(),
            unique_suffix()
        ));
        std::fs::create_dir_all(&dir)?;
        let input = dir.join("input.png");
        let output = dir.join("mask.png");
        let result = (|| {
            write_png16(&input, &img.pixels)?;
            let status = Command::new(&self.program)
                .args(&self.args)
                .arg(&input)
                .arg(&output)
                .status()
                .map_err(|e| Error::SegmenterFailed(format!("{}: {e}", self.program)))?;
            if !status.success() {
                return Err(Error::SegmenterFailed(format!(
                    "{} exited with {status}",
                    self.program
                )));
            }
            let mask = read_png(&output)?;
            if (mask.height, mask.width) != (img.pixels.height, img.pixels.width) {
                return Err(Error::ShapeMismatch(format!(
                    "segmenter mask {}x{} for image {}x{}",
                    mask.height, mask.width, img.pixels.height, img.pixels.width
                )));
            }
            SegmenterOutput::from_mask(
                mask.height,
                mask.width,
                mask.data.iter().map(|v| *v > 0.0).collect(),
            )
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

fn unique_suffix() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Default)]
pub enum SegmenterBackend {
    /// Otsu threshold plus the largest 4-connected foreground component.
    #[default]
    Classical,
    /// `None` means an external backend was requested without being configured.
    External(Option<Arc<dyn Segmenter>>),
}

impl fmt::Debug for SegmenterBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmenterBackend::Classical => f.write_str("Classical"),
            SegmenterBackend::External(Some(_)) => f.write_str("External(configured)"),
            SegmenterBackend::External(None) => f.write_str("External(unconfigured)"),
        }
    }
}

fn histogram_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu's method on a 256-bin histogram over [0,1]. Returns the last bin of
/// the background class, or `None` when no split leaves both classes
/// nonempty. Ties keep the lowest bin.
pub fn otsu_bin(pixels: &[f64]) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in pixels {
        hist[histogram_bin(v)] += 1;
    }
    let total = pixels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (t, &n) in hist.iter().enumerate() {
        w0 += n as f64;
        sum0 += t as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Labels 4-connected components of `fg` (two-pass union-find). Returns
/// per-pixel labels (0 = background) and per-label pixel counts, labels
/// numbered in raster order of their first pixel.
pub fn label_components(fg: &[bool], height: usize, width: usize) -> (Vec<usize>, Vec<usize>) {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut labels = vec![0usize; fg.len()];
    let mut parent = vec![0usize];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !fg[i] {
                continue;
            }
            let up = if r > 0 { labels[i - width] } else { 0 };
            let left = if c > 0 { labels[i - 1] } else { 0 };
            labels[i] = match (up, left) {
                (0, 0) => {
                    parent.push(parent.len());
                    parent.len() - 1
                }
                (a, 0) | (0, a) => a,
                (a, b) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    let (lo, hi) = (ra.min(rb), ra.max(rb));
                    parent[hi] = lo;
                    lo
                }
            };
        }
    }
    let mut remap = vec![0usize; parent.len()];
    let mut counts = vec![0usize];
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l);
        if remap[root] == 0 {
            counts.push(0);
            remap[root] = counts.len() - 1;
        }
        *l = remap[root];
        counts[*l] += 1;
    }
    (labels, counts)
}

fn classical_segment(img: &RawMammogram) -> Result<SegmenterOutput> {
    let g = &img.pixels;
    let t = otsu_bin(&g.data).ok_or(Error::NoForeground)?;
    let fg: Vec<bool> = g.data.iter().map(|&v| histogram_bin(v) > t).collect();
    let (labels, counts) = label_components(&fg, g.height, g.width);
    // Largest component; ties go to the one starting first in raster order.
    let best = (1..counts.len())
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .ok_or(Error::NoForeground)?;
    let mask = labels.iter().map(|&l| l == best).collect();
    SegmenterOutput::from_mask(g.height, g.width, mask)
}

pub fn segment_lobe(img: &RawMammogram, backend: &SegmenterBackend) -> Result<SegmenterOutput> {
    img.validate()?;
    match backend {
        SegmenterBackend::Classical => classical_segment(img),
        SegmenterBackend::External(None) => Err(Error::BackendUnavailable),
        SegmenterBackend::External(Some(seg)) => {
            let out = seg.segment(img)?;
            if (out.height, out.width) != (img.pixels.height, img.pixels.width)
                || out.mask.len() != out.height * out.width
            {
                return Err(Error::ShapeMismatch("external segmenter output shape".into()));
            }
            // Re-derive the box so callers can rely on tightness.
            SegmenterOutput::from_mask(out.height, out.width, out.mask)
        }
    }
}

fn sub_grid(g: &Grid, b: Bbox) -> Grid {
    Grid::from_fn(b.height(), b.width(), |r, c| {
        g.at(b.row_min + r, b.col_min + c)
    })
}

/// Zeroes the background and crops to the segmentation box.
pub fn apply_mask_and_crop(img: &RawMammogram, seg: &SegmenterOutput) -> Result<Grid> {
    let g = &img.pixels;
    if (seg.height, seg.width) != (g.height, g.width) || seg.mask.len() != g.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            seg.height, seg.width, g.height, g.width
        )));
    }
    let b = seg.bbox;
    if b.row_max >= g.height || b.col_max >= g.width {
        return Err(Error::ShapeMismatch("bbox outside the image".into()));
    }
    Ok(Grid::from_fn(b.height(), b.width(), |r, c| {
        let i = (b.row_min + r) * g.width + b.col_min + c;
        if seg.mask[i] {
            g.data[i]
        } else {
            0.0
        }
    }))
}

pub fn crop_roi(img: &RawMammogram, roi: Bbox) -> Result<Grid> {
    let g = &img.pixels;
    if roi.row_min > roi.row_max
        || roi.col_min > roi.col_max
        || roi.row_max >= g.height
        || roi.col_max >= g.width
    {
        return Err(Error::RoiOutOfBounds {
            roi: roi.as_tuple(),
            height: g.height,
            width: g.width,
        });
    }
    Ok(sub_grid(g, roi))
}

/// Source coordinate of output index `i` under corner alignment.
fn corner_aligned(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = (i * (in_len - 1)) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Corner-aligned bilinear resampling: output corners coincide with input
/// corners, so a same-size resize is the identity.
pub fn resample_bilinear(grid: &Grid, out_h: usize, out_w: usize) -> Grid {
    let rows: Vec<_> = (0..out_h).map(|r| corner_aligned(r, out_h, grid.height)).collect();
    let cols: Vec<_> = (0..out_w).map(|c| corner_aligned(c, out_w, grid.width)).collect();
    Grid::from_fn(out_h, out_w, |r, c| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = grid.at(r0, c0) * (1.0 - fc) + grid.at(r0, c1) * fc;
        let bottom = grid.at(r1, c0) * (1.0 - fc) + grid.at(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub side: usize,
    pub pixels: Vec<f64>,
    pub view: View,
    pub scale: Scale,
    /// Last augmentation applied to this plane.
    pub augment: AugmentOp,
}

impl ImagePlane {
    pub fn new(side: usize, pixels: Vec<f64>, view: View, scale: Scale) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {side}x{side} plane",
                pixels.len()
            )));
        }
        Ok(ImagePlane {
            side,
            pixels,
            view,
            scale,
            augment: AugmentOp::Identity,
        })
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.side,
            width: self.side,
            data: self.pixels.clone(),
        }
    }
}

pub fn resize_to_input(grid: &Grid, side: usize, view: View, scale: Scale) -> Result<ImagePlane> {
    if grid.is_empty() || grid.height == 0 || grid.width == 0 {
        return Err(Error::EmptyInput);
    }
    if side < MIN_RAW_SIDE {
        return Err(Error::InvalidConfig(format!("input side {side} < {MIN_RAW_SIDE}")));
    }
    let mut out = resample_bilinear(grid, side, side);
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    ImagePlane::new(side, out.data, view, scale)
}

/// Masked and cropped planes of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlanes {
    pub masked: ImagePlane,
    pub cropped: ImagePlane,
}

/// Prepared planes of one breast; absent views are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedViews {
    pub cc: Option<ViewPlanes>,
    pub mlo: Option<ViewPlanes>,
}

impl PreparedViews {
    pub fn get(&self, view: View) -> Option<&ViewPlanes> {
        match view {
            View::Cc => self.cc.as_ref(),
            View::Mlo => self.mlo.as_ref(),
        }
    }

    pub fn get_mut(&mut self, view: View) -> Option<&mut ViewPlanes> {
        match view {
            View::Cc => self.cc.as_mut(),
            View::Mlo => self.mlo.as_mut(),
        }
    }

    pub fn set(&mut self, view: View, planes: Option<ViewPlanes>) {
        match view {
            View::Cc => self.cc = planes,
            View::Mlo => self.mlo = planes,
        }
    }

    pub fn present(&self, view: View) -> bool {
        self.get(view).is_some()
    }

    pub fn num_present(&self) -> usize {
        View::ALL.iter().filter(|v| self.present(**v)).count()
    }

    pub fn planes(&self) -> impl Iterator<Item = &ImagePlane> {
        View::ALL
            .into_iter()
            .filter_map(|v| self.get(v))
            .flat_map(|p| [&p.masked, &p.cropped])
    }
}

/// One view's raw inputs: the full mammogram plus its annotated ROI.
#[derive(Clone, Debug)]
pub struct ViewSource {
    pub image: RawMammogram,
    pub roi: Bbox,
}

pub fn prepare_view(src: &ViewSource, backend: &SegmenterBackend, side: usize) -> Result<ViewPlanes> {
    let view = src.image.view;
    let seg = segment_lobe(&src.image, backend)?;
    let masked = apply_mask_and_crop(&src.image, &seg)?;
    let cropped = crop_roi(&src.image, src.roi)?;
    Ok(ViewPlanes {
        masked: resize_to_input(&masked, side, view, Scale::Masked)?,
        cropped: resize_to_input(&cropped, side, view, Scale::Cropped)?,
    })
}

pub fn preprocess_exam(
    cc: Option<&ViewSource>,
    mlo: Option<&ViewSource>,
    backend: &SegmenterBackend,
    side: usize,
) -> Result<PreparedViews> {
    if cc.is_none() && mlo.is_none() {
        return Err(Error::NoViews);
    }
    Ok(PreparedViews {
        cc: cc.map(|s| prepare_view(s, backend, side)).transpose()?,
        mlo: mlo.map(|s| prepare_view(s, backend, side)).transpose()?,
    })
}

/// Writes `[0,1]` luminance as a 16-bit grayscale PNG.
pub fn write_png16(path: &Path, grid: &Grid) -> Result<()> {
    let buf: Vec<u16> = grid
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        grid.width as u32,
        grid.height as u32,
        buf,
    )
    .ok_or_else(|| Error::ShapeMismatch("png buffer".into()))?;
    img.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads any image as luminance in `[0,1]`.
pub fn read_png(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    Grid::new(
        h as usize,
        w as usize,
        luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    )
}
