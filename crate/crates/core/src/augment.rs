//! The six geometric variants each exam is expanded into.
//!
//! All transforms are exact index permutations of a square plane. `Rot90`
//! maps `out[r][c] = in[n-1-c][r]`: a quarter turn counter-clockwise when
//! row indices grow upward (clockwise as displayed with row 0 on top).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::dataset::BreastExam;
use crate::imaging::{ImagePlane, PreparedViews, ViewPlanes};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentOp {
    #[default]
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl AugmentOp {
    /// Identity first, so variant 0 of every expansion is the original.
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::Identity,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
        AugmentOp::FlipH,
        AugmentOp::FlipV,
    ];

    /// Source pixel `(row, col)` for output pixel `(r, c)` in an `n`×`n` plane.
    #[inline]
    pub fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        match self {
            AugmentOp::Identity => (r, c),
            AugmentOp::Rot90 => (n - 1 - c, r),
            AugmentOp::Rot180 => (n - 1 - r, n - 1 - c),
            AugmentOp::Rot270 => (c, n - 1 - r),
            AugmentOp::FlipH => (r, n - 1 - c),
            AugmentOp::FlipV => (n - 1 - r, c),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentOp::Identity => "id",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
            AugmentOp::FlipH => "fliph",
            AugmentOp::FlipV => "flipv",
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown augmentation `{s}`")))
    }
}

pub fn permute_square(pixels: &[f64], side: usize, op: AugmentOp) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = op.source(r, c, side);
            out.push(pixels[sr * side + sc]);
        }
    }
    out
}

pub fn apply_augment(plane: &ImagePlane, op: AugmentOp) -> Result<ImagePlane> {
    if plane.pixels.len() != plane.side * plane.side {
        let rows = plane.pixels.len() / plane.side.max(1);
        return Err(Error::NonSquareInput(rows, plane.side));
    }
    Ok(ImagePlane {
        side: plane.side,
        pixels: permute_square(&plane.pixels, plane.side, op),
        view: plane.view,
        scale: plane.scale,
        augment: op,
    })
}

/// Expands an exam into its six variants (identity first). Every present
/// plane of a variant gets the same transform; absence is preserved.
pub fn augment_exam(exam: &BreastExam) -> Result<Vec<BreastExam>> {
    AugmentOp::ALL
        .iter()
        .map(|&op| {
            let mut views = PreparedViews::default();
            for v in crate::imaging::View::ALL {
                if let Some(p) = exam.views.get(v) {
                    views.set(
                        v,
                        Some(ViewPlanes {
                            masked: apply_augment(&p.masked, op)?,
                            cropped: apply_augment(&p.cropped, op)?,
                        }),
                    );
                }
            }
            Ok(BreastExam {
                views,
                augment: op,
                ..exam.clone()
            })
        })
        .collect()
}
