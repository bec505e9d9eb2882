//! The full classifier: two backbones (segmented and cropped scale) feeding
//! a fusion head.

use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{FeatureBundle, FusionConfig, FusionHead, SLOTS};
use crate::graph::{BatchStats, Tape, Var};
use crate::imaging::{ImagePlane, PreparedViews, Scale, View};
use crate::params::{Binder, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// Processes the segmented (masked) planes.
    pub seg: Backbone,
    /// Processes the ROI-cropped planes.
    pub crop: Backbone,
    pub head: FusionHead,
}

/// Gradients aligned with each store's insertion order; `None` for arrays
/// that received no gradient (frozen or unreached).
#[derive(Clone, Debug, Default)]
pub struct ModelGrads {
    pub seg: Vec<Option<Vec<f64>>>,
    pub crop: Vec<Option<Vec<f64>>>,
    pub head: Vec<Option<Vec<f64>>>,
}

impl ModelGrads {
    fn for_model(m: &Model) -> Self {
        ModelGrads {
            seg: vec![None; m.seg.params.len()],
            crop: vec![None; m.crop.params.len()],
            head: vec![None; m.head.params.len()],
        }
    }
}

/// One training example: per-slot activations at each backbone's frozen
/// prefix (`None` for absent views) and the (smoothed) target.
#[derive(Clone, Debug)]
pub struct StepExample<'e> {
    pub slots: [Option<&'e [f64]>; SLOTS],
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: ModelGrads,
    pub bn_stats: Option<BatchStats>,
}

fn accumulate(dst: &mut [Option<Vec<f64>>], store: &ParamStore, binder: &Binder<'_>, tape_grads: &mut crate::graph::Gradients) {
    for (name, var) in binder.bound() {
        let Some(g) = tape_grads.take(var) else { continue };
        let i = store.position(name).expect("bound parameter belongs to the store");
        match &mut dst[i] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn slot_scale(slot: usize) -> Scale {
    if slot < 2 {
        Scale::Masked
    } else {
        Scale::Cropped
    }
}

pub fn slot_view(slot: usize) -> View {
    if slot % 2 == 0 {
        View::Cc
    } else {
        View::Mlo
    }
}

/// The plane of `views` that feeds `slot`, if present.
pub fn slot_plane(views: &PreparedViews, slot: usize) -> Option<&ImagePlane> {
    views.get(slot_view(slot)).map(|p| match slot_scale(slot) {
        Scale::Masked => &p.masked,
        Scale::Cropped => &p.cropped,
    })
}

impl Model {
    /// Backbones are seeded `seed` and `seed + 1`, the head `seed + 2`.
    pub fn new(backbone: BackboneConfig, fusion: FusionConfig, seed: u64) -> Result<Self> {
        if backbone.feature_dim != fusion.feature_dim {
            return Err(Error::ConfigMismatch(format!(
                "backbone feature_dim {} but fusion expects {}",
                backbone.feature_dim, fusion.feature_dim
            )));
        }
        Ok(Model {
            seg: Backbone::new(backbone.clone(), seed)?,
            crop: Backbone::new(backbone, seed.wrapping_add(1))?,
            head: FusionHead::new(fusion, seed.wrapping_add(2))?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.config.feature_dim
    }

    pub fn backbone(&self, scale: Scale) -> &Backbone {
        match scale {
            Scale::Masked => &self.seg,
            Scale::Cropped => &self.crop,
        }
    }

    pub fn set_freezing(&mut self, unfrozen_top_stages: usize) -> Result<()> {
        self.seg.set_freezing(unfrozen_top_stages)?;
        self.crop.set_freezing(unfrozen_top_stages)
    }

    /// Frozen leading groups of the (segmented, cropped) backbones.
    pub fn prefix_lens(&self) -> [usize; 2] {
        [self.seg.frozen_prefix_len(), self.crop.frozen_prefix_len()]
    }

    fn prefix_for_slot(&self, slot: usize) -> usize {
        self.prefix_lens()[(slot >= 2) as usize]
    }

    /// Per-slot activations after each backbone's frozen prefix.
    pub fn prefix_activations(&self, views: &PreparedViews) -> Result<[Option<Vec<f64>>; SLOTS]> {
        let mut out = [None, None, None, None];
        for (slot, o) in out.iter_mut().enumerate() {
            if let Some(plane) = slot_plane(views, slot) {
                let bb = self.backbone(slot_scale(slot));
                *o = Some(bb.prefix_activation(plane, self.prefix_for_slot(slot))?);
            }
        }
        Ok(out)
    }

    pub fn bundle(&self, views: &PreparedViews) -> Result<FeatureBundle> {
        let feats = |view: View| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
            views
                .get(view)
                .map(|p| Ok((self.seg.extract_features(&p.masked)?, self.crop.extract_features(&p.cropped)?)))
                .transpose()
        };
        FeatureBundle::new(self.feature_dim(), feats(View::Cc)?, feats(View::Mlo)?)
    }

    /// Inference logit from a bundle (dropout off, running batch-norm statistics).
    pub fn logit_from_bundle(&self, bundle: &FeatureBundle) -> Result<f64> {
        if bundle.dim() != self.feature_dim() {
            return Err(Error::DimMismatch {
                expected: self.feature_dim(),
                got: bundle.dim(),
            });
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.head.params, false);
        let x = tape.constant(bundle.stacked(), &[1, 1, SLOTS, bundle.dim()]);
        let (fused, _) = self.head.fuse(&mut tape, &mut p, x, 1, false);
        let out = self.head.mlp(&mut tape, &mut p, fused, 1, false, &mut rand::rng());
        Ok(tape.value(out)[0])
    }

    /// Inference logit for one exam.
    pub fn logit(&self, views: &PreparedViews) -> Result<f64> {
        self.logit_from_bundle(&self.bundle(views)?)
    }

    /// Inference logits for many exams, spread over `workers` threads.
    pub fn logits(&self, exams: &[&PreparedViews], workers: usize) -> Result<Vec<f64>> {
        if workers <= 1 {
            return exams.iter().map(|v| self.logit(v)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| exams.par_iter().map(|v| self.logit(v)).collect())
    }

    /// Runs one backbone's trainable suffix for a single plane.
    fn suffix<'a>(&'a self, slot: usize, act: &[f64], track: bool) -> Result<(Tape<'a>, Binder<'a>, Var)> {
        let bb = self.backbone(slot_scale(slot));
        let from = self.prefix_for_slot(slot);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&bb.params, track);
        let x = tape.constant(act.to_vec(), &bb.activation_shape(from));
        let out = bb.forward_from(&mut tape, &mut binder, x, from)?;
        Ok((tape, binder, out))
    }

    /// Inference logit from per-slot prefix activations.
    pub fn logit_from_prefix(&self, acts: &[Option<Vec<f64>>; SLOTS]) -> Result<f64> {
        if acts.iter().all(Option::is_none) {
            return Err(Error::NoViews);
        }
        let d = self.feature_dim();
        let mut stacked = vec![0.0; SLOTS * d];
        for (slot, act) in acts.iter().enumerate() {
            if let Some(act) = act {
                let (tape, _, out) = self.suffix(slot, act, false)?;
                stacked[slot * d..(slot + 1) * d].copy_from_slice(tape.value(out));
            }
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.head.params, false);
        let x = tape.constant(stacked, &[1, 1, SLOTS, d]);
        let (fused, _) = self.head.fuse(&mut tape, &mut p, x, 1, false);
        let out = self.head.mlp(&mut tape, &mut p, fused, 1, false, &mut rand::rng());
        Ok(tape.value(out)[0])
    }

    /// Forward and backward pass of one mini-batch under mean binary
    /// cross-entropy. Dropout and batch-norm run in training mode. Backbone
    /// suffix tapes are kept between the passes when `keep_tapes`, otherwise
    /// they are recomputed to bound memory.
    pub fn train_step<R: Rng>(&self, batch: &[StepExample<'_>], keep_tapes: bool, rng: &mut R) -> Result<StepOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.feature_dim();
        let n = batch.len();
        let mut feats = vec![0.0; n * SLOTS * d];
        let mut kept: Vec<Option<(Tape<'_>, Binder<'_>, Var)>> = Vec::new();
        for (b, ex) in batch.iter().enumerate() {
            if ex.slots.iter().all(Option::is_none) {
                return Err(Error::NoViews);
            }
            for (slot, act) in ex.slots.iter().enumerate() {
                let Some(act) = act else {
                    kept.push(None);
                    continue;
                };
                let (tape, binder, out) = self.suffix(slot, act, keep_tapes)?;
                let off = (b * SLOTS + slot) * d;
                feats[off..off + d].copy_from_slice(tape.value(out));
                kept.push(keep_tapes.then_some((tape, binder, out)));
            }
        }

        let mut grads = ModelGrads::for_model(self);
        let mut tape = Tape::new();
        let mut hp = Binder::new(&self.head.params, true);
        let f = tape.leaf(feats, &[n, 1, SLOTS, d], true);
        let (fused, bn_stats) = self.head.fuse(&mut tape, &mut hp, f, n, true);
        let logits = self.head.mlp(&mut tape, &mut hp, fused, n, true, rng);
        let loss = tape.bce_mean(logits, batch.iter().map(|e| e.target).collect());
        let mut hg = tape.backward(loss);
        accumulate(&mut grads.head, &self.head.params, &hp, &mut hg);
        let dfeats = hg.take(f).unwrap_or_else(|| vec![0.0; n * SLOTS * d]);

        let mut kept = kept.into_iter();
        for (b, ex) in batch.iter().enumerate() {
            for (slot, act) in ex.slots.iter().enumerate() {
                let entry = kept.next().flatten();
                let Some(act) = act else { continue };
                let off = (b * SLOTS + slot) * d;
                let seed = dfeats[off..off + d].to_vec();
                let (ptape, binder, out) = match entry {
                    Some(t) => t,
                    None => self.suffix(slot, act, true)?,
                };
                let mut pg = ptape.backward_with(out, seed);
                let (dst, store) = match slot_scale(slot) {
                    Scale::Masked => (&mut grads.seg, &self.seg.params),
                    Scale::Cropped => (&mut grads.crop, &self.crop.params),
                };
                accumulate(dst, store, &binder, &mut pg);
            }
        }
        Ok(StepOutput {
            loss: tape.scalar(loss),
            logits: tape.value(logits).to_vec(),
            grads,
            bn_stats,
        })
    }
}
