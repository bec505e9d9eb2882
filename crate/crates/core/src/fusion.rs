//! Zero-padded four-slot feature bundles, the two fusion strategies and the
//! MLP classification head.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::linear;
use crate::error::{Error, Result};
use crate::graph::{maxpool2x2_index, BatchStats, ConvGeom, NormMode, Tape, Var};
use crate::imaging::View;
use crate::params::{add_linear, uniform_fan_in, Binder, ParamStore};

/// Slot order of a bundle: segmented CC, segmented MLO, cropped CC, cropped MLO.
pub const SLOTS: usize = 4;

pub fn slot_index(scale_masked: bool, view: View) -> usize {
    match (scale_masked, view) {
        (true, View::Cc) => 0,
        (true, View::Mlo) => 1,
        (false, View::Cc) => 2,
        (false, View::Mlo) => 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub f_seg_cc: Vec<f64>,
    pub f_seg_mlo: Vec<f64>,
    pub f_crop_cc: Vec<f64>,
    pub f_crop_mlo: Vec<f64>,
    pub present_cc: bool,
    pub present_mlo: bool,
}

impl FeatureBundle {
    /// Builds a bundle, zeroing both vectors of every absent view.
    pub fn new(dim: usize, cc: Option<(Vec<f64>, Vec<f64>)>, mlo: Option<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if cc.is_none() && mlo.is_none() {
            return Err(Error::NoViews);
        }
        let (present_cc, present_mlo) = (cc.is_some(), mlo.is_some());
        let (f_seg_cc, f_crop_cc) = cc.unwrap_or_else(|| (vec![0.0; dim], vec![0.0; dim]));
        let (f_seg_mlo, f_crop_mlo) = mlo.unwrap_or_else(|| (vec![0.0; dim], vec![0.0; dim]));
        for v in [&f_seg_cc, &f_seg_mlo, &f_crop_cc, &f_crop_mlo] {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(FeatureBundle {
            f_seg_cc,
            f_seg_mlo,
            f_crop_cc,
            f_crop_mlo,
            present_cc,
            present_mlo,
        })
    }

    pub fn dim(&self) -> usize {
        self.f_seg_cc.len()
    }

    pub fn present(&self, view: View) -> bool {
        match view {
            View::Cc => self.present_cc,
            View::Mlo => self.present_mlo,
        }
    }

    pub fn slots(&self) -> [&[f64]; SLOTS] {
        [&self.f_seg_cc, &self.f_seg_mlo, &self.f_crop_cc, &self.f_crop_mlo]
    }

    /// Row-major `[4, D]` stack in slot order.
    pub fn stacked(&self) -> Vec<f64> {
        self.slots().concat()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[default]
    MaxPool,
    Conv,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::MaxPool => "maxpool",
            FusionStrategy::Conv => "conv",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "maxpool" | "max" => Ok(FusionStrategy::MaxPool),
            "conv" | "convolution" => Ok(FusionStrategy::Conv),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub feature_dim: usize,
    /// Width the fused vector is brought to before the hidden layer.
    pub mlp_width: usize,
    pub hidden: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub conv_out_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_PADDING: usize = 1;

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::MaxPool,
            feature_dim: 1024,
            mlp_width: 1024,
            hidden: 512,
            dropout_rate: 0.3,
            leaky_slope: 0.01,
            conv_out_channels: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl FusionConfig {
    /// Length of the fused vector fed to the MLP.
    pub fn fused_len(&self) -> usize {
        match self.strategy {
            FusionStrategy::MaxPool => self.feature_dim,
            FusionStrategy::Conv => (SLOTS / 2) * (self.feature_dim / 2) * self.conv_out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.feature_dim == 0 || self.mlp_width == 0 || self.hidden == 0 {
            return bad("fusion dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        if self.strategy == FusionStrategy::Conv {
            if self.feature_dim % 2 != 0 {
                return bad(format!("conv fusion needs an even feature_dim, got {}", self.feature_dim));
            }
            if self.conv_out_channels == 0 {
                return bad("conv_out_channels must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("invalid batch-norm momentum/eps".into());
        }
        Ok(())
    }
}

/// Fusion parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub params: ParamStore,
    /// Non-trainable state: `bn.running_mean`, `bn.running_var`.
    pub buffers: ParamStore,
}

impl FusionHead {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        if config.strategy == FusionStrategy::Conv {
            let c = config.conv_out_channels;
            let fan_in = CONV_KERNEL * CONV_KERNEL;
            params.insert("conv.weight", &[c, 1, CONV_KERNEL, CONV_KERNEL], uniform_fan_in(&mut rng, fan_in, c * fan_in));
            params.insert("conv.bias", &[c], uniform_fan_in(&mut rng, fan_in, c));
            params.insert("bn.weight", &[c], vec![1.0; c]);
            params.insert("bn.bias", &[c], vec![0.0; c]);
            buffers.insert("bn.running_mean", &[c], vec![0.0; c]);
            buffers.insert("bn.running_var", &[c], vec![1.0; c]);
            for b in buffers.iter_mut() {
                b.frozen = true;
            }
        }
        let fused = config.fused_len();
        if fused != config.mlp_width {
            add_linear(&mut params, &mut rng, "mlp.input", fused, config.mlp_width, true);
        }
        add_linear(&mut params, &mut rng, "mlp.fc1", config.mlp_width, config.hidden, true);
        add_linear(&mut params, &mut rng, "mlp.fc2", config.hidden, 1, true);
        Ok(FusionHead {
            config,
            params,
            buffers,
        })
    }

    pub fn fused_len(&self) -> usize {
        self.config.fused_len()
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for (name, batch) in [("bn.running_mean", &stats.mean), ("bn.running_var", &stats.var_unbiased)] {
            if let Some(buf) = self.buffers.get_mut(name) {
                for (r, b) in buf.data.iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    /// Fuses `[batch, 4, D]` features into `[batch, fused_len]`.
    pub fn fuse<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        p: &mut Binder<'a>,
        feats: Var,
        batch: usize,
        training: bool,
    ) -> (Var, Option<BatchStats>) {
        let d = self.config.feature_dim;
        assert_eq!(tape.value(feats).len(), batch * SLOTS * d, "bundle batch size");
        match self.config.strategy {
            FusionStrategy::MaxPool => {
                let index = slot_max_index(tape.value(feats), batch, d);
                (tape.gather(feats, Rc::new(index), &[batch, d]), None)
            }
            FusionStrategy::Conv => {
                let c = self.config.conv_out_channels;
                let geom = ConvGeom {
                    batch,
                    cin: 1,
                    cout: c,
                    h: SLOTS,
                    w: d,
                    kernel: CONV_KERNEL,
                    pad: CONV_PADDING,
                };
                let w = p.var(tape, "conv.weight");
                let b = p.var(tape, "conv.bias");
                let y = tape.conv2d(feats, w, b, geom);
                let gamma = p.var(tape, "bn.weight");
                let beta = p.var(tape, "bn.bias");
                let eps = self.config.bn_eps;
                let mode = if training {
                    NormMode::Train { eps }
                } else {
                    NormMode::Infer {
                        running_mean: self.buffers.data("bn.running_mean"),
                        running_var: self.buffers.data("bn.running_var"),
                        eps,
                    }
                };
                let (y, stats) = tape.batch_norm(y, gamma, beta, batch, c, mode);
                let y = tape.relu(y);
                let index = maxpool2x2_index(tape.value(y), batch * c, SLOTS, d);
                let pooled = tape.gather(y, Rc::new(index), &[batch, c * (SLOTS / 2) * (d / 2)]);
                (pooled, stats)
            }
        }
    }

    /// MLP over `[batch, fused_len]`, returning `[batch]` raw logits.
    pub fn mlp<'a, R: Rng>(
        &'a self,
        tape: &mut Tape<'a>,
        p: &mut Binder<'a>,
        x: Var,
        batch: usize,
        training: bool,
        rng: &mut R,
    ) -> Var {
        let cfg = &self.config;
        let slope = cfg.leaky_slope;
        let mut x = tape.reshape(x, &[batch, cfg.fused_len()]);
        if cfg.fused_len() != cfg.mlp_width {
            let (w, b) = (p.var(tape, "mlp.input.weight"), p.var(tape, "mlp.input.bias"));
            x = linear(tape, x, w, Some(b));
            x = tape.leaky_relu(x, slope);
        }
        let (w, b) = (p.var(tape, "mlp.fc1.weight"), p.var(tape, "mlp.fc1.bias"));
        let h = linear(tape, x, w, Some(b));
        let mut h = tape.leaky_relu(h, slope);
        if training && cfg.dropout_rate > 0.0 {
            let keep = 1.0 - cfg.dropout_rate;
            let mask: Vec<f64> = (0..batch * cfg.hidden)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            h = tape.mul_const(h, Rc::new(mask));
        }
        let (w, b) = (p.var(tape, "mlp.fc2.weight"), p.var(tape, "mlp.fc2.bias"));
        let out = linear(tape, h, w, Some(b));
        tape.reshape(out, &[batch])
    }
}

/// For each `(batch, i)`, the flat index of the largest of the four slots
/// (first slot on ties).
pub fn slot_max_index(values: &[f64], batch: usize, d: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(batch * d);
    for b in 0..batch {
        let base = b * SLOTS * d;
        for i in 0..d {
            let mut best = base + i;
            for s in 1..SLOTS {
                let j = base + s * d + i;
                if values[j] > values[best] {
                    best = j;
                }
            }
            index.push(best);
        }
    }
    index
}

/// Elementwise maximum over the four slots.
pub fn fuse_maxpool(bundle: &FeatureBundle) -> Vec<f64> {
    let [a, b, c, d] = bundle.slots();
    (0..bundle.dim())
        .map(|i| a[i].max(b[i]).max(c[i]).max(d[i]))
        .collect()
}

/// Convolution fusion of one bundle in inference mode.
pub fn fuse_conv(bundle: &FeatureBundle, head: &FusionHead) -> Result<Vec<f64>> {
    if head.config.strategy != FusionStrategy::Conv {
        return Err(Error::ConfigMismatch("head is not configured for conv fusion".into()));
    }
    if bundle.dim() != head.config.feature_dim {
        return Err(Error::DimMismatch {
            expected: head.config.feature_dim,
            got: bundle.dim(),
        });
    }
    let mut tape = Tape::new();
    let mut p = Binder::new(&head.params, false);
    let x = tape.constant(bundle.stacked(), &[1, 1, SLOTS, bundle.dim()]);
    let (y, _) = head.fuse(&mut tape, &mut p, x, 1, false);
    Ok(tape.value(y).to_vec())
}

/// Classifies an already fused vector; dropout is active only when `training`.
pub fn mlp_head<R: Rng>(fused: &[f64], head: &FusionHead, training: bool, rng: &mut R) -> Result<f64> {
    if fused.len() != head.fused_len() {
        return Err(Error::DimMismatch {
            expected: head.fused_len(),
            got: fused.len(),
        });
    }
    let mut tape = Tape::new();
    let mut p = Binder::new(&head.params, false);
    let x = tape.constant(fused.to_vec(), &[1, fused.len()]);
    let out = head.mlp(&mut tape, &mut p, x, 1, training, rng);
    Ok(tape.value(out)[0])
}
