//! Helpers and independent reference implementations shared by the
//! integration tests and the acceptance suite. The oracles never call into
//! the code under test.

#![allow(dead_code)]

use std::collections::VecDeque;

use msmv_core::backbone::BackboneConfig;
use msmv_core::fusion::{FusionConfig, FusionStrategy};
use msmv_core::imaging::{ImagePlane, PreparedViews, Scale, View, ViewPlanes};
use msmv_core::model::{Model, StepExample};
use msmv_core::training::smoothed_target;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 28×28 input, embed 8, two stages, 16-wide features.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_side: 28,
        patch_size: 2,
        in_chans: 1,
        embed_dim: 8,
        depths: vec![2, 2],
        num_heads: vec![2, 4],
        window_size: 7,
        feature_dim: 16,
        mlp_ratio: 2.0,
        unfrozen_top_stages: 1,
    }
}

pub fn tiny_fusion(strategy: FusionStrategy) -> FusionConfig {
    FusionConfig {
        strategy,
        feature_dim: 16,
        mlp_width: 16,
        hidden: 8,
        dropout_rate: 0.0,
        ..Default::default()
    }
}

pub fn random_plane(r: &mut impl Rng, side: usize, view: View, scale: Scale) -> ImagePlane {
    let px = (0..side * side).map(|_| r.random::<f64>()).collect();
    ImagePlane::new(side, px, view, scale).unwrap()
}

pub fn random_views(r: &mut impl Rng, side: usize, cc: bool, mlo: bool) -> PreparedViews {
    let mut planes = |v| ViewPlanes {
        masked: random_plane(r, side, v, Scale::Masked),
        cropped: random_plane(r, side, v, Scale::Cropped),
    };
    PreparedViews {
        cc: cc.then(|| planes(View::Cc)),
        mlo: mlo.then(|| planes(View::Mlo)),
    }
}

pub fn random_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

// ---------------------------------------------------------------------------
// Segmentation

/// Otsu threshold by exhaustive search: for every candidate bin, split the
/// pixels directly and score the between-class variance of bin indices.
pub fn otsu_oracle(pixels: &[f64]) -> Option<usize> {
    let bins: Vec<usize> = pixels.iter().map(|&v| ((v * 256.0) as usize).min(255)).collect();
    let mut best: Option<(usize, f64)> = None;
    for t in 0..256 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo: Vec<f64> = bins.iter().filter(|&&b| b <= t).map(|&b| b as f64).collect();
            let hi: Vec<f64> = bins.iter().filter(|&&b| b > t).map(|&b| b as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let score = lo.len() as f64 * hi.len() as f64 * (m0 - m1).powi(2);
        if best.is_none_or(|(_, s)| score > s * (1.0 + 1e-12)) {
            best = Some((t, score));
        }
    }
    best.map(|(t, _)| t)
}

/// Largest 4-connected component by breadth-first flood fill (earliest in
/// raster order on ties).
pub fn largest_component_oracle(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut seen = vec![false; fg.len()];
    let mut best: Vec<usize> = vec![];
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = vec![];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut nb = vec![];
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut mask = vec![false; fg.len()];
    for i in best {
        mask[i] = true;
    }
    mask
}

/// Full classical segmentation recomputed from scratch; returns the mask and
/// its inclusive bounding box.
pub fn segment_oracle(pixels: &[f64], h: usize, w: usize) -> (Vec<bool>, (usize, usize, usize, usize)) {
    let t = otsu_oracle(pixels).expect("two classes");
    let fg: Vec<bool> = pixels.iter().map(|&v| ((v * 256.0) as usize).min(255) > t).collect();
    let mask = largest_component_oracle(&fg, h, w);
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (mask, (r0, c0, r1, c1))
}

// ---------------------------------------------------------------------------
// Fusion

pub fn max_oracle(slots: [&[f64]; 4]) -> Vec<f64> {
    (0..slots[0].len())
        .map(|i| {
            let mut m = slots[0][i];
            for s in &slots[1..] {
                if s[i] > m {
                    m = s[i];
                }
            }
            m
        })
        .collect()
}

/// Inference-mode conv fusion with explicit loops: zero-padded 3×3 conv over
/// the `4 × d` array, batch-norm with running statistics, ReLU, 2×2 max
/// pool, flattened channel-major.
#[allow(clippy::too_many_arguments)]
pub fn conv_fusion_oracle(
    stacked: &[f64],
    d: usize,
    weight: &[f64],
    bias: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (h, channels) = (4usize, bias.len());
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= d as isize {
            0.0
        } else {
            stacked[r as usize * d + c as usize]
        }
    };
    let mut out = vec![];
    for ch in 0..channels {
        let mut act = vec![0.0; h * d];
        for r in 0..h {
            for c in 0..d {
                let mut s = bias[ch];
                for kr in 0..3 {
                    for kc in 0..3 {
                        s += weight[ch * 9 + kr * 3 + kc] * at(r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                    }
                }
                let n = (s - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch];
                act[r * d + c] = n.max(0.0);
            }
        }
        for pr in 0..h / 2 {
            for pc in 0..d / 2 {
                let mut m = f64::NEG_INFINITY;
                for dr in 0..2 {
                    for dc in 0..2 {
                        m = m.max(act[(2 * pr + dr) * d + 2 * pc + dc]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Dense layer `x · W + b` with `W` laid out `[in, out]`.
pub fn dense_oracle(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW on a single scalar, written from the textbook recurrences.
pub struct ScalarAdamW {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Self {
        ScalarAdamW {
            lr,
            b1,
            b2,
            eps,
            wd,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mh = self.m / (1.0 - self.b1.powi(self.t));
        let vh = self.v / (1.0 - self.b2.powi(self.t));
        let decayed = theta - self.lr * self.wd * theta;
        decayed - self.lr * mh / (vh.sqrt() + self.eps)
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Probability that a random positive outscores a random negative, ties
/// counted half, by enumerating every pair.
pub fn auc_oracle(scores: &[(f64, u8)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(sp, yp) in scores {
        if yp != 1 {
            continue;
        }
        for &(sn, yn) in scores {
            if yn != 0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Relative error between analytic and numeric gradients of one tensor,
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Central difference of `f` at `x[i]` with step `h`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Per-tensor relative error of the model's analytic gradients against
/// central differences of the training loss, all stages unfrozen.
pub fn model_gradient_errors(strategy: FusionStrategy, coords: usize, seed: u64) -> Vec<(String, f64)> {
    let mut model = Model::new(tiny_backbone(), tiny_fusion(strategy), seed).unwrap();
    model.set_freezing(tiny_backbone().depths.len()).unwrap();
    let mut r = rng(seed);
    let exams = [random_views(&mut r, 28, true, true), random_views(&mut r, 28, false, true)];
    let targets = [smoothed_target(1, 0.1).unwrap(), smoothed_target(0, 0.1).unwrap()];
    let step = |m: &Model| {
        let acts: Vec<_> = exams.iter().map(|v| m.prefix_activations(v).unwrap()).collect();
        let batch: Vec<StepExample> = acts
            .iter()
            .zip(targets)
            .map(|(a, t)| StepExample {
                slots: std::array::from_fn(|s| a[s].as_deref()),
                target: t,
            })
            .collect();
        m.train_step(&batch, true, &mut rng(0)).unwrap()
    };
    let analytic = step(&model).grads;
    let mut out = vec![];
    for which in 0..3 {
        let (store, grads, tag) = match which {
            0 => (&model.seg.params, &analytic.seg, "seg"),
            1 => (&model.crop.params, &analytic.crop, "crop"),
            _ => (&model.head.params, &analytic.head, "head"),
        };
        for (k, p) in store.iter().enumerate() {
            let g = grads[k].clone().unwrap_or_else(|| vec![0.0; p.data.len()]);
            let mut idx: Vec<usize> = (0..p.data.len()).collect();
            idx.shuffle(&mut r);
            idx.truncate(coords);
            let mut a = vec![];
            let mut n = vec![];
            for &i in &idx {
                let mut data = p.data.clone();
                let num = central_difference(&mut data, i, 1e-5, |d| {
                    let mut m = model.clone();
                    let target = match which {
                        0 => &mut m.seg.params,
                        1 => &mut m.crop.params,
                        _ => &mut m.head.params,
                    };
                    target.iter_mut().nth(k).unwrap().data = d.to_vec();
                    step(&m).loss
                });
                a.push(g[i]);
                n.push(num);
            }
            out.push((format!("{tag}.{}", p.name), relative_error(&a, &n, 1e-6)));
        }
    }
    out
}
