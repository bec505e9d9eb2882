//! Hierarchical shifted-window transformer feature extractor.
//!
//! Layout: patch embedding, then `depths.len()` stages of alternating
//! regular / shifted window-attention blocks, each stage but the last ending
//! in a 2×2 patch merge. The last stage ends in a layer norm; tokens are
//! average-pooled and projected to `feature_dim`.
//!
//! Parameters are grouped for freezing: `patch_embed.*`, `stage{s}.*` and
//! `head.*`. A leading run of fully frozen groups can be evaluated once
//! (see [`Backbone::prefix_activation`]) and fed back via
//! [`Backbone::forward_from`].

pub mod config;
pub mod window;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::BackboneConfig;
use window::{partition_index, relative_position_index, reverse_index, shift_mask};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::imaging::ImagePlane;
use crate::params::{add_linear, add_norm, Binder, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

/// Geometry of one window-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    /// Spatial side of the (square) token map.
    pub side: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl AttnGeom {
    fn num_windows(&self) -> usize {
        (self.side / self.window) * (self.side / self.window)
    }
}

pub fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = tape.matmul(x, w);
    match b {
        Some(b) => tape.add_broadcast(y, b),
        None => y,
    }
}

fn bound_linear<'a>(tape: &mut Tape<'a>, p: &mut Binder<'a>, prefix: &str, x: Var, bias: bool) -> Var {
    let w = p.var(tape, &format!("{prefix}.weight"));
    let b = bias.then(|| p.var(tape, &format!("{prefix}.bias")));
    linear(tape, x, w, b)
}

fn bound_norm<'a>(tape: &mut Tape<'a>, p: &mut Binder<'a>, prefix: &str, x: Var) -> Var {
    let g = p.var(tape, &format!("{prefix}.weight"));
    let b = p.var(tape, &format!("{prefix}.bias"));
    tape.layer_norm(x, g, b, NORM_EPS)
}

/// Multi-head self-attention restricted to (optionally cyclically shifted)
/// windows of a `[side*side, dim]` token map. Parameters under `prefix`:
/// `qkv`, `proj` and `relative_position_bias_table`.
///
/// Returns the output map (same shape, shift undone) and the attention
/// probabilities laid out `[num_windows, heads, n, n]`.
pub fn shifted_window_attention<'a>(
    tape: &mut Tape<'a>,
    p: &mut Binder<'a>,
    prefix: &str,
    x: Var,
    g: AttnGeom,
) -> Result<(Var, Var)> {
    window::validate_shift(g.window, g.shift)?;
    if g.side % g.window != 0 {
        return Err(Error::IndivisibleShape {
            h: g.side,
            w: g.side,
            window: g.window,
        });
    }
    if g.dim % g.heads != 0 {
        return Err(Error::InvalidConfig(format!("{} channels over {} heads", g.dim, g.heads)));
    }
    let (c, heads, n) = (g.dim, g.heads, g.window * g.window);
    let hd = c / heads;
    let nw = g.num_windows();
    let tokens = nw * n;
    assert_eq!(tape.value(x).len(), tokens * c, "attention input size");

    let part = Rc::new(partition_index(g.side, g.side, c, g.window, g.shift));
    let xw = tape.gather(x, part, &[tokens, c]);
    let qkv = bound_linear(tape, p, &format!("{prefix}.qkv"), xw, true);

    let split = |which: usize| -> Rc<Vec<usize>> {
        let mut idx = Vec::with_capacity(tokens * c);
        for wi in 0..nw {
            for hh in 0..heads {
                for t in 0..n {
                    let base = (wi * n + t) * 3 * c + which * c + hh * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        Rc::new(idx)
    };
    let q = tape.gather(qkv, split(0), &[nw * heads, n, hd]);
    let k = tape.gather(qkv, split(1), &[nw * heads, n, hd]);
    let v = tape.gather(qkv, split(2), &[nw * heads, n, hd]);
    let q = tape.scale(q, (hd as f64).powf(-0.5));
    let logits = tape.bmm(q, k, nw * heads, n, hd, n, false, true);

    let table = p.var(tape, &format!("{prefix}.relative_position_bias_table"));
    let rel = relative_position_index(g.window);
    let mut bias_idx = Vec::with_capacity(heads * n * n);
    for hh in 0..heads {
        bias_idx.extend(rel.iter().map(|&r| r * heads + hh));
    }
    let bias = tape.gather(table, Rc::new(bias_idx), &[heads, n, n]);
    let mut logits = tape.add_broadcast(logits, bias);
    if g.shift > 0 {
        let mask = shift_mask(g.side, g.side, g.window, g.shift);
        let mut full = Vec::with_capacity(nw * heads * n * n);
        for win in mask.chunks(n * n) {
            for _ in 0..heads {
                full.extend_from_slice(win);
            }
        }
        logits = tape.add_const(logits, &full);
    }
    let attn = tape.softmax_rows(logits, n);
    let ctx = tape.bmm(attn, v, nw * heads, n, n, hd, false, false);

    let mut merge = Vec::with_capacity(tokens * c);
    for wi in 0..nw {
        for t in 0..n {
            for hh in 0..heads {
                let base = ((wi * heads + hh) * n + t) * hd;
                merge.extend(base..base + hd);
            }
        }
    }
    let ctx = tape.gather(ctx, Rc::new(merge), &[tokens, c]);
    let out = bound_linear(tape, p, &format!("{prefix}.proj"), ctx, true);
    let rev = Rc::new(reverse_index(g.side, g.side, c, g.window, g.shift));
    let out = tape.gather(out, rev, &[tokens, c]);
    Ok((out, attn))
}

/// Concatenates each 2×2 neighbourhood of a `[side*side, dim]` map, normalizes
/// and reduces `4·dim → 2·dim` (`{prefix}.norm`, `{prefix}.reduction`).
pub fn patch_merge<'a>(
    tape: &mut Tape<'a>,
    p: &mut Binder<'a>,
    prefix: &str,
    x: Var,
    h: usize,
    w: usize,
    dim: usize,
) -> Result<Var> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddShape(h, w));
    }
    assert_eq!(tape.value(x).len(), h * w * dim, "patch merge input size");
    let mut idx = Vec::with_capacity(h * w * dim);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let base = ((2 * i + dr) * w + 2 * j + dc) * dim;
                idx.extend(base..base + dim);
            }
        }
    }
    let cat = tape.gather(x, Rc::new(idx), &[(h / 2) * (w / 2), 4 * dim]);
    let normed = bound_norm(tape, p, &format!("{prefix}.norm"), cat);
    Ok(bound_linear(tape, p, &format!("{prefix}.reduction"), normed, false))
}

fn swin_block<'a>(tape: &mut Tape<'a>, p: &mut Binder<'a>, prefix: &str, x: Var, g: AttnGeom) -> Result<Var> {
    let h = bound_norm(tape, p, &format!("{prefix}.norm1"), x);
    let (attn, _) = shifted_window_attention(tape, p, &format!("{prefix}.attn"), h, g)?;
    let x = tape.add(x, attn);
    let h = bound_norm(tape, p, &format!("{prefix}.norm2"), x);
    let h = bound_linear(tape, p, &format!("{prefix}.mlp.fc1"), h, true);
    let h = tape.gelu(h);
    let h = bound_linear(tape, p, &format!("{prefix}.mlp.fc2"), h, true);
    Ok(tape.add(x, h))
}

/// One feature-extractor instance: configuration plus its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let patch_in = config.patch_size * config.patch_size * config.in_chans;
        add_linear(&mut ps, &mut rng, "patch_embed.proj", patch_in, config.embed_dim, true);
        add_norm(&mut ps, "patch_embed.norm", config.embed_dim);
        let span = 2 * config.window_size - 1;
        for s in 0..config.num_stages() {
            let (_, dim) = config.stage_geometry(s);
            let hidden = config.mlp_hidden(dim);
            for b in 0..config.depths[s] {
                let pre = format!("stage{s}.block{b}");
                add_norm(&mut ps, &format!("{pre}.norm1"), dim);
                add_linear(&mut ps, &mut rng, &format!("{pre}.attn.qkv"), dim, 3 * dim, true);
                ps.insert(
                    format!("{pre}.attn.relative_position_bias_table"),
                    &[span * span, config.num_heads[s]],
                    vec![0.0; span * span * config.num_heads[s]],
                );
                add_linear(&mut ps, &mut rng, &format!("{pre}.attn.proj"), dim, dim, true);
                add_norm(&mut ps, &format!("{pre}.norm2"), dim);
                add_linear(&mut ps, &mut rng, &format!("{pre}.mlp.fc1"), dim, hidden, true);
                add_linear(&mut ps, &mut rng, &format!("{pre}.mlp.fc2"), hidden, dim, true);
            }
            if s + 1 < config.num_stages() {
                add_norm(&mut ps, &format!("stage{s}.merge.norm"), 4 * dim);
                add_linear(&mut ps, &mut rng, &format!("stage{s}.merge.reduction"), 4 * dim, 2 * dim, false);
            } else {
                add_norm(&mut ps, &format!("stage{s}.norm"), dim);
            }
        }
        add_linear(&mut ps, &mut rng, "head.proj", config.final_dim(), config.feature_dim, true);
        let mut bb = Backbone { config, params: ps };
        let unfrozen = bb.config.unfrozen_top_stages;
        bb.set_freezing(unfrozen)?;
        Ok(bb)
    }

    pub fn num_stages(&self) -> usize {
        self.config.num_stages()
    }

    /// Groups in execution order: patch embed, each stage, head.
    pub fn num_groups(&self) -> usize {
        self.num_stages() + 2
    }

    pub fn group_of(&self, name: &str) -> usize {
        if name.starts_with("patch_embed.") {
            0
        } else if let Some(rest) = name.strip_prefix("stage") {
            let s: usize = rest
                .split('.')
                .next()
                .and_then(|d| d.parse().ok())
                .unwrap_or_else(|| panic!("bad parameter name {name}"));
            1 + s
        } else {
            self.num_stages() + 1
        }
    }

    /// Makes the last `unfrozen_top_stages` stages plus the output projection
    /// trainable and freezes everything else. When every stage is unfrozen
    /// the patch embedding is trainable too.
    pub fn set_freezing(&mut self, unfrozen_top_stages: usize) -> Result<()> {
        let stages = self.num_stages();
        if unfrozen_top_stages > stages {
            return Err(Error::InvalidConfig(format!(
                "unfrozen_top_stages {unfrozen_top_stages} exceeds {stages} stages"
            )));
        }
        let first_trainable = if unfrozen_top_stages == stages {
            0
        } else {
            1 + stages - unfrozen_top_stages
        };
        let groups: Vec<usize> = self.params.names().map(|n| self.group_of(n)).collect();
        for (p, g) in self.params.iter_mut().zip(groups) {
            p.frozen = g < first_trainable;
        }
        self.config.unfrozen_top_stages = unfrozen_top_stages;
        Ok(())
    }

    /// Number of leading groups whose parameters are all frozen.
    pub fn frozen_prefix_len(&self) -> usize {
        let mut all_frozen = vec![true; self.num_groups()];
        for p in self.params.iter() {
            if !p.frozen {
                all_frozen[self.group_of(&p.name)] = false;
            }
        }
        all_frozen.iter().take_while(|f| **f).count()
    }

    fn check_plane(&self, plane: &ImagePlane) -> Result<()> {
        if plane.side != self.config.input_side || plane.pixels.len() != plane.side * plane.side {
            return Err(Error::ConfigMismatch(format!(
                "plane side {} but backbone expects {}",
                plane.side, self.config.input_side
            )));
        }
        Ok(())
    }

    fn embed<'a>(&self, tape: &mut Tape<'a>, p: &mut Binder<'a>, image: Var) -> Var {
        let cfg = &self.config;
        let (side, patch, chans) = (cfg.input_side, cfg.patch_size, cfg.in_chans);
        let tps = cfg.tokens_per_side();
        let mut idx = Vec::with_capacity(side * side * chans);
        for ti in 0..tps {
            for tj in 0..tps {
                for _ in 0..chans {
                    for py in 0..patch {
                        let base = (ti * patch + py) * side + tj * patch;
                        idx.extend(base..base + patch);
                    }
                }
            }
        }
        let cols = tape.gather(image, Rc::new(idx), &[tps * tps, patch * patch * chans]);
        let x = bound_linear(tape, p, "patch_embed.proj", cols, true);
        bound_norm(tape, p, "patch_embed.norm", x)
    }

    fn stage<'a>(&self, tape: &mut Tape<'a>, p: &mut Binder<'a>, s: usize, mut x: Var) -> Result<Var> {
        let cfg = &self.config;
        let (side, dim) = cfg.stage_geometry(s);
        let window = cfg.window_size.min(side);
        for b in 0..cfg.depths[s] {
            let shift = if b % 2 == 1 && side > window { window / 2 } else { 0 };
            let g = AttnGeom {
                side,
                dim,
                heads: cfg.num_heads[s],
                window,
                shift,
            };
            x = swin_block(tape, p, &format!("stage{s}.block{b}"), x, g)?;
        }
        if s + 1 < cfg.num_stages() {
            patch_merge(tape, p, &format!("stage{s}.merge"), x, side, side, dim)
        } else {
            Ok(bound_norm(tape, p, &format!("stage{s}.norm"), x))
        }
    }

    fn head<'a>(&self, tape: &mut Tape<'a>, p: &mut Binder<'a>, tokens: Var) -> Var {
        let pooled = tape.mean_rows(tokens, self.config.final_dim());
        let pooled = tape.reshape(pooled, &[1, self.config.final_dim()]);
        bound_linear(tape, p, "head.proj", pooled, true)
    }

    /// Runs groups `from..` starting at activation `x` (the output of group
    /// `from - 1`, or the raw plane when `from == 0`). Returns `[1, feature_dim]`.
    pub fn forward_from<'a>(&self, tape: &mut Tape<'a>, p: &mut Binder<'a>, x: Var, from: usize) -> Result<Var> {
        self.run_groups(tape, p, x, from, self.num_groups())
    }

    fn run_groups<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &mut Binder<'a>,
        mut x: Var,
        from: usize,
        to: usize,
    ) -> Result<Var> {
        let stages = self.num_stages();
        for g in from..to {
            x = match g {
                0 => self.embed(tape, p, x),
                g if g <= stages => self.stage(tape, p, g - 1, x)?,
                _ => self.head(tape, p, x),
            };
        }
        Ok(x)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &mut Binder<'a>, plane: &ImagePlane) -> Result<Var> {
        self.check_plane(plane)?;
        let x = tape.constant(plane.pixels.clone(), &[plane.side, plane.side]);
        self.forward_from(tape, p, x, 0)
    }

    /// Output of the first `groups` groups, computed without gradient tracking.
    pub fn prefix_activation(&self, plane: &ImagePlane, groups: usize) -> Result<Vec<f64>> {
        self.check_plane(plane)?;
        if groups == 0 {
            return Ok(plane.pixels.clone());
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.params, false);
        let x = tape.constant(plane.pixels.clone(), &[plane.side, plane.side]);
        let out = self.run_groups(&mut tape, &mut p, x, 0, groups)?;
        Ok(tape.value(out).to_vec())
    }

    /// Shape of the activation entering group `g`.
    pub fn activation_shape(&self, g: usize) -> Vec<usize> {
        let cfg = &self.config;
        match g {
            0 => vec![cfg.input_side, cfg.input_side],
            g if g <= self.num_stages() => {
                let (side, dim) = cfg.stage_geometry(g - 1);
                vec![side * side, dim]
            }
            g if g >= self.num_groups() => vec![1, cfg.feature_dim],
            _ => {
                let (side, dim) = cfg.stage_geometry(self.num_stages() - 1);
                vec![side * side, dim]
            }
        }
    }

    pub fn extract_features(&self, plane: &ImagePlane) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.params, false);
        let out = self.forward(&mut tape, &mut p, plane)?;
        let v = tape.value(out).to_vec();
        debug_assert!(v.iter().all(|x| x.is_finite()));
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{Scale, View};

    pub(crate) fn tiny_config() -> BackboneConfig {
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

    fn plane(side: usize, seed: u64) -> ImagePlane {
        let px = (0..side * side)
            .map(|i| (((i as u64 + 1) * (seed * 2 + 1) * 2654435761) % 1000) as f64 / 1000.0)
            .collect();
        ImagePlane::new(side, px, View::Cc, Scale::Masked).unwrap()
    }

    fn trainable(bb: &Backbone) -> Vec<String> {
        bb.params.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect()
    }

    #[test]
    fn default_freezing_leaves_last_stage_and_projection() {
        let bb = Backbone::new(tiny_config(), 1).unwrap();
        let live = trainable(&bb);
        assert!(live.iter().all(|n| n.starts_with("stage1.") || n.starts_with("head.proj")));
        assert!(live.iter().any(|n| n.starts_with("stage1.")));
        assert!(bb.params.names().filter(|n| n.starts_with("patch_embed") || n.starts_with("stage0")).all(|n| bb.params.get(n).unwrap().frozen));
        assert_eq!(bb.frozen_prefix_len(), 2);
    }

    #[test]
    fn zero_unfrozen_keeps_only_projection() {
        let mut bb = Backbone::new(tiny_config(), 1).unwrap();
        bb.set_freezing(0).unwrap();
        assert_eq!(trainable(&bb), vec!["head.proj.weight".to_string(), "head.proj.bias".to_string()]);
        assert_eq!(bb.frozen_prefix_len(), 3);
    }

    #[test]
    fn all_unfrozen_trains_everything() {
        let mut bb = Backbone::new(tiny_config(), 1).unwrap();
        bb.set_freezing(2).unwrap();
        assert!(bb.params.frozen_set().is_empty());
        assert_eq!(bb.frozen_prefix_len(), 0);
        assert!(bb.set_freezing(3).is_err());
    }

    #[test]
    fn features_have_configured_length_and_are_deterministic() {
        let bb = Backbone::new(tiny_config(), 3).unwrap();
        let a = bb.extract_features(&plane(28, 1)).unwrap();
        let b = bb.extract_features(&plane(28, 1)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_plane_side_is_a_config_mismatch() {
        let bb = Backbone::new(tiny_config(), 3).unwrap();
        assert!(matches!(bb.extract_features(&plane(32, 1)), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn prefix_then_suffix_equals_full_forward() {
        let bb = Backbone::new(tiny_config(), 5).unwrap();
        let pl = plane(28, 2);
        let full = bb.extract_features(&pl).unwrap();
        for k in 0..bb.num_groups() {
            let act = bb.prefix_activation(&pl, k).unwrap();
            let mut tape = Tape::new();
            let mut p = Binder::new(&bb.params, false);
            let x = tape.constant(act, &bb.activation_shape(k));
            let out = bb.forward_from(&mut tape, &mut p, x, k).unwrap();
            assert_eq!(tape.value(out), full.as_slice(), "split at group {k}");
        }
    }

    #[test]
    fn patch_merge_rejects_odd_maps() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut p = Binder::new(&store, false);
        let x = tape.constant(vec![0.0; 3 * 4 * 2], &[12, 2]);
        assert!(matches!(patch_merge(&mut tape, &mut p, "m", x, 3, 4, 2), Err(Error::OddShape(3, 4))));
    }
}
