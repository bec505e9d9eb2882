use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub patch_size: usize,
    /// 1 for grayscale; 3 replicates the plane for externally pretrained weights.
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub feature_dim: usize,
    pub mlp_ratio: f64,
    pub unfrozen_top_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_side: 224,
            patch_size: 4,
            in_chans: 1,
            embed_dim: 24,
            depths: vec![2, 2],
            num_heads: vec![3, 6],
            window_size: 7,
            feature_dim: 1024,
            mlp_ratio: 4.0,
            unfrozen_top_stages: 1,
        }
    }
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn tokens_per_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    /// Spatial side (in tokens) and channel width of stage `s`.
    pub fn stage_geometry(&self, s: usize) -> (usize, usize) {
        (self.tokens_per_side() >> s, self.embed_dim << s)
    }

    pub fn final_dim(&self) -> usize {
        self.stage_geometry(self.num_stages() - 1).1
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return bad(format!(
                "depths {:?} and num_heads {:?} must be nonempty and equally long",
                self.depths, self.num_heads
            ));
        }
        if self.depths.contains(&0) || self.num_heads.contains(&0) {
            return bad("depths and num_heads entries must be positive".into());
        }
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 {
            return bad("patch_size, window_size and embed_dim must be positive".into());
        }
        if self.in_chans != 1 && self.in_chans != 3 {
            return bad(format!("in_chans must be 1 or 3, got {}", self.in_chans));
        }
        if self.input_side % self.patch_size != 0 {
            return bad(format!(
                "input_side {} is not a multiple of patch_size {}",
                self.input_side, self.patch_size
            ));
        }
        let unit = self.window_size << (self.num_stages() - 1);
        if self.tokens_per_side() % unit != 0 {
            return bad(format!(
                "input_side/patch_size = {} must be divisible by window_size * 2^(stages-1) = {unit}",
                self.tokens_per_side()
            ));
        }
        for (s, &h) in self.num_heads.iter().enumerate() {
            let dim = self.embed_dim << s;
            if h == 0 || dim % h != 0 {
                return bad(format!("stage {s} width {dim} not divisible by {h} heads"));
            }
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.unfrozen_top_stages > self.num_stages() {
            return bad(format!(
                "unfrozen_top_stages {} exceeds {} stages",
                self.unfrozen_top_stages,
                self.num_stages()
            ));
        }
        Ok(())
    }
}
