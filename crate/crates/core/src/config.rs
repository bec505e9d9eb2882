//! Flat `key=value` run configuration covering every hyperparameter.
//!
//! Lines are `section.key = value`; `#` starts a comment. Lists are
//! comma-separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Evaluate on all six variants of each test exam (plus per-exam averages).
    pub test_augment: bool,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            test_augment: true,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. The feature dimension is shared by backbone and fusion.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (b, f, t) = (&mut self.backbone, &mut self.fusion, &mut self.train);
        match key {
            "backbone.input_side" => b.input_side = parse(key, value)?,
            "backbone.patch_size" => b.patch_size = parse(key, value)?,
            "backbone.in_chans" => b.in_chans = parse(key, value)?,
            "backbone.embed_dim" => b.embed_dim = parse(key, value)?,
            "backbone.depths" => b.depths = parse_list(key, value)?,
            "backbone.num_heads" => b.num_heads = parse_list(key, value)?,
            "backbone.window_size" => b.window_size = parse(key, value)?,
            "backbone.feature_dim" => {
                b.feature_dim = parse(key, value)?;
                f.feature_dim = b.feature_dim;
            }
            "backbone.mlp_ratio" => b.mlp_ratio = parse(key, value)?,
            "backbone.unfrozen_top_stages" => b.unfrozen_top_stages = parse(key, value)?,
            "fusion.strategy" => f.strategy = value.trim().parse()?,
            "fusion.mlp_width" => f.mlp_width = parse(key, value)?,
            "fusion.hidden" => f.hidden = parse(key, value)?,
            "fusion.dropout_rate" => f.dropout_rate = parse(key, value)?,
            "fusion.leaky_slope" => f.leaky_slope = parse(key, value)?,
            "fusion.conv_out_channels" => f.conv_out_channels = parse(key, value)?,
            "fusion.bn_momentum" => f.bn_momentum = parse(key, value)?,
            "fusion.bn_eps" => f.bn_eps = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.label_smoothing" => t.label_smoothing = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.val_fraction" => t.val_fraction = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "train.cache_mb" => t.cache_mb = parse(key, value)?,
            "eval.test_augment" => self.test_augment = parse(key, value)?,
            "run.workers" => self.workers = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn serialize(&self) -> String {
        let (b, f, t) = (&self.backbone, &self.fusion, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("backbone.input_side", b.input_side.to_string());
        kv("backbone.patch_size", b.patch_size.to_string());
        kv("backbone.in_chans", b.in_chans.to_string());
        kv("backbone.embed_dim", b.embed_dim.to_string());
        kv("backbone.depths", join(&b.depths));
        kv("backbone.num_heads", join(&b.num_heads));
        kv("backbone.window_size", b.window_size.to_string());
        kv("backbone.feature_dim", b.feature_dim.to_string());
        kv("backbone.mlp_ratio", b.mlp_ratio.to_string());
        kv("backbone.unfrozen_top_stages", b.unfrozen_top_stages.to_string());
        kv("fusion.strategy", f.strategy.to_string());
        kv("fusion.mlp_width", f.mlp_width.to_string());
        kv("fusion.hidden", f.hidden.to_string());
        kv("fusion.dropout_rate", f.dropout_rate.to_string());
        kv("fusion.leaky_slope", f.leaky_slope.to_string());
        kv("fusion.conv_out_channels", f.conv_out_channels.to_string());
        kv("fusion.bn_momentum", f.bn_momentum.to_string());
        kv("fusion.bn_eps", f.bn_eps.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.eps", t.eps.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.label_smoothing", t.label_smoothing.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.val_fraction", t.val_fraction.to_string());
        kv("train.augment", t.augment.to_string());
        kv("train.cache_mb", t.cache_mb.to_string());
        kv("eval.test_augment", self.test_augment.to_string());
        kv("run.workers", self.workers.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.backbone.feature_dim != self.fusion.feature_dim {
            return Err(Error::ConfigMismatch("backbone and fusion feature_dim differ".into()));
        }
        Ok(())
    }
}
