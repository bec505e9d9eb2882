//! Label-smoothed BCE, AdamW and the epoch loop with in-loop validation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment_exam;
use crate::dataset::BreastExam;
use crate::error::{Error, Result};
use crate::fusion::SLOTS;
use crate::graph::{bce_with_logit, sigmoid};
use crate::metrics::{auc, THRESHOLD};
use crate::model::{Model, StepExample};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Train on all six geometric variants of each exam.
    pub augment: bool,
    /// Memory budget for cached frozen-prefix activations, in MiB.
    pub cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            val_fraction: 0.1,
            augment: true,
            cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        check_epsilon(self.label_smoothing)?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("betas must lie in [0,1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..0.5).contains(&eps) {
        Ok(())
    } else {
        Err(Error::BadEpsilon(eps))
    }
}

/// Smoothed target `y(1-ε) + ε/2`.
pub fn smoothed_target(y: u8, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    let y = f64::from(y.min(1));
    Ok(y * (1.0 - eps) + eps / 2.0)
}

pub fn smoothed_bce(logit: f64, y: u8, eps: f64) -> Result<f64> {
    Ok(bce_with_logit(logit, smoothed_target(y, eps)?))
}

/// First/second moments per array (in store order) and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Frozen arrays and arrays
/// without a gradient are left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for ((p, g), (m, v)) in store.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if let Some(g) = g {
            if g.len() != p.data.len() || m.len() != p.data.len() || v.len() != p.data.len() {
                return Err(Error::ShapeMismatch(format!("{}: gradient length {}", p.name, g.len())));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for ((p, g), (m, v)) in store.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let Some(g) = g else { continue };
        if p.frozen {
            continue;
        }
        for i in 0..p.data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let old = p.data[i];
            p.data[i] = old - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * old;
        }
    }
    Ok(())
}

/// Splits breasts into (train, validation) index sets, stratified by label.
/// Exams sharing a `breast_id` always land on the same side.
pub fn stratified_split(exams: &[BreastExam], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, (u8, Vec<usize>)> = BTreeMap::new();
    for (i, e) in exams.iter().enumerate() {
        groups.entry(&e.breast_id).or_insert((e.label, vec![])).1.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (vec![], vec![]);
    for label in [0u8, 1] {
        let mut ids: Vec<&Vec<usize>> = groups.values().filter(|(l, _)| *l == label).map(|(_, v)| v).collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let mut n_val = (val_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        for (k, members) in ids.into_iter().enumerate() {
            if k < n_val {
                val.extend(members);
            } else {
                train.extend(members);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
    /// Accuracy of the training-mode logits seen during the epoch.
    pub train_acc: f64,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_auc,val_acc,train_acc")?;
    for e in log {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            cell(e.val_loss),
            cell(e.val_auc),
            cell(e.val_acc),
            e.train_acc
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC (ties and
    /// undefined AUC fall back to validation loss; last epoch without a
    /// validation set).
    pub model: Model,
    /// Parameters after the last epoch.
    pub final_model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

type SlotActs = [Option<Vec<f64>>; SLOTS];

fn acts_bytes(a: &SlotActs) -> usize {
    a.iter().flatten().map(|v| v.len() * 8).sum()
}

/// Whether the per-plane tapes of one batch fit comfortably in memory.
fn keep_tapes(model: &Model, batch: usize) -> bool {
    const TAPE_FACTOR: usize = 200;
    const BUDGET: usize = 1_500_000_000;
    let [s, c] = model.prefix_lens();
    let len = model
        .seg
        .activation_shape(s)
        .iter()
        .product::<usize>()
        .max(model.crop.activation_shape(c).iter().product());
    batch * SLOTS * len * TAPE_FACTOR * 8 < BUDGET
}

struct Selection {
    auc: Option<f64>,
    loss: f64,
}

impl Selection {
    fn beats(&self, other: &Selection) -> bool {
        match (self.auc, other.auc) {
            (Some(a), Some(b)) => a > b || (a == b && self.loss < other.loss),
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => self.loss < other.loss,
        }
    }
}

/// Trains on `exams` (original, non-augmented breasts). A stratified
/// validation subset is held out; validation runs on original exams only.
pub fn train(mut model: Model, exams: &[BreastExam], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if exams.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, val_idx) = stratified_split(exams, cfg.val_fraction, cfg.seed);
    let mut train_set = Vec::new();
    for &i in &train_idx {
        if cfg.augment {
            train_set.extend(augment_exam(&exams[i])?);
        } else {
            train_set.push(exams[i].clone());
        }
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets: Vec<f64> = train_set
        .iter()
        .map(|e| smoothed_target(e.label, cfg.label_smoothing))
        .collect::<Result<_>>()?;
    info!(
        "training on {} examples ({} breasts), validating on {} breasts",
        train_set.len(),
        train_idx.len(),
        val_idx.len()
    );

    let val_acts: Vec<SlotActs> = val_idx
        .iter()
        .map(|&i| model.prefix_activations(&exams[i].views))
        .collect::<Result<_>>()?;
    let budget = cfg.cache_mb.saturating_mul(1 << 20);
    let mut cache: Vec<Option<SlotActs>> = vec![None; train_set.len()];
    let mut cached_bytes = 0usize;
    let keep = keep_tapes(&model, cfg.batch_size);

    let mut opt = [
        OptimizerState::new(&model.seg.params),
        OptimizerState::new(&model.crop.params),
        OptimizerState::new(&model.head.params),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Selection, Model, usize)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut local: Vec<(usize, SlotActs)> = Vec::new();
            for &i in chunk {
                if cache[i].is_none() {
                    let a = model.prefix_activations(&train_set[i].views)?;
                    let size = acts_bytes(&a);
                    if cached_bytes + size <= budget {
                        cached_bytes += size;
                        cache[i] = Some(a);
                    } else {
                        local.push((i, a));
                    }
                }
            }
            let examples: Vec<StepExample> = chunk
                .iter()
                .map(|&i| {
                    let acts = match &cache[i] {
                        Some(a) => a,
                        None => &local.iter().find(|(j, _)| *j == i).expect("computed above").1,
                    };
                    StepExample {
                        slots: std::array::from_fn(|s| acts[s].as_deref()),
                        target: targets[i],
                    }
                })
                .collect();
            let out = model.train_step(&examples, keep, &mut rng)?;
            drop(examples);
            loss_sum += out.loss * chunk.len() as f64;
            correct += chunk
                .iter()
                .zip(&out.logits)
                .filter(|(&i, &z)| (sigmoid(z) >= THRESHOLD) == (train_set[i].label == 1))
                .count();
            if let Some(stats) = &out.bn_stats {
                model.head.update_running_stats(stats);
            }
            adamw_step(&mut model.seg.params, &out.grads.seg, &mut opt[0], cfg)?;
            adamw_step(&mut model.crop.params, &out.grads.crop, &mut opt[1], cfg)?;
            adamw_step(&mut model.head.params, &out.grads.head, &mut opt[2], cfg)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;

        let (mut val_loss, mut val_auc, mut val_acc) = (None, None, None);
        if !val_idx.is_empty() {
            let mut pairs = Vec::with_capacity(val_idx.len());
            let (mut vl, mut vc) = (0.0, 0usize);
            for (acts, &i) in val_acts.iter().zip(&val_idx) {
                let z = model.logit_from_prefix(acts)?;
                let y = exams[i].label;
                vl += smoothed_bce(z, y, cfg.label_smoothing)?;
                vc += ((sigmoid(z) >= THRESHOLD) == (y == 1)) as usize;
                pairs.push((sigmoid(z), y));
            }
            val_loss = Some(vl / val_idx.len() as f64);
            val_acc = Some(vc as f64 / val_idx.len() as f64);
            val_auc = auc(&pairs).ok();
            let sel = Selection {
                auc: val_auc,
                loss: vl / val_idx.len() as f64,
            };
            if best.as_ref().is_none_or(|(b, _, _)| sel.beats(b)) {
                best = Some((sel, model.clone(), epoch));
            }
        }
        info!(
            "epoch {epoch}: train_loss {train_loss:.5} train_acc {train_acc:.4} val_loss {val_loss:?} val_auc {val_auc:?} val_acc {val_acc:?}"
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_auc,
            val_acc,
            train_acc,
        });
    }
    Ok(match best {
        Some((_, m, e)) => TrainOutcome {
            model: m,
            final_model: model,
            log,
            best_epoch: Some(e),
        },
        None => TrainOutcome {
            best_epoch: cfg.epochs.checked_sub(1),
            final_model: model.clone(),
            model,
            log,
        },
    })
}
