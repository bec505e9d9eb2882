//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and time
//! limits are pinned below. Run with `cargo test -p msmv-core --test acceptance`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use msmv_core::augment::{augment_exam, permute_square, AugmentOp};
use msmv_core::backbone::window::{window_partition, window_reverse, FeatureMap};
use msmv_core::backbone::{shifted_window_attention, AttnGeom, Backbone, BackboneConfig};
use msmv_core::config::RunConfig;
use msmv_core::dataset::{generate_synthetic, write_synthetic, BreastExam, Cohort, Manifest, Split, SyntheticConfig};
use msmv_core::fusion::{fuse_conv, fuse_maxpool, FeatureBundle, FusionConfig, FusionHead, FusionStrategy};
use msmv_core::graph::{bce_with_logit, sigmoid, Tape};
use msmv_core::imaging::{preprocess_exam, SegmenterBackend, View};
use msmv_core::metrics::{auc, auc_pairwise, threshold_metrics, Confusion, MetricsReport, THRESHOLD};
use msmv_core::model::{Model, StepExample};
use msmv_core::params::{Binder, ParamStore};
use msmv_core::pipeline::{evaluate, load_exams, prep_manifest, run_training};
use msmv_core::training::{adamw_step, smoothed_bce, smoothed_target, stratified_split, OptimizerState, TrainConfig};
use rand::Rng;

use common::*;

const FUSION_CONV_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const ATTN_ROW_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-12;
const ADAMW_TOL: f64 = 1e-12;
const E2E_ALL_AUC: f64 = 0.70;
const E2E_MISSING_AUC: f64 = 0.5;
const OVERFIT_ACC: f64 = 0.95;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fusion_oracle() -> Outcome {
    let mut r = rng(1);
    for k in 0..1000 {
        let d = r.random_range(1..40);
        let vs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, d, 5.0)).collect();
        let b = FeatureBundle::new(d, Some((vs[0].clone(), vs[2].clone())), Some((vs[1].clone(), vs[3].clone())))
            .map_err(|e| e.to_string())?;
        let got = fuse_maxpool(&b);
        let want = max_oracle([&vs[0], &vs[1], &vs[2], &vs[3]]);
        ensure(got == want, || format!("bundle {k}: maxpool differs"))?;
    }
    let mut worst: f64 = 0.0;
    for (k, (d, c)) in [(2, 1), (4, 2), (6, 3), (8, 4), (16, 4)].into_iter().enumerate() {
        let cfg = FusionConfig {
            strategy: FusionStrategy::Conv,
            feature_dim: d,
            mlp_width: 8,
            hidden: 4,
            conv_out_channels: c,
            ..Default::default()
        };
        let mut head = FusionHead::new(cfg, k as u64).map_err(|e| e.to_string())?;
        for name in ["bn.weight", "bn.bias"] {
            head.params.get_mut(name).unwrap().data = random_vec(&mut r, c, 1.0);
        }
        head.buffers.get_mut("bn.running_mean").unwrap().data = random_vec(&mut r, c, 0.5);
        head.buffers.get_mut("bn.running_var").unwrap().data = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
        let vs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, d, 2.0)).collect();
        let b = FeatureBundle::new(d, Some((vs[0].clone(), vs[2].clone())), Some((vs[1].clone(), vs[3].clone())))
            .map_err(|e| e.to_string())?;
        let got = fuse_conv(&b, &head).map_err(|e| e.to_string())?;
        let p = |n: &str| head.params.data(n).to_vec();
        let want = conv_fusion_oracle(
            &b.stacked(),
            d,
            &p("conv.weight"),
            &p("conv.bias"),
            &p("bn.weight"),
            &p("bn.bias"),
            head.buffers.data("bn.running_mean"),
            head.buffers.data("bn.running_var"),
            head.config.bn_eps,
        );
        ensure(got.len() == want.len(), || format!("conv d={d}: length {} vs {}", got.len(), want.len()))?;
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= FUSION_CONV_TOL, || format!("conv max deviation {worst:.3e}"))?;
    Ok(format!("1000 maxpool bundles exact, conv max deviation {worst:.1e}"))
}

fn zero_padding_contract() -> Outcome {
    let mut r = rng(2);
    let mut checked = 0;
    for strategy in [FusionStrategy::MaxPool, FusionStrategy::Conv] {
        let model = Model::new(tiny_backbone(), tiny_fusion(strategy), 3).map_err(|e| e.to_string())?;
        for (cc, mlo) in [(true, false), (false, true)] {
            let views = random_views(&mut r, 28, cc, mlo);
            let b = model.bundle(&views).map_err(|e| e.to_string())?;
            let absent = if cc { View::Mlo } else { View::Cc };
            let zeros: [&[f64]; 2] = match absent {
                View::Cc => [&b.f_seg_cc, &b.f_crop_cc],
                View::Mlo => [&b.f_seg_mlo, &b.f_crop_mlo],
            };
            ensure(zeros.iter().all(|v| v.iter().all(|x| *x == 0.0)), || {
                format!("{strategy}: absent {absent} slots not zero")
            })?;
            ensure(b.present(View::Cc) == cc && b.present(View::Mlo) == mlo, || "presence flags".into())?;
            let z = model.logit(&views).map_err(|e| e.to_string())?;
            ensure(z.is_finite(), || format!("{strategy}: logit {z}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} single-view exams, absent slots zero, logits finite"))
}

fn reference_dimensions() -> Outcome {
    let rc = RunConfig::default();
    let fusion_conv = FusionConfig {
        strategy: FusionStrategy::Conv,
        ..rc.fusion.clone()
    };
    let bb = Backbone::new(rc.backbone.clone(), 0).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    let plane = random_plane(&mut r, rc.backbone.input_side, View::Cc, msmv_core::imaging::Scale::Masked);
    let feat = bb.extract_features(&plane).map_err(|e| e.to_string())?;
    let flatten = fusion_conv.fused_len();
    let head = FusionHead::new(fusion_conv, 0).map_err(|e| e.to_string())?;
    let fc1 = head.params.get("mlp.fc1.weight").ok_or("no mlp.fc1")?.shape.clone();
    let fc2 = head.params.get("mlp.fc2.weight").ok_or("no mlp.fc2")?.shape.clone();
    let b = FeatureBundle::new(feat.len(), Some((feat.clone(), feat.clone())), None).map_err(|e| e.to_string())?;
    let fused = fuse_conv(&b, &head).map_err(|e| e.to_string())?;
    ensure(plane.side == 224, || format!("input side {}", plane.side))?;
    ensure(feat.len() == 1024, || format!("backbone output {}", feat.len()))?;
    ensure(flatten == 4096 && fused.len() == 4096, || format!("conv flatten {flatten}/{}", fused.len()))?;
    ensure(fc1 == vec![1024, 512], || format!("mlp hidden shape {fc1:?}"))?;
    ensure(fc2 == vec![512, 1], || format!("output shape {fc2:?}"))?;
    let model = Model::new(rc.backbone.clone(), rc.fusion.clone(), 0).map_err(|e| e.to_string())?;
    let z = model.logit_from_bundle(&b).map_err(|e| e.to_string())?;
    ensure(z.is_finite(), || "logit not finite".into())?;
    Ok("features 1024, conv flatten 4096, hidden 512, 1 logit".into())
}

fn gradient_checks() -> Outcome {
    let mut report = vec![];
    for strategy in [FusionStrategy::MaxPool, FusionStrategy::Conv] {
        let errs = model_gradient_errors(strategy, 4, 11);
        let (name, worst) = errs
            .iter()
            .cloned()
            .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
        ensure(worst <= GRAD_TOL, || format!("{strategy}: {name} relative error {worst:.3e}"))?;
        report.push(format!("{strategy} {} tensors max {worst:.1e}", errs.len()));
    }
    let bce = bce_gradient_error();
    ensure(bce <= GRAD_TOL, || format!("smoothed BCE relative error {bce:.3e}"))?;
    report.push(format!("bce {bce:.1e}"));
    Ok(report.join(", "))
}

fn freezing_contract() -> Outcome {
    let mut model = Model::new(tiny_backbone(), tiny_fusion(FusionStrategy::Conv), 5).map_err(|e| e.to_string())?;
    let before = model.clone();
    let mut r = rng(5);
    let exams: Vec<_> = (0..8).map(|i| random_views(&mut r, 28, true, i % 3 != 0)).collect();
    let cfg = TrainConfig {
        lr: 1e-3,
        ..Default::default()
    };
    let mut opt = [
        OptimizerState::new(&model.seg.params),
        OptimizerState::new(&model.crop.params),
        OptimizerState::new(&model.head.params),
    ];
    let mut touched = [
        vec![false; model.seg.params.len()],
        vec![false; model.crop.params.len()],
        vec![false; model.head.params.len()],
    ];
    for step in 0..50 {
        let idx = [(2 * step) % 8, (2 * step + 1) % 8];
        let acts: Vec<_> = idx
            .iter()
            .map(|&i| model.prefix_activations(&exams[i]))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let batch: Vec<StepExample> = acts
            .iter()
            .zip(idx)
            .map(|(a, i)| StepExample {
                slots: std::array::from_fn(|s| a[s].as_deref()),
                target: smoothed_target((i % 2) as u8, 0.1).unwrap(),
            })
            .collect();
        let out = model.train_step(&batch, true, &mut r).map_err(|e| e.to_string())?;
        for (t, gs) in touched.iter_mut().zip([&out.grads.seg, &out.grads.crop, &out.grads.head]) {
            for (flag, g) in t.iter_mut().zip(gs) {
                *flag |= g.as_ref().is_some_and(|g| g.iter().any(|x| *x != 0.0));
            }
        }
        if let Some(s) = &out.bn_stats {
            model.head.update_running_stats(s);
        }
        adamw_step(&mut model.seg.params, &out.grads.seg, &mut opt[0], &cfg).map_err(|e| e.to_string())?;
        adamw_step(&mut model.crop.params, &out.grads.crop, &mut opt[1], &cfg).map_err(|e| e.to_string())?;
        adamw_step(&mut model.head.params, &out.grads.head, &mut opt[2], &cfg).map_err(|e| e.to_string())?;
    }
    let (mut frozen, mut changed) = (0, 0);
    let stores: [(&ParamStore, &ParamStore); 3] = [
        (&before.seg.params, &model.seg.params),
        (&before.crop.params, &model.crop.params),
        (&before.head.params, &model.head.params),
    ];
    for ((old, new), t) in stores.into_iter().zip(&touched) {
        for ((a, b), &hit) in old.iter().zip(new.iter()).zip(t) {
            let same_bits = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
            if a.frozen {
                ensure(same_bits, || format!("frozen {} changed", a.name))?;
                ensure(!hit, || format!("frozen {} received a gradient", a.name))?;
                frozen += 1;
            } else if hit {
                ensure(!same_bits, || format!("unfrozen {} did not change", a.name))?;
                changed += 1;
            }
        }
    }
    ensure(frozen > 0 && changed > 0, || format!("{frozen} frozen, {changed} changed"))?;
    Ok(format!("50 steps: {frozen} frozen arrays identical, {changed} trained arrays changed"))
}

fn structural_invariants() -> Outcome {
    let mut r = rng(6);
    for (h, w, c, win) in [(14, 14, 3, 7), (8, 12, 2, 4), (7, 7, 5, 7)] {
        let map = FeatureMap::new(h, w, c, random_vec(&mut r, h * w * c, 1.0)).map_err(|e| e.to_string())?;
        let blocks = window_partition(&map, win).map_err(|e| e.to_string())?;
        let back = window_reverse(&blocks, win, h, w).map_err(|e| e.to_string())?;
        ensure(back == map, || format!("window round trip {h}x{w}x{c}/{win}"))?;
    }

    let bb = Backbone::new(tiny_backbone(), 6).map_err(|e| e.to_string())?;
    let mut store = bb.params.clone();
    for p in store.iter_mut().filter(|p| p.name.contains("relative_position_bias_table")) {
        p.data = random_vec(&mut r, p.data.len(), 1.0);
    }
    let mut worst_row: f64 = 0.0;
    for shift in [0, 3] {
        let g = AttnGeom {
            side: 14,
            dim: 8,
            heads: 2,
            window: 7,
            shift,
        };
        let mut tape = Tape::new();
        let mut p = Binder::new(&store, false);
        let x = tape.constant(random_vec(&mut r, 14 * 14 * 8, 1.0), &[196, 8]);
        let (_, attn) = shifted_window_attention(&mut tape, &mut p, "stage0.block0.attn", x, g).map_err(|e| e.to_string())?;
        for row in tape.value(attn).chunks(49) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_row <= ATTN_ROW_TOL, || format!("attention row sum off by {worst_row:.3e}"))?;

    for side in [1, 2, 5, 16] {
        let px = random_vec(&mut r, side * side, 1.0);
        let mut rot = px.clone();
        for _ in 0..4 {
            rot = permute_square(&rot, side, AugmentOp::Rot90);
        }
        ensure(rot == px, || format!("Rot90^4 != id at side {side}"))?;
        for op in [AugmentOp::FlipH, AugmentOp::FlipV] {
            let twice = permute_square(&permute_square(&px, side, op), side, op);
            ensure(twice == px, || format!("{op}^2 != id at side {side}"))?;
        }
    }

    let exam = BreastExam {
        breast_id: "b".into(),
        patient_id: "p".into(),
        label: 1,
        views: random_views(&mut r, 8, true, false),
        augment: AugmentOp::Identity,
    };
    let variants = augment_exam(&exam).map_err(|e| e.to_string())?;
    ensure(variants.len() == 6, || format!("augmentation factor {}", variants.len()))?;
    ensure(variants.iter().all(|v| !v.present(View::Mlo)), || "absent view appeared".into())?;
    Ok(format!("window round trips exact, attention rows within {worst_row:.1e}, Rot90^4/Flip^2 identity, factor 6"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(7);
    for trial in 0..200 {
        let n = r.random_range(2..=200);
        let levels = r.random_range(2..50);
        let mut s: Vec<(f64, u8)> = (0..n)
            .map(|_| ((r.random_range(0..levels) as f64) / levels as f64, r.random_range(0..2u8)))
            .collect();
        s[0].1 = 0;
        s[1].1 = 1;
        let (a, b) = (auc(&s).map_err(|e| e.to_string())?, auc_pairwise(&s).map_err(|e| e.to_string())?);
        let o = auc_oracle(&s);
        ensure(a == b && a == o, || format!("trial {trial}: rank {a} pairwise {b} oracle {o}"))?;
    }

    // (tp, fp, tn, fn) with accuracy, f1, sensitivity, specificity worked by hand.
    let cases: [((usize, usize, usize, usize), [f64; 4]); 3] = [
        ((3, 1, 4, 2), [0.7, 2.0 / 3.0, 0.6, 0.8]),
        ((5, 0, 5, 0), [1.0, 1.0, 1.0, 1.0]),
        ((1, 3, 2, 4), [0.3, 2.0 / 9.0, 0.2, 0.4]),
    ];
    for ((tp, fp, tn, fn_), want) in cases {
        let m = threshold_metrics(Confusion { tp, fp, tn, fn_ });
        let got = [m.accuracy, m.f1, m.sensitivity, m.specificity];
        for (g, w) in got.iter().zip(want) {
            let g = g.ok_or("undefined metric")?;
            ensure((g - w).abs() <= METRIC_TOL, || format!("confusion {tp},{fp},{tn},{fn_}: {g} vs {w}"))?;
        }
    }

    let base: Vec<(f64, u8)> = (0..120).map(|i| (r.random::<f64>(), (i % 2) as u8)).collect();
    let reference = auc(&base).map_err(|e| e.to_string())?;
    for k in 0..100 {
        let (scale, shift, power) = (r.random_range(0.1..10.0), r.random_range(-5.0..5.0), r.random_range(0.2..5.0));
        let map = |x: f64| -> f64 {
            match k % 3 {
                0 => scale * x + shift,
                1 => x.powf(power) * scale,
                _ => (scale * (x - 0.5)).tanh() + shift.abs() * x,
            }
        };
        let mapped: Vec<(f64, u8)> = base.iter().map(|&(s, y)| (map(s), y)).collect();
        let strictly_increasing = {
            let mut pairs = base.clone();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            pairs.windows(2).all(|w| w[0].0 == w[1].0 || map(w[0].0) < map(w[1].0))
        };
        if !strictly_increasing {
            return Err(format!("map {k} is not strictly increasing on the sample"));
        }
        let a = auc(&mapped).map_err(|e| e.to_string())?;
        ensure(a == reference, || format!("monotone map {k}: {a} vs {reference}"))?;
    }
    Ok("AUC oracle agreement on 200 sets, confusion cases, 100 monotone maps".into())
}

fn optimizer_oracle() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let cfg = TrainConfig {
            lr: r.random_range(1e-4..1e-1),
            beta1: r.random_range(0.5..0.99),
            beta2: r.random_range(0.9..0.9999),
            eps: 10f64.powf(r.random_range(-10.0..-6.0)),
            weight_decay: r.random_range(0.0..0.1),
            ..Default::default()
        };
        let mut store = ParamStore::new();
        store.insert("a", &[3, 2], random_vec(&mut r, 6, 1.0));
        store.insert("b", &[4], random_vec(&mut r, 4, 1.0));
        let mut refs: Vec<(f64, ScalarAdamW)> = store
            .iter()
            .flat_map(|p| p.data.clone())
            .map(|x| (x, ScalarAdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)))
            .collect();
        let mut state = OptimizerState::new(&store);
        for _ in 0..10 {
            let grads: Vec<Option<Vec<f64>>> = store.iter().map(|p| Some(random_vec(&mut r, p.data.len(), 2.0))).collect();
            adamw_step(&mut store, &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
            let flat: Vec<f64> = grads.iter().flatten().flatten().copied().collect();
            for ((theta, opt), g) in refs.iter_mut().zip(flat) {
                *theta = opt.step(*theta, g);
            }
            let got: Vec<f64> = store.iter().flat_map(|p| p.data.clone()).collect();
            for (g, (w, _)) in got.iter().zip(&refs) {
                worst = worst.max((g - w).abs());
            }
        }
        ensure(worst <= ADAMW_TOL, || format!("trajectory {trial}: deviation {worst:.3e}"))?;
    }
    Ok(format!("20 trajectories x 10 steps, max deviation {worst:.1e}"))
}

fn e2e_config(strategy: FusionStrategy) -> RunConfig {
    let mut rc = RunConfig::default();
    rc.backbone.input_side = 56;
    rc.fusion.strategy = strategy;
    rc.train.epochs = 4;
    rc.train.seed = 0;
    rc
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let raw = dir.path().join("raw");
    let exams = generate_synthetic(&SyntheticConfig {
        n: 200,
        missing_rate: 0.2,
        seed: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    write_synthetic(&exams, &raw).map_err(|e| e.to_string())?;
    let manifest = Manifest::read_csv(&raw.join("manifest.csv")).map_err(|e| e.to_string())?;
    let prepared_dir = dir.path().join("prepared");
    let side = e2e_config(FusionStrategy::MaxPool).backbone.input_side;
    prep_manifest(&manifest, &prepared_dir, &SegmenterBackend::Classical, side).map_err(|e| e.to_string())?;
    let prepared = Manifest::read_csv(&prepared_dir.join("manifest.csv")).map_err(|e| e.to_string())?;
    let load = |split| load_exams(&prepared.filter_split(split), &SegmenterBackend::Classical, side);
    let train = load(Split::Train).map_err(|e| e.to_string())?;
    let test = load(Split::Test).map_err(|e| e.to_string())?;

    let mut lines = vec![];
    let mut train_time = Duration::ZERO;
    for strategy in [FusionStrategy::MaxPool, FusionStrategy::Conv] {
        let rc = e2e_config(strategy);
        let t0 = Instant::now();
        let outcome = run_training(&train, &rc, None).map_err(|e| e.to_string())?;
        train_time += t0.elapsed();
        let ev = evaluate(&outcome.model, &test, true, 1).map_err(|e| e.to_string())?;
        let report = roundtrip(&ev.report, dir.path())?;
        for (label, row) in report.rows() {
            ensure(row.n_pos + row.n_neg > 0, || format!("{strategy}: empty row {label}"))?;
            let cells = [row.accuracy, row.auc, row.f1, row.sensitivity, row.specificity];
            ensure(cells.iter().all(|c| c.is_some_and(|v| (0.0..=1.0).contains(&v))), || {
                format!("{strategy}: row {label} has undefined cells {cells:?}")
            })?;
        }
        let (all, missing) = (report.all.auc.unwrap_or(0.0), report.missing_view.auc.unwrap_or(0.0));
        lines.push(format!(
            "{strategy}: All AUC {all:.3} acc {:.3}, MissingView AUC {missing:.3} (best epoch {:?})",
            report.all.accuracy.unwrap_or(0.0),
            outcome.best_epoch
        ));
        ensure(all > E2E_ALL_AUC, || format!("{strategy}: All AUC {all:.4} <= {E2E_ALL_AUC}"))?;
        ensure(missing > E2E_MISSING_AUC, || format!("{strategy}: MissingView AUC {missing:.4} <= {E2E_MISSING_AUC}"))?;
    }
    ensure(train_time <= Duration::from_secs(15 * 60), || format!("training took {train_time:.0?}"))?;
    let missing = test.iter().filter(|e| e.cohort() == Cohort::MissingView).count();
    Ok(format!(
        "{} train / {} test ({missing} single-view), training {train_time:.0?}; {}",
        train.len(),
        test.len(),
        lines.join("; ")
    ))
}

fn roundtrip(report: &MetricsReport, dir: &Path) -> Result<MetricsReport, String> {
    let path = dir.join("report.json");
    report.write(&path).map_err(|e| e.to_string())?;
    let back = MetricsReport::read(&path).map_err(|e| e.to_string())?;
    ensure(&back == report, || "report.json round trip".into())?;
    Ok(back)
}

fn overfit() -> Outcome {
    let synth = generate_synthetic(&SyntheticConfig {
        n: 32,
        missing_rate: 0.0,
        seed: 3,
        side: 64,
        test_fraction: 0.0,
    })
    .map_err(|e| e.to_string())?;
    let mut rc = RunConfig::default();
    rc.backbone = BackboneConfig {
        feature_dim: 32,
        ..tiny_backbone()
    };
    rc.fusion = FusionConfig {
        feature_dim: 32,
        mlp_width: 32,
        hidden: 16,
        ..Default::default()
    };
    rc.train.epochs = 200;
    rc.train.lr = 1e-3;
    rc.train.augment = false;
    let side = rc.backbone.input_side;
    let exams: Vec<BreastExam> = synth
        .iter()
        .map(|s| {
            Ok(BreastExam {
                breast_id: s.breast_id.clone(),
                patient_id: s.patient_id.clone(),
                label: s.label,
                views: preprocess_exam(s.cc.as_ref(), s.mlo.as_ref(), &SegmenterBackend::Classical, side)?,
                augment: AugmentOp::Identity,
            })
        })
        .collect::<msmv_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let outcome = run_training(&exams, &rc, None).map_err(|e| e.to_string())?;
    let (train_idx, _) = stratified_split(&exams, rc.train.val_fraction, rc.train.seed);
    let correct = train_idx
        .iter()
        .filter(|&&i| {
            let z = outcome.final_model.logit(&exams[i].views).unwrap_or(f64::NAN);
            (sigmoid(z) >= THRESHOLD) == (exams[i].label == 1)
        })
        .count();
    let acc = correct as f64 / train_idx.len() as f64;
    let last = outcome.log.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    ensure(acc >= OVERFIT_ACC, || format!("train accuracy {acc:.3} (final train loss {last:.4})"))?;
    Ok(format!("{} exams ({} trained), train accuracy {acc:.3}, final loss {last:.4}", exams.len(), train_idx.len()))
}

/// Relative error of d(mean smoothed BCE)/d(logit) from the tape against
/// central differences of the scalar loss.
fn bce_gradient_error() -> f64 {
    let mut r = rng(9);
    let logits: Vec<f64> = random_vec(&mut r, 16, 6.0);
    let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
    let eps = 0.1;
    let targets: Vec<f64> = labels.iter().map(|&y| smoothed_target(y, eps).unwrap()).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), &[16], true);
    let loss = tape.bce_mean(z, targets);
    let g = tape.backward(loss).take(z).unwrap();
    let mut x = logits.clone();
    let numeric: Vec<f64> = (0..16)
        .map(|i| {
            central_difference(&mut x, i, 1e-5, |v| {
                v.iter().zip(&labels).map(|(&z, &y)| smoothed_bce(z, y, eps).unwrap()).sum::<f64>() / 16.0
            })
        })
        .collect();
    // The scalar path must agree with the plain formula as well.
    let plain = bce_with_logit(logits[0], smoothed_target(labels[0], eps).unwrap());
    let scalar = smoothed_bce(logits[0], labels[0], eps).unwrap();
    relative_error(&g, &numeric, 1e-12).max((plain - scalar).abs())
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "fusion oracle",
            limit: Some(Duration::from_secs(10)),
            run: fusion_oracle,
        },
        Criterion {
            name: "zero-padding contract",
            limit: Some(Duration::from_secs(5)),
            run: zero_padding_contract,
        },
        Criterion {
            name: "stated dimensions",
            limit: None,
            run: reference_dimensions,
        },
        Criterion {
            name: "gradient checks",
            limit: Some(Duration::from_secs(120)),
            run: gradient_checks,
        },
        Criterion {
            name: "freezing contract",
            limit: Some(Duration::from_secs(60)),
            run: freezing_contract,
        },
        Criterion {
            name: "structural invariants",
            limit: None,
            run: structural_invariants,
        },
        Criterion {
            name: "metric oracles",
            limit: None,
            run: metric_oracles,
        },
        Criterion {
            name: "optimizer oracle",
            limit: None,
            run: optimizer_oracle,
        },
        Criterion {
            name: "end-to-end synthetic run",
            limit: None,
            run: end_to_end,
        },
        Criterion {
            name: "overfit sanity",
            limit: None,
            run: overfit,
        },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = (c.run)();
        let took = t0.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if took > limit => Err(format!("took {took:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {}: {detail} [{took:.1?}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {why} [{took:.1?}]", c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
