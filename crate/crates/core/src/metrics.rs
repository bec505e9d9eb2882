//! Threshold metrics, Mann–Whitney AUC, cohort reports and their renderers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentOp;
use crate::dataset::Cohort;
use crate::error::{Error, Result};

/// Scores at or above this are predicted malignant.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub breast_id: String,
    pub cohort: Cohort,
    pub augment: AugmentOp,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn tally(preds: &[PredictionRecord], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for p in preds {
        match (p.score >= threshold, p.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn confusion(preds: &[PredictionRecord], threshold: f64) -> Result<Confusion> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(tally(preds, threshold))
}

/// Metrics whose denominators may vanish are `None` rather than NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn threshold_metrics(c: Confusion) -> ThresholdMetrics {
    ThresholdMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

fn class_counts(scores: &[(f64, u8)]) -> Result<(u64, u64)> {
    let pos = scores.iter().filter(|(_, y)| *y == 1).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// AUC by comparing every positive with every negative (ties count half).
pub fn auc_pairwise(scores: &[(f64, u8)]) -> Result<f64> {
    let (pos, neg) = class_counts(scores)?;
    // Twice the Mann-Whitney statistic, kept integral.
    let mut doubled: u64 = 0;
    for &(sp, _) in scores.iter().filter(|(_, y)| *y == 1) {
        for &(sn, _) in scores.iter().filter(|(_, y)| *y != 1) {
            doubled += if sp > sn {
                2
            } else if sp == sn {
                1
            } else {
                0
            };
        }
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

/// AUC from average ranks; identical to [`auc_pairwise`] bit for bit.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    let (pos, neg) = class_counts(scores)?;
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // Sum of doubled average ranks of the positives.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u64;
        let n_pos = order[i..=j].iter().filter(|&&k| scores[k].1 == 1).count() as u64;
        rank_sum2 += doubled_rank * n_pos;
        i = j + 1;
    }
    let doubled = rank_sum2 - pos * (pos + 1);
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortMetrics {
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl CohortMetrics {
    pub fn from_records(preds: &[PredictionRecord]) -> CohortMetrics {
        let c = tally(preds, THRESHOLD);
        let t = threshold_metrics(c);
        let pairs: Vec<(f64, u8)> = preds.iter().map(|p| (p.score, p.label)).collect();
        CohortMetrics {
            accuracy: t.accuracy,
            auc: auc(&pairs).ok(),
            f1: t.f1,
            sensitivity: t.sensitivity,
            specificity: t.specificity,
            n_pos: c.tp + c.fn_,
            n_neg: c.tn + c.fp,
        }
    }

    fn cells(&self) -> [Option<f64>; 5] {
        [self.accuracy, self.auc, self.f1, self.sensitivity, self.specificity]
    }
}

/// Per-cohort metrics; `All` pools the records of both cohorts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(rename = "BothViews")]
    pub both_views: CohortMetrics,
    #[serde(rename = "MissingView")]
    pub missing_view: CohortMetrics,
    #[serde(rename = "All")]
    pub all: CohortMetrics,
}

pub const ROW_LABELS: [&str; 3] = ["Breasts with both Views", "Breasts with Missing Views", "All Breasts"];
pub const COLUMN_LABELS: [&str; 5] = ["Accuracy", "AUC", "F1", "Sensitivity", "Specificity"];

/// Percentage with two decimals, or `n/a` for undefined values.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => "n/a".to_string(),
    }
}

impl MetricsReport {
    pub fn from_records(preds: &[PredictionRecord]) -> MetricsReport {
        let (both, missing): (Vec<_>, Vec<_>) =
            preds.iter().cloned().partition(|p| p.cohort == Cohort::BothViews);
        MetricsReport {
            both_views: CohortMetrics::from_records(&both),
            missing_view: CohortMetrics::from_records(&missing),
            all: CohortMetrics::from_records(preds),
        }
    }

    pub fn rows(&self) -> [(&'static str, &CohortMetrics); 3] {
        [
            (ROW_LABELS[0], &self.both_views),
            (ROW_LABELS[1], &self.missing_view),
            (ROW_LABELS[2], &self.all),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        let r: MetricsReport =
            serde_json::from_str(text).map_err(|e| Error::MalformedReport(e.to_string()))?;
        for (name, m) in r.rows() {
            if m.cells().iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::MalformedReport(format!("{name}: value outside [0,1]")));
            }
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<MetricsReport> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn render_text(&self) -> String {
        let width = ROW_LABELS.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = format!("{:<width$}", "Cohort");
        for c in COLUMN_LABELS {
            let _ = write!(out, "  {c:>11}");
        }
        let _ = write!(out, "  {:>5}  {:>5}", "n_pos", "n_neg");
        out.push('\n');
        for (label, m) in self.rows() {
            let _ = write!(out, "{label:<width$}");
            for v in m.cells() {
                let _ = write!(out, "  {:>11}", format_percent(v));
            }
            let _ = writeln!(out, "  {:>5}  {:>5}", m.n_pos, m.n_neg);
        }
        out
    }

    pub fn render_markdown(&self) -> String {
        let mut out = String::from("| Cohort |");
        for c in COLUMN_LABELS {
            let _ = write!(out, " {c} |");
        }
        out.push_str(" n_pos | n_neg |\n|---|");
        out.push_str(&"---:|".repeat(COLUMN_LABELS.len() + 2));
        out.push('\n');
        for (label, m) in self.rows() {
            let _ = write!(out, "| {label} |");
            for v in m.cells() {
                let _ = write!(out, " {} |", format_percent(v));
            }
            let _ = writeln!(out, " {} | {} |", m.n_pos, m.n_neg);
        }
        out
    }
}

/// Averages scores over the augmented variants of each breast.
pub fn aggregate_by_exam(preds: &[PredictionRecord]) -> Vec<PredictionRecord> {
    let mut groups: BTreeMap<&str, (PredictionRecord, f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for p in preds {
        let e = groups.entry(&p.breast_id).or_insert_with(|| {
            order.push(p.breast_id.as_str());
            (
                PredictionRecord {
                    augment: AugmentOp::Identity,
                    ..p.clone()
                },
                0.0,
                0,
            )
        });
        e.1 += p.score;
        e.2 += 1;
    }
    order
        .into_iter()
        .map(|id| {
            let (mut rec, sum, n) = groups.remove(id).expect("grouped id");
            rec.score = sum / n as f64;
            rec
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["breast_id", "cohort", "augment", "label", "score"])?;
    for p in preds {
        let cohort = match p.cohort {
            Cohort::BothViews => "BothViews",
            Cohort::MissingView => "MissingView",
        };
        w.write_record([
            p.breast_id.as_str(),
            cohort,
            p.augment.as_str(),
            &p.label.to_string(),
            &p.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| Error::MalformedReport(format!("bad {what} in predictions"));
        let cohort = match rec.get(1) {
            Some("BothViews") => Cohort::BothViews,
            Some("MissingView") => Cohort::MissingView,
            _ => return Err(bad("cohort")),
        };
        out.push(PredictionRecord {
            breast_id: rec.get(0).ok_or_else(|| bad("breast_id"))?.to_string(),
            cohort,
            augment: rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("augment"))?,
            label: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?,
            score: rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("score"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, label: u8, cohort: Cohort) -> PredictionRecord {
        PredictionRecord {
            breast_id: format!("b{score}-{label}"),
            cohort,
            augment: AugmentOp::Identity,
            label,
            score,
        }
    }

    #[test]
    fn separable_pair_and_tie_rule() {
        let c = confusion(
            &[rec(0.9, 1, Cohort::BothViews), rec(0.1, 0, Cohort::BothViews)],
            THRESHOLD,
        )
        .unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&[rec(0.5, 0, Cohort::BothViews)], THRESHOLD).unwrap();
        assert_eq!(c.fp, 1);
        assert!(matches!(confusion(&[], THRESHOLD), Err(Error::EmptyInput)));
    }

    #[test]
    fn hand_computed_threshold_metrics() {
        let t = threshold_metrics(Confusion { tp: 3, fp: 1, tn: 5, fn_: 1 });
        assert!((t.accuracy.unwrap() - 0.8).abs() < 1e-12);
        assert!((t.sensitivity.unwrap() - 0.75).abs() < 1e-12);
        assert!((t.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((t.f1.unwrap() - 0.75).abs() < 1e-12);
        let none = threshold_metrics(Confusion { tp: 0, fp: 2, tn: 3, fn_: 0 });
        assert_eq!(none.sensitivity, None);
    }

    #[test]
    fn auc_examples() {
        let s = [(0.8, 1), (0.4, 1), (0.6, 0), (0.2, 0)];
        assert_eq!(auc(&s).unwrap(), 0.75);
        assert_eq!(auc_pairwise(&s).unwrap(), 0.75);
        assert_eq!(auc(&[(0.3, 1), (0.3, 0), (0.3, 1)]).unwrap(), 0.5);
        assert!(matches!(auc(&[(0.3, 1)]), Err(Error::SingleClass)));
    }

    #[test]
    fn empty_cohort_renders_as_na() {
        let r = MetricsReport::from_records(&[rec(0.8, 1, Cohort::BothViews), rec(0.2, 0, Cohort::BothViews)]);
        assert_eq!(r.missing_view.n_pos + r.missing_view.n_neg, 0);
        assert!(r.render_text().contains("n/a"));
        assert!(r.render_markdown().contains("| Breasts with Missing Views | n/a |"));
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(Some(0.8032)), "80.32");
        assert_eq!(format_percent(None), "n/a");
    }

    #[test]
    fn malformed_report_is_rejected() {
        assert!(matches!(MetricsReport::from_json("{}"), Err(Error::MalformedReport(_))));
        assert!(matches!(MetricsReport::from_json("[1,2]"), Err(Error::MalformedReport(_))));
    }

    #[test]
    fn aggregate_averages_variants() {
        let mut a = rec(0.2, 1, Cohort::BothViews);
        a.breast_id = "x".into();
        let mut b = a.clone();
        b.score = 0.6;
        b.augment = AugmentOp::Rot90;
        let agg = aggregate_by_exam(&[a, b]);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].score - 0.4).abs() < 1e-15);
    }
}
