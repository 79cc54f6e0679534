//! Classification metrics: confusion matrices, precision/recall/F1, ROC
//! curves, and stratified splitting.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class id {id} out of range for {classes} classes")]
    IdOutOfRange { id: usize, classes: usize },
    #[error("class {0} has no samples")]
    EmptyClassRow(usize),
    #[error("ROC needs both positive and negative samples")]
    SingleClassOnly,
    #[error("class {class} has {count} samples, fewer than {k} folds")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("fold count must be at least 1")]
    ZeroFolds,
}

/// `K × K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// From row-major nested counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let k = rows.len();
        let mut counts = Vec::with_capacity(k * k);
        for r in rows {
            if r.len() != k {
                return Err(MetricsError::LengthMismatch { preds: r.len(), labels: k });
            }
            counts.extend_from_slice(r);
        }
        Ok(Self { classes: k, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn col_total(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.classes).map(|t| self.row(t).to_vec()).collect()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        for id in [p, t] {
            if id >= classes {
                return Err(MetricsError::IdOutOfRange { id, classes });
            }
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

/// Precision, recall and F1 of one class. A zero denominator yields 0 and
/// sets `undefined`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: bool,
}

/// `2pr/(p + r)`, or `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let d = precision + recall;
    (d > 0.0).then(|| 2.0 * precision * recall / d)
}

pub fn precision_recall_f1(cm: &ConfusionMatrix, class: usize) -> ClassScores {
    let tp = cm.get(class, class) as f64;
    let predicted = cm.col_total(class) as f64;
    let actual = cm.row_total(class) as f64;
    let mut undefined = false;
    let mut ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else {
            undefined = true;
            0.0
        }
    };
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, actual);
    let f1 = f1_score(precision, recall).unwrap_or_else(|| {
        undefined = true;
        0.0
    });
    ClassScores { precision, recall, f1, undefined }
}

/// Share of a class's samples predicted correctly (diagonal over row total),
/// the per-class figure the original COVID-19 worked example calls PPV.
/// Standard PPV is [`ClassScores::precision`].
pub fn paper_ppv(cm: &ConfusionMatrix, class: usize) -> Result<f64, MetricsError> {
    let total = cm.row_total(class);
    if total == 0 {
        return Err(MetricsError::EmptyClassRow(class));
    }
    Ok(cm.get(class, class) as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class has no samples.
    pub paper_ppv: Option<f64>,
    pub support: u64,
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassReport>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, labels: &[String]) -> Self {
        let k = cm.classes();
        let per_class: Vec<ClassReport> = (0..k)
            .map(|c| {
                let s = precision_recall_f1(cm, c);
                ClassReport {
                    label: labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    paper_ppv: paper_ppv(cm, c).ok(),
                    support: cm.row_total(c),
                    undefined: s.undefined,
                }
            })
            .collect();
        let mean = |f: fn(&ClassReport) -> f64| {
            if k == 0 {
                0.0
            } else {
                per_class.iter().map(f).sum::<f64>() / k as f64
            }
        };
        Self {
            macro_precision: mean(|r| r.precision),
            macro_recall: mean(|r| r.recall),
            macro_f1: mean(|r| r.f1),
            accuracy: cm.accuracy(),
            confusion: cm.rows(),
            per_class,
        }
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|r| r.label.len()).max().unwrap_or(5).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} {:>9} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "ppv*", "support");
        for r in &self.per_class {
            let ppv = r.paper_ppv.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<width$} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>8}",
                r.label, r.precision, r.recall, r.f1, ppv, r.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>8}",
            "macro",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            "",
            self.per_class.iter().map(|r| r.support).sum::<u64>()
        );
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        let _ = writeln!(out, "* ppv = correct / class total");
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        out
    }
}

/// One-vs-rest ROC by sweeping every distinct score as a threshold; tied
/// scores move both rates in one step. AUC by the trapezoid rule.
pub fn roc_auc_ovr(scores: &[f64], positive: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch { preds: scores.len(), labels: positive.len() });
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(MetricsError::SingleClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// Stratified `k`-fold partition. Classes are dealt round-robin after a
/// seeded shuffle, so per-class counts differ by at most one between folds.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroFolds);
    }
    let mut groups = group_by_class(labels);
    for (class, g) in groups.iter().enumerate() {
        if !g.is_empty() && g.len() < k {
            return Err(MetricsError::ClassTooSmall { class, count: g.len(), k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for g in &mut groups {
        g.shuffle(&mut rng);
        for (j, &i) in g.iter().enumerate() {
            folds[(offset + j) % k].push(i);
        }
        offset += g.len();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Seeded stratified holdout: about `fraction` of every class is held out
/// (at least one sample of any class with two or more, never a whole class).
/// Returns `(kept, held)`, both sorted.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for mut g in group_by_class(labels) {
        g.shuffle(&mut rng);
        let n = g.len();
        let mut h = (n as f64 * fraction + 0.5).floor() as usize;
        if fraction > 0.0 && n >= 2 {
            h = h.max(1);
        }
        h = h.min(n.saturating_sub(1));
        held.extend_from_slice(&g[..h]);
        kept.extend_from_slice(&g[h..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}
