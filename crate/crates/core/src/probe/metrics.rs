//! Evaluation metrics for probe outputs.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::numeric::Array;

use super::Task;

/// Named metric values in a fixed, task-dependent order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    entries: Vec<(&'static str, f64)>,
}

impl MetricReport {
    fn push(&mut self, name: &'static str, value: f64) {
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(&'static str, f64)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }
}

/// Flat JSON object, one `"key": value` pair per line.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{{")?;
        for (i, (name, value)) in self.entries.iter().enumerate() {
            let sep = if i + 1 < self.entries.len() { "," } else { "" };
            writeln!(f, "  \"{name}\": {value}{sep}")?;
        }
        writeln!(f, "}}")
    }
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::OneClassPresent);
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Area under the precision-recall step curve: the sum over distinct score
/// thresholds (descending) of recall gain times precision at that threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut seen, mut area, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        seen += (j - i + 1) as f64;
        let recall = tp / pos;
        area += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

impl Counts {
    fn precision(self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn f1(self) -> f64 {
        ratio(2.0 * self.tp, 2.0 * self.tp + self.fp + self.fn_)
    }
}

/// `num / den`, zero when the denominator is zero.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn class_labels(labels: &[f64], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 && (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(Error::InvalidInput(format!("label {l} is not a class index below {classes}")))
            }
        })
        .collect()
}

/// Scores each prediction against its label.
///
/// * `Binary`: `predictions` is `n × 1` with the positive-class probability;
///   labels are 0 or 1; hard decisions threshold at 0.5.
/// * `Multiclass`: `predictions` is `n × C` class scores; labels are class
///   indices; hard decisions take the argmax. AUROC and AUPRC are one-vs-rest
///   macro averages and precision, recall and F1 are macro averages.
/// * `Regression`: `predictions` is `n × 1`.
pub fn compute_metrics(predictions: &Array, labels: &[f64], task: Task) -> Result<MetricReport> {
    if !predictions.is_matrix() || predictions.rows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "predictions of shape {:?} do not match {} labels",
            predictions.shape(),
            labels.len()
        )));
    }
    match task {
        Task::Regression => {
            if predictions.cols() != 1 {
                return Err(Error::InvalidInput("regression predictions need one column".into()));
            }
            regression_metrics(predictions.data(), labels)
        }
        Task::Binary => {
            if predictions.cols() != 1 {
                return Err(Error::InvalidInput("binary predictions need one column".into()));
            }
            let y = class_labels(labels, 2)?;
            let scores = predictions.data();
            let decided: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
            let truth: Vec<bool> = y.iter().map(|&c| c == 1).collect();
            let counts = confusion(&y, &decided, 2)[1];
            let mut r = MetricReport::default();
            r.push("auroc", auroc(scores, &truth)?);
            r.push("auprc", auprc(scores, &truth)?);
            r.push("f1", counts.f1());
            r.push("accuracy", accuracy(&y, &decided));
            r.push("precision", counts.precision());
            r.push("recall", counts.recall());
            Ok(r)
        }
        Task::Multiclass => {
            let c = predictions.cols();
            if c < 2 {
                return Err(Error::InvalidInput("multiclass predictions need at least two columns".into()));
            }
            let y = class_labels(labels, c)?;
            let decided: Vec<usize> = (0..predictions.rows()).map(|i| argmax(predictions.row(i))).collect();
            let (mut roc, mut pr) = (0.0, 0.0);
            for class in 0..c {
                let scores: Vec<f64> = (0..predictions.rows()).map(|i| predictions.get(i, class)).collect();
                let truth: Vec<bool> = y.iter().map(|&l| l == class).collect();
                roc += auroc(&scores, &truth)?;
                pr += auprc(&scores, &truth)?;
            }
            let counts = confusion(&y, &decided, c);
            let macro_avg = |f: fn(Counts) -> f64| counts.iter().map(|&k| f(k)).sum::<f64>() / c as f64;
            let mut r = MetricReport::default();
            r.push("auroc", roc / c as f64);
            r.push("auprc", pr / c as f64);
            r.push("f1", macro_avg(Counts::f1));
            r.push("accuracy", accuracy(&y, &decided));
            r.push("precision", macro_avg(Counts::precision));
            r.push("recall", macro_avg(Counts::recall));
            Ok(r)
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

fn accuracy(truth: &[usize], decided: &[usize]) -> f64 {
    truth.iter().zip(decided).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn confusion(truth: &[usize], decided: &[usize], classes: usize) -> Vec<Counts> {
    let mut counts = vec![Counts::default(); classes];
    for (&t, &d) in truth.iter().zip(decided) {
        if t == d {
            counts[t].tp += 1.0;
        } else {
            counts[d].fp += 1.0;
            counts[t].fn_ += 1.0;
        }
    }
    counts
}

fn regression_metrics(pred: &[f64], labels: &[f64]) -> Result<MetricReport> {
    if pred.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("regression values must be finite".into()));
    }
    let n = labels.len() as f64;
    let mae = pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    let mean_y = labels.iter().sum::<f64>() / n;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidInput("R² and Pearson need labels with non-zero variance".into()));
    }
    let mean_p = pred.iter().sum::<f64>() / n;
    let ss_p: f64 = pred.iter().map(|p| (p - mean_p).powi(2)).sum();
    let cov: f64 = pred.iter().zip(labels).map(|(p, y)| (p - mean_p) * (y - mean_y)).sum();
    let pearson = if ss_p > 0.0 { (cov / (ss_p.sqrt() * ss_tot.sqrt())).clamp(-1.0, 1.0) } else { 0.0 };
    let mut r = MetricReport::default();
    r.push("mae", mae);
    r.push("rmse", (ss_res / n).sqrt());
    r.push("r2", 1.0 - ss_res / ss_tot);
    r.push("pearson", pearson);
    Ok(r)
}
