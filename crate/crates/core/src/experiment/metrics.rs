use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality on a labelled scan set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Correct predictions over all scans.
    pub accuracy: f64,
    /// Recall of the positive (patient) class; binary tasks only.
    pub sensitivity: Option<f64>,
    /// Recall of the negative (control) class; binary tasks only.
    pub specificity: Option<f64>,
    /// Recall of every class, `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Area under the ROC curve of the positive-class probability; binary
    /// tasks with both classes present only.
    pub auc: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// One operating point of a ROC curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::dim(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Data(format!("class index out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    /// Report from a confusion matrix. For two classes, `positive` is the
    /// patient class used for sensitivity; the other class is the control.
    pub fn from_confusion(confusion: Vec<Vec<usize>>, positive: usize) -> Result<Self> {
        let classes = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Usage("cannot evaluate an empty scan set".into()));
        }
        if positive >= classes {
            return Err(Error::config(format!("positive class {positive} out of range")));
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| ratio(row[c], row.iter().sum()))
            .collect();
        let (sensitivity, specificity) = if classes == 2 {
            (per_class_accuracy[positive], per_class_accuracy[1 - positive])
        } else {
            (None, None)
        };
        Ok(MetricsReport {
            accuracy: correct as f64 / total as f64,
            sensitivity,
            specificity,
            per_class_accuracy,
            auc: None,
            confusion,
        })
    }

    /// Report from per-scan class probabilities (`probs[i]` sums to 1).
    pub fn from_probabilities(truth: &[usize], probs: &[Vec<f64>], positive: usize) -> Result<Self> {
        let classes = probs.first().map_or(0, Vec::len);
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let mut report = Self::from_confusion(confusion_matrix(truth, &predicted, classes)?, positive)?;
        if classes == 2 && truth.contains(&0) && truth.contains(&1) {
            let scores: Vec<f64> = probs.iter().map(|p| p[positive]).collect();
            let binary: Vec<usize> = truth.iter().map(|&t| usize::from(t == positive)).collect();
            report.auc = Some(roc_auc(&scores, &binary)?);
        }
        Ok(report)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("ROC labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC is undefined unless both classes are present".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC with midranks: the probability that a random positive
/// scores above a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC points for every distinct threshold, from (0,0) to (1,1). A scan is
/// called positive when its score is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for (n, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(n + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            points.push(RocPoint {
                threshold: scores[k],
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            });
        }
    }
    Ok(points)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
