use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{roc_csv, roc_curve, MetricsReport, RocPoint};
use super::split::{make_subject_folds, SplitPlan};
use super::train::{history_csv, predict, train_model, EpochRecord, TrainConfig};
use crate::dfcn::DfcnTensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParameterCounts};

/// Everything a cross-validated run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    /// Patient class for sensitivity and AUC.
    pub positive_class: usize,
    /// Permute labels across subjects before splitting (chance-level control).
    pub shuffle_labels: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            positive_class: 1,
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub train_scans: usize,
    pub val_scans: usize,
    pub best_epoch: Option<usize>,
    pub metrics: MetricsReport,
    /// Binary tasks with both classes in the test set only.
    pub roc: Option<Vec<RocPoint>>,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation across folds (0 for a single fold).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: Stat,
    pub sensitivity: Option<Stat>,
    pub specificity: Option<Stat>,
    pub auc: Option<Stat>,
    /// Mean recall per class over the folds where the class was present.
    pub per_class_accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub plan: SplitPlan,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub parameter_count: ParameterCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub train_scans: usize,
    pub val_scans: usize,
    pub best_epoch: Option<usize>,
    pub metrics: MetricsReport,
    pub curve_file: String,
    pub roc_file: Option<String>,
}

/// Result document of a run. Contains no timestamps or host details, so
/// identical inputs give byte-identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full effective configuration of the run.
    pub config: serde_json::Value,
    pub parameter_count: ParameterCounts,
    pub folds: Vec<FoldManifest>,
    pub summary: Summary,
}

/// Independent per-fold seed derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    let mut z = master ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Permutes labels among subjects (every scan of a subject keeps sharing its
/// subject's new label).
pub fn shuffle_subject_labels(data: &mut [DfcnTensor], seed: u64) {
    let mut subject_labels: BTreeMap<String, usize> = BTreeMap::new();
    for s in data.iter() {
        subject_labels.entry(s.subject_id.clone()).or_insert(s.label);
    }
    let mut labels: Vec<usize> = subject_labels.values().copied().collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_4ff1_e000));
    for (slot, label) in subject_labels.values_mut().zip(labels) {
        *slot = label;
    }
    for s in data.iter_mut() {
        s.label = subject_labels[&s.subject_id];
    }
}

/// Subject-level k-fold cross-validation. Folds train concurrently on
/// independent seeds; results do not depend on scheduling.
pub fn cross_validate(data: &[DfcnTensor], config: &ExperimentConfig) -> Result<CvOutcome> {
    config.model.validate()?;
    config.train.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no scans to train on".into()));
    }
    let mut data = data.to_vec();
    if config.shuffle_labels {
        shuffle_subject_labels(&mut data, config.train.seed);
    }
    let subjects: Vec<&str> = data.iter().map(|s| s.subject_id.as_str()).collect();
    let plan = make_subject_folds(&subjects, config.folds, config.train.seed)?;
    let data = &data;

    let results: Vec<Result<FoldResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..plan.k)
            .map(|fold| {
                let plan = &plan;
                scope.spawn(move || run_fold(data, plan, fold, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&folds);
    let parameter_count = folds[0].params.count();
    Ok(CvOutcome {
        plan,
        folds,
        summary,
        parameter_count,
    })
}

/// Trains and scores one fold of `plan`.
pub fn train_fold(data: &[DfcnTensor], plan: &SplitPlan, fold: usize, config: &ExperimentConfig) -> Result<FoldResult> {
    if fold >= plan.k {
        return Err(Error::Usage(format!("fold {fold} out of range for {} folds", plan.k)));
    }
    run_fold(data, plan, fold, config)
}

fn run_fold(data: &[DfcnTensor], plan: &SplitPlan, fold: usize, config: &ExperimentConfig) -> Result<FoldResult> {
    let split = &plan.folds[fold];
    let pick = |idx: &[usize]| idx.iter().map(|&i| &data[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let hyper = TrainConfig {
        seed: fold_seed(config.train.seed, fold),
        ..config.train.clone()
    };
    let outcome = train_model(&train, &val, &config.model, &hyper)?;
    let probs = predict(&outcome.params, &test)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let metrics = MetricsReport::from_probabilities(&truth, &probs, config.positive_class)?;
    let roc = match metrics.auc {
        Some(_) => {
            let scores: Vec<f64> = probs.iter().map(|p| p[config.positive_class]).collect();
            let binary: Vec<usize> = truth.iter().map(|&t| usize::from(t == config.positive_class)).collect();
            Some(roc_curve(&scores, &binary)?)
        }
        None => None,
    };
    Ok(FoldResult {
        fold,
        test_subjects: plan.test_subjects(fold).into_iter().map(String::from).collect(),
        train_scans: train.len(),
        val_scans: val.len(),
        best_epoch: outcome.best_epoch,
        metrics,
        roc,
        history: outcome.history,
        params: outcome.params,
    })
}

fn summarize(folds: &[FoldResult]) -> Summary {
    let collect = |f: fn(&MetricsReport) -> Option<f64>| -> Option<Stat> {
        let v: Vec<f64> = folds.iter().filter_map(|r| f(&r.metrics)).collect();
        Stat::of(&v)
    };
    let classes = folds[0].metrics.per_class_accuracy.len();
    let per_class_accuracy = (0..classes)
        .map(|c| {
            let v: Vec<f64> = folds.iter().filter_map(|r| r.metrics.per_class_accuracy[c]).collect();
            Stat::of(&v).map(|s| s.mean)
        })
        .collect();
    Summary {
        accuracy: collect(|m| Some(m.accuracy)).expect("at least one fold"),
        sensitivity: collect(|m| m.sensitivity),
        specificity: collect(|m| m.specificity),
        auc: collect(|m| m.auc),
        per_class_accuracy,
    }
}

impl CvOutcome {
    /// Manifest plus its side files (per-epoch curves and ROC points) as
    /// `(file name, contents)` pairs, manifest last.
    pub fn artifacts(&self, config_echo: serde_json::Value) -> Result<(RunManifest, Vec<(String, String)>)> {
        let mut files = Vec::new();
        let mut folds = Vec::new();
        for r in &self.folds {
            let curve_file = format!("fold{}_curve.csv", r.fold);
            files.push((curve_file.clone(), history_csv(&r.history)));
            let roc_file = r.roc.as_ref().map(|points| {
                let name = format!("fold{}_roc.csv", r.fold);
                files.push((name.clone(), roc_csv(points)));
                name
            });
            folds.push(FoldManifest {
                fold: r.fold,
                test_subjects: r.test_subjects.clone(),
                train_scans: r.train_scans,
                val_scans: r.val_scans,
                best_epoch: r.best_epoch,
                metrics: r.metrics.clone(),
                curve_file,
                roc_file,
            });
        }
        let manifest = RunManifest {
            config: config_echo,
            parameter_count: self.parameter_count.clone(),
            folds,
            summary: self.summary.clone(),
        };
        files.push(("manifest.json".into(), serde_json::to_string_pretty(&manifest)? + "\n"));
        Ok((manifest, files))
    }
}
