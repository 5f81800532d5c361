//! Subject-level cross-validation, training, metrics, feature t-tests,
//! attention inspection and a planted-block synthetic data generator.

mod metrics;
mod run;
mod split;
mod synth;
mod train;
mod ttest;

pub use metrics::{argmax, confusion_matrix, roc_auc, roc_csv, roc_curve, MetricsReport, RocPoint};
pub use run::{
    cross_validate, fold_seed, shuffle_subject_labels, train_fold, CvOutcome, ExperimentConfig, FoldManifest,
    FoldResult, RunManifest, Stat, Summary,
};
pub use split::{make_subject_folds, FoldSplit, SplitPlan};
pub use synth::{synth_generate, ClassPattern, PlantedBlock, SynthSpec};
pub use train::{
    evaluate_metrics, extract_attention, extract_features, history_csv, predict, train_model, EpochRecord,
    TrainConfig, TrainOutcome,
};
pub use ttest::{feature_ttest, student_t_two_sided, FeatureTest, TTestReport};
