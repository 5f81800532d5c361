use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dcacrn::dfcn::WindowSpec;
use dcacrn::experiment::{ExperimentConfig, SynthSpec, TrainConfig};
use dcacrn::model::{DkMode, ModelConfig};
use dcacrn::tensor::AdamConfig;
use dcacrn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Effective run configuration. The same document is accepted by `--config`
/// and echoed into every manifest, so a manifest reproduces its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; required.
    pub seed: Option<u64>,
    /// Dataset directory containing `scans.csv`.
    pub data: Option<PathBuf>,
    /// Class names in label order; defaults to the sorted names in the dataset.
    pub classes: Option<Vec<String>>,
    /// Generator settings for `synth`; the benchmark layout when absent.
    pub synth: Option<SynthSpec>,
    pub window: WindowSpec,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub folds: usize,
    /// Patient class index for sensitivity and AUC.
    pub positive_class: usize,
    pub shuffle_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            data: None,
            classes: None,
            synth: None,
            window: WindowSpec::default(),
            model: ModelConfig::default(),
            epochs: 200,
            batch: 16,
            lr: AdamConfig::default().lr,
            folds: 5,
            positive_class: 1,
            shuffle_labels: false,
        }
    }
}

/// Flags shared by every subcommand. Flags override the config file, which
/// overrides the defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written outside it
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// L2 penalty on the output layer weights
    #[arg(long, global = true)]
    pub l2: Option<f64>,
    /// Train without the attention layer
    #[arg(long, global = true)]
    pub no_dca: bool,
    #[arg(long, global = true, value_name = "K")]
    pub folds: Option<usize>,
    /// Attention scaling extent
    #[arg(long, global = true, value_parser = ["keylen", "regions"])]
    pub dk_mode: Option<String>,
    /// Dataset directory
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub s1: Option<usize>,
    #[arg(long, global = true)]
    pub s2: Option<usize>,
    #[arg(long, global = true)]
    pub s3: Option<usize>,
    #[arg(long, global = true)]
    pub c1: Option<usize>,
    #[arg(long, global = true)]
    pub k1: Option<usize>,
    #[arg(long, global = true)]
    pub k2: Option<usize>,
}

/// A validated configuration plus which model extents the user fixed.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub run: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// `model.*` keys present in the config file.
    pub explicit_model_keys: BTreeSet<String>,
}

fn read_config_file(path: &Path) -> Result<(RunConfig, BTreeSet<String>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let explicit = value
        .get("model")
        .and_then(|m| m.as_object())
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    let run: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::Config(format!("{}: key `{key}`: {}", path.display(), e.inner()))
    })?;
    Ok((run, explicit))
}

/// Merges defaults, the config file and flags, then checks every invariant
/// that does not depend on the data. Commands that draw random numbers pass
/// `require_seed`; the others run without one.
pub fn resolve(flags: &Overrides, require_seed: bool) -> Result<Resolved> {
    let (mut run, explicit_model_keys) = match &flags.config {
        Some(path) => read_config_file(path)?,
        None => (RunConfig::default(), BTreeSet::new()),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    if flags.seed.is_some() {
        run.seed = flags.seed;
    }
    if flags.data.is_some() {
        run.data.clone_from(&flags.data);
    }
    set(&mut run.epochs, flags.epochs);
    set(&mut run.batch, flags.batch);
    set(&mut run.folds, flags.folds);
    if let Some(lr) = flags.lr {
        run.lr = lr;
    }
    if let Some(l2) = flags.l2 {
        run.model.l2_lambda = l2;
    }
    if flags.no_dca {
        run.model.dca_enabled = false;
    }
    if let Some(mode) = &flags.dk_mode {
        run.model.dk_mode = mode.parse::<DkMode>()?;
    }
    set(&mut run.model.s1, flags.s1);
    set(&mut run.model.s2, flags.s2);
    set(&mut run.model.s3, flags.s3);
    set(&mut run.model.c1, flags.c1);
    set(&mut run.model.k1, flags.k1);
    set(&mut run.model.k2, flags.k2);

    let seed = match run.seed {
        Some(seed) => seed,
        None if !require_seed => 0,
        None => {
            return Err(Error::Config(
                "key `seed`: a seed is required (--seed or \"seed\" in the config file)".into(),
            ))
        }
    };
    let out = flags
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out DIR)".into()))?;
    if run.batch == 0 {
        return Err(Error::Config("key `batch`: must be at least 1".into()));
    }
    if !(run.lr > 0.0 && run.lr.is_finite()) {
        return Err(Error::Config(format!("key `lr`: must be positive, got {}", run.lr)));
    }
    if run.folds < 2 {
        return Err(Error::Config(format!("key `folds`: need at least 2, got {}", run.folds)));
    }
    run.window.count(run.window.length.max(2))?;
    run.model
        .validate()
        .map_err(|e| Error::Config(format!("model: {}", e.to_string().trim_start_matches("configuration error: "))))?;
    if let Some(data) = &run.data {
        if !data.join(dcacrn::dfcn::DATASET_MANIFEST).is_file() {
            return Err(Error::Config(format!(
                "key `data`: {} has no {}",
                data.display(),
                dcacrn::dfcn::DATASET_MANIFEST
            )));
        }
    }
    Ok(Resolved {
        run,
        seed,
        out,
        explicit_model_keys,
    })
}

impl Resolved {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.run.model.clone(),
            train: TrainConfig {
                epochs: self.run.epochs,
                batch_size: self.run.batch,
                adam: AdamConfig {
                    lr: self.run.lr,
                    ..AdamConfig::default()
                },
                seed: self.seed,
            },
            folds: self.run.folds,
            positive_class: self.run.positive_class,
            shuffle_labels: self.run.shuffle_labels,
        }
    }

    /// Fills a data-determined model extent, rejecting a conflicting value
    /// the user set explicitly.
    pub fn fit_extent(&mut self, key: &str, observed: usize) -> Result<()> {
        let slot = match key {
            "regions" => &mut self.run.model.regions,
            "windows" => &mut self.run.model.windows,
            "num_classes" => &mut self.run.model.num_classes,
            _ => unreachable!("unknown extent {key}"),
        };
        if self.explicit_model_keys.contains(key) && *slot != observed {
            return Err(Error::Data(format!(
                "key `model.{key}` is {} but the data has {observed}",
                *slot
            )));
        }
        *slot = observed;
        Ok(())
    }

    /// The run configuration with the seed filled in, as echoed to manifests.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.run).expect("config serializes")
    }
}
