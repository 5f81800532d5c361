use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, MetricsReport};
use crate::dfcn::DfcnTensor;
use crate::error::{Error, Result};
use crate::model::{model_forward, model_loss, stack_batch, AttentionScores, ModelConfig, ModelParams};
use crate::tensor::{Adam, AdamConfig, Tape};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("lr must be a positive number"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch (the initial ones when no epoch ran).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        ));
    }
    out
}

const EVAL_BATCH: usize = 32;

/// Eval-mode loss (including the L2 term) and accuracy over `scans`.
fn evaluate_loss(params: &ModelParams, scans: &[&DfcnTensor]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in scans.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(stack_batch(&params.config, chunk)?);
        let out = model_forward(&mut tape, params, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let l = model_loss(&mut tape, params, &out, &labels)?;
        loss += tape.value(l).data()[0] * chunk.len() as f64;
        let classes = params.config.num_classes;
        correct += tape
            .value(out.logits)
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok((loss / scans.len() as f64, correct as f64 / scans.len() as f64))
}

/// Mini-batch Adam training. After every epoch the model is scored on `val`
/// (on `train` when `val` is empty) and the parameters with the best
/// accuracy are kept, ties going to lower loss and then the earlier epoch.
pub fn train_model(
    train: &[&DfcnTensor],
    val: &[&DfcnTensor],
    config: &ModelConfig,
    hyper: &TrainConfig,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= config.num_classes) {
        return Err(Error::Data(format!(
            "scan {} has label {} but the model has {} classes",
            s.scan_id, s.label, config.num_classes
        )));
    }
    let mut params = ModelParams::init(config, hyper.seed)?;
    let mut adam = Adam::new(hyper.adam, &params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_da7a);
    let selection = if val.is_empty() { train } else { val };
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(hyper.batch_size) {
            let scans: Vec<&DfcnTensor> = batch.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = scans.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(stack_batch(config, &scans)?);
            let out = model_forward(&mut tape, &params, x, true, &mut rng)?;
            let loss = model_loss(&mut tape, &params, &out, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            loss_sum += value * scans.len() as f64;
            correct += tape
                .value(out.logits)
                .data()
                .chunks(config.num_classes)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            let stats = out.bn_stats;
            params.store.zero_grad();
            tape.backward(loss)?.accumulate_into(&mut params.store);
            adam.step(&mut params.store);
            params.apply_bn_stats(&stats);
        }
        let (val_loss, val_accuracy) = evaluate_loss(&params, selection)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_accuracy, val_loss, epoch, params.clone()));
        }
    }
    Ok(match best {
        Some((_, _, epoch, kept)) => TrainOutcome {
            params: kept,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params,
            history,
            best_epoch: None,
        },
    })
}

/// Class probabilities for every scan, eval mode.
pub fn predict(params: &ModelParams, scans: &[&DfcnTensor]) -> Result<Vec<Vec<f64>>> {
    let mut probs = Vec::with_capacity(scans.len());
    for chunk in scans.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(stack_batch(&params.config, chunk)?);
        let out = model_forward(&mut tape, params, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        for row in tape.value(out.logits).data().chunks(params.config.num_classes) {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            probs.push(exp.into_iter().map(|e| e / z).collect());
        }
    }
    Ok(probs)
}

/// Eval-mode LSTM features (final hidden state after ReLU), one row per scan.
pub fn extract_features(params: &ModelParams, scans: &[&DfcnTensor]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(scans.len());
    for chunk in scans.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(stack_batch(&params.config, chunk)?);
        let out = model_forward(&mut tape, params, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        rows.extend(tape.value(out.features).data().chunks(params.config.lstm_hidden).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Scores `scans` with `params`. `positive` is the patient class for
/// sensitivity and AUC in binary tasks.
pub fn evaluate_metrics(params: &ModelParams, scans: &[&DfcnTensor], positive: usize) -> Result<MetricsReport> {
    if scans.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty scan set".into()));
    }
    let probs = predict(params, scans)?;
    let truth: Vec<usize> = scans.iter().map(|s| s.label).collect();
    MetricsReport::from_probabilities(&truth, &probs, positive)
}

/// Attention score matrices of one scan from a single eval-mode forward pass.
pub fn extract_attention(params: &ModelParams, scan: &DfcnTensor) -> Result<AttentionScores> {
    if !params.config.dca_enabled {
        return Err(Error::Usage("the model has no attention layer (trained with DCA disabled)".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(stack_batch(&params.config, &[scan])?);
    let out = model_forward(&mut tape, params, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let scores = out.scores.ok_or_else(|| Error::Usage("forward pass produced no attention scores".into()))?;
    AttentionScores::from_tape(&tape, scores, 0)
}
