//! Forward network: Con1 edge-to-node aggregation, per-channel attention
//! reconstruction, Con2/Con3 aggregation, LSTM and the fully connected head.

use rand::Rng;

use super::{BoundParams, ConvVars, DcaVars, ModelConfig, ModelParams};
use crate::dfcn::DfcnTensor;
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy_with_l2, lstm_step, BatchNormState, BatchStats, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Output of a convolution block.
#[derive(Clone, Debug)]
pub struct ConvOutput {
    /// Convolution plus bias, before normalization.
    pub pre_norm: Var,
    /// After batch normalization, ReLU and dropout.
    pub output: Var,
    pub stats: Option<BatchStats>,
}

/// Output of the attention layer.
#[derive(Clone, Copy, Debug)]
pub struct DcaOutput {
    /// `P·V + I`, before layer normalization.
    pub pre_norm: Var,
    pub output: Var,
    /// Row-stochastic scores, `B×C×N×N`.
    pub scores: Var,
}

/// Per-sample extents observed during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    pub con1: Vec<usize>,
    pub dca: Option<Vec<usize>>,
    pub con2: Vec<usize>,
    pub con3: Vec<usize>,
    /// (steps, features per step)
    pub lstm_input: (usize, usize),
    pub lstm_output: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub logits: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Raw class scores, `B×num_classes`.
    pub logits: Var,
    /// Final LSTM state after ReLU, `B×lstm_hidden`: the learned sequence features.
    pub features: Var,
    /// Attention scores when the attention layer is enabled.
    pub scores: Option<Var>,
    pub bound: BoundParams,
    /// Batch statistics of Con1, Con2, Con3 (training mode only).
    pub bn_stats: Vec<BatchStats>,
    pub trace: ShapeTrace,
}

fn per_sample(shape: &[usize]) -> Vec<usize> {
    shape[1..].to_vec()
}

/// Stacks dFCN tensors into a `B×T×N×N` batch after checking them against `config`.
pub fn stack_batch(config: &ModelConfig, scans: &[&DfcnTensor]) -> Result<Tensor> {
    for s in scans {
        if s.windows != config.windows || s.regions != config.regions {
            return Err(Error::dim(format!(
                "scan {} is {}×{}×{}, model expects {}×{}×{}",
                s.scan_id, s.windows, s.regions, s.regions, config.windows, config.regions, config.regions
            )));
        }
    }
    let mut data = Vec::with_capacity(scans.len() * config.windows * config.regions * config.regions);
    for s in scans {
        data.extend_from_slice(&s.values);
    }
    Tensor::new(vec![scans.len(), config.windows, config.regions, config.regions], data)
}

/// Batch normalization, ReLU and dropout after a convolution.
fn conv_tail<R: Rng + ?Sized>(
    tape: &mut Tape,
    pre_norm: Var,
    vars: &ConvVars,
    bn: &BatchNormState,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<ConvOutput> {
    let (normed, stats) = tape.batch_norm(pre_norm, vars.gamma, vars.beta, bn, training)?;
    let act = tape.relu(normed);
    let output = tape.dropout(act, dropout, training, rng)?;
    Ok(ConvOutput {
        pre_norm,
        output,
        stats,
    })
}

/// Con1 on a `B×T×N×N` batch: for every region row `i`,
/// `out[k,i,t] = Σ_j Σ_s W[k,j,s]·F[t+s,i,j] + b[k]` with temporal stride 1,
/// giving `B×C1×N×(T−S1+1)`.
pub fn con1_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &ModelConfig,
    input: Var,
    vars: &ConvVars,
    bn: &BatchNormState,
    training: bool,
    rng: &mut R,
) -> Result<ConvOutput> {
    let s = tape.shape(input);
    if s.len() != 4 || s[1] != config.windows || s[2] != config.regions || s[3] != config.regions {
        return Err(Error::dim(format!(
            "Con1 expects B×{}×{}×{}, got {s:?}",
            config.windows, config.regions, config.regions
        )));
    }
    // [b, t, i, j] -> [b, j, i, t]: region j becomes the input channel.
    let rows = tape.permute(input, &[0, 3, 2, 1])?;
    let pre = tape.conv2d(rows, vars.weight, vars.bias, (1, 1))?;
    conv_tail(tape, pre, vars, bn, config.dropout_conv, training, rng)
}

/// Per-channel attention reconstruction on `I = B×C×N×U`:
/// `Q, K, V = w_Q·I, w_K·I, w_V·I` (one scalar per channel),
/// `P = softmax_rows(Q·Kᵀ/√d_k)`, `O = LN(P·V + I)`.
pub fn dca_forward(tape: &mut Tape, input: Var, vars: &DcaVars, dk: usize) -> Result<DcaOutput> {
    if tape.shape(input).len() != 4 {
        return Err(Error::dim("attention input must be B×C×N×U"));
    }
    let transform = |tape: &mut Tape, w: Var, b: Option<Var>| -> Result<Var> {
        let scaled = tape.channel_scale(input, w)?;
        match b {
            Some(b) => tape.channel_shift(scaled, b),
            None => Ok(scaled),
        }
    };
    let q = transform(tape, vars.wq, vars.bias.map(|b| b[0]))?;
    let k = transform(tape, vars.wk, vars.bias.map(|b| b[1]))?;
    let v = transform(tape, vars.wv, vars.bias.map(|b| b[2]))?;
    let kt = tape.transpose_last2(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
    let scores = tape.softmax_rows(logits)?;
    let reconstructed = tape.matmul(scores, v)?;
    let pre_norm = tape.add(reconstructed, input)?;
    let output = tape.layer_norm(pre_norm, None, None, LAYER_NORM_EPS)?;
    Ok(DcaOutput {
        pre_norm,
        output,
        scores,
    })
}

/// Con2: a kernel spanning all regions and channels, `B×C1×N×U1 → B×K1×1×(U1−S2+1)`.
pub fn con2_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &ModelConfig,
    input: Var,
    vars: &ConvVars,
    bn: &BatchNormState,
    training: bool,
    rng: &mut R,
) -> Result<ConvOutput> {
    let pre = tape.conv2d(input, vars.weight, vars.bias, (1, 1))?;
    conv_tail(tape, pre, vars, bn, config.dropout_conv, training, rng)
}

/// Con3: temporal convolution with stride 2, `B×K1×1×U → B×K2×1×U2`.
pub fn con3_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &ModelConfig,
    input: Var,
    vars: &ConvVars,
    bn: &BatchNormState,
    training: bool,
    rng: &mut R,
) -> Result<ConvOutput> {
    let pre = tape.conv2d(input, vars.weight, vars.bias, (1, 2))?;
    conv_tail(tape, pre, vars, bn, config.dropout_conv, training, rng)
}

/// Head output: logits plus the LSTM features they were computed from.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub features: Var,
    pub fc1: Var,
    pub fc2: Var,
    pub logits: Var,
}

/// LSTM over the `U2` steps of a `B×K2×1×U2` input (K2 features per step),
/// final hidden state → ReLU → dropout → FC → ReLU → FC → ReLU → FC.
pub fn temporal_head_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &ModelConfig,
    input: Var,
    bound: &BoundParams,
    training: bool,
    rng: &mut R,
) -> Result<HeadOutput> {
    let s = tape.shape(input).to_vec();
    let &[batch, features, one, steps] = s.as_slice() else {
        return Err(Error::dim(format!("head expects B×K2×1×U2, got {s:?}")));
    };
    if one != 1 {
        return Err(Error::dim(format!("head expects a singleton region axis, got {s:?}")));
    }
    let hidden = config.lstm_hidden;
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[batch, hidden]));
    for t in 0..steps {
        let step = tape.narrow(input, 3, t, 1)?;
        let x = tape.reshape(step, &[batch, features])?;
        (h, c) = lstm_step(tape, x, h, c, &bound.lstm)?;
    }
    let feats = tape.relu(h);
    let dropped = tape.dropout(feats, config.dropout_lstm, training, rng)?;
    let fc1 = tape.linear(dropped, bound.fc1.weight, Some(bound.fc1.bias))?;
    let fc1 = tape.relu(fc1);
    let fc2 = tape.linear(fc1, bound.fc2.weight, Some(bound.fc2.bias))?;
    let fc2 = tape.relu(fc2);
    let logits = tape.linear(fc2, bound.fc_out.weight, Some(bound.fc_out.bias))?;
    Ok(HeadOutput {
        features: feats,
        fc1,
        fc2,
        logits,
    })
}

/// Full network on a `B×T×N×N` input variable.
pub fn model_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    input: Var,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let config = &params.config;
    let bound = params.bind(tape);
    let c1 = con1_forward(tape, config, input, &bound.con1, &params.bn[0], training, rng)?;
    let (features_in, scores, dca_shape) = match &bound.dca {
        Some(vars) => {
            let out = dca_forward(tape, c1.output, vars, config.dk())?;
            let shape = per_sample(tape.shape(out.output));
            (out.output, Some(out.scores), Some(shape))
        }
        None => (c1.output, None, None),
    };
    let c2 = con2_forward(tape, config, features_in, &bound.con2, &params.bn[1], training, rng)?;
    let c3 = con3_forward(tape, config, c2.output, &bound.con3, &params.bn[2], training, rng)?;
    let head = temporal_head_forward(tape, config, c3.output, &bound, training, rng)?;

    let c3_shape = per_sample(tape.shape(c3.output));
    let trace = ShapeTrace {
        input: per_sample(tape.shape(input)),
        con1: per_sample(tape.shape(c1.output)),
        dca: dca_shape,
        con2: per_sample(tape.shape(c2.output)),
        lstm_input: (c3_shape[2], c3_shape[0]),
        con3: c3_shape,
        lstm_output: tape.shape(head.features)[1],
        fc1: tape.shape(head.fc1)[1],
        fc2: tape.shape(head.fc2)[1],
        logits: tape.shape(head.logits)[1],
    };
    let bn_stats = [c1.stats, c2.stats, c3.stats].into_iter().flatten().collect();
    Ok(ForwardOutput {
        logits: head.logits,
        features: head.features,
        scores,
        bound,
        bn_stats,
        trace,
    })
}

/// Training objective: mean cross-entropy plus the L2 penalty on the final
/// layer's weights.
pub fn model_loss(tape: &mut Tape, params: &ModelParams, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
    cross_entropy_with_l2(tape, out.logits, labels, params.config.l2_lambda, out.bound.fc_out.weight)
}
