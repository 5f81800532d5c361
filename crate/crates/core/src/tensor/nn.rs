//! Composite operations built from tape primitives.

use super::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one LSTM layer. Gate blocks are stacked in the order
/// input, forget, cell, output along the first axis of every tensor.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `4H × d_in`
    pub w_ih: Var,
    /// `4H × H`
    pub w_hh: Var,
    /// `4H`
    pub bias: Var,
}

/// One LSTM time step over a batch: `x` is `B×d_in`, `h` and `c` are `B×H`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    if tape.shape(w.w_hh) != [4 * hidden, hidden] {
        return Err(Error::dim(format!(
            "lstm: recurrent weight {:?} does not match hidden size {hidden}",
            tape.shape(w.w_hh)
        )));
    }
    let from_input = tape.linear(x, w.w_ih, Some(w.bias))?;
    let from_state = tape.linear(h, w.w_hh, None)?;
    let gates = tape.add(from_input, from_state)?;
    let i = tape.narrow(gates, 1, 0, hidden)?;
    let f = tape.narrow(gates, 1, hidden, hidden)?;
    let g = tape.narrow(gates, 1, 2 * hidden, hidden)?;
    let o = tape.narrow(gates, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Mean softmax cross-entropy plus `l2_lambda · Σ w²` over `penalized`
/// (the final layer's weight matrix; biases are not penalized).
pub fn cross_entropy_with_l2(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    l2_lambda: f64,
    penalized: Var,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if l2_lambda == 0.0 {
        return Ok(ce);
    }
    let sq = tape.sum_squares(penalized);
    let reg = tape.scale(sq, l2_lambda);
    tape.add(ce, reg)
}
