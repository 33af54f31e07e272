use crate::error::{Error, Result};

use super::{Tape, Var};

/// Gate blocks in the packed `4H` projection, in order.
pub const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

/// Tape handles for one LSTM direction. `w_x` is `[in, 4H]`, `w_h` is
/// `[H, 4H]`, `bias` is `[4H]`, each packed in [`GATES`] order.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// One LSTM step from a raw input `x_t` (`[B, in]`).
pub fn lstm_cell(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let x_proj = tape.matmul(x_t, p.w_x)?;
    lstm_step(tape, x_proj, h_prev, c_prev, p.w_h, p.bias)
}

/// One LSTM step given the already projected input `x_t · W_x` (`[B, 4H]`).
///
/// `c_t = f ⊙ c_prev + i ⊙ g`, `h_t = o ⊙ tanh(c_t)`.
pub fn lstm_step(tape: &mut Tape, x_proj: Var, h_prev: Var, c_prev: Var, w_h: Var, bias: Var) -> Result<(Var, Var)> {
    let hidden = tape.value(w_h).shape()[0];
    let hs = tape.value(h_prev).shape().to_vec();
    let cs = tape.value(c_prev).shape().to_vec();
    if hs.len() != 2 || hs[1] != hidden || hs != cs || tape.value(x_proj).shape() != [hs[0], 4 * hidden] {
        return Err(Error::shape("lstm_cell", tape.value(x_proj).shape(), &hs));
    }
    let rec = tape.matmul(h_prev, w_h)?;
    let pre = tape.add(x_proj, rec)?;
    let pre = tape.add_row(pre, bias)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}
