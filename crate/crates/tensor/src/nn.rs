//! Small composed layers built from tape primitives.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Weights of one LSTM cell. `w_ih` is `[4H, D]`, `w_hh` is `[4H, H]`, and
/// `bias` is `[4H]`, with gates packed in (input, forget, candidate, output)
/// order along the leading extent.
#[derive(Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step over a `[N, D]` input batch and `[N, H]` state:
///
/// ```text
/// i,f,g,o = split(x W_ih^T + h W_hh^T + b)
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(c')
/// ```
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w: LstmWeights,
) -> (Var, Var) {
    let hidden = tape.value(h).shape()[1];
    assert_eq!(
        tape.value(w.w_hh).shape(),
        &[4 * hidden, hidden],
        "lstm_step: w_hh disagrees with state width"
    );
    let from_x = tape.linear(x, w.w_ih, Some(w.bias));
    let from_h = tape.linear(h, w.w_hh, None);
    let gates = tape.add(from_x, from_h);
    let i_gate = tape.narrow_cols(gates, 0, hidden);
    let f_gate = tape.narrow_cols(gates, hidden, hidden);
    let g_gate = tape.narrow_cols(gates, 2 * hidden, hidden);
    let o_gate = tape.narrow_cols(gates, 3 * hidden, hidden);
    let i_act = tape.sigmoid(i_gate);
    let f_act = tape.sigmoid(f_gate);
    let g_act = tape.tanh(g_gate);
    let o_act = tape.sigmoid(o_gate);
    let keep = tape.mul(f_act, c);
    let write = tape.mul(i_act, g_act);
    let c_new = tape.add(keep, write);
    let c_tanh = tape.tanh(c_new);
    let h_new = tape.mul(o_act, c_tanh);
    (h_new, c_new)
}
