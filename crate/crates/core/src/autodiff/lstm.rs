use super::{Tape, Var};
use crate::error::{shape_err, Result};

/// Parameters of one LSTM direction as recorded on a tape. Gate rows are
/// stacked in the order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellVars {
    /// `[4*hidden, input]`
    pub w_ih: Var,
    /// `[4*hidden, hidden]`
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// One step of a standard LSTM cell:
///
/// ```text
/// [i f g o] = x W_ih^T + b_ih + h W_hh^T + b_hh
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(c')
/// ```
///
/// Returns `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmCellVars,
) -> Result<(Var, Var)> {
    let hidden = match tape.shape(p.w_hh) {
        &[four_h, h] if four_h == 4 * h => h,
        s => {
            return Err(shape_err(
                "lstm_cell",
                alloc::format!("recurrent weight {s:?} is not [4h, h]"),
            ))
        }
    };
    if tape.shape(h_prev).last() != Some(&hidden) || tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(shape_err(
            "lstm_cell",
            "state width does not match hidden size",
        ));
    }
    let from_x = tape.linear(x, p.w_ih, Some(p.b_ih))?;
    let from_h = tape.linear(h_prev, p.w_hh, Some(p.b_hh))?;
    let gates = tape.add(from_x, from_h)?;
    let i = tape.slice_last(gates, 0, hidden)?;
    let f = tape.slice_last(gates, hidden, hidden)?;
    let g = tape.slice_last(gates, 2 * hidden, hidden)?;
    let o = tape.slice_last(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
