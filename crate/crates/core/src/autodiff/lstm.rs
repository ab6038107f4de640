use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Gate parameters of one LSTM cell, gates stacked in `[input, forget, candidate, output]` order.
///
/// `w_ih: [4H, D]`, `w_hh: [4H, P]`, `bias: [4H]`. The recurrent width `P` is
/// normally `H`; the attention reader feeds `[h, readout]` and uses `P = 2H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step over a batch: returns `(h', c')`.
pub fn lstm_step<T: Element>(graph: &mut Graph<T>, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
    let ws = graph.shape(w.w_ih).to_vec();
    let hs = graph.shape(w.w_hh).to_vec();
    let cs = graph.shape(c).to_vec();
    if ws.len() != 2 || ws[0] % 4 != 0 {
        return Err(Error::invalid("lstm_step", format!("input weight shape {ws:?} is not [4H, D]")));
    }
    let hidden = ws[0] / 4;
    if hs.len() != 2 || hs[0] != ws[0] {
        return Err(Error::shape("lstm_step", &ws, &hs));
    }
    if graph.shape(w.bias) != [ws[0]] {
        return Err(Error::shape("lstm_step", &ws, graph.shape(w.bias)));
    }
    if cs.len() != 2 || cs[1] != hidden {
        return Err(Error::shape("lstm_step", &ws, &cs));
    }
    let xs = graph.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != ws[1] || xs[0] != cs[0] {
        return Err(Error::shape("lstm_step", &xs, &ws));
    }
    let h_shape = graph.shape(h).to_vec();
    if h_shape.len() != 2 || h_shape[1] != hs[1] || h_shape[0] != cs[0] {
        return Err(Error::shape("lstm_step", &h_shape, &hs));
    }

    let from_x = graph.linear(x, w.w_ih, Some(w.bias))?;
    let from_h = graph.linear(h, w.w_hh, None)?;
    let gates = graph.add(from_x, from_h)?;

    let i_pre = graph.slice_cols(gates, 0, hidden)?;
    let f_pre = graph.slice_cols(gates, hidden, hidden)?;
    let g_pre = graph.slice_cols(gates, 2 * hidden, hidden)?;
    let o_pre = graph.slice_cols(gates, 3 * hidden, hidden)?;
    let i = graph.sigmoid(i_pre);
    let f = graph.sigmoid(f_pre);
    let cand = graph.tanh(g_pre);
    let o = graph.sigmoid(o_pre);

    let keep = graph.mul(f, c)?;
    let write = graph.mul(i, cand)?;
    let c_next = graph.add(keep, write)?;
    let c_act = graph.tanh(c_next);
    let h_next = graph.mul(o, c_act)?;
    Ok((h_next, c_next))
}
