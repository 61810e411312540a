use super::init::Initializer;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::value::Value;
use crate::error::{dim_err, Result};

/// Parameters of a single-layer gated recurrent unit.
///
/// Gate blocks are stacked in the order reset, update, candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    /// Registers a GRU with uniform fan-based weights and zero biases.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        let w_input = store.register(
            format!("{name}.w_input"),
            init.uniform_fan(h3, input_dim, input_dim, hidden_dim),
        );
        let w_hidden = store.register(
            format!("{name}.w_hidden"),
            init.uniform_fan(h3, hidden_dim, hidden_dim, hidden_dim),
        );
        let b_input = store.register(format!("{name}.b_input"), Value::zeros(&[h3]));
        let b_hidden = store.register(format!("{name}.b_hidden"), Value::zeros(&[h3]));
        GruParams {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            input_dim,
            hidden_dim,
        }
    }
}

/// One GRU step. `x` and `h` are either vectors or matrices whose rows are
/// independent samples; the result has the shape of `h`.
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(tape: &mut Tape, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let (xs, hs) = (tape.value(x).shape().to_vec(), tape.value(h).shape().to_vec());
    let rows = match (xs.as_slice(), hs.as_slice()) {
        ([xi], [hi]) if *xi == p.input_dim && *hi == p.hidden_dim => None,
        ([xn, xi], [hn, hi]) if xn == hn && *xi == p.input_dim && *hi == p.hidden_dim => Some(*xn),
        _ => {
            return Err(dim_err(
                "gru_cell",
                format!(
                    "input {:?} / state {:?} for a {}→{} cell",
                    xs, hs, p.input_dim, p.hidden_dim
                ),
            ))
        }
    };
    let hd = p.hidden_dim;
    let (xm, hm) = match rows {
        Some(_) => (x, h),
        None => (tape.reshape(x, &[1, p.input_dim])?, tape.reshape(h, &[1, hd])?),
    };

    let wi = tape.param(p.w_input);
    let wh = tape.param(p.w_hidden);
    let bi = tape.param(p.b_input);
    let bh = tape.param(p.b_hidden);
    let gi = tape.matmul_t(xm, wi)?;
    let gi = tape.add_row_broadcast(gi, bi)?;
    let gh = tape.matmul_t(hm, wh)?;
    let gh = tape.add_row_broadcast(gh, bh)?;

    let (ir, hr) = (tape.slice_cols(gi, 0, hd)?, tape.slice_cols(gh, 0, hd)?);
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r);
    let (iz, hz) = (tape.slice_cols(gi, hd, hd)?, tape.slice_cols(gh, hd, hd)?);
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z);
    let (inn, hn) = (tape.slice_cols(gi, 2 * hd, hd)?, tape.slice_cols(gh, 2 * hd, hd)?);
    let rhn = tape.mul(r, hn)?;
    let cand = tape.add(inn, rhn)?;
    let cand = tape.tanh(cand);

    let diff = tape.sub(hm, cand)?;
    let zd = tape.mul(z, diff)?;
    let out = tape.add(cand, zd)?;
    match rows {
        Some(_) => Ok(out),
        None => tape.reshape(out, &[hd]),
    }
}
