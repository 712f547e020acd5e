use rand::Rng;

use super::params::{init_uniform, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initialisation half-width for every weight except the forget-gate bias.
pub const INIT_SCALE: f64 = 0.08;

/// A standard LSTM cell with one packed weight matrix.
///
/// `weight` is `[input + hidden, 4·hidden]` applied to `[x, h_prev]`; gate
/// columns are ordered input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.w"),
            init_uniform(&[input + hidden, 4 * hidden], INIT_SCALE, rng),
        )?;
        let mut b: Tensor<T> = init_uniform(&[4 * hidden], INIT_SCALE, rng);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        let bias = store.register(format!("{prefix}.b"), b)?;
        Ok(Self {
            weight,
            bias,
            input,
            hidden,
        })
    }
}

/// One LSTM step over a batch: `h_prev, c_prev: [B, hidden]`, `x: [B, input]`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &LstmParams,
    h_prev: Var,
    c_prev: Var,
    x: Var,
) -> Result<(Var, Var)> {
    let d = p.hidden;
    let (sx, sh, sc) = (tape.shape(x), tape.shape(h_prev), tape.shape(c_prev));
    if sx.len() != 2 || sx[1] != p.input || sh != [sx[0], d] || sc != sh {
        return Err(Error::shape("lstm_step", sx, sh));
    }
    let w = tape.param(store, p.weight);
    let b = tape.param(store, p.bias);
    let xh = tape.concat(&[x, h_prev])?;
    let z = tape.matmul(xh, w)?;
    let z = tape.add(z, b)?;
    let zi = tape.narrow(z, 0, d)?;
    let zf = tape.narrow(z, d, d)?;
    let zo = tape.narrow(z, 2 * d, d)?;
    let zg = tape.narrow(z, 3 * d, d)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
