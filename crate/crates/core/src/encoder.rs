//! History encoder: a plain tanh recurrence over observed offsets.
//!
//! `h_0 = 0`, `h_{t+1} = tanh(o_t·W_x + h_t·W_h + b)`, context `c = h_T`.
//! Weights are stored input-major (`W_x: 2×H`, `W_h: H×H`) so a batch of
//! rows multiplies on the left.

use crate::error::{MgfError, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};

pub const DEFAULT_CONTEXT_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub context_dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, context_dim: usize, rng: &mut Rng) -> Self {
        let uniform = |rng: &mut Rng, n: usize, limit: f64| -> Vec<f64> {
            (0..n).map(|_| limit * (2.0 * rng.uniform() - 1.0)).collect()
        };
        let h = context_dim;
        let w_x = store.add("encoder.w_x", Tensor::from_parts(vec![2, h], uniform(rng, 2 * h, 0.5)));
        let w_h = store.add(
            "encoder.w_h",
            Tensor::from_parts(vec![h, h], uniform(rng, h * h, 1.0 / (h as f64).sqrt())),
        );
        let b = store.add("encoder.b", Tensor::zeros(vec![1, h]));
        Self {
            w_x,
            w_h,
            b,
            context_dim,
        }
    }

    /// Encodes a batch of histories, one row of `2·T_obs` flattened offsets
    /// per window, into a `B×H` context.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, observed: Var) -> Result<Var> {
        let shape = tape.value(observed).shape().to_vec();
        let (batch, width) = (shape[0], shape.get(1).copied().unwrap_or(1));
        if width < 2 || width % 2 != 0 {
            return Err(MgfError::Shape {
                op: "encode",
                shapes: format!("{shape:?} (expected B × 2·T_obs)"),
            });
        }
        let mut h = tape.constant(Tensor::zeros(vec![batch, self.context_dim]));
        for t in 0..width / 2 {
            let o = tape.slice_cols(observed, 2 * t, 2 * t + 2)?;
            let a = tape.matmul(o, p.var(self.w_x))?;
            let r = tape.matmul(h, p.var(self.w_h))?;
            let s = tape.add(a, r)?;
            let s = tape.add_broadcast(s, p.var(self.b))?;
            h = tape.tanh(s);
        }
        Ok(h)
    }
}
