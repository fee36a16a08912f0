//! Conditional affine-coupling flow between latents and future offsets.
//!
//! Each layer splits the `D` coordinates by index parity. The passive half
//! and the context feed two MLPs producing a log-scale `s` and shift `t` for
//! the active half:
//!
//! ```text
//! forward:  x_b = z_b ⊙ exp(s̃) + t,     s̃ = B·tanh(s / B)
//! inverse:  z_b = (x_b − t) ⊙ exp(−s̃)
//! ```
//!
//! so `log|det ∂x/∂z| = Σ s̃`, accumulated over layers. Consecutive layers
//! alternate parity.

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::numerics::{Rng, Tape, Var};

pub const DEFAULT_LAYERS: usize = 8;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_CLAMP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowShape {
    pub dim: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    active: Vec<usize>,
    passive: Vec<usize>,
    /// Column order that undoes `[passive ++ active]`.
    unshuffle: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    clamp: f64,
}

#[derive(Clone, Debug)]
pub struct ConditionalFlow {
    layers: Vec<CouplingLayer>,
    shape: FlowShape,
}

impl CouplingLayer {
    fn new(store: &mut ParamStore, index: usize, shape: &FlowShape, rng: &mut Rng) -> Self {
        let parity = index % 2;
        let active: Vec<usize> = (0..shape.dim).filter(|i| i % 2 == parity).collect();
        let passive: Vec<usize> = (0..shape.dim).filter(|i| i % 2 != parity).collect();
        let order: Vec<usize> = passive.iter().chain(&active).copied().collect();
        let mut unshuffle = vec![0; shape.dim];
        for (pos, &col) in order.iter().enumerate() {
            unshuffle[col] = pos;
        }
        let input = passive.len() + shape.context_dim;
        let name = format!("flow.{index}");
        let scale_net = Mlp::new(store, &format!("{name}.scale"), input, shape.hidden, active.len(), rng);
        let shift_net = Mlp::new(store, &format!("{name}.shift"), input, shape.hidden, active.len(), rng);
        Self {
            active,
            passive,
            unshuffle,
            scale_net,
            shift_net,
            clamp: shape.clamp,
        }
    }

    fn nets(&self, tape: &mut Tape, p: &Bound, passive: Var, context: Var) -> Result<(Var, Var)> {
        let input = tape.concat(&[passive, context], 1)?;
        let raw = self.scale_net.forward(tape, p, input)?;
        let log_scale = tape.soft_clamp(raw, self.clamp);
        let shift = self.shift_net.forward(tape, p, input)?;
        Ok((log_scale, shift))
    }

    /// Returns the transformed batch and the per-row log-determinant (`B×1`).
    fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, context: Var) -> Result<(Var, Var)> {
        let za = tape.gather_cols(z, &self.passive)?;
        let zb = tape.gather_cols(z, &self.active)?;
        let (s, t) = self.nets(tape, p, za, context)?;
        let es = tape.exp(s);
        let xb = tape.mul(zb, es)?;
        let xb = tape.add(xb, t)?;
        let joined = tape.concat(&[za, xb], 1)?;
        let x = tape.gather_cols(joined, &self.unshuffle)?;
        Ok((x, tape.sum_cols(s)?))
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var, context: Var) -> Result<(Var, Var)> {
        let xa = tape.gather_cols(x, &self.passive)?;
        let xb = tape.gather_cols(x, &self.active)?;
        let (s, t) = self.nets(tape, p, xa, context)?;
        let neg_s = tape.neg(s);
        let es = tape.exp(neg_s);
        let d = tape.sub(xb, t)?;
        let zb = tape.mul(d, es)?;
        let joined = tape.concat(&[xa, zb], 1)?;
        let z = tape.gather_cols(joined, &self.unshuffle)?;
        Ok((z, tape.sum_cols(neg_s)?))
    }
}

impl ConditionalFlow {
    pub fn new(store: &mut ParamStore, shape: FlowShape, rng: &mut Rng) -> Result<Self> {
        if shape.dim < 2 || !shape.dim.is_multiple_of(2) {
            return Err(MgfError::invalid(format!(
                "flow dimension must be even and >= 2, got {}",
                shape.dim
            )));
        }
        if shape.layers < 2 {
            return Err(MgfError::invalid("flow needs at least two coupling layers"));
        }
        if shape.hidden == 0 || !(shape.clamp > 0.0) {
            return Err(MgfError::invalid("flow hidden width and clamp must be positive"));
        }
        let layers = (0..shape.layers)
            .map(|i| CouplingLayer::new(store, i, &shape, rng))
            .collect();
        Ok(Self { layers, shape })
    }

    pub fn shape(&self) -> &FlowShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    /// `x = f(z; c)` for a batch; returns `(x, log|det ∂x/∂z|)` with the
    /// log-determinant as a `B×1` column.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, context: Var) -> Result<(Var, Var)> {
        self.check_input(tape, z, context)?;
        let mut x = z;
        let mut logdet: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (nx, ld) = layer.forward(tape, p, x, context)?;
            tape.check_finite(nx, &format!("flow layer {i} (forward)"))?;
            x = nx;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least two layers")))
    }

    /// `z = f⁻¹(x; c)`; returns `(z, log|det ∂z/∂x|)`.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var, context: Var) -> Result<(Var, Var)> {
        self.check_input(tape, x, context)?;
        let mut z = x;
        let mut logdet: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (nz, ld) = layer.inverse(tape, p, z, context)?;
            tape.check_finite(nz, &format!("flow layer {i} (inverse)"))?;
            z = nz;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((z, logdet.expect("at least two layers")))
    }

    fn check_input(&self, tape: &Tape, v: Var, context: Var) -> Result<()> {
        let (vs, cs) = (tape.value(v).shape(), tape.value(context).shape());
        if vs.len() != 2
            || cs.len() != 2
            || vs[1] != self.shape.dim
            || cs[1] != self.shape.context_dim
            || vs[0] != cs[0]
        {
            return Err(MgfError::Shape {
                op: "flow",
                shapes: format!(
                    "input {vs:?}, context {cs:?} (D = {}, H = {})",
                    self.shape.dim, self.shape.context_dim
                ),
            });
        }
        Ok(())
    }
}
