//! Named parameter storage and small dense building blocks.

use crate::error::{MgfError, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of a [`ParamStore`] registered as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites the tensor called `name`, which must keep its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MgfError::Checkpoint(format!("unknown tensor {name:?}")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(MgfError::Checkpoint(format!(
                "tensor {name:?}: expected shape {:?}, found {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-uniform weights, zero bias. `zero` gives an all-zero layer.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = if zero {
            vec![0.0; fan_in * fan_out]
        } else {
            (0..fan_in * fan_out)
                .map(|_| limit * (2.0 * rng.uniform() - 1.0))
                .collect()
        };
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_parts(vec![fan_in, fan_out], data),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_broadcast(y, p.var(self.bias))
    }
}

/// Three dense layers with tanh between them; the last layer starts at zero.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        let layers = vec![
            Linear::new(store, &format!("{name}.0"), input, hidden, false, rng),
            Linear::new(store, &format!("{name}.1"), hidden, hidden, false, rng),
            Linear::new(store, &format!("{name}.2"), hidden, output, true, rng),
        ];
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}
