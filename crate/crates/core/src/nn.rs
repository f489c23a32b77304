//! Fully connected building blocks shared by the codecs and control models.

use acrkn_numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub(crate) fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Ok(Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
    )?)
}

/// Affine layer `y = x W^T + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[out_dim, in_dim], in_dim)?,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            fan_in_uniform(rng, &[out_dim], in_dim)?,
        )?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x` is `[batch, in_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.in_dim {
            return Err(CoreError::Dimension(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.in_dim,
                g.shape(x)
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_nt(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

/// ReLU hidden layers followed by a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.hidden{i}"), width, h, rng)?);
            width = h;
        }
        let output = Dense::new(store, &format!("{name}.out"), width, out_dim, rng)?;
        Ok(Self {
            hidden: layers,
            output,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|d| d.out_dim).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = relu_stack(g, store, &self.hidden, x)?;
        self.output.forward(g, store, h)
    }
}

pub(crate) fn relu_stack(g: &mut Graph, store: &ParamStore, layers: &[Dense], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let a = layer.forward(g, store, h)?;
        h = g.relu(a)?;
    }
    Ok(h)
}
