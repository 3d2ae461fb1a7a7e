//! Feed-forward and recurrent building blocks on top of the tape.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `x · W + b`, Xavier-initialized weight, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), rng.xavier(fan_in, fan_out))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(store, self.w))?.add_row(g.param(store, self.b))
    }
}

/// Two-layer feed-forward network: ReLU hidden layer, tanh output layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, fan_in: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.l1"), fan_in, hidden)?,
            output: Linear::new(store, rng, &format!("{name}.l2"), hidden, out)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, dropout: f64) -> Result<Var<'g>> {
        let h = self.hidden.forward(g, store, g.dropout(x, dropout))?.relu()?;
        self.output.forward(g, store, g.dropout(h, dropout))?.tanh()
    }
}

/// Unidirectional LSTM with zero initial state. Gate blocks are ordered
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            w: store.add(format!("{name}.w"), rng.xavier(input, 4 * hidden))?,
            u: store.add(format!("{name}.u"), rng.xavier(hidden, 4 * hidden))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, 4 * hidden]))?,
            hidden,
        })
    }

    /// Runs over the rows of `x` (`[t × input]`), returning `[t × hidden]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let projected = x.matmul(g.param(store, self.w))?.add_row(g.param(store, self.b))?;
        projected.lstm(g.param(store, self.u))
    }
}

/// Forward and backward LSTMs; output rows are `[forward ; backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), input, hidden)?,
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), input, hidden)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let fwd = self.forward.forward(g, store, x)?;
        let bwd = self.backward.forward(g, store, x.reverse_rows()?)?.reverse_rows()?;
        g.concat_cols(&[fwd, bwd])
    }
}
