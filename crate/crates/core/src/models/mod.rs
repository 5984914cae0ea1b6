//! Sequence architectures: recurrent cells, the sequence runner, output
//! heads, and the sum-pooling DeepSets baseline.
//!
//! All models consume sequences of integers. Each model owns an
//! [`InputEncoding`] that turns an element into a vector on the tape.

mod cells;
mod deepsets;
mod gru;
mod mlp;
mod rnn;
mod serialize;

pub use cells::{AffineCell, LengthGatedCell, MaxCell};
pub use deepsets::{DeepSets, DeepSetsParams};
pub use gru::{Gru, GruParams};
pub use mlp::{Dense, Mlp};
pub use rnn::{rnn_step, Rnn, RnnParams};
pub use serialize::Model;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => v.sigmoid(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// How the scalar model output maps to a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// Raw output is the prediction (regression, or the exact constructions).
    Identity,
    /// Raw output is a logit; the prediction is its sigmoid.
    Logistic,
}

impl Link {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Link::Identity => raw,
            Link::Logistic => crate::autodiff::sigmoid(raw),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "logistic" => Ok(Link::Logistic),
            other => Err(Error::config(format!("unknown link `{other}`"))),
        }
    }
}

/// Element encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputEncoding {
    /// `[x / divisor]`
    Scalar { divisor: f64 },
    /// Indicator vector of length `size`.
    OneHot { size: usize },
}

impl InputEncoding {
    pub fn raw() -> Self {
        InputEncoding::Scalar { divisor: 1.0 }
    }

    pub fn width(&self) -> usize {
        match *self {
            InputEncoding::Scalar { .. } => 1,
            InputEncoding::OneHot { size } => size,
        }
    }

    pub fn encode_values(&self, x: i64) -> Result<Vec<f64>> {
        match *self {
            InputEncoding::Scalar { divisor } => Ok(vec![x as f64 / divisor]),
            InputEncoding::OneHot { size } => {
                if x < 0 || x as usize >= size {
                    return Err(Error::contract(format!(
                        "element {x} outside one-hot range 0..{size}"
                    )));
                }
                let mut v = vec![0.0; size];
                v[x as usize] = 1.0;
                Ok(v)
            }
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        Ok(tape.vector(self.encode_values(x)?))
    }
}

/// Anything with an ordered list of trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Records every parameter of `model` on `tape`, in declared order.
pub fn bind<'t, M: Parameterized + ?Sized>(tape: &'t Tape, model: &M) -> Vec<Var<'t>> {
    model.params().into_iter().map(|t| tape.leaf(t)).collect()
}

/// A model mapping a sequence to a summary vector and then to a scalar output.
///
/// For recurrent models the summary is the final state; for DeepSets it is
/// the pooled embedding.
pub trait SequenceModel: Parameterized {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>>;

    /// Scalar output (pre-link) from a summary.
    fn readout<'t>(&self, p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>>;

    fn link(&self) -> Link;

    fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        let s = self.summarize(tape, p, xs)?;
        self.readout(p, s)
    }
}

/// A model defined by a state update `s' = f(s, x)` and a learned `s0`.
pub trait Recurrent: SequenceModel {
    fn initial_state<'t>(&self, tape: &'t Tape, p: &[Var<'t>]) -> Var<'t>;

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>>;

    fn step<'t>(&self, p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>>;

    /// One step on an integer element.
    fn step_elem<'t>(&self, tape: &'t Tape, p: &[Var<'t>], s: Var<'t>, x: i64) -> Result<Var<'t>> {
        let xv = self.encode(tape, x)?;
        self.step(p, s, xv)
    }
}

/// Left fold of the cell over `xs` from `s0`: `f(f(f(s0, x1), x2), x3)`.
///
/// An empty sequence returns `s0` itself.
pub fn run_sequence<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    s0: Var<'t>,
    xs: &[i64],
) -> Result<Var<'t>> {
    xs.iter()
        .try_fold(s0, |s, &x| model.step_elem(tape, p, s, x))
}

/// Like [`run_sequence`] but returns every state, starting with `s0`.
pub fn run_sequence_trace<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    s0: Var<'t>,
    xs: &[i64],
) -> Result<Vec<Var<'t>>> {
    let mut trace = Vec::with_capacity(xs.len() + 1);
    trace.push(s0);
    let mut s = s0;
    for &x in xs {
        s = model.step_elem(tape, p, s, x)?;
        trace.push(s);
    }
    Ok(trace)
}

/// Final state values for `xs` under the current parameters.
pub fn final_state<M: SequenceModel + ?Sized>(model: &M, xs: &[i64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = bind(&tape, model);
    Ok(model.summarize(&tape, &p, xs)?.value())
}

/// State reached by folding `xs` from an arbitrary starting state.
pub fn state_from<M: Recurrent + ?Sized>(model: &M, s: &[f64], xs: &[i64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = bind(&tape, model);
    let s = tape.vector(s.to_vec());
    Ok(run_sequence(model, &tape, &p, s, xs)?.value())
}

/// Raw scalar output (before the link).
pub fn raw_output<M: SequenceModel + ?Sized>(model: &M, xs: &[i64]) -> Result<f64> {
    let tape = Tape::new();
    let p = bind(&tape, model);
    let y = model.forward(&tape, &p, xs)?;
    scalar_of(y)
}

/// Linked prediction: the value compared against labels.
pub fn predict<M: SequenceModel + ?Sized>(model: &M, xs: &[i64]) -> Result<f64> {
    Ok(model.link().apply(raw_output(model, xs)?))
}

pub(crate) fn scalar_of(v: Var<'_>) -> Result<f64> {
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "scalar output",
            left: v.shape(),
            right: vec![1],
        });
    }
    Ok(v.item())
}

pub(crate) fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(())
}
