use rand::Rng;

use super::{
    bind, expect_shape, run_sequence, Activation, InputEncoding, Link, Mlp, Parameterized,
    Recurrent, SequenceModel,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the cell `s' = W_out · σ(W_x x + W_s s + B)`.
///
/// With `h` hidden units, input width `d_in` and state width `d_s`:
/// `w_out` is `[d_s, h]`, `w_x` is `[h, d_in]`, `w_s` is `[h, d_s]`,
/// `b` is `[h]` and the learned initial state `s0` is `[d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub w_out: Tensor,
    pub w_x: Tensor,
    pub w_s: Tensor,
    pub b: Tensor,
    pub s0: Tensor,
    pub activation: Activation,
}

impl RnnParams {
    pub fn new(
        w_out: Tensor,
        w_x: Tensor,
        w_s: Tensor,
        b: Tensor,
        s0: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        if w_out.shape().len() != 2 || w_x.shape().len() != 2 {
            return Err(Error::Shape {
                op: "rnn params",
                left: w_out.shape().to_vec(),
                right: w_x.shape().to_vec(),
            });
        }
        let (d_s, h) = (w_out.shape()[0], w_out.shape()[1]);
        let d_in = w_x.shape()[1];
        if h == 0 {
            return Err(Error::contract("rnn hidden width must be at least 1"));
        }
        expect_shape("rnn w_x", &w_x, &[h, d_in])?;
        expect_shape("rnn w_s", &w_s, &[h, d_s])?;
        expect_shape("rnn b", &b, &[h])?;
        expect_shape("rnn s0", &s0, &[d_s])?;
        Ok(RnnParams {
            w_out: w_out.requiring_grad(),
            w_x: w_x.requiring_grad(),
            w_s: w_s.requiring_grad(),
            b: b.requiring_grad(),
            s0: s0.requiring_grad(),
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        hidden: usize,
        d_state: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let u = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        RnnParams {
            w_out: Tensor::uniform(&[d_state, hidden], u(hidden), rng).requiring_grad(),
            w_x: Tensor::uniform(&[hidden, d_in], u(d_in), rng).requiring_grad(),
            w_s: Tensor::uniform(&[hidden, d_state], u(d_state), rng).requiring_grad(),
            b: Tensor::zeros(&[hidden]).requiring_grad(),
            s0: Tensor::zeros(&[d_state]).requiring_grad(),
            activation,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn state_width(&self) -> usize {
        self.w_out.shape()[0]
    }

    pub fn input_width(&self) -> usize {
        self.w_x.shape()[1]
    }

    /// One update on bound parameters `[w_out, w_x, w_s, b, s0]`.
    pub fn step<'t>(&self, p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let pre = p[1].matvec(x)?.add(p[2].matvec(s)?)?.add(p[3])?;
        p[0].matvec(self.activation.apply(pre))
    }
}

impl Parameterized for RnnParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_out, &self.w_x, &self.w_s, &self.b, &self.s0]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_out,
            &mut self.w_x,
            &mut self.w_s,
            &mut self.b,
            &mut self.s0,
        ]
    }
}

/// Single-step convenience on plain tensors.
pub fn rnn_step(params: &RnnParams, s: &Tensor, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = bind(&tape, params);
    let out = params.step(&p, tape.leaf(s), tape.leaf(x))?;
    Ok(out.to_tensor())
}

/// A vanilla recurrent model: cell, output head, element encoding, link.
#[derive(Clone, Debug, PartialEq)]
pub struct Rnn {
    pub cell: RnnParams,
    pub head: Mlp,
    pub encoding: InputEncoding,
    pub link: Link,
}

const CELL_TENSORS: usize = 5;

impl Rnn {
    pub fn new(cell: RnnParams, head: Mlp, encoding: InputEncoding, link: Link) -> Result<Self> {
        if encoding.width() != cell.input_width() {
            return Err(Error::Shape {
                op: "rnn encoding",
                left: cell.w_x.shape().to_vec(),
                right: vec![encoding.width()],
            });
        }
        match head.in_width() {
            Some(w) if w != cell.state_width() => {
                return Err(Error::Shape {
                    op: "rnn head",
                    left: vec![w],
                    right: vec![cell.state_width()],
                })
            }
            None if cell.state_width() != 1 => {
                return Err(Error::contract("identity head needs a scalar state"))
            }
            _ => {}
        }
        Ok(Rnn {
            cell,
            head,
            encoding,
            link,
        })
    }

    /// Randomly initialised model with a linear scalar head; the state width
    /// equals the hidden width.
    pub fn init<R: Rng + ?Sized>(
        encoding: InputEncoding,
        hidden: usize,
        activation: Activation,
        link: Link,
        rng: &mut R,
    ) -> Self {
        let cell = RnnParams::init(encoding.width(), hidden, hidden, activation, rng);
        let head = Mlp::init(
            &[hidden, 1],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        Rnn {
            cell,
            head,
            encoding,
            link,
        }
    }
}

impl Parameterized for Rnn {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.cell.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.cell.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

impl SequenceModel for Rnn {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        let s0 = self.initial_state(tape, p);
        run_sequence(self, tape, p, s0, xs)
    }

    fn readout<'t>(&self, p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(&p[CELL_TENSORS..], summary)
    }

    fn link(&self) -> Link {
        self.link
    }
}

impl Recurrent for Rnn {
    fn initial_state<'t>(&self, _tape: &'t Tape, p: &[Var<'t>]) -> Var<'t> {
        p[4]
    }

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        self.encoding.encode(tape, x)
    }

    fn step<'t>(&self, p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.cell.step(&p[..CELL_TENSORS], s, x)
    }
}
