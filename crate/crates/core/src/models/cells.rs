//! Fixed scalar cells with no trainable parameters. They serve as reference
//! points for the regularizers and the auditor.

use super::{run_sequence, Link, Parameterized, Recurrent, SequenceModel};
use crate::autodiff::{concat, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `s' = a·s + b·x`, `s0 = 0`, identity readout.
///
/// `a = b = 1` is the additive accumulator; `a = 2, b = 1` is the standard
/// order-sensitive witness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCell {
    pub state_coef: f64,
    pub input_coef: f64,
}

impl AffineCell {
    pub fn new(state_coef: f64, input_coef: f64) -> Self {
        AffineCell {
            state_coef,
            input_coef,
        }
    }

    pub fn additive() -> Self {
        AffineCell::new(1.0, 1.0)
    }
}

impl Parameterized for AffineCell {
    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

impl SequenceModel for AffineCell {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        run_sequence(self, tape, p, self.initial_state(tape, p), xs)
    }

    fn readout<'t>(&self, _p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        Ok(summary)
    }

    fn link(&self) -> Link {
        Link::Identity
    }
}

impl Recurrent for AffineCell {
    fn initial_state<'t>(&self, tape: &'t Tape, _p: &[Var<'t>]) -> Var<'t> {
        tape.vector(vec![0.0])
    }

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        Ok(tape.vector(vec![x as f64]))
    }

    fn step<'t>(&self, _p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        s.scale(self.state_coef).add(x.scale(self.input_coef))
    }
}

/// `s' = max(s, x) = x + relu(s - x)`, `s0 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MaxCell;

impl Parameterized for MaxCell {
    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

impl SequenceModel for MaxCell {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        run_sequence(self, tape, p, self.initial_state(tape, p), xs)
    }

    fn readout<'t>(&self, _p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        Ok(summary)
    }

    fn link(&self) -> Link {
        Link::Identity
    }
}

impl Recurrent for MaxCell {
    fn initial_state<'t>(&self, tape: &'t Tape, _p: &[Var<'t>]) -> Var<'t> {
        tape.vector(vec![0.0])
    }

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        Ok(tape.vector(vec![x as f64]))
    }

    fn step<'t>(&self, _p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.add(s.sub(x)?.relu())
    }
}

/// Order-sensitive everywhere except at one length `n`.
///
/// State `(c, Σx, last)`: a step counter, the running sum, and the latest
/// input gated by `relu(n − 1 − c) − relu(n − 2 − c)`, which is 1 while
/// `c ≤ n − 2` and 0 from `c = n − 1` on. Length-`n` sequences all end with
/// `last = 0`, so every reordering reaches the same state; shorter ones keep
/// their last element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthGatedCell {
    pub n: usize,
}

impl Parameterized for LengthGatedCell {
    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

impl SequenceModel for LengthGatedCell {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        run_sequence(self, tape, p, self.initial_state(tape, p), xs)
    }

    fn readout<'t>(&self, _p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        Ok(summary.sum())
    }

    fn link(&self) -> Link {
        Link::Identity
    }
}

impl Recurrent for LengthGatedCell {
    fn initial_state<'t>(&self, tape: &'t Tape, _p: &[Var<'t>]) -> Var<'t> {
        tape.vector(vec![0.0; 3])
    }

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        Ok(tape.vector(vec![x as f64]))
    }

    fn step<'t>(&self, _p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = self.n as f64;
        let x = x.sum();
        let c = s.select(0)?;
        let gate = c
            .affine(-1.0, n - 1.0)
            .relu()
            .sub(c.affine(-1.0, n - 2.0).relu())?;
        concat(&[c.affine(1.0, 1.0), s.select(1)?.add(x)?, x.mul(gate)?])
    }
}
