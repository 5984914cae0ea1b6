use rand::Rng;

use super::{
    expect_shape, run_sequence, Activation, InputEncoding, Link, Mlp, Parameterized, Recurrent,
    SequenceModel,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z s + b_z)
/// r  = sigmoid(W_r x + U_r s + b_r)
/// n  = tanh(W_n x + r * (U_n s) + b_n)
/// s' = (1 - z) * n + z * s
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
    pub s0: Tensor,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut mat = |rows, cols| Tensor::uniform(&[rows, cols], k, rng).requiring_grad();
        let (w_z, u_z) = (mat(hidden, d_in), mat(hidden, hidden));
        let (w_r, u_r) = (mat(hidden, d_in), mat(hidden, hidden));
        let (w_n, u_n) = (mat(hidden, d_in), mat(hidden, hidden));
        let zeros = || Tensor::zeros(&[hidden]).requiring_grad();
        GruParams {
            w_z,
            u_z,
            b_z: zeros(),
            w_r,
            u_r,
            b_r: zeros(),
            w_n,
            u_n,
            b_n: zeros(),
            s0: zeros(),
        }
    }

    /// All-zero parameters of the given widths.
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        let m = |c| Tensor::zeros(&[hidden, c]).requiring_grad();
        let v = || Tensor::zeros(&[hidden]).requiring_grad();
        GruParams {
            w_z: m(d_in),
            u_z: m(hidden),
            b_z: v(),
            w_r: m(d_in),
            u_r: m(hidden),
            b_r: v(),
            w_n: m(d_in),
            u_n: m(hidden),
            b_n: v(),
            s0: v(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.s0.len()
    }

    pub fn input_width(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.input_width());
        for w in [&self.w_z, &self.w_r, &self.w_n] {
            expect_shape("gru input weight", w, &[h, d])?;
        }
        for u in [&self.u_z, &self.u_r, &self.u_n] {
            expect_shape("gru state weight", u, &[h, h])?;
        }
        for b in [&self.b_z, &self.b_r, &self.b_n, &self.s0] {
            expect_shape("gru bias", b, &[h])?;
        }
        Ok(())
    }

    /// One update on the ten bound tensors in field order.
    pub fn step<'t>(&self, p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let gate = |w: Var<'t>, u: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
            Ok(w.matvec(x)?.add(u.matvec(s)?)?.add(b)?.sigmoid())
        };
        let z = gate(p[0], p[1], p[2])?;
        let r = gate(p[3], p[4], p[5])?;
        let n = p[6]
            .matvec(x)?
            .add(r.mul(p[7].matvec(s)?)?)?
            .add(p[8])?
            .tanh();
        z.one_minus().mul(n)?.add(z.mul(s)?)
    }
}

impl Parameterized for GruParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_n, &self.u_n,
            &self.b_n, &self.s0,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_n,
            &mut self.u_n,
            &mut self.b_n,
            &mut self.s0,
        ]
    }
}

const CELL_TENSORS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub cell: GruParams,
    pub head: Mlp,
    pub encoding: InputEncoding,
    pub link: Link,
}

impl Gru {
    pub fn new(cell: GruParams, head: Mlp, encoding: InputEncoding, link: Link) -> Result<Self> {
        cell.validate()?;
        if encoding.width() != cell.input_width() {
            return Err(Error::Shape {
                op: "gru encoding",
                left: cell.w_z.shape().to_vec(),
                right: vec![encoding.width()],
            });
        }
        match head.in_width() {
            Some(w) if w != cell.hidden() => {
                return Err(Error::Shape {
                    op: "gru head",
                    left: vec![w],
                    right: vec![cell.hidden()],
                })
            }
            None if cell.hidden() != 1 => {
                return Err(Error::contract("identity head needs a scalar state"))
            }
            _ => {}
        }
        Ok(Gru {
            cell,
            head,
            encoding,
            link,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        encoding: InputEncoding,
        hidden: usize,
        link: Link,
        rng: &mut R,
    ) -> Self {
        let cell = GruParams::init(encoding.width(), hidden, rng);
        let head = Mlp::init(
            &[hidden, 1],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        Gru {
            cell,
            head,
            encoding,
            link,
        }
    }
}

impl Parameterized for Gru {
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

impl SequenceModel for Gru {
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

impl Recurrent for Gru {
    fn initial_state<'t>(&self, _tape: &'t Tape, p: &[Var<'t>]) -> Var<'t> {
        p[9]
    }

    fn encode<'t>(&self, tape: &'t Tape, x: i64) -> Result<Var<'t>> {
        self.encoding.encode(tape, x)
    }

    fn step<'t>(&self, p: &[Var<'t>], s: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.cell.step(&p[..CELL_TENSORS], s, x)
    }
}
