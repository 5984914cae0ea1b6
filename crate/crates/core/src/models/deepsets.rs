use rand::Rng;

use super::{Activation, InputEncoding, Link, Mlp, Parameterized, SequenceModel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `ρ(Σ φ(x_i))`. `φ`'s output width must equal `ρ`'s input width.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetsParams {
    pub phi: Mlp,
    pub rho: Mlp,
}

impl DeepSetsParams {
    pub fn new(phi: Mlp, rho: Mlp) -> Result<Self> {
        if let (Some(out), Some(inp)) = (phi.out_width(), rho.in_width()) {
            if out != inp {
                return Err(Error::Shape {
                    op: "deepsets phi/rho",
                    left: vec![out],
                    right: vec![inp],
                });
            }
        }
        Ok(DeepSetsParams { phi, rho })
    }
}

/// Sum-pooling set model over integer elements.
///
/// Pooling groups equal elements and adds `count · φ(v)` over distinct
/// values `v` in ascending order. The pooled vector therefore depends only on
/// the multiset of inputs, bit for bit, whatever their order.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSets {
    pub params: DeepSetsParams,
    pub encoding: InputEncoding,
    pub link: Link,
}

impl DeepSets {
    pub fn new(params: DeepSetsParams, encoding: InputEncoding, link: Link) -> Result<Self> {
        if let Some(w) = params.phi.in_width() {
            if w != encoding.width() {
                return Err(Error::Shape {
                    op: "deepsets encoding",
                    left: vec![w],
                    right: vec![encoding.width()],
                });
            }
        }
        Ok(DeepSets {
            params,
            encoding,
            link,
        })
    }

    /// `φ: d_in → width → width` and `ρ: width → width → 1`, one ReLU hidden
    /// layer each.
    pub fn init<R: Rng + ?Sized>(
        encoding: InputEncoding,
        width: usize,
        link: Link,
        rng: &mut R,
    ) -> Self {
        let d = encoding.width();
        let phi = Mlp::init(
            &[d, width, width],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let rho = Mlp::init(
            &[width, width, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        DeepSets {
            params: DeepSetsParams { phi, rho },
            encoding,
            link,
        }
    }

    fn phi_tensors(&self) -> usize {
        self.params.phi.tensor_count()
    }
}

/// Distinct values of `xs` in ascending order with their multiplicities.
pub(crate) fn value_counts(xs: &[i64]) -> Vec<(i64, usize)> {
    let mut sorted = xs.to_vec();
    sorted.sort();
    let mut out: Vec<(i64, usize)> = Vec::new();
    for x in sorted {
        match out.last_mut() {
            Some((v, c)) if *v == x => *c += 1,
            _ => out.push((x, 1)),
        }
    }
    out
}

impl Parameterized for DeepSets {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.params.phi.params();
        v.extend(self.params.rho.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.params.phi.params_mut();
        v.extend(self.params.rho.params_mut());
        v
    }
}

impl SequenceModel for DeepSets {
    fn summarize<'t>(&self, tape: &'t Tape, p: &[Var<'t>], xs: &[i64]) -> Result<Var<'t>> {
        if xs.is_empty() {
            return Err(Error::contract("deepsets forward needs a non-empty input"));
        }
        let phi_p = &p[..self.phi_tensors()];
        let mut acc: Option<Var<'t>> = None;
        for (v, count) in value_counts(xs) {
            let e = self
                .params
                .phi
                .forward(phi_p, self.encoding.encode(tape, v)?)?;
            let term = e.scale(count as f64);
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        Ok(acc.expect("non-empty input"))
    }

    fn readout<'t>(&self, p: &[Var<'t>], summary: Var<'t>) -> Result<Var<'t>> {
        self.params.rho.forward(&p[self.phi_tensors()..], summary)
    }

    fn link(&self) -> Link {
        self.link
    }
}
