//! Exact constructions behind the RNN/DeepSets parity separation.
//!
//! * [`parity_rnn`]: a three-unit ReLU cell whose update is XOR, so folding it
//!   over a bit sequence computes parity with 12 weights.
//! * [`reduce_binary_deepsets`]: on binary inputs any `ρ(Σ φ(x))` collapses
//!   to a scalar function of the number of ones.
//! * [`trace_piecewise_linear`]: exact linear-segment decomposition of a
//!   scalar ReLU network, used to count how many pieces a `ρ` needs.
//! * [`min_deepsets_units`]: the resulting `4·log2(n)` unit count.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{
    bind, raw_output, Activation, Dense, InputEncoding, Link, Mlp, Rnn, RnnParams,
};
use crate::tensor::Tensor;

/// Hidden units in the exact parity cell.
pub const PARITY_RNN_HIDDEN: usize = 3;

/// The XOR cell: `W_out = [1, -1, -1]`, `W_x = W_s = [2, 2, 2]ᵀ`,
/// `B = [0, -1, -3]`, `s0 = 0`, ReLU.
pub fn build_parity_rnn() -> RnnParams {
    RnnParams::new(
        Tensor::matrix(1, 3, vec![1.0, -1.0, -1.0]).expect("1x3"),
        Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).expect("3x1"),
        Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).expect("3x1"),
        Tensor::vector(vec![0.0, -1.0, -3.0]),
        Tensor::vector(vec![0.0]),
        Activation::Relu,
    )
    .expect("parity cell shapes are consistent")
}

/// The parity cell wrapped as a model with an identity readout.
pub fn parity_rnn() -> Rnn {
    Rnn::new(
        build_parity_rnn(),
        Mlp::identity(),
        InputEncoding::raw(),
        Link::Identity,
    )
    .expect("identity head over a scalar state")
}

/// Number of weights in `W_out`, `W_x`, `W_s` and `B`. The initial state is
/// fixed at zero and not counted.
pub fn weight_count(cell: &RnnParams) -> usize {
    cell.w_out.len() + cell.w_x.len() + cell.w_s.len() + cell.b.len()
}

/// `(Σ x_i) mod 2` over a bit sequence.
pub fn parity_oracle(xs: &[i64]) -> Result<u8> {
    let mut ones = 0u64;
    for &x in xs {
        match x {
            0 => {}
            1 => ones += 1,
            other => {
                return Err(Error::contract(format!(
                    "parity input {other} is not a bit"
                )))
            }
        }
    }
    Ok((ones % 2) as u8)
}

/// Outcome of checking a model against [`parity_oracle`] on every bit
/// sequence up to some length.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityCheck {
    pub sequences: u64,
    /// Largest distance of a raw output from the nearest of 0 and 1.
    pub max_deviation: f64,
    /// Sequences whose output, thresholded at 0.5, disagrees with the oracle.
    pub mismatches: u64,
}

impl ParityCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.mismatches == 0 && self.max_deviation <= tol
    }
}

/// Exhaustive check of a recurrent scalar-output model over all bit sequences
/// of length `0..=max_len`.
///
/// Sequences are walked depth-first so that each state is computed from its
/// prefix state with a single step.
pub fn check_parity_exhaustive(model: &Rnn, max_len: usize) -> Result<ParityCheck> {
    let mut check = ParityCheck {
        sequences: 0,
        max_deviation: 0.0,
        mismatches: 0,
    };
    let s0 = model.cell.s0.data().to_vec();
    let mut prefix = Vec::with_capacity(max_len);
    walk_bits(model, &s0, &mut prefix, max_len, &mut check)?;
    Ok(check)
}

fn walk_bits(
    model: &Rnn,
    state: &[f64],
    prefix: &mut Vec<i64>,
    max_len: usize,
    check: &mut ParityCheck,
) -> Result<()> {
    let y = readout_value(model, state)?;
    let expected = parity_oracle(prefix)? as f64;
    let dev = (y - 0.0).abs().min((y - 1.0).abs());
    check.max_deviation = check.max_deviation.max(dev);
    let predicted = if model.link.apply(y) >= 0.5 { 1.0 } else { 0.0 };
    if predicted != expected {
        check.mismatches += 1;
    }
    check.sequences += 1;
    if prefix.len() == max_len {
        return Ok(());
    }
    for bit in [0, 1] {
        let next = step_value(model, state, bit)?;
        prefix.push(bit);
        walk_bits(model, &next, prefix, max_len, check)?;
        prefix.pop();
    }
    Ok(())
}

fn step_value(model: &Rnn, s: &[f64], x: i64) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = bind(&tape, &model.cell);
    let xv = model.encoding.encode(&tape, x)?;
    Ok(model.cell.step(&p, tape.vector(s.to_vec()), xv)?.value())
}

fn readout_value(model: &Rnn, s: &[f64]) -> Result<f64> {
    let out = model.head.eval(s)?;
    match out.as_slice() {
        [y] => Ok(*y),
        _ => Err(Error::Shape {
            op: "parity readout",
            left: vec![out.len()],
            right: vec![1],
        }),
    }
}

/// `ρ̃(z) = ρ(n·v0 + z·(v1 − v0))` with `v0 = φ(0)`, `v1 = φ(1)`: a DeepSets
/// model on `n` bits, re-expressed as a function of the count of ones.
#[derive(Clone, Debug)]
pub struct ReducedRho {
    pub n: usize,
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    phi: Mlp,
    rho: Mlp,
}

/// Builds the count-of-ones reduction of a binary DeepSets model.
pub fn reduce_binary_deepsets(phi: &Mlp, rho: &Mlp, n: usize) -> Result<ReducedRho> {
    if n < 1 {
        return Err(Error::contract("reduction needs a set size n >= 1"));
    }
    if let Some(w) = phi.in_width() {
        if w != 1 {
            return Err(Error::Shape {
                op: "reduce_binary_deepsets phi input",
                left: vec![w],
                right: vec![1],
            });
        }
    }
    Ok(ReducedRho {
        n,
        v0: phi.eval(&[0.0])?,
        v1: phi.eval(&[1.0])?,
        phi: phi.clone(),
        rho: rho.clone(),
    })
}

impl ReducedRho {
    /// `ρ̃(z)` for `z` ones among `n` elements.
    ///
    /// Evaluated in the equivalent grouped form `(n − z)·v0 + z·v1`, with the
    /// same operations DeepSets pooling performs, so the result matches
    /// [`crate::models::DeepSets`] bit for bit.
    pub fn eval(&self, z: usize) -> Result<f64> {
        if z > self.n {
            return Err(Error::contract(format!("count {z} exceeds n = {}", self.n)));
        }
        let tape = Tape::new();
        let phi_p = bind(&tape, &self.phi);
        let rho_p = bind(&tape, &self.rho);
        let e0 = self.phi.forward(&phi_p, tape.vector(vec![0.0]))?;
        let e1 = self.phi.forward(&phi_p, tape.vector(vec![1.0]))?;
        let zeros = self.n - z;
        let pooled: Var<'_> = match (zeros, z) {
            (_, 0) => e0.scale(zeros as f64),
            (0, _) => e1.scale(z as f64),
            _ => e0.scale(zeros as f64).add(e1.scale(z as f64))?,
        };
        let y = self.rho.forward(&rho_p, pooled)?;
        Ok(y.item())
    }

    /// `ρ(n·v0 + z·(v1 − v0))` evaluated literally. Equal to [`Self::eval`]
    /// up to rounding.
    pub fn eval_affine(&self, z: f64) -> Result<f64> {
        let pooled: Vec<f64> = self
            .v0
            .iter()
            .zip(&self.v1)
            .map(|(a, b)| self.n as f64 * a + z * (b - a))
            .collect();
        let y = self.rho.eval(&pooled)?;
        Ok(y[0])
    }

    /// `ρ̃` as a scalar-input net: the pooling affine map is folded into the
    /// first layer of `ρ`, so [`trace_piecewise_linear`] applies directly.
    pub fn scalar_net(&self) -> Result<Mlp> {
        let Some(first) = self.rho.layers.first() else {
            return Err(Error::contract("rho has no layers"));
        };
        let (rows, cols) = (first.out_width(), first.in_width());
        if cols != self.v0.len() {
            return Err(Error::Shape {
                op: "scalar_net rho input",
                left: vec![cols],
                right: vec![self.v0.len()],
            });
        }
        let w = first.w.data();
        let mut slope = vec![0.0; rows];
        let mut bias = first.b.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                slope[r] += w[r * cols + c] * (self.v1[c] - self.v0[c]);
                bias[r] += w[r * cols + c] * self.n as f64 * self.v0[c];
            }
        }
        let mut layers = vec![Dense::new(
            Tensor::matrix(rows, 1, slope)?,
            Tensor::vector(bias),
            first.activation,
        )?];
        layers.extend(self.rho.layers[1..].iter().cloned());
        Mlp::new(layers)
    }
}

/// A continuous scalar piecewise-linear function on `[lo, hi]`.
///
/// `slopes[k]` holds on the k-th maximal segment; segment boundaries are
/// `lo, breakpoints.., hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear1D {
    pub lo: f64,
    pub hi: f64,
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Value at `lo`.
    pub anchor: f64,
}

impl PiecewiseLinear1D {
    pub fn segments(&self) -> usize {
        self.slopes.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut value = self.anchor;
        let mut left = self.lo;
        for (k, &slope) in self.slopes.iter().enumerate() {
            let right = self.breakpoints.get(k).copied().unwrap_or(f64::INFINITY);
            if x <= right || k + 1 == self.slopes.len() {
                return value + slope * (x - left);
            }
            value += slope * (right - left);
            left = right;
        }
        value
    }
}

/// Relative tolerance under which adjacent slopes count as equal.
pub const SLOPE_TOL: f64 = 1e-9;

/// Affine form `slope·x + intercept` of one unit on one interval.
#[derive(Clone, Copy, Debug)]
struct Piece {
    slope: f64,
    intercept: f64,
}

/// Exact linear-segment decomposition of a scalar-input, scalar-output ReLU
/// network on `[lo, hi]`.
///
/// Works layer by layer: every unit is affine on each current interval, and
/// a ReLU unit whose pre-activation crosses zero strictly inside an interval
/// splits it there. Zero-width intervals and neighbours with equal slopes
/// (within [`SLOPE_TOL`]) are merged at the end.
pub fn trace_piecewise_linear(net: &Mlp, lo: f64, hi: f64) -> Result<PiecewiseLinear1D> {
    if !(lo < hi) {
        return Err(Error::contract(format!("empty domain [{lo}, {hi}]")));
    }
    if net.in_width().unwrap_or(1) != 1 || net.out_width().unwrap_or(1) != 1 {
        return Err(Error::contract(
            "trace needs a scalar-input scalar-output network",
        ));
    }
    for layer in &net.layers {
        if !matches!(layer.activation, Activation::Relu | Activation::Identity) {
            return Err(Error::Unsupported(format!(
                "{} activation in piecewise-linear trace",
                layer.activation.name()
            )));
        }
    }

    // bounds[k]..bounds[k+1] is interval k; units[k] holds each unit's form.
    let mut bounds = vec![lo, hi];
    let mut units: Vec<Vec<Piece>> = vec![vec![Piece {
        slope: 1.0,
        intercept: 0.0,
    }]];

    for layer in &net.layers {
        let cols = layer.in_width();
        let pre: Vec<Vec<Piece>> = units
            .iter()
            .map(|us| {
                layer
                    .w
                    .data()
                    .chunks_exact(cols)
                    .zip(layer.b.data())
                    .map(|(row, &b)| {
                        let mut p = Piece {
                            slope: 0.0,
                            intercept: b,
                        };
                        for (w, u) in row.iter().zip(us) {
                            p.slope += w * u.slope;
                            p.intercept += w * u.intercept;
                        }
                        p
                    })
                    .collect()
            })
            .collect();

        if layer.activation == Activation::Identity {
            units = pre;
            continue;
        }

        let mut new_bounds = vec![bounds[0]];
        let mut new_units = Vec::new();
        for (k, forms) in pre.iter().enumerate() {
            let (a, b) = (bounds[k], bounds[k + 1]);
            let mut cuts: Vec<f64> = forms
                .iter()
                .filter(|p| p.slope != 0.0)
                .map(|p| -p.intercept / p.slope)
                .filter(|&r| r > a && r < b)
                .collect();
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let mut left = a;
            for right in cuts.into_iter().chain(std::iter::once(b)) {
                let mid = 0.5 * (left + right);
                new_units.push(
                    forms
                        .iter()
                        .map(|p| {
                            if p.slope * mid + p.intercept > 0.0 {
                                *p
                            } else {
                                Piece {
                                    slope: 0.0,
                                    intercept: 0.0,
                                }
                            }
                        })
                        .collect(),
                );
                new_bounds.push(right);
                left = right;
            }
        }
        bounds = new_bounds;
        units = new_units;
    }

    // Collapse to the scalar output and merge.
    let width = hi - lo;
    let mut breakpoints = Vec::new();
    let mut slopes: Vec<f64> = Vec::new();
    let first = units[0][0];
    let anchor = first.slope * lo + first.intercept;
    for (k, forms) in units.iter().enumerate() {
        let (a, b) = (bounds[k], bounds[k + 1]);
        if b - a <= 1e-12 * width {
            continue;
        }
        let slope = forms[0].slope;
        match slopes.last() {
            Some(&prev) if (slope - prev).abs() <= SLOPE_TOL * prev.abs().max(1.0) => {}
            Some(_) => {
                breakpoints.push(a);
                slopes.push(slope);
            }
            None => slopes.push(slope),
        }
    }
    Ok(PiecewiseLinear1D {
        lo,
        hi,
        breakpoints,
        slopes,
        anchor,
    })
}

/// Fewest ReLU units a DeepSets `ρ` needs for parity on `n = 2^K` elements:
/// `4·log2(n)`. Defined for `K > 4`.
pub fn min_deepsets_units(n: u64) -> Result<u64> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::contract(format!(
            "set size {n} is not a power of two"
        )));
    }
    let k = n.trailing_zeros() as u64;
    if k <= 4 {
        return Err(Error::contract(format!(
            "set size 2^{k} is below the K > 4 range"
        )));
    }
    Ok(4 * k)
}

/// Parameter count and hidden width of a model, for reporting.
pub fn describe(model: &Rnn) -> (usize, usize) {
    (weight_count(&model.cell), model.cell.hidden())
}

/// Raw output of the exact parity RNN on a sequence.
pub fn parity_rnn_output(xs: &[i64]) -> Result<f64> {
    raw_output(&parity_rnn(), xs)
}
