//! Invariance penalties for recurrent models.
//!
//! * SUB: fold two independent random orderings of a random sub-multiset of
//!   a training sequence and penalise the squared gap between final states.
//! * SIRE: at states the model can actually reach on training data, penalise
//!   `‖f(s, x1, x2) − f(s, x2, x1)‖²`, the failure of one adjacent swap.
//!
//! Reachable states live in a [`StateBank`] that remembers the sub-sequence
//! behind each state, so the state can be recomputed under new parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sum_all, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{bind, run_sequence, Recurrent};
use crate::rng::{self, StreamRng};
use crate::tasks::SequenceDataset;

/// Law of the subset length `m` for a sequence of length `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetLengths {
    /// `m` uniform on `0..=len`, elements an ordered sample without
    /// replacement.
    Uniform,
    /// `m` uniform on `0..=len`, elements the first `m` in original order.
    PrefixOnly,
    /// `m = min(k, len)`, elements an ordered sample without replacement.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Bank size for SIRE; number of draws for SUB.
    pub states_per_batch: usize,
    pub subset_lengths: SubsetLengths,
    /// SIRE input pairs drawn per banked state.
    pub pairs_per_state: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            states_per_batch: 32,
            subset_lengths: SubsetLengths::Uniform,
            pairs_per_state: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states_per_batch < 1 || self.pairs_per_state < 1 {
            return Err(Error::config("sampler counts must be >= 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SamplerConfig { seed, ..self }
    }
}

/// Where a banked state came from: sequence `seq_id`, elements at `indices`
/// taken in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seq_id: usize,
    pub indices: Vec<usize>,
    /// The sub-sequence itself, `indices` resolved against the sequence.
    pub inputs: Vec<i64>,
}

/// States reachable by folding the model over sub-sequences of the data.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBank {
    pub states: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    pub seed: u64,
}

impl StateBank {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Every state reached by a sequence of length `0..=max_len` over
    /// `alphabet`. Sequence ids enumerate the length-`max_len` sequences in
    /// lexicographic order; shorter inputs use the id of their zero-padded
    /// extension and a prefix of indices.
    pub fn exhaustive<M: Recurrent + ?Sized>(
        model: &M,
        alphabet: &[i64],
        max_len: usize,
    ) -> Result<StateBank> {
        if alphabet.is_empty() {
            return Err(Error::contract("empty alphabet"));
        }
        let tape = Tape::new();
        let p = bind(&tape, model);
        let s0 = model.initial_state(&tape, &p);
        let a = alphabet.len();
        let mut provenance = Vec::new();
        let mut states = Vec::new();
        for len in 0..=max_len {
            for code in 0..a.pow(len as u32) {
                let digits = base_digits(code, a, len);
                let inputs: Vec<i64> = digits.iter().map(|&d| alphabet[d]).collect();
                let seq_id =
                    digits.iter().fold(0, |acc, &d| acc * a + d) * a.pow((max_len - len) as u32);
                states.push(run_sequence(model, &tape, &p, s0, &inputs)?.value());
                provenance.push(Provenance {
                    seq_id,
                    indices: (0..len).collect(),
                    inputs,
                });
            }
        }
        Ok(StateBank {
            states,
            provenance,
            seed: 0,
        })
    }
}

/// Big-endian base-`a` digits of `code`, exactly `len` of them.
pub(crate) fn base_digits(mut code: usize, a: usize, len: usize) -> Vec<usize> {
    let mut digits = vec![0; len];
    for d in digits.iter_mut().rev() {
        *d = code % a;
        code /= a;
    }
    digits
}

fn sample_subset(xs: &[i64], lengths: SubsetLengths, rng: &mut StreamRng) -> Vec<usize> {
    let len = xs.len();
    match lengths {
        SubsetLengths::PrefixOnly => (0..rng.gen_range(0..=len)).collect(),
        SubsetLengths::Uniform | SubsetLengths::Fixed(_) => {
            let m = match lengths {
                SubsetLengths::Fixed(k) => k.min(len),
                _ => rng.gen_range(0..=len),
            };
            let mut idx: Vec<usize> = (0..len).collect();
            let (chosen, _) = idx.partial_shuffle(rng, m);
            chosen.to_vec()
        }
    }
}

/// Provenance draws for a bank, without evaluating any states.
pub fn sample_provenance(
    dataset: &SequenceDataset,
    cfg: &SamplerConfig,
) -> Result<Vec<Provenance>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("state sampling needs a non-empty dataset"));
    }
    let mut rng = rng::stream(cfg.seed, "regularizers.states");
    Ok((0..cfg.states_per_batch)
        .map(|_| {
            let seq_id = rng.gen_range(0..dataset.len());
            let xs = &dataset.sequences[seq_id];
            let indices = sample_subset(xs, cfg.subset_lengths, &mut rng);
            let inputs = indices.iter().map(|&i| xs[i]).collect();
            Provenance {
                seq_id,
                indices,
                inputs,
            }
        })
        .collect())
}

/// Samples `cfg.states_per_batch` reachable states: a uniform training
/// sequence, a random ordered subset of its elements, and the fold of the
/// model over that subset from `s0`.
pub fn collect_states<M: Recurrent + ?Sized>(
    model: &M,
    dataset: &SequenceDataset,
    cfg: &SamplerConfig,
) -> Result<StateBank> {
    let provenance = sample_provenance(dataset, cfg)?;
    let tape = Tape::new();
    let p = bind(&tape, model);
    let s0 = model.initial_state(&tape, &p);
    let states = provenance
        .iter()
        .map(|pr| Ok(run_sequence(model, &tape, &p, s0, &pr.inputs)?.value()))
        .collect::<Result<_>>()?;
    Ok(StateBank {
        states,
        provenance,
        seed: cfg.seed,
    })
}

/// `f(s, x1, x2) − f(s, x2, x1)`: the two-step results of swapped inputs.
pub fn swap_residual<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    s: Var<'t>,
    x1: i64,
    x2: i64,
) -> Result<Var<'t>> {
    let a = run_sequence(model, tape, p, s, &[x1, x2])?;
    let b = run_sequence(model, tape, p, s, &[x2, x1])?;
    a.sub(b)
}

/// How banked states enter the SIRE graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankGradient {
    /// Re-run each provenance fold under the current parameters, so
    /// gradients reach the states too.
    #[default]
    Rematerialize,
    /// Use stored state values as constants.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SireOptions {
    pub pairs_per_state: usize,
    pub gradient: BankGradient,
    /// Seeds the input-pair draws.
    pub seed: u64,
}

/// Mean over banked states and sampled input pairs of
/// `‖swap_residual‖²`, with `x1, x2` drawn independently and uniformly from
/// `elements`.
pub fn sire_penalty<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    bank: &StateBank,
    elements: &[i64],
    opts: &SireOptions,
) -> Result<Var<'t>> {
    let states = match opts.gradient {
        BankGradient::Rematerialize => {
            let s0 = model.initial_state(tape, p);
            bank.provenance
                .iter()
                .map(|pr| run_sequence(model, tape, p, s0, &pr.inputs))
                .collect::<Result<Vec<_>>>()?
        }
        BankGradient::Detached => bank.states.iter().map(|s| tape.vector(s.clone())).collect(),
    };
    sire_penalty_at(model, tape, p, &states, elements, opts)
}

/// [`sire_penalty`] on states already placed on the tape.
pub fn sire_penalty_at<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    states: &[Var<'t>],
    elements: &[i64],
    opts: &SireOptions,
) -> Result<Var<'t>> {
    if states.is_empty() {
        return Err(Error::contract("SIRE needs a non-empty state bank"));
    }
    if opts.pairs_per_state < 1 {
        return Err(Error::contract("SIRE needs at least one pair per state"));
    }
    if elements.is_empty() {
        return Err(Error::contract("SIRE needs a non-empty element pool"));
    }
    let mut rng = rng::stream(opts.seed, "regularizers.sire_pairs");
    let mut terms = Vec::with_capacity(states.len() * opts.pairs_per_state);
    for &s in states {
        for _ in 0..opts.pairs_per_state {
            let x1 = *elements.choose(&mut rng).expect("non-empty");
            let x2 = *elements.choose(&mut rng).expect("non-empty");
            terms.push(swap_residual(model, tape, p, s, x1, x2)?.sq_norm());
        }
    }
    Ok(sum_all(&terms)?.scale(1.0 / terms.len() as f64))
}

/// Mean `‖swap_residual‖²` over every banked state and every ordered pair
/// from `alphabet`.
pub fn sire_exhaustive<M: Recurrent + ?Sized>(
    model: &M,
    bank: &StateBank,
    alphabet: &[i64],
) -> Result<f64> {
    if bank.is_empty() || alphabet.is_empty() {
        return Err(Error::contract(
            "exhaustive SIRE needs states and an alphabet",
        ));
    }
    let tape = Tape::new();
    let p = bind(&tape, model);
    let mut total = 0.0;
    for state in &bank.states {
        let s = tape.vector(state.clone());
        for &x1 in alphabet {
            for &x2 in alphabet {
                total += swap_residual(model, &tape, &p, s, x1, x2)?.sq_norm().item();
            }
        }
    }
    Ok(total / (bank.len() * alphabet.len() * alphabet.len()) as f64)
}

/// Mean over `cfg.states_per_batch` draws of `‖h(π̂(S)) − h(π̃(S))‖²`, where
/// `S` is a random subset of a random training sequence and `π̂`, `π̃` are
/// independent uniform orderings of it.
pub fn sub_penalty<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    dataset: &SequenceDataset,
    cfg: &SamplerConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("SUB needs a non-empty dataset"));
    }
    let mut rng = rng::stream(cfg.seed, "regularizers.sub");
    let s0 = model.initial_state(tape, p);
    let mut terms = Vec::with_capacity(cfg.states_per_batch);
    for _ in 0..cfg.states_per_batch {
        let xs = &dataset.sequences[rng.gen_range(0..dataset.len())];
        let subset: Vec<i64> = sample_subset(xs, cfg.subset_lengths, &mut rng)
            .into_iter()
            .map(|i| xs[i])
            .collect();
        let mut first = subset.clone();
        first.shuffle(&mut rng);
        let mut second = subset;
        second.shuffle(&mut rng);
        let a = run_sequence(model, tape, p, s0, &first)?;
        let b = run_sequence(model, tape, p, s0, &second)?;
        terms.push(a.sub(b)?.sq_norm());
    }
    Ok(sum_all(&terms)?.scale(1.0 / terms.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::parity_rnn;
    use crate::models::AffineCell;
    use crate::tasks::{gen_parity, TaskKind};

    fn single(seq: Vec<i64>) -> SequenceDataset {
        SequenceDataset::labelled(TaskKind::Sum, 9, 0, vec![seq]).unwrap()
    }

    fn residual(model: &impl Recurrent, s: f64, x1: i64, x2: i64) -> f64 {
        let tape = Tape::new();
        let p = bind(&tape, model);
        swap_residual(model, &tape, &p, tape.vector(vec![s]), x1, x2)
            .unwrap()
            .item()
    }

    #[test]
    fn swap_residual_examples() {
        let doubling = AffineCell::new(2.0, 1.0);
        assert_eq!(residual(&doubling, 0.0, 0, 1), -1.0);
        assert_eq!(residual(&doubling, 3.0, 1, 1), 0.0);
        assert_eq!(residual(&parity_rnn(), 0.0, 0, 1), 0.0);
        assert_eq!(residual(&parity_rnn(), 1.0, 1, 0), 0.0);
    }

    #[test]
    fn zero_length_subsets_give_initial_state() {
        let ds = gen_parity(20, 2, 6, 1).unwrap();
        let cfg = SamplerConfig {
            states_per_batch: 10,
            subset_lengths: SubsetLengths::Fixed(0),
            ..SamplerConfig::default()
        };
        let bank = collect_states(&parity_rnn(), &ds, &cfg).unwrap();
        assert!(bank.states.iter().all(|s| s == &vec![0.0]));
    }

    #[test]
    fn parity_bank_is_binary_and_reproducible() {
        let ds = gen_parity(50, 2, 10, 3).unwrap();
        let cfg = SamplerConfig {
            states_per_batch: 200,
            ..SamplerConfig::default()
        };
        let model = parity_rnn();
        let bank = collect_states(&model, &ds, &cfg).unwrap();
        assert!(bank.states.iter().all(|s| s[0] == 0.0 || s[0] == 1.0));
        assert_eq!(bank, collect_states(&model, &ds, &cfg).unwrap());
        for (s, pr) in bank.states.iter().zip(&bank.provenance) {
            let xs = &ds.sequences[pr.seq_id];
            let resolved: Vec<i64> = pr.indices.iter().map(|&i| xs[i]).collect();
            assert_eq!(resolved, pr.inputs);
            let mut sorted = pr.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), pr.indices.len());
            assert_eq!(&crate::models::final_state(&model, &pr.inputs).unwrap(), s);
        }
    }

    #[test]
    fn prefix_only_keeps_order() {
        let ds = single(vec![4, 3, 2, 1]);
        let cfg = SamplerConfig {
            states_per_batch: 30,
            subset_lengths: SubsetLengths::PrefixOnly,
            ..SamplerConfig::default()
        };
        for pr in sample_provenance(&ds, &cfg).unwrap() {
            assert_eq!(pr.indices, (0..pr.indices.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bad_sampler_inputs() {
        let ds = single(vec![1]);
        let cfg = SamplerConfig {
            states_per_batch: 0,
            ..SamplerConfig::default()
        };
        assert!(collect_states(&parity_rnn(), &ds, &cfg).is_err());
        let empty = SequenceDataset::labelled(TaskKind::Sum, 9, 0, vec![]).unwrap();
        assert!(collect_states(&parity_rnn(), &empty, &SamplerConfig::default()).is_err());
    }

    fn sire_value(model: &impl Recurrent, bank: &StateBank, elements: &[i64]) -> f64 {
        let tape = Tape::new();
        let p = bind(&tape, model);
        let opts = SireOptions {
            pairs_per_state: 4,
            gradient: BankGradient::Rematerialize,
            seed: 11,
        };
        sire_penalty(model, &tape, &p, bank, elements, &opts)
            .unwrap()
            .item()
    }

    #[test]
    fn sire_vanishes_on_commutative_cells() {
        let ds = gen_parity(30, 2, 8, 4).unwrap();
        let model = parity_rnn();
        let bank = collect_states(&model, &ds, &SamplerConfig::default()).unwrap();
        assert_eq!(sire_value(&model, &bank, &ds.elements()), 0.0);
        let add = AffineCell::additive();
        let bank = collect_states(&add, &ds, &SamplerConfig::default()).unwrap();
        assert_eq!(sire_value(&add, &bank, &ds.elements()), 0.0);
    }

    #[test]
    fn sire_on_doubling_cell_with_distinct_pairs() {
        // distinct pairs contribute 1 each, equal pairs 0
        let cell = AffineCell::new(2.0, 1.0);
        let bank = StateBank::exhaustive(&cell, &[0, 1], 2).unwrap();
        assert_eq!(bank.len(), 7);
        assert_eq!(sire_exhaustive(&cell, &bank, &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn exhaustive_bank_provenance() {
        let bank = StateBank::exhaustive(&AffineCell::additive(), &[0, 1], 3).unwrap();
        assert_eq!(bank.len(), 1 + 2 + 4 + 8);
        let last = bank.provenance.last().unwrap();
        assert_eq!(last.inputs, vec![1, 1, 1]);
        assert_eq!(last.seq_id, 7);
        assert_eq!(bank.provenance[2].inputs, vec![1]);
        assert_eq!(bank.provenance[2].seq_id, 4);
    }

    #[test]
    fn sub_vanishes_for_single_elements_and_parity() {
        let ds = single(vec![3, 1, 4, 1, 5]);
        let cfg = SamplerConfig {
            states_per_batch: 50,
            subset_lengths: SubsetLengths::Fixed(1),
            ..SamplerConfig::default()
        };
        let cell = AffineCell::new(2.0, 1.0);
        let tape = Tape::new();
        let p = bind(&tape, &cell);
        assert_eq!(
            sub_penalty(&cell, &tape, &p, &ds, &cfg).unwrap().item(),
            0.0
        );

        let parity = gen_parity(30, 2, 8, 4).unwrap();
        let model = parity_rnn();
        let p = bind(&tape, &model);
        let cfg = SamplerConfig::default();
        assert_eq!(
            sub_penalty(&model, &tape, &p, &parity, &cfg)
                .unwrap()
                .item(),
            0.0
        );
    }

    #[test]
    fn sub_on_doubling_cell_approaches_one_half() {
        let ds = single(vec![0, 1]);
        let cfg = SamplerConfig {
            states_per_batch: 4000,
            subset_lengths: SubsetLengths::Fixed(2),
            ..SamplerConfig::default()
        };
        let cell = AffineCell::new(2.0, 1.0);
        let tape = Tape::new();
        let v = sub_penalty(&cell, &tape, &[], &ds, &cfg).unwrap().item();
        // Bernoulli(1/2) mean; 4000 draws put 0.05 beyond 6 sigma
        assert!((v - 0.5).abs() < 0.05, "{v}");
    }
}
