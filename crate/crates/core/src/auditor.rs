//! Empirical invariance measurements.
//!
//! Violations are squared distances between final states (or pooled
//! embeddings for DeepSets). Every report also carries the same statistics
//! measured on the scalar output.
//!
//! Sampled audits take a seed; exhaustive audits enumerate every sequence
//! over a small alphabet and are capped at [`EXHAUSTIVE_MAX_ALPHABET`]
//! symbols and [`EXHAUSTIVE_MAX_LEN`] elements.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{bind, run_sequence, Recurrent, SequenceModel};
use crate::regularizers::{base_digits, StateBank, SubsetLengths};
use crate::rng::{self, StreamRng};
use crate::tasks::SequenceDataset;

pub const EXHAUSTIVE_MAX_ALPHABET: usize = 2;
pub const EXHAUSTIVE_MAX_LEN: usize = 6;

/// Squared violations at or below this count as zero. Reordered float sums
/// such as `(s + a) + b` and `(s + b) + a` may differ in the last bit.
pub const ZERO_TOL: f64 = 1e-18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTag {
    FullPerm,
    SubsetPerm,
    PairSwap,
    AdjacentSwap,
}

impl ProbeTag {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTag::FullPerm => "full-perm",
            ProbeTag::SubsetPerm => "subset-perm",
            ProbeTag::PairSwap => "pair-swap",
            ProbeTag::AdjacentSwap => "adjacent-swap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub probe: ProbeTag,
    /// Mean squared state violation.
    pub mean: f64,
    pub max: f64,
    pub output_mean: f64,
    pub output_max: f64,
    pub num_probes: usize,
    /// `None` for exhaustive audits.
    pub seed: Option<u64>,
}

impl AuditReport {
    pub const CSV_HEADER: &'static str = "probe,seed,num_probes,mean,max,output_mean,output_max";

    pub fn csv_row(&self) -> String {
        let seed = self
            .seed
            .map_or_else(|| "exhaustive".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.probe.name(),
            seed,
            self.num_probes,
            self.mean,
            self.max,
            self.output_mean,
            self.output_max
        )
    }

    /// True when no probe exceeded [`ZERO_TOL`].
    pub fn is_zero(&self) -> bool {
        self.max <= ZERO_TOL
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seed = self
            .seed
            .map_or_else(|| "exhaustive".to_string(), |s| format!("seed {s}"));
        write!(
            f,
            "{} ({}, {} probes): state mean {:.3e} max {:.3e}; output mean {:.3e} max {:.3e}",
            self.probe.name(),
            seed,
            self.num_probes,
            self.mean,
            self.max,
            self.output_mean,
            self.output_max
        )
    }
}

#[derive(Default)]
struct Tally {
    n: usize,
    sum: f64,
    max: f64,
    out_sum: f64,
    out_max: f64,
}

impl Tally {
    fn add(&mut self, state: f64, output: f64) {
        self.n += 1;
        self.sum += state;
        self.max = self.max.max(state);
        self.out_sum += output;
        self.out_max = self.out_max.max(output);
    }

    fn finish(self, probe: ProbeTag, seed: Option<u64>) -> Result<AuditReport> {
        if self.n == 0 {
            return Err(Error::contract(format!(
                "{} audit ran no probes",
                probe.name()
            )));
        }
        Ok(AuditReport {
            probe,
            mean: self.sum / self.n as f64,
            max: self.max,
            output_mean: self.out_sum / self.n as f64,
            output_max: self.out_max,
            num_probes: self.n,
            seed,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Summary and scalar output of one sequence.
struct Probe {
    state: Vec<f64>,
    output: f64,
}

fn probe<'t, M: SequenceModel + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    xs: &[i64],
) -> Result<Probe> {
    let s = model.summarize(tape, p, xs)?;
    let y = model.readout(p, s)?;
    Ok(Probe {
        state: s.value(),
        output: y.item(),
    })
}

fn compare(tally: &mut Tally, a: &Probe, b: &Probe) {
    let dy = a.output - b.output;
    tally.add(sq_dist(&a.state, &b.state), dy * dy);
}

/// Full-permutation audit: each sequence against `perms_per_seq` uniform
/// reorderings of itself.
pub fn audit_perm_invariance<M: SequenceModel + ?Sized>(
    model: &M,
    dataset: &SequenceDataset,
    perms_per_seq: usize,
    seed: u64,
) -> Result<AuditReport> {
    if perms_per_seq < 1 {
        return Err(Error::contract("perms_per_seq must be >= 1"));
    }
    let mut rng = rng::stream(seed, "auditor.perm");
    let mut tally = Tally::default();
    for xs in &dataset.sequences {
        let tape = Tape::new();
        let p = bind(&tape, model);
        let base = probe(model, &tape, &p, xs)?;
        for _ in 0..perms_per_seq {
            let mut ys = xs.clone();
            ys.shuffle(&mut rng);
            compare(&mut tally, &base, &probe(model, &tape, &p, &ys)?);
        }
    }
    tally.finish(ProbeTag::FullPerm, Some(seed))
}

fn draw_subset(xs: &[i64], lengths: SubsetLengths, rng: &mut StreamRng) -> Vec<i64> {
    let m = match lengths {
        SubsetLengths::Fixed(k) => k.min(xs.len()),
        SubsetLengths::Uniform | SubsetLengths::PrefixOnly => rng.gen_range(0..=xs.len()),
    };
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, m);
    chosen.iter().map(|&i| xs[i]).collect()
}

/// Subset audit: for each sequence, `subsets_per_seq` random
/// sub-multisets, each folded under `perms_per_subset` pairs of independent
/// uniform orderings.
pub fn audit_subset_invariance<M: SequenceModel + ?Sized>(
    model: &M,
    dataset: &SequenceDataset,
    subsets_per_seq: usize,
    perms_per_subset: usize,
    lengths: SubsetLengths,
    seed: u64,
) -> Result<AuditReport> {
    if subsets_per_seq < 1 || perms_per_subset < 1 {
        return Err(Error::contract("subset audit counts must be >= 1"));
    }
    let mut rng = rng::stream(seed, "auditor.subset");
    let mut tally = Tally::default();
    for xs in &dataset.sequences {
        let tape = Tape::new();
        let p = bind(&tape, model);
        for _ in 0..subsets_per_seq {
            let subset = draw_subset(xs, lengths, &mut rng);
            for _ in 0..perms_per_subset {
                let mut a = subset.clone();
                a.shuffle(&mut rng);
                let mut b = subset.clone();
                b.shuffle(&mut rng);
                compare(
                    &mut tally,
                    &probe(model, &tape, &p, &a)?,
                    &probe(model, &tape, &p, &b)?,
                );
            }
        }
    }
    tally.finish(ProbeTag::SubsetPerm, Some(seed))
}

/// Records `‖f(s, x1, x2) − f(s, x2, x1)‖²` and its output-level twin.
fn pair_probe<'t, M: Recurrent + ?Sized>(
    model: &M,
    tape: &'t Tape,
    p: &[Var<'t>],
    s: Var<'t>,
    x1: i64,
    x2: i64,
    tally: &mut Tally,
) -> Result<()> {
    let a = run_sequence(model, tape, p, s, &[x1, x2])?;
    let b = run_sequence(model, tape, p, s, &[x2, x1])?;
    let state = a.sub(b)?.sq_norm().item();
    let dy = model.readout(p, a)?.item() - model.readout(p, b)?.item();
    tally.add(state, dy * dy);
    Ok(())
}

/// Sampled pair-swap audit: `pairs` triples with `s` uniform from the bank
/// and `x1`, `x2` uniform from `inputs`.
pub fn audit_pair_swap<M: Recurrent + ?Sized>(
    model: &M,
    bank: &StateBank,
    inputs: &[i64],
    pairs: usize,
    seed: u64,
) -> Result<AuditReport> {
    if bank.is_empty() || inputs.is_empty() || pairs < 1 {
        return Err(Error::contract(
            "pair-swap audit needs states, inputs and at least one pair",
        ));
    }
    let mut rng = rng::stream(seed, "auditor.pair_swap");
    let tape = Tape::new();
    let p = bind(&tape, model);
    let mut tally = Tally::default();
    for _ in 0..pairs {
        let s = tape.vector(bank.states[rng.gen_range(0..bank.len())].clone());
        let x1 = *inputs.choose(&mut rng).expect("non-empty");
        let x2 = *inputs.choose(&mut rng).expect("non-empty");
        pair_probe(model, &tape, &p, s, x1, x2, &mut tally)?;
    }
    tally.finish(ProbeTag::PairSwap, Some(seed))
}

/// Pair-swap audit over every banked state and every ordered pair from
/// `alphabet`.
pub fn audit_pair_swap_exhaustive<M: Recurrent + ?Sized>(
    model: &M,
    bank: &StateBank,
    alphabet: &[i64],
) -> Result<AuditReport> {
    check_caps(alphabet, 0)?;
    let tape = Tape::new();
    let p = bind(&tape, model);
    let mut tally = Tally::default();
    for state in &bank.states {
        let s = tape.vector(state.clone());
        for &x1 in alphabet {
            for &x2 in alphabet {
                pair_probe(model, &tape, &p, s, x1, x2, &mut tally)?;
            }
        }
    }
    tally.finish(ProbeTag::PairSwap, None)
}

fn check_caps(alphabet: &[i64], max_len: usize) -> Result<()> {
    if alphabet.is_empty() || alphabet.len() > EXHAUSTIVE_MAX_ALPHABET {
        return Err(Error::contract(format!(
            "exhaustive audits take 1..={EXHAUSTIVE_MAX_ALPHABET} symbols, got {}",
            alphabet.len()
        )));
    }
    if max_len > EXHAUSTIVE_MAX_LEN {
        return Err(Error::contract(format!(
            "exhaustive audits cap length at {EXHAUSTIVE_MAX_LEN}, got {max_len}"
        )));
    }
    Ok(())
}

/// Every sequence over `alphabet` with length in `lens`.
fn all_sequences(alphabet: &[i64], lens: std::ops::RangeInclusive<usize>) -> Vec<Vec<i64>> {
    let a = alphabet.len();
    lens.flat_map(|len| {
        (0..a.pow(len as u32)).map(move |code| {
            base_digits(code, a, len)
                .into_iter()
                .map(|d| alphabet[d])
                .collect()
        })
    })
    .collect()
}

/// Compares every sequence with the sorted representative of its multiset.
/// Each sorted sequence is evaluated once.
fn audit_against_sorted<M: SequenceModel + ?Sized>(
    model: &M,
    seqs: &[Vec<i64>],
    tag: ProbeTag,
) -> Result<AuditReport> {
    let tape = Tape::new();
    let p = bind(&tape, model);
    let mut canon: BTreeMap<Vec<i64>, Probe> = BTreeMap::new();
    let mut tally = Tally::default();
    for xs in seqs {
        let mut key = xs.clone();
        key.sort_unstable();
        if !canon.contains_key(&key) {
            let pr = probe(model, &tape, &p, &key)?;
            canon.insert(key.clone(), pr);
        }
        compare(&mut tally, &canon[&key], &probe(model, &tape, &p, xs)?);
    }
    tally.finish(tag, None)
}

/// Full-permutation audit over every sequence of length exactly `len`.
pub fn audit_perm_exhaustive<M: SequenceModel + ?Sized>(
    model: &M,
    alphabet: &[i64],
    len: usize,
) -> Result<AuditReport> {
    check_caps(alphabet, len)?;
    audit_against_sorted(
        model,
        &all_sequences(alphabet, len..=len),
        ProbeTag::FullPerm,
    )
}

/// Subset invariance by enumeration, for data supported on sequences of length
/// `max_len`: their sub-multisets are all sequences of length `0..=max_len`,
/// and each must fold to the same state in every order.
pub fn audit_subset_exhaustive<M: SequenceModel + ?Sized>(
    model: &M,
    alphabet: &[i64],
    max_len: usize,
) -> Result<AuditReport> {
    check_caps(alphabet, max_len)?;
    audit_against_sorted(
        model,
        &all_sequences(alphabet, 0..=max_len),
        ProbeTag::SubsetPerm,
    )
}

/// Every sequence of length `2..=max_len` against each of its adjacent
/// transpositions.
pub fn audit_adjacent_exhaustive<M: SequenceModel + ?Sized>(
    model: &M,
    alphabet: &[i64],
    max_len: usize,
) -> Result<AuditReport> {
    check_caps(alphabet, max_len)?;
    let tape = Tape::new();
    let p = bind(&tape, model);
    let mut tally = Tally::default();
    for xs in all_sequences(alphabet, 2..=max_len.max(2)) {
        if xs.len() > max_len {
            continue;
        }
        let base = probe(model, &tape, &p, &xs)?;
        for i in 0..xs.len() - 1 {
            let mut ys = xs.clone();
            ys.swap(i, i + 1);
            compare(&mut tally, &base, &probe(model, &tape, &p, &ys)?);
        }
    }
    tally.finish(ProbeTag::AdjacentSwap, None)
}

fn check_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &v in perm {
        if v >= perm.len() || std::mem::replace(&mut seen[v], true) {
            return Err(Error::contract(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Position swaps turning `0..t` into `perm`: scan for the first position
/// that disagrees with `perm` and swap in the element it should hold.
/// Every returned pair has `i < j`.
pub fn swap_chain(perm: &[usize]) -> Result<Vec<(usize, usize)>> {
    check_permutation(perm)?;
    let mut cur: Vec<usize> = (0..perm.len()).collect();
    let mut pos: Vec<usize> = (0..perm.len()).collect();
    let mut chain = Vec::new();
    for i in 0..perm.len() {
        if cur[i] != perm[i] {
            let j = pos[perm[i]];
            chain.push((i, j));
            cur.swap(i, j);
            pos[cur[i]] = i;
            pos[cur[j]] = j;
        }
    }
    Ok(chain)
}

/// Rewrites a position swap `(i, j)`, `i < j`, as adjacent transpositions:
/// carry the element at `i` right to `j`, then the displaced element from
/// `j − 1` back to `i`. Returns the left index `k` of each `(k, k+1)` swap,
/// `2(j − i) − 1` in total.
pub fn adjacent_decomposition(i: usize, j: usize) -> Vec<usize> {
    if i >= j {
        return Vec::new();
    }
    (i..j).chain((i..j - 1).rev()).collect()
}

/// Applies position swaps to a sequence in order.
pub fn apply_swaps<T: Clone>(xs: &[T], swaps: &[(usize, usize)]) -> Vec<T> {
    let mut out = xs.to_vec();
    for &(i, j) in swaps {
        out.swap(i, j);
    }
    out
}
