//! Synthetic sequence tasks, their label oracles, and the local-window
//! shuffle used for permuted-pixel inputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::parity_oracle;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Parity,
    Sum,
    Range,
    Variance,
    HalfRange,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Parity,
        TaskKind::Sum,
        TaskKind::Range,
        TaskKind::Variance,
        TaskKind::HalfRange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::Sum => "sum",
            TaskKind::Range => "range",
            TaskKind::Variance => "variance",
            TaskKind::HalfRange => "half-range",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task `{s}`")))
    }

    pub fn is_classification(self) -> bool {
        self == TaskKind::Parity
    }

    /// Label of `xs` under this task.
    pub fn label(self, xs: &[i64]) -> Result<f64> {
        match self {
            TaskKind::Parity => Ok(parity_oracle(xs)? as f64),
            TaskKind::Sum => sum_label(xs),
            TaskKind::Range => range_label(xs),
            TaskKind::Variance => variance_label(xs),
            TaskKind::HalfRange => half_range_label(xs),
        }
    }
}

fn non_empty(xs: &[i64], task: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::contract(format!(
            "{task} label of an empty sequence"
        )));
    }
    Ok(())
}

pub fn sum_label(xs: &[i64]) -> Result<f64> {
    non_empty(xs, "sum")?;
    Ok(xs.iter().sum::<i64>() as f64)
}

pub fn range_label(xs: &[i64]) -> Result<f64> {
    non_empty(xs, "range")?;
    let max = xs.iter().max().expect("non-empty");
    let min = xs.iter().min().expect("non-empty");
    Ok((max - min) as f64)
}

/// Population variance `(1/n) Σ (x - mean)²`.
///
/// Computed as `(n Σx² - (Σx)²) / n²` in integers so the label is the
/// correctly rounded value of the exact rational.
pub fn variance_label(xs: &[i64]) -> Result<f64> {
    non_empty(xs, "variance")?;
    let n = xs.len() as i128;
    let s: i128 = xs.iter().map(|&x| x as i128).sum();
    let sq: i128 = xs.iter().map(|&x| (x as i128) * (x as i128)).sum();
    Ok((n * sq - s * s) as f64 / (n * n) as f64)
}

/// `max(first ⌊k/2⌋ elements) − min(remaining elements)`.
pub fn half_range_label(xs: &[i64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::contract(format!(
            "half-range needs length >= 2, got {}",
            xs.len()
        )));
    }
    let (first, rest) = xs.split_at(xs.len() / 2);
    let max = first
        .iter()
        .max()
        .expect("k >= 2 leaves a non-empty first half");
    let min = rest.iter().min().expect("non-empty second half");
    Ok((max - min) as f64)
}

/// Integer sequences with labels from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub task: TaskKind,
    /// Largest allowed element; elements lie in `0..=alphabet_max`.
    pub alphabet_max: i64,
    pub seed: u64,
    pub sequences: Vec<Vec<i64>>,
    pub labels: Vec<f64>,
}

const DATASET_MAGIC: &str = "perminv-dataset";

impl SequenceDataset {
    /// Builds a dataset and labels it with the task oracle.
    pub fn labelled(
        task: TaskKind,
        alphabet_max: i64,
        seed: u64,
        sequences: Vec<Vec<i64>>,
    ) -> Result<Self> {
        let labels = sequences
            .iter()
            .map(|xs| task.label(xs))
            .collect::<Result<_>>()?;
        let ds = SequenceDataset {
            task,
            alphabet_max,
            seed,
            sequences,
            labels,
        };
        ds.check_alphabet()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i64], f64)> {
        self.sequences
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// Every element of every sequence, in order. The empirical element
    /// marginal is uniform sampling from this list.
    pub fn elements(&self) -> Vec<i64> {
        self.sequences.iter().flatten().copied().collect()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Subset by example indices, keeping metadata.
    pub fn select(&self, idx: &[usize]) -> SequenceDataset {
        SequenceDataset {
            task: self.task,
            alphabet_max: self.alphabet_max,
            seed: self.seed,
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check_alphabet(&self) -> Result<()> {
        for (i, xs) in self.sequences.iter().enumerate() {
            if let Some(&x) = xs.iter().find(|&&x| x < 0 || x > self.alphabet_max) {
                return Err(Error::contract(format!(
                    "sequence {i} has element {x} outside 0..={}",
                    self.alphabet_max
                )));
            }
        }
        Ok(())
    }

    /// Recomputes every label with the oracle; errors on the first mismatch.
    pub fn verify_labels(&self) -> Result<()> {
        self.check_alphabet()?;
        for (i, (xs, y)) in self.iter().enumerate() {
            let expected = self.task.label(xs)?;
            if expected.to_bits() != y.to_bits() {
                return Err(Error::contract(format!(
                    "label {y} of example {i} differs from oracle value {expected}"
                )));
            }
        }
        Ok(())
    }

    /// Header line, then `ints<TAB>label` per example.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{DATASET_MAGIC} task={} alphabet_max={} seed={}\n",
            self.task.name(),
            self.alphabet_max,
            self.seed
        );
        for (xs, y) in self.iter() {
            let ints: Vec<String> = xs.iter().map(i64::to_string).collect();
            writeln!(out, "{}\t{y:?}", ints.join(" ")).expect("writing to a String");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty dataset file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(DATASET_MAGIC) {
            return Err(Error::parse(1, "missing dataset header"));
        }
        let (mut task, mut alphabet_max, mut seed) = (None, None, None);
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("malformed header field `{field}`")))?;
            let bad = || Error::parse(1, format!("bad value in `{field}`"));
            match key {
                "task" => task = Some(TaskKind::parse(value).map_err(|_| bad())?),
                "alphabet_max" => alphabet_max = Some(value.parse::<i64>().map_err(|_| bad())?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                other => return Err(Error::parse(1, format!("unknown header field `{other}`"))),
            }
        }
        let missing = |name: &str| Error::parse(1, format!("header lacks `{name}`"));
        let mut ds = SequenceDataset {
            task: task.ok_or_else(|| missing("task"))?,
            alphabet_max: alphabet_max.ok_or_else(|| missing("alphabet_max"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            sequences: Vec::new(),
            labels: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let (ints, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected `ints<TAB>label`"))?;
            let xs = ints
                .split_whitespace()
                .map(|t| t.parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
            let y = label
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
            ds.sequences.push(xs);
            ds.labels.push(y);
        }
        ds.check_alphabet()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Fair i.i.d. bits with lengths uniform on `len_lo..=len_hi`.
pub fn gen_parity(
    count: usize,
    len_lo: usize,
    len_hi: usize,
    seed: u64,
) -> Result<SequenceDataset> {
    if len_lo < 1 || len_lo > len_hi {
        return Err(Error::contract(format!(
            "parity lengths need 1 <= lo <= hi, got {len_lo}..={len_hi}"
        )));
    }
    let mut rng = rng::stream(seed, "tasks.parity");
    let sequences = (0..count)
        .map(|_| {
            let len = rng.gen_range(len_lo..=len_hi);
            (0..len).map(|_| rng.gen_range(0..=1)).collect()
        })
        .collect();
    SequenceDataset::labelled(TaskKind::Parity, 1, seed, sequences)
}

/// Fixed-length sequences of i.i.d. uniform integers in `0..=alphabet_max`.
pub fn gen_arithmetic(
    task: TaskKind,
    count: usize,
    seq_len: usize,
    alphabet_max: i64,
    seed: u64,
) -> Result<SequenceDataset> {
    if task == TaskKind::Parity {
        return Err(Error::contract("parity data comes from gen_parity"));
    }
    if alphabet_max < 0 {
        return Err(Error::contract(format!("alphabet_max {alphabet_max} < 0")));
    }
    let mut rng = rng::stream(seed, task.name());
    let sequences = (0..count)
        .map(|_| {
            (0..seq_len)
                .map(|_| rng.gen_range(0..=alphabet_max))
                .collect()
        })
        .collect();
    SequenceDataset::labelled(task, alphabet_max, seed, sequences)
}

/// Shuffles `values` within consecutive windows, once per window size in
/// order; a trailing partial window is shuffled within itself.
///
/// Returns the output and the composed permutation `perm` with
/// `output[i] == values[perm[i]]`.
pub fn local_perturb<T: Copy>(
    values: &[T],
    window_sizes: &[usize],
    seed: u64,
) -> Result<(Vec<T>, Vec<usize>)> {
    if window_sizes.contains(&0) {
        return Err(Error::contract("window size 0"));
    }
    let mut rng = rng::stream(seed, "tasks.local_perturb");
    let mut perm: Vec<usize> = (0..values.len()).collect();
    for &w in window_sizes {
        for block in perm.chunks_mut(w) {
            block.shuffle(&mut rng);
        }
    }
    let out = perm.iter().map(|&j| values[j]).collect();
    Ok((out, perm))
}

/// Largest `|perm[i] - i|`.
pub fn max_displacement(perm: &[usize]) -> usize {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| i.abs_diff(j))
        .max()
        .unwrap_or(0)
}
