//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts the same condition.
//!
//! Lines go straight to the process stdout so they show up without
//! `--nocapture`.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use perminv::auditor::{audit_pair_swap_exhaustive, audit_subset_exhaustive};
use perminv::exact::{
    check_parity_exhaustive, min_deepsets_units, parity_rnn, reduce_binary_deepsets,
    trace_piecewise_linear, weight_count,
};
use perminv::experiments::{mean_selected_test, presets, run_sweep, SweepRow};
use perminv::gradcheck::grad_check;
use perminv::models::{
    raw_output, Activation, AffineCell, DeepSets, Gru, InputEncoding, LengthGatedCell, Link,
    MaxCell, Mlp, Model, Recurrent, Rnn, RnnParams,
};
use perminv::regularizers::{
    collect_states, sire_exhaustive, sire_penalty, sub_penalty, BankGradient, SamplerConfig,
    SireOptions, StateBank,
};
use perminv::tasks::{gen_arithmetic, gen_parity, local_perturb, max_displacement, TaskKind};
use perminv::training::{train, LossKind, TrainingConfig};
use perminv::{rng, Tensor};
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "    {text}");
}

#[test]
fn c01_exact_parity_construction() {
    let t = Instant::now();
    let model = parity_rnn();
    let cell = &model.cell;
    let weights_ok = cell.w_out.data() == [1.0, -1.0, -1.0]
        && cell.w_x.data() == [2.0, 2.0, 2.0]
        && cell.w_s.data() == [2.0, 2.0, 2.0]
        && cell.b.data() == [0.0, -1.0, -3.0];
    let count = weight_count(cell);
    let check = check_parity_exhaustive(&model, 16).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_perminv"))
        .args(["construct-parity", "--max-len", "16"])
        .env("PERMINV_OUT_DIR", dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli_ok =
        out.status.success() && stdout.contains("-> PASS") && stdout.contains("parameters 12");
    let secs = t.elapsed().as_secs_f64();

    let pass = weights_ok
        && count == 12
        && check.passed(1e-9)
        && check.sequences == (1 << 17) - 1
        && cli_ok
        && secs < 10.0;
    verdict(
        1,
        "exact parity RNN",
        pass,
        &format!(
            "{count} weights, {} sequences up to length 16, max deviation {:e}, {} mismatches, cli {}, {secs:.1}s < 10s",
            check.sequences,
            check.max_deviation,
            check.mismatches,
            if cli_ok { "ok" } else { "failed" }
        ),
    );
    assert!(pass);
}

fn best_at(rows: &[SweepRow], len: f64) -> f64 {
    rows.iter()
        .filter(|r| r.point == len)
        .map(|r| r.test_metric)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn c02_parity_generalization_gap() {
    let t = Instant::now();
    let seeds = [1, 2, 3, 4, 5];
    let rnn_rows = run_sweep(&presets::parity_rnn(), &seeds, 1).unwrap();
    let ds_rows = run_sweep(&presets::parity_deepsets(), &seeds, 1).unwrap();
    for (name, rows) in [("rnn", &rnn_rows), ("deepsets", &ds_rows)] {
        for seed in seeds {
            let accs: Vec<String> = rows
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| format!("{}:{:.3}", r.point, r.test_metric))
                .collect();
            let train_acc = rows.iter().find(|r| r.seed == seed).unwrap().train_metric;
            note(&format!(
                "{name} seed {seed}: train {train_acc:.3}, test {}",
                accs.join(" ")
            ));
        }
    }
    let rnn_best = best_at(&rnn_rows, 100.0);
    let ds_best = best_at(&ds_rows, 100.0);
    let secs = t.elapsed().as_secs_f64();
    let pass = rnn_best >= 0.95 && ds_best <= 0.7 && secs < 20.0 * 60.0;
    verdict(
        2,
        "parity length generalization gap",
        pass,
        &format!("best RNN accuracy at length 100 {rnn_best:.4} >= 0.95, best DeepSets {ds_best:.4} <= 0.7, {secs:.0}s"),
    );
    assert!(pass);
}

/// `s' = W_s s + W_x x + b` with `(W_s − I) W_x = 0`: order-free by
/// construction. `eps` perturbs `W_s` off that subspace.
fn commuting_linear_cell<R: Rng>(r: &mut R, eps: f64) -> Rnn {
    let h = 3;
    let w: Vec<f64> = (0..h).map(|_| r.gen_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..h).map(|_| r.gen_range(-0.5..0.5)).collect();
    let mut v: Vec<f64> = (0..h).map(|_| r.gen_range(-0.5..0.5)).collect();
    let ww: f64 = w.iter().map(|a| a * a).sum();
    let vw: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    for (vi, wi) in v.iter_mut().zip(&w) {
        *vi -= vw / ww * wi;
    }
    let mut ws = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            ws[i * h + j] = f64::from(u8::from(i == j)) + u[i] * v[j];
        }
    }
    ws[0] += eps;
    let b: Vec<f64> = (0..h).map(|_| r.gen_range(-0.5..0.5)).collect();
    let s0: Vec<f64> = (0..h).map(|_| r.gen_range(-0.5..0.5)).collect();
    let cell = RnnParams::new(
        Tensor::identity(h),
        Tensor::matrix(h, 1, w).unwrap(),
        Tensor::matrix(h, h, ws).unwrap(),
        Tensor::vector(b),
        Tensor::vector(s0),
        Activation::Identity,
    )
    .unwrap();
    let head = Mlp::linear((0..h).map(|_| r.gen_range(-1.0..1.0)).collect(), 0.1);
    Rnn::new(cell, head, InputEncoding::raw(), Link::Identity).unwrap()
}

fn cell_family() -> Vec<(String, Box<dyn Recurrent>)> {
    let mut r = rng::stream(2024, "acceptance.cells");
    let fixed = |k: usize| -> (&str, Box<dyn Recurrent>) {
        match k % 5 {
            0 => ("additive", Box::new(AffineCell::additive())),
            1 => ("max", Box::new(MaxCell)),
            2 => ("parity", Box::new(parity_rnn())),
            3 => ("doubling", Box::new(AffineCell::new(2.0, 1.0))),
            _ => ("length-gated", Box::new(LengthGatedCell { n: 3 })),
        }
    };
    (0..50)
        .map(|i| match i % 5 {
            0 | 1 => {
                let act = if i % 5 == 0 {
                    Activation::Tanh
                } else {
                    Activation::Relu
                };
                let width = 2 + i % 2;
                let m = Rnn::init(InputEncoding::raw(), width, act, Link::Identity, &mut r);
                (
                    format!("random-{}-{width}", act.name()),
                    Box::new(m) as Box<dyn Recurrent>,
                )
            }
            2 => (
                "commuting-linear".to_string(),
                Box::new(commuting_linear_cell(&mut r, 0.0)) as _,
            ),
            3 => (
                "near-commuting".to_string(),
                Box::new(commuting_linear_cell(&mut r, 1e-4)) as _,
            ),
            _ => {
                let (name, cell) = fixed(i / 5);
                (name.to_string(), cell)
            }
        })
        .collect()
}

#[test]
fn c03_pair_swap_zero_iff_subset_zero() {
    let t = Instant::now();
    let alphabet = [0, 1];
    let mut tallies = [[0usize; 2]; 2];
    let mut counterexamples = Vec::new();
    for (name, cell) in cell_family() {
        let bank = StateBank::exhaustive(cell.as_ref(), &alphabet, 3).unwrap();
        let pair = audit_pair_swap_exhaustive(cell.as_ref(), &bank, &alphabet).unwrap();
        let subset = audit_subset_exhaustive(cell.as_ref(), &alphabet, 5).unwrap();
        tallies[usize::from(pair.is_zero())][usize::from(subset.is_zero())] += 1;
        if pair.is_zero() != subset.is_zero() {
            counterexamples.push(format!(
                "{name}: pair max {:e}, subset max {:e}",
                pair.max, subset.max
            ));
        }
    }
    for c in &counterexamples {
        note(c);
    }
    let secs = t.elapsed().as_secs_f64();
    let invariant = tallies[1][1];
    let pass = counterexamples.is_empty() && invariant > 0 && secs < 120.0;
    verdict(
        3,
        "pair-swap invariance equals subset invariance",
        pass,
        &format!(
            "50 cells: {invariant} invariant, {} order-sensitive, {} counterexamples, {secs:.1}s",
            tallies[0][0],
            counterexamples.len()
        ),
    );
    assert!(pass);
}

fn small_rnn(seed: u64) -> Rnn {
    Rnn::init(
        InputEncoding::Scalar { divisor: 4.0 },
        3,
        Activation::Tanh,
        Link::Identity,
        &mut rng::stream(seed, "acceptance.gradcheck"),
    )
}

fn small_gru(seed: u64) -> Gru {
    Gru::init(
        InputEncoding::Scalar { divisor: 4.0 },
        3,
        Link::Identity,
        &mut rng::stream(seed, "acceptance.gradcheck"),
    )
}

/// Worst relative gradient error of both penalties on `model`.
fn penalty_grad_errors<M: Recurrent + perminv::models::Parameterized>(
    model: &M,
    seed: u64,
) -> (f64, f64) {
    let ds = gen_arithmetic(TaskKind::Sum, 8, 4, 4, seed).unwrap();
    let cfg = SamplerConfig {
        states_per_batch: 4,
        seed,
        ..SamplerConfig::default()
    };
    let bank = collect_states(model, &ds, &cfg).unwrap();
    let elements = [0, 1, 2, 3, 4];
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut sire_err: f64 = 0.0;
    for gradient in [BankGradient::Rematerialize, BankGradient::Detached] {
        let opts = SireOptions {
            pairs_per_state: 2,
            gradient,
            seed,
        };
        let e = grad_check(
            |tape, p| sire_penalty(model, tape, p, &bank, &elements, &opts),
            &params,
            1e-6,
        )
        .unwrap();
        sire_err = sire_err.max(e);
    }
    let sub_err = grad_check(
        |tape, p| sub_penalty(model, tape, p, &ds, &cfg),
        &params,
        1e-6,
    )
    .unwrap();
    (sire_err, sub_err)
}

#[test]
fn c04_regularizer_soundness() {
    let parity = parity_rnn();
    let additive = AffineCell::additive();
    let parity_ds = gen_parity(50, 2, 10, 11).unwrap();
    let sum_ds = gen_arithmetic(TaskKind::Sum, 50, 10, 19, 11).unwrap();
    let cfg = SamplerConfig {
        states_per_batch: 64,
        seed: 5,
        ..SamplerConfig::default()
    };
    let opts = SireOptions {
        pairs_per_state: 4,
        gradient: BankGradient::Rematerialize,
        seed: 5,
    };
    let mut worst_value: f64 = 0.0;
    let cases: [(&dyn Recurrent, &perminv::tasks::SequenceDataset, Vec<i64>); 2] = [
        (&parity, &parity_ds, vec![0, 1]),
        (&additive, &sum_ds, (0..20).collect()),
    ];
    for (model, ds, elements) in cases {
        let bank = collect_states(model, ds, &cfg).unwrap();
        let tape = perminv::autodiff::Tape::new();
        let p = perminv::models::bind(&tape, model);
        let sire = sire_penalty(model, &tape, &p, &bank, &elements, &opts)
            .unwrap()
            .item();
        let sub = sub_penalty(model, &tape, &p, ds, &cfg).unwrap().item();
        let exhaustive = sire_exhaustive(model, &bank, &elements).unwrap();
        worst_value = worst_value.max(sire).max(sub).max(exhaustive);
    }

    let mut worst_grad: f64 = 0.0;
    for seed in 1..=3 {
        let (a, b) = penalty_grad_errors(&small_rnn(seed), seed);
        let (c, d) = penalty_grad_errors(&small_gru(seed), seed);
        worst_grad = worst_grad.max(a).max(b).max(c).max(d);
    }
    let pass = worst_value <= 1e-12 && worst_grad <= 1e-4;
    verdict(
        4,
        "regularizer soundness",
        pass,
        &format!(
            "largest penalty on invariant models {worst_value:e} <= 1e-12, worst gradient error {worst_grad:.2e} <= 1e-4"
        ),
    );
    assert!(pass);
}

#[test]
fn c05_sire_vs_sub_on_sum() {
    let t = Instant::now();
    let seeds = [1, 2, 3, 4, 5];
    let mut means = Vec::new();
    for name in ["sum-sire", "sum-sub", "sum-none"] {
        let rows = run_sweep(&presets::by_name(name).unwrap(), &seeds, 1).unwrap();
        for r in &rows {
            note(&format!(
                "{name} seed {} lambda {} holdout {:.3} test {:.3}{}",
                r.seed,
                r.lambda,
                r.holdout_metric,
                r.test_metric,
                if r.selected { " selected" } else { "" }
            ));
        }
        means.push(mean_selected_test(&rows));
    }
    let (sire, sub, none) = (means[0], means[1], means[2]);
    let secs = t.elapsed().as_secs_f64();
    let pass = sire >= sub && sub >= none && secs < 30.0 * 60.0;
    verdict(
        5,
        "SIRE vs SUB on sum",
        pass,
        &format!(
            "mean test accuracy SIRE {sire:.4} >= SUB {sub:.4} >= none {none:.4}; reference SIRE 0.792, SUB 0.759; {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn c06_half_range_regularization() {
    let t = Instant::now();
    let rows = run_sweep(&presets::half_range(), &[1, 2, 3], 1).unwrap();
    let mean_at = |lambda: f64| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.lambda == lambda)
            .map(|r| r.test_metric)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for r in &rows {
        note(&format!(
            "seed {} lambda {} test {:.4}",
            r.seed, r.lambda, r.test_metric
        ));
    }
    let (plain, reg) = (mean_at(0.0), mean_at(0.01));
    let secs = t.elapsed().as_secs_f64();
    let pass = reg - plain >= 0.005 && secs < 30.0 * 60.0;
    verdict(
        6,
        "half-range semi-invariance",
        pass,
        &format!(
            "mean accuracy lambda 0.01 {reg:.4} vs lambda 0 {plain:.4}, gap {:.4} >= 0.005; reference 0.9584 vs 0.9346; {secs:.0}s",
            reg - plain
        ),
    );
    assert!(pass);
}

/// Trains a DeepSets parity model on every bit string of length `n` and
/// returns the segment count of its reduced `ρ` on `[0, n]` and whether it
/// fits all training strings.
fn trained_parity_rho_segments(n: usize, seed: u64) -> Option<(usize, bool)> {
    let seqs: Vec<Vec<i64>> = (0..1usize << n)
        .map(|m| (0..n).map(|i| ((m >> i) & 1) as i64).collect())
        .collect();
    let ds = perminv::tasks::SequenceDataset::labelled(TaskKind::Parity, 1, seed, seqs).ok()?;
    let mut model = Model::DeepSets(DeepSets::init(
        InputEncoding::raw(),
        20,
        Link::Logistic,
        &mut rng::stream(seed, "acceptance.rho"),
    ));
    let cfg = TrainingConfig {
        loss: LossKind::CrossEntropy,
        learning_rate: 1e-2,
        epochs: 1500,
        batch_size: 1 << n,
        seed,
        ..TrainingConfig::default()
    };
    train(&mut model, &ds, None, &cfg).ok()?;
    let Model::DeepSets(ds_model) = &model else {
        unreachable!()
    };
    let fits = ds
        .iter()
        .all(|(xs, y)| (raw_output(ds_model, xs).unwrap() >= 0.0) == (y == 1.0));
    let red = reduce_binary_deepsets(&ds_model.params.phi, &ds_model.params.rho, n).ok()?;
    let pw = trace_piecewise_linear(&red.scalar_net().ok()?, 0.0, n as f64).ok()?;
    Some((pw.segments(), fits))
}

#[test]
fn c07_segment_bound() {
    let mut r = rng::stream(7, "acceptance.segments");
    let mut bound_ok = true;
    let mut worst_dev: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    for i in 0..200 {
        let depth = 1 + i % 3;
        let width = 2 + (i / 3) % 3;
        let mut widths = vec![1];
        widths.extend(std::iter::repeat(width).take(depth - 1));
        widths.push(1);
        let net = Mlp::init(&widths, Activation::Relu, Activation::Identity, &mut r);
        let (lo, hi) = (-4.0, 4.0);
        let pw = trace_piecewise_linear(&net, lo, hi).unwrap();
        let bound = width.pow(depth as u32);
        bound_ok &= pw.segments() <= bound;
        max_ratio = max_ratio.max(pw.segments() as f64 / bound as f64);
        for k in 0..10_000 {
            let x = lo + (hi - lo) * k as f64 / 9_999.0;
            let direct = net.eval(&[x]).unwrap()[0];
            worst_dev = worst_dev.max((pw.eval(x) - direct).abs());
        }
    }
    let units_ok = (5..=12).all(|k| min_deepsets_units(1u64 << k).unwrap() == 4 * k);

    let n = 4;
    let trained: Vec<(usize, bool)> = (1..=3)
        .filter_map(|s| trained_parity_rho_segments(n, s))
        .collect();
    let fitted: Vec<usize> = trained.iter().filter(|t| t.1).map(|t| t.0).collect();
    let trained_ok = fitted.iter().all(|&s| s >= n);
    note(&format!(
        "trained rho on n = {n}: (segments, fits) per seed {trained:?}"
    ));

    let pass = bound_ok && worst_dev <= 1e-9 && units_ok && trained_ok;
    verdict(
        7,
        "linear segment bound",
        pass,
        &format!(
            "200 nets within r^L (largest fill {max_ratio:.2}), grid deviation {worst_dev:.1e} <= 1e-9, 4K units for K 5..12 {}, {} fitted rho(s) with >= {n} segments",
            if units_ok { "ok" } else { "wrong" },
            fitted.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c08_binary_reduction_is_exact() {
    let mut r = rng::stream(8, "acceptance.reduction");
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..50 {
        let width = r.gen_range(2..=8);
        let model = DeepSets::init(InputEncoding::raw(), width, Link::Identity, &mut r);
        for len in 1..=8usize {
            let red = reduce_binary_deepsets(&model.params.phi, &model.params.rho, len).unwrap();
            for mask in 0..1usize << len {
                let bits: Vec<i64> = (0..len).map(|i| ((mask >> i) & 1) as i64).collect();
                let ones = mask.count_ones() as usize;
                let direct = raw_output(&model, &bits).unwrap();
                if red.eval(ones).unwrap().to_bits() != direct.to_bits() {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    let pass = mismatches == 0;
    verdict(
        8,
        "binary DeepSets reduction",
        pass,
        &format!("{checked} inputs over 50 draws, {mismatches} not bit-identical"),
    );
    assert!(pass);
}

#[test]
fn c09_local_perturbation_bound() {
    let values: Vec<usize> = (0..784).collect();
    let mut worst = 0usize;
    let mut all_perms = true;
    for trial in 0..1000u64 {
        let (out, perm) = local_perturb(&values, &[4, 7], trial).unwrap();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        all_perms &= sorted == values && out == perm;
        worst = worst.max(max_displacement(&perm));
    }
    let pass = all_perms && worst <= 11;
    verdict(
        9,
        "local perturbation",
        pass,
        &format!("1000 trials, all permutations {all_perms}, max displacement {worst} <= 11"),
    );
    assert!(pass);
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_perminv"))
        .args(args)
        .env("PERMINV_OUT_DIR", dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn run_cli_in(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_perminv"))
        .current_dir(dir)
        .args(args)
        .env("PERMINV_OUT_DIR", ".")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c10_cli_determinism() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut all_ok = true;
    for dir in &runs {
        let d = dir.path();
        all_ok &= run_cli(
            d,
            &[
                "gen", "sum", "--count", "60", "--len", "5", "--max", "9", "--seed", "3",
            ],
        );
        all_ok &= run_cli(
            d,
            &[
                "gen", "parity", "--count", "40", "--len", "2..6", "--seed", "4",
            ],
        );
        // Inputs are addressed relative to the run directory so the echoed
        // invocation is the same in both runs.
        all_ok &= run_cli_in(
            d,
            &[
                "train",
                "--data",
                "sum.data",
                "--task",
                "sum",
                "--len",
                "5",
                "--max",
                "9",
                "--width",
                "4",
                "--epochs",
                "4",
                "--reg",
                "sire",
                "--lambda",
                "0.1",
                "--holdout",
                "0.2",
                "--seed",
                "9",
            ],
        );
        all_ok &= run_cli_in(
            d,
            &[
                "audit",
                "--model",
                "run.model",
                "--data",
                "sum.data",
                "--seed",
                "2",
            ],
        );
        all_ok &= run_cli(d, &["construct-parity", "--max-len", "10"]);
        all_ok &= run_cli(
            d,
            &[
                "sweep",
                "--preset",
                "sum-sub",
                "--count",
                "30",
                "--epochs",
                "3",
                "--seeds",
                "1..2",
                "--test-count",
                "20",
                "--jobs",
                "2",
                "--out",
                "lambda.csv",
            ],
        );
        all_ok &= run_cli(
            d,
            &[
                "sweep",
                "--task",
                "parity",
                "--count",
                "30",
                "--epochs",
                "2",
                "--lengths",
                "4,8",
                "--test-count",
                "20",
                "--seeds",
                "5",
                "--out",
                "length.csv",
            ],
        );
    }
    let a = dir_bytes(runs[0].path());
    let b = dir_bytes(runs[1].path());
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    let identical = a == b;
    let pass = all_ok && identical && a.len() >= 16;
    verdict(
        10,
        "CLI determinism",
        pass,
        &format!(
            "gen, train, audit, construct-parity, sweep run twice: {} files, identical {identical}, all exits 0 {all_ok}",
            a.len()
        ),
    );
    if !pass {
        note(&format!("files: {names:?}"));
    }
    assert!(pass);
}
