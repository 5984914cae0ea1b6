use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use perminv::auditor::{
    audit_pair_swap, audit_perm_invariance, audit_subset_invariance, AuditReport,
};
use perminv::exact::{check_parity_exhaustive, parity_rnn, weight_count};
use perminv::experiments::{
    presets, run_sweep, sweep_csv, train_one, Architecture, ExperimentSpec,
};
use perminv::models::{Activation, Model};
use perminv::regularizers::{collect_states, SamplerConfig, SubsetLengths};
use perminv::tasks::{SequenceDataset, TaskKind};
use perminv::training::{split_holdout, train, LossKind, Regularizer};
use perminv::{rng, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Permutation-invariance experiments with recurrent and set models.
#[derive(Parser, Debug)]
#[command(name = "perminv", version)]
struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, env = "PERMINV_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled dataset file.
    Gen(GenArgs),
    /// Train one model and write it with its per-epoch report.
    Train(TrainArgs),
    /// Measure invariance violations of a saved model on a dataset.
    Audit(AuditArgs),
    /// Build the exact 12-weight parity RNN and self-test it.
    ConstructParity(ParityArgs),
    /// Run a length or lambda grid over several seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// parity, sum, range, variance or half-range.
    task: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// A length `n` or an inclusive range `lo..hi` (parity only).
    #[arg(long, default_value = "2..10")]
    len: String,
    /// Largest element value for arithmetic tasks.
    #[arg(long, default_value_t = 99)]
    max: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File name inside the output directory.
    #[arg(long)]
    out: Option<String>,
}

/// Overrides applied on top of the config file or preset.
#[derive(Args, Debug, Default)]
struct SpecFlags {
    /// TOML experiment spec.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named protocol used as the base spec instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    len: Option<String>,
    #[arg(long)]
    max: Option<i64>,
    /// rnn, gru or deepsets.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// none, sire or sub.
    #[arg(long)]
    reg: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// l1, cross-entropy or mse.
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on this dataset file instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fraction of the data held out for the per-epoch holdout metric.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Base name of the model and report files.
    #[arg(long, default_value = "run")]
    name: String,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// perm, subset, pair-swap or all.
    #[arg(long, default_value = "all")]
    probe: String,
    /// Draws per sequence (perm, subset) or per banked state (pair-swap).
    #[arg(long, default_value_t = 4)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "audit.csv")]
    out: String,
}

#[derive(Args, Debug)]
struct ParityArgs {
    /// Longest bit sequence in the exhaustive self-test.
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value = "parity-rnn.model")]
    out: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    spec: SpecFlags,
    /// Seeds as `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Comma list of test lengths.
    #[arg(long)]
    lengths: Option<String>,
    /// Comma list of regularization coefficients.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "sweep.csv")]
    out: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

fn run(cli: &Cli) -> perminv::Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cli.out_dir, a),
        Command::Train(a) => cmd_train(&cli.out_dir, a),
        Command::Audit(a) => cmd_audit(&cli.out_dir, a),
        Command::ConstructParity(a) => cmd_construct_parity(&cli.out_dir, a),
        Command::Sweep(a) => cmd_sweep(&cli.out_dir, a),
    }
}

/// Echo of the invocation with the program path replaced by its name.
fn invocation() -> String {
    std::iter::once("perminv".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `contents` to `dir/name` and its one-line `.manifest` sidecar.
fn write_output(dir: &Path, name: &str, contents: &str, seed: u64) -> perminv::Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let manifest = dir.join(format!("{name}.manifest"));
    let line = format!("{} seed={seed} file={name}\n", invocation());
    std::fs::write(&manifest, line).map_err(|e| Error::Io {
        path: manifest,
        source: e,
    })?;
    Ok(path)
}

/// Checks that `dir` can be created and written before a long run starts.
fn check_writable(dir: &Path) -> perminv::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let probe = dir.join(".perminv-write-check");
    std::fs::write(&probe, b"").map_err(|e| Error::Io {
        path: probe.clone(),
        source: e,
    })?;
    let _ = std::fs::remove_file(&probe);
    Ok(())
}

fn parse_len(s: &str) -> perminv::Result<(usize, usize)> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad length `{t}`")))
    };
    match s.split_once("..") {
        Some((lo, hi)) => Ok((num(lo)?, num(hi.trim_start_matches('='))?)),
        None => {
            let n = num(s)?;
            Ok((n, n))
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> perminv::Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} `{t}`")))
        })
        .collect()
}

fn parse_seeds(s: &str) -> perminv::Result<Vec<u64>> {
    match s.split_once("..") {
        Some((lo, hi)) => {
            let p = |t: &str| {
                t.trim()
                    .trim_start_matches('=')
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed range `{s}`")))
            };
            let (lo, hi) = (p(lo)?, p(hi)?);
            if lo > hi {
                return Err(Error::Config(format!("empty seed range `{s}`")));
            }
            Ok((lo..=hi).collect())
        }
        None => parse_list(s, "seed"),
    }
}

fn parse_reg(s: &str) -> perminv::Result<Regularizer> {
    match s {
        "none" => Ok(Regularizer::None),
        "sire" => Ok(Regularizer::Sire),
        "sub" => Ok(Regularizer::Sub),
        other => Err(Error::Config(format!("unknown regularizer `{other}`"))),
    }
}

fn parse_loss(s: &str) -> perminv::Result<LossKind> {
    match s {
        "l1" => Ok(LossKind::L1),
        "cross-entropy" => Ok(LossKind::CrossEntropy),
        "mse" => Ok(LossKind::Mse),
        other => Err(Error::Config(format!("unknown loss `{other}`"))),
    }
}

/// Defaults, then the config file or preset, then individual flags.
fn resolve_spec(f: &SpecFlags) -> perminv::Result<ExperimentSpec> {
    let mut spec = match (&f.config, &f.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            ExperimentSpec::from_toml(&text)?
        }
        (None, Some(name)) => presets::by_name(name)?,
        (None, None) => ExperimentSpec::default(),
    };
    if let Some(t) = &f.task {
        spec.task.task = TaskKind::parse(t).map_err(as_usage)?;
        if spec.task.task != TaskKind::Parity && f.len.is_none() {
            let n = spec.task.max_len;
            spec.task.min_len = n;
        }
    }
    if let Some(c) = f.count {
        spec.task.count = c;
    }
    if let Some(l) = &f.len {
        (spec.task.min_len, spec.task.max_len) = parse_len(l)?;
    }
    if let Some(m) = f.max {
        spec.task.alphabet_max = m;
    }
    if let Some(a) = &f.arch {
        spec.model.arch = Architecture::parse(a)?;
    }
    if let Some(w) = f.width {
        spec.model.width = w;
    }
    if let Some(a) = &f.activation {
        spec.model.activation = Activation::parse(a).map_err(as_usage)?;
    }
    if let Some(e) = f.epochs {
        spec.training.epochs = e;
    }
    if let Some(lr) = f.lr {
        spec.training.learning_rate = lr;
    }
    if let Some(b) = f.batch {
        spec.training.batch_size = b;
    }
    if let Some(r) = &f.reg {
        spec.training.regularizer = parse_reg(r)?;
    }
    if let Some(l) = f.lambda {
        spec.training.lambda = l;
    }
    if let Some(l) = &f.loss {
        spec.training.loss = parse_loss(l)?;
    }
    if f.task.is_some() && f.loss.is_none() {
        spec.training.loss = if spec.task.task.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::L1
        };
    }
    spec.training.metric = perminv::training::Metric::for_task(spec.task.task);
    spec.validate()?;
    Ok(spec)
}

fn as_usage(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn cmd_gen(out_dir: &Path, a: &GenArgs) -> perminv::Result<()> {
    let task = TaskKind::parse(&a.task).map_err(as_usage)?;
    let (lo, hi) = parse_len(&a.len)?;
    let spec = perminv::experiments::TaskSpec {
        task,
        count: a.count,
        min_len: lo,
        max_len: hi,
        alphabet_max: a.max,
    };
    let ds = spec.generate(a.seed)?;
    let name = a
        .out
        .clone()
        .unwrap_or_else(|| format!("{}.data", task.name()));
    let path = write_output(out_dir, &name, &ds.to_text(), a.seed)?;
    println!("wrote {} rows to {}", ds.len(), path.display());
    Ok(())
}

fn cmd_train(out_dir: &Path, a: &TrainArgs) -> perminv::Result<()> {
    let mut spec = resolve_spec(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out_dir = spec
        .out_dir
        .clone()
        .unwrap_or_else(|| out_dir.to_path_buf());
    check_writable(&out_dir)?;
    let seed = spec.seed;
    let (model, report) = match &a.data {
        None if a.holdout == 0.0 => {
            let run = train_one(&spec, seed)?;
            (run.model, run.report)
        }
        _ => {
            let data = match &a.data {
                Some(p) => SequenceDataset::load(p)?,
                None => spec.train_set(seed)?,
            };
            if data.task != spec.task.task {
                spec.task.task = data.task;
                spec.training.metric = perminv::training::Metric::for_task(data.task);
            }
            let cfg = spec.training_config(seed);
            let mut model = spec.build_model(seed)?;
            let report = if a.holdout > 0.0 {
                let (tr, ho) =
                    split_holdout(&data, a.holdout, rng::derive_seed(seed, "cli.holdout"))?;
                train(&mut model, &tr, Some(&ho), &cfg)?
            } else {
                train(&mut model, &data, None, &cfg)?
            };
            (model, report)
        }
    };
    let model_path = write_output(
        &out_dir,
        &format!("{}.model", a.name),
        &model.to_text(),
        seed,
    )?;
    let csv_path = write_output(&out_dir, &format!("{}.csv", a.name), &report.to_csv(), seed)?;
    write_output(
        &out_dir,
        &format!("{}.toml", a.name),
        &spec.to_toml()?,
        seed,
    )?;
    if let Some(last) = report.last() {
        println!(
            "epoch {} task_loss {:.6} train_metric {:.4}",
            last.epoch, last.task_loss, last.train_metric
        );
    }
    println!("model {}", model_path.display());
    println!("report {}", csv_path.display());
    eprintln!("wall time {:.1}s", report.wall_seconds);
    Ok(())
}

fn cmd_audit(out_dir: &Path, a: &AuditArgs) -> perminv::Result<()> {
    let model = Model::load(&a.model)?;
    let data = SequenceDataset::load(&a.data)?;
    let probes: Vec<&str> = match a.probe.as_str() {
        "all" => vec!["perm", "subset", "pair-swap"],
        p @ ("perm" | "subset" | "pair-swap") => vec![p],
        other => return Err(Error::Config(format!("unknown probe `{other}`"))),
    };
    let mut reports: Vec<AuditReport> = Vec::new();
    for probe in probes {
        let seed = rng::derive_seed(a.seed, &format!("cli.audit.{probe}"));
        match probe {
            "perm" => reports.push(audit_perm_invariance(&model, &data, a.draws, seed)?),
            "subset" => reports.push(audit_subset_invariance(
                &model,
                &data,
                a.draws,
                1,
                SubsetLengths::Uniform,
                seed,
            )?),
            _ => match model.as_recurrent() {
                Some(rec) => {
                    let cfg = SamplerConfig {
                        states_per_batch: data.len().clamp(1, 256),
                        seed,
                        ..SamplerConfig::default()
                    };
                    let bank = collect_states(rec, &data, &cfg)?;
                    let mut inputs = data.elements();
                    inputs.sort_unstable();
                    inputs.dedup();
                    let pairs = a.draws * bank.len();
                    reports.push(audit_pair_swap(rec, &bank, &inputs, pairs, seed)?);
                }
                None if a.probe == "pair-swap" => {
                    return Err(Error::Config(format!(
                        "pair-swap needs a recurrent model, got {}",
                        model.kind()
                    )))
                }
                None => println!("pair-swap: skipped for {} models", model.kind()),
            },
        }
    }
    let mut csv = String::new();
    writeln!(csv, "{}", AuditReport::CSV_HEADER).unwrap();
    for r in &reports {
        writeln!(csv, "{}", r.csv_row()).unwrap();
        println!("{r}");
    }
    let path = write_output(out_dir, &a.out, &csv, a.seed)?;
    println!("report {}", path.display());
    Ok(())
}

fn cmd_construct_parity(out_dir: &Path, a: &ParityArgs) -> perminv::Result<()> {
    let model = parity_rnn();
    println!("parameters {}", weight_count(&model.cell));
    let check = check_parity_exhaustive(&model, a.max_len)?;
    let path = write_output(out_dir, &a.out, &Model::Rnn(model).to_text(), 0)?;
    let reloaded = match Model::load(&path)? {
        Model::Rnn(m) => m,
        other => {
            return Err(Error::Contract(format!(
                "reloaded model is {}, expected rnn",
                other.kind()
            )))
        }
    };
    let again = check_parity_exhaustive(&reloaded, a.max_len)?;
    let ok = check.passed(1e-9) && again == check;
    println!(
        "self-test over {} sequences up to length {}: max deviation {:e}, mismatches {} -> {}",
        check.sequences,
        a.max_len,
        check.max_deviation,
        check.mismatches,
        if ok { "PASS" } else { "FAIL" }
    );
    println!("model {}", path.display());
    if ok {
        Ok(())
    } else {
        Err(Error::Contract("exact parity self-test failed".into()))
    }
}

fn cmd_sweep(out_dir: &Path, a: &SweepArgs) -> perminv::Result<()> {
    let mut spec = resolve_spec(&a.spec)?;
    if let Some(l) = &a.lengths {
        spec.sweep.lengths = parse_list(l, "length")?;
        if a.lambdas.is_none() {
            spec.sweep.lambdas.clear();
        }
    }
    if let Some(l) = &a.lambdas {
        spec.sweep.lambdas = parse_list(l, "lambda")?;
        if a.lengths.is_none() {
            spec.sweep.lengths.clear();
        }
    }
    if let Some(n) = a.test_count {
        spec.sweep.test_count = n;
    }
    let seeds = parse_seeds(&a.seeds)?;
    if spec.sweep.lengths.is_empty() && spec.sweep.lambdas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let out_dir = spec
        .out_dir
        .clone()
        .unwrap_or_else(|| out_dir.to_path_buf());
    check_writable(&out_dir)?;
    let rows = run_sweep(&spec, &seeds, a.jobs)?;
    for r in &rows {
        println!(
            "seed {} {} {} -> test {:.4}{}",
            r.seed,
            r.grid.name(),
            r.point,
            r.test_metric,
            if r.selected { " *" } else { "" }
        );
    }
    let path = write_output(&out_dir, &a.out, &sweep_csv(&rows), seeds[0])?;
    println!("report {}", path.display());
    Ok(())
}
