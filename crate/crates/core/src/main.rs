use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayView2;

use otke::checks::{run_suite, Suite};
use otke::config::RunConfig;
use otke::data::{generate_synthetic, load_jsonl, load_sequences, write_jsonl, Dataset};
use otke::embed::ReferenceBank;
use otke::exact::{gram, GramKind, GramParams};
use otke::reflearn::{fit_refs_kmeans, RefFitConfig};
use otke::train::{
    evaluate, read_checkpoint, train_supervised, train_unsupervised, write_checkpoint, EpochMetrics, Evaluation, Model,
};
use otke::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_SHAPE: u8 = 5;
const EXIT_SIZE: u8 = 6;

#[derive(Parser)]
#[command(name = "otke", version, about = "Optimal-transport kernel embedding for sets and sequences")]
struct Cli {
    /// Worker threads (falls back to OTKE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motif dataset (train/val/test JSONL).
    Synth(SynthArgs),
    /// Fit a model and write a checkpoint.
    Fit(FitArgs),
    /// Write one embedding per input sample as CSV.
    Embed(EmbedArgs),
    /// Report accuracy (or auROC/auPRC for multilabel data).
    Evaluate(EvalArgs),
    /// Compute a Gram matrix between sets.
    Gram(GramArgs),
    /// Run self-check suites.
    Check(CheckArgs),
}

/// Hyperparameters shared by every command; each maps onto a config key.
#[derive(Args, Default)]
struct Hyper {
    /// INI-style config file (`key = value`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    p: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    q: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    /// Gaussian kernel bandwidth.
    #[arg(long)]
    sigma: Option<f64>,
    /// `gaussian` or `linear`.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    sigma_pos: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    sinkhorn_iters: Option<u64>,
    /// `joint` or `alternating`.
    #[arg(long)]
    schedule: Option<String>,
    /// `ot` or `dot`.
    #[arg(long)]
    pooling: Option<String>,
}

impl Hyper {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                require_file(path)?;
                RunConfig::load(path).map_err(|e| match e {
                    Error::Io(_) => Failure::from(e),
                    other => Failure::usage(other.to_string()),
                })?
            }
            None => RunConfig::default(),
        };
        let pairs: [(&str, Option<String>); 15] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("p", self.p.map(|v| v.to_string())),
            ("q", self.q.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("sigma", self.sigma.map(|v| v.to_string())),
            ("kernel", self.kernel.clone()),
            ("sigma_pos", self.sigma_pos.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("sinkhorn_iters", self.sinkhorn_iters.map(|v| v.to_string())),
            ("schedule", self.schedule.clone()),
            ("pooling", self.pooling.clone()),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(|e| Failure::usage(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Failure::usage(format!("--set: {e}")))?;
        }
        Ok(cfg)
    }
}

/// Input data: JSONL feature sets, or FASTA-like sequences with `--alphabet`.
#[derive(Args)]
struct DataOpts {
    /// Alphabet file; switches input parsing to sequences → one-hot k-mers.
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// k-mer length for sequence input.
    #[arg(long, default_value_t = 10)]
    kmer: usize,
}

impl DataOpts {
    fn load(&self, path: &Path) -> Result<Dataset, Failure> {
        require_file(path)?;
        Ok(match &self.alphabet {
            Some(a) => {
                require_file(a)?;
                load_sequences(path, a, self.kmer)?
            }
            None => load_jsonl(path)?,
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dim: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMode {
    Unsup,
    Sup,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    mode: FitMode,
    /// Training data.
    #[arg(long)]
    train: PathBuf,
    /// Validation data (defaults to the training data).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test data, evaluated once at the end.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint to start supervised training from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// File for `key=value` metrics.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: DataOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated k values for top-k accuracy.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    topk: Vec<usize>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    opts: DataOpts,
}

#[derive(Args)]
struct GramArgs {
    #[arg(long)]
    data: PathBuf,
    /// `k_ot`, `k_z`, `mean_pool` or `flatten`.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    /// Use this model's ψ-features and references (linear kernel on ψ).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    opts: DataOpts,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct CheckArgs {
    /// Suites to run (repeatable; default all).
    #[arg(long)]
    suite: Vec<String>,
    /// Trials per suite (coordinates per block for gradcheck).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::EmptySample { .. } => EXIT_IO,
            Error::UnknownToken { .. } | Error::SequenceTooShort { .. } => EXIT_IO,
            Error::NonFinite(_) => EXIT_DIVERGED,
            Error::DimensionMismatch(_) | Error::InconsistentDimension { .. } => EXIT_SHAPE,
            Error::TooLarge { .. } => EXIT_SIZE,
            Error::InvalidParameter(_) | Error::InsufficientData(_) | Error::EmptySet | Error::EmptyDataset => {
                EXIT_USAGE
            }
        };
        Self { code, message: e.to_string() }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::io(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::io(format!("{}: no such file", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure::io(format!("{}: directory does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("OTKE_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::usage(format!("OTKE_THREADS: invalid value {v:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut cfg = args.hyper.resolve()?;
    let extra = [
        ("classes", args.classes.map(|v| v.to_string())),
        ("dim", args.dim.map(|v| v.to_string())),
        ("train_size", args.train_size.map(|v| v.to_string())),
        ("val_size", args.val_size.map(|v| v.to_string())),
        ("test_size", args.test_size.map(|v| v.to_string())),
    ];
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| Failure::usage(e.to_string()))?;
        }
    }
    let (spec, [tr, va, te]) = cfg.synth().map_err(|e| Failure::usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let data = generate_synthetic(&spec, tr, va, te)?;
    for (name, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = args.out.join(format!("{name}.jsonl"));
        write_jsonl(ds, &path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    println!("synth m={} C={} seed={}", tr + va + te, spec.classes, spec.seed);
    Ok(())
}

fn fmt_epoch(e: &EpochMetrics) -> String {
    format!("epoch={} train_loss={:.6} val_acc={:.6} lr={}", e.epoch, e.train_loss, e.val_acc, e.lr)
}

fn fmt_eval(ev: &Evaluation) -> Vec<String> {
    let mut out: Vec<String> = ev.topk.iter().map(|(k, a)| format!("top{k}={a:.6}")).collect();
    if let Some(v) = ev.auroc {
        out.push(format!("auroc={v:.6}"));
    }
    if let Some(v) = ev.auprc {
        out.push(format!("auprc={v:.6}"));
    }
    out
}

fn check_model_fits(model: &Model, ds: &Dataset) -> Result<(), Failure> {
    if ds.dim() != model.input_dim() {
        return Err(Failure {
            code: EXIT_SHAPE,
            message: format!("checkpoint expects {}-d features but data has {}", model.input_dim(), ds.dim()),
        });
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<(), Failure> {
    let cfg = args.hyper.resolve()?;
    let tc = cfg.train_config().map_err(|e| Failure::usage(e.to_string()))?;
    for path in [Some(&args.train), args.val.as_ref(), args.test.as_ref(), args.init.as_ref()].into_iter().flatten() {
        require_file(path)?;
    }
    require_parent(&args.out)?;
    if let Some(m) = &args.metrics {
        require_parent(m)?;
    }
    let train = args.data.load(&args.train)?;
    let val = args.val.as_ref().map(|p| args.data.load(p)).transpose()?;
    let test = args.test.as_ref().map(|p| args.data.load(p)).transpose()?;
    let mut lines = vec![format!(
        "mode={}",
        match args.mode {
            FitMode::Unsup => "unsup",
            FitMode::Sup => "sup",
        }
    )];
    let report = |lines: &mut Vec<String>, e: &EpochMetrics| {
        let line = fmt_epoch(e);
        println!("{line}");
        lines.push(line);
    };
    let (model, best_val) = match (args.mode, &args.init) {
        (FitMode::Unsup, _) => {
            let (model, metrics) = train_unsupervised(&train, val.as_ref(), &tc)?;
            for e in &metrics.epochs {
                report(&mut lines, e);
            }
            (model, metrics.best_val_acc)
        }
        (FitMode::Sup, init) => {
            let init_model = match init {
                Some(path) => {
                    let m = read_checkpoint(path)?;
                    check_model_fits(&m, &train)?;
                    m
                }
                None => train_unsupervised(&train, val.as_ref(), &tc)?.0,
            };
            let mut last_finite = 0;
            let mut epoch_lines = Vec::new();
            let result = train_supervised(&train, val.as_ref(), &tc, &init_model, |e| {
                last_finite = e.epoch;
                let line = fmt_epoch(e);
                println!("{line}");
                epoch_lines.push(line);
            });
            lines.extend(epoch_lines);
            match result {
                Ok((model, metrics)) => {
                    lines.push(format!("best_epoch={}", metrics.best_epoch));
                    (model, metrics.best_val_acc)
                }
                Err(e @ Error::NonFinite(_)) => {
                    return Err(Failure {
                        code: EXIT_DIVERGED,
                        message: format!("training diverged ({e}); last finite epoch={last_finite}"),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    write_checkpoint(&model, &args.out).map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    let mut summary = format!("final val_acc={best_val:.6}");
    lines.push(format!("val_acc={best_val:.6}"));
    if let Some(test) = &test {
        check_model_fits(&model, test)?;
        for item in fmt_eval(&evaluate(&model, test, &[1])?) {
            let _ = write!(summary, " test_{item}");
            lines.push(format!("test_{item}"));
        }
    }
    println!("{summary}");
    if let Some(path) = &args.metrics {
        write_text(path, &(lines.join("\n") + "\n"))?;
    }
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<(), Failure> {
    require_file(&args.model)?;
    require_file(&args.data)?;
    require_parent(&args.out)?;
    let model = read_checkpoint(&args.model)?;
    let ds = args.opts.load(&args.data)?;
    check_model_fits(&model, &ds)?;
    let emb = model.embed_dataset(&ds)?;
    let file = File::create(&args.out).map_err(io_err(&args.out))?;
    let mut w = BufWriter::new(file);
    for row in emb.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err(&args.out))?;
    }
    w.flush().map_err(io_err(&args.out))?;
    println!("embed m={} dim={}", emb.nrows(), emb.ncols());
    Ok(())
}

fn cmd_evaluate(args: &EvalArgs) -> Result<(), Failure> {
    require_file(&args.model)?;
    require_file(&args.data)?;
    if let Some(m) = &args.metrics {
        require_parent(m)?;
    }
    if args.topk.contains(&0) {
        return Err(Failure::usage("--topk values must be at least 1"));
    }
    let model = read_checkpoint(&args.model)?;
    let ds = args.opts.load(&args.data)?;
    check_model_fits(&model, &ds)?;
    let items = fmt_eval(&evaluate(&model, &ds, &args.topk)?);
    println!("{}", items.join(" "));
    if let Some(path) = &args.metrics {
        write_text(path, &(items.join("\n") + "\n"))?;
    }
    Ok(())
}

fn cmd_gram(args: &GramArgs) -> Result<(), Failure> {
    let kind: GramKind = args.kind.parse().map_err(|e: Error| Failure::usage(format!("--kind: {e}")))?;
    let cfg = args.hyper.resolve()?;
    let tc = cfg.train_config().map_err(|e| Failure::usage(e.to_string()))?;
    require_file(&args.data)?;
    if let Some(m) = &args.model {
        require_file(m)?;
    }
    require_parent(&args.out)?;
    let ds = args.opts.load(&args.data)?;
    if ds.len() > otke::exact::GRAM_LIMIT {
        return Err(Error::TooLarge { n: ds.len(), limit: otke::exact::GRAM_LIMIT }.into());
    }
    let (sets, spec, bank): (Vec<_>, _, Option<ReferenceBank>) = match &args.model {
        Some(path) => {
            let model = read_checkpoint(path)?;
            check_model_fits(&model, &ds)?;
            let psi =
                ds.samples.iter().map(|s| model.nystrom.embed(s.features.view())).collect::<Result<Vec<_>, _>>()?;
            (psi, otke::kernel::KernelSpec::Linear, Some(model.bank))
        }
        None => {
            let sets: Vec<_> = ds.samples.iter().map(|s| s.features.clone()).collect();
            let bank = if kind == GramKind::KZ {
                let views: Vec<ArrayView2<'_, f64>> = sets.iter().map(|s| s.view()).collect();
                let rc = RefFitConfig::new(tc.p, tc.q, tc.epsilon, tc.unsup_sinkhorn_iters, tc.seed);
                Some(fit_refs_kmeans(&views, &rc)?)
            } else {
                None
            };
            (sets, tc.kernel, bank)
        }
    };
    let views: Vec<ArrayView2<'_, f64>> = sets.iter().map(|s| s.view()).collect();
    let params = GramParams { spec, epsilon: tc.epsilon, iters: tc.unsup_sinkhorn_iters, bank };
    let g = gram(&views, kind, &params)?;
    let file = File::create(&args.out).map_err(io_err(&args.out))?;
    g.write_csv(tc.epsilon, BufWriter::new(file)).map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    println!(
        "gram kind={} m={} solves={} cross_solves={} min_eigenvalue={:.6e}",
        kind.name(),
        views.len(),
        g.total_solves,
        g.cross_solves,
        g.min_eigenvalue()
    );
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<bool, Failure> {
    let suites: Vec<Suite> = if args.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.suite
            .iter()
            .map(|s| s.parse().map_err(|e: Error| Failure::usage(format!("--suite: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let mut all = true;
    for suite in suites {
        let report = run_suite(suite, args.trials.unwrap_or_else(|| suite.default_trials()), args.seed)?;
        println!("{report}");
        all &= report.passed;
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads(cli.threads).and_then(|()| match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|()| true),
        Command::Fit(a) => cmd_fit(a).map(|()| true),
        Command::Embed(a) => cmd_embed(a).map(|()| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|()| true),
        Command::Gram(a) => cmd_gram(a).map(|()| true),
        Command::Check(a) => cmd_check(a),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
