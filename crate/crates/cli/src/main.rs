//! `minformer` experiment harness.
//!
//! Exit codes: 0 success, 1 unexpected internal error, 2 usage or invalid
//! configuration, 3 I/O or malformed data, 4 numeric failure during
//! training, 5 verification property failed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use minformer::data::Dataset;
use minformer::encoder::{count_params, encoder_core, save_checkpoint, ModelParams};
use minformer::train::{q_ratio, train_observed, EpochRow, Precision, RunReport};
use minformer::verify::{run_all, Fault, VerifyOptions};
use minformer::{Error, Real};

use minformer_cli::settings::{Overrides, Settings};
use minformer_cli::sweep::{render_table, write_table_csv, Metrics, SweepSpec, TableRow};

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "minformer", version, about = "Train, compare, verify and size reduced transformer-encoder classifiers")]
#[command(after_help = "Exit codes: 0 ok, 1 internal, 2 usage/config, 3 I/O/data, 4 numeric failure, 5 verification failure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write report.csv, summary.txt, checkpoint.minf
    Train(TrainArgs),
    /// Train every variant of a sweep file and write a comparison table
    Sweep(SweepArgs),
    /// Run the randomized property suite
    Verify(VerifyArgs),
    /// Print the parameter breakdown and overdetermination ratio
    Count(CountArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key (`model.heads=4` or unambiguous `heads=4`); repeatable, last wins
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for initialization, shuffling and subsetting
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Record deterministic mode in the run configuration
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory holding the dataset files
    #[arg(long, env = "MINFORMER_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep file: shared keys, then one `[name]` section per variant
    #[arg(long)]
    sweep: PathBuf,
    /// Overrides applied to every variant after the sweep file
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per algebraic property
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Random configurations for the counter check
    #[arg(long, default_value_t = 200)]
    count_cases: usize,
    /// Scale one entry of every analytic gradient (self-test of the suite)
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training-set size K for Q (defaults to the dataset's train split)
    #[arg(long)]
    examples: Option<usize>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
struct VerificationFailed(usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} propert{} failed", self.0, if self.0 == 1 { "y" } else { "ies" })
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<VerificationFailed>().is_some() {
            return EXIT_VERIFY;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::UnsupportedVariant(_) | Error::VariantMismatch { .. } => EXIT_USAGE,
                Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) => EXIT_IO,
                Error::NumericFailure { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
                Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_INTERNAL
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Count(a) => cmd_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn overrides(c: &ConfigArgs, deterministic: bool) -> Overrides {
    Overrides {
        sets: c.sets.clone(),
        seed: c.seed,
        deterministic,
        precision: c.precision,
    }
}

fn progress(label: &str, epochs: usize) -> impl FnMut(&EpochRow) + '_ {
    move |r: &EpochRow| {
        let val = match (r.val_loss, r.val_acc) {
            (Some(l), Some(a)) => format!(" val_loss={l:.4} val_acc={a:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "[{label}] epoch {}/{epochs} train_loss={:.4} train_acc={:.4}{val}",
            r.epoch, r.train_loss, r.train_acc
        );
    }
}

fn train_as<T: Real>(
    s: &Settings,
    train: &Dataset,
    val: &Dataset,
    quiet: bool,
) -> minformer::Result<(RunReport, ModelParams<f64>)> {
    let label = s.model.variant_label();
    let mut show = progress(&label, s.train.epochs);
    let (report, params) = train_observed::<T>(&s.model, train, val, &s.train, |r| {
        if !quiet {
            show(r)
        }
    })?;
    Ok((report, params.cast()))
}

/// Trains `s` and writes all artifacts into `out`.
fn run_one(s: &Settings, data: &(Dataset, Dataset), out: &Path, quiet: bool) -> anyhow::Result<RunReport> {
    let (train, val) = data;
    let (report, params) = match s.train.precision {
        Precision::F32 => train_as::<f32>(s, train, val, quiet)?,
        Precision::F64 => train_as::<f64>(s, train, val, quiet)?,
    };
    report.save(out)?;
    save_checkpoint(&out.join("checkpoint.minf"), &s.model, &params)?;
    let cfg_path = out.join("config.cfg");
    std::fs::write(&cfg_path, s.resolved().to_string()).with_context(|| format!("writing {}", cfg_path.display()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

fn load_data(s: &Settings, data_dir: Option<&Path>) -> minformer::Result<(Dataset, Dataset)> {
    let m = &s.model;
    s.data
        .load(data_dir, [m.image_height, m.image_width, m.channels], m.classes)
}

fn default_out(label: &str) -> PathBuf {
    PathBuf::from("runs").join(sanitize(label))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let (s, _) = Settings::load(a.config.config.as_deref(), &overrides(&a.config, a.run.deterministic))?;
    let data = load_data(&s, a.run.data_dir.as_deref())?;
    let out = a.run.out_dir.clone().unwrap_or_else(|| default_out(&s.model.variant_label()));
    let report = run_one(&s, &data, &out, a.run.quiet)?;
    print!("{}", report.summary());
    println!("{:<18}{}", "artifacts", out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.sweep).map_err(|e| Error::io(&a.sweep, e))?;
    let spec = SweepSpec::parse(&text)?;
    let ov = overrides(&a.config, a.run.deterministic);
    let mut runs = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        let mut kv = spec.variant_kv(v);
        ov.apply(&mut kv)?;
        let s = Settings::from_kv(&kv).map_err(|e| Error::Config(format!("variant '{}': {e}", v.name)))?;
        runs.push((v.name.clone(), s));
    }
    let out = a.run.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/sweep"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut cache: HashMap<String, (Dataset, Dataset)> = HashMap::new();
    let mut rows = Vec::with_capacity(runs.len());
    for (i, (name, s)) in runs.iter().enumerate() {
        let m = &s.model;
        let key = format!("{:?} {:?}", s.data, [m.image_height, m.image_width, m.channels, m.classes]);
        let params = count_params(m)?.total;
        let outcome = (|| -> anyhow::Result<(Metrics, f64)> {
            if !cache.contains_key(&key) {
                cache.insert(key.clone(), load_data(s, a.run.data_dir.as_deref())?);
            }
            let dir = out.join(format!("{:02}-{}", i + 1, sanitize(name)));
            let report = run_one(s, &cache[&key], &dir, a.run.quiet)?;
            let last = report.last().context("no epochs")?;
            let metrics = Metrics {
                train_loss: last.train_loss,
                val_loss: last.val_loss.unwrap_or(f64::NAN),
                train_acc: last.train_acc,
                val_acc: last.val_acc.unwrap_or(f64::NAN),
            };
            Ok((metrics, report.q))
        })();
        let (outcome, q) = match outcome {
            Ok((m, q)) => (Ok(m), q),
            Err(e) => {
                eprintln!("[{name}] failed: {e:#}");
                let k = cache.get(&key).map_or(s.nominal_examples().0, |d| d.0.len());
                (Err(format!("{e:#}")), q_ratio(k, m.classes, params)?)
            }
        };
        rows.push(TableRow {
            name: name.clone(),
            heads: m.heads,
            mlp: m.mlp_enabled,
            modification: m.modification(),
            params,
            q,
            outcome,
        });
    }

    let csv_path = out.join("table.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_table_csv(f, &rows)?;
    let text = render_table(&rows);
    let txt_path = out.join("table.txt");
    std::fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    print!("{text}");
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} variants failed", rows.len());
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<()> {
    let opts = VerifyOptions {
        seed: a.seed,
        cases: a.cases,
        count_cases: a.count_cases,
        fault: a.inject_fault.map(Fault::ScaleGradient),
    };
    println!("verify seed={} cases={} count_cases={}", opts.seed, opts.cases, opts.count_cases);
    let reports = run_all(&opts)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(VerificationFailed(failed));
    }
    println!("all {} properties passed", reports.len());
    Ok(())
}

fn cmd_count(a: CountArgs) -> anyhow::Result<()> {
    let (s, _) = Settings::load(a.config.config.as_deref(), &overrides(&a.config, false))?;
    let m = &s.model;
    let c = count_params(m)?;
    let core = encoder_core(m)?;
    let (k, source) = match a.examples {
        Some(k) => (k, "--examples".to_string()),
        None => s.nominal_examples(),
    };
    println!("variant          {}", m.variant_label());
    print!("{c}");
    println!(
        "per encoder      attention {} + mlp {} (weights {}, biases {})",
        core.attention,
        core.mlp(),
        core.mlp_weights,
        core.mlp_biases
    );
    println!("examples (K)     {k} ({source})");
    println!("classes (M)      {}", m.classes);
    println!("Q = K*M/P        {:.4}", q_ratio(k, m.classes, c.total)?);
    Ok(())
}
