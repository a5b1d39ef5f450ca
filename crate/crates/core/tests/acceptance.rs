//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The MNIST training criterion needs data on disk: the official IDX files
//! or the sample conversion (see README) in `MINFORMER_DATA_DIR` or
//! `data/mnist`. Without data it prints SKIP, unless
//! `MINFORMER_REQUIRE_DATA` is set, in which case it fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use minformer::data::{self, DataConfig, Source, MNIST_SAMPLE_IMAGES, MNIST_TRAIN_IMAGES};
use minformer::encoder::{model_forward, ModelConfig, ModelParams};
use minformer::train::{cross_entropy, q_ratio, read_rows, train, RunReport, TrainConfig};
use minformer::verify::{self, EXACT_TOL, GRAD_TOL};
use minformer::Tensor;

const SEED: u64 = 20_240_601;
const Q_TOL: f64 = 0.005;
const LN10_TOL: f64 = 1e-4;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const TARGET_VAL_ACC: f64 = 0.90;
const MAX_EPOCHS: usize = 30;
/// Epochs of the with-MLP run; its training loss is compared with the
/// no-MLP run's row at the same epoch, which equals the final row of an
/// equally long run because training is deterministic.
const MLP_EPOCHS: usize = 12;

enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn line(&mut self, id: &str, name: &str, outcome: Outcome, detail: String) {
        let tag = match outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                self.failed.push(format!("{id} {name}"));
                "FAIL"
            }
            Outcome::Skip => "SKIP",
        };
        println!("[{tag}] {id}. {name}: {detail}");
    }

    fn check(&mut self, id: &str, name: &str, ok: bool, detail: String) {
        self.line(id, name, if ok { Outcome::Pass } else { Outcome::Fail }, detail);
    }
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn q_reproduction(l: &mut Ledger) {
    let cells = [
        (60_000, 10, 279_106, 2.15),
        (60_000, 10, 92_890, 6.46),
        (60_000, 10, 26_650, 22.51),
        (50_000, 10, 287_686, 1.74),
        (50_000, 10, 35_230, 14.19),
    ];
    let mut worst: f64 = 0.0;
    for (k, m, p, want) in cells {
        let q = q_ratio(k, m, p).expect("positive P");
        worst = worst.max((q - want).abs());
    }
    l.check("1", "Q ratio reproduction", worst <= Q_TOL, format!("5 cells, max |Q - expected| = {worst:.4} (tol {Q_TOL})"));
}

fn properties(l: &mut Ledger) {
    let (rep, t) = timed(|| verify::collapse_equivalence(SEED, 100).unwrap());
    l.check(
        "2",
        "collapse equivalence",
        rep.passed() && rep.cases == 100 && rep.tolerance == EXACT_TOL && t < Duration::from_secs(10),
        format!("{} instances, max abs diff {:.2e} (tol {EXACT_TOL:e}), {:.2?}", rep.cases, rep.max_error, t),
    );

    let ((sym, diag), t) = timed(|| verify::symmetry(SEED + 1, 100).unwrap());
    l.check(
        "3",
        "symmetric logits",
        sym.passed() && diag.passed() && sym.cases >= 100 && t < Duration::from_secs(10),
        format!(
            "{} instances, max asymmetry {:.2e} (tol {EXACT_TOL:e}), min-diag check {}, {:.2?}",
            sym.cases,
            sym.max_error,
            if diag.passed() { "ok" } else { "violated" },
            t
        ),
    );

    let (rep, t) = timed(|| verify::convex_combination(SEED + 2, 100).unwrap());
    l.check(
        "4",
        "convex combination",
        rep.passed() && rep.cases >= 100 && t < Duration::from_secs(10),
        format!("{} instances, max error {:.2e} (tol {EXACT_TOL:e}), {:.2?}", rep.cases, rep.max_error, t),
    );

    let (rep, t) = timed(|| verify::gradient_check(SEED + 3, None).unwrap());
    let variants = verify::gradient_variants();
    let shape_ok = variants
        .iter()
        .all(|c| c.width == 8 && c.encoders == 2 && c.seq_len() == 4 && c.classes == 3);
    l.check(
        "5",
        "gradient exactness",
        rep.passed() && shape_ok && rep.tolerance == GRAD_TOL && t < Duration::from_secs(300),
        format!(
            "{} variants, max relative error {:.2e} (tol {GRAD_TOL:e}), {:.2?}",
            variants.len(),
            rep.max_error,
            t
        ),
    );

    let ((tally, ratios), t) = timed(|| verify::count_consistency(SEED + 4, 200).unwrap());
    l.check(
        "6",
        "parameter-count consistency",
        tally.passed() && ratios.passed() && tally.cases == 200 && t < Duration::from_secs(10),
        format!(
            "{} configs, count mismatch {}; core ratios 1/3, 1/4, N(N+1)/2 {}, {:.2?}",
            tally.cases,
            tally.max_error,
            if ratios.passed() { "exact" } else { "violated" },
            t
        ),
    );
}

fn mnist_dir() -> Option<(PathBuf, Source)> {
    let dirs = std::env::var_os("MINFORMER_DATA_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")]);
    for d in dirs {
        if d.join(MNIST_TRAIN_IMAGES).exists() {
            return Some((d, Source::Mnist));
        }
        if d.join(MNIST_SAMPLE_IMAGES).exists() {
            return Some((d, Source::MnistSample));
        }
    }
    None
}

fn desk_model(mlp: bool) -> ModelConfig {
    ModelConfig {
        mlp_enabled: mlp,
        scale_logits: true,
        seed: SEED,
        ..ModelConfig::mnist()
    }
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: SEED,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn desk_training(l: &mut Ledger) {
    let name = "desk-scale MNIST training";
    let Some((dir, source)) = mnist_dir() else {
        let outcome = if std::env::var_os("MINFORMER_REQUIRE_DATA").is_some() { Outcome::Fail } else { Outcome::Skip };
        l.line("7", name, outcome, "no MNIST files found; set MINFORMER_DATA_DIR".into());
        return;
    };
    let dc = DataConfig {
        source,
        train_size: 8000,
        val_size: 2000,
        seed: SEED,
        ..DataConfig::default()
    };
    let (train_set, val_set) = dc.load(Some(&dir), [28, 28, 1], 10).expect("MNIST loads");
    assert_eq!((train_set.len(), val_set.len()), (8000, 2000));

    let run = |mlp: bool, epochs: usize| -> (RunReport, Duration) {
        let (r, t) = timed(|| train::<f64>(&desk_model(mlp), &train_set, &val_set, &desk_train(epochs)));
        (r.expect("training finishes").0, t)
    };
    let (plain, t_plain) = run(false, MAX_EPOCHS);
    let best = plain
        .rows
        .iter()
        .filter_map(|r| r.val_acc.map(|a| (r.epoch, a)))
        .find(|&(_, a)| a >= TARGET_VAL_ACC);
    let peak = plain.rows.iter().filter_map(|r| r.val_acc).fold(0.0, f64::max);
    l.check(
        "7a",
        "no-MLP reaches 90% validation accuracy",
        best.is_some() && t_plain <= RUN_BUDGET,
        match best {
            Some((e, a)) => format!("{source}: {:.2}% at epoch {e}, {:.0?} for {MAX_EPOCHS} epochs", 100.0 * a, t_plain),
            None => format!("{source}: peak {:.2}% within {MAX_EPOCHS} epochs, {:.0?}", 100.0 * peak, t_plain),
        },
    );

    let (mlp, t_mlp) = run(true, MLP_EPOCHS);
    let mlp_loss = mlp.last().unwrap().train_loss;
    let plain_loss = plain.rows[MLP_EPOCHS - 1].train_loss;
    l.check(
        "7b",
        "MLP lowers final training loss",
        mlp_loss < plain_loss && t_mlp <= RUN_BUDGET,
        format!("after {MLP_EPOCHS} epochs: with MLP {mlp_loss:.4}, without {plain_loss:.4}, {:.0?}", t_mlp),
    );
}

fn sentinel(l: &mut Ledger) {
    let labels: Vec<usize> = (0..10).collect();
    let (uniform, _) = cross_entropy(&Tensor::<f64>::zeros(&[10, 10]), &labels).unwrap();

    // An untrained model whose classifier outputs nothing but its zero bias.
    let config = ModelConfig {
        width: 16,
        encoders: 1,
        mlp_enabled: false,
        qk_mode: minformer::attention::QkMode::Collapsed,
        vo_mode: minformer::attention::VoMode::Identity,
        ..ModelConfig::mnist()
    };
    let mut params: ModelParams = ModelParams::init(&config).unwrap();
    params.classifier.fill(0.0);
    let ds = data::synthetic(10, 2, [28, 28, 1], SEED);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let logits = model_forward(&ds.images::<f64>(&idx), &params, &config).unwrap();
    let (model_loss, _) = cross_entropy(&logits, ds.labels()).unwrap();

    let ln10 = 10f64.ln();
    let err = (uniform - ln10).abs().max((model_loss - ln10).abs());
    l.check(
        "8",
        "degenerate-loss sentinel",
        err <= LN10_TOL,
        format!("uniform {uniform:.6}, stalled model {model_loss:.6}, ln 10 = {ln10:.6} (tol {LN10_TOL:e})"),
    );
}

fn determinism(l: &mut Ledger) {
    let (train_set, val_set) = (data::synthetic(3, 24, [12, 12, 1], 5), data::synthetic(3, 6, [12, 12, 1], 6));
    let model = ModelConfig {
        image_height: 12,
        image_width: 12,
        patch: 4,
        width: 12,
        encoders: 2,
        classes: 3,
        seed: 11,
        ..ModelConfig::mnist()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 11,
        deterministic: true,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (csvs, t) = timed(|| {
        ["a", "b"].map(|name| {
            let (report, _) = train::<f64>(&model, &train_set, &val_set, &cfg).unwrap();
            let out = dir.path().join(name);
            report.save(&out).unwrap();
            std::fs::read(out.join("report.csv")).unwrap()
        })
    });
    let rows = read_rows(csvs[0].as_slice()).unwrap().len();
    l.check(
        "9",
        "determinism",
        csvs[0] == csvs[1] && rows == 3 && t < Duration::from_secs(120),
        format!("two seeded runs, {} CSV bytes each, identical: {}, {:.2?}", csvs[0].len(), csvs[0] == csvs[1], t),
    );
}

fn main() -> ExitCode {
    let mut l = Ledger { failed: Vec::new() };
    q_reproduction(&mut l);
    properties(&mut l);
    sentinel(&mut l);
    determinism(&mut l);
    desk_training(&mut l);
    if l.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria: {:?}", l.failed);
        ExitCode::FAILURE
    }
}
