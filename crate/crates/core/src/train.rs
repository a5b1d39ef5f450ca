//! Cross-entropy, accuracy, Adam, the epoch loop and its report.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::data::{epoch_order, Dataset};
use crate::encoder::{count_params, model_backward_traced, model_forward, model_forward_traced, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const REPORT_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}' (f32, f64)"))),
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(params: &ModelParams<T>) -> Self {
        Self::new(params.named_tensors().into_iter().map(|(_, t)| t))
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &Adam,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam step over every tensor of a model.
pub fn adam_step_model<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &Adam,
) -> Result<()> {
    let grads: Vec<&Tensor<T>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut ps = params.tensors_mut();
    adam_step(&mut ps, &grads, state, cfg)
}

fn check_labels<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape("labels", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    check_labels(logits, labels)?;
    let b = labels.len();
    let inv_b = T::one() / T::lit(b as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - row[y]).as_f64();
        for (k, (g, &z)) in grad.row_mut(i).iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            let target = if k == y { T::one() } else { T::zero() };
            *g = (p - target) * inv_b;
        }
    }
    Ok((total / b as f64, grad))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    Ok(correct(logits, labels) as f64 / labels.len() as f64)
}

/// Overdetermination ratio `Q = K·M / P`.
pub fn q_ratio(examples: usize, classes: usize, params: usize) -> Result<f64> {
    if params == 0 {
        return Err(Error::Config("parameter count must be positive".into()));
    }
    Ok(examples as f64 * classes as f64 / params as f64)
}

pub const TRAIN_KEYS: [&str; 10] = [
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.deterministic",
    "train.eval_every",
    "train.precision",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: Adam,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Recorded in reports; every reduction is sequential, so runs are
    /// reproducible regardless.
    pub deterministic: bool,
    /// Validation is evaluated every `eval_every` epochs and after the last.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            adam: Adam::default(),
            seed: 0,
            deterministic: false,
            eval_every: 1,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("train.batch_size and train.eval_every must be positive");
        }
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(a.eps > 0.0) || !(a.lr > 0.0) || !a.lr.is_finite() {
            return bad("train.eps and train.lr must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.epochs", &self.epochs.to_string());
        kv.set("train.batch_size", &self.batch_size.to_string());
        kv.set("train.lr", &self.adam.lr.to_string());
        kv.set("train.beta1", &self.adam.beta1.to_string());
        kv.set("train.beta2", &self.adam.beta2.to_string());
        kv.set("train.eps", &self.adam.eps.to_string());
        kv.set("train.seed", &self.seed.to_string());
        kv.set("train.deterministic", &self.deterministic.to_string());
        kv.set("train.eval_every", &self.eval_every.to_string());
        kv.set("train.precision", &self.precision.to_string());
        kv
    }

    pub fn from_kv(kv: &KeyValues, base: TrainConfig) -> Result<Self> {
        let mut c = base;
        macro_rules! take {
            ($($field:ident).+, $key:literal) => {
                if let Some(v) = kv.parse_opt($key)? {
                    c.$($field).+ = v;
                }
            };
        }
        take!(epochs, "train.epochs");
        take!(batch_size, "train.batch_size");
        take!(adam.lr, "train.lr");
        take!(adam.beta1, "train.beta1");
        take!(adam.beta2, "train.beta2");
        take!(adam.eps, "train.eps");
        take!(seed, "train.seed");
        take!(eval_every, "train.eval_every");
        take!(precision, "train.precision");
        if let Some(b) = kv.get_bool("train.deterministic")? {
            c.deterministic = b;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Metrics after one epoch. Training metrics are averaged over the epoch's
/// minibatches; validation metrics are `None` on epochs without evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub rows: Vec<EpochRow>,
    /// Trainable parameters `P`.
    pub params: usize,
    /// Training examples `K`.
    pub examples: usize,
    pub val_examples: usize,
    pub classes: usize,
    pub q: f64,
    pub wall_clock_secs: f64,
    /// SHA-256 of the canonical model + training configuration and data
    /// description.
    pub config_hash: String,
    pub precision: &'static str,
    pub adam: Adam,
    pub batch_size: usize,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    /// `summary.txt` body.
    pub fn summary(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        let last = self.last();
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<18}{v}\n"));
        line("variant", self.label.clone());
        line("params (P)", self.params.to_string());
        line("examples (K)", self.examples.to_string());
        line("classes (M)", self.classes.to_string());
        line("Q = K*M/P", format!("{:.4}", self.q));
        line("val examples", self.val_examples.to_string());
        line("epochs", self.rows.len().to_string());
        if let Some(r) = last {
            line("final train loss", format!("{:.4}", r.train_loss));
            line("final train acc", format!("{:.4}", r.train_acc));
            line("final val loss", fmt_opt(r.val_loss));
            line("final val acc", fmt_opt(r.val_acc));
        }
        let a = self.adam;
        line(
            "optimizer",
            format!("adam lr={} beta1={} beta2={} eps={} batch={}", a.lr, a.beta1, a.beta2, a.eps, self.batch_size),
        );
        line("normalization", "pixels / 255".into());
        line("precision", self.precision.into());
        line("config hash", self.config_hash.clone());
        line("wall clock", format!("{:.1} s", self.wall_clock_secs));
        for w in &self.warnings {
            line("warning", w.clone());
        }
        s
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)?;
        let sum_path = dir.join("summary.txt");
        std::fs::write(&sum_path, self.summary()).map_err(|e| Error::io(&sum_path, e))
    }
}

fn csv_err(e: impl fmt::Display) -> Error {
    Error::Data(format!("report csv: {e}"))
}

pub fn write_rows<W: Write>(out: W, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val_loss),
            r.train_acc.to_string(),
            opt(r.val_acc),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// Parses a report CSV written by [`write_rows`].
pub fn read_rows<R: Read>(input: R) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(csv_err(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(csv_err);
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(EpochRow {
            epoch: rec[0].parse().map_err(csv_err)?,
            train_loss: num(&rec[1])?,
            val_loss: opt(&rec[2])?,
            train_acc: num(&rec[3])?,
            val_acc: opt(&rec[4])?,
        });
    }
    Ok(rows)
}

/// Mean loss and accuracy of `params` over a whole dataset.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = model_forward(&ds.images::<T>(chunk), params, config)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.label(i)).collect();
        let (l, _) = cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        hits += correct(&logits, &labels);
    }
    Ok((loss / ds.len() as f64, hits as f64 / ds.len() as f64))
}

fn config_hash(model: &ModelConfig, train: &TrainConfig, ds: &Dataset, val: &Dataset) -> String {
    let mut kv = model.to_kv();
    kv.extend(&train.to_kv());
    let mut h = Sha256::new();
    h.update(kv.to_string().as_bytes());
    h.update(format!("data {} {} {} {} {}\n", ds.name(), ds.split(), ds.len(), val.split(), val.len()).as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains a fresh model initialized from `model.seed`.
pub fn train<T: Real>(
    model: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(RunReport, ModelParams<T>)> {
    train_observed(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_observed<T: Real>(
    model: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(RunReport, ModelParams<T>)> {
    cfg.validate()?;
    model.validate()?;
    let want = [model.image_height, model.image_width, model.channels];
    for ds in [train_set, val_set] {
        if ds.image_shape() != want {
            return Err(Error::shape("dataset images", &ds.image_shape(), &want));
        }
        if ds.classes() > model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model outputs {}",
                ds.classes(),
                model.classes
            )));
        }
        if ds.is_empty() {
            return Err(Error::Data(format!("{} split is empty", ds.split())));
        }
    }
    let started = Instant::now();
    let p = count_params(model)?.total;
    let q = q_ratio(train_set.len(), model.classes, p)?;
    let mut warnings = Vec::new();
    if q < 1.0 {
        warnings.push(format!("Q = {q:.4} < 1: fewer constraints than parameters"));
    }

    let mut params = ModelParams::<T>::init(model)?;
    let mut state = AdamState::for_model(&params);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut loss_trace: Vec<f64> = Vec::new();
    let numeric = |epoch: usize, batch: usize, loss: f64, trace: &[f64]| Error::NumericFailure {
        epoch,
        batch,
        loss,
        trace: trace.to_vec(),
    };

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = train_set.images::<T>(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let (logits, trace) = match model_forward_traced(&images, &params, model) {
                Err(Error::NonFinite { .. }) => return Err(numeric(epoch, b, f64::NAN, &loss_trace)),
                r => r?,
            };
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            loss_trace.push(loss);
            if loss_trace.len() > 16 {
                loss_trace.remove(0);
            }
            if !loss.is_finite() {
                return Err(numeric(epoch, b, loss, &loss_trace));
            }
            loss_sum += loss * chunk.len() as f64;
            hits += correct(&logits, &labels);
            let grads = match model_backward_traced(&trace, &params, model, &dlogits) {
                Err(Error::NonFinite { .. }) => return Err(numeric(epoch, b, loss, &loss_trace)),
                r => r?,
            };
            adam_step_model(&mut params, &grads, &mut state, &cfg.adam)?;
        }
        let (val_loss, val_acc) = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (l, a) = evaluate(&params, model, val_set, cfg.batch_size)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc,
        };
        on_epoch(&row);
        rows.push(row);
    }

    let report = RunReport {
        label: model.variant_label(),
        rows,
        params: p,
        examples: train_set.len(),
        val_examples: val_set.len(),
        classes: model.classes,
        q,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash: config_hash(model, cfg, train_set, val_set),
        precision: T::NAME,
        adam: cfg.adam,
        batch_size: cfg.batch_size,
        warnings,
    };
    Ok((report, params))
}
