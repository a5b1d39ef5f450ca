//! Randomized property suite over the attention algebra, the model
//! gradients and the parameter counter. Every check is seeded, so a given
//! [`VerifyOptions`] always reproduces the same report.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    self, collapse, collapse_qk, collapse_vo, AttentionConfig, AttentionParams, Mask, QkMode, VoMode,
};
use crate::encoder::{count_params, encoder_core, model_backward, model_forward, ModelConfig, ModelParams, Pooling};
use crate::error::Result;
use crate::tensor::{matmul, Tensor};

pub const EXACT_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;

/// Outcome of one property over all its random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyReport {
    pub name: &'static str,
    pub cases: usize,
    /// Largest observed error (absolute or relative, see `name`).
    pub max_error: f64,
    pub tolerance: f64,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl PropertyReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        PropertyReport {
            name,
            cases: 0,
            max_error: 0.0,
            tolerance,
            failure: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    /// Records one case; `err` above tolerance (or NaN) fails the property.
    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
        if !(err <= self.tolerance) && self.failure.is_none() {
            self.failure = Some(format!("{} (error {err:e})", describe()));
        }
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<22} cases={:<4} max_err={:<10.3e} tol={:e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )?;
        if let Some(why) = &self.failure {
            write!(f, "\n      first failure: {why}")?;
        }
        Ok(())
    }
}

/// Deliberate corruption used to show the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiply the first entry of every analytic model gradient by this
    /// factor before comparing with finite differences.
    ScaleGradient(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per algebraic property.
    pub cases: usize,
    /// Random configurations for the counter check.
    pub count_cases: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            cases: 100,
            count_cases: 200,
            fault: None,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive extents")
}

fn asymmetry(s: &Tensor) -> f64 {
    s.max_abs_diff(&s.transpose())
}

/// Collapsed `W_QK` and `W_VO` reproduce the separate forward pass.
pub fn collapse_equivalence(seed: u64, cases: usize) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("collapse_equivalence", EXACT_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=32);
        let l = rng.gen_range(1..=8);
        let mask = if rng.gen_bool(0.5) { Mask::Causal } else { Mask::Full };
        let cfg = AttentionConfig::new(n, 1, QkMode::Separate, VoMode::Separate).with_mask(mask);
        let p = AttentionParams::<f64>::init(&cfg, &mut rng)?;
        let x = random_tensor(&mut rng, &[l, n]);
        let z = attention::forward(&x, &p, &cfg)?;
        let mut err = 0.0f64;
        for (cp, cc) in [collapse_qk(&p, &cfg)?, collapse_vo(&p, &cfg)?, collapse(&p, &cfg)?] {
            err = err.max(z.max_abs_diff(&attention::forward(&x, &cp, &cc)?));
        }
        rep.record(err, || format!("seed {seed} case {case}: N={n} L={l} mask={mask}"));
    }
    Ok(rep)
}

/// Shared and Cholesky similarities give symmetric logits; Cholesky
/// self-similarities are nonnegative.
pub fn symmetry(seed: u64, cases: usize) -> Result<(PropertyReport, PropertyReport)> {
    let mut sym = PropertyReport::new("symmetric_logits", EXACT_TOL);
    let mut diag = PropertyReport::new("nonneg_self_similarity", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=32);
        let l = rng.gen_range(1..=8);
        let x = random_tensor(&mut rng, &[l, n]);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let n_shared = n.div_ceil(heads) * heads;
        let xs = random_tensor(&mut rng, &[l, n_shared]);
        let shared = AttentionConfig::new(n_shared, heads, QkMode::Shared, VoMode::Separate);
        let ps = AttentionParams::<f64>::init(&shared, &mut rng)?;
        let mut err = 0.0f64;
        for h in 0..heads {
            err = err.max(asymmetry(&attention::logits(&xs, &ps, &shared, h)?));
        }
        let chol = AttentionConfig::new(n, 1, QkMode::Cholesky, VoMode::Identity);
        let mut pc = AttentionParams::<f64>::init(&chol, &mut rng)?;
        // random factor rather than the near-identity initialization
        for t in pc.tensors_mut() {
            *t = random_tensor(&mut rng, t.shape());
        }
        let s = attention::logits(&x, &pc, &chol, 0)?;
        err = err.max(asymmetry(&s));
        sym.record(err, || format!("seed {seed} case {case}: N={n} L={l} H={heads}"));
        let worst = (0..l).map(|i| -s.at(i, i)).fold(f64::NEG_INFINITY, f64::max).max(0.0);
        diag.record(worst, || format!("seed {seed} case {case}: N={n} L={l}"));
    }
    Ok((sym, diag))
}

/// Identity value/output: each output is the weight-averaged input, so it
/// equals `A·x` and lies inside the per-coordinate hull of the tokens.
pub fn convex_combination(seed: u64, cases: usize) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("convex_combination", EXACT_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=32);
        let l = rng.gen_range(1..=8);
        let qk = [QkMode::Separate, QkMode::Collapsed, QkMode::Shared, QkMode::Cholesky][rng.gen_range(0..4)];
        let cfg = AttentionConfig::new(n, 1, qk, VoMode::Identity);
        let p = AttentionParams::<f64>::init(&cfg, &mut rng)?;
        let x = random_tensor(&mut rng, &[l, n]);
        let (z, trace) = attention::forward_traced(&x, &p, &cfg)?;
        let mut err = z.max_abs_diff(&matmul(trace.weights(0), &x)?);
        for c in 0..n {
            let (lo, hi) = (0..l).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| {
                (lo.min(x.at(j, c)), hi.max(x.at(j, c)))
            });
            for i in 0..l {
                let v = z.at(i, c);
                err = err.max(lo - v).max(v - hi);
            }
        }
        rep.record(err, || format!("seed {seed} case {case}: N={n} L={l} qk={qk}"));
    }
    Ok(rep)
}

/// Every valid combination of heads, similarity, value/output mode and MLP
/// at `N = 8`, `S = 2`, `L = 4` tokens, `M = 3` classes.
pub fn gradient_variants() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for heads in [1, 2] {
        for qk_mode in [QkMode::Separate, QkMode::Collapsed, QkMode::Shared, QkMode::Cholesky] {
            for vo_mode in [VoMode::Separate, VoMode::Collapsed, VoMode::Identity] {
                for mlp_enabled in [true, false] {
                    let cfg = ModelConfig {
                        image_height: 4,
                        image_width: 4,
                        channels: 1,
                        patch: 2,
                        width: 8,
                        encoders: 2,
                        heads,
                        qk_mode,
                        vo_mode,
                        mask: Mask::Full,
                        scale_logits: false,
                        mlp_enabled,
                        mlp_multiple: 2,
                        classes: 3,
                        pooling: Pooling::Mean,
                        pre_norm: true,
                        seed: 0,
                    };
                    if cfg.validate().is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
    }
    out
}

/// Central-difference check of the full-model backward pass. Relative error
/// uses `max(|analytic|, |numeric|, 1e-6)` as the denominator.
pub fn gradient_check(seed: u64, fault: Option<Fault>) -> Result<PropertyReport> {
    let mut rep = PropertyReport::new("gradient_check", GRAD_TOL);
    let step = 1e-5;
    for (v, base) in gradient_variants().into_iter().enumerate() {
        let cfg = ModelConfig {
            seed: seed.wrapping_add(v as u64),
            ..base
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ModelParams::<f64>::init(&cfg)?;
        for t in p.tensors_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let images: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[4, 4, 1])).collect();
        let g = random_tensor(&mut rng, &[2, cfg.classes]);
        let objective = |q: &ModelParams| -> Result<f64> {
            let logits = model_forward(&images, q, &cfg)?;
            Ok(logits.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
        };
        let mut grads = model_backward(&images, &p, &cfg, &g)?;
        if let Some(Fault::ScaleGradient(f)) = fault {
            for t in grads.tensors_mut() {
                t.data_mut()[0] *= f;
            }
        }
        let mut worst = (0.0f64, String::new());
        let analytic: Vec<(String, Vec<f64>)> =
            grads.named_tensors().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        for (ti, (name, values)) in analytic.iter().enumerate() {
            for (k, &a) in values.iter().enumerate() {
                let orig = p.tensors_mut()[ti].data()[k];
                p.tensors_mut()[ti].data_mut()[k] = orig + step;
                let fp = objective(&p)?;
                p.tensors_mut()[ti].data_mut()[k] = orig - step;
                let fm = objective(&p)?;
                p.tensors_mut()[ti].data_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * step);
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                if err > worst.0 || err.is_nan() {
                    worst = (err, format!("{name}[{k}]"));
                }
            }
        }
        rep.record(worst.0, || {
            format!("seed {} variant {}: {} analytic vs numeric", cfg.seed, cfg.variant_label(), worst.1)
        });
    }
    Ok(rep)
}

fn random_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let qk_mode = [QkMode::Separate, QkMode::Collapsed, QkMode::Shared, QkMode::Cholesky][rng.gen_range(0..4)];
    let vo_mode = [VoMode::Separate, VoMode::Collapsed, VoMode::Identity][rng.gen_range(0..3)];
    let single = matches!(qk_mode, QkMode::Collapsed | QkMode::Cholesky) || vo_mode == VoMode::Collapsed;
    let heads = if single { 1 } else { [1, 2, 4][rng.gen_range(0..3)] };
    let patch = rng.gen_range(1..=4);
    ModelConfig {
        image_height: patch * rng.gen_range(1..=4),
        image_width: patch * rng.gen_range(1..=4),
        channels: rng.gen_range(1..=3),
        patch,
        width: heads * rng.gen_range(1..=8),
        encoders: rng.gen_range(0..=3),
        heads,
        qk_mode,
        vo_mode,
        mask: if rng.gen_bool(0.5) { Mask::Causal } else { Mask::Full },
        scale_logits: rng.gen_bool(0.5),
        mlp_enabled: rng.gen_bool(0.5),
        mlp_multiple: rng.gen_range(1..=4),
        classes: rng.gen_range(1..=10),
        pooling: if rng.gen_bool(0.5) { Pooling::ClassToken } else { Pooling::Mean },
        pre_norm: rng.gen_bool(0.5),
        seed: rng.gen(),
    }
}

/// Closed-form counts equal the number of stored scalars, and the reduced
/// cores keep their exact ratios to the full core.
pub fn count_consistency(seed: u64, cases: usize) -> Result<(PropertyReport, PropertyReport)> {
    let mut tally = PropertyReport::new("count_vs_enumeration", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let cfg = random_model_config(&mut rng);
        let counted = count_params(&cfg)?.total;
        let stored = ModelParams::<f64>::init(&cfg)?.num_params();
        let err = (counted as f64 - stored as f64).abs();
        tally.record(err, || format!("seed {seed} case {case}: {cfg:?} counted {counted} stored {stored}"));
    }

    let mut ratios = PropertyReport::new("core_ratios", 0.0);
    for n in [8, 16, 64, 128] {
        let full = ModelConfig {
            width: n,
            ..ModelConfig::mnist()
        };
        let no_mlp = ModelConfig {
            mlp_enabled: false,
            ..full.clone()
        };
        let reduced = ModelConfig {
            qk_mode: QkMode::Collapsed,
            vo_mode: VoMode::Identity,
            ..full.clone()
        };
        let chol = ModelConfig {
            qk_mode: QkMode::Cholesky,
            vo_mode: VoMode::Identity,
            ..full.clone()
        };
        let with = encoder_core(&full)?;
        let without = encoder_core(&no_mlp)?;
        let e1 = (3 * without.matrices()).abs_diff(with.matrices());
        let e2 = (4 * encoder_core(&reduced)?.attention).abs_diff(with.attention);
        let e3 = encoder_core(&chol)?.attention.abs_diff(n * (n + 1) / 2);
        ratios.record((e1 + e2 + e3) as f64, || {
            format!("N={n}: 3·{} vs {}, 4·reduced vs {}, cholesky off by {e3}", without.matrices(), with.matrices(), with.attention)
        });
    }
    Ok((tally, ratios))
}

/// Runs every property.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<PropertyReport>> {
    let s = opts.seed;
    let mut out = vec![collapse_equivalence(s, opts.cases)?];
    let (sym, diag) = symmetry(s.wrapping_add(1), opts.cases)?;
    out.push(sym);
    out.push(diag);
    out.push(convex_combination(s.wrapping_add(2), opts.cases)?);
    out.push(gradient_check(s.wrapping_add(3), opts.fault)?);
    let (tally, ratios) = count_consistency(s.wrapping_add(4), opts.count_cases)?;
    out.push(tally);
    out.push(ratios);
    Ok(out)
}
