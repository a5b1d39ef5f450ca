// Oracles index explicitly to mirror the summation formulas.
#![allow(clippy::needless_range_loop)]

use minformer::attention::{
    self, AttentionConfig, AttentionParams, Mask, QkMode, QkParams, VoMode, VoParams,
};
use minformer::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_x(rng: &mut ChaCha8Rng, l: usize, n: usize) -> Tensor {
    Tensor::new(&[l, n], (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn every_config(n: usize) -> Vec<AttentionConfig> {
    let mut out = Vec::new();
    for h in [1usize, 2, 4] {
        for qk in [QkMode::Separate, QkMode::Collapsed, QkMode::Shared, QkMode::Cholesky] {
            for vo in [VoMode::Separate, VoMode::Collapsed, VoMode::Identity] {
                for mask in [Mask::Full, Mask::Causal] {
                    let c = AttentionConfig::new(n, h, qk, vo).with_mask(mask);
                    if c.validate().is_ok() {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// Multi-head forward written index by index, with no matrix helpers:
/// `z_i = Σ_h (Σ_j a_hij x_j) W_V W_O`, `a_hi = softmax_j(x_i W_Q W_Kᵀ x_jᵀ)`.
fn straight_line_forward(x: &Tensor, wq: &[Tensor], wk: &[Tensor], wv: &[Tensor], wo: &[Tensor]) -> Vec<Vec<f64>> {
    let (l, n) = (x.rows(), x.cols());
    let d = wq[0].cols();
    let mut z = vec![vec![0.0; n]; l];
    for h in 0..wq.len() {
        for i in 0..l {
            let mut s = vec![0.0; l];
            for (j, sj) in s.iter_mut().enumerate() {
                for c in 0..d {
                    let mut qi = 0.0;
                    let mut kj = 0.0;
                    for a in 0..n {
                        qi += x.at(i, a) * wq[h].at(a, c);
                        kj += x.at(j, a) * wk[h].at(a, c);
                    }
                    *sj += qi * kj;
                }
            }
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            let mut avg = vec![0.0; n];
            for j in 0..l {
                for a in 0..n {
                    avg[a] += e[j] / tot * x.at(j, a);
                }
            }
            for out in 0..n {
                for c in 0..d {
                    let mut v = 0.0;
                    for a in 0..n {
                        v += avg[a] * wv[h].at(a, c);
                    }
                    z[i][out] += v * wo[h].at(c, out);
                }
            }
        }
    }
    z
}

#[test]
fn separate_forward_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for heads in [1, 2] {
        let cfg = AttentionConfig::new(6, heads, QkMode::Separate, VoMode::Separate);
        let p = AttentionParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = random_x(&mut rng, 4, 6);
        let z = attention::forward(&x, &p, &cfg).unwrap();
        let (QkParams::Separate { wq, wk }, VoParams::Separate { wv, wo }) = (&p.qk, &p.vo) else {
            unreachable!()
        };
        let oracle = straight_line_forward(&x, wq, wk, wv, wo);
        for i in 0..4 {
            for j in 0..6 {
                assert!((z.at(i, j) - oracle[i][j]).abs() < 1e-12, "H={heads} ({i},{j})");
            }
        }
    }
}

/// Scalar objective `⟨forward(x), g⟩`, whose gradient backward computes
/// when fed `dz = g`.
fn objective(x: &Tensor, p: &AttentionParams, cfg: &AttentionConfig, g: &Tensor) -> f64 {
    let z = attention::forward(x, p, cfg).unwrap();
    z.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn backward_matches_central_differences_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for cfg in every_config(8) {
        let l = 5;
        let p = AttentionParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = random_x(&mut rng, l, 8).scale(0.5);
        let g = random_x(&mut rng, l, 8);
        let (dx, dp) = attention::backward(&x, &p, &cfg, &g).unwrap();

        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += step;
            let mut xm = x.clone();
            xm.data_mut()[k] -= step;
            let fd = (objective(&xp, &p, &cfg, &g) - objective(&xm, &p, &cfg, &g)) / (2.0 * step);
            let e = rel_err(dx.data()[k], fd);
            worst = worst.max(e);
            assert!(e < 1e-5, "{cfg:?} dx[{k}]: {} vs {fd}", dx.data()[k]);
        }

        let grads = dp.named_tensors();
        let n_tensors = grads.len();
        for ti in 0..n_tensors {
            let len = grads[ti].1.len();
            for k in 0..len {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].data_mut()[k] += step;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].data_mut()[k] -= step;
                let fd = (objective(&x, &pp, &cfg, &g) - objective(&x, &pm, &cfg, &g)) / (2.0 * step);
                let a = grads[ti].1.data()[k];
                let e = rel_err(a, fd);
                worst = worst.max(e);
                assert!(e < 1e-5, "{cfg:?} {}[{k}]: {a} vs {fd}", grads[ti].0);
            }
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn shared_gradient_is_sum_of_tied_roles() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for heads in [1, 2, 4] {
        let shared_cfg = AttentionConfig::new(8, heads, QkMode::Shared, VoMode::Separate);
        let shared = AttentionParams::<f64>::init(&shared_cfg, &mut rng).unwrap();
        let QkParams::Shared { wq } = &shared.qk else { unreachable!() };
        let sep_cfg = AttentionConfig::new(8, heads, QkMode::Separate, VoMode::Separate);
        let tied = AttentionParams {
            qk: QkParams::Separate {
                wq: wq.clone(),
                wk: wq.clone(),
            },
            vo: shared.vo.clone(),
        };
        let x = random_x(&mut rng, 5, 8);
        let g = random_x(&mut rng, 5, 8);
        let (dx_s, gs) = attention::backward(&x, &shared, &shared_cfg, &g).unwrap();
        let (dx_t, gt) = attention::backward(&x, &tied, &sep_cfg, &g).unwrap();
        assert!(dx_s.max_abs_diff(&dx_t) < 1e-12);
        let (QkParams::Shared { wq: gq }, QkParams::Separate { wq: tq, wk: tk }) = (&gs.qk, &gt.qk) else {
            unreachable!()
        };
        for h in 0..heads {
            let sum = tq[h].add(&tk[h]).unwrap();
            assert!(gq[h].max_abs_diff(&sum) < 1e-12);
        }
    }
}

#[test]
fn identity_vo_gradient_has_no_value_slots() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = AttentionConfig::new(4, 1, QkMode::Collapsed, VoMode::Identity);
    let p = AttentionParams::<f64>::init(&cfg, &mut rng).unwrap();
    let x = random_x(&mut rng, 3, 4);
    let (_, g) = attention::backward(&x, &p, &cfg, &x).unwrap();
    assert_eq!(g.vo, VoParams::Identity);
    let names: Vec<String> = g.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["wqk".to_string()]);
}

fn instance(seed: u64, n: usize, l: usize, cfg: &AttentionConfig) -> (AttentionParams, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::init(cfg, &mut rng).unwrap();
    let x = random_x(&mut rng, l, n);
    (p, x)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn collapsed_forward_equals_separate(seed in any::<u64>(), n in 1usize..=12, l in 1usize..=8, causal in any::<bool>()) {
        let mask = if causal { Mask::Causal } else { Mask::Full };
        let cfg = AttentionConfig::new(n, 1, QkMode::Separate, VoMode::Separate).with_mask(mask);
        let (p, x) = instance(seed, n, l, &cfg);
        let z = attention::forward(&x, &p, &cfg).unwrap();
        let (pc, cc) = attention::collapse(&p, &cfg).unwrap();
        prop_assert_eq!(pc.num_params(), 2 * n * n);
        prop_assert!(attention::forward(&x, &pc, &cc).unwrap().max_abs_diff(&z) < 1e-12);
        let (pq, cq) = attention::collapse_qk(&p, &cfg).unwrap();
        prop_assert!(attention::forward(&x, &pq, &cq).unwrap().max_abs_diff(&z) < 1e-12);
        let (pv, cv) = attention::collapse_vo(&p, &cfg).unwrap();
        prop_assert!(attention::forward(&x, &pv, &cv).unwrap().max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn symmetric_modes_give_symmetric_logits(seed in any::<u64>(), n in 1usize..=12, l in 1usize..=8, shared_heads in 0usize..3) {
        let heads = [1, 2, 4][shared_heads];
        let n = n * heads;
        let shared = AttentionConfig::new(n, heads, QkMode::Shared, VoMode::Identity);
        let (p, x) = instance(seed, n, l, &shared);
        for h in 0..heads {
            let s = attention::logits(&x, &p, &shared, h).unwrap();
            prop_assert!(s.max_abs_diff(&s.transpose()) < 1e-12);
        }
        let chol = AttentionConfig::new(n, 1, QkMode::Cholesky, VoMode::Identity);
        let (p, x) = instance(seed, n, l, &chol);
        let s = attention::logits(&x, &p, &chol, 0).unwrap();
        prop_assert!(s.max_abs_diff(&s.transpose()) < 1e-12);
        for i in 0..l {
            prop_assert!(s.at(i, i) >= 0.0);
        }
    }

    #[test]
    fn identity_vo_output_is_convex_combination(seed in any::<u64>(), n in 1usize..=12, l in 1usize..=8, causal in any::<bool>()) {
        let mask = if causal { Mask::Causal } else { Mask::Full };
        let cfg = AttentionConfig::new(n, 1, QkMode::Separate, VoMode::Identity).with_mask(mask);
        let (p, x) = instance(seed, n, l, &cfg);
        let z = attention::forward(&x, &p, &cfg).unwrap();
        let a = attention::weights(&attention::logits(&x, &p, &cfg, 0).unwrap(), mask).unwrap();
        for i in 0..l {
            let total: f64 = a.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(a.row(i).iter().all(|&w| w >= 0.0));
            for c in 0..n {
                let mut expect = 0.0;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for j in 0..l {
                    expect += a.at(i, j) * x.at(j, c);
                    lo = lo.min(x.at(j, c));
                    hi = hi.max(x.at(j, c));
                }
                prop_assert!((z.at(i, c) - expect).abs() < 1e-12);
                prop_assert!(z.at(i, c) >= lo - 1e-12 && z.at(i, c) <= hi + 1e-12);
            }
        }
    }
}
