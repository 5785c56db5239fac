use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nq_core::admm::{admm_factor_solve, augmented_lagrangian, balanced_svd_init, svid, AdmmState};
use nq_core::balance::{balance_and_extract_scales, DEFAULT_SCALE_FLOOR};
use nq_core::bpw::{binomial, bpw_nanoquant, ceil_log2, rank_for_target_bpw};
use nq_core::linalg::{cholesky_solve, top_singular_pair};
use nq_core::packing::{pack_signs, unpack_signs};
use nq_core::precond::{quantile, shrink_diagonal, ChannelStats, Preconditioner};
use nq_core::DenseMatrix;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_round_trip(rows in 1usize..9, col_idx in 0usize..6, seed: u64) {
        let cols = [1, 31, 32, 33, 64, 100][col_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DenseMatrix::from_fn(rows, cols, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let packed = pack_signs(&s).unwrap();
        prop_assert_eq!(packed.words().len(), rows * cols.div_ceil(32));
        prop_assert_eq!(unpack_signs(&packed).unwrap(), s);
    }

    #[test]
    fn cholesky_residual(n in 1usize..12, rhs in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = gaussian(n + 3, n, &mut rng);
        let mut a = b.tr_matmul(&b).unwrap();
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        let y = gaussian(n, rhs, &mut rng);
        let x = cholesky_solve(&a, &y).unwrap();
        let resid = a.matmul(&x).unwrap().sub(&y).unwrap().frobenius_norm();
        prop_assert!(resid <= 1e-8 * (1.0 + y.frobenius_norm()), "residual {}", resid);
    }

    #[test]
    fn balancing_invariants(n in 1usize..20, m in 1usize..20, r in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_u = gaussian(n, r, &mut rng).scale(rng.random_range(0.01..100.0));
        let p_v = gaussian(m, r, &mut rng);
        let pre = Preconditioner {
            diag_in: (0..m).map(|_| rng.random_range(0.1..3.0)).collect(),
            diag_out: (0..n).map(|_| rng.random_range(0.1..3.0)).collect(),
            gamma: 0.2,
            tau_max: 3.0,
        };
        let b = balance_and_extract_scales(&p_u, &p_v, &pre, DEFAULT_SCALE_FLOOR).unwrap();
        prop_assert!(rel(b.latent_u.frobenius_norm(), b.latent_v.frobenius_norm()) <= 1e-12);
        let want = pre.remove(&p_u.matmul_tr(&p_v).unwrap()).unwrap();
        let got = b.latent_u.matmul_tr(&b.latent_v).unwrap();
        prop_assert!(got.sub(&want).unwrap().frobenius_norm() <= 1e-10 * want.frobenius_norm());
        for (s, row) in b.s1.iter().zip(0..n) {
            let mean = b.latent_u.row(row).iter().map(|v| v.abs()).sum::<f64>() / r as f64;
            prop_assert!(*s >= DEFAULT_SCALE_FLOOR && rel(*s, mean.max(DEFAULT_SCALE_FLOOR)) <= 1e-12);
        }
    }

    #[test]
    fn preconditioner_round_trip(n in 1usize..10, m in 1usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(n, m, &mut rng);
        let pre = Preconditioner {
            diag_in: (0..m).map(|_| rng.random_range(0.1..3.0)).collect(),
            diag_out: (0..n).map(|_| rng.random_range(0.1..3.0)).collect(),
            gamma: 0.0,
            tau_max: 3.0,
        };
        let back = pre.remove(&pre.apply(&w).unwrap()).unwrap();
        prop_assert!(back.sub(&w).unwrap().frobenius_norm() <= 1e-12 * w.frobenius_norm());
    }

    #[test]
    fn stats_are_batch_order_invariant(width in 1usize..8, batches in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<DenseMatrix> = (0..batches)
            .map(|_| gaussian(rng.random_range(1..10), width, &mut rng))
            .collect();
        let mut forward = ChannelStats::new(width);
        for b in &data {
            forward.accumulate(b, 0.9).unwrap();
        }
        let mut backward = ChannelStats::new(width);
        for b in data.iter().rev() {
            backward.accumulate(b, 0.9).unwrap();
        }
        let mut merged = ChannelStats::new(width);
        for b in &data {
            let mut part = ChannelStats::new(width);
            part.accumulate(b, 0.9).unwrap();
            merged.merge(&part).unwrap();
        }
        for other in [&backward, &merged] {
            prop_assert_eq!(other.tau, forward.tau);
            prop_assert_eq!(other.sample_count, forward.sample_count);
            for (a, b) in other.sum_squares.iter().zip(&forward.sum_squares) {
                prop_assert!(rel(*a, *b) <= 1e-12);
            }
        }
        prop_assert!(forward.clipped_rms().unwrap().iter().all(|d| *d <= forward.tau));
    }

    #[test]
    fn shrinkage_contracts_toward_mean(raw in prop::collection::vec(0.01f64..10.0, 1..20), gamma in 0.0f64..=1.0) {
        let out = shrink_diagonal(&raw, gamma, 1e-8);
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(0.0, f64::max);
        let out_mean = out.iter().sum::<f64>() / out.len() as f64;
        prop_assert!(rel(out_mean, mean) <= 1e-12);
        for (o, r) in out.iter().zip(&raw) {
            prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            prop_assert!((o - mean).abs() <= (r - mean).abs() + 1e-12);
        }
    }

    #[test]
    fn quantile_matches_sorted_interpolation(mut values in prop::collection::vec(-5.0f64..5.0, 1..30), p in 0.0f64..=1.0) {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let want = sorted[lo] * (1.0 - (pos - lo as f64)) + sorted[hi] * (pos - lo as f64);
        let got = quantile(&mut values, p);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn svid_beats_random_candidates(n in 1usize..8, m in 1usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gaussian(n, m, &mut rng);
        let best = p.sub(&svid(&p).unwrap()).unwrap().frobenius_norm();
        for _ in 0..20 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
            let cand = DenseMatrix::from_fn(n, m, |i, j| p[(i, j)].signum() * a[i] * b[j]);
            prop_assert!(best <= p.sub(&cand).unwrap().frobenius_norm() + 1e-9);
        }
    }

    #[test]
    fn factor_solve_is_a_minimizer(n in 1usize..8, m in 1usize..8, r in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(n, m, &mut rng);
        let fixed = gaussian(m, r, &mut rng);
        let z = gaussian(n, r, &mut rng);
        let l = gaussian(n, r, &mut rng).scale(0.3);
        let (rho, ridge) = (rng.random_range(0.01..5.0), 1e-4);
        let objective = |x: &DenseMatrix| {
            let fit = w.sub(&x.matmul_tr(&fixed).unwrap()).unwrap().frobenius_norm_sq();
            let mut prox = x.sub(&z).unwrap();
            prox.axpy(1.0, &l).unwrap();
            0.5 * fit + 0.5 * ridge * x.frobenius_norm_sq() + 0.5 * rho * prox.frobenius_norm_sq()
        };
        let x = admm_factor_solve(&w, &fixed, &z, &l, rho, ridge).unwrap();
        let base = objective(&x);
        for _ in 0..10 {
            let mut y = x.clone();
            y.axpy(1e-3, &gaussian(n, r, &mut rng)).unwrap();
            prop_assert!(base <= objective(&y) + 1e-12 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn lagrangian_matches_completed_square(n in 1usize..8, m in 1usize..8, r in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(n, m, &mut rng);
        let state = AdmmState {
            u: gaussian(n, r, &mut rng),
            v: gaussian(m, r, &mut rng),
            z_u: gaussian(n, r, &mut rng),
            z_v: gaussian(m, r, &mut rng),
            l_u: gaussian(n, r, &mut rng),
            l_v: gaussian(m, r, &mut rng),
            rho: rng.random_range(0.01..4.0),
            iteration: 0,
            lagrangian_trace: Vec::new(),
            primal_residual: 0.0,
            converged: false,
        };
        let ridge = 1e-3;
        // ρ⟨L, X−Z⟩ + ρ/2‖X−Z‖² = ρ/2‖X−Z+L‖² − ρ/2‖L‖², fit written out entrywise
        let mut fit = 0.0;
        for i in 0..n {
            for j in 0..m {
                let uv: f64 = (0..r).map(|k| state.u[(i, k)] * state.v[(j, k)]).sum();
                fit += (w[(i, j)] - uv).powi(2);
            }
        }
        let mut want = 0.5 * fit
            + 0.5 * ridge * (state.u.frobenius_norm_sq() + state.v.frobenius_norm_sq());
        for (x, z, l) in [(&state.u, &state.z_u, &state.l_u), (&state.v, &state.z_v, &state.l_v)] {
            let mut shifted = x.sub(z).unwrap();
            shifted.axpy(1.0, l).unwrap();
            want += 0.5 * state.rho * (shifted.frobenius_norm_sq() - l.frobenius_norm_sq());
        }
        let got = augmented_lagrangian(&state, &w, ridge).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
    }

    #[test]
    fn rank_for_target_within_quantum(n in 16usize..4096, m in 16usize..4096, t in 0.3f64..4.0) {
        if let Ok(r) = rank_for_target_bpw(n, m, t) {
            prop_assert!(r >= 1 && r <= n.min(m));
            let quantum = (n + m) as f64 / (n * m) as f64;
            let unclamped = t * (n * m) as f64 / (n + m) as f64 - 16.0;
            if unclamped >= 1.0 && unclamped <= n.min(m) as f64 {
                prop_assert!((bpw_nanoquant(n, m, r) - t).abs() <= 0.5 * quantum + 1e-12);
            }
        }
    }
}

#[test]
fn power_iteration_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, m) in [(16, 5), (32, 32), (5, 16)] {
        for _ in 0..20 {
            let a = gaussian(n, m, &mut rng);
            let svd = to_na(&a).svd(true, true);
            let (idx, sigma) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (i, s)| if *s > acc.1 { (i, *s) } else { acc });
            let pair = top_singular_pair(&a, 5000, 1e-14).unwrap();
            assert!(rel(pair.sigma, sigma) <= 1e-8, "{} vs {sigma}", pair.sigma);
            let u = svd.u.as_ref().unwrap().column(idx);
            let dot: f64 = pair.left.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() >= 1.0 - 1e-6, "left vector alignment {dot}");
        }
    }
}

#[test]
fn power_iteration_on_nonnegative_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..20), rng.random_range(1..20));
        let a = gaussian(n, m, &mut rng).map(f64::abs);
        let pair = top_singular_pair(&a, 2000, 1e-14).unwrap();
        assert!(pair.left.iter().chain(&pair.right).all(|v| *v >= 0.0));
    }
}

#[test]
fn svd_init_error_falls_with_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let w = gaussian(24, 18, &mut rng);
        let sv = to_na(&w).singular_values();
        let mut sorted: Vec<f64> = sv.iter().cloned().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut last = f64::INFINITY;
        for r in 1..=18 {
            let (u, v) = balanced_svd_init(&w, r, 0).unwrap();
            let err = w.sub(&u.matmul_tr(&v).unwrap()).unwrap().frobenius_norm();
            let eckart_young = sorted[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!(err <= last + 1e-9);
            assert!((err - eckart_young).abs() <= 1e-6 * w.frobenius_norm(), "r={r}: {err} vs {eckart_young}");
            last = err;
        }
    }
}

#[test]
fn binomial_and_log_against_brute_force() {
    for m in 1..=16usize {
        for k in 0..=m {
            let count = (0u32..1 << m).filter(|mask| mask.count_ones() as usize == k).count() as u128;
            assert_eq!(binomial(m, k), count, "C({m},{k})");
            let mut bits = 0;
            while (1u128 << bits) < count {
                bits += 1;
            }
            assert_eq!(ceil_log2(count), bits, "log2 C({m},{k})");
        }
    }
}
