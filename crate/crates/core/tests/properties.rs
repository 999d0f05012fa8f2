//! Randomized invariants.

use eigenstream_core::diagnostics::spectrum;
use eigenstream_core::eigenupdate::{convergence_error, EigenState, EigenTriplet};
use eigenstream_core::linalg::{norm, svd, Matrix, Vector};
use eigenstream_core::mnist::{
    encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, BatchPlan, IdxImages,
};
use eigenstream_core::network::{Activation, Mlp};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

/// A stream of `(x, δ)` pairs with fixed dimensions.
fn stream(a: usize, b: usize, len: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    prop::collection::vec(
        (prop::collection::vec(-1.0f64..1.0, b), prop::collection::vec(-1.0f64..1.0, a)),
        1..=len,
    )
}

fn finalize_stream(samples: &[(Vec<f64>, Vec<f64>)], a: usize, b: usize, c: f64) -> Option<EigenTriplet> {
    let mut st = EigenState::new(a, b);
    for (x, d) in samples {
        let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
        st.ingest(x, &scaled).unwrap();
    }
    st.finalize().ok()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / (norm(u) * norm(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_invariants(m in matrix(12, 12)) {
        let dec = svd(&m).unwrap();
        prop_assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(dec.s.iter().all(|&s| s >= 0.0));
        for (u, v) in dec.u.iter().zip(&dec.v) {
            prop_assert!((norm(u) - 1.0).abs() < 1e-10);
            prop_assert!((norm(v) - 1.0).abs() < 1e-10);
        }
        let scale = m.frobenius_norm();
        if scale > 0.0 {
            let mut r = dec.reconstruct(m.rows(), m.cols());
            r.add_scaled(-1.0, &m).unwrap();
            prop_assert!(r.frobenius_norm() / scale < 1e-8);
        }
    }

    #[test]
    fn spectrum_is_a_distribution(m in matrix(10, 10)) {
        prop_assume!(m.frobenius_norm() > 1e-6);
        let rep = spectrum(0, &m).unwrap();
        let total: f64 = rep.energies.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!(rep.cumulative.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!((rep.cumulative.last().unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn batch_order_is_a_seeded_permutation(count in 1usize..500, n in 0u32..10, seed: u64, epoch in 0u64..5) {
        let plan = BatchPlan::new(1 << n, seed).unwrap();
        let order = plan.order(count, epoch);
        prop_assert_eq!(&order, &plan.order(count, epoch));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..count).collect::<Vec<_>>());
        prop_assert_eq!(plan.batches_per_epoch(count), count.div_ceil(1 << n));
    }

    #[test]
    fn idx_round_trip(count in 1usize..6, rows in 1usize..6, cols in 1usize..6, seed: u64) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| ((seed >> i) % 10) as u8).collect();
        let imgs = IdxImages { count, rows, cols, pixels };
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&imgs)).unwrap(), imgs);
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn finalized_vectors_are_unit(samples in stream(5, 7, 30)) {
        if let Some(t) = finalize_stream(&samples, 5, 7, 1.0) {
            prop_assert!((norm(&t.x_hat) - 1.0).abs() < 1e-12);
            prop_assert!((norm(&t.d_hat) - 1.0).abs() < 1e-12);
            prop_assert!(t.sigma_sq.is_finite());
        }
    }

    #[test]
    fn ingest_is_scale_consistent(samples in stream(4, 6, 25), c in 0.01f64..100.0) {
        let base = finalize_stream(&samples, 4, 6, 1.0);
        let scaled = finalize_stream(&samples, 4, 6, c);
        prop_assert_eq!(base.is_some(), scaled.is_some());
        if let (Some(p), Some(q)) = (base, scaled) {
            prop_assert!(1.0 - cosine(&p.x_hat, &q.x_hat) < 1e-10);
            prop_assert!(1.0 - cosine(&p.d_hat, &q.d_hat) < 1e-10);
            prop_assert!((q.sigma_sq - c * p.sigma_sq).abs() <= 1e-10 * (c * p.sigma_sq).abs().max(1e-12));
        }
    }

    #[test]
    fn error_ignores_joint_negation(m in matrix(6, 6), seed in prop::collection::vec(-1.0f64..1.0, 12)) {
        let dec = svd(&m).unwrap();
        prop_assume!(dec.rank() > 0);
        let (a, b) = (m.rows(), m.cols());
        let x = Vector::new(seed[..b].to_vec());
        let d = Vector::new(seed[6..6 + a].to_vec());
        prop_assume!(norm(&x) > 1e-3 && norm(&d) > 1e-3);
        let est = EigenTriplet { x_hat: x.normalized().unwrap(), d_hat: d.normalized().unwrap(), sigma_sq: dec.s[0] };
        let mut neg = est.clone();
        neg.x_hat.scale(-1.0);
        neg.d_hat.scale(-1.0);
        let e1 = convergence_error(&est, &dec).unwrap();
        let e2 = convergence_error(&neg, &dec).unwrap();
        prop_assert!((e1.eps_x - e2.eps_x).abs() < 1e-15);
        prop_assert!((e1.eps_d - e2.eps_d).abs() < 1e-15);
        prop_assert!((e1.eps_sigma - e2.eps_sigma).abs() < 1e-15);
    }

    #[test]
    fn rank1_update_is_invertible(seed: u64, scale in -5.0f64..5.0, i in 0usize..4) {
        let mut net = Mlp::init(&[6, 5, 4], Activation::Sigmoid, seed).unwrap();
        let orig = net.clone();
        let u: Vec<f64> = (0..5).map(|k| ((k + i) as f64).sin()).collect();
        let v: Vec<f64> = (0..6).map(|k| ((k * i) as f64).cos()).collect();
        net.apply_rank1(0, scale, &u, &v).unwrap();
        net.apply_rank1(0, -scale, &u, &v).unwrap();
        for (p, q) in net.weights(0).data().iter().zip(orig.weights(0).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one(seed: u64, x in prop::collection::vec(0.0f64..1.0, 8)) {
        for act in [Activation::Relu, Activation::Sigmoid] {
            let net = Mlp::init(&[8, 6, 10], act, seed).unwrap();
            let (_, p) = net.forward(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&q| q >= 0.0));
        }
    }
}
