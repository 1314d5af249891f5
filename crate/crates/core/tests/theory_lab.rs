use sdd_core::tensor::{gaussian, rms, rms_norm_vjp, svd, RngState};
use sdd_core::theory::*;
use sdd_core::Tensor;

fn orthogonal(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    svd(&gaussian(&[n, n], 0.0, 1.0, &mut rng)).unwrap().u
}

#[test]
fn decomposition_of_identity_and_diagonal() {
    let d = decompose_to_sdd(&Tensor::identity(5)).unwrap();
    assert!(d.alpha.iter().all(|&a| (a - 1.0).abs() < 1e-14));
    assert!(d.reconstruct().max_abs_diff(&Tensor::identity(5)) < 1e-14);
    let d = decompose_to_sdd(&Tensor::diag(&[3.0, 2.0, 1.0])).unwrap();
    for (a, e) in d.alpha.iter().zip([3.0, 2.0, 1.0]) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn decomposition_reconstructs_random_matrix() {
    let mut rng = RngState::new(3);
    let w = gaussian(&[64, 64], 0.0, 1.0 / 8.0, &mut rng);
    let d = decompose_to_sdd(&w).unwrap();
    assert!(d.reconstruct().max_abs_diff(&w) < 1e-9);
    assert!(d.u.matmul_tn(&d.u).unwrap().max_abs_diff(&Tensor::identity(64)) < 1e-10);
    assert!(d.alpha.windows(2).all(|p| p[0] >= p[1]) && d.alpha.iter().all(|&a| a >= 0.0));
}

#[test]
fn forward_error_is_exact_when_rms_is_one() {
    let mut rng = RngState::new(4);
    let w = gaussian(&[32, 32], 0.0, 1.0 / 32f64.sqrt(), &mut rng);
    let d = decompose_to_sdd(&w).unwrap();
    let x: Vec<f64> = rng.normal_vec(32);
    let r = rms(&x);
    let x = Tensor::new(vec![1, 32], x.iter().map(|v| v / r).collect()).unwrap();
    assert!(d.forward_errors(&x).unwrap()[0] < 1e-10);
}

#[test]
fn forward_error_matches_concentration_oracle() {
    // V is orthogonal, so RMS(Vx) = RMS(x) and the error is |1 − 1/RMS(x)|.
    let rng = RngState::new(5);
    let stats = forward_equivalence_error(48, 30, &rng).unwrap();
    for (t, e) in stats.values.iter().enumerate() {
        let x = rng.split(t as u64).normal_vec(48);
        let oracle = (1.0 - 1.0 / rms(&x)).abs();
        assert!((e - oracle).abs() < 1e-9, "trial {t}: {e} vs {oracle}");
    }
}

#[test]
fn forward_error_shrinks_with_width() {
    let rng = RngState::new(6);
    let small = forward_equivalence_error(16, 200, &rng).unwrap();
    let large = forward_equivalence_error(128, 200, &rng).unwrap();
    assert!(large.median < small.median);
}

#[test]
fn reverse_construction_with_orthogonal_v() {
    // Λ = I, so W = α ⊙ V and the error reduces to |RMS(x) − 1|.
    let v = orthogonal(24, 7);
    let mut rng = RngState::new(8);
    let alpha = rng.normal_vec(24);
    let w = reverse_construction(&alpha, &v).unwrap();
    let mut expected = v.clone();
    for (r, a) in alpha.iter().enumerate() {
        expected.row_mut(r).iter_mut().for_each(|e| *e *= a);
    }
    assert!(w.max_abs_diff(&expected) < 1e-12);
    let x = rng.normal_vec(24);
    let errs = reverse_errors(&w, &alpha, &v, &Tensor::new(vec![1, 24], x.clone()).unwrap()).unwrap();
    assert!((errs[0] - (rms(&x) - 1.0).abs()).abs() < 1e-12);
}

#[test]
fn reverse_error_shrinks_with_width() {
    let rng = RngState::new(9);
    let small = reverse_equivalence_error(16, 200, &rng).unwrap();
    let large = reverse_equivalence_error(128, 200, &rng).unwrap();
    assert!(large.median < small.median, "{} !< {}", large.median, small.median);
}

#[test]
fn rms_of_one_gaussian_is_half_normal() {
    // |x| for x ~ N(0,1): stddev √(1 − 2/π)
    let s = rms_concentration(1, 20_000, &RngState::new(10));
    let analytic = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
    assert!((s.stddev - analytic).abs() < 0.01, "{} vs {analytic}", s.stddev);
}

#[test]
fn rms_concentrates_at_large_width() {
    let s = rms_concentration(1024, 1000, &RngState::new(11));
    assert!((0.989..=1.009).contains(&s.mean), "{}", s.mean);
    assert!(s.stddev < 0.05);
    // chi concentration: sd ≈ 1/√(2n)
    assert!((s.stddev * (2.0 * 1024f64).sqrt() - 1.0).abs() < 0.1);
    let x = RngState::new(12).normal_vec(100);
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert!((rms(&doubled) - 2.0 * rms(&x)).abs() < 1e-15);
}

#[test]
fn ratio_is_inverse_rms_for_orthogonal_v_and_tangent_upstream() {
    let n = 32;
    let c = 0.3;
    let v = orthogonal(n, 13).scale(c).unwrap();
    let mut rng = RngState::new(14);
    let x = rng.normal_vec(n);
    let z = v.matmul(&Tensor::new(vec![n, 1], x.clone()).unwrap()).unwrap().into_data();
    let g = rng.normal_vec(n);
    let zz: f64 = z.iter().map(|a| a * a).sum();
    let zg: f64 = z.iter().zip(&g).map(|(a, b)| a * b).sum();
    let dy: Vec<f64> = g.iter().zip(&z).map(|(gi, zi)| gi - zi * zg / zz).collect();
    let ratio = sdd_gradient_ratio(&v, &x, &dy).unwrap();
    assert!((ratio - 1.0 / rms(&x)).abs() < 1e-12);
}

#[test]
fn gradient_norm_is_preserved_near_one() {
    let s = norm_preservation(256, 60, &RngState::new(15)).unwrap();
    assert!((s.mean - 1.0).abs() < 0.05, "{}", s.mean);
    assert!(s.fraction_within(0.8, 1.2) > 0.95);
}

#[test]
fn standard_layer_ratio_tracks_weight_scale() {
    let rng = RngState::new(16);
    let base = norm_preservation_fc(128, 20, 1.0, &rng).unwrap();
    let big = norm_preservation_fc(128, 20, 10.0, &rng).unwrap();
    assert!((big.mean / base.mean - 10.0).abs() < 1e-9);
}

#[test]
fn dv_is_inverse_homogeneous_in_v_scale() {
    let f = frobenius_scaling(64, &[0.5, 1.0, 2.0, 4.0], 10, &RngState::new(17)).unwrap();
    assert!((f.slope + 1.0).abs() < 1e-9, "{}", f.slope);
    let m: Vec<f64> = f.points.iter().map(|p| p.stats.mean).collect();
    assert!((m[2] / m[1] - 0.5).abs() < 0.5 * 0.05);
    for (p, q) in f.points.iter().zip(&f.points[1..]) {
        for (a, b) in p.stats.values.iter().zip(&q.stats.values) {
            assert!((a * p.scale - b * q.scale).abs() < 1e-10 * a * p.scale);
        }
    }
}

#[test]
fn projector_annihilates_radial_direction() {
    let z = RngState::new(18).normal_vec(64);
    let g = rms_norm_vjp(&z, &z).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-15), "{:?}", g.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn summaries_recompute_from_values() {
    let s = rms_concentration(8, 101, &RngState::new(19));
    let again = TrialStats::from_values(s.experiment.clone(), s.n, s.seed, s.values.clone());
    assert_eq!(s, again);
    let csv = to_csv(&[s]);
    assert!(csv.starts_with(CSV_HEADER));
}
