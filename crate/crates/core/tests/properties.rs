//! Property tests for the cross-module invariants.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use csi_vae::channel_model::{
    covariance_from_pas, sample_path_set, sqrt_factor, standard_complex_normal, steering_vector, AntennaArray,
    DEFAULT_GRID_POINTS,
};
use csi_vae::dataset::{generate, DatasetConfig, Domain};
use csi_vae::evalcluster::{agreement, kmeans};
use csi_vae::mmd::{mmd2_unbiased, KernelConfig};
use csi_vae::rng;
use csi_vae::spectral::{circulant_from_spectrum, circulant_spectrum_unclipped, dft_transform, DftMatrix};
use csi_vae::vae::{
    elbo_diag, elbo_identity, reparameterize, DecoderOutput, EncoderOutput, LinearGaussianToy, VarianceHead,
};

fn randn(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn gaussian(n: usize, d: usize, shift: f64, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| Distribution::<f64>::sample(&StandardNormal, r) + shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariances_are_hermitian_psd_toeplitz_with_trace_m(
        seed in any::<u64>(),
        order in 1usize..=5,
        m in prop::sample::select(vec![4usize, 8, 16, 32]),
        spread_deg in 0.5f64..10.0,
    ) {
        let mut r = rng::seeded(seed);
        let array = AntennaArray::new(m).unwrap();
        let paths = sample_path_set(order, spread_deg.to_radians(), &mut r).unwrap();
        let cov = covariance_from_pas(&array, &paths, DEFAULT_GRID_POINTS).unwrap();
        let c = cov.toeplitz();
        let trace: f64 = c.diagonal().iter().map(|z| z.re).sum();
        prop_assert!((trace - m as f64).abs() < 1e-6);
        prop_assert!((c - c.adjoint()).camax() < 1e-12);
        for i in 1..m {
            for j in 1..m {
                prop_assert!((c[(i, j)] - c[(i - 1, j - 1)]).norm() < 1e-12);
            }
        }
        prop_assert!(c.clone().symmetric_eigenvalues().min() > -1e-10 * m as f64);
    }

    #[test]
    fn pas_density_integrates_to_one(seed in any::<u64>(), order in 1usize..=5, spread_deg in 0.5f64..10.0) {
        let paths = sample_path_set(order, spread_deg.to_radians(), &mut rng::seeded(seed)).unwrap();
        // midpoint rule on a grid fine enough to resolve the narrowest spread
        let n = 1_000_000;
        let h = std::f64::consts::PI / n as f64;
        let total: f64 = (0..n).map(|i| paths.pas_density(-std::f64::consts::FRAC_PI_2 + (i as f64 + 0.5) * h) * h).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "integral {}", total);
    }

    #[test]
    fn steering_vector_is_unit_modulus_phasor(theta in -1.5707f64..1.5707, m in 1usize..40) {
        let a = steering_vector(&AntennaArray::new(m).unwrap(), theta);
        for (n, z) in a.iter().enumerate() {
            let expected = Complex64::from_polar(1.0, std::f64::consts::PI * n as f64 * theta.sin());
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            prop_assert!((z - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn dft_is_unitary(m in 1usize..=64) {
        let f = DftMatrix::new(m);
        let gram = f.matrix().adjoint() * f.matrix();
        prop_assert!((gram - DMatrix::<Complex64>::identity(m, m)).norm() < 1e-10);
    }

    #[test]
    fn circulant_spectrum_sums_to_trace(seed in any::<u64>(), m in 1usize..=40) {
        let mut r = rng::seeded(seed);
        let mut col: Vec<Complex64> = (0..m).map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect();
        col[0].im = 0.0;
        let c = DMatrix::from_fn(m, m, |i, j| if i >= j { col[i - j] } else { col[j - i].conj() });
        let trace: f64 = c.diagonal().iter().map(|z| z.re).sum();
        prop_assert!((circulant_spectrum_unclipped(&c).sum() - trace).abs() < 1e-8);
    }

    #[test]
    fn mmd_matches_brute_force(seed in any::<u64>(), n in 2usize..=5, m in 2usize..=5, s in 0.3f64..5.0) {
        let mut r = rng::seeded(seed);
        let x = gaussian(n, 3, 0.0, &mut r);
        let y = gaussian(m, 3, 0.5, &mut r);
        let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            (-(&a - &b).mapv(|v| v * v).sum() / (2.0 * s * s)).exp()
        };
        let mut xx = 0.0;
        for i in 0..n { for j in 0..n { if i != j { xx += k(x.row(i), x.row(j)); } } }
        let mut yy = 0.0;
        for i in 0..m { for j in 0..m { if i != j { yy += k(y.row(i), y.row(j)); } } }
        let mut xy = 0.0;
        for i in 0..n { for j in 0..m { xy += k(x.row(i), y.row(j)); } }
        let brute = xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64;
        let fast = mmd2_unbiased(x.view(), y.view(), &KernelConfig::explicit(s).unwrap()).unwrap();
        prop_assert!((fast - brute).abs() < 1e-14);
    }

    #[test]
    fn mmd_is_symmetric_and_unitarily_invariant(seed in any::<u64>(), d in 2usize..8) {
        let mut r = rng::seeded(seed);
        let x = gaussian(20, d, 0.0, &mut r);
        let y = gaussian(15, d, 0.3, &mut r);
        let kernel = KernelConfig::median();
        let base = mmd2_unbiased(x.view(), y.view(), &kernel).unwrap();
        prop_assert!((base - mmd2_unbiased(y.view(), x.view(), &kernel).unwrap()).abs() < 1e-12);
        let q = DMatrix::from_fn(d, d, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut r)).qr().q();
        let rotate = |a: &Array2<f64>| Array2::from_shape_fn(a.dim(), |(i, j)| (0..d).map(|k| a[[i, k]] * q[(j, k)]).sum());
        let rotated = mmd2_unbiased(rotate(&x).view(), rotate(&y).view(), &kernel).unwrap();
        prop_assert!((base - rotated).abs() < 1e-10);
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 4usize..60, k in 1usize..4) {
        let mut r = rng::seeded(seed);
        let points = gaussian(n, 3, 0.0, &mut r);
        let km = kmeans(points.view(), k.min(n), 10, &mut r).unwrap();
        prop_assert!(km.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0)));
    }

    #[test]
    fn two_class_agreement_is_at_least_half(assign in prop::collection::vec(0usize..2, 2..80), seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        // both classes present, as k = 2 requires
        let labels: Vec<u32> = (0..assign.len())
            .map(|i| match i { 0 => 1, 1 => 5, _ => if r.random::<bool>() { 1 } else { 5 } })
            .collect();
        let a = agreement(&assign, &labels).unwrap();
        prop_assert!((0.5..=1.0).contains(&a));
    }

    #[test]
    fn identity_elbo_is_diagonal_elbo_with_constant_variance(seed in any::<u64>(), m in 1usize..64, log_c in -8.0f64..8.0) {
        let mut r = rng::seeded(seed);
        let x: Vec<Complex64> = (0..m).map(|_| Complex64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))).collect();
        let mu = randn(2 * m, &mut r);
        let enc = EncoderOutput::new(randn(4, &mut r), randn(4, &mut r)).unwrap();
        let eps = randn(4, &mut r);
        let z = reparameterize(&enc, &eps);
        let a = elbo_identity(&x, &DecoderOutput::new(mu.clone(), VarianceHead::Identity(log_c)).unwrap(), &enc, &eps, &z).unwrap();
        let b = elbo_diag(&x, &DecoderOutput::new(mu, VarianceHead::Diagonal(vec![log_c; m])).unwrap(), &enc, &eps, &z).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs().max(1.0));
    }

    #[test]
    fn toy_elbo_never_exceeds_evidence(
        a_re in -2.0f64..2.0, a_im in -2.0f64..2.0, c in 0.2f64..3.0,
        x_re in -4.0f64..4.0, x_im in -4.0f64..4.0,
        dm in -2.0f64..2.0, ds in -2.0f64..2.0,
    ) {
        let toy = LinearGaussianToy { a: Complex64::new(a_re, a_im), c };
        let x = Complex64::new(x_re, x_im);
        let (m, s) = toy.posterior(x);
        // three-node Gauss-Hermite: exact for the quadratic-in-eps ELBO
        let nodes = [(-3f64.sqrt(), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
        let avg: f64 = nodes.iter().map(|&(e, w)| w * toy.elbo_sample(x, (m + dm, s + ds), e).unwrap()).sum();
        prop_assert!(avg <= toy.log_evidence(x) + 1e-3);
    }
}

#[test]
fn dft_entry_variances_match_an_exact_circulant_spectrum() {
    let m = 16;
    let mut r = rng::seeded(71);
    let spectrum = DVector::from_fn(m, |_, _| r.random_range(0.1..3.0));
    let c = circulant_from_spectrum(&spectrum);
    let factor = sqrt_factor(&c).unwrap();
    let n = 100_000;
    let mut power = vec![0.0; m];
    for _ in 0..n {
        let x = dft_transform(&(&factor * standard_complex_normal(m, &mut r)));
        for (p, v) in power.iter_mut().zip(x.iter()) {
            *p += v.norm_sqr() / n as f64;
        }
    }
    for (p, s) in power.iter().zip(spectrum.iter()) {
        assert!((p - s).abs() / s < 0.1, "{p} vs {s}");
    }
}

#[test]
fn datasets_are_pure_functions_of_their_config() {
    let config = DatasetConfig {
        num_antennas: 16,
        per_order_total: 30,
        per_order_train: 25,
        model_orders: vec![1, 3, 5],
        domain: Domain::Dft,
        seed: 72,
        angle_spread: 2f64.to_radians(),
        grid_points: DEFAULT_GRID_POINTS,
    };
    let (train, eval) = generate(&config).unwrap();
    assert_eq!(generate(&config).unwrap(), (train.clone(), eval.clone()));
    for k in [1u32, 3, 5] {
        assert_eq!(train.labels().iter().filter(|&&l| l == k).count(), 25);
        assert_eq!(eval.labels().iter().filter(|&&l| l == k).count(), 5);
    }

    // same streams in the antenna domain: the DFT preserves every row norm
    let (antenna, _) = generate(&DatasetConfig { domain: Domain::Antenna, ..config }).unwrap();
    for i in 0..train.len() {
        let norm = |row: &[f32]| row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm(train.row(i)) - norm(antenna.row(i))).abs() < 1e-6 * norm(antenna.row(i)).max(1.0));
    }
}
