//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use csi_vae::channel_model::{
    covariance_from_pas, sample_path_set, sqrt_factor, standard_complex_normal, steering_vector, AntennaArray,
    PathSet, DEFAULT_ANGLE_SPREAD, DEFAULT_GRID_POINTS,
};
use csi_vae::dataset::{generate, generate_pools, DatasetConfig};
use csi_vae::evalcluster::cluster_report;
use csi_vae::mmd::{permutation_test, tpr_table, KernelConfig, TprConfig};
use csi_vae::nn::layer_suite;
use csi_vae::rng;
use csi_vae::vae::{
    elbo_diag, elbo_identity, gradcheck_suite, latent_means, reparameterize, train, DecoderOutput, EncoderOutput,
    LinearGaussianToy, TrainConfig, VarianceHead, Variant,
};

type Check = Result<(bool, String), String>;

/// `ACCEPTANCE_ONLY=1,4` runs a subset; unset runs everything.
fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim() == id.to_string()),
        Err(_) => true,
    }
}

/// `None` when the criterion was filtered out.
fn criterion(id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> Option<bool> {
    if !selected(id) {
        println!("SKIP {id} {name}");
        return None;
    }
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed > budget {
        passed = false;
        detail.push_str(&format!("; over the {} s budget", budget.as_secs()));
    }
    println!(
        "{} {id} {name}: {detail} [{:.1} s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    Some(passed)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn gradient_oracle() -> Check {
    let mut worst = (0.0, String::new());
    let mut failures = Vec::new();
    let mut reports: Vec<(String, _)> = layer_suite(11).map_err(err)?.into_iter().map(|(n, r)| (n.to_string(), r)).collect();
    reports.extend(gradcheck_suite(11, false).map_err(err)?);
    for (name, report) in &reports {
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, name.clone());
        }
        if !report.passed(GRAD_TOLERANCE) {
            failures.push(name.clone());
        }
    }
    Ok((
        failures.is_empty(),
        format!(
            "{} checks, worst rel error {:.2e} ({}), failing: {:?}",
            reports.len(),
            worst.0,
            worst.1,
            failures
        ),
    ))
}

fn randn(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn reduction() -> Check {
    let mut r = rng::seeded(12);
    let mut max_diff: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    for _ in 0..1000 {
        let m = r.random_range(1..=64);
        let x: Vec<Complex64> = (0..m).map(|_| Complex64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))).collect();
        let mu = randn(2 * m, &mut r);
        let log_c = r.random_range(-4.0..4.0);
        let enc = EncoderOutput::new(randn(4, &mut r), randn(4, &mut r)).map_err(err)?;
        let eps = randn(4, &mut r);
        let z = reparameterize(&enc, &eps);
        let id = DecoderOutput::new(mu.clone(), VarianceHead::Identity(log_c)).map_err(err)?;
        let dg = DecoderOutput::new(mu, VarianceHead::Diagonal(vec![log_c; m])).map_err(err)?;
        let a = elbo_identity(&x, &id, &enc, &eps, &z).map_err(err)?.total;
        let b = elbo_diag(&x, &dg, &enc, &eps, &z).map_err(err)?.total;
        max_diff = max_diff.max((a - b).abs());
        max_rel = max_rel.max((a - b).abs() / a.abs().max(1.0));
        max_mag = max_mag.max(a.abs());
    }
    // totals reach ~1e4, where one ulp is ~2e-12: the bound is read relative to max(1, |elbo|)
    Ok((
        max_rel <= 1e-12,
        format!("1000 instances, max |identity - diagonal| = {max_diff:.2e}, relative {max_rel:.2e}, max |elbo| {max_mag:.1e}"),
    ))
}

fn channel_properties() -> Check {
    let m = 32;
    let array = AntennaArray::new(m).map_err(err)?;
    let mut r = rng::seeded(13);
    let mut worst_trace: f64 = 0.0;
    let mut worst_herm: f64 = 0.0;
    let mut worst_toeplitz: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for i in 0..100 {
        let paths = sample_path_set(1 + i % 5, DEFAULT_ANGLE_SPREAD, &mut r).map_err(err)?;
        let cov = covariance_from_pas(&array, &paths, DEFAULT_GRID_POINTS).map_err(err)?;
        let c = cov.toeplitz();
        let trace: f64 = c.diagonal().iter().map(|z| z.re).sum();
        worst_trace = worst_trace.max((trace - m as f64).abs());
        worst_herm = worst_herm.max((c - c.adjoint()).camax());
        for a in 1..m {
            for b in 1..m {
                worst_toeplitz = worst_toeplitz.max((c[(a, b)] - c[(a - 1, b - 1)]).norm());
            }
        }
        min_eig = min_eig.min(c.clone().symmetric_eigenvalues().min());
    }
    let structural = worst_trace < 1e-6 && worst_herm < 1e-12 && worst_toeplitz < 1e-12 && min_eig > -1e-9;

    let theta = 0.4;
    let point = PathSet::new(vec![1.0], vec![theta], 1e-6).map_err(err)?;
    let cov = covariance_from_pas(&array, &point, DEFAULT_GRID_POINTS).map_err(err)?;
    let a = steering_vector(&array, theta);
    let rank_one = &a * a.adjoint();
    let point_err = (cov.toeplitz() - &rank_one).norm() / rank_one.norm();

    let paths = sample_path_set(3, DEFAULT_ANGLE_SPREAD, &mut r).map_err(err)?;
    let cov = covariance_from_pas(&array, &paths, DEFAULT_GRID_POINTS).map_err(err)?;
    let factor = sqrt_factor(cov.toeplitz()).map_err(err)?;
    let n = 100_000;
    let mut acc = DMatrix::<Complex64>::zeros(m, m);
    for _ in 0..n {
        let h = &factor * standard_complex_normal(m, &mut r);
        acc.gerc(Complex64::new(1.0, 0.0), &h, &h, Complex64::new(1.0, 0.0));
    }
    let mc_err = (acc / Complex64::new(n as f64, 0.0) - cov.toeplitz()).norm();

    Ok((
        structural && point_err < 1e-2 && mc_err < 0.05 * m as f64,
        format!(
            "|trace - M| {worst_trace:.1e}, hermitian {worst_herm:.1e}, toeplitz {worst_toeplitz:.1e}, \
             min eig {min_eig:.1e}; point limit rel err {point_err:.1e}; MC Frobenius err {mc_err:.3} (bound {:.2})",
            0.05 * m as f64
        ),
    ))
}

fn gaussian(n: usize, d: usize, r: &mut impl Rng) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((n, d), |_| StandardNormal.sample(r))
}

fn mmd_structure() -> Check {
    let trials = 200;
    let mut rejections = 0;
    for t in 0..trials {
        let mut r = rng::stream(14, &[t]);
        let x = gaussian(200, 4, &mut r);
        let y = gaussian(200, 4, &mut r);
        rejections += permutation_test(x.view(), y.view(), &KernelConfig::median(), 100, 0.05, &mut r)
            .map_err(err)?
            .reject as usize;
    }
    let size = rejections as f64 / trials as f64;

    let config = TprConfig::desk_scale(15);
    let pools = generate_pools(32, &[1, 2, 3, 4, 5], 2 * config.subsample, DEFAULT_ANGLE_SPREAD, 15).map_err(err)?;
    let table = tpr_table(&pools, &config).map_err(err)?;
    let row: Vec<f64> = (2..=5).map(|k| table.get(1, k).unwrap_or(f64::NAN)).collect();
    let monotone = row.windows(2).all(|w| w[0] <= w[1]);
    let extreme = table.get(1, 5).unwrap_or(f64::NAN);
    let diagonal: Vec<f64> = (1..=5).map(|k| table.get(k, k).unwrap_or(f64::NAN)).collect();
    Ok((
        (0.01..=0.10).contains(&size) && monotone && extreme >= 0.85,
        format!("null rejection rate {size:.3}; row 1 over 2..5 paths {row:?}; (1,5) = {extreme:.2}; diagonal {diagonal:?}"),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn clustering() -> Check {
    let (mut diag, mut ident, mut raw) = (Vec::new(), Vec::new(), Vec::new());
    let mut detail = Vec::new();
    for seed in [1, 2, 3] {
        let (train_set, eval_set) = generate(&DatasetConfig::desk_scale(seed)).map_err(err)?;
        let score = |points: ndarray::ArrayView2<f64>| {
            cluster_report(points, eval_set.labels(), &mut rng::stream(seed, &[3])).map(|r| r.agreement)
        };
        raw.push(score(eval_set.to_matrix().view()).map_err(err)?);
        for (variant, out) in [(Variant::Diagonal, &mut diag), (Variant::Identity, &mut ident)] {
            let (model, history) = train(&train_set, TrainConfig::new(variant, seed)).map_err(err)?;
            let latents = latent_means(&model, &eval_set).map_err(err)?;
            out.push(score(latents.view()).map_err(err)?);
            detail.push(format!("seed {seed} {variant}: {} epochs", history.epochs.len()));
        }
    }
    let (d, i, r) = (median(diag.clone()), median(ident.clone()), median(raw.clone()));
    Ok((
        d >= 0.9 && d > i && d > r,
        format!("median agreement diagonal {d:.3} {diag:.3?}, identity {i:.3} {ident:.3?}, raw {r:.3} {raw:.3?}; {}", detail.join(", ")),
    ))
}

// Probabilists' Gauss-Hermite rule with three nodes; exact for the
// quadratic-in-eps single-sample ELBO of the toy model.
const HERMITE: [(f64, f64); 3] = [(-1.7320508075688772, 1.0 / 6.0), (0.0, 2.0 / 3.0), (1.7320508075688772, 1.0 / 6.0)];

fn elbo_bound() -> Check {
    let mut r = rng::seeded(16);
    let mut max_excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let toy = LinearGaussianToy {
            a: Complex64::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)),
            c: r.random_range(0.2..3.0),
        };
        let z: f64 = StandardNormal.sample(&mut r);
        let noise = Complex64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)) * (toy.c / 2.0).sqrt();
        let x = toy.a * z + noise;
        let evidence = toy.log_evidence(x);
        let exact = toy.posterior(x);
        let perturbed = (exact.0 + r.random_range(-1.0..1.0), exact.1 + r.random_range(-1.0..1.0));
        for q in [exact, perturbed] {
            let mut avg = 0.0;
            for (eps, w) in HERMITE {
                avg += w * toy.elbo_sample(x, q, eps).map_err(err)?;
            }
            max_excess = max_excess.max(avg - evidence);
        }
    }
    Ok((max_excess <= 1e-3, format!("100 instances, max(averaged ELBO - log p(x)) = {max_excess:.2e}")))
}

fn determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_csi-vae");
    let config = r#"
[dataset]
num_antennas = 32
per_order_total = 300
per_order_train = 250
model_orders = [1, 5]
domain = "dft"
seed = 21

[train]
variant = "diagonal"
seed = 22
epochs = 2
"#;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, config).map_err(err)?;
        for sub in ["generate", "train"] {
            let status = Command::new(bin)
                .args([sub, "--threads", "1", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
                .output()
                .map_err(err)?;
            if !status.status.success() {
                return Err(format!("{sub} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        let files: Vec<Vec<u8>> = ["train.bin", "eval.bin", "checkpoint.bin", "history.csv"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    let bytes: usize = outputs[0].iter().map(Vec::len).sum();
    Ok((same, format!("generate + single-threaded train, {bytes} bytes compared, identical: {same}")))
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        criterion(1, "gradient oracle", min(1), gradient_oracle),
        criterion(2, "identity/diagonal ELBO reduction", min(1), reduction),
        criterion(3, "channel model properties", min(2), channel_properties),
        criterion(4, "MMD calibration and TPR structure", min(10), mmd_structure),
        criterion(5, "latent clustering by model order", min(30), clustering),
        criterion(6, "ELBO bound on a linear-Gaussian model", min(1), elbo_bound),
        criterion(7, "determinism", min(5), determinism),
    ];
    let run: Vec<bool> = results.iter().flatten().copied().collect();
    let failed = run.iter().filter(|&&p| !p).count();
    let skipped = results.len() - run.len();
    if skipped > 0 {
        println!("{} of {} criteria passed, {skipped} skipped", run.len() - failed, run.len());
    } else {
        println!("{} of {} criteria passed", run.len() - failed, run.len());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
