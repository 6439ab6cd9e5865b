//! Conditionally Gaussian channels for a half-wavelength uniform linear array.
//!
//! A channel is drawn in two stages: a multipath description ([`PathSet`]) is
//! sampled first, its covariance is formed by integrating the steering-vector
//! outer product against the power angular spectrum, and finally one
//! zero-mean circularly-symmetric Gaussian vector is drawn with that
//! covariance.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spectral;
use crate::{Error, Result};

/// Default per-path angular spread (2 degrees, standard deviation).
pub const DEFAULT_ANGLE_SPREAD: f64 = 2.0 * PI / 180.0;

/// Default number of quadrature points for the covariance integral.
pub const DEFAULT_GRID_POINTS: usize = 3600;

/// Smallest accepted quadrature grid.
pub const MIN_GRID_POINTS: usize = 256;

/// A uniform linear array with half-wavelength element spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AntennaArray {
    num_antennas: usize,
}

impl AntennaArray {
    /// Element spacing in wavelengths.
    pub const SPACING: f64 = 0.5;

    pub fn new(num_antennas: usize) -> Result<Self> {
        if num_antennas == 0 {
            return Err(Error::Config("array needs at least one antenna".into()));
        }
        Ok(Self { num_antennas })
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }
}

/// Multipath description: per-path powers, arrival angles, and a common
/// per-path Laplacian angular spread.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    gains: Vec<f64>,
    angles: Vec<f64>,
    angle_spread: f64,
}

impl PathSet {
    /// Validates and builds a path set. Gains must be nonnegative and sum to
    /// one, angles must lie in `[-pi/2, pi/2]`.
    pub fn new(gains: Vec<f64>, angles: Vec<f64>, angle_spread: f64) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::Config("path set needs at least one path".into()));
        }
        if gains.len() != angles.len() {
            return Err(Error::Config(format!(
                "{} gains but {} angles",
                gains.len(),
                angles.len()
            )));
        }
        if gains.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("path gains must be finite and nonnegative".into()));
        }
        let total: f64 = gains.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("path gains sum to {total}, not 1")));
        }
        if angles.iter().any(|a| !(-FRAC_PI_2..=FRAC_PI_2).contains(a)) {
            return Err(Error::Config("path angles must lie in [-pi/2, pi/2]".into()));
        }
        if !(angle_spread > 0.0 && angle_spread.is_finite()) {
            return Err(Error::Config("angle spread must be positive".into()));
        }
        Ok(Self {
            gains,
            angles,
            angle_spread,
        })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angle_spread(&self) -> f64 {
        self.angle_spread
    }

    /// Number of paths, i.e. the model order.
    pub fn order(&self) -> usize {
        self.gains.len()
    }

    // Laplacian scale parameter; the spread is the standard deviation.
    fn laplace_scale(&self) -> f64 {
        self.angle_spread / std::f64::consts::SQRT_2
    }

    /// Power angular spectrum at `theta`: a gain-weighted mixture of
    /// Laplacian densities, each truncated to `[-pi/2, pi/2]` and renormalized
    /// to unit mass.
    pub fn pas_density(&self, theta: f64) -> f64 {
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&theta) {
            return 0.0;
        }
        let b = self.laplace_scale();
        self.gains
            .iter()
            .zip(&self.angles)
            .map(|(&gain, &center)| {
                gain * (-(theta - center).abs() / b).exp() / (2.0 * b * truncated_mass(center, b))
            })
            .sum()
    }
}

// Mass of a Laplace(center, b) density inside [-pi/2, pi/2].
fn truncated_mass(center: f64, b: f64) -> f64 {
    1.0 - 0.5 * (-(FRAC_PI_2 - center) / b).exp() - 0.5 * (-(center + FRAC_PI_2) / b).exp()
}

/// Toeplitz channel covariance together with its circulant spectrum.
#[derive(Debug, Clone)]
pub struct ChannelCovariance {
    toeplitz: DMatrix<Complex64>,
    first_column: DVector<Complex64>,
    circ_spectrum: DVector<f64>,
}

impl ChannelCovariance {
    /// Builds the Hermitian Toeplitz matrix whose first column is `first_column`.
    pub fn from_first_column(first_column: DVector<Complex64>) -> Self {
        let m = first_column.len();
        let toeplitz = DMatrix::from_fn(m, m, |i, j| {
            if i >= j {
                first_column[i - j]
            } else {
                first_column[j - i].conj()
            }
        });
        let circ_spectrum = spectral::circulant_approx(&toeplitz);
        Self {
            toeplitz,
            first_column,
            circ_spectrum,
        }
    }

    pub fn toeplitz(&self) -> &DMatrix<Complex64> {
        &self.toeplitz
    }

    pub fn first_column(&self) -> &DVector<Complex64> {
        &self.first_column
    }

    pub fn circ_spectrum(&self) -> &DVector<f64> {
        &self.circ_spectrum
    }

    pub fn dim(&self) -> usize {
        self.first_column.len()
    }
}

/// One channel realization with its model order label.
#[derive(Debug, Clone)]
pub struct ChannelSample {
    pub h: DVector<Complex64>,
    pub label: usize,
    pub path_set_id: u64,
}

/// Array response to a plane wave from `theta`: entry `m` is
/// `exp(i pi m sin(theta))`.
pub fn steering_vector(array: &AntennaArray, theta: f64) -> DVector<Complex64> {
    let phase = PI * theta.sin();
    DVector::from_fn(array.num_antennas(), |m, _| {
        Complex64::from_polar(1.0, phase * m as f64)
    })
}

/// Quadrature of `C = integral g(theta) a(theta) a(theta)^H dtheta` over
/// `[-pi/2, pi/2]`.
///
/// Each path is integrated on its own midpoint rule, split at the path
/// center so the Laplacian cusp falls on a cell boundary, and its discrete
/// weights are renormalized to the path gain. A path whose spread is below
/// the grid resolution degenerates to a point mass at its exact angle. Only
/// the first column is integrated; the Toeplitz structure supplies the rest.
pub fn covariance_from_pas(
    array: &AntennaArray,
    paths: &PathSet,
    grid_points: usize,
) -> Result<ChannelCovariance> {
    if grid_points < MIN_GRID_POINTS {
        return Err(Error::Config(format!(
            "grid_points = {grid_points} is below the minimum of {MIN_GRID_POINTS}"
        )));
    }
    let m = array.num_antennas();
    let b = paths.laplace_scale();
    let step = PI / grid_points as f64;
    let mut column = vec![Complex64::new(0.0, 0.0); m];

    for (&gain, &center) in paths.gains.iter().zip(&paths.angles) {
        if gain == 0.0 {
            continue;
        }
        if b < step {
            accumulate_outer(&mut column, gain, center);
            continue;
        }
        let left_len = center + FRAC_PI_2;
        let right_len = FRAC_PI_2 - center;
        let left_points = ((grid_points as f64) * left_len / PI).round() as usize;
        let right_points = grid_points.saturating_sub(left_points);

        let mut nodes = Vec::with_capacity(grid_points);
        for (start, len, points) in [
            (-FRAC_PI_2, left_len, left_points),
            (center, right_len, right_points),
        ] {
            if points == 0 || len <= 0.0 {
                continue;
            }
            let h = len / points as f64;
            for i in 0..points {
                let theta = start + (i as f64 + 0.5) * h;
                nodes.push((theta, h * (-(theta - center).abs() / b).exp()));
            }
        }
        let mass: f64 = nodes.iter().map(|&(_, w)| w).sum();
        if !(mass > 0.0) {
            accumulate_outer(&mut column, gain, center);
            continue;
        }
        let scale = gain / mass;
        for (theta, w) in nodes {
            accumulate_outer(&mut column, scale * w, theta);
        }
    }
    Ok(ChannelCovariance::from_first_column(DVector::from_vec(column)))
}

// column[n] += weight * exp(i pi n sin(theta)), the first column of a a^H.
fn accumulate_outer(column: &mut [Complex64], weight: f64, theta: f64) {
    let step = Complex64::from_polar(1.0, PI * theta.sin());
    let mut phasor = Complex64::new(weight, 0.0);
    for entry in column.iter_mut() {
        *entry += phasor;
        phasor *= step;
    }
}

/// Square-root factor `L` with `L L^H = C`, from an eigen decomposition
/// with negative (and rounding-level positive) eigenvalues clipped to zero.
pub fn sqrt_factor(cov: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let m = cov.nrows();
    if m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if cov.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::CorruptedCovariance {
            min_eigenvalue: f64::NAN,
            trace: f64::NAN,
        });
    }
    let trace: f64 = (0..m).map(|i| cov[(i, i)].re).sum();
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::CorruptedCovariance {
            min_eigenvalue,
            trace,
        });
    }
    let max_eigenvalue = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    // eigenvalues at rounding level are treated as exact zeros
    let floor = 1e-12 * max_eigenvalue;
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > floor { lambda.sqrt() } else { 0.0 };
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

/// Draws a standard circularly-symmetric complex Gaussian vector.
pub fn standard_complex_normal<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DVector::from_fn(m, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(s * re, s * im)
    })
}

/// Draws `h = mean + L eps`, `eps ~ CN(0, I)`.
pub fn sample_with_mean<R: Rng + ?Sized>(
    cov: &ChannelCovariance,
    mean: Option<&DVector<Complex64>>,
    rng: &mut R,
) -> Result<DVector<Complex64>> {
    let factor = sqrt_factor(cov.toeplitz())?;
    let eps = standard_complex_normal(cov.dim(), rng);
    let mut h = factor * eps;
    if let Some(mu) = mean {
        if mu.len() != h.len() {
            return Err(Error::Shape(format!(
                "mean has length {}, covariance is {}x{}",
                mu.len(),
                h.len(),
                h.len()
            )));
        }
        h += mu;
    }
    Ok(h)
}

/// Draws a zero-mean channel from `cov`. The label is the model order the
/// caller attaches afterwards; it defaults to 0 here.
pub fn sample_channel<R: Rng + ?Sized>(cov: &ChannelCovariance, rng: &mut R) -> Result<ChannelSample> {
    Ok(ChannelSample {
        h: sample_with_mean(cov, None, rng)?,
        label: 0,
        path_set_id: 0,
    })
}

/// Draws a random `order`-path set: gains i.i.d. uniform on `[0, 1]`
/// normalized to sum to one, angles i.i.d. uniform on `[-pi/2, pi/2]`. No
/// angular separation between paths is enforced.
pub fn sample_path_set<R: Rng + ?Sized>(order: usize, angle_spread: f64, rng: &mut R) -> Result<PathSet> {
    if order == 0 {
        return Err(Error::Config("model order must be at least 1".into()));
    }
    let gains = loop {
        let raw: Vec<f64> = (0..order).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            let mut gains: Vec<f64> = raw.iter().map(|g| g / total).collect();
            // absorb rounding so the sum is 1 to the last bit the validator checks
            let drift: f64 = 1.0 - gains.iter().sum::<f64>();
            let largest = gains
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            gains[largest] += drift;
            break gains;
        }
    };
    let angles = (0..order)
        .map(|_| rng.random_range(-FRAC_PI_2..=FRAC_PI_2))
        .collect();
    PathSet::new(gains, angles, angle_spread)
}
