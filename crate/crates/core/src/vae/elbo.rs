//! Per-datum ELBO arithmetic on plain vectors.
//!
//! Reconstruction uses the complex Gaussian log-density without its
//! `-M log pi` constant; the latent group is the single-sample estimate
//! `1/2 |eps|^2 + sum(log sigma) - 1/2 |z|^2`, whose dropped constants cancel.

use num_complex::Complex64;

use crate::dataset::unstack_real_imag;
use crate::{Error, Result};

/// Lower and upper bound for every log-scale network output.
pub const LOG_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu_z: Vec<f64>,
    pub log_sigma_z: Vec<f64>,
}

impl EncoderOutput {
    /// Clamps `log_sigma_z` into `[-LOG_CLAMP, LOG_CLAMP]`.
    pub fn new(mu_z: Vec<f64>, log_sigma_z: Vec<f64>) -> Result<Self> {
        if mu_z.len() != log_sigma_z.len() {
            return Err(Error::Shape(format!(
                "latent mean has {} entries, log-scale {}",
                mu_z.len(),
                log_sigma_z.len()
            )));
        }
        let log_sigma_z = log_sigma_z.into_iter().map(|v| v.clamp(-LOG_CLAMP, LOG_CLAMP)).collect();
        Ok(Self { mu_z, log_sigma_z })
    }

    pub fn dim(&self) -> usize {
        self.mu_z.len()
    }
}

/// Variance head of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceHead {
    /// `log sigma^2`, shared by all entries.
    Identity(f64),
    /// `log c`, one per entry.
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// Stacked real and imaginary parts of the complex mean.
    pub mu_x: Vec<f64>,
    pub variance: VarianceHead,
}

impl DecoderOutput {
    /// Clamps the variance logs into `[-LOG_CLAMP, LOG_CLAMP]`.
    pub fn new(mu_x: Vec<f64>, variance: VarianceHead) -> Result<Self> {
        if mu_x.len() % 2 != 0 {
            return Err(Error::Shape(format!("stacked mean has odd length {}", mu_x.len())));
        }
        let variance = match variance {
            VarianceHead::Identity(v) => VarianceHead::Identity(v.clamp(-LOG_CLAMP, LOG_CLAMP)),
            VarianceHead::Diagonal(v) => {
                if v.len() != mu_x.len() / 2 {
                    return Err(Error::Shape(format!(
                        "{} variance entries for a {}-entry mean",
                        v.len(),
                        mu_x.len() / 2
                    )));
                }
                VarianceHead::Diagonal(v.into_iter().map(|x| x.clamp(-LOG_CLAMP, LOG_CLAMP)).collect())
            }
        };
        Ok(Self { mu_x, variance })
    }

    pub fn num_entries(&self) -> usize {
        self.mu_x.len() / 2
    }

    /// Per-entry variances `c`.
    pub fn variances(&self) -> Vec<f64> {
        match &self.variance {
            VarianceHead::Identity(v) => vec![v.exp(); self.num_entries()],
            VarianceHead::Diagonal(v) => v.iter().map(|x| x.exp()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    /// `1/2 |eps|^2 + sum(log sigma) - 1/2 |z|^2`.
    pub latent: f64,
    /// Closed-form `KL(q(z|x) || N(0, I))`.
    pub kl_closed: f64,
    /// `recon + latent`.
    pub total: f64,
}

/// `z = mu + exp(log_sigma) * eps`.
pub fn reparameterize(enc: &EncoderOutput, eps: &[f64]) -> Vec<f64> {
    enc.mu_z
        .iter()
        .zip(&enc.log_sigma_z)
        .zip(eps)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect()
}

/// Closed-form KL divergence of each latent dimension from `N(0, 1)`.
pub fn kl_per_dim(enc: &EncoderOutput) -> Vec<f64> {
    enc.mu_z
        .iter()
        .zip(&enc.log_sigma_z)
        .map(|(m, s)| 0.5 * (m * m + (2.0 * s).exp() - 1.0) - s)
        .collect()
}

/// Sum over dimensions of `max(KL_j, lambda)`.
pub fn kl_free_bits(enc: &EncoderOutput, lambda_nats: f64) -> f64 {
    kl_per_dim(enc).into_iter().map(|k| k.max(lambda_nats)).sum()
}

fn recon_diag(x: &[Complex64], mu: &[Complex64], log_c: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(log_c)
        .map(|((x, m), lc)| -lc - (x - m).norm_sqr() * (-lc).exp())
        .sum()
}

fn latent_group(enc: &EncoderOutput, eps: &[f64], z: &[f64]) -> f64 {
    0.5 * eps.iter().map(|e| e * e).sum::<f64>() + enc.log_sigma_z.iter().sum::<f64>()
        - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

fn check_lengths(x: &[Complex64], dec: &DecoderOutput, enc: &EncoderOutput, eps: &[f64], z: &[f64]) -> Result<()> {
    if x.len() != dec.num_entries() || eps.len() != enc.dim() || z.len() != enc.dim() {
        return Err(Error::Shape(format!(
            "x has {} entries, decoder {}, latent {} / eps {} / z {}",
            x.len(),
            dec.num_entries(),
            enc.dim(),
            eps.len(),
            z.len()
        )));
    }
    Ok(())
}

fn assemble(recon: f64, enc: &EncoderOutput, eps: &[f64], z: &[f64]) -> ElboTerms {
    let latent = latent_group(enc, eps, z);
    ElboTerms {
        recon,
        latent,
        kl_closed: kl_per_dim(enc).iter().sum(),
        total: recon + latent,
    }
}

/// Single-sample ELBO with a diagonal decoder covariance.
pub fn elbo_diag(
    x: &[Complex64],
    dec: &DecoderOutput,
    enc: &EncoderOutput,
    eps: &[f64],
    z: &[f64],
) -> Result<ElboTerms> {
    check_lengths(x, dec, enc, eps, z)?;
    let VarianceHead::Diagonal(log_c) = &dec.variance else {
        return Err(Error::Config("elbo_diag needs a diagonal variance head".into()));
    };
    let mu = unstack_real_imag(&dec.mu_x)?;
    Ok(assemble(recon_diag(x, &mu, log_c), enc, eps, z))
}

/// Single-sample ELBO with a scaled-identity decoder covariance.
pub fn elbo_identity(
    x: &[Complex64],
    dec: &DecoderOutput,
    enc: &EncoderOutput,
    eps: &[f64],
    z: &[f64],
) -> Result<ElboTerms> {
    check_lengths(x, dec, enc, eps, z)?;
    let VarianceHead::Identity(log_s2) = dec.variance else {
        return Err(Error::Config("elbo_identity needs a scalar variance head".into()));
    };
    let mu = unstack_real_imag(&dec.mu_x)?;
    // -M log s2 - |x - mu|^2 / s2
    let dist: f64 = x.iter().zip(&mu).map(|(a, b)| (a - b).norm_sqr()).sum();
    let recon = -(x.len() as f64) * log_s2 - dist * (-log_s2).exp();
    Ok(assemble(recon, enc, eps, z))
}

/// Either ELBO, chosen by the decoder's variance head.
pub fn elbo(x: &[Complex64], dec: &DecoderOutput, enc: &EncoderOutput, eps: &[f64], z: &[f64]) -> Result<ElboTerms> {
    match dec.variance {
        VarianceHead::Identity(_) => elbo_identity(x, dec, enc, eps, z),
        VarianceHead::Diagonal(_) => elbo_diag(x, dec, enc, eps, z),
    }
}

/// One-dimensional latent, one complex observation:
/// `z ~ N(0, 1)`, `x | z ~ CN(a z, c)`.
///
/// The evidence and the exact posterior have closed forms, which makes the
/// model a reference for the bound `E_q[ELBO] <= log p(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussianToy {
    pub a: Complex64,
    pub c: f64,
}

impl LinearGaussianToy {
    /// `log p(x)`. `(Re x, Im x)` is a real Gaussian with covariance
    /// `u u^T + (c / 2) I`, `u = (Re a, Im a)`.
    pub fn log_evidence(&self, x: Complex64) -> f64 {
        let (ur, ui) = (self.a.re, self.a.im);
        let s = 0.5 * self.c;
        let (s11, s22, s12) = (ur * ur + s, ui * ui + s, ur * ui);
        let det = s11 * s22 - s12 * s12;
        let quad = (s22 * x.re * x.re - 2.0 * s12 * x.re * x.im + s11 * x.im * x.im) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }

    /// Mean and log standard deviation of `p(z | x)`.
    pub fn posterior(&self, x: Complex64) -> (f64, f64) {
        let precision = 1.0 + 2.0 * self.a.norm_sqr() / self.c;
        let mean = 2.0 * (self.a.conj() * x).re / self.c / precision;
        (mean, -0.5 * precision.ln())
    }

    /// Single-sample ELBO with the density constants restored, so it is
    /// directly comparable with [`Self::log_evidence`].
    pub fn elbo_sample(&self, x: Complex64, q: (f64, f64), eps: f64) -> Result<f64> {
        let enc = EncoderOutput::new(vec![q.0], vec![q.1])?;
        let z = reparameterize(&enc, &[eps]);
        let mean = self.a * z[0];
        let dec = DecoderOutput::new(vec![mean.re, mean.im], VarianceHead::Diagonal(vec![self.c.ln()]))?;
        let terms = elbo_diag(&[x], &dec, &enc, &[eps], &z)?;
        Ok(terms.total - std::f64::consts::PI.ln())
    }
}
