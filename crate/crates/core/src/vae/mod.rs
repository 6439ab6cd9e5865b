//! Variational autoencoder over stacked real/imaginary DFT-domain channels.
//!
//! The encoder is three stride-2 convolutions with batch norm and ReLU
//! followed by a dense layer to `(mu_z, log sigma_z)`. The decoder mirrors
//! it with a dense input projection and transposed convolutions, and ends in
//! a dense layer producing the complex mean and the variance head: a single
//! `log sigma^2` ([`Variant::Identity`]) or one `log c_m` per DFT bin
//! ([`Variant::Diagonal`]).

mod elbo;
mod model;
mod train;

pub use elbo::{
    elbo, elbo_diag, elbo_identity, kl_free_bits, kl_per_dim, reparameterize, DecoderOutput, ElboTerms,
    EncoderOutput, LinearGaussianToy, VarianceHead, LOG_CLAMP,
};
pub use model::{ForwardVars, ModelConfig, VaeModel, Variant, LATENT_DIM};
pub use train::{
    batch_loss, evaluate, latent_means, model_from_checkpoint, sample_outputs, train, train_with, BatchTerms,
    EpochStats, History, LatentTerm, SampleOutputs, TrainConfig, Trainer,
};

use crate::nn::{check_gradients, GradCheckConfig, GradCheckReport, Graph, Mode, Tensor, Var};
use crate::Result;

/// Smallest model that still has every layer of the full one.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_antennas: 4,
        channels: vec![2, 3, 2],
        kernel_size: 7,
    }
}

/// Finite-difference checks of the whole batched objective on a tiny model,
/// for both variants and both latent terms, over every parameter entry.
/// Setting `corrupt` perturbs one analytic gradient to prove the check bites.
pub fn gradcheck_suite(seed: u64, corrupt: bool) -> Result<Vec<(String, GradCheckReport)>> {
    use rand_distr::{Distribution, StandardNormal};

    let mut out = Vec::new();
    for variant in [Variant::Identity, Variant::Diagonal] {
        let mut model = VaeModel::new(tiny_config(variant), seed)?;
        let mut rng = crate::rng::stream(seed, &[0x6763, variant as u64]);
        // a fresh init has zero biases and betas; a constant channel then
        // normalizes to exactly zero and sits on a ReLU kink
        for (name, tensor) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                tensor.data_mut().iter_mut().for_each(|v| *v = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            }
        }
        let batch = 3;
        let x = Tensor::from_fn(&[batch, model.config.input_len()], |_| StandardNormal.sample(&mut rng));
        let eps = Tensor::from_fn(&[batch, LATENT_DIM], |_| StandardNormal.sample(&mut rng));
        for (label, latent) in [("sampled", LatentTerm::Sampled), ("kl", LatentTerm::FreeBits(0.0))] {
            let mut first = corrupt;
            let report = check_gradients(&model.params, None, GradCheckConfig::default(), |g: &mut Graph, p: &[Var]| {
                let mut buffers = model.buffers.clone();
                let xv = g.constant(x.clone());
                let fwd = model.forward(g, p, xv, &eps, &mut buffers, Mode::Train)?;
                let (loss, _) = batch_loss(g, &model, &fwd, xv, &eps, latent)?;
                if std::mem::take(&mut first) {
                    // the analytic pass runs first; tilt only its loss
                    return Ok(g.scale(loss, 1.01));
                }
                Ok(loss)
            })?;
            out.push((format!("elbo_{variant}_{label}"), report));
        }
    }
    Ok(out)
}
