//! Batched objective, training loop and inference helpers.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::elbo::{elbo, DecoderOutput, ElboTerms, EncoderOutput, VarianceHead, LOG_CLAMP};
use super::model::{ModelConfig, VaeModel, Variant, LATENT_DIM};
use crate::dataset::{unstack_real_imag, Dataset, Domain};
use crate::nn::{AdamConfig, AdamState, Checkpoint, Graph, Mode, Tensor, TensorStore, Var};
use crate::{Error, Result};

/// Which latent term the batched objective uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentTerm {
    /// `sum_j max(mean_b KL_bj, lambda)`.
    FreeBits(f64),
    /// The single-sample group `1/2 |eps|^2 + sum(log sigma) - 1/2 |z|^2`.
    Sampled,
}

/// Batch means of the objective's pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchTerms {
    pub recon: f64,
    /// Closed-form KL summed over dimensions, before any floor.
    pub kl: f64,
    /// The latent penalty actually optimized.
    pub penalty: f64,
}

/// Negative batch-mean objective: `-(mean recon) + penalty`.
pub fn batch_loss(
    g: &mut Graph,
    model: &VaeModel,
    fwd: &super::model::ForwardVars,
    x: Var,
    eps: &Tensor,
    latent: LatentTerm,
) -> Result<(Var, BatchTerms)> {
    let m = model.config.num_antennas;
    let diff = g.sub(x, fwd.mu_x)?;
    let sq = g.square(diff);
    let dist = g.sum_halves(sq)?;
    let log_c = match model.variant() {
        Variant::Identity => g.broadcast_cols(fwd.log_var_x, m)?,
        Variant::Diagonal => fwd.log_var_x,
    };
    let neg_log_c = g.neg(log_c);
    let inv_c = g.exp(neg_log_c);
    let weighted = g.mul(dist, inv_c)?;
    let per_entry = g.add(log_c, weighted)?;
    let rows = g.row_sum(per_entry)?;
    // mean of -(sum log c + sum |x - mu|^2 / c)
    let neg_recon = g.mean(rows);

    let mu2 = g.square(fwd.mu_z);
    let two_s = g.scale(fwd.log_sigma_z, 2.0);
    let var = g.exp(two_s);
    let t = g.add(mu2, var)?;
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    let kl = g.sub(t, fwd.log_sigma_z)?;
    let kl_mean = g.col_mean(kl)?;
    let kl_total = g.value(kl_mean).data().iter().sum::<f64>();

    let penalty = match latent {
        LatentTerm::FreeBits(lambda) => {
            let floored = g.max_scalar(kl_mean, lambda);
            g.sum(floored)
        }
        LatentTerm::Sampled => {
            // penalty = -(1/2 |eps|^2 + sum log sigma - 1/2 |z|^2), batch mean
            let batch = g.shape(x)[0] as f64;
            let eps_term = 0.5 * eps.data().iter().map(|e| e * e).sum::<f64>() / batch;
            let z2 = g.square(fwd.z);
            let z2 = g.scale(z2, 0.5);
            let diff = g.sub(z2, fwd.log_sigma_z)?;
            let rows = g.row_sum(diff)?;
            let mean = g.mean(rows);
            g.add_scalar(mean, -eps_term)
        }
    };
    let loss = g.add(neg_recon, penalty)?;
    let terms = BatchTerms {
        recon: -g.value(neg_recon).data()[0],
        kl: kl_total,
        penalty: g.value(penalty).data()[0],
    };
    Ok((loss, terms))
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_tolerance() -> f64 {
    1e-3
}
fn default_free_bits() -> f64 {
    0.5
}
fn default_channels() -> Vec<usize> {
    vec![8, 32, 128]
}
fn default_kernel() -> usize {
    7
}

/// Training hyperparameters, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Upper bound on epochs.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many epochs without improvement.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Relative ELBO gain that counts as an improvement.
    #[serde(default = "default_tolerance")]
    pub plateau_tolerance: f64,
    /// Per-dimension KL floor in nats; 0 disables free bits.
    #[serde(default = "default_free_bits")]
    pub free_bits: f64,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            patience: default_patience(),
            plateau_tolerance: default_tolerance(),
            free_bits: default_free_bits(),
            channels: default_channels(),
            kernel_size: default_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::Config("free_bits must be nonnegative".into()));
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_antennas: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            num_antennas,
            channels: self.channels.clone(),
            kernel_size: self.kernel_size,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Means over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    /// Latent penalty as optimized (free-bits floored when enabled).
    pub kl: f64,
    /// `recon - kl`, the objective being maximized.
    pub total: f64,
    /// Closed-form KL without the floor.
    pub kl_raw: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl History {
    /// CSV with header `epoch,recon,kl,total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,recon,kl,total\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.recon, e.kl, e.total));
        }
        out
    }
}

fn dataset_tensor(ds: &Dataset, rows: &[usize]) -> Tensor {
    let w = ds.width();
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend(ds.row(r).iter().map(|&v| v as f64));
    }
    Tensor::new(vec![rows.len(), w], data).expect("row width")
}

fn noise(seed: u64, coords: &[u64], batch: usize) -> Tensor {
    let mut rng = crate::rng::stream(seed, coords);
    Tensor::from_fn(&[batch, LATENT_DIM], |_| StandardNormal.sample(&mut rng))
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn within_clamp(values: &[f64]) -> bool {
    values.iter().all(|v| (-LOG_CLAMP..=LOG_CLAMP).contains(v))
}

/// Owns the model and optimizer across epochs.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: VaeModel,
    pub adam: AdamState,
    data: &'a Dataset,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.domain() != Domain::Dft {
            return Err(Error::DomainMismatch("training expects a DFT-domain dataset".into()));
        }
        if data.len() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "training needs at least 2 samples, got {}",
                data.len()
            )));
        }
        let model = VaeModel::new(config.model_config(data.num_antennas()), config.seed)?;
        let adam = AdamState::new(&model.params, AdamConfig::with_lr(config.learning_rate));
        Ok(Self {
            config,
            model,
            adam,
            data,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(data: &'a Dataset, ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ck.config)?;
        let mut trainer = Self::new(data, config)?;
        trainer.model.params.load_from(&ck.params)?;
        trainer.model.buffers.load_from(&ck.buffers)?;
        if let Some(adam) = &ck.adam {
            trainer.adam = adam.clone();
        }
        trainer.epoch = ck.epoch as usize;
        Ok(trainer)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_toml(),
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch as u32,
        }
    }

    /// One shuffled pass. A trailing batch of one sample is skipped because
    /// training-mode batch norm needs two.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epoch as u64;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut crate::rng::stream(seed, &[1, epoch]));
        let latent = LatentTerm::FreeBits(self.config.free_bits);

        let (mut recon, mut kl, mut kl_raw, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for (step, rows) in order.chunks(self.config.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let x = dataset_tensor(self.data, rows);
            let eps = noise(seed, &[2, epoch, step as u64], rows.len());
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let xv = g.constant(x);
            let mut buffers = std::mem::take(&mut self.model.buffers);
            let fwd = self.model.forward(&mut g, &p, xv, &eps, &mut buffers, Mode::Train);
            self.model.buffers = buffers;
            let fwd = fwd?;
            if !within_clamp(g.value(fwd.log_var_x).data()) || !within_clamp(g.value(fwd.log_sigma_z).data()) {
                return Err(Error::Divergence(format!("log-scale output left [-{LOG_CLAMP}, {LOG_CLAMP}] at epoch {epoch}")));
            }
            let (loss, terms) = batch_loss(&mut g, &self.model, &fwd, xv, &eps, latent)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = p.iter().map(|&v| grads.get(v)).collect();
            if !grads.iter().all(|t| all_finite(t.data())) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            self.adam.step(&mut self.model.params, &grads)?;
            let w = rows.len() as f64;
            recon += w * terms.recon;
            kl += w * terms.penalty;
            kl_raw += w * terms.kl;
            weight += w;
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            recon: recon / weight,
            kl: kl / weight,
            total: (recon - kl) / weight,
            kl_raw: kl_raw / weight,
        };
        if !stats.total.is_finite() {
            return Err(Error::Divergence(format!("mean ELBO is {} at epoch {}", stats.total, self.epoch)));
        }
        Ok(stats)
    }
}

/// Trains with early stopping, calling `on_epoch` after every epoch.
pub fn train_with<F>(data: &Dataset, config: TrainConfig, mut on_epoch: F) -> Result<(VaeModel, History)>
where
    F: FnMut(&EpochStats, &Trainer<'_>) -> Result<()>,
{
    let mut trainer = Trainer::new(data, config)?;
    let mut history = History::default();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    while trainer.epochs_done() < trainer.config.epochs {
        let stats = trainer.run_epoch()?;
        history.epochs.push(stats);
        on_epoch(&stats, &trainer)?;
        let margin = trainer.config.plateau_tolerance * best.abs().max(1.0);
        if stats.total > best + margin || best == f64::NEG_INFINITY {
            best = best.max(stats.total);
            stale = 0;
        } else {
            best = best.max(stats.total);
            stale += 1;
            if stale >= trainer.config.patience {
                history.stopped_early = trainer.epochs_done() < trainer.config.epochs;
                break;
            }
        }
    }
    Ok((trainer.model, history))
}

pub fn train(data: &Dataset, config: TrainConfig) -> Result<(VaeModel, History)> {
    train_with(data, config, |_, _| Ok(()))
}

const INFERENCE_CHUNK: usize = 512;

/// Row `i` is `mu_z` of sample `i`, with batch norm in eval mode.
pub fn latent_means(model: &VaeModel, data: &Dataset) -> Result<Array2<f64>> {
    check_width(model, data)?;
    let mut out = Array2::zeros((data.len(), LATENT_DIM));
    let mut buffers = model.buffers.clone();
    let rows: Vec<usize> = (0..data.len()).collect();
    for (c, chunk) in rows.chunks(INFERENCE_CHUNK).enumerate() {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(dataset_tensor(data, chunk));
        let (mu, _) = model.encode(&mut g, &p, x, &mut buffers, Mode::Eval)?;
        for (i, row) in g.value(mu).data().chunks(LATENT_DIM).enumerate() {
            out.row_mut(c * INFERENCE_CHUNK + i).assign(&ndarray::ArrayView1::from(row));
        }
    }
    Ok(out)
}

fn check_width(model: &VaeModel, data: &Dataset) -> Result<()> {
    if data.num_antennas() != model.config.num_antennas {
        return Err(Error::Shape(format!(
            "model expects {} antennas, dataset has {}",
            model.config.num_antennas,
            data.num_antennas()
        )));
    }
    Ok(())
}

/// Network outputs of one sample, as fed to the per-datum ELBO.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

/// Eval-mode forward pass of `x: [B, 2M]` with the given noise.
pub fn sample_outputs(model: &VaeModel, x: &Tensor, eps: &Tensor) -> Result<Vec<SampleOutputs>> {
    let mut buffers: TensorStore = model.buffers.clone();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, &p, xv, eps, &mut buffers, Mode::Eval)?;
    let batch = x.shape()[0];
    let width = model.config.input_len();
    let vw = model.config.variance_width();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let slice = |v: Var, w: usize| g.value(v).data()[b * w..(b + 1) * w].to_vec();
        let encoder = EncoderOutput::new(slice(fwd.mu_z, LATENT_DIM), slice(fwd.log_sigma_z, LATENT_DIM))?;
        let logs = slice(fwd.log_var_x, vw);
        let variance = match model.variant() {
            Variant::Identity => VarianceHead::Identity(logs[0]),
            Variant::Diagonal => VarianceHead::Diagonal(logs),
        };
        out.push(SampleOutputs {
            decoder: DecoderOutput::new(slice(fwd.mu_x, width), variance)?,
            encoder,
            eps: eps.data()[b * LATENT_DIM..(b + 1) * LATENT_DIM].to_vec(),
            z: slice(fwd.z, LATENT_DIM),
        });
    }
    Ok(out)
}

/// Mean single-sample ELBO terms over a dataset in eval mode.
pub fn evaluate(model: &VaeModel, data: &Dataset, seed: u64) -> Result<ElboTerms> {
    check_width(model, data)?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples("cannot evaluate an empty dataset".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut sum = ElboTerms {
        recon: 0.0,
        latent: 0.0,
        kl_closed: 0.0,
        total: 0.0,
    };
    for (c, chunk) in rows.chunks(INFERENCE_CHUNK).enumerate() {
        let x = dataset_tensor(data, chunk);
        let eps = noise(seed, &[3, c as u64], chunk.len());
        for (i, s) in sample_outputs(model, &x, &eps)?.iter().enumerate() {
            let xc = unstack_real_imag(&x.data()[i * data.width()..(i + 1) * data.width()])?;
            let t = elbo(&xc, &s.decoder, &s.encoder, &s.eps, &s.z)?;
            sum.recon += t.recon;
            sum.latent += t.latent;
            sum.kl_closed += t.kl_closed;
            sum.total += t.total;
        }
    }
    let n = data.len() as f64;
    Ok(ElboTerms {
        recon: sum.recon / n,
        latent: sum.latent / n,
        kl_closed: sum.kl_closed / n,
        total: sum.total / n,
    })
}

/// Rebuilds a model from a checkpoint's config and tensors.
pub fn model_from_checkpoint(ck: &Checkpoint, num_antennas: usize) -> Result<VaeModel> {
    let config = TrainConfig::from_toml(&ck.config)?;
    let mut model = VaeModel::new(config.model_config(num_antennas), config.seed)?;
    model.params.load_from(&ck.params)?;
    model.buffers.load_from(&ck.buffers)?;
    Ok(model)
}
