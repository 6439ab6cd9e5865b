//! Convolutional encoder and mirrored decoder.

use serde::{Deserialize, Serialize};

use super::elbo::LOG_CLAMP;
use crate::nn::{BatchNorm1d, Conv1d, Conv1dSpec, Graph, Init, Linear, Mode, Tensor, TensorStore, Var};
use crate::{Error, Result};

pub const LATENT_DIM: usize = 4;

/// Decoder likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One variance shared by all entries.
    Identity,
    /// One variance per DFT bin.
    Diagonal,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Identity => "identity",
            Variant::Diagonal => "diagonal",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Variant::Identity),
            "diagonal" => Ok(Variant::Diagonal),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`, expected `identity` or `diagonal`"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_channels() -> Vec<usize> {
    vec![8, 32, 128]
}

fn default_kernel() -> usize {
    7
}

/// Network shape. The input is a stacked real vector of length `2M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_antennas: usize,
    /// Encoder channel widths after each convolution.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_antennas: usize) -> Self {
        Self {
            variant,
            num_antennas,
            channels: default_channels(),
            kernel_size: default_kernel(),
        }
    }

    pub fn input_len(&self) -> usize {
        2 * self.num_antennas
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Spatial length after each encoder convolution.
    pub fn encoder_lengths(&self) -> Result<Vec<usize>> {
        let mut lengths = Vec::with_capacity(self.channels.len());
        let mut len = self.input_len();
        let mut cin = 1;
        for &c in &self.channels {
            let spec = Conv1dSpec::new(cin, c, self.kernel_size, 2, self.padding())?;
            len = spec
                .output_len(len)
                .ok_or_else(|| Error::Config(format!("input length {len} too short for the encoder")))?;
            lengths.push(len);
            cin = c;
        }
        Ok(lengths)
    }

    pub fn flat_len(&self) -> Result<usize> {
        let last = *self.encoder_lengths()?.last().ok_or_else(|| Error::Config("no encoder layers".into()))?;
        Ok(last * self.channels.last().copied().unwrap_or(1))
    }

    pub fn variance_width(&self) -> usize {
        match self.variant {
            Variant::Identity => 1,
            Variant::Diagonal => self.num_antennas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("model needs antennas and nonzero channel widths".into()));
        }
        let lengths = self.encoder_lengths()?;
        // each transposed layer must restore the matching encoder length exactly
        let mut inputs = vec![self.input_len()];
        inputs.extend_from_slice(&lengths[..lengths.len() - 1]);
        for (l_in, l_out) in inputs.iter().zip(&lengths) {
            if output_padding(*l_in, *l_out, self.kernel_size, self.padding()).is_none() {
                return Err(Error::Config(format!(
                    "length {l_out} cannot be upsampled back to {l_in}"
                )));
            }
        }
        Ok(())
    }
}

fn output_padding(target: usize, from: usize, k: usize, pad: usize) -> Option<usize> {
    let base = ((from - 1) * 2 + k).checked_sub(2 * pad)?;
    let op = target.checked_sub(base)?;
    (op < 2).then_some(op)
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub mu_z: Var,
    /// Clamped.
    pub log_sigma_z: Var,
    pub z: Var,
    pub mu_x: Var,
    /// `[B, 1]` or `[B, M]`, clamped.
    pub log_var_x: Var,
}

/// Encoder and decoder with their parameters and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    enc_convs: Vec<(Conv1d, BatchNorm1d)>,
    enc_head: Linear,
    dec_input: Linear,
    dec_convs: Vec<(Conv1d, BatchNorm1d)>,
    dec_head: Linear,
}

impl VaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x6d6f_6465_6c]);
        let mut params = TensorStore::new();
        let mut buffers = TensorStore::new();
        let (k, pad) = (config.kernel_size, config.padding());
        let lengths = config.encoder_lengths()?;
        let flat = config.flat_len()?;

        let mut enc_convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let conv = Conv1d::new(&mut params, &format!("enc.conv{i}"), Conv1dSpec::new(cin, c, k, 2, pad)?, Init::Kaiming, &mut rng)?;
            let bn = BatchNorm1d::new(&mut params, &mut buffers, &format!("enc.bn{i}"), c);
            enc_convs.push((conv, bn));
            cin = c;
        }
        let enc_head = Linear::new(&mut params, "enc.head", flat, 2 * LATENT_DIM, Init::FanIn, &mut rng);

        let dec_input = Linear::new(&mut params, "dec.input", LATENT_DIM, flat, Init::Kaiming, &mut rng);
        let mut dec_convs = Vec::new();
        let n = config.channels.len();
        for i in 0..n {
            let layer = n - 1 - i;
            let cin = config.channels[layer];
            let cout = if layer == 0 { 1 } else { config.channels[layer - 1] };
            let from = lengths[layer];
            let target = if layer == 0 { config.input_len() } else { lengths[layer - 1] };
            let op = output_padding(target, from, k, pad).expect("validated");
            let spec = Conv1dSpec::transposed(cin, cout, k, 2, pad, op)?;
            let conv = Conv1d::new(&mut params, &format!("dec.conv{i}"), spec, Init::Kaiming, &mut rng)?;
            let bn = BatchNorm1d::new(&mut params, &mut buffers, &format!("dec.bn{i}"), cout);
            dec_convs.push((conv, bn));
        }
        let dec_head = Linear::new(
            &mut params,
            "dec.head",
            config.input_len(),
            config.input_len() + config.variance_width(),
            Init::FanIn,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            buffers,
            enc_convs,
            enc_head,
            dec_input,
            dec_convs,
            dec_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// `x: [B, 2M]` to `(mu_z, clamped log_sigma_z)`, each `[B, 4]`.
    pub fn encode(&self, g: &mut Graph, p: &[Var], x: Var, buffers: &mut TensorStore, mode: Mode) -> Result<(Var, Var)> {
        let batch = g.shape(x)[0];
        let mut h = g.reshape(x, &[batch, 1, self.config.input_len()])?;
        for (conv, bn) in &self.enc_convs {
            let c = conv.forward(g, p, h)?;
            let n = bn.forward(g, p, c, buffers, mode)?;
            h = g.relu(n);
        }
        let flat = g.reshape(h, &[batch, self.config.flat_len()?])?;
        let out = self.enc_head.forward(g, p, flat)?;
        let mu = g.slice_cols(out, 0, LATENT_DIM)?;
        let raw = g.slice_cols(out, LATENT_DIM, LATENT_DIM)?;
        Ok((mu, g.clamp(raw, -LOG_CLAMP, LOG_CLAMP)))
    }

    /// `z: [B, 4]` to `(mu_x [B, 2M], clamped log variances)`.
    pub fn decode(&self, g: &mut Graph, p: &[Var], z: Var, buffers: &mut TensorStore, mode: Mode) -> Result<(Var, Var)> {
        let batch = g.shape(z)[0];
        let lengths = self.config.encoder_lengths()?;
        let lin = self.dec_input.forward(g, p, z)?;
        let act = g.relu(lin);
        let last = *self.config.channels.last().expect("validated");
        let mut h = g.reshape(act, &[batch, last, *lengths.last().expect("validated")])?;
        for (conv, bn) in &self.dec_convs {
            let c = conv.forward(g, p, h)?;
            let n = bn.forward(g, p, c, buffers, mode)?;
            h = g.relu(n);
        }
        let width = self.config.input_len();
        let flat = g.reshape(h, &[batch, width])?;
        let out = self.dec_head.forward(g, p, flat)?;
        let mu = g.slice_cols(out, 0, width)?;
        let raw = g.slice_cols(out, width, self.config.variance_width())?;
        Ok((mu, g.clamp(raw, -LOG_CLAMP, LOG_CLAMP)))
    }

    /// Full pass with `z = mu + exp(log_sigma) * eps`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        eps: &Tensor,
        buffers: &mut TensorStore,
        mode: Mode,
    ) -> Result<ForwardVars> {
        let (mu_z, log_sigma_z) = self.encode(g, p, x, buffers, mode)?;
        if eps.shape() != g.shape(mu_z) {
            return Err(Error::Shape(format!(
                "noise shape {:?} for latent shape {:?}",
                eps.shape(),
                g.shape(mu_z)
            )));
        }
        let sigma = g.exp(log_sigma_z);
        let e = g.constant(eps.clone());
        let scaled = g.mul(sigma, e)?;
        let z = g.add(mu_z, scaled)?;
        let (mu_x, log_var_x) = self.decode(g, p, z, buffers, mode)?;
        Ok(ForwardVars {
            mu_z,
            log_sigma_z,
            z,
            mu_x,
            log_var_x,
        })
    }
}
