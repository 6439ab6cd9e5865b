//! Parameter storage and the layer set used by the encoder and decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::{Conv1dSpec, Tensor};
use crate::{Error, Result};

/// Index into a [`TensorStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on `graph` as a trainable leaf, in store order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Replaces every tensor by the same-named, same-shaped one from `other`.
    pub fn load_from(&mut self, other: &TensorStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Malformed(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
            let src = other.get(id);
            if src.shape() != slot.shape() {
                return Err(Error::Malformed(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialization scale.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a ReLU.
    Kaiming,
    /// `N(0, 1 / fan_in)`, for linear output heads.
    FanIn,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    let gain = match init {
        Init::Kaiming => 2.0,
        Init::FanIn => 1.0,
    };
    let normal = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut TensorStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), init_tensor(&[fan_out, fan_in], fan_in, init, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            fan_in,
            fan_out,
            weight,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.0], p[self.bias.0])
    }
}

/// Convolution or transposed convolution, depending on `spec.transposed`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub spec: Conv1dSpec,
    weight: ParamId,
    bias: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut TensorStore,
        name: &str,
        spec: Conv1dSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let shape = if spec.transposed {
            [spec.in_channels, spec.out_channels, k]
        } else {
            [spec.out_channels, spec.in_channels, k]
        };
        let weight = params.add(format!("{name}.weight"), init_tensor(&shape, spec.in_channels * k, init, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let (w, b) = (p[self.weight.0], p[self.bias.0]);
        if self.spec.transposed {
            g.conv_transpose1d(x, w, b, &self.spec)
        } else {
            g.conv1d(x, w, b, &self.spec)
        }
    }
}

/// Batch normalization over `[B, C, L]`, statistics per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm1d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut TensorStore, buffers: &mut TensorStore, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: params.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0)),
        }
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates; eval mode uses the running estimates and leaves them alone.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, buffers: &mut TensorStore, mode: Mode) -> Result<Var> {
        let (gamma, beta) = (p[self.gamma.0], p[self.beta.0]);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, Self::EPS)?;
                let m = Self::MOMENTUM;
                for (r, s) in buffers.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in buffers.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = (1.0 - m) * *r + m * s;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                buffers.get(self.running_mean).data(),
                buffers.get(self.running_var).data(),
                Self::EPS,
            ),
        }
    }
}
