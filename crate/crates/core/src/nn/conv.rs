//! Geometry and index shuffling for 1-D (transposed) convolutions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters of a 1-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    pub output_padding: usize,
}

impl Conv1dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            transposed: false,
            output_padding: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            transposed: true,
            output_padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.transposed && self.output_padding >= self.stride {
            return Err(Error::Config("output padding must be smaller than the stride".into()));
        }
        if !self.transposed && self.output_padding != 0 {
            return Err(Error::Config("output padding only applies to transposed convolutions".into()));
        }
        Ok(())
    }

    /// Output length for an input of length `len`.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let (k, s, p) = (self.kernel_size, self.stride, self.padding);
        if self.transposed {
            ((len.checked_sub(1)? * s + k + self.output_padding).checked_sub(2 * p)).filter(|&l| l > 0)
        } else {
            (len + 2 * p).checked_sub(k).map(|d| d / s + 1)
        }
    }
}

/// Shapes of a forward convolution `[B, c_in, l_in] -> [B, c_out, l_out]`.
/// A transposed convolution stores the geometry of the forward convolution
/// it is the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub l_in: usize,
    pub l_out: usize,
}

impl ConvGeom {
    pub fn forward(spec: &Conv1dSpec, x_shape: &[usize]) -> Result<Self> {
        let &[batch, c, len] = x_shape else {
            return Err(Error::Shape(format!("conv1d expects [B, C, L], got {x_shape:?}")));
        };
        if c != spec.in_channels {
            return Err(Error::Shape(format!("conv1d expects {} channels, got {c}", spec.in_channels)));
        }
        let l_out = spec
            .output_len(len)
            .ok_or_else(|| Error::Shape(format!("input length {len} too short for kernel {}", spec.kernel_size)))?;
        Ok(Self {
            batch,
            c_in: spec.in_channels,
            c_out: spec.out_channels,
            kernel: spec.kernel_size,
            stride: spec.stride,
            pad: spec.padding,
            l_in: len,
            l_out,
        })
    }

    pub fn transposed(spec: &Conv1dSpec, x_shape: &[usize]) -> Result<Self> {
        let &[batch, c, len] = x_shape else {
            return Err(Error::Shape(format!("conv_transpose1d expects [B, C, L], got {x_shape:?}")));
        };
        if c != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv_transpose1d expects {} channels, got {c}",
                spec.in_channels
            )));
        }
        let l_out = spec
            .output_len(len)
            .ok_or_else(|| Error::Shape(format!("invalid transposed length for input {len}")))?;
        Ok(Self {
            batch,
            c_in: spec.out_channels,
            c_out: spec.in_channels,
            kernel: spec.kernel_size,
            stride: spec.stride,
            pad: spec.padding,
            l_in: l_out,
            l_out: len,
        })
    }

    pub fn check_params(&self, w: &[usize], b: &[usize], expected_w: &[usize], bias_len: usize) -> Result<()> {
        if w != expected_w || b != [bias_len] {
            return Err(Error::Shape(format!(
                "convolution parameters {w:?}/{b:?}, expected {expected_w:?}/[{bias_len}]"
            )));
        }
        Ok(())
    }

    fn source(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&p| p < self.l_in)
    }

    /// `[B, c, l] -> [c, B * l]`.
    pub fn batch_to_channel_major(&self, data: &[f64], c: usize, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        let n = self.batch * l;
        for b in 0..self.batch {
            for ch in 0..c {
                let src = &data[(b * c + ch) * l..(b * c + ch + 1) * l];
                out[ch * n + b * l..ch * n + (b + 1) * l].copy_from_slice(src);
            }
        }
        out
    }

    /// `[c, B * l] -> [B, c, l]`, optionally adding a per-channel bias.
    pub fn channel_major_to_batch(&self, data: &[f64], c: usize, l: usize, bias: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        let n = self.batch * l;
        for b in 0..self.batch {
            for ch in 0..c {
                let dst = &mut out[(b * c + ch) * l..(b * c + ch + 1) * l];
                dst.copy_from_slice(&data[ch * n + b * l..ch * n + (b + 1) * l]);
                if let Some(bias) = bias {
                    dst.iter_mut().for_each(|v| *v += bias[ch]);
                }
            }
        }
        out
    }
}

/// Unfolds `x: [B, c_in, l_in]` into `[c_in * K, B * l_out]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.batch * g.l_out;
    let mut col = vec![0.0; g.c_in * g.kernel * n];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &mut col[(ci * g.kernel + k) * n..(ci * g.kernel + k + 1) * n];
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.l_in..(b * g.c_in + ci + 1) * g.l_in];
                for o in 0..g.l_out {
                    if let Some(p) = g.source(o, k) {
                        row[b * g.l_out + o] = src[p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds `col` into `out: [B, c_in, l_in]`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let n = g.batch * g.l_out;
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &col[(ci * g.kernel + k) * n..(ci * g.kernel + k + 1) * n];
            for b in 0..g.batch {
                let dst = &mut out[(b * g.c_in + ci) * g.l_in..(b * g.c_in + ci + 1) * g.l_in];
                for o in 0..g.l_out {
                    if let Some(p) = g.source(o, k) {
                        dst[p] += row[b * g.l_out + o];
                    }
                }
            }
        }
    }
}
