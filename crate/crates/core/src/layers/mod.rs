//! Convolution layers: specification, parameters, initialization and the
//! tape-level forward functions.
//!
//! Convolutions are cross-correlations (no kernel flip). "Same" padding gives
//! an output extent of `ceil(in / stride)`; when the total padding is odd the
//! extra row/column goes to the bottom/right.

pub mod kernels;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Scalar, Tensor};
pub use kernels::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Shape description of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding,
    /// Transposed (fractionally strided) convolution.
    pub transposed: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, no dilation, same padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding::Same,
            transposed: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = (stride, stride);
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = (dilation, dilation);
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn into_transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// `(k − 1)·dilation + 1` per axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation.0 + 1,
            (self.kernel.1 - 1) * self.dilation.1 + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid(format!("conv spec has a zero field: {self:?}")));
        }
        Ok(())
    }

    /// Weight tensor shape: `[out, in, kh, kw]` for a forward convolution,
    /// `[in, out, kh, kw]` for a transposed one (the layout of the forward
    /// convolution it is the adjoint of).
    pub fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kh, kw]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    /// Output spatial extent of this layer for an `(h, w)` input.
    pub fn output_size(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let eff = self.effective_kernel();
        let axis = |len: usize, k: usize, s: usize| -> Result<usize> {
            match (self.transposed, self.padding) {
                (false, Padding::Same) => Ok(len.div_ceil(s)),
                (false, Padding::Valid) => {
                    if len < k {
                        Err(Error::InvalidShape {
                            op: "conv2d",
                            msg: format!("valid padding: input extent {len} < kernel extent {k}"),
                        })
                    } else {
                        Ok((len - k) / s + 1)
                    }
                }
                (true, Padding::Same) => Ok(len * s),
                (true, Padding::Valid) => Ok((len - 1) * s + k),
            }
        };
        Ok((
            axis(input.0, eff.0, self.stride.0)?,
            axis(input.1, eff.1, self.stride.1)?,
        ))
    }

    /// Loop geometry for an input of shape `[N, in_channels, H, W]`.
    pub fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        self.validate()?;
        let op = if self.transposed {
            "transposed_conv2d"
        } else {
            "conv2d"
        };
        let [n, c, h, w] = match input_shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    op,
                    msg: format!("expected [N, C, H, W], got {input_shape:?}"),
                })
            }
        };
        if c != self.in_channels {
            return Err(Error::InvalidShape {
                op,
                msg: format!("input has {c} channels, layer expects {}", self.in_channels),
            });
        }
        let out = self.output_size((h, w))?;
        let eff = self.effective_kernel();
        // For a transposed layer the correlation runs from its (large)
        // output back to its (small) input.
        let (big, small) = if self.transposed {
            (out, (h, w))
        } else {
            ((h, w), out)
        };
        let pad_before = |big: usize, small: usize, k: usize, s: usize| match self.padding {
            Padding::Valid => 0,
            Padding::Same => ((small - 1) * s + k).saturating_sub(big) / 2,
        };
        let pad = (
            pad_before(big.0, small.0, eff.0, self.stride.0),
            pad_before(big.1, small.1, eff.1, self.stride.1),
        );
        let (ci, co) = if self.transposed {
            (self.out_channels, self.in_channels)
        } else {
            (self.in_channels, self.out_channels)
        };
        Ok(ConvGeometry {
            batch: n,
            in_channels: ci,
            out_channels: co,
            in_size: big,
            out_size: small,
            kernel: self.kernel,
            stride: self.stride,
            dilation: self.dilation,
            pad,
        })
    }
}

/// Trainable parameters of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(name: impl Into<String>, spec: &ConvSpec) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::zeros(spec.weight_shape().to_vec()),
            bias: Tensor::zeros(vec![spec.out_channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Glorot-uniform weights, zero bias.
///
/// Weights are drawn from `U(−L, L)` with `L = sqrt(6 / (fan_in + fan_out))`,
/// `fan_in = in·kh·kw`, `fan_out = out·kh·kw`, in row-major weight order from
/// a SplitMix64 stream seeded by `seed`.
pub fn init_params<T: Scalar>(name: impl Into<String>, spec: &ConvSpec, seed: u64) -> LayerParams<T> {
    let (kh, kw) = spec.kernel;
    let fan_in = spec.in_channels * kh * kw;
    let fan_out = spec.out_channels * kh * kw;
    let limit = glorot_limit(fan_in, fan_out);
    let mut rng = SplitMix64::new(derive_seed(seed, 0x1A7E));
    let weight = Tensor::from_fn(spec.weight_shape().to_vec(), |_| {
        T::from_f64(rng.uniform(-limit, limit))
    });
    LayerParams {
        name: name.into(),
        weight,
        bias: Tensor::zeros(vec![spec.out_channels]),
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> LayerParams<T> {
    /// Records weight and bias as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLayer {
        BoundLayer {
            weight: tape.variable(self.weight.clone()),
            bias: tape.variable(self.bias.clone()),
        }
    }
}

fn check_weight<T: Scalar>(tape: &Tape<T>, spec: &ConvSpec, layer: BoundLayer) -> Result<()> {
    let expected = spec.weight_shape();
    let got = tape.value(layer.weight).shape();
    if got != expected {
        return Err(Error::ShapeMismatch {
            op: "layer weight",
            left: got.to_vec(),
            right: expected.to_vec(),
        });
    }
    Ok(())
}

/// Forward convolution layer (weight and bias bound on `tape`).
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &ConvSpec, layer: BoundLayer) -> Result<Var> {
    if spec.transposed {
        return Err(Error::invalid("conv2d called with a transposed spec"));
    }
    let geom = spec.geometry(tape.value(x).shape())?;
    check_weight(tape, spec, layer)?;
    tape.conv2d(x, layer.weight, Some(layer.bias), geom)
}

/// Transposed convolution layer; with same padding the output is
/// `in · stride` per axis.
pub fn transposed_conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &ConvSpec,
    layer: BoundLayer,
) -> Result<Var> {
    if !spec.transposed {
        return Err(Error::invalid("transposed_conv2d called with a forward spec"));
    }
    let geom = spec.geometry(tape.value(x).shape())?;
    check_weight(tape, spec, layer)?;
    tape.conv_transpose2d(x, layer.weight, Some(layer.bias), geom)
}

/// 2×2 mean pooling with stride 2.
pub fn avg_pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.avg_pool2d(x, 2)
}
