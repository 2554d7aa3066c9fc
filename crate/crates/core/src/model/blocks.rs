//! The two multi-branch residual blocks.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BoundLayer, ConvSpec};
use crate::tensor::Scalar;

/// Parameter handles of a whole network, keyed by layer name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    layers: IndexMap<String, BoundLayer>,
}

impl BoundParams {
    pub fn insert(&mut self, name: impl Into<String>, layer: BoundLayer) {
        self.layers.insert(name.into(), layer);
    }

    pub fn get(&self, name: &str) -> Result<BoundLayer> {
        self.layers
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameters bound for layer '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BoundLayer)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn conv_relu<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &ConvSpec,
    layer: BoundLayer,
) -> Result<Var> {
    let y = layers::conv2d(tape, x, spec, layer)?;
    Ok(tape.relu(y))
}

fn expect_channels<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected {channels} input channels, got shape {shape:?}"),
        });
    }
    Ok(())
}

/// Resolution-preserving block: three parallel `k×k` branches (two plain,
/// one dilated), each with ReLU, concatenated, reduced back to `channels` by
/// a 1×1 conv with ReLU, and added to the identity shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionBlock {
    pub channels: usize,
    pub branch_width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl InceptionBlock {
    pub fn new(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            channels,
            branch_width: channels,
            kernel,
            dilation,
        }
    }

    /// `(suffix, spec)` for every convolution, in forward order.
    pub fn layers(&self) -> Vec<(&'static str, ConvSpec)> {
        let (c, b, k) = (self.channels, self.branch_width, self.kernel);
        vec![
            ("conv_a", ConvSpec::new(c, b, k)),
            ("conv_b", ConvSpec::new(c, b, k)),
            ("conv_dilated", ConvSpec::new(c, b, k).with_dilation(self.dilation)),
            ("reduce", ConvSpec::new(3 * b, c, 1)),
        ]
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        prefix: &str,
        params: &BoundParams,
    ) -> Result<Var> {
        expect_channels(tape, x, self.channels, "inception_block")?;
        let specs = self.layers();
        let mut branches = Vec::with_capacity(3);
        for (suffix, spec) in &specs[..3] {
            let layer = params.get(&format!("{prefix}.{suffix}"))?;
            branches.push(conv_relu(tape, x, spec, layer)?);
        }
        let merged = tape.concat_channels(&branches)?;
        let (suffix, spec) = &specs[3];
        let reduced = conv_relu(tape, merged, spec, params.get(&format!("{prefix}.{suffix}"))?)?;
        tape.add(reduced, x)
    }
}

/// Downsampling block: two parallel stride-2 `k×k` convs with ReLU and a
/// 2×2 average pool, concatenated, reduced to `out_channels` by a 1×1 conv
/// with ReLU, plus a stride-2 1×1 shortcut conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_width: usize,
    pub kernel: usize,
}

impl ReductionBlock {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            branch_width: out_channels,
            kernel,
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, ConvSpec)> {
        let (i, o, b, k) = (
            self.in_channels,
            self.out_channels,
            self.branch_width,
            self.kernel,
        );
        vec![
            ("conv_a", ConvSpec::new(i, b, k).with_stride(2)),
            ("conv_b", ConvSpec::new(i, b, k).with_stride(2)),
            // Pooled branch passes the raw `i` channels.
            ("reduce", ConvSpec::new(2 * b + i, o, 1)),
            ("shortcut", ConvSpec::new(i, o, 1).with_stride(2)),
        ]
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        prefix: &str,
        params: &BoundParams,
    ) -> Result<Var> {
        expect_channels(tape, x, self.in_channels, "inception_reduction_block")?;
        let [_, _, h, w] = tape.value(x).dims4("inception_reduction_block")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "inception_reduction_block",
                msg: format!("spatial extents {h}x{w} must be even"),
            });
        }
        let specs = self.layers();
        let name = |s: &str| format!("{prefix}.{s}");
        let a = conv_relu(tape, x, &specs[0].1, params.get(&name(specs[0].0))?)?;
        let b = conv_relu(tape, x, &specs[1].1, params.get(&name(specs[1].0))?)?;
        let pooled = layers::avg_pool2d(tape, x)?;
        let merged = tape.concat_channels(&[a, b, pooled])?;
        let main = conv_relu(tape, merged, &specs[2].1, params.get(&name(specs[2].0))?)?;
        let shortcut = layers::conv2d(tape, x, &specs[3].1, params.get(&name(specs[3].0))?)?;
        tape.add(main, shortcut)
    }
}
