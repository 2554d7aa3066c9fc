//! The multiscale inception encoder-decoder.
//!
//! Topology for an input `[N, 3, H, W]` (H and W divisible by 16):
//!
//! ```text
//! head     conv k×k 3→base + ReLU                          H
//! enc0..3  reduction block → inception block             H/2 .. H/16 (latent)
//! dec0..3  transposed conv ×2, concat skip, 1×1 merge
//!          + ReLU, inception block                       H/8 .. H
//! tail     conv k×k base→3 + sigmoid                       H
//! ```
//!
//! Decoder stage `j` upsamples to the resolution of encoder stage `2 − j`
//! and concatenates that stage's inception output; the last stage joins the
//! head activation at full resolution.

mod blocks;
pub mod checkpoint;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, init_params, ConvSpec, LayerParams};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

pub use blocks::{BoundParams, InceptionBlock, ReductionBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Number of stride-2 stages; inputs must be divisible by `2^STAGES`.
pub const STAGES: usize = 4;
pub const SPATIAL_MULTIPLE: usize = 1 << STAGES;
/// Trainable-parameter count reported for the reference network.
pub const REFERENCE_PARAM_COUNT: usize = 123_379;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub stage_widths: [usize; STAGES],
    pub kernel: usize,
    pub dilation_rate: usize,
    /// Noise levels the model is meant for; recorded, not used by the network.
    pub sigma_range: (u32, u32),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 8,
            stage_widths: [12, 16, 20, 32],
            kernel: 3,
            dilation_rate: 2,
            sigma_range: (0, 50),
        }
    }
}

impl ModelConfig {
    /// Two channels everywhere; used for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            base_width: 2,
            stage_widths: [2; STAGES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 || self.stage_widths.contains(&0) {
            return Err(Error::invalid("model widths must be positive"));
        }
        if self.stage_widths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!(
                "stage widths must be ascending, got {:?}",
                self.stage_widths
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.dilation_rate == 0 {
            return Err(Error::invalid("dilation rate must be at least 1"));
        }
        if self.sigma_range.0 > self.sigma_range.1 {
            return Err(Error::invalid("sigma range is reversed"));
        }
        Ok(())
    }

    fn encoder_blocks(&self) -> Vec<(ReductionBlock, InceptionBlock)> {
        let mut prev = self.base_width;
        self.stage_widths
            .iter()
            .map(|&c| {
                let r = ReductionBlock::new(prev, c, self.kernel);
                prev = c;
                (r, InceptionBlock::new(c, self.kernel, self.dilation_rate))
            })
            .collect()
    }

    /// `(upsample, merge, inception)` per decoder stage, deepest first.
    fn decoder_blocks(&self) -> Vec<(ConvSpec, ConvSpec, InceptionBlock)> {
        let w = &self.stage_widths;
        let lows = [w[2], w[1], w[0], self.base_width];
        let mut hi = w[3];
        lows.iter()
            .map(|&lo| {
                let up = ConvSpec::new(hi, lo, self.kernel)
                    .with_stride(2)
                    .into_transposed();
                hi = lo;
                (
                    up,
                    ConvSpec::new(2 * lo, lo, 1),
                    InceptionBlock::new(lo, self.kernel, self.dilation_rate),
                )
            })
            .collect()
    }

    /// Every convolution of the network in forward order.
    pub fn layer_specs(&self) -> Vec<(String, ConvSpec)> {
        let mut out = vec![(
            "head".to_string(),
            ConvSpec::new(self.input_channels, self.base_width, self.kernel),
        )];
        for (i, (red, inc)) in self.encoder_blocks().iter().enumerate() {
            for (s, spec) in red.layers() {
                out.push((format!("enc{i}.reduction.{s}"), spec));
            }
            for (s, spec) in inc.layers() {
                out.push((format!("enc{i}.inception.{s}"), spec));
            }
        }
        for (j, (up, merge, inc)) in self.decoder_blocks().iter().enumerate() {
            out.push((format!("dec{j}.upsample"), *up));
            out.push((format!("dec{j}.merge"), *merge));
            for (s, spec) in inc.layers() {
                out.push((format!("dec{j}.inception.{s}"), spec));
            }
        }
        out.push((
            "tail".to_string(),
            ConvSpec::new(self.base_width, self.input_channels, self.kernel),
        ));
        out
    }
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .layer_specs()
        .iter()
        .map(|(_, spec)| spec.param_count())
        .sum()
}

/// Named parameters of every layer, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    layers: IndexMap<String, LayerParams<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            layers: IndexMap::new(),
        }
    }

    /// Glorot-initialized parameters; layer `i` draws from a stream derived
    /// from `(seed, i)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let layers = config
            .layer_specs()
            .into_iter()
            .enumerate()
            .map(|(i, (name, spec))| {
                let p = init_params(name.clone(), &spec, derive_seed(seed, i as u64));
                (name, p)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|(name, spec)| {
                let p = LayerParams::zeros(name.clone(), &spec);
                (name, p)
            })
            .collect();
        Self { layers }
    }

    pub fn insert(&mut self, params: LayerParams<T>) {
        self.layers.insert(params.name.clone(), params);
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams<T>> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams<T>> {
        self.layers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.layers.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.layers.values_mut()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(LayerParams::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|p| p.weight.all_finite() && p.bias.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that the store holds exactly the layers of `config` with
    /// matching shapes.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.layer_specs();
        if specs.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "config has {} layers, parameters have {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for (name, spec) in &specs {
            let p = self
                .layers
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameters for layer '{name}'")))?;
            if p.weight.shape() != spec.weight_shape() || p.bias.shape() != [spec.out_channels] {
                return Err(Error::invalid(format!(
                    "layer '{name}': weight {:?} / bias {:?} do not match {:?} / [{}]",
                    p.weight.shape(),
                    p.bias.shape(),
                    spec.weight_shape(),
                    spec.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut bound = BoundParams::default();
        for (name, p) in &self.layers {
            bound.insert(name.clone(), p.bind(tape));
        }
        bound
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub latent: Var,
    /// Inception outputs of encoder stages 0..=3 (the last is the latent).
    pub encoder_outputs: Vec<Var>,
    pub params: BoundParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Irunet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Irunet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore<T>) {
        (self.config, self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> Irunet<U> {
        Irunet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    op: "forward",
                    msg: format!("expected [N, C, H, W], got {shape:?}"),
                })
            }
        };
        if c != self.config.input_channels {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("expected {} channels, got {c}", self.config.input_channels),
            });
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("spatial extents {h}x{w} must be divisible by {SPATIAL_MULTIPLE}"),
            });
        }
        Ok(())
    }

    /// Records the full network on `tape`, binding fresh parameter leaves.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardPass> {
        let params = self.params.bind(tape);
        self.forward_bound(tape, x, params)
    }

    /// Like [`Irunet::forward`] but with parameters already on the tape.
    pub fn forward_bound(&self, tape: &mut Tape<T>, x: Var, params: BoundParams) -> Result<ForwardPass> {
        self.check_input_shape(tape.value(x).shape())?;
        let cfg = &self.config;
        let head_spec = ConvSpec::new(cfg.input_channels, cfg.base_width, cfg.kernel);
        let head = layers::conv2d(tape, x, &head_spec, params.get("head")?)?;
        let head = tape.relu(head);

        let mut h = head;
        let mut encoder_outputs = Vec::with_capacity(STAGES);
        for (i, (red, inc)) in cfg.encoder_blocks().iter().enumerate() {
            h = red.forward(tape, h, &format!("enc{i}.reduction"), &params)?;
            h = inc.forward(tape, h, &format!("enc{i}.inception"), &params)?;
            encoder_outputs.push(h);
        }
        let latent = h;

        // Skip sources from shallow to deep: head, enc0, enc1, enc2.
        let mut skips = vec![head];
        skips.extend_from_slice(&encoder_outputs[..STAGES - 1]);
        for (j, (up, merge, inc)) in cfg.decoder_blocks().iter().enumerate() {
            let upsampled = layers::transposed_conv2d(tape, h, up, params.get(&format!("dec{j}.upsample"))?)?;
            let skip = skips[STAGES - 1 - j];
            let joined = tape.concat_channels(&[upsampled, skip])?;
            let merged = layers::conv2d(tape, joined, merge, params.get(&format!("dec{j}.merge"))?)?;
            let merged = tape.relu(merged);
            h = inc.forward(tape, merged, &format!("dec{j}.inception"), &params)?;
        }

        let tail_spec = ConvSpec::new(cfg.base_width, cfg.input_channels, cfg.kernel);
        let logits = layers::conv2d(tape, h, &tail_spec, params.get("tail")?)?;
        let output = tape.sigmoid(logits);
        Ok(ForwardPass {
            output,
            latent,
            encoder_outputs,
            params,
        })
    }

    /// Inference: denoises a `[N, 3, H, W]` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input_shape(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        Ok(tape.value(pass.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_light() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert!(param_count(&cfg) <= 150_000);
    }

    #[test]
    fn store_count_matches_formula() {
        let cfg = ModelConfig::default();
        let store: ParamStore<f32> = ParamStore::init(&cfg, 1);
        assert_eq!(store.param_count(), param_count(&cfg));
        store.check_against(&cfg).unwrap();
    }

    #[test]
    fn layer_names_unique() {
        let specs = ModelConfig::default().layer_specs();
        let mut names: Vec<_> = specs.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig {
            stage_widths: [32, 16, 20, 40],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            kernel: 2,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Irunet::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(vec![1, 3, 24, 16])).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 1, 16, 16])).is_err());
    }
}
