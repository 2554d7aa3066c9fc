//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every target builds a small graph in 64-bit precision from randomized
//! leaves. The scalar probed is `sum(output ⊙ R)` for a fixed random `R`, so
//! every output element contributes with its own weight. For each leaf
//! tensor ("group") the report gives
//!
//! `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|)`
//!
//! where `a` is the backward gradient and `n` the central difference. The
//! group-level denominator keeps elements with near-zero gradient from
//! dominating the figure.
//!
//! Graphs with ReLU or `|·|` are piecewise smooth. A perturbation that moves
//! any kink input to the other side makes the difference quotient
//! meaningless, so such elements are detected through
//! [`Tape::kink_signature`] and counted as skipped instead.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, init_params, ConvSpec, LayerParams};
use crate::model::{BoundParams, InceptionBlock, Irunet, ModelConfig, ParamStore, ReductionBlock};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckLevel {
    Layer,
    Block,
    Model,
}

impl std::str::FromStr for GradcheckLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            _ => Err(Error::invalid(format!("unknown gradcheck level '{s}' (layer, block, model)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckTarget {
    /// add, sub, mul, sigmoid, relu, sum, mean and abs_mean in one graph.
    Elementwise,
    Conv2d,
    Conv2dStrided,
    Conv2dDilated,
    TransposedConv2d,
    TransposedConv2dDilated,
    AvgPool,
    Concat,
    InceptionBlock,
    ReductionBlock,
    TinyModel,
}

impl GradcheckTarget {
    pub const ALL: [GradcheckTarget; 11] = [
        Self::Elementwise,
        Self::Conv2d,
        Self::Conv2dStrided,
        Self::Conv2dDilated,
        Self::TransposedConv2d,
        Self::TransposedConv2dDilated,
        Self::AvgPool,
        Self::Concat,
        Self::InceptionBlock,
        Self::ReductionBlock,
        Self::TinyModel,
    ];

    pub fn level(self) -> GradcheckLevel {
        match self {
            Self::InceptionBlock | Self::ReductionBlock => GradcheckLevel::Block,
            Self::TinyModel => GradcheckLevel::Model,
            _ => GradcheckLevel::Layer,
        }
    }

    pub fn for_level(level: GradcheckLevel) -> Vec<GradcheckTarget> {
        Self::ALL.into_iter().filter(|t| t.level() == level).collect()
    }

    /// 1e-6 for layers and blocks, 1e-4 for the whole network.
    pub fn default_tolerance(self) -> f64 {
        match self.level() {
            GradcheckLevel::Model => 1e-4,
            _ => 1e-6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Elementwise => "elementwise",
            Self::Conv2d => "conv2d",
            Self::Conv2dStrided => "conv2d_stride2",
            Self::Conv2dDilated => "conv2d_dilation2",
            Self::TransposedConv2d => "transposed_conv2d_stride2",
            Self::TransposedConv2dDilated => "transposed_conv2d_dilation2",
            Self::AvgPool => "avg_pool",
            Self::Concat => "concat",
            Self::InceptionBlock => "inception_block",
            Self::ReductionBlock => "inception_reduction_block",
            Self::TinyModel => "tiny_model",
        }
    }
}

impl fmt::Display for GradcheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Overrides the target's default tolerance.
    pub tolerance: Option<f64>,
    pub seed: u64,
    /// Multiplies the backward gradients before comparison. Anything other
    /// than 1 is fault injection.
    pub grad_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: None,
            seed: 0x6c0d,
            grad_scale: 1.0,
        }
    }
}

/// Result for one leaf tensor of one target.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub target: GradcheckTarget,
    pub group: String,
    pub elements: usize,
    /// Elements whose perturbation crossed a ReLU or `|·|` kink.
    pub skipped: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradcheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\tn={}\tskipped={}\tmax_rel={:.3e}\ttol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.target,
            self.group,
            self.elements,
            self.skipped,
            self.max_rel_error,
            self.tolerance
        )
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Problem {
    groups: Vec<(String, Tensor<f64>)>,
    build: Build,
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.next_gaussian())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(lo, hi))
}

/// Glorot weights and small random biases (zero biases would leave the bias
/// gradients of a freshly initialized layer untested against offsets).
fn random_layer(name: &str, spec: &ConvSpec, rng: &mut SplitMix64) -> LayerParams<f64> {
    let mut p: LayerParams<f64> = init_params(name, spec, rng.next_u64());
    p.bias = gaussian(p.bias.shape(), 0.1, rng);
    p
}

fn layer_groups(p: &LayerParams<f64>) -> [(String, Tensor<f64>); 2] {
    [
        (format!("{}.weight", p.name), p.weight.clone()),
        (format!("{}.bias", p.name), p.bias.clone()),
    ]
}

/// Leaves from index 1 onward are (weight, bias) pairs in `names` order.
fn bind_pairs(names: &[String], leaves: &[Var]) -> BoundParams {
    let mut bound = BoundParams::default();
    for (i, name) in names.iter().enumerate() {
        bound.insert(
            name.clone(),
            layers::BoundLayer {
                weight: leaves[1 + 2 * i],
                bias: leaves[2 + 2 * i],
            },
        );
    }
    bound
}

fn conv_problem(spec: ConvSpec, input: [usize; 4], rng: &mut SplitMix64) -> Problem {
    let p = random_layer("layer", &spec, rng);
    let mut groups = vec![("input".to_string(), gaussian(&input, 1.0, rng))];
    groups.extend(layer_groups(&p));
    Problem {
        groups,
        build: Box::new(move |tape, v| {
            let layer = layers::BoundLayer {
                weight: v[1],
                bias: v[2],
            };
            if spec.transposed {
                layers::transposed_conv2d(tape, v[0], &spec, layer)
            } else {
                layers::conv2d(tape, v[0], &spec, layer)
            }
        }),
    }
}

fn block_problem(
    layer_list: Vec<(&'static str, ConvSpec)>,
    input: [usize; 4],
    rng: &mut SplitMix64,
    forward: impl Fn(&mut Tape<f64>, Var, &BoundParams) -> Result<Var> + 'static,
) -> Problem {
    let mut groups = vec![("input".to_string(), gaussian(&input, 1.0, rng))];
    let mut names = Vec::new();
    for (suffix, spec) in &layer_list {
        let name = format!("block.{suffix}");
        groups.extend(layer_groups(&random_layer(&name, spec, rng)));
        names.push(name);
    }
    Problem {
        groups,
        build: Box::new(move |tape, v| forward(tape, v[0], &bind_pairs(&names, v))),
    }
}

fn problem(target: GradcheckTarget, seed: u64) -> Result<Problem> {
    let mut rng = SplitMix64::new(derive_seed(seed, target as u64));
    let rng = &mut rng;
    Ok(match target {
        GradcheckTarget::Elementwise => {
            let groups = vec![
                ("a".to_string(), gaussian(&[2, 3, 2, 2], 1.0, rng)),
                ("b".to_string(), gaussian(&[2, 3, 2, 2], 1.0, rng)),
                ("s".to_string(), gaussian(&[], 1.0, rng)),
            ];
            Problem {
                groups,
                build: Box::new(|tape, v| {
                    let (a, b, s) = (v[0], v[1], v[2]);
                    let ab = tape.mul(a, b)?;
                    let sig = tape.sigmoid(ab);
                    let diff = tape.sub(a, b)?;
                    let r = tape.relu(diff);
                    let sum = tape.add(sig, r)?;
                    let scaled = tape.mul(s, sum)?;
                    let m = tape.mean(scaled)?;
                    let am = tape.abs_mean(a)?;
                    let tot = tape.sum(b)?;
                    let t = tape.add(m, am)?;
                    let t = tape.mul(t, tot)?;
                    // Broadcast the scalar back over a tensor output.
                    tape.add(t, sum)
                }),
            }
        }
        GradcheckTarget::Conv2d => conv_problem(ConvSpec::new(2, 3, 3), [1, 2, 4, 4], rng),
        GradcheckTarget::Conv2dStrided => {
            conv_problem(ConvSpec::new(2, 2, 3).with_stride(2), [1, 2, 5, 5], rng)
        }
        GradcheckTarget::Conv2dDilated => {
            conv_problem(ConvSpec::new(2, 2, 3).with_dilation(2), [1, 2, 5, 5], rng)
        }
        GradcheckTarget::TransposedConv2d => conv_problem(
            ConvSpec::new(2, 2, 3).with_stride(2).into_transposed(),
            [1, 2, 3, 3],
            rng,
        ),
        GradcheckTarget::TransposedConv2dDilated => conv_problem(
            ConvSpec::new(2, 2, 3).with_dilation(2).into_transposed(),
            [1, 2, 4, 4],
            rng,
        ),
        GradcheckTarget::AvgPool => Problem {
            groups: vec![("input".to_string(), gaussian(&[2, 2, 4, 4], 1.0, rng))],
            build: Box::new(|tape, v| layers::avg_pool2d(tape, v[0])),
        },
        GradcheckTarget::Concat => Problem {
            groups: vec![
                ("a".to_string(), gaussian(&[2, 1, 3, 3], 1.0, rng)),
                ("b".to_string(), gaussian(&[2, 2, 3, 3], 1.0, rng)),
            ],
            build: Box::new(|tape, v| {
                let c = tape.concat_channels(&[v[0], v[1], v[0]])?;
                tape.mul(c, c)
            }),
        },
        GradcheckTarget::InceptionBlock => {
            let block = InceptionBlock::new(4, 3, 2);
            block_problem(block.layers(), [1, 4, 8, 8], rng, move |tape, x, p| {
                block.forward(tape, x, "block", p)
            })
        }
        GradcheckTarget::ReductionBlock => {
            let block = ReductionBlock::new(4, 4, 3);
            block_problem(block.layers(), [1, 4, 8, 8], rng, move |tape, x, p| {
                block.forward(tape, x, "block", p)
            })
        }
        GradcheckTarget::TinyModel => {
            let config = ModelConfig::tiny();
            let mut params = ParamStore::new();
            let mut names = Vec::new();
            for (name, spec) in config.layer_specs() {
                params.insert(random_layer(&name, &spec, rng));
                names.push(name);
            }
            let mut groups = vec![("input".to_string(), uniform(&[1, 3, 16, 16], 0.0, 1.0, rng))];
            for p in params.iter() {
                groups.extend(layer_groups(p));
            }
            let model = Irunet::from_parts(config, params)?;
            Problem {
                groups,
                build: Box::new(move |tape, v| {
                    Ok(model.forward_bound(tape, v[0], bind_pairs(&names, v))?.output)
                }),
            }
        }
    })
}

fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Checks one target. Failures are entries with `passed == false`; `Err`
/// only reports a target that could not be built at all.
pub fn gradcheck(target: GradcheckTarget, options: &GradcheckOptions) -> Result<Vec<GradcheckEntry>> {
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let tolerance = options.tolerance.unwrap_or(target.default_tolerance());
    let Problem { groups, build } = problem(target, options.seed)?;

    let mut tape = Tape::new();
    let leaves: Vec<Var> = groups.iter().map(|(_, t)| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let mut rng = SplitMix64::new(derive_seed(options.seed, 0x0e17));
    let weights = gaussian(tape.value(out).shape(), 1.0, &mut rng);
    let loss = weighted_loss(&mut tape, out, &weights)?;
    let base_signature = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(&groups)
        .map(|(&v, (_, t))| match grads.get(v) {
            Some(g) => g.map(|x| x * options.grad_scale),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect();

    let mut values: Vec<Tensor<f64>> = groups.iter().map(|(_, t)| t.clone()).collect();
    let evaluate = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        let loss = weighted_loss(&mut tape, out, &weights)?;
        Ok((tape.value(loss).data()[0], tape.kink_signature()))
    };

    let h = options.step;
    let mut entries = Vec::with_capacity(groups.len());
    for (g, (name, _)) in groups.iter().enumerate() {
        let n = values[g].len();
        let mut skipped = 0;
        let mut max_abs_error: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            let original = values[g].data()[i];
            values[g].data_mut()[i] = original + h;
            let (plus, sig_plus) = evaluate(&values)?;
            values[g].data_mut()[i] = original - h;
            let (minus, sig_minus) = evaluate(&values)?;
            values[g].data_mut()[i] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[g].data()[i];
            max_abs_error = max_abs_error.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel_error = if scale > 0.0 {
            max_abs_error / scale
        } else {
            max_abs_error
        };
        // A check that skipped most of its elements proves nothing.
        let passed = max_rel_error < tolerance && skipped * 10 <= n;
        entries.push(GradcheckEntry {
            target,
            group: name.clone(),
            elements: n,
            skipped,
            max_abs_error,
            max_rel_error,
            tolerance,
            passed,
        });
    }
    Ok(entries)
}

/// Runs every target of `level`.
pub fn gradcheck_level(level: GradcheckLevel, options: &GradcheckOptions) -> Result<Vec<GradcheckEntry>> {
    let mut all = Vec::new();
    for target in GradcheckTarget::for_level(level) {
        all.extend(gradcheck(target, options)?);
    }
    Ok(all)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_passes() {
        let entries = gradcheck(GradcheckTarget::Conv2d, &GradcheckOptions::default()).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            assert!(e.passed, "{e}");
        }
    }

    #[test]
    fn scaled_gradient_is_reported() {
        let options = GradcheckOptions {
            grad_scale: 1.01,
            ..Default::default()
        };
        let entries = gradcheck(GradcheckTarget::Conv2d, &options).unwrap();
        assert!(entries.iter().all(|e| !e.passed));
        assert!(entries.iter().all(|e| e.max_rel_error > 5e-3));
    }

    #[test]
    fn level_parse() {
        assert_eq!("block".parse::<GradcheckLevel>().unwrap(), GradcheckLevel::Block);
        assert!("net".parse::<GradcheckLevel>().is_err());
    }
}
