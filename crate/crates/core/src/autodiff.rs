//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values it produced. [`Tape::backward`] then walks the records in reverse
//! order and accumulates gradients for every value that depends on a
//! [`Tape::variable`]. Values created with [`Tape::input`] are constants.
//!
//! Records are appended only after their inputs exist, so the tape is always
//! in topological order.
//!
//! ```
//! use irunet_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::new(vec![1], vec![3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::layers::kernels::{self, ConvGeometry};
use crate::tensor::{pairwise_sum, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// How a binary elementwise op lines up its operands.
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    ScalarLeft,
    ScalarRight,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of which side of its kink every ReLU and |·| input lies
    /// on. Two forward passes with equal fingerprints are on the same
    /// piecewise-smooth region, so finite differences between them are valid.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::AbsMean(x) => x,
                _ => continue,
            };
            for v in self.value(x).data() {
                let side = match v.partial_cmp(&T::zero()) {
                    Some(std::cmp::Ordering::Greater) => 1u8,
                    Some(std::cmp::Ordering::Less) => 2,
                    _ => 3,
                };
                h = (h ^ u64::from(side)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf (a parameter, or an input under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn pairing(&self, op: &'static str, a: Var, b: Var) -> Result<Pairing> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Pairing::Same)
        } else if sa.is_empty() {
            Ok(Pairing::ScalarLeft)
        } else if sb.is_empty() {
            Ok(Pairing::ScalarRight)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        Ok(match self.pairing(op, a, b)? {
            Pairing::Same => ta.zip_with(tb, op, f)?,
            Pairing::ScalarLeft => {
                let s = ta.data()[0];
                tb.map(|v| f(s, v))
            }
            Pairing::ScalarRight => {
                let s = tb.data()[0];
                ta.map(|v| f(v, s))
            }
        })
    }

    /// `a + b`; equal shapes, or one side a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push_derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push_derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push_derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_derived(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("sum"));
        }
        let v = Tensor::scalar(t.sum());
        Ok(self.push_derived(v, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let v = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        Ok(self.push_derived(v, Op::Mean(a), &[a]))
    }

    /// Mean of absolute values.
    pub fn abs_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("abs_mean"));
        }
        let abs: Vec<T> = t.data().iter().map(|v| v.abs()).collect();
        let v = Tensor::scalar(pairwise_sum(&abs) / T::from_f64(t.len() as f64));
        Ok(self.push_derived(v, Op::AbsMean(a), &[a]))
    }

    fn check_conv_operand(&self, op: &'static str, v: Var, expected: [usize; 4]) -> Result<()> {
        let got = self.value(v).shape();
        if got != expected {
            return Err(Error::ShapeMismatch {
                op,
                left: got.to_vec(),
                right: expected.to_vec(),
            });
        }
        Ok(())
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let got = self.value(b).shape();
            if got != [channels] {
                return Err(Error::ShapeMismatch {
                    op,
                    left: got.to_vec(),
                    right: vec![channels],
                });
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: [N, Ci, H, W]` with `weight: [Co, Ci, KH,
    /// KW]` per `geom`, plus an optional per-channel bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let g = geom;
        self.check_conv_operand(
            "conv2d",
            x,
            [g.batch, g.in_channels, g.in_size.0, g.in_size.1],
        )?;
        self.check_conv_operand(
            "conv2d",
            weight,
            [g.out_channels, g.in_channels, g.kernel.0, g.kernel.1],
        )?;
        self.check_bias("conv2d", bias, g.out_channels)?;
        let y = kernels::correlate(
            &g,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![g.batch, g.out_channels, g.out_size.0, g.out_size.1];
        let mut deps = vec![x, weight];
        deps.extend(bias);
        Ok(self.push_derived(
            Tensor::from_parts(shape, y),
            Op::Conv2d {
                x,
                weight,
                bias,
                geom: g,
            },
            &deps,
        ))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] under `geom`,
    /// mapping `x: [N, Co, OH, OW]` to `[N, Ci, H, W]`. The weight keeps the
    /// forward layout `[Co, Ci, KH, KW]`; the bias is `[Ci]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let g = geom;
        self.check_conv_operand(
            "conv_transpose2d",
            x,
            [g.batch, g.out_channels, g.out_size.0, g.out_size.1],
        )?;
        self.check_conv_operand(
            "conv_transpose2d",
            weight,
            [g.out_channels, g.in_channels, g.kernel.0, g.kernel.1],
        )?;
        self.check_bias("conv_transpose2d", bias, g.in_channels)?;
        let mut y = kernels::correlate_adjoint(&g, self.value(x).data(), self.value(weight).data());
        if let Some(b) = bias {
            let plane = g.in_size.0 * g.in_size.1;
            let b = self.value(b).data();
            for (i, chunk) in y.chunks_mut(plane).enumerate() {
                let bv = b[i % g.in_channels];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let shape = vec![g.batch, g.in_channels, g.in_size.0, g.in_size.1];
        let mut deps = vec![x, weight];
        deps.extend(bias);
        Ok(self.push_derived(
            Tensor::from_parts(shape, y),
            Op::ConvTranspose2d {
                x,
                weight,
                bias,
                geom: g,
            },
            &deps,
        ))
    }

    /// Non-overlapping mean pooling with a square window and equal stride.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let dims = self.value(x).dims4("avg_pool2d")?;
        let [n, c, h, w] = dims;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                msg: format!("spatial extents {h}x{w} not divisible by window {window}"),
            });
        }
        let y = kernels::avg_pool(self.value(x).data(), dims, window);
        let shape = vec![n, c, h / window, w / window];
        Ok(self.push_derived(Tensor::from_parts(shape, y), Op::AvgPool { x, window }, &[x]))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_channels"))?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            channels += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * plane..][..pc * plane]);
            }
        }
        let shape = vec![n, channels, h, w];
        Ok(self.push_derived(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 || !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contribution) in self.local_grads(node, &g) {
                accumulate(&mut grads[target.0], contribution);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one record, restricted to inputs that
    /// need a gradient.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let p = self.pairing("add", *a, *b).expect("recorded op");
                if wants(*a) {
                    out.push((*a, reduce_to(g, p, Side::Left)));
                }
                if wants(*b) {
                    out.push((*b, reduce_to(g, p, Side::Right)));
                }
            }
            Op::Sub(a, b) => {
                let p = self.pairing("sub", *a, *b).expect("recorded op");
                if wants(*a) {
                    out.push((*a, reduce_to(g, p, Side::Left)));
                }
                if wants(*b) {
                    out.push((*b, reduce_to(&g.map(|v| -v), p, Side::Right)));
                }
            }
            Op::Mul(a, b) => {
                let p = self.pairing("mul", *a, *b).expect("recorded op");
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    out.push((*a, reduce_to(&times(g, tb, p, Side::Left), p, Side::Left)));
                }
                if wants(*b) {
                    out.push((*b, reduce_to(&times(g, ta, p, Side::Right), p, Side::Right)));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .zip_with(x, "relu", |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("recorded op");
                out.push((*a, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .zip_with(&node.value, "sigmoid", |gv, y| gv * y * (T::one() - y))
                    .expect("recorded op");
                out.push((*a, d));
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                out.push((*a, Tensor::full(self.value(*a).shape(), gs)));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gs = g.data()[0] / T::from_f64(x.len() as f64);
                out.push((*a, Tensor::full(x.shape(), gs)));
            }
            Op::AbsMean(a) => {
                let x = self.value(*a);
                let gs = g.data()[0] / T::from_f64(x.len() as f64);
                out.push((*a, x.map(|v| sign(v) * gs)));
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let dy = g.data();
                if wants(*x) {
                    let dx = kernels::correlate_adjoint(geom, dy, self.value(*weight).data());
                    out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
                }
                if wants(*weight) {
                    let dw = kernels::correlate_weight_grad(geom, self.value(*x).data(), dy);
                    out.push((
                        *weight,
                        Tensor::from_parts(self.value(*weight).shape().to_vec(), dw),
                    ));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let plane = geom.out_size.0 * geom.out_size.1;
                    let db = kernels::channel_sums(dy, geom.batch, geom.out_channels, plane);
                    out.push((b, Tensor::from_parts(vec![geom.out_channels], db)));
                }
            }
            Op::ConvTranspose2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let dy = g.data();
                if wants(*x) {
                    let dx = kernels::correlate(geom, dy, self.value(*weight).data(), None);
                    out.push((*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx)));
                }
                if wants(*weight) {
                    let dw = kernels::correlate_weight_grad(geom, dy, self.value(*x).data());
                    out.push((
                        *weight,
                        Tensor::from_parts(self.value(*weight).shape().to_vec(), dw),
                    ));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let plane = geom.in_size.0 * geom.in_size.1;
                    let db = kernels::channel_sums(dy, geom.batch, geom.in_channels, plane);
                    out.push((b, Tensor::from_parts(vec![geom.in_channels], db)));
                }
            }
            Op::AvgPool { x, window } => {
                let shape = self.value(*x).shape().to_vec();
                let dims = [shape[0], shape[1], shape[2], shape[3]];
                let dx = kernels::avg_pool_backward(g.data(), dims, *window);
                out.push((*x, Tensor::from_parts(shape, dx)));
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = [g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]];
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            d.extend_from_slice(&g.data()[(b * total + offset) * plane..][..pc * plane]);
                        }
                        out.push((p, Tensor::from_parts(vec![n, pc, h, w], d)));
                    }
                    offset += pc;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_to<T: Scalar>(g: &Tensor<T>, p: Pairing, side: Side) -> Tensor<T> {
    match (p, side) {
        (Pairing::ScalarLeft, Side::Left) | (Pairing::ScalarRight, Side::Right) => {
            Tensor::scalar(g.sum())
        }
        _ => g.clone(),
    }
}

/// `g ⊙ other`, where `other` is the operand opposite to `side`.
fn times<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, p: Pairing, side: Side) -> Tensor<T> {
    let other_is_scalar = matches!(
        (p, side),
        (Pairing::ScalarRight, Side::Left) | (Pairing::ScalarLeft, Side::Right)
    );
    if other_is_scalar {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else {
        g.zip_with(other, "mul", |a, b| a * b).expect("recorded op")
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Sign with `sign(0) = 0`.
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.input(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let y = tape.input(t(&[2], &[3.0, 4.0]));
        let sum = tape.add(x, y).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
    }

    #[test]
    fn binary_shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(vec![2, 2]));
        let b = tape.input(Tensor::zeros(vec![4]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[4], &[-1.0, 1.0, -3.0, 3.0]));
        let m = tape.abs_mean(a).unwrap();
        assert_eq!(tape.value(m).item(), Some(2.0));
        let z = tape.input(Tensor::zeros(vec![5]));
        let mz = tape.mean(z).unwrap();
        assert_eq!(tape.value(mz).item(), Some(0.0));
        let o = tape.input(Tensor::ones(vec![4, 4]));
        let so = tape.sum(o).unwrap();
        assert_eq!(tape.value(so).item(), Some(16.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(vec![2, 3, 4]));
    }

    #[test]
    fn square_mean_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_and_unreached_values_have_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.input(t(&[2], &[1.0, 2.0]));
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let unused = tape.variable(t(&[2], &[5.0, 5.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let s = tape.variable(Tensor::scalar(2.0));
        let x = tape.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.mul(s, x).unwrap();
        let z = tape.sub(y, s).unwrap();
        let root = tape.sum(z).unwrap();
        let g = tape.backward(root).unwrap();
        // d/ds sum(s*x - s) = sum(x) - 3
        assert_eq!(g.get(s).unwrap().item(), Some(3.0));
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(vec![2, 2, 3, 3]));
        let b = tape.input(Tensor::ones(vec![2, 3, 3, 3]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 5, 3, 3]);
        let single = tape.concat_channels(&[b]).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        let bad = tape.input(Tensor::zeros(vec![2, 1, 4, 3]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn abs_mean_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[4], &[0.0, 1.0, -2.0, 0.0]));
        let m = tape.abs_mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25, -0.25, 0.0]);
    }

    #[test]
    fn empty_reduction_rejected() {
        let mut tape = Tape::<f32>::new();
        // Rank-0 tensors always hold one value, so emptiness cannot be
        // constructed; concat of nothing is the empty case.
        assert!(matches!(tape.concat_channels(&[]), Err(Error::Empty(_))));
    }
}
