//! Direct convolution loop nests.
//!
//! All three kernels share one [`ConvGeometry`] describing a strided,
//! dilated, zero-padded cross-correlation from an "input side" tensor
//! `[N, Ci, H, W]` to an "output side" tensor `[N, Co, OH, OW]` with weights
//! `[Co, Ci, KH, KW]`. Output cell `(oh, ow)` reads input cell
//! `(oh·sh + i·dh − pad_top, ow·sw + j·dw − pad_left)` for tap `(i, j)`.
//!
//! The transposed convolution is [`correlate_adjoint`] applied as a forward
//! map, so the adjoint identity holds by construction.

use crate::parallel;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// Zero padding before the first row / column. Padding after is
    /// whatever the output size implies.
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_size.0 * self.in_size.1
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_size.0 * self.out_size.1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn work(&self) -> usize {
        self.output_len() * self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// Output indices `o` in `0..out_len` such that `o·stride + offset` lands in
/// `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        (-offset as usize).div_ceil(stride)
    };
    let reach = in_len as isize - offset;
    let hi = if reach <= 0 {
        0
    } else {
        (reach as usize).div_ceil(stride).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Tap offsets and valid output ranges for one kernel position.
struct Tap {
    row_offset: isize,
    col_offset: isize,
    rows: (usize, usize),
    cols: (usize, usize),
}

fn taps(g: &ConvGeometry) -> Vec<Tap> {
    let mut out = Vec::with_capacity(g.kernel.0 * g.kernel.1);
    for i in 0..g.kernel.0 {
        let row_offset = (i * g.dilation.0) as isize - g.pad.0 as isize;
        let rows = valid_range(g.out_size.0, g.in_size.0, g.stride.0, row_offset);
        for j in 0..g.kernel.1 {
            let col_offset = (j * g.dilation.1) as isize - g.pad.1 as isize;
            let cols = valid_range(g.out_size.1, g.in_size.1, g.stride.1, col_offset);
            out.push(Tap {
                row_offset,
                col_offset,
                rows,
                cols,
            });
        }
    }
    out
}

/// `y = correlate(x, w) + b`, with `b` broadcast over each output plane.
#[allow(clippy::needless_range_loop)]
pub fn correlate<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    debug_assert_eq!(x.len(), g.input_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let (h, wd) = g.in_size;
    let (oh_len, ow_len) = g.out_size;
    let in_plane = h * wd;
    let out_plane = oh_len * ow_len;
    let kk = g.kernel.0 * g.kernel.1;
    let taps = taps(g);
    let mut y = vec![T::zero(); g.output_len()];
    parallel::for_each_chunk(&mut y, out_plane, g.work(), |idx, plane| {
        let (n, co) = (idx / g.out_channels, idx % g.out_channels);
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..g.in_channels {
            let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
            let wk = &w[(co * g.in_channels + ci) * kk..][..kk];
            for (tap, &wv) in taps.iter().zip(wk) {
                for oh in tap.rows.0..tap.rows.1 {
                    let ih = (oh * g.stride.0) as isize + tap.row_offset;
                    let xrow = &xp[ih as usize * wd..][..wd];
                    let yrow = &mut plane[oh * ow_len..][..ow_len];
                    for ow in tap.cols.0..tap.cols.1 {
                        let iw = ((ow * g.stride.1) as isize + tap.col_offset) as usize;
                        yrow[ow] = yrow[ow] + wv * xrow[iw];
                    }
                }
            }
        }
    });
    y
}

/// Adjoint of [`correlate`] with respect to its input: maps an output-side
/// tensor back to the input side.
#[allow(clippy::needless_range_loop)]
pub fn correlate_adjoint<T: Scalar>(g: &ConvGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    debug_assert_eq!(dy.len(), g.output_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let (h, wd) = g.in_size;
    let (oh_len, ow_len) = g.out_size;
    let in_plane = h * wd;
    let out_plane = oh_len * ow_len;
    let kk = g.kernel.0 * g.kernel.1;
    let taps = taps(g);
    let mut dx = vec![T::zero(); g.input_len()];
    parallel::for_each_chunk(&mut dx, in_plane, g.work(), |idx, plane| {
        let (n, ci) = (idx / g.in_channels, idx % g.in_channels);
        for co in 0..g.out_channels {
            let dyp = &dy[(n * g.out_channels + co) * out_plane..][..out_plane];
            let wk = &w[(co * g.in_channels + ci) * kk..][..kk];
            for (tap, &wv) in taps.iter().zip(wk) {
                for oh in tap.rows.0..tap.rows.1 {
                    let ih = ((oh * g.stride.0) as isize + tap.row_offset) as usize;
                    let dyrow = &dyp[oh * ow_len..][..ow_len];
                    let xrow = &mut plane[ih * wd..][..wd];
                    for ow in tap.cols.0..tap.cols.1 {
                        let iw = ((ow * g.stride.1) as isize + tap.col_offset) as usize;
                        xrow[iw] = xrow[iw] + wv * dyrow[ow];
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of `⟨correlate(x, w), dy⟩` with respect to `w`.
#[allow(clippy::needless_range_loop)]
pub fn correlate_weight_grad<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T]) -> Vec<T> {
    debug_assert_eq!(x.len(), g.input_len());
    debug_assert_eq!(dy.len(), g.output_len());
    let (h, wd) = g.in_size;
    let (oh_len, ow_len) = g.out_size;
    let in_plane = h * wd;
    let out_plane = oh_len * ow_len;
    let kk = g.kernel.0 * g.kernel.1;
    let taps = taps(g);
    let mut dw = vec![T::zero(); g.weight_len()];
    parallel::for_each_chunk(&mut dw, g.in_channels * kk, g.work(), |co, wrow| {
        for ci in 0..g.in_channels {
            for (k, tap) in taps.iter().enumerate() {
                let mut acc = T::zero();
                for n in 0..g.batch {
                    let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
                    let dyp = &dy[(n * g.out_channels + co) * out_plane..][..out_plane];
                    for oh in tap.rows.0..tap.rows.1 {
                        let ih = ((oh * g.stride.0) as isize + tap.row_offset) as usize;
                        let xrow = &xp[ih * wd..][..wd];
                        let dyrow = &dyp[oh * ow_len..][..ow_len];
                        for ow in tap.cols.0..tap.cols.1 {
                            let iw = ((ow * g.stride.1) as isize + tap.col_offset) as usize;
                            acc = acc + xrow[iw] * dyrow[ow];
                        }
                    }
                }
                wrow[ci * kk + k] = acc;
            }
        }
    });
    dw
}

/// Per-channel sum over batch and space of an `[N, C, H, W]` buffer.
pub fn channel_sums<T: Scalar>(dy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            (0..batch).fold(T::zero(), |acc, n| {
                let p = &dy[(n * channels + c) * plane..][..plane];
                p.iter().fold(acc, |a, &v| a + v)
            })
        })
        .collect()
}

/// Non-overlapping `window × window` mean pooling over `[N, C, H, W]`.
pub fn avg_pool<T: Scalar>(x: &[T], dims: [usize; 4], window: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_f64((window * window) as f64);
    let mut y = vec![T::zero(); n * c * oh * ow];
    parallel::for_each_chunk(&mut y, oh * ow, n * c * h * w, |idx, plane| {
        let xp = &x[idx * h * w..][..h * w];
        for r in 0..oh {
            for s in 0..ow {
                let mut acc = T::zero();
                for i in 0..window {
                    for j in 0..window {
                        acc = acc + xp[(r * window + i) * w + s * window + j];
                    }
                }
                plane[r * ow + s] = acc * scale;
            }
        }
    });
    y
}

/// Backward of [`avg_pool`]: each input cell receives its window's gradient
/// divided by the window area.
pub fn avg_pool_backward<T: Scalar>(dy: &[T], dims: [usize; 4], window: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_f64((window * window) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    parallel::for_each_chunk(&mut dx, h * w, n * c * h * w, |idx, plane| {
        let dyp = &dy[idx * oh * ow..][..oh * ow];
        for r in 0..h {
            for s in 0..w {
                plane[r * w + s] = dyp[(r / window) * ow + s / window] * scale;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_correlate(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (h, wd) = g.in_size;
        let (oh, ow) = g.out_size;
        let (kh, kw) = g.kernel;
        let mut y = vec![0.0; g.output_len()];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for r in 0..oh {
                    for s in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.in_channels {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (r * g.stride.0 + i * g.dilation.0) as isize
                                        - g.pad.0 as isize;
                                    let iw = (s * g.stride.1 + j * g.dilation.1) as isize
                                        - g.pad.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.in_channels + ci) * h + ih as usize) * wd
                                        + iw as usize]
                                        * w[((co * g.in_channels + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        y[((n * g.out_channels + co) * oh + r) * ow + s] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn valid_range_bounds() {
        // offset -1, stride 2, 5 inputs, 3 outputs: o=0 -> -1 (skip), o=1 -> 1, o=2 -> 3
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(4, 4, 1, 2), (0, 2));
        assert_eq!(valid_range(4, 2, 1, 5), (0, 0));
    }

    #[test]
    fn matches_brute_force_with_stride_dilation_padding() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 3,
            out_channels: 2,
            in_size: (7, 6),
            out_size: (4, 3),
            kernel: (3, 2),
            stride: (2, 2),
            dilation: (2, 1),
            pad: (2, 0),
        };
        let mut rng = crate::rng::SplitMix64::new(5);
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let fast = correlate(&g, &x, &w, None);
        let slow = brute_correlate(&g, &x, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_backward_spreads_quarter() {
        let dy = vec![1.0f64; 4];
        let dx = avg_pool_backward(&dy, [1, 1, 4, 4], 2);
        assert!(dx.iter().all(|&v| v == 0.25));
    }
}
