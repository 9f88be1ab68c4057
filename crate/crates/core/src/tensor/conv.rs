//! Strided "same" convolution and its adjoint (transposed convolution),
//! lowered to im2col + GEMM.
//!
//! Batch items run in parallel. Weight gradients are reduced over fixed-size
//! groups of items and then summed in order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Items per partial weight-gradient reduction.
const REDUCE_GROUP: usize = 4;

/// Geometry of a strided convolution from a fine grid (`in_*`) to a coarse
/// grid (`out_*`). A transposed convolution uses the same geometry read
/// backwards: it maps the coarse grid to the fine one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Zero "same" padding: output is `ceil(in / stride)` along each axis.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    ) -> Self {
        assert!(kernel > 0 && stride > 0);
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Input coordinate read by kernel tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Unfolds one `[C, H, W]` image into `[C·k·k, OH·OW]` patch columns.
fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let spatial = g.out_spatial();
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.in_w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `image`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let k = g.kernel;
    let spatial = g.out_spatial();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let v = &mut plane[y * g.in_w + x];
                            *v = *v + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv_shapes(
    op: &'static str,
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    expect_in_channels: usize,
) -> Result<()> {
    if input.len() != 4 {
        return Err(Error::Shape {
            op,
            lhs: input.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    if weight.len() != 4 || weight[2] != weight[3] {
        return Err(Error::Shape {
            op,
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    if input[1] != expect_in_channels {
        return Err(Error::Shape {
            op,
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    let bias_len = if op == "conv2d" { weight[0] } else { weight[1] };
    if bias != [bias_len] {
        return Err(Error::Shape {
            op,
            lhs: weight.to_vec(),
            rhs: bias.to_vec(),
        });
    }
    Ok(())
}

/// `out[b] = W · im2col(x[b]) + bias`, weight laid out `[out, in, k, k]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
    batch: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_plane()];
    let patch = g.patch_len();
    let spatial = g.out_spatial();
    out.par_chunks_mut(g.out_plane())
        .zip(input.par_chunks(g.in_plane()))
        .for_each(|(o, x)| {
            let mut cols = vec![T::zero(); patch * spatial];
            im2col(x, g, &mut cols);
            for (oc, row) in o.chunks_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[oc]);
            }
            T::gemm(
                g.out_channels,
                patch,
                spatial,
                T::one(),
                weight,
                (patch as isize, 1),
                &cols,
                (spatial as isize, 1),
                T::one(),
                o,
                (spatial as isize, 1),
            );
        });
    out
}

/// Parameter gradients are empty when they were not requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    batch: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let patch = g.patch_len();
    let spatial = g.out_spatial();

    let grad_input = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * g.in_plane()];
        dx.par_chunks_mut(g.in_plane())
            .zip(grad_out.par_chunks(g.out_plane()))
            .for_each(|(dx, dy)| {
                let mut dcols = vec![T::zero(); patch * spatial];
                // dcols = Wᵀ · dy
                T::gemm(
                    patch,
                    g.out_channels,
                    spatial,
                    T::one(),
                    weight,
                    (1, patch as isize),
                    dy,
                    (spatial as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (spatial as isize, 1),
                );
                col2im(&dcols, g, dx);
            });
        dx
    });

    if !need_params {
        return ConvGrads {
            input: grad_input,
            weight: Vec::new(),
            bias: Vec::new(),
        };
    }
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .par_chunks(g.in_plane() * REDUCE_GROUP)
        .zip(grad_out.par_chunks(g.out_plane() * REDUCE_GROUP))
        .map(|(xs, dys)| {
            let mut dw = vec![T::zero(); g.weight_len()];
            let mut db = vec![T::zero(); g.out_channels];
            let mut cols = vec![T::zero(); patch * spatial];
            for (x, dy) in xs.chunks(g.in_plane()).zip(dys.chunks(g.out_plane())) {
                im2col(x, g, &mut cols);
                // dw += dy · colsᵀ
                T::gemm(
                    g.out_channels,
                    spatial,
                    patch,
                    T::one(),
                    dy,
                    (spatial as isize, 1),
                    &cols,
                    (1, spatial as isize),
                    T::one(),
                    &mut dw,
                    (patch as isize, 1),
                );
                for (oc, row) in dy.chunks(spatial).enumerate() {
                    db[oc] = db[oc] + row.iter().copied().sum::<T>();
                }
            }
            (dw, db)
        })
        .collect();

    let (weight, bias) = sum_partials(partials, g.weight_len(), g.out_channels);
    ConvGrads {
        input: grad_input,
        weight,
        bias,
    }
}

/// Transposed convolution: `out[b] = col2im(Wᵀ · x[b]) + bias`. The weight
/// is laid out `[in, out, k, k]` where `in` is this op's input channel count,
/// i.e. it is the same buffer a [`conv2d_forward`] from `out` to `in`
/// channels would use, so the two are exact adjoints.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
    batch: usize,
) -> Vec<T> {
    // In `g`, "in" is the fine grid (our output) and "out" the coarse grid.
    let patch = g.patch_len();
    let spatial = g.out_spatial();
    let mut out = vec![T::zero(); batch * g.in_plane()];
    out.par_chunks_mut(g.in_plane())
        .zip(input.par_chunks(g.out_plane()))
        .for_each(|(o, x)| {
            let mut cols = vec![T::zero(); patch * spatial];
            T::gemm(
                patch,
                g.out_channels,
                spatial,
                T::one(),
                weight,
                (1, patch as isize),
                x,
                (spatial as isize, 1),
                T::zero(),
                &mut cols,
                (spatial as isize, 1),
            );
            let plane = g.in_h * g.in_w;
            for (c, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[c]);
            }
            col2im(&cols, g, o);
        });
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    batch: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let patch = g.patch_len();
    let spatial = g.out_spatial();
    let plane = g.in_h * g.in_w;

    let grad_input = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * g.out_plane()];
        dx.par_chunks_mut(g.out_plane())
            .zip(grad_out.par_chunks(g.in_plane()))
            .for_each(|(dx, dy)| {
                let mut cols = vec![T::zero(); patch * spatial];
                im2col(dy, g, &mut cols);
                T::gemm(
                    g.out_channels,
                    patch,
                    spatial,
                    T::one(),
                    weight,
                    (patch as isize, 1),
                    &cols,
                    (spatial as isize, 1),
                    T::zero(),
                    dx,
                    (spatial as isize, 1),
                );
            });
        dx
    });

    if !need_params {
        return ConvGrads {
            input: grad_input,
            weight: Vec::new(),
            bias: Vec::new(),
        };
    }
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .par_chunks(g.out_plane() * REDUCE_GROUP)
        .zip(grad_out.par_chunks(g.in_plane() * REDUCE_GROUP))
        .map(|(xs, dys)| {
            let mut dw = vec![T::zero(); g.weight_len()];
            let mut db = vec![T::zero(); g.in_channels];
            let mut cols = vec![T::zero(); patch * spatial];
            for (x, dy) in xs.chunks(g.out_plane()).zip(dys.chunks(g.in_plane())) {
                im2col(dy, g, &mut cols);
                // dw += x · colsᵀ
                T::gemm(
                    g.out_channels,
                    spatial,
                    patch,
                    T::one(),
                    x,
                    (spatial as isize, 1),
                    &cols,
                    (1, spatial as isize),
                    T::one(),
                    &mut dw,
                    (patch as isize, 1),
                );
                for (c, row) in dy.chunks(plane).enumerate() {
                    db[c] = db[c] + row.iter().copied().sum::<T>();
                }
            }
            (dw, db)
        })
        .collect();

    let (weight, bias) = sum_partials(partials, g.weight_len(), g.in_channels);
    ConvGrads {
        input: grad_input,
        weight,
        bias,
    }
}

fn sum_partials<T: Scalar>(
    partials: Vec<(Vec<T>, Vec<T>)>,
    weight_len: usize,
    bias_len: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); weight_len];
    let mut db = vec![T::zero(); bias_len];
    for (pw, pb) in partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a = *a + b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a = *a + b);
    }
    (dw, db)
}
