//! Convolution and pooling kernels on raw row-major buffers.

use rayon::prelude::*;

use crate::tensor::gemm;

/// Geometry of a 2-D convolution over one `[C × H × W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds receptive fields into `cols[(c, ky, kx), (oy, ox)]`.
fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
fn col2im(g: &ConvGeom, cols: &[f64], out: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched forward convolution. `input` is `[N × C × H × W]`, `weight` is
/// `[O × C × kh × kw]`, `bias` is `[O]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(input.par_chunks(g.in_len()))
        .for_each(|(o, x)| {
            let mut cols = vec![0.0; g.patch_len() * g.positions()];
            im2col(g, x, &mut cols);
            gemm(
                g.out_channels,
                g.patch_len(),
                g.positions(),
                weight,
                false,
                &cols,
                false,
                0.0,
                o,
            );
            if let Some(b) = bias {
                for (oc, plane) in o.chunks_mut(g.positions()).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[oc]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv2d_forward`]. Per-sample weight gradients are
/// reduced in sample order, so the result does not depend on scheduling.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let x = &input[n * g.in_len()..(n + 1) * g.in_len()];
            let go = &grad_out[n * g.out_len()..(n + 1) * g.out_len()];
            let mut cols = vec![0.0; g.patch_len() * g.positions()];
            im2col(g, x, &mut cols);
            let mut dw = vec![0.0; g.out_channels * g.patch_len()];
            gemm(
                g.out_channels,
                g.positions(),
                g.patch_len(),
                go,
                false,
                &cols,
                true,
                0.0,
                &mut dw,
            );
            let db: Vec<f64> = go.chunks(g.positions()).map(|p| p.iter().sum()).collect();
            let dx = need_input_grad.then(|| {
                gemm(
                    g.patch_len(),
                    g.out_channels,
                    g.positions(),
                    weight,
                    true,
                    go,
                    false,
                    0.0,
                    &mut cols,
                );
                let mut dx = vec![0.0; g.in_len()];
                col2im(g, &cols, &mut dx);
                dx
            });
            (dx, dw, db)
        })
        .collect();

    let mut weight_grad = vec![0.0; g.out_channels * g.patch_len()];
    let mut bias_grad = vec![0.0; g.out_channels];
    let mut input_grad = need_input_grad.then(|| Vec::with_capacity(batch * g.in_len()));
    for (dx, dw, db) in per_sample {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Non-overlapping `size × size` max pooling over `planes` planes of
/// `h × w`. Returns pooled values and, per output, the flat input index of
/// the winning element (first maximum on ties).
pub(crate) fn max_pool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Smallest gap between the winner and the runner-up over all pooling
/// windows; used to keep finite-difference probes away from ties. With
/// `zero_ties_stable`, windows whose top two values are both exactly zero
/// are skipped (relu-clamped inputs stay clamped under small probes).
pub(crate) fn max_pool_margin(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    zero_ties_stable: bool,
) -> f64 {
    let (oh, ow) = (h / size, w / size);
    let mut margin = f64::INFINITY;
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for dy in 0..size {
                    for dx in 0..size {
                        let v = input[base + (oy * size + dy) * w + ox * size + dx];
                        if v > a {
                            b = a;
                            a = v;
                        } else if v > b {
                            b = v;
                        }
                    }
                }
                if size * size > 1 && !(zero_ties_stable && a == 0.0 && b == 0.0) {
                    margin = margin.min(a - b);
                }
            }
        }
    }
    margin
}
