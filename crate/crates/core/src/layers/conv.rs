//! NHWC convolution kernels. Kernels are stored `[kh, kw, c_in, c_out]`
//! (depthwise: `[kh, kw, c]`).
//!
//! Every output element is accumulated in a fixed order, so results do not
//! depend on how rayon splits the work.

use rayon::prelude::*;

use super::{conv_geometry, Padding, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

pub(super) struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

fn geometry(x: &[usize], kernel: usize, stride: usize, padding: Padding) -> Result<Geometry> {
    if x.len() != 4 {
        return Err(TensorError::InvalidShape {
            shape: x.to_vec(),
            reason: "convolution expects N×H×W×C".into(),
        }
        .into());
    }
    let bad = || TensorError::InvalidShape {
        shape: x.to_vec(),
        reason: format!("spatial extent smaller than kernel {kernel}"),
    };
    let (oh, pad_top) = conv_geometry(x[1], kernel, stride, padding).ok_or_else(bad)?;
    let (ow, pad_left) = conv_geometry(x[2], kernel, stride, padding).ok_or_else(bad)?;
    Ok(Geometry {
        n: x[0],
        h: x[1],
        w: x[2],
        c: x[3],
        oh,
        ow,
        pad_top,
        pad_left,
    })
}

/// Input row/column for output index `o` and kernel tap `k`, if in bounds.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

pub(super) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel_w: &[T],
    bias: Option<&[T]>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel, stride, padding)?;
    let cout = kernel_w.len() / (kernel * kernel * g.c);
    let xd = x.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * cout];
    out.par_chunks_mut(g.ow * cout).enumerate().for_each(|(row, out_row)| {
        let n = row / g.oh;
        let oy = row % g.oh;
        for ox in 0..g.ow {
            let o = &mut out_row[ox * cout..(ox + 1) * cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..kernel {
                let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..kernel {
                    let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xs = &xd[((n * g.h + iy) * g.w + ix) * g.c..][..g.c];
                    let wbase = (ky * kernel + kx) * g.c * cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let wrow = &kernel_w[wbase + ci * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc = *acc + xv * wv;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::new(&[g.n, g.oh, g.ow, cout], out)?)
}

pub(super) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel_w: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = geometry(x.shape(), kernel, stride, padding)?;
    let cout = kernel_w.len() / (kernel * kernel * g.c);
    let xd = x.data();
    let dyd = dy.data();
    let sample = g.h * g.w * g.c;

    let mut dx = vec![T::zero(); xd.len()];
    dx.par_chunks_mut(sample).enumerate().for_each(|(n, dxs)| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = &dyd[((n * g.oh + oy) * g.ow + ox) * cout..][..cout];
                for ky in 0..kernel {
                    let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..kernel {
                        let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                            continue;
                        };
                        let wbase = (ky * kernel + kx) * g.c * cout;
                        let dst = &mut dxs[(iy * g.w + ix) * g.c..][..g.c];
                        for (ci, v) in dst.iter_mut().enumerate() {
                            let wrow = &kernel_w[wbase + ci * cout..][..cout];
                            let mut s = T::zero();
                            for (&wv, &dv) in wrow.iter().zip(d) {
                                s = s + wv * dv;
                            }
                            *v = *v + s;
                        }
                    }
                }
            }
        }
    });

    // One kernel row per (ky, kx, ci); each row sums over every output position.
    let mut dk = vec![T::zero(); kernel_w.len()];
    dk.par_chunks_mut(cout).enumerate().for_each(|(r, dk_row)| {
        let ci = r % g.c;
        let kx = (r / g.c) % kernel;
        let ky = r / (g.c * kernel);
        for n in 0..g.n {
            for oy in 0..g.oh {
                let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xv = xd[((n * g.h + iy) * g.w + ix) * g.c + ci];
                    let d = &dyd[((n * g.oh + oy) * g.ow + ox) * cout..][..cout];
                    for (acc, &dv) in dk_row.iter_mut().zip(d) {
                        *acc = *acc + xv * dv;
                    }
                }
            }
        }
    });

    let mut db = vec![T::zero(); cout];
    for d in dyd.chunks_exact(cout) {
        for (acc, &dv) in db.iter_mut().zip(d) {
            *acc = *acc + dv;
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        kernel: Tensor::new(&[kernel, kernel, g.c, cout], dk)?,
        bias: db,
    })
}

pub(super) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel_w: &[T],
    bias: Option<&[T]>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel, stride, padding)?;
    let c = g.c;
    let xd = x.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * c];
    out.par_chunks_mut(g.ow * c).enumerate().for_each(|(row, out_row)| {
        let n = row / g.oh;
        let oy = row % g.oh;
        for ox in 0..g.ow {
            let o = &mut out_row[ox * c..(ox + 1) * c];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..kernel {
                let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..kernel {
                    let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xs = &xd[((n * g.h + iy) * g.w + ix) * c..][..c];
                    let ws = &kernel_w[(ky * kernel + kx) * c..][..c];
                    for ((acc, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *acc = *acc + xv * wv;
                    }
                }
            }
        }
    });
    Ok(Tensor::new(&[g.n, g.oh, g.ow, c], out)?)
}

pub(super) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel_w: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = geometry(x.shape(), kernel, stride, padding)?;
    let c = g.c;
    let xd = x.data();
    let dyd = dy.data();
    let sample = g.h * g.w * c;

    let mut dx = vec![T::zero(); xd.len()];
    dx.par_chunks_mut(sample).enumerate().for_each(|(n, dxs)| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = &dyd[((n * g.oh + oy) * g.ow + ox) * c..][..c];
                for ky in 0..kernel {
                    let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..kernel {
                        let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                            continue;
                        };
                        let ws = &kernel_w[(ky * kernel + kx) * c..][..c];
                        let dst = &mut dxs[(iy * g.w + ix) * c..][..c];
                        for ((v, &wv), &dv) in dst.iter_mut().zip(ws).zip(d) {
                            *v = *v + wv * dv;
                        }
                    }
                }
            }
        }
    });

    let mut dk = vec![T::zero(); kernel_w.len()];
    dk.par_chunks_mut(c).enumerate().for_each(|(tap_idx, dk_row)| {
        let ky = tap_idx / kernel;
        let kx = tap_idx % kernel;
        for n in 0..g.n {
            for oy in 0..g.oh {
                let Some(iy) = tap(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let Some(ix) = tap(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xs = &xd[((n * g.h + iy) * g.w + ix) * c..][..c];
                    let d = &dyd[((n * g.oh + oy) * g.ow + ox) * c..][..c];
                    for ((acc, &xv), &dv) in dk_row.iter_mut().zip(xs).zip(d) {
                        *acc = *acc + xv * dv;
                    }
                }
            }
        }
    });

    let mut db = vec![T::zero(); c];
    for d in dyd.chunks_exact(c) {
        for (acc, &dv) in db.iter_mut().zip(d) {
            *acc = *acc + dv;
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        kernel: Tensor::new(&[kernel, kernel, c], dk)?,
        bias: db,
    })
}
