//! Max and average pooling. Padded positions never contribute: max pooling
//! ignores them and average pooling divides by the in-bounds count.

use rayon::prelude::*;

use super::{conv_geometry, Padding, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

struct Window {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

fn window(shape: &[usize], pool: usize, stride: usize, padding: Padding) -> Result<Window> {
    let bad = || TensorError::InvalidShape {
        shape: shape.to_vec(),
        reason: format!("pooling {pool}×{pool} does not fit"),
    };
    if shape.len() != 4 {
        return Err(bad().into());
    }
    let (oh, pad_top) = conv_geometry(shape[1], pool, stride, padding).ok_or_else(bad)?;
    let (ow, pad_left) = conv_geometry(shape[2], pool, stride, padding).ok_or_else(bad)?;
    Ok(Window {
        n: shape[0],
        h: shape[1],
        w: shape[2],
        c: shape[3],
        oh,
        ow,
        pad_top,
        pad_left,
    })
}

fn range(o: usize, stride: usize, pad: usize, pool: usize, extent: usize) -> std::ops::Range<usize> {
    let start = (o * stride).saturating_sub(pad);
    let end = (o * stride + pool).saturating_sub(pad).min(extent);
    start..end
}

/// Returns the pooled map and, when `keep_argmax`, the flat input index
/// chosen for every output element (first maximum wins).
pub(super) fn max_pool<T: Scalar>(
    x: &Tensor<T>,
    pool: usize,
    stride: usize,
    padding: Padding,
    keep_argmax: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = window(x.shape(), pool, stride, padding)?;
    let xd = x.data();
    let len = g.n * g.oh * g.ow * g.c;
    let mut out = vec![T::neg_infinity(); len];
    let mut arg = vec![0usize; len];
    out.par_chunks_mut(g.ow * g.c)
        .zip(arg.par_chunks_mut(g.ow * g.c))
        .enumerate()
        .for_each(|(row, (o, a))| {
            let n = row / g.oh;
            let oy = row % g.oh;
            for ox in 0..g.ow {
                for iy in range(oy, stride, g.pad_top, pool, g.h) {
                    for ix in range(ox, stride, g.pad_left, pool, g.w) {
                        let base = ((n * g.h + iy) * g.w + ix) * g.c;
                        for ch in 0..g.c {
                            let v = xd[base + ch];
                            let k = ox * g.c + ch;
                            if v > o[k] {
                                o[k] = v;
                                a[k] = base + ch;
                            }
                        }
                    }
                }
            }
        });
    if !keep_argmax {
        arg = Vec::new();
    }
    Ok((Tensor::new(&[g.n, g.oh, g.ow, g.c], out)?, arg))
}

pub(super) fn max_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>, argmax: &[usize]) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(x_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

pub(super) fn avg_pool<T: Scalar>(x: &Tensor<T>, pool: usize, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let g = window(x.shape(), pool, stride, padding)?;
    let xd = x.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.c];
    out.par_chunks_mut(g.ow * g.c).enumerate().for_each(|(row, o)| {
        let n = row / g.oh;
        let oy = row % g.oh;
        let ry = range(oy, stride, g.pad_top, pool, g.h);
        for ox in 0..g.ow {
            let rx = range(ox, stride, g.pad_left, pool, g.w);
            let count = T::from_f64((ry.len() * rx.len()) as f64);
            let acc = &mut o[ox * g.c..][..g.c];
            for iy in ry.clone() {
                for ix in rx.clone() {
                    let xs = &xd[((n * g.h + iy) * g.w + ix) * g.c..][..g.c];
                    for (a, &v) in acc.iter_mut().zip(xs) {
                        *a = *a + v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a = *a / count;
            }
        }
    });
    Ok(Tensor::new(&[g.n, g.oh, g.ow, g.c], out)?)
}

pub(super) fn avg_pool_backward<T: Scalar>(
    x_shape: &[usize],
    dy: &Tensor<T>,
    pool: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = window(x_shape, pool, stride, padding)?;
    let mut dx = Tensor::zeros(x_shape)?;
    let d = dx.data_mut();
    let dyd = dy.data();
    for n in 0..g.n {
        for oy in 0..g.oh {
            let ry = range(oy, stride, g.pad_top, pool, g.h);
            for ox in 0..g.ow {
                let rx = range(ox, stride, g.pad_left, pool, g.w);
                let count = T::from_f64((ry.len() * rx.len()) as f64);
                let src = &dyd[((n * g.oh + oy) * g.ow + ox) * g.c..][..g.c];
                for iy in ry.clone() {
                    for ix in rx.clone() {
                        let dst = &mut d[((n * g.h + iy) * g.w + ix) * g.c..][..g.c];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a = *a + v / count;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
