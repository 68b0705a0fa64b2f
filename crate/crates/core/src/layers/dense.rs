use rayon::prelude::*;

use super::Result;
use crate::tensor::{Scalar, Tensor, TensorError};

pub(super) struct DenseGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// `y = x·W + b` with `W` stored `[f_in, f_out]`.
pub(super) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T]) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(TensorError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "dense expects N×F".into(),
        }
        .into());
    }
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = b.len();
    let mut out = vec![T::zero(); n * fout];
    out.par_chunks_mut(fout)
        .zip(x.data().par_chunks(fin))
        .for_each(|(o, xs)| {
            o.copy_from_slice(b);
            for (i, &xv) in xs.iter().enumerate() {
                let wrow = &w[i * fout..][..fout];
                for (acc, &wv) in o.iter_mut().zip(wrow) {
                    *acc = *acc + xv * wv;
                }
            }
        });
    Ok(Tensor::new(&[n, fout], out)?)
}

pub(super) fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &[T], dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = dy.shape()[1];
    let xd = x.data();
    let dyd = dy.data();

    let mut dx = vec![T::zero(); n * fin];
    dx.par_chunks_mut(fin).enumerate().for_each(|(s, dxs)| {
        let d = &dyd[s * fout..][..fout];
        for (i, v) in dxs.iter_mut().enumerate() {
            let wrow = &w[i * fout..][..fout];
            *v = wrow.iter().zip(d).fold(T::zero(), |acc, (&wv, &dv)| acc + wv * dv);
        }
    });

    let mut dw = vec![T::zero(); fin * fout];
    dw.par_chunks_mut(fout).enumerate().for_each(|(i, row)| {
        for s in 0..n {
            let xv = xd[s * fin + i];
            for (acc, &dv) in row.iter_mut().zip(&dyd[s * fout..][..fout]) {
                *acc = *acc + xv * dv;
            }
        }
    });

    let mut db = vec![T::zero(); fout];
    for d in dyd.chunks_exact(fout) {
        for (acc, &dv) in db.iter_mut().zip(d) {
            *acc = *acc + dv;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(x.shape(), dx)?,
        kernel: Tensor::new(&[fin, fout], dw)?,
        bias: db,
    })
}
