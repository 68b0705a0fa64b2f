use super::{ActivationKind, LayerError, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

pub(super) fn activation<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    let six = T::from_f64(6.0);
    match kind {
        ActivationKind::Relu => x.maximum(T::zero()),
        ActivationKind::Relu6 => x.map(|v| v.max(T::zero()).min(six)),
    }
}

pub(super) fn activation_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, kind: ActivationKind) -> Result<Tensor<T>> {
    let six = T::from_f64(6.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let pass = match kind {
                ActivationKind::Relu => v > T::zero(),
                ActivationKind::Relu6 => v > T::zero() && v < six,
            };
            if pass {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::new(x.shape(), data)?)
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| {
        LayerError::from(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected N×H×W×C".into(),
        })
    })
}

pub(super) fn zero_pad<T: Scalar>(x: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(x.shape())?;
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros(&[n, ph, pw, c])?;
    let od = out.data_mut();
    for s in 0..n {
        for y in 0..h {
            let src = &x.data()[((s * h + y) * w) * c..][..w * c];
            let dst = &mut od[((s * ph + y + top) * pw + left) * c..][..w * c];
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

pub(super) fn zero_pad_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>, top: usize, left: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(x_shape)?;
    let [_, ph, pw, _] = dims4(dy.shape())?;
    let mut dx = Tensor::zeros(x_shape)?;
    let d = dx.data_mut();
    for s in 0..n {
        for y in 0..h {
            let src = &dy.data()[((s * ph + y + top) * pw + left) * c..][..w * c];
            d[((s * h + y) * w) * c..][..w * c].copy_from_slice(src);
        }
    }
    Ok(dx)
}

pub(super) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(x.shape())?;
    let area = (h * w) as f64;
    let mut out = vec![T::zero(); n * c];
    for (s, o) in out.chunks_exact_mut(c).enumerate() {
        let mut acc = vec![0.0f64; c];
        for px in x.data()[s * h * w * c..][..h * w * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v.as_f64();
            }
        }
        for (dst, a) in o.iter_mut().zip(acc) {
            *dst = T::from_f64(a / area);
        }
    }
    Ok(Tensor::new(&[n, c], out)?)
}

pub(super) fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(x_shape)?;
    let area = T::from_f64((h * w) as f64);
    let mut dx = Tensor::zeros(x_shape)?;
    for (s, sample) in dx.data_mut().chunks_exact_mut(h * w * c).enumerate() {
        let g = &dy.data()[s * c..][..c];
        for px in sample.chunks_exact_mut(c) {
            for (d, &gv) in px.iter_mut().zip(g) {
                *d = gv / area;
            }
        }
    }
    debug_assert_eq!(dx.shape()[0], n);
    Ok(dx)
}

/// Row-wise softmax of an N×K tensor, shifted by the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(TensorError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "softmax expects N×K".into(),
        }
        .into());
    }
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// dx = p ⊙ (g − Σ g·p) per row.
pub(super) fn softmax_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let k = p.shape()[1];
    let mut dx = dy.clone();
    for (d, pr) in dx.data_mut().chunks_exact_mut(k).zip(p.data().chunks_exact(k)) {
        let dot = d.iter().zip(pr).fold(T::zero(), |acc, (&g, &pv)| acc + g * pv);
        for (g, &pv) in d.iter_mut().zip(pr) {
            *g = pv * (*g - dot);
        }
    }
    Ok(dx)
}

pub(super) fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let lead: usize = inputs[0].len() / inputs[0].shape().last().unwrap();
    let total: usize = inputs.iter().map(|t| *t.shape().last().unwrap()).sum();
    let mut data = Vec::with_capacity(lead * total);
    for i in 0..lead {
        for t in inputs {
            let c = *t.shape().last().unwrap();
            data.extend_from_slice(&t.data()[i * c..][..c]);
        }
    }
    let mut shape = inputs[0].shape().to_vec();
    *shape.last_mut().unwrap() = total;
    Ok(Tensor::new(&shape, data)?)
}

pub(super) fn concat_backward<T: Scalar>(inputs: &[Tensor<T>], dy: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let total = *dy.shape().last().unwrap();
    let lead = dy.len() / total;
    let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for i in 0..lead {
        let row = &dy.data()[i * total..][..total];
        let mut offset = 0;
        for (g, t) in grads.iter_mut().zip(inputs) {
            let c = *t.shape().last().unwrap();
            g.extend_from_slice(&row[offset..offset + c]);
            offset += c;
        }
    }
    grads
        .into_iter()
        .zip(inputs)
        .map(|(g, t)| Ok(Tensor::new(t.shape(), g)?))
        .collect()
}
