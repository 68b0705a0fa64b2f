//! Batch normalization over every axis but the last (channels).

use super::Result;
use crate::tensor::{Scalar, Tensor};

pub(super) struct TrainOutput<T: Scalar> {
    pub out: Tensor<T>,
    pub xhat: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(super) struct BnGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

fn channels<T: Scalar>(x: &Tensor<T>) -> usize {
    *x.shape().last().unwrap()
}

pub(super) fn inv_std<T: Scalar>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Batch statistics are accumulated in f64 so f32 training stays stable.
pub(super) fn batch_norm_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<TrainOutput<T>> {
    let c = channels(x);
    let m = (x.len() / c) as f64;
    let mut sum = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), mu) in sq.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - mu;
            *s += d * d;
        }
    }
    let var: Vec<T> = sq.iter().map(|s| T::from_f64(s / m)).collect();
    let mean: Vec<T> = mean.into_iter().map(T::from_f64).collect();
    let inv = inv_std(&var, eps);

    let mut xhat = x.clone();
    let mut out = x.clone();
    for (xr, or) in xhat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv[ch];
            xr[ch] = h;
            or[ch] = gamma[ch] * h + beta[ch];
        }
    }
    Ok(TrainOutput {
        out,
        xhat,
        mean,
        var,
        inv_std: inv,
    })
}

pub(super) fn batch_norm_affine<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let c = channels(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = gamma[ch] * (row[ch] - mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    Ok(out)
}

pub(super) fn batch_norm_backward_train<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    inv_std: &[T],
) -> Result<BnGrads<T>> {
    let c = channels(dy);
    let m = (dy.len() / c) as f64;
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    for (d, h) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += d[ch].as_f64();
            dgamma[ch] += (d[ch] * h[ch]).as_f64();
        }
    }
    let mut dx = dy.clone();
    for (dr, h) in dx.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            let v = dr[ch].as_f64() - dbeta[ch] / m - h[ch].as_f64() * dgamma[ch] / m;
            dr[ch] = T::from_f64(gamma[ch].as_f64() * inv_std[ch].as_f64() * v);
        }
    }
    Ok(BnGrads {
        input: dx,
        dgamma: dgamma.into_iter().map(T::from_f64).collect(),
        dbeta: dbeta.into_iter().map(T::from_f64).collect(),
    })
}

/// Backward through the fixed affine map used when normalizing with moving
/// statistics.
pub(super) fn batch_norm_backward_affine<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<BnGrads<T>> {
    let c = channels(dy);
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    let mut dx = dy.clone();
    for ((dr, d), xr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(x.data().chunks_exact(c))
    {
        for ch in 0..c {
            dbeta[ch] += d[ch].as_f64();
            dgamma[ch] += (d[ch] * (xr[ch] - mean[ch]) * inv_std[ch]).as_f64();
            dr[ch] = d[ch] * gamma[ch] * inv_std[ch];
        }
    }
    Ok(BnGrads {
        input: dx,
        dgamma: dgamma.into_iter().map(T::from_f64).collect(),
        dbeta: dbeta.into_iter().map(T::from_f64).collect(),
    })
}
