//! Decoding and bilinear resampling.

use super::{DataError, Result, SampleSource};
use crate::tensor::Tensor;

/// Decodes encoded bytes to an H×W×3 tensor in [0, 1].
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let rgb = decode_rgb(bytes).map_err(|e| DataError::Decode {
        path: "<bytes>".into(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&rgb))
}

pub(super) fn decode_rgb(bytes: &[u8]) -> std::result::Result<::image::RgbImage, ::image::ImageError> {
    Ok(::image::load_from_memory(bytes)?.to_rgb8())
}

fn rgb_to_tensor(rgb: &::image::RgbImage) -> Tensor<f32> {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("decoded buffer matches dimensions")
}

/// Loads a sample and resizes it to `size` (height, width).
pub fn load_image(source: &SampleSource, size: (usize, usize)) -> Result<Tensor<f32>> {
    let img = match source {
        SampleSource::Path(p) => {
            let bytes = std::fs::read(p).map_err(|source| DataError::Io {
                path: p.clone(),
                source,
            })?;
            let rgb = decode_rgb(&bytes).map_err(|e| DataError::Decode {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            rgb_to_tensor(&rgb)
        }
        SampleSource::Buffer(t) => return resize_bilinear(t, size),
    };
    resize_bilinear(&img, size)
}

/// Half-pixel-centred bilinear resize of an H×W×C image; source coordinates
/// are clamped to the edge.
pub fn resize_bilinear(img: &Tensor<f32>, size: (usize, usize)) -> Result<Tensor<f32>> {
    let [ih, iw, c] = img.shape() else {
        return Err(DataError::Invalid(format!("expected an H×W×C image, got {:?}", img.shape())));
    };
    let (ih, iw, c) = (*ih, *iw, *c);
    let (oh, ow) = size;
    if oh == 0 || ow == 0 {
        return Err(DataError::Invalid(format!("target size {size:?} is empty")));
    }
    if (oh, ow) == (ih, iw) {
        return Ok(img.clone());
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(oh, ih);
    let xs = taps(ow, iw);
    let src = img.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * iw + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * tx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * tx;
                out.push(top + (bottom - top) * ty);
            }
        }
    }
    Ok(Tensor::new(&[oh, ow, c], out)?)
}
