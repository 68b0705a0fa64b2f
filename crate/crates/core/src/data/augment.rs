//! Random affine augmentation with nearest-edge fill.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ranges of the random transform. Rotation and shear are in degrees, shifts
/// are fractions of the image side, zoom draws each axis from
/// `U(1 - zoom, 1 + zoom)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_range: f64,
    pub width_shift_range: f64,
    pub height_shift_range: f64,
    pub shear_range: f64,
    pub zoom_range: f64,
}

impl AugmentConfig {
    /// The training-time setting used for the flower experiments.
    pub fn standard() -> Self {
        AugmentConfig {
            rotation_range: 0.4,
            width_shift_range: 0.2,
            height_shift_range: 0.3,
            shear_range: 0.2,
            zoom_range: 0.2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_range == 0.0
            && self.width_shift_range == 0.0
            && self.height_shift_range == 0.0
            && self.shear_range == 0.0
            && self.zoom_range == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("rotation_range", self.rotation_range),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
            ("shear_range", self.shear_range),
            ("zoom_range", self.zoom_range),
        ];
        match fields.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            Some((name, v)) => Err(format!("{name} must be a finite value >= 0, got {v}")),
            None => Ok(()),
        }
    }
}

fn draw(rng: &mut Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.uniform_range(-range, range)
    }
}

/// Applies one random transform to an H×W×C image. Output pixel centres
/// are mapped back into the input by
/// `in = c + R (t + S Z (out - c))` and sampled bilinearly, with
/// coordinates clamped to the border.
pub fn augment(img: &Tensor<f32>, config: &AugmentConfig, rng: &mut Rng) -> Tensor<f32> {
    if config.is_identity() {
        return img.clone();
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let theta = draw(rng, config.rotation_range).to_radians();
    let tx = draw(rng, config.height_shift_range) * h as f64;
    let ty = draw(rng, config.width_shift_range) * w as f64;
    let shear = draw(rng, config.shear_range).to_radians();
    let (zx, zy) = if config.zoom_range == 0.0 {
        (1.0, 1.0)
    } else {
        let lo = 1.0 - config.zoom_range;
        let hi = 1.0 + config.zoom_range;
        (rng.uniform_range(lo, hi), rng.uniform_range(lo, hi))
    };

    // Rows/cols affine: [[a, b], [d, e]] acting on (row, col) offsets.
    let (cos, sin) = (theta.cos(), theta.sin());
    let (sa, sb, se) = (zx, -shear.sin() * zy, shear.cos() * zy);
    let a = cos * sa;
    let b = cos * sb - sin * se;
    let d = sin * sa;
    let e = sin * sb + cos * se;
    let off_r = cos * tx - sin * ty;
    let off_c = sin * tx + cos * ty;
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;

    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in 0..w {
            let (dr, dc) = (r as f64 - cr, col as f64 - cc);
            let sr = (cr + off_r + a * dr + b * dc).clamp(0.0, (h - 1) as f64);
            let sc = (cc + off_c + d * dr + e * dc).clamp(0.0, (w - 1) as f64);
            let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (fr, fc) = ((sr - r0 as f64) as f32, (sc - c0 as f64) as f32);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * fc;
                let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * fc;
                out.push((top + (bottom - top) * fr).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape as input")
}
