//! Procedural stand-in dataset: oriented coloured stripes.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{DataError, DatasetIndex, Result, Sample, SampleSource};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `num_classes × per_class` images of side `size`. Class `c` uses stripe
/// angle `π c / K` and its own hue; each image draws a random phase,
/// small frequency jitter and pixel noise. Samples are ordered class by
/// class.
pub fn synth_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<DatasetIndex> {
    if num_classes < 2 {
        return Err(DataError::Invalid(format!("synthetic data needs >= 2 classes, got {num_classes}")));
    }
    if per_class == 0 || size == 0 {
        return Err(DataError::Invalid("per_class and size must be positive".into()));
    }
    let width = num_classes.to_string().len().max(2);
    let class_names = (0..num_classes).map(|c| format!("class_{c:0width$}")).collect();
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let angle = PI * class as f64 / num_classes as f64;
        let color = hue_to_rgb(class as f64 / num_classes as f64);
        for i in 0..per_class {
            let mut rng = Rng::derive(seed, &[class as u64, i as u64]);
            let img = render(size, angle, color, &mut rng);
            samples.push(Sample {
                source: SampleSource::Buffer(Arc::new(img)),
                label: class,
            });
        }
    }
    Ok(DatasetIndex {
        class_names,
        samples,
        source_root: None,
        exclusions: Vec::new(),
    })
}

fn render(size: usize, angle: f64, color: [f64; 3], rng: &mut Rng) -> Tensor<f32> {
    let period = (size as f64 / 4.0).max(2.0) * rng.uniform_range(0.9, 1.1);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * dx + y as f64 * dy) * 2.0 * PI / period + phase;
            let stripe = 0.5 + 0.5 * t.sin();
            for ch in color {
                let v = 0.15 + 0.7 * stripe * ch + rng.uniform_range(-0.05, 0.05);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("size² × 3 values")
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}
