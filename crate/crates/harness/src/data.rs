//! Procedural images: Gaussian blobs over a linear gradient.

use promptq_core::calib::CalibItem;
use promptq_core::model::{ModelConfig, PromptSpec};
use promptq_core::{Result, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl Blob {
    fn brightness(&self) -> f64 {
        self.color.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    /// `[channels × size × size]`
    pub image: Tensor<f64>,
    pub blobs: Vec<Blob>,
}

impl SynthImage {
    pub fn brightest(&self) -> &Blob {
        self.blobs
            .iter()
            .max_by(|a, b| a.brightness().total_cmp(&b.brightness()))
            .expect("every image has a blob")
    }
}

fn render<R: Rng + ?Sized>(size: usize, channels: usize, rng: &mut R) -> SynthImage {
    let s = size as f64;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let grad_amp: Vec<f64> = (0..channels).map(|_| rng.random_range(0.1..0.4)).collect();
    let n_blobs = rng.random_range(2..=4);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.15 * s..0.85 * s),
            cy: rng.random_range(0.15 * s..0.85 * s),
            sigma: rng.random_range(0.05 * s..0.15 * s),
            color: [rng.random_range(0.2..1.5), rng.random_range(0.2..1.5), rng.random_range(0.2..1.5)],
        })
        .collect();
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let mut data = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = grad_amp[c] * ((px / s - 0.5) * gx + (py / s - 0.5) * gy);
                for b in &blobs {
                    let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                    v += b.color[c % 3] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                data.push(v + noise.sample(rng));
            }
        }
    }
    SynthImage {
        image: Tensor::new(vec![channels, size, size], data).expect("image shape"),
        blobs,
    }
}

/// `n` images from the `data` substream of `seed`.
pub fn gen_synthetic_images(n: usize, seed: u64, cfg: &ModelConfig) -> Vec<SynthImage> {
    let mut rng = substream(seed, "data");
    (0..n).map(|_| render(cfg.image_size, cfg.in_channels, &mut rng)).collect()
}

/// Per image: a foreground point near the brightest blob's center and a box
/// around that blob, jittered from the `prompts` substream.
pub fn gen_prompts(images: &[SynthImage], seed: u64, image_size: usize) -> Vec<Vec<PromptSpec>> {
    let mut rng = substream(seed, "prompts");
    let s = image_size as f64;
    let clamp = |v: f64| v.clamp(0.0, s);
    images
        .iter()
        .map(|img| {
            let b = img.brightest();
            let jitter = 0.3 * b.sigma;
            let point = PromptSpec::Point {
                x: clamp(b.cx + rng.random_range(-jitter..=jitter)),
                y: clamp(b.cy + rng.random_range(-jitter..=jitter)),
                foreground: true,
            };
            let mut side = || 2.0 * b.sigma * rng.random_range(0.8..1.2);
            let (l, t, r, d) = (side(), side(), side(), side());
            let bx = PromptSpec::Box {
                x0: clamp(b.cx - l),
                y0: clamp(b.cy - t),
                x1: clamp(b.cx + r),
                y1: clamp(b.cy + d),
            };
            vec![point, bx]
        })
        .collect()
}

/// Images paired with their prompts.
pub fn make_items(images: &[SynthImage], prompts: Vec<Vec<PromptSpec>>) -> Vec<CalibItem<f64>> {
    images
        .iter()
        .zip(prompts)
        .map(|(img, prompts)| CalibItem {
            image: img.image.clone(),
            prompts,
        })
        .collect()
}

/// Calibration and held-out evaluation items. Evaluation images come from a
/// separate substream so changing the calibration count leaves them intact.
pub fn calib_and_eval(seed: u64, cfg: &ModelConfig, n_calib: usize, n_eval: usize) -> Result<(Vec<CalibItem<f64>>, Vec<CalibItem<f64>>)> {
    let calib = gen_synthetic_images(n_calib, seed, cfg);
    let cp = gen_prompts(&calib, seed, cfg.image_size);
    let eval_seed = crate::rng::derived_seed(seed, "eval");
    let eval = gen_synthetic_images(n_eval, eval_seed, cfg);
    let ep = gen_prompts(&eval, eval_seed, cfg.image_size);
    for p in cp.iter().chain(&ep).flatten() {
        p.validate(cfg.image_size)?;
    }
    Ok((make_items(&calib, cp), make_items(&eval, ep)))
}
