use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// A point or box prompt in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PromptSpec {
    Point { x: f64, y: f64, foreground: bool },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl PromptSpec {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let s = image_size as f64;
        let inside = |v: f64| v.is_finite() && (0.0..=s).contains(&v);
        let ok = match *self {
            PromptSpec::Point { x, y, .. } => inside(x) && inside(y),
            PromptSpec::Box { x0, y0, x1, y1 } => {
                inside(x0) && inside(y0) && inside(x1) && inside(y1) && x0 <= x1 && y0 <= y1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("prompt {self:?} outside a {image_size}px image")))
        }
    }

    /// Number of tokens this prompt encodes to.
    pub fn tokens(&self) -> usize {
        match self {
            PromptSpec::Point { .. } => 1,
            PromptSpec::Box { .. } => 2,
        }
    }
}

/// Type-embedding rows.
const FG_POINT: usize = 0;
const BG_POINT: usize = 1;
const BOX_TL: usize = 2;
const BOX_BR: usize = 3;

/// Random-frequency sinusoidal encoding of coordinates plus learned type
/// embeddings.
#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    /// `[2 × dim/2]` frequency matrix.
    pub freqs: Tensor<T>,
    /// `[4 × dim]`: foreground point, background point, box corners.
    pub type_embed: Tensor<T>,
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            freqs: Tensor::randn(&[2, dim / 2], 1.0, rng),
            type_embed: Tensor::randn(&[4, dim], 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.type_embed.cols()
    }

    /// Encoding of a point given in `[0, 1]²`.
    pub fn encode_unit(&self, u: f64, v: f64) -> Vec<T> {
        let half = self.freqs.cols();
        let (cx, cy) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let mut out = vec![T::zero(); 2 * half];
        for j in 0..half {
            let a = 2.0 * PI * (cx * self.freqs.at(0, j).as_f64() + cy * self.freqs.at(1, j).as_f64());
            out[j] = T::lit(a.sin());
            out[half + j] = T::lit(a.cos());
        }
        out
    }

    /// Positional encoding of every cell center of a `grid × grid` map.
    pub fn dense_pe(&self, grid: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(grid * grid * self.dim());
        for y in 0..grid {
            for x in 0..grid {
                let u = (x as f64 + 0.5) / grid as f64;
                let v = (y as f64 + 0.5) / grid as f64;
                data.extend(self.encode_unit(u, v));
            }
        }
        Tensor::from_parts(vec![grid * grid, self.dim()], data)
    }

    /// `[tokens × dim]` prompt tokens; a box contributes two corner tokens.
    pub fn encode(&self, prompts: &[PromptSpec], image_size: usize) -> Result<Tensor<T>> {
        if prompts.is_empty() {
            return Err(Error::Contract("at least one prompt is required".into()));
        }
        let s = image_size as f64;
        let mut data = Vec::new();
        let mut n = 0;
        let mut push = |x: f64, y: f64, kind: usize, data: &mut Vec<T>| {
            let pe = self.encode_unit(x / s, y / s);
            data.extend(pe.iter().zip(self.type_embed.row(kind)).map(|(&a, &b)| a + b));
            n += 1;
        };
        for p in prompts {
            p.validate(image_size)?;
            match *p {
                PromptSpec::Point { x, y, foreground } => {
                    push(x, y, if foreground { FG_POINT } else { BG_POINT }, &mut data)
                }
                PromptSpec::Box { x0, y0, x1, y1 } => {
                    push(x0, y0, BOX_TL, &mut data);
                    push(x1, y1, BOX_BR, &mut data);
                }
            }
        }
        Tensor::new(vec![n, self.dim()], data)
    }
}
