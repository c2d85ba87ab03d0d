//! Deterministic image and prompt encoders.
//!
//! The image encoder produces a three-level pyramid of hand-designed
//! statistics, each level three channels deep:
//!
//! | level     | resolution | channels                                        |
//! |-----------|------------|-------------------------------------------------|
//! | texture   | H/2 × W/2  | intensity, 3×3 local mean, 3×3 local std        |
//! | structure | H/4 × W/4  | \|dx\|, \|dy\|, gradient magnitude              |
//! | semantic  | H/8 × W/8  | block mean, block variance, block dark fraction |

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Level;
use crate::numerics::{Tensor, Vector};
use crate::scene::{Polarity, PromptSpec, SarImage};

/// Channels per pyramid level.
pub const LEVEL_CHANNELS: usize = 3;
/// Width of the one-hot kind code at the end of every prompt token.
pub const KIND_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub texture: Tensor,
    pub structure: Tensor,
    pub semantic: Tensor,
}

impl FeaturePyramid {
    pub fn level(&self, level: Level) -> &Tensor {
        match level {
            Level::Texture => &self.texture,
            Level::Structure => &self.structure,
            Level::Semantic => &self.semantic,
        }
    }
}

/// Block-average pooling by an integer factor; trailing rows/columns that
/// do not fill a block are dropped.
fn pool(src: &[f64], h: usize, w: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    sum += src[y * w + x];
                }
            }
            out.push(sum / area);
        }
    }
    (out, oh, ow)
}

/// Mean and population variance, computed on values shifted by the first
/// sample so that a constant window gives exactly zero variance.
fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let Some(pivot) = it.next() else {
        return (0.0, 0.0);
    };
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - pivot;
        n += 1.0;
        s += d;
        s2 += d * d;
    }
    let shift = s / n;
    (pivot + shift, (s2 / n - shift * shift).max(0.0))
}

fn texture_level(img: &SarImage) -> Result<Tensor> {
    let (half, h, w) = pool(img.pixels(), img.height(), img.width(), 2);
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let window = (-1i64..=1).flat_map(|dy| {
                (-1i64..=1).map(move |dx| {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    yy * w + xx
                })
            });
            let (m, v) = mean_var(window.map(|i| half[i]));
            mean[y * w + x] = m;
            std[y * w + x] = v.sqrt();
        }
    }
    let mut data = half;
    data.extend(mean);
    data.extend(std);
    Tensor::new(vec![LEVEL_CHANNELS, h, w], data)
}

fn structure_level(img: &SarImage) -> Result<Tensor> {
    let (q, h, w) = pool(img.pixels(), img.height(), img.width(), 4);
    let hw = h * w;
    let mut data = vec![0.0; LEVEL_CHANNELS * hw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x + 1 < w { q[i + 1] - q[i] } else { 0.0 };
            let dy = if y + 1 < h { q[i + w] - q[i] } else { 0.0 };
            data[i] = dx.abs();
            data[hw + i] = dy.abs();
            data[2 * hw + i] = (dx * dx + dy * dy).sqrt();
        }
    }
    Tensor::new(vec![LEVEL_CHANNELS, h, w], data)
}

fn semantic_level(img: &SarImage) -> Result<Tensor> {
    let (ih, iw) = (img.height(), img.width());
    let px = img.pixels();
    let (global_mean, _) = mean_var(px.iter().copied());
    let (h, w) = (ih / 8, iw / 8);
    let hw = h * w;
    let mut data = vec![0.0; LEVEL_CHANNELS * hw];
    for by in 0..h {
        for bx in 0..w {
            let block = (by * 8..by * 8 + 8).flat_map(|y| (bx * 8..bx * 8 + 8).map(move |x| y * iw + x));
            let (m, v) = mean_var(block.clone().map(|i| px[i]));
            let dark = block.filter(|&i| px[i] < global_mean).count() as f64 / 64.0;
            let i = by * w + bx;
            data[i] = m;
            data[hw + i] = v;
            data[2 * hw + i] = dark;
        }
    }
    Tensor::new(vec![LEVEL_CHANNELS, h, w], data)
}

pub fn encode_image(img: &SarImage) -> Result<FeaturePyramid> {
    if img.height() < 8 || img.width() < 8 {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the 8x8 minimum",
            img.height(),
            img.width()
        )));
    }
    Ok(FeaturePyramid {
        texture: texture_level(img)?,
        structure: structure_level(img)?,
        semantic: semantic_level(img)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    PositiveClick,
    NegativeClick,
    BoxTopLeft,
    BoxBottomRight,
}

impl TokenKind {
    fn code(self) -> usize {
        match self {
            TokenKind::PositiveClick => 0,
            TokenKind::NegativeClick => 1,
            TokenKind::BoxTopLeft => 2,
            TokenKind::BoxBottomRight => 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<Vector>,
    pub kinds: Vec<TokenKind>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sinusoidal features of a normalized coordinate: (sin, cos) pairs at
/// frequencies π·2^i, zero-padded to `dims`.
fn sinusoid(u: f64, dims: usize, out: &mut Vec<f64>) {
    let pairs = dims / 2;
    for i in 0..pairs {
        let omega = PI * f64::powi(2.0, i as i32);
        out.push((omega * u).sin());
        out.push((omega * u).cos());
    }
    if dims % 2 == 1 {
        out.push(0.0);
    }
}

fn token(row: usize, col: usize, h: usize, w: usize, d: usize, kind: TokenKind) -> Vector {
    let pe = d - KIND_DIMS;
    let row_dims = pe / 2;
    let mut v = Vec::with_capacity(d);
    sinusoid(row as f64 / h as f64, row_dims, &mut v);
    sinusoid(col as f64 / w as f64, pe - row_dims, &mut v);
    let mut kind_code = [0.0; KIND_DIMS];
    kind_code[kind.code()] = 1.0;
    v.extend(kind_code);
    Vector::new(v)
}

pub fn encode_prompt(p: &PromptSpec, height: usize, width: usize, d: usize) -> Result<PromptEmbedding> {
    if d < KIND_DIMS + 4 {
        return Err(Error::invalid(format!(
            "embedding dim {d} too small for prompt tokens"
        )));
    }
    p.validate(height, width)?;
    let mut out = PromptEmbedding::default();
    for c in &p.clicks {
        let kind = match c.polarity {
            Polarity::Positive => TokenKind::PositiveClick,
            Polarity::Negative => TokenKind::NegativeClick,
        };
        out.tokens.push(token(c.row, c.col, height, width, d, kind));
        out.kinds.push(kind);
    }
    for b in &p.boxes {
        out.tokens.push(token(
            b.row_min,
            b.col_min,
            height,
            width,
            d,
            TokenKind::BoxTopLeft,
        ));
        out.kinds.push(TokenKind::BoxTopLeft);
        out.tokens.push(token(
            b.row_max,
            b.col_max,
            height,
            width,
            d,
            TokenKind::BoxBottomRight,
        ));
        out.kinds.push(TokenKind::BoxBottomRight);
    }
    Ok(out)
}
