//! Per-level adapters, memory attention and response-weighted fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::PromptEmbedding;
use crate::error::{Error, Result};
use crate::memory::{Level, PerLevel, RetrievedSet};
use crate::numerics::{bilinear_resize, mean_abs, scaled_dot_attention, softmax, Tensor, Vector};

/// Per-pixel affine map from a level's `c_s` channels into the shared
/// `d`-dimensional embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub level: Level,
    /// d × c_s, row-major.
    projection: Tensor,
    bias: Vector,
}

impl Adapter {
    pub fn new(level: Level, projection: Tensor, bias: Vector) -> Result<Self> {
        let (d, _) = projection.dims2()?;
        if bias.dim() != d {
            return Err(Error::invalid(format!(
                "adapter bias dim {} does not match output dim {d}",
                bias.dim()
            )));
        }
        Ok(Self {
            level,
            projection,
            bias,
        })
    }

    /// Seeded projection with orthonormal columns scaled by `gain`, zero bias.
    pub fn seeded(level: Level, in_dim: usize, out_dim: usize, gain: f64, seed: u64) -> Result<Self> {
        if in_dim == 0 || in_dim > out_dim {
            return Err(Error::invalid(format!(
                "cannot build {in_dim} orthonormal columns in dimension {out_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(in_dim);
        while cols.len() < in_dim {
            let mut v: Vec<f64> = (0..out_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Gram-Schmidt, twice for stability.
            for _ in 0..2 {
                for c in &cols {
                    let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut data = vec![0.0; out_dim * in_dim];
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                data[i * in_dim + j] = gain * x;
            }
        }
        Self::new(
            level,
            Tensor::new(vec![out_dim, in_dim], data)?,
            Vector::zeros(out_dim),
        )
    }

    /// Folds a per-channel input standardization `(x − mean) / std` into
    /// the affine map.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        let cin = self.in_dim();
        if mean.len() != cin || std.len() != cin || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!(
                "standardization needs {cin} means and {cin} positive deviations"
            )));
        }
        let mut p = self.projection.clone();
        let mut b = self.bias.clone();
        for o in 0..self.out_dim() {
            for i in 0..cin {
                let w = p.data()[o * cin + i] / std[i];
                p.data_mut()[o * cin + i] = w;
                b.data_mut()[o] -= w * mean[i];
            }
        }
        Self::new(self.level, p, b)
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn adapt(&self, f: &Tensor) -> Result<Tensor> {
        let (c, h, w) = f.dims3()?;
        let (d, cin) = (self.out_dim(), self.in_dim());
        if c != cin {
            return Err(Error::invalid(format!(
                "{} adapter expects {cin} channels, got {c}",
                self.level
            )));
        }
        let hw = h * w;
        let p = self.projection.data();
        let mut out = vec![0.0; d * hw];
        for o in 0..d {
            let row = &p[o * cin..(o + 1) * cin];
            let plane = &mut out[o * hw..(o + 1) * hw];
            plane.fill(self.bias.data()[o]);
            for (i, &weight) in row.iter().enumerate() {
                if weight == 0.0 {
                    continue;
                }
                for (dst, src) in plane.iter_mut().zip(f.plane(i)) {
                    *dst += weight * src;
                }
            }
        }
        Tensor::new(vec![d, h, w], out)
    }
}

/// Residual memory attention for one level. Queries are the spatial tokens
/// of `adapted`; keys and values are the spatial tokens of every retrieved
/// entry followed by the prompt tokens. With nothing to attend to the input
/// is returned unchanged.
pub fn attend_level(
    adapted: &Tensor,
    retrieved: &RetrievedSet<'_>,
    prompt: &PromptEmbedding,
) -> Result<Tensor> {
    let (d, h, w) = adapted.dims3()?;
    if retrieved.is_empty() && prompt.is_empty() {
        return Ok(adapted.clone());
    }
    let mut memory = Vec::new();
    for e in &retrieved.entries {
        let (c, _, _) = e.value.dims3()?;
        if c != d {
            return Err(Error::invalid(format!(
                "memory value has {c} channels, features have {d}"
            )));
        }
        memory.extend_from_slice(e.value.to_tokens()?.data());
    }
    for t in &prompt.tokens {
        if t.dim() != d {
            return Err(Error::invalid(format!(
                "prompt token dim {} does not match feature dim {d}",
                t.dim()
            )));
        }
        memory.extend_from_slice(t.data());
    }
    let rows = memory.len() / d;
    let kv = Tensor::new(vec![rows, d], memory)?;
    let queries = adapted.to_tokens()?;
    let attended = scaled_dot_attention(&queries, &kv, &kv)?;
    let mut out = Tensor::from_tokens(&attended, h, w)?;
    for (o, a) in out.data_mut().iter_mut().zip(adapted.data()) {
        *o += a;
    }
    Ok(out)
}

/// Level response: mean absolute activation.
pub fn response_score(f: &Tensor) -> Result<f64> {
    mean_abs(f)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Softmax over level responses.
    #[default]
    Adaptive,
    /// Fixed weights of 1/3.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    /// d × H_tex × W_tex.
    pub feature: Tensor,
    pub gamma: PerLevel<f64>,
    pub responses: PerLevel<f64>,
}

/// Aligns the three levels to the texture resolution and blends them.
pub fn fuse(levels: &PerLevel<Tensor>, mode: FusionMode) -> Result<Fusion> {
    let (d, h, w) = levels.texture.dims3()?;
    let aligned = levels.try_map(|level, t| {
        let (c, _, _) = t.dims3()?;
        if c != d {
            return Err(Error::invalid(format!(
                "{level} features have {c} channels, texture has {d}"
            )));
        }
        bilinear_resize(t, h, w)
    })?;
    let responses = aligned.try_map(|_, t| response_score(t))?;
    let gamma = match mode {
        FusionMode::Adaptive => {
            let g = softmax(&Vector::new(vec![
                responses.texture,
                responses.structure,
                responses.semantic,
            ]))?;
            PerLevel {
                texture: g.data()[0],
                structure: g.data()[1],
                semantic: g.data()[2],
            }
        }
        FusionMode::Uniform => PerLevel {
            texture: 1.0 / 3.0,
            structure: 1.0 / 3.0,
            semantic: 1.0 / 3.0,
        },
    };
    let mut feature = Tensor::zeros(vec![d, h, w])?;
    for level in Level::ALL {
        let g = *gamma.get(level);
        for (o, x) in feature.data_mut().iter_mut().zip(aligned.get(level).data()) {
            *o += g * x;
        }
    }
    Ok(Fusion {
        feature,
        gamma,
        responses,
    })
}
