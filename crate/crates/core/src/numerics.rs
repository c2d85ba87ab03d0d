//! Dense f64 tensors and the elementary operations the segmentation stack is
//! built from.
//!
//! Tensors are row-major with rank at most 3. Rank-3 tensors are laid out
//! channels × height × width; rank-2 tensors used as token matrices are
//! rows × features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::invalid(format!(
                "tensor rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let count = shape.iter().product();
        Self::new(shape, vec![value; count])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    /// Builds a rank-3 tensor from a closure over (channel, row, col).
    pub fn from_fn3(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(vec![channels, height, width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (channels, height, width) of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::invalid(format!(
                "expected a rank-3 tensor, got shape {other:?}"
            ))),
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::invalid(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let hw: usize = self.shape[1..].iter().product();
        &self.data[channel * hw..(channel + 1) * hw]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let hw: usize = self.shape[1..].iter().product();
        &mut self.data[channel * hw..(channel + 1) * hw]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial tokens of a rank-3 tensor as an (h·w) × c matrix.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let hw = h * w;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[p * c + ch] = v;
            }
        }
        Tensor::new(vec![hw, c], out)
    }

    /// Inverse of [`Tensor::to_tokens`].
    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let (n, c) = tokens.dims2()?;
        if n != height * width {
            return Err(Error::invalid(format!(
                "{n} tokens cannot fill a {height}x{width} map"
            )));
        }
        let hw = n;
        let mut out = vec![0.0; hw * c];
        for p in 0..hw {
            for ch in 0..c {
                out[ch * hw + p] = tokens.data[p * c + ch];
            }
        }
        Tensor::new(vec![c, height, width], out)
    }

    pub fn l1_distance(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax over a slice, in place. The slice must be nonempty.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.dim() == 0 {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !v.data.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let mut out = v.data.clone();
    softmax_in_place(&mut out);
    Ok(Vector::new(out))
}

/// Cosine similarity with an explicit marker for zero-norm inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<Cosine> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "cosine of vectors with dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = a.dot(a);
    let nb = b.dot(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is exact.
    let value = (a.dot(b) / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Mean absolute value, i.e. the L1 norm divided by the element count.
pub fn mean_abs(t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::invalid("mean_abs of an empty tensor"));
    }
    Ok(t.data.iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64)
}

/// Forward-difference gradient field. Channel `2i` holds d/dx of input
/// channel `i`, channel `2i + 1` holds d/dy; the last column (dx) and last
/// row (dy) are zero.
pub fn grad_field(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "grad_field needs spatial dims >= 2, got {h}x{w}"
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; 2 * c * hw];
    for ch in 0..c {
        let src = t.plane(ch);
        let (dx, dy) = out[2 * ch * hw..(2 * ch + 2) * hw].split_at_mut(hw);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    dx[i] = src[i + 1] - src[i];
                }
                if y + 1 < h {
                    dy[i] = src[i + w] - src[i];
                }
            }
        }
    }
    Tensor::new(vec![2 * c, h, w], out)
}

/// Global average pooling: per-channel spatial mean.
pub fn gap(t: &Tensor) -> Result<Vector> {
    let (c, h, w) = t.dims3()?;
    let hw = (h * w) as f64;
    Ok(Vector::new(
        (0..c).map(|ch| t.plane(ch).iter().sum::<f64>() / hw).collect(),
    ))
}

/// Bilinear resize with the align-corners convention: output corners sample
/// input corners exactly.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target dims must be positive"));
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = t.plane(ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = if output > 1 {
        (input - 1) as f64 / (output - 1) as f64
    } else {
        0.0
    };
    (0..output)
        .map(|o| {
            let pos = o as f64 * scale;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Single-head scaled dot-product attention over token matrices:
/// row i of the result is `Σ_j softmax_j(q_i·k_j/√d) v_j`.
pub fn scaled_dot_attention(queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (n, d) = queries.dims2()?;
    let (m, dk) = keys.dims2()?;
    let (mv, dv) = values.dims2()?;
    if m == 0 {
        return Err(Error::EmptyMemory);
    }
    if dk != d {
        return Err(Error::invalid(format!("query dim {d} must match key dim {dk}")));
    }
    if mv != m {
        return Err(Error::invalid(format!("{m} keys but {mv} values")));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; m];
    for i in 0..n {
        let q = &queries.data[i * d..(i + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q, &keys.data[j * d..(j + 1) * d]) * scale;
        }
        softmax_in_place(&mut scores);
        let row = &mut out[i * dv..(i + 1) * dv];
        for (j, &a) in scores.iter().enumerate() {
            let v = &values.data[j * dv..(j + 1) * dv];
            for (o, &x) in row.iter_mut().zip(v) {
                *o += a * x;
            }
        }
    }
    Tensor::new(vec![n, dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Vector::new(vec![0.0, 0.0, 0.0])).unwrap();
        assert!(u.data().iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
        assert_eq!(softmax(&Vector::new(vec![-123.4])).unwrap().data(), &[1.0]);
        let p = softmax(&Vector::new(vec![2f64.ln(), 0.0])).unwrap();
        assert!(close(p.data()[0], 2.0 / 3.0, 1e-15));
        assert!(close(p.data()[1], 1.0 / 3.0, 1e-15));
        assert!(softmax(&Vector::new(vec![])).is_err());
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let p = softmax(&Vector::new(vec![1000.0, 999.0])).unwrap();
        assert!(p.data().iter().all(|x| x.is_finite()));
        assert!(p.data()[0] > p.data()[1]);
    }

    #[test]
    fn cosine_examples() {
        let a = Vector::new(vec![0.3, -1.2, 4.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap().value, 1.0);
        let c = cosine_similarity(&Vector::new(vec![1.0, 0.0]), &Vector::new(vec![0.0, 1.0]));
        assert_eq!(c.unwrap().value, 0.0);
        let c = cosine_similarity(&Vector::new(vec![1.0, 0.0]), &Vector::new(vec![1.0, 1.0]));
        assert!(close(c.unwrap().value, std::f64::consts::FRAC_1_SQRT_2, 1e-15));
    }

    #[test]
    fn cosine_of_zero_vector_is_flagged() {
        let c = cosine_similarity(&Vector::zeros(3), &Vector::new(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(cosine_similarity(&Vector::zeros(2), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn mean_abs_examples() {
        assert_eq!(mean_abs(&Tensor::zeros(vec![2, 2, 2]).unwrap()).unwrap(), 0.0);
        assert_eq!(mean_abs(&Tensor::filled(vec![3, 2], 1.0).unwrap()).unwrap(), 1.0);
        let t = Tensor::new(vec![4], vec![-2.0, 2.0, 4.0, 0.0]).unwrap();
        assert_eq!(mean_abs(&t).unwrap(), 2.0);
    }

    #[test]
    fn grad_field_examples() {
        let flat = Tensor::filled(vec![2, 3, 4], 7.5).unwrap();
        let g = grad_field(&flat).unwrap();
        assert_eq!(g.shape(), &[4, 3, 4]);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let ramp = Tensor::from_fn3(1, 3, 4, |_, _, x| x as f64).unwrap();
        let g = grad_field(&ramp).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(g.at3(0, y, x), if x < 3 { 1.0 } else { 0.0 });
                assert_eq!(g.at3(1, y, x), 0.0);
            }
        }

        let small = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let g = grad_field(&small).unwrap();
        assert_eq!(g.plane(0), &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(g.plane(1), &[2.0, 3.0, 0.0, 0.0]);

        assert!(grad_field(&Tensor::zeros(vec![1, 1, 5]).unwrap()).is_err());
    }

    #[test]
    fn gap_examples() {
        let t = Tensor::filled(vec![3, 2, 5], -1.5).unwrap();
        assert_eq!(gap(&t).unwrap().data(), &[-1.5, -1.5, -1.5]);
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(gap(&t).unwrap().data(), &[1.0]);
        let t = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]).unwrap();
        assert_eq!(gap(&t).unwrap().data(), &[2.5, 2.0]);
    }

    #[test]
    fn bilinear_examples() {
        let t = Tensor::from_fn3(2, 3, 5, |c, y, x| (c * 100 + y * 7 + x) as f64 * 0.13).unwrap();
        assert_eq!(bilinear_resize(&t, 3, 5).unwrap(), t);
        let c = Tensor::filled(vec![1, 3, 3], 0.7).unwrap();
        let r = bilinear_resize(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| close(v, 0.7, 1e-15)));
        let row = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(bilinear_resize(&row, 1, 3).unwrap().data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn bilinear_corners_are_exact() {
        let t = Tensor::from_fn3(1, 4, 6, |_, y, x| ((y * 6 + x) as f64).sin()).unwrap();
        let r = bilinear_resize(&t, 9, 11).unwrap();
        assert_eq!(r.at3(0, 0, 0), t.at3(0, 0, 0));
        assert_eq!(r.at3(0, 8, 10), t.at3(0, 3, 5));
        assert_eq!(r.at3(0, 0, 10), t.at3(0, 0, 5));
        assert_eq!(r.at3(0, 8, 0), t.at3(0, 3, 0));
    }

    #[test]
    fn attention_singleton_and_identical_keys() {
        let q = Tensor::new(vec![3, 2], vec![1.0, 0.0, -2.0, 5.0, 0.3, 0.3]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![4.0, -1.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[4.0, -1.0]);
        }

        let k = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            assert!(close(row[0], 2.0, 1e-12) && close(row[1], 4.0, 1e-12));
        }
    }

    #[test]
    fn attention_errors() {
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(scaled_dot_attention(&q, &k, &k).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let t = Tensor::from_fn3(3, 2, 4, |c, y, x| (c * 8 + y * 4 + x) as f64).unwrap();
        let tokens = t.to_tokens().unwrap();
        assert_eq!(tokens.shape(), &[8, 3]);
        assert_eq!(&tokens.data()[..3], &[0.0, 8.0, 16.0]);
        assert_eq!(Tensor::from_tokens(&tokens, 2, 4).unwrap(), t);
    }
}
