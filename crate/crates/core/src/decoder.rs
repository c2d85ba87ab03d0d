//! Per-pixel affine mask head, softmax, weighted cross-entropy and a
//! plain gradient-descent trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, softmax_in_place, Tensor, Vector};
use crate::scene::LabelMap;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `[C, d]`
    weights: Tensor,
    bias: Vector,
}

impl DecoderParams {
    pub fn new(weights: Tensor, bias: Vector) -> Result<Self> {
        let (c, _) = weights.dims2()?;
        if bias.dim() != c {
            return Err(Error::invalid(format!(
                "bias has {} entries for {c} classes",
                bias.dim()
            )));
        }
        if !(2..=256).contains(&c) {
            return Err(Error::invalid(format!("{c} classes; expected 2..=256")));
        }
        if !weights.is_finite() || !bias.data().iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("decoder parameters must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![classes, dim])?, Vector::zeros(classes))
    }

    /// Weights uniform in `±scale`, zero bias.
    pub fn random(classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..classes * dim)
            .map(|_| scale * rng.random_range(-1.0..=1.0))
            .collect();
        Self::new(Tensor::new(vec![classes, dim], data)?, Vector::zeros(classes))
    }

    pub fn classes(&self) -> usize {
        self.bias.dim()
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.data_mut()
    }

    /// Plain-text dump: a `decoder C d` header, one weight row per class,
    /// then the bias row. Floats use shortest round-trip formatting.
    pub fn dump(&self) -> String {
        let row = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut out = format!("decoder {} {}\n", self.classes(), self.dim());
        for c in 0..self.classes() {
            out.push_str(&row(&self.weights.data()[c * self.dim()..(c + 1) * self.dim()]));
            out.push('\n');
        }
        out.push_str(&row(self.bias.data()));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, msg: String| Error::Config(format!("decoder file line {}: {msg}", line + 1));
        let (l0, header) = lines.next().ok_or_else(|| bad(0, "empty decoder file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let (classes, dim) = match head.as_slice() {
            ["decoder", c, d] => (
                c.parse::<usize>()
                    .map_err(|e| bad(l0, format!("class count: {e}")))?,
                d.parse::<usize>().map_err(|e| bad(l0, format!("dim: {e}")))?,
            ),
            _ => return Err(bad(l0, format!("expected `decoder C d`, found {header:?}"))),
        };
        let total = text.lines().count();
        let mut read_row = |what: &str| -> Result<Vec<f64>> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| bad(total, format!("missing {what} row")))?;
            let xs = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(ln, format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(xs)
        };
        let mut w = Vec::with_capacity(classes * dim);
        for c in 0..classes {
            let row = read_row(&format!("weight {c}"))?;
            if row.len() != dim {
                return Err(bad(
                    c + 1,
                    format!("weight row has {} values, expected {dim}", row.len()),
                ));
            }
            w.extend(row);
        }
        let b = read_row("bias")?;
        if b.len() != classes {
            return Err(bad(
                classes + 1,
                format!("bias row has {} values, expected {classes}", b.len()),
            ));
        }
        if lines.next().is_some() {
            return Err(bad(classes + 2, "trailing content after bias row".into()));
        }
        Self::new(Tensor::new(vec![classes, dim], w)?, Vector::new(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[C, H, W]`
    pub probs: Tensor,
    pub hard: LabelMap,
}

fn check_feature(f: &Tensor, params: &DecoderParams) -> Result<(usize, usize)> {
    let (d, h, w) = f.dims3()?;
    if d != params.dim() {
        return Err(Error::invalid(format!(
            "feature has {d} channels, decoder expects {}",
            params.dim()
        )));
    }
    if !f.is_finite() {
        return Err(Error::invalid("non-finite decoder input"));
    }
    Ok((h, w))
}

fn upsample(f: &Tensor, params: &DecoderParams, height: usize, width: usize) -> Result<Tensor> {
    check_feature(f, params)?;
    bilinear_resize(f, height, width)
}

/// Softmax probabilities `[C, H, W]` of a feature already at output size.
fn probabilities(f: &Tensor, params: &DecoderParams) -> Tensor {
    let (d, h, w) = f.dims3().expect("rank 3");
    let c = params.classes();
    let hw = h * w;
    let wts = params.weights.data();
    let mut probs = vec![0.0; c * hw];
    let mut logits = vec![0.0; c];
    let fd = f.data();
    for p in 0..hw {
        for (k, l) in logits.iter_mut().enumerate() {
            let mut s = params.bias.data()[k];
            for j in 0..d {
                s += wts[k * d + j] * fd[j * hw + p];
            }
            *l = s;
        }
        softmax_in_place(&mut logits);
        for (k, &v) in logits.iter().enumerate() {
            probs[k * hw + p] = v;
        }
    }
    Tensor::new(vec![c, h, w], probs).expect("consistent shape")
}

fn argmax_map(probs: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = probs.dims3()?;
    let hw = h * w;
    let pd = probs.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if pd[k * hw + p] > pd[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, c, labels)
}

/// Affine head on `f`, bilinear-resized to `height × width`, then softmax
/// and argmax (ties go to the lower class index).
pub fn decode(f: &Tensor, params: &DecoderParams, height: usize, width: usize) -> Result<Prediction> {
    let up = upsample(f, params, height, width)?;
    let probs = probabilities(&up, params);
    let hard = argmax_map(&probs)?;
    Ok(Prediction { probs, hard })
}

fn check_loss_args(classes: usize, y: &LabelMap, class_weights: &[f64]) -> Result<()> {
    if classes != 2 {
        return Err(Error::Unsupported(format!(
            "weighted cross-entropy needs 2 classes, got {classes}"
        )));
    }
    if y.num_classes() != classes {
        return Err(Error::invalid(format!(
            "label map has {} classes, prediction has {classes}",
            y.num_classes()
        )));
    }
    if class_weights.len() != classes || !class_weights.iter().all(|&w| w > 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!(
            "class weights {class_weights:?} must be {classes} positive values"
        )));
    }
    Ok(())
}

fn loss_from_probs(probs: &Tensor, y: &LabelMap, class_weights: &[f64]) -> f64 {
    let hw = y.height() * y.width();
    let pd = probs.data();
    let total: f64 = y
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            let l = l as usize;
            let q = pd[l * hw + p].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -class_weights[l] * q.ln()
        })
        .sum();
    total / hw as f64
}

/// `−(1/HW) Σ w_y · ln p_y` with probabilities clamped to `[1e-12, 1 − 1e-12]`.
pub fn weighted_bce(pred: &Prediction, y: &LabelMap, class_weights: &[f64]) -> Result<f64> {
    let (c, h, w) = pred.probs.dims3()?;
    check_loss_args(c, y, class_weights)?;
    if (h, w) != (y.height(), y.width()) {
        return Err(Error::invalid(format!(
            "prediction is {h}×{w}, labels are {}×{}",
            y.height(),
            y.width()
        )));
    }
    Ok(loss_from_probs(&pred.probs, y, class_weights))
}

#[allow(clippy::too_many_arguments)]
fn gradient_upsampled(
    up: &Tensor,
    probs: &Tensor,
    y: &LabelMap,
    params: &DecoderParams,
    class_weights: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    scale: f64,
) {
    let (d, h, w) = up.dims3().expect("rank 3");
    let hw = h * w;
    let c = params.classes();
    let (fd, pd) = (up.data(), probs.data());
    let inv = scale / hw as f64;
    let mut r = vec![0.0; c];
    for (p, &l) in y.labels().iter().enumerate() {
        let l = l as usize;
        let wy = class_weights[l] * inv;
        for (k, rk) in r.iter_mut().enumerate() {
            let onehot = if k == l { 1.0 } else { 0.0 };
            *rk = (pd[k * hw + p] - onehot) * wy;
        }
        for k in 0..c {
            gb[k] += r[k];
            let row = &mut gw[k * d..(k + 1) * d];
            for (j, g) in row.iter_mut().enumerate() {
                *g += r[k] * fd[j * hw + p];
            }
        }
    }
}

/// Analytic gradient of [`weighted_bce`] with respect to the head's
/// weights `[C, d]` and bias `[C]`.
pub fn bce_gradient(
    f: &Tensor,
    y: &LabelMap,
    params: &DecoderParams,
    class_weights: &[f64],
) -> Result<(Tensor, Vector)> {
    check_loss_args(params.classes(), y, class_weights)?;
    let up = upsample(f, params, y.height(), y.width())?;
    let probs = probabilities(&up, params);
    let mut gw = vec![0.0; params.classes() * params.dim()];
    let mut gb = vec![0.0; params.classes()];
    gradient_upsampled(&up, &probs, y, params, class_weights, &mut gw, &mut gb, 1.0);
    Ok((
        Tensor::new(vec![params.classes(), params.dim()], gw)?,
        Vector::new(gb),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    /// Mean batch loss before each step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the sample-averaged weighted loss.
pub fn train_decoder(
    samples: &[(Tensor, LabelMap)],
    params: &DecoderParams,
    lr: f64,
    steps: usize,
    class_weights: &[f64],
) -> Result<TrainOutcome> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    let mut params = params.clone();
    if samples.is_empty() {
        return Ok(TrainOutcome {
            params,
            losses: Vec::new(),
        });
    }
    let batch = samples
        .iter()
        .map(|(f, y)| {
            check_loss_args(params.classes(), y, class_weights)?;
            Ok((upsample(f, &params, y.height(), y.width())?, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(steps + 1);
    let mut gw = vec![0.0; params.classes() * params.dim()];
    let mut gb = vec![0.0; params.classes()];
    for step in 0..=steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (up, y) in &batch {
            let probs = probabilities(up, &params);
            loss += loss_from_probs(&probs, y, class_weights);
            if step < steps {
                gradient_upsampled(up, &probs, y, &params, class_weights, &mut gw, &mut gb, 1.0 / n);
            }
        }
        losses.push(loss / n);
        if step == steps {
            break;
        }
        for (p, g) in params.weights.data_mut().iter_mut().zip(&gw) {
            *p -= lr * g;
        }
        for (p, g) in params.bias.data_mut().iter_mut().zip(&gb) {
            *p -= lr * g;
        }
    }
    Ok(TrainOutcome { params, losses })
}
