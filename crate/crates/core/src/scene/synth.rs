//! Synthetic SAR-like scenes: bright speckled sea, dark elongated slicks
//! (class 1) and dark look-alike patches that stay labeled as sea.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{BoxPrompt, Click, Frame, LabelMap, Polarity, PromptSpec, SarImage};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 10_000;

/// Sea-state and slick parameters for one segment of a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regime {
    pub name: String,
    /// Mean sea backscatter before speckle.
    pub sea_mean: f64,
    /// Peak-to-peak brightness ramp across the columns (incidence-angle falloff).
    pub sea_ramp: f64,
    /// Equivalent number of looks of the gamma speckle.
    pub looks: f64,
    pub slick_count: usize,
    /// Major/minor axis ratio of slick ellipses.
    pub slick_eccentricity: f64,
    /// Multiplicative damping inside slicks.
    pub slick_contrast: f64,
    /// Probability that a scene contains look-alike patches.
    pub lookalike_prob: f64,
    pub lookalike_contrast: f64,
    /// Accepted band for the class-1 pixel fraction.
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for Regime {
    fn default() -> Self {
        Self {
            name: "default".into(),
            sea_mean: 0.55,
            sea_ramp: 0.1,
            looks: 4.0,
            slick_count: 1,
            slick_eccentricity: 3.0,
            slick_contrast: 0.3,
            lookalike_prob: 0.3,
            lookalike_contrast: 0.55,
            area_min: 0.02,
            area_max: 0.4,
        }
    }
}

impl Regime {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("regime {:?}: {m}", self.name)));
        if !(self.looks >= 1.0) {
            return bad("speckle looks must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.sea_mean) {
            return bad("sea_mean must be in [0, 1]");
        }
        if !(self.slick_eccentricity >= 1.0) {
            return bad("slick_eccentricity must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.slick_contrast)
            || !(0.0..=1.0).contains(&self.lookalike_contrast)
            || !(0.0..=1.0).contains(&self.lookalike_prob)
        {
            return bad("contrasts and probabilities must be in [0, 1]");
        }
        if !(0.0 <= self.area_min && self.area_min <= self.area_max && self.area_max <= 1.0) {
            return bad("area band must satisfy 0 <= area_min <= area_max <= 1");
        }
        if self.slick_count == 0 && self.area_min > 0.0 {
            return bad("slick_count 0 cannot reach a positive area_min");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    major: f64,
    minor: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, minor_frac: (f64, f64), ecc: f64) -> Self {
        let size = h.min(w) as f64;
        let minor = rng.random_range(minor_frac.0..minor_frac.1) * size;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            major: minor * ecc,
            minor,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.cy;
        let dx = col as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.major).powi(2) + (v / self.minor).powi(2) <= 1.0
    }
}

/// Renders one scene. Pure in `(seed, regime, height, width)`.
pub fn synth_scene(seed: u64, regime: &Regime, height: usize, width: usize) -> Result<(SarImage, LabelMap)> {
    regime.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("scene dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;

    let mut labels = vec![0u8; n];
    for attempt in 0.. {
        if attempt == MAX_ATTEMPTS {
            return Err(Error::Validation(format!(
                "regime {:?}: no slick layout in area band [{}, {}] after {MAX_ATTEMPTS} draws",
                regime.name, regime.area_min, regime.area_max
            )));
        }
        let slicks = (0..regime.slick_count)
            .map(|_| Ellipse::random(&mut rng, height, width, (0.05, 0.14), regime.slick_eccentricity))
            .collect::<Vec<_>>();
        for (i, l) in labels.iter_mut().enumerate() {
            let (r, c) = (i / width, i % width);
            *l = u8::from(slicks.iter().any(|e| e.contains(r, c)));
        }
        let fraction = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        if regime.slick_count == 0
            || (regime.area_min..=regime.area_max).contains(&fraction) && fraction > 0.0
        {
            break;
        }
    }

    let lookalikes: Vec<Ellipse> = if rng.random_bool(regime.lookalike_prob) {
        let count = rng.random_range(1..=2);
        (0..count)
            .map(|_| {
                let ecc = rng.random_range(1.0..2.0);
                Ellipse::random(&mut rng, height, width, (0.08, 0.2), ecc)
            })
            .collect()
    } else {
        Vec::new()
    };

    let speckle = Gamma::new(regime.looks, 1.0 / regime.looks).expect("looks validated");
    let mut pixels = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let (r, c) = (i / width, i % width);
        let ramp = if width > 1 {
            regime.sea_ramp * (0.5 - c as f64 / (width - 1) as f64)
        } else {
            0.0
        };
        let mut sigma0 = (regime.sea_mean + ramp).max(0.0);
        if label == 1 {
            sigma0 *= regime.slick_contrast;
        } else if lookalikes.iter().any(|e| e.contains(r, c)) {
            sigma0 *= regime.lookalike_contrast;
        }
        let value: f64 = sigma0 * speckle.sample(&mut rng);
        pixels.push(value.clamp(0.0, 1.0));
    }
    Ok((
        SarImage::new(height, width, pixels)?,
        LabelMap::new(height, width, 2, labels)?,
    ))
}

/// Prompt derived from ground truth: a positive click on the slick pixel
/// nearest the slick centroid, a negative click on a random sea pixel, and
/// the slick bounding box.
pub fn synth_prompt(truth: &LabelMap, rng: &mut impl Rng) -> PromptSpec {
    let (h, w) = (truth.height(), truth.width());
    let oil: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| truth.labels()[i] == 1)
        .map(|i| (i / w, i % w))
        .collect();
    let sea: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| truth.labels()[i] == 0)
        .map(|i| (i / w, i % w))
        .collect();
    let mut spec = PromptSpec::default();
    if !oil.is_empty() {
        let n = oil.len() as f64;
        let cy = oil.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = oil.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let &(row, col) = oil
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - cy).powi(2) + (a.1 as f64 - cx).powi(2);
                let db = (b.0 as f64 - cy).powi(2) + (b.1 as f64 - cx).powi(2);
                da.total_cmp(&db)
            })
            .expect("nonempty");
        spec.clicks.push(Click {
            row,
            col,
            polarity: Polarity::Positive,
        });
        spec.boxes.push(BoxPrompt {
            row_min: oil.iter().map(|p| p.0).min().unwrap(),
            col_min: oil.iter().map(|p| p.1).min().unwrap(),
            row_max: oil.iter().map(|p| p.0).max().unwrap(),
            col_max: oil.iter().map(|p| p.1).max().unwrap(),
        });
    }
    if let Some(&(row, col)) = sea.choose(rng) {
        spec.clicks.push(Click {
            row,
            col,
            polarity: Polarity::Negative,
        });
    }
    spec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub count: usize,
    pub regime: Regime,
}

/// Recipe for a synthetic stream: per-segment regimes, optionally
/// interleaved into one shuffled processing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_true")]
    pub interleave: bool,
    #[serde(default)]
    pub prompts: bool,
    pub segments: Vec<Segment>,
}

fn default_true() -> bool {
    true
}

/// Side of the square scenes in the standard drift fixture.
pub const STANDARD_SIZE: usize = 32;

/// The two sea-state regimes of the standard drift fixture: a calm, bright,
/// lightly speckled sea and a rough, darker, heavily speckled sea with
/// frequent look-alikes.
pub fn standard_drift_regimes() -> [Regime; 2] {
    [
        Regime {
            name: "calm".into(),
            sea_mean: 0.6,
            sea_ramp: 0.1,
            looks: 8.0,
            slick_count: 1,
            slick_eccentricity: 3.0,
            slick_contrast: 0.3,
            lookalike_prob: 0.2,
            lookalike_contrast: 0.6,
            area_min: 0.03,
            area_max: 0.35,
        },
        Regime {
            name: "rough".into(),
            sea_mean: 0.35,
            sea_ramp: 0.15,
            looks: 2.0,
            slick_count: 2,
            slick_eccentricity: 4.0,
            slick_contrast: 0.35,
            lookalike_prob: 0.6,
            lookalike_contrast: 0.5,
            area_min: 0.03,
            area_max: 0.35,
        },
    ]
}

impl SynthSpec {
    /// `images` scenes split evenly between the two drift regimes, interleaved.
    pub fn standard_drift(seed: u64, images: usize) -> Self {
        let [calm, rough] = standard_drift_regimes();
        Self {
            seed,
            height: STANDARD_SIZE,
            width: STANDARD_SIZE,
            interleave: true,
            prompts: true,
            segments: vec![
                Segment {
                    count: images / 2,
                    regime: calm,
                },
                Segment {
                    count: images - images / 2,
                    regime: rough,
                },
            ],
        }
    }
}

fn scene_seed(stream_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = stream_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Materializes every scene of a stream, in processing order.
pub fn synth_stream(spec: &SynthSpec) -> Result<Vec<Frame>> {
    let mut scenes = Vec::new();
    let mut index = 0;
    for segment in &spec.segments {
        for _ in 0..segment.count {
            scenes.push((index, &segment.regime));
            index += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.interleave {
        scenes.shuffle(&mut rng);
    }
    scenes
        .into_iter()
        .map(|(i, regime)| {
            let seed = scene_seed(spec.seed, i);
            let (image, truth) = synth_scene(seed, regime, spec.height, spec.width)?;
            let prompt = if spec.prompts {
                let mut prompt_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                synth_prompt(&truth, &mut prompt_rng)
            } else {
                PromptSpec::default()
            };
            Ok(Frame {
                image_id: format!("img_{i:04}"),
                image,
                prompt,
                truth: Some(truth),
                regime: Some(regime.name.clone()),
            })
        })
        .collect()
}
