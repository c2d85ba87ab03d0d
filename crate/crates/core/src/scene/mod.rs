//! Scene ingestion and synthesis: rasters, label maps, prompts and streams.

mod pgm;
mod prompt;
mod stream;
mod synth;

pub use pgm::{load_mask, load_pgm, parse_pgm, save_mask, save_pgm, write_pgm_bytes, GrayRaster};
pub use prompt::{load_prompts, parse_prompts, BoxPrompt, Click, Polarity, PromptSpec, PromptTable};
pub use stream::{Frame, StreamItem, StreamSpec};
pub use synth::{
    standard_drift_regimes, synth_prompt, synth_scene, synth_stream, Regime, Segment, SynthSpec,
    STANDARD_SIZE,
};

use crate::error::{Error, Result};

/// Grayscale intensity raster with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SarImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl SarImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dims must be positive"));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "pixel ({}, {}) = {} is outside [0, 1]",
                i / width,
                i % width,
                pixels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Quantizes to 8-bit for PGM output.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Per-pixel class indices in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..=256, got {num_classes}"
            )));
        }
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} label map with {} labels",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "label {} at pixel ({}, {}) is not below {num_classes}",
                labels[i],
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Fraction of pixels carrying `class`.
    pub fn fraction(&self, class: u8) -> f64 {
        self.labels.iter().filter(|&&l| l == class).count() as f64 / self.labels.len() as f64
    }
}
