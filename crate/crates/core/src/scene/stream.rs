//! Stream descriptors: which images are processed, in which order, with
//! which prompts. Stored as TOML:
//!
//! ```toml
//! seed = 17
//! num_classes = 2
//! prompts = "prompts.jsonl"
//!
//! [[items]]
//! image_id = "img_0000"
//! image = "images/img_0000.pgm"
//! mask = "masks/img_0000.pgm"
//! ```
//!
//! Relative paths resolve against the directory holding the stream file.
//! The optional `segments` table records the regime schedule a synthetic
//! stream was generated from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_mask, load_pgm, load_prompts, save_mask, save_pgm, LabelMap, PromptSpec, SarImage, Segment,
    SynthSpec,
};
use crate::error::{Error, Result};

/// One image ready for processing.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image_id: String,
    pub image: SarImage,
    pub prompt: PromptSpec,
    pub truth: Option<LabelMap>,
    /// Generating regime, for synthetic frames.
    pub regime: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamItem {
    pub image_id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Prompt record id; defaults to `image_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub items: Vec<StreamItem>,
}

fn default_classes() -> usize {
    2
}

impl StreamSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: StreamSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for item in &spec.items {
            if !seen.insert(item.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "image_id {:?} listed twice in stream",
                    item.image_id
                )));
            }
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text)?, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stream spec serializes")
    }

    /// Resolves and loads every asset up front; nothing is processed if any
    /// image, mask or prompt record fails to load.
    pub fn load_frames(&self, base: &Path) -> Result<Vec<Frame>> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for item in &self.items {
            for p in std::iter::once(&item.image).chain(item.mask.as_ref()) {
                let full = resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingAsset {
                        path: full,
                        message: format!("referenced by image {:?}", item.image_id),
                    });
                }
            }
        }
        let prompts = match &self.prompts {
            Some(p) => {
                let full = resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingAsset {
                        path: full,
                        message: "prompt file".into(),
                    });
                }
                Some(load_prompts(full)?)
            }
            None => None,
        };
        let mut frames = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let load = || -> Result<Frame> {
                let image = load_pgm(resolve(&item.image))?;
                let truth = match &item.mask {
                    Some(m) => {
                        let mask = load_mask(resolve(m), self.num_classes)?;
                        if (mask.height(), mask.width()) != (image.height(), image.width()) {
                            return Err(Error::Validation(format!(
                                "mask of {:?} is {}x{}, image is {}x{}",
                                item.image_id,
                                mask.height(),
                                mask.width(),
                                image.height(),
                                image.width()
                            )));
                        }
                        Some(mask)
                    }
                    None => None,
                };
                let prompt_id = item.prompt_id.as_deref().unwrap_or(&item.image_id);
                let prompt = match &prompts {
                    Some(table) => {
                        table.validate_bounds(prompt_id, image.height(), image.width())?;
                        match table.get(prompt_id) {
                            Some(p) => p.clone(),
                            None if item.prompt_id.is_some() => {
                                return Err(Error::MissingAsset {
                                    path: resolve(self.prompts.as_ref().unwrap()),
                                    message: format!("no prompt record {prompt_id:?}"),
                                })
                            }
                            None => PromptSpec::default(),
                        }
                    }
                    None => PromptSpec::default(),
                };
                Ok(Frame {
                    image_id: item.image_id.clone(),
                    image,
                    prompt,
                    truth,
                    regime: item.regime.clone(),
                })
            };
            frames.push(load().map_err(|e| Error::Image {
                image_id: item.image_id.clone(),
                source: Box::new(e),
            })?);
        }
        Ok(frames)
    }

    /// Writes frames as PGM images, PGM masks and a prompt file under `dir`,
    /// plus `stream.toml` describing them. Returns the written spec.
    pub fn write_frames(dir: &Path, synth: Option<&SynthSpec>, frames: &[Frame]) -> Result<StreamSpec> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        let mut prompt_lines = String::new();
        let mut items = Vec::with_capacity(frames.len());
        for f in frames {
            let image_rel = PathBuf::from("images").join(format!("{}.pgm", f.image_id));
            save_pgm(dir.join(&image_rel), &f.image)?;
            let mask_rel = match &f.truth {
                Some(t) => {
                    let rel = PathBuf::from("masks").join(format!("{}.pgm", f.image_id));
                    save_mask(dir.join(&rel), t)?;
                    Some(rel)
                }
                None => None,
            };
            prompt_lines.push_str(&f.prompt.to_json_line(&f.image_id));
            prompt_lines.push('\n');
            items.push(StreamItem {
                image_id: f.image_id.clone(),
                image: image_rel,
                mask: mask_rel,
                prompt_id: None,
                regime: f.regime.clone(),
            });
        }
        let prompts_path = dir.join("prompts.jsonl");
        fs::write(&prompts_path, prompt_lines).map_err(|e| Error::io(&prompts_path, e))?;
        let spec = StreamSpec {
            seed: synth.map_or(0, |s| s.seed),
            num_classes: 2,
            prompts: Some(PathBuf::from("prompts.jsonl")),
            segments: synth.map(|s| s.segments.clone()).unwrap_or_default(),
            items,
        };
        let stream_path = dir.join("stream.toml");
        fs::write(&stream_path, spec.to_toml()).map_err(|e| Error::io(&stream_path, e))?;
        Ok(spec)
    }
}
