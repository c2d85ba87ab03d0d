//! User prompts (clicks and boxes) and their JSON-lines file format.
//!
//! One record per line:
//! `{"image_id": "img_0001", "clicks": [[12, 30, "pos"]], "boxes": [[4, 5, 20, 40]]}`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptSpec {
    pub clicks: Vec<Click>,
    pub boxes: Vec<BoxPrompt>,
}

impl PromptSpec {
    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty() && self.boxes.is_empty()
    }

    /// Checks every coordinate against an image of the given size.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for c in &self.clicks {
            if c.row >= height || c.col >= width {
                return Err(Error::Validation(format!(
                    "click ({}, {}) outside {height}x{width} image",
                    c.row, c.col
                )));
            }
        }
        for b in &self.boxes {
            if b.row_min > b.row_max || b.col_min > b.col_max {
                return Err(Error::Validation(format!(
                    "box ({}, {}, {}, {}) has inverted corners",
                    b.row_min, b.col_min, b.row_max, b.col_max
                )));
            }
            if b.row_max >= height || b.col_max >= width {
                return Err(Error::Validation(format!(
                    "box ({}, {}, {}, {}) outside {height}x{width} image",
                    b.row_min, b.col_min, b.row_max, b.col_max
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self, image_id: &str) -> String {
        let record = Record {
            image_id: image_id.to_string(),
            clicks: self.clicks.iter().map(|c| (c.row, c.col, c.polarity)).collect(),
            boxes: self
                .boxes
                .iter()
                .map(|b| [b.row_min, b.col_min, b.row_max, b.col_max])
                .collect(),
        };
        serde_json::to_string(&record).expect("prompt record serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    image_id: String,
    #[serde(default)]
    clicks: Vec<(usize, usize, Polarity)>,
    #[serde(default)]
    boxes: Vec<[usize; 4]>,
}

/// Prompts keyed by image id, remembering the source line of each record.
#[derive(Clone, Debug, Default)]
pub struct PromptTable {
    entries: BTreeMap<String, (usize, PromptSpec)>,
}

impl PromptTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&PromptSpec> {
        self.entries.get(image_id).map(|(_, p)| p)
    }

    pub fn line_of(&self, image_id: &str) -> Option<usize> {
        self.entries.get(image_id).map(|(l, _)| *l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PromptSpec)> {
        self.entries.iter().map(|(k, (_, p))| (k.as_str(), p))
    }

    /// Bounds check for one record against its image, citing the line.
    pub fn validate_bounds(&self, image_id: &str, height: usize, width: usize) -> Result<()> {
        if let Some((line, spec)) = self.entries.get(image_id) {
            spec.validate(height, width)
                .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        }
        Ok(())
    }
}

pub fn parse_prompts(text: &str) -> Result<PromptTable> {
    let mut table = PromptTable::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(raw).map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        let spec = PromptSpec {
            clicks: record
                .clicks
                .into_iter()
                .map(|(row, col, polarity)| Click { row, col, polarity })
                .collect(),
            boxes: record
                .boxes
                .into_iter()
                .map(|[row_min, col_min, row_max, col_max]| BoxPrompt {
                    row_min,
                    col_min,
                    row_max,
                    col_max,
                })
                .collect(),
        };
        for b in &spec.boxes {
            if b.row_min > b.row_max || b.col_min > b.col_max {
                return Err(Error::Validation(format!(
                    "line {line}: box has inverted corners"
                )));
            }
        }
        if let Some((first, _)) = table.entries.get(&record.image_id) {
            return Err(Error::Validation(format!(
                "duplicate image_id {:?} on lines {first} and {line}",
                record.image_id
            )));
        }
        table.entries.insert(record.image_id, (line, spec));
    }
    Ok(table)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompts(&text)
}
