//! Structure/semantic consistent memory update: discrepancy measures,
//! threshold gating and EMA integration into the bank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Level, MemoryBank, MemoryEntry, PerLevel};
use crate::numerics::{bilinear_resize, cosine_similarity, grad_field, Tensor, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateThresholds {
    pub tau_sem: f64,
    pub tau_str: f64,
    pub alpha: f64,
}

impl Default for UpdateThresholds {
    fn default() -> Self {
        Self {
            tau_sem: 0.02,
            tau_str: 0.65,
            alpha: 0.3,
        }
    }
}

impl UpdateThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sem >= 0.0 && self.tau_str >= 0.0) {
            return Err(Error::Validation("update thresholds must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!(
                "alpha {} is outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub update_sem: bool,
    pub update_str: bool,
    pub update_tex: bool,
    pub delta_sem: Option<f64>,
    pub delta_str: Option<f64>,
}

impl UpdateDecision {
    /// Every level flagged; used for the first image and the always-update
    /// ablation.
    pub fn all(delta_sem: Option<f64>, delta_str: Option<f64>) -> Self {
        Self {
            update_sem: true,
            update_str: true,
            update_tex: true,
            delta_sem,
            delta_str,
        }
    }

    pub fn none(delta_sem: Option<f64>, delta_str: Option<f64>) -> Self {
        Self {
            delta_sem,
            delta_str,
            ..Self::default()
        }
    }

    pub fn flags(&self, level: Level) -> bool {
        match level {
            Level::Texture => self.update_tex,
            Level::Structure => self.update_str,
            Level::Semantic => self.update_sem,
        }
    }

    pub fn any(&self) -> bool {
        self.update_tex || self.update_str || self.update_sem
    }
}

/// `1 − cos(z_t, z_mem)`; a zero-norm side counts as cosine 0.
pub fn semantic_discrepancy(z_t: &Vector, z_mem: &Vector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(z_t, z_mem)?.value)
}

/// L1 distance between forward-difference gradient fields, summed over
/// channels and both directions, divided by the spatial size H·W.
pub fn structural_discrepancy(f_t: &Tensor, f_mem: &Tensor) -> Result<f64> {
    if f_t.shape() != f_mem.shape() {
        return Err(Error::invalid(format!(
            "structure maps differ in shape: {:?} vs {:?}",
            f_t.shape(),
            f_mem.shape()
        )));
    }
    let (_, h, w) = f_t.dims3()?;
    let diff = grad_field(f_t)?.l1_distance(&grad_field(f_mem)?)?;
    Ok(diff / (h * w) as f64)
}

/// Strict-threshold gate; texture follows either of the other two.
pub fn decide(delta_sem: f64, delta_str: f64, th: &UpdateThresholds) -> UpdateDecision {
    let update_sem = delta_sem > th.tau_sem;
    let update_str = delta_str > th.tau_str;
    UpdateDecision {
        update_sem,
        update_str,
        update_tex: update_sem || update_str,
        delta_sem: Some(delta_sem),
        delta_str: Some(delta_str),
    }
}

/// `old ← (1 − α)·old + α·new`, element-wise. α = 0 leaves `old`
/// bit-identical, α = 1 copies `new`.
pub fn ema(old: &mut [f64], new: &[f64], alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    if alpha == 1.0 {
        old.copy_from_slice(new);
        return;
    }
    for (o, n) in old.iter_mut().zip(new) {
        *o = (1.0 - alpha) * *o + alpha * n;
    }
}

/// Applies a decision to the bank.
///
/// For every flagged level: the level's prototype (semantic vector or
/// structure map; texture has none) is EMA-updated toward the new content,
/// the level's anchor entry (its oldest-positioned entry of matching shape)
/// has key and value EMA-merged with the new entry and takes its step, and
/// the new entry is inserted with FIFO eviction. The first commit on a
/// fresh bank copies the prototypes exactly and requires all three levels.
pub fn commit(
    bank: &mut MemoryBank,
    decision: &UpdateDecision,
    mut new_entries: PerLevel<Option<MemoryEntry>>,
    z_t: &Vector,
    f_str_t: &Tensor,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} is outside [0, 1]")));
    }
    for level in Level::ALL {
        match new_entries.get(level) {
            Some(e) if e.level != level => {
                return Err(Error::invalid(format!(
                    "{} entry supplied for the {level} slot",
                    e.level
                )))
            }
            None if decision.flags(level) => {
                return Err(Error::invalid(format!(
                    "decision flags {level} but no entry was supplied"
                )))
            }
            _ => {}
        }
    }

    if !bank.proto_initialized {
        if !(decision.update_sem && decision.update_str && decision.update_tex) {
            return Err(Error::invalid(
                "the first commit on an empty bank must refresh every level",
            ));
        }
        bank.proto_sem = Some(z_t.clone());
        bank.proto_str = Some(f_str_t.clone());
        bank.proto_initialized = true;
        for level in Level::ALL {
            if let Some(e) = new_entries.get_mut(level).take() {
                bank.insert(e)?;
            }
        }
        return Ok(());
    }

    if decision.update_sem {
        let proto = bank.proto_sem.get_or_insert_with(|| z_t.clone());
        if proto.dim() != z_t.dim() {
            return Err(Error::invalid(format!(
                "semantic descriptor dim {} does not match prototype dim {}",
                z_t.dim(),
                proto.dim()
            )));
        }
        ema(proto.data_mut(), z_t.data(), alpha);
    }
    if decision.update_str {
        let (_, h, w) = f_str_t.dims3()?;
        let proto = match bank.proto_str.take() {
            Some(p) if p.shape() == f_str_t.shape() => p,
            Some(p) if p.channels() == f_str_t.channels() => bilinear_resize(&p, h, w)?,
            _ => f_str_t.clone(),
        };
        let mut proto = proto;
        ema(proto.data_mut(), f_str_t.data(), alpha);
        bank.proto_str = Some(proto);
    }

    for level in Level::ALL {
        if !decision.flags(level) {
            continue;
        }
        let entry = new_entries.get_mut(level).take().expect("checked above");
        if alpha > 0.0 {
            let shape = entry.value.shape().to_vec();
            if let Some(anchor) = bank.group_mut(level).anchor_mut(level, &shape) {
                if anchor.key.dim() == entry.key.dim() {
                    ema(anchor.key.data_mut(), entry.key.data(), alpha);
                    ema(anchor.value.data_mut(), entry.value.data(), alpha);
                    anchor.source_step = anchor.source_step.max(entry.source_step);
                }
            }
        }
        bank.insert(entry)?;
    }
    Ok(())
}
