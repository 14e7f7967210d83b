//! Magnitude-based teacher masking with one threshold per tensor.
//!
//! For a ratio `r`, each maskable tensor with `N` elements has its
//! `floor(r * N)` smallest-magnitude entries zeroed. Equal magnitudes are
//! ordered by flat index, so plans are deterministic and nested across
//! ratios. Only tensors of rank two or more are maskable; norm gains and
//! biases are always kept. Masks never modify the source parameters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ParamEntry, ParameterView};

/// Absorbs representation error in `r * N` (e.g. `0.15 * 100`).
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub name: String,
    /// Smallest kept magnitude; `+inf` when nothing is kept.
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub kept_count: usize,
}

impl LayerMask {
    pub fn numel(&self) -> usize {
        self.mask.len()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.len() - self.kept_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub layers: Vec<LayerMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFraction {
    pub per_layer: Vec<(String, f64)>,
    pub global: f64,
}

pub fn is_maskable(entry: &ParamEntry) -> bool {
    entry.shape.len() >= 2
}

pub fn masked_count_for(ratio: f64, numel: usize) -> usize {
    ((ratio * numel as f64 + COUNT_SLACK).floor() as usize).min(numel)
}

fn mask_layer(entry: &ParamEntry, ratio: f64) -> LayerMask {
    let n = entry.numel();
    let masked = masked_count_for(ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        entry.values[a].abs().total_cmp(&entry.values[b].abs()).then(a.cmp(&b))
    });
    let mut mask = vec![true; n];
    for &idx in &order[..masked] {
        mask[idx] = false;
    }
    let threshold = order.get(masked).map_or(f64::INFINITY, |&i| entry.values[i].abs());
    LayerMask { name: entry.name.clone(), threshold, mask, kept_count: n - masked }
}

/// Builds the mask for `ratio` over every maskable tensor of `teacher`.
pub fn build_mask(teacher: &ParameterView, ratio: f64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if !teacher.all_finite() {
        return Err(Error::Numeric("teacher parameters contain non-finite values".into()));
    }
    let layers = teacher
        .entries()
        .par_iter()
        .filter(|e| is_maskable(e))
        .map(|e| mask_layer(e, ratio))
        .collect();
    Ok(MaskPlan { ratio, layers })
}

/// Elementwise `mask * weight`; entries absent from the plan pass through.
pub fn apply_mask(teacher: &ParameterView, plan: &MaskPlan) -> Result<ParameterView> {
    let mut out = teacher.clone();
    for layer in &plan.layers {
        let entry = out
            .entries_mut()
            .iter_mut()
            .find(|e| e.name == layer.name)
            .ok_or_else(|| Error::Structural(format!("plan layer `{}` not in parameters", layer.name)))?;
        if entry.numel() != layer.numel() {
            return Err(Error::Structural(format!(
                "`{}` has {} values but mask has {}",
                layer.name,
                entry.numel(),
                layer.numel()
            )));
        }
        for (w, &keep) in entry.values.iter_mut().zip(&layer.mask) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn masked_fraction(plan: &MaskPlan) -> MaskedFraction {
    let per_layer = plan
        .layers
        .iter()
        .map(|l| {
            let frac = if l.numel() == 0 { 0.0 } else { l.masked_count() as f64 / l.numel() as f64 };
            (l.name.clone(), frac)
        })
        .collect();
    let total: usize = plan.layers.iter().map(LayerMask::numel).sum();
    let masked: usize = plan.layers.iter().map(LayerMask::masked_count).sum();
    let global = if total == 0 { 0.0 } else { masked as f64 / total as f64 };
    MaskedFraction { per_layer, global }
}

/// Packs bits LSB-first: bit `i` lives in byte `i / 8` at position `i % 8`.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
