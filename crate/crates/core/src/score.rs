//! Variance-sparsity scores, their normalization, depth-order cumulative sums
//! and the layer ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normalize_across_layers, LayerStats, StatsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvssEntry {
    pub layer_index: usize,
    /// `variance / max(sparsity, floor)`.
    pub avss: f64,
    pub norm_avss: f64,
    /// Running sum of `norm_avss` in layer (depth) order.
    pub cumulative_avss: f64,
    /// 0 = lowest `norm_avss`; ties go to the lower layer index.
    pub rank: usize,
}

/// Variance over sparsity, with the sparsity clamped from below at `sparsity_floor`.
pub fn avss_score(variance: f64, sparsity: f64, sparsity_floor: f64) -> f64 {
    variance / sparsity.max(sparsity_floor)
}

pub fn normalize_avss(scores: &[f64]) -> Result<Vec<f64>> {
    normalize_across_layers(scores)
}

/// Prefix sums in layer order.
pub fn cumulative_avss(norm_scores: &[f64]) -> Vec<f64> {
    norm_scores
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Layer positions sorted by ascending `norm_avss`, lower index first on ties.
pub(crate) fn ascending_order(norm: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norm.len()).collect();
    order.sort_by(|&a, &b| norm[a].total_cmp(&norm[b]).then(a.cmp(&b)));
    order
}

pub fn rank_layers(stats: &[LayerStats], config: &StatsConfig) -> Result<Vec<AvssEntry>> {
    if stats.is_empty() {
        return Err(Error::EmptyInput);
    }
    config.check()?;
    for (i, s) in stats.iter().enumerate() {
        if s.layer_index != i {
            return Err(Error::Domain(format!(
                "stats out of layer order: position {i} holds layer {}",
                s.layer_index
            )));
        }
        if !(s.variance >= 0.0) || !(0.0..=1.0).contains(&s.sparsity) {
            return Err(Error::Domain(format!(
                "layer {i}: variance {} / sparsity {} out of domain",
                s.variance, s.sparsity
            )));
        }
    }
    let scores: Vec<f64> = stats
        .iter()
        .map(|s| avss_score(s.variance, s.sparsity, config.sparsity_floor))
        .collect();
    let norm = normalize_avss(&scores)?;
    let cumulative = cumulative_avss(&norm);
    let mut rank = vec![0; stats.len()];
    for (r, &layer) in ascending_order(&norm).iter().enumerate() {
        rank[layer] = r;
    }
    Ok((0..stats.len())
        .map(|i| AvssEntry {
            layer_index: i,
            avss: scores[i],
            norm_avss: norm[i],
            cumulative_avss: cumulative[i],
            rank: rank[i],
        })
        .collect())
}
