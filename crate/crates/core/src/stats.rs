//! Per-layer activation statistics: variance, standard deviation, sparsity,
//! their cross-layer normalizations and the sparsity deviation diagnostic.
//!
//! All accumulation is done in f64 regardless of the trace dtype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{validate_trace, LayerTrace, TraceSet};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_SPARSITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    /// Sparsity threshold: a sample counts as inactive when `|a| < epsilon`.
    pub epsilon: f64,
    /// Lower clamp on sparsity when it is used as a divisor in the AVSS score.
    pub sparsity_floor: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            epsilon: DEFAULT_EPSILON,
            sparsity_floor: DEFAULT_SPARSITY_FLOOR,
        }
    }
}

impl StatsConfig {
    pub fn new(epsilon: f64, sparsity_floor: f64) -> Result<Self> {
        let config = StatsConfig {
            epsilon,
            sparsity_floor,
        };
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sparsity_floor > 0.0 && self.sparsity_floor <= 1.0) {
            return Err(Error::Domain(format!(
                "sparsity_floor must be in (0, 1], got {}",
                self.sparsity_floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_index: usize,
    pub mean: f64,
    /// Population variance over all N*D samples.
    pub variance: f64,
    pub std_dev: f64,
    /// Variance divided by the sum of variances over all layers.
    pub norm_variance: f64,
    /// Fraction of samples with `|a| < epsilon`.
    pub sparsity: f64,
    /// Sparsity divided by the sum of sparsities over all layers.
    pub norm_sparsity: f64,
    /// `|sparsity - norm_sparsity|`. Reported only, never used for selection.
    pub sparsity_deviation: f64,
}

/// Single-pass mean/variance accumulator (Welford's update).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators as if all samples had been pushed into one.
    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Population variance (divisor = sample count).
    pub fn variance(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.m2 / self.count as f64).max(0.0))
    }
}

impl Extend<f64> for RunningMoments {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

/// Two-pass mean and population variance of a layer's samples.
pub fn layer_mean_variance(trace: &LayerTrace) -> Result<(f64, f64)> {
    mean_variance_two_pass(trace.iter())
}

/// Two-pass mean and population variance over any re-iterable sample source.
pub fn mean_variance_two_pass<I>(samples: I) -> Result<(f64, f64)>
where
    I: Iterator<Item = f64> + Clone,
{
    let (n, sum) = samples.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = sum / n as f64;
    let sq: f64 = samples.map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, sq / n as f64))
}

/// Single-pass mean and population variance of a sample stream.
pub fn layer_mean_variance_streaming<I>(samples: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = f64>,
{
    let mut acc = RunningMoments::new();
    acc.extend(samples);
    match (acc.mean(), acc.variance()) {
        (Some(mean), Some(var)) => Ok((mean, var)),
        _ => Err(Error::EmptyInput),
    }
}

/// Fraction of samples with `|a| < epsilon` (strict).
pub fn layer_sparsity(trace: &LayerTrace, epsilon: f64) -> Result<f64> {
    sparsity_of(trace.iter(), epsilon)
}

pub fn sparsity_of<I: IntoIterator<Item = f64>>(samples: I, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (n, hits) = samples
        .into_iter()
        .fold((0usize, 0usize), |(n, h), x| (n + 1, h + usize::from(x.abs() < epsilon)));
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(hits as f64 / n as f64)
}

/// `value_i / sum(values)`. A zero sum yields the uniform vector `1/M`.
pub fn normalize_across_layers(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "normalization needs finite non-negative values, element {i} is {v}"
        )));
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        Ok(values.iter().map(|v| v / total).collect())
    } else {
        let uniform = 1.0 / values.len() as f64;
        Ok(vec![uniform; values.len()])
    }
}

pub fn sparsity_deviation(sparsity: f64, norm_sparsity: f64) -> f64 {
    (sparsity - norm_sparsity).abs()
}

/// Computes [`LayerStats`] for every layer of a valid trace set, in layer order.
pub fn compute_layer_stats(set: &TraceSet, config: &StatsConfig) -> Result<Vec<LayerStats>> {
    config.check()?;
    let violations = validate_trace(set);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut raw = Vec::with_capacity(set.layer_count());
    for layer in &set.layers {
        let (mean, variance) = layer_mean_variance(layer)?;
        let sparsity = layer_sparsity(layer, config.epsilon)?;
        raw.push((mean, variance, sparsity));
    }
    let variances: Vec<f64> = raw.iter().map(|r| r.1).collect();
    let sparsities: Vec<f64> = raw.iter().map(|r| r.2).collect();
    let norm_variance = normalize_across_layers(&variances)?;
    let norm_sparsity = normalize_across_layers(&sparsities)?;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &(mean, variance, sparsity))| LayerStats {
            layer_index: i,
            mean,
            variance,
            std_dev: variance.sqrt(),
            norm_variance: norm_variance[i],
            sparsity,
            norm_sparsity: norm_sparsity[i],
            sparsity_deviation: sparsity_deviation(sparsity, norm_sparsity[i]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ActivationPoint, Dtype};
    use proptest::prelude::*;

    fn trace(values: &[f64]) -> LayerTrace {
        LayerTrace::from_f64(0, values.len(), 1, values.to_vec())
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= abs.max(rel * a.abs().max(b.abs()))
    }

    #[test]
    fn mean_variance_examples() {
        assert_eq!(layer_mean_variance(&trace(&[2.0, 2.0, 2.0, 2.0])).unwrap(), (2.0, 0.0));
        assert_eq!(layer_mean_variance(&trace(&[0.0, 1.0, 2.0, 3.0])).unwrap(), (1.5, 1.25));
        assert_eq!(layer_mean_variance(&trace(&[5.0])).unwrap(), (5.0, 0.0));
        assert!(matches!(layer_mean_variance(&trace(&[])), Err(Error::EmptyInput)));
    }

    #[test]
    fn streaming_examples() {
        assert_eq!(layer_mean_variance_streaming([2.0, 2.0, 2.0, 2.0]).unwrap(), (2.0, 0.0));
        assert_eq!(layer_mean_variance_streaming([0.0, 1.0, 2.0, 3.0]).unwrap(), (1.5, 1.25));
        assert!(matches!(
            layer_mean_variance_streaming(std::iter::empty()),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn merge_matches_single_stream() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.0).collect();
        let mut whole = RunningMoments::new();
        whole.extend(xs.iter().copied());
        let mut left = RunningMoments::new();
        left.extend(xs[..313].iter().copied());
        let mut right = RunningMoments::new();
        right.extend(xs[313..].iter().copied());
        left.merge(&right);
        assert_eq!(left.count(), whole.count());
        assert!(rel_close(left.variance().unwrap(), whole.variance().unwrap(), 1e-12, 0.0));
        assert!(rel_close(left.mean().unwrap(), whole.mean().unwrap(), 1e-12, 1e-15));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(layer_sparsity(&trace(&[0.0; 6]), 0.01).unwrap(), 1.0);
        assert_eq!(layer_sparsity(&trace(&[1.0; 6]), 0.01).unwrap(), 0.0);
        assert_eq!(layer_sparsity(&trace(&[0.0, 0.005, -0.02, 0.5]), 0.01).unwrap(), 0.5);
        // strict inequality at the threshold
        assert_eq!(layer_sparsity(&trace(&[0.01, -0.01]), 0.01).unwrap(), 0.0);
        assert!(matches!(layer_sparsity(&trace(&[]), 0.01), Err(Error::EmptyInput)));
        assert!(matches!(layer_sparsity(&trace(&[1.0]), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_across_layers(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(normalize_across_layers(&[7.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_across_layers(&[0.0; 3]).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(matches!(normalize_across_layers(&[1.0, -0.5]), Err(Error::Domain(_))));
        assert!(matches!(normalize_across_layers(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn sparsity_deviation_examples() {
        assert_eq!(sparsity_deviation(0.5, 0.5), 0.0);
        assert!((sparsity_deviation(0.2, 0.5) - 0.3).abs() < 1e-15);
        assert_eq!(sparsity_deviation(1.0, 0.0), 1.0);
    }

    fn set(layers: Vec<Vec<f64>>) -> TraceSet {
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, v)| LayerTrace::from_f64(i, v.len(), 1, v))
            .collect();
        TraceSet::new("t", ActivationPoint::BlockOutput, Dtype::F64, layers).unwrap()
    }

    #[test]
    fn single_layer_normalizes_to_one() {
        let stats = compute_layer_stats(&set(vec![vec![0.0, 0.3, 1.0]]), &StatsConfig::default()).unwrap();
        assert_eq!(stats[0].norm_variance, 1.0);
        assert_eq!(stats[0].norm_sparsity, 1.0);
    }

    #[test]
    fn two_layer_variances_one_and_three() {
        // population variance of [-1, 1] is 1; of [-sqrt3, sqrt3] is 3
        let s3 = 3f64.sqrt();
        let stats = compute_layer_stats(
            &set(vec![vec![-1.0, 1.0], vec![-s3, s3]]),
            &StatsConfig::default(),
        )
        .unwrap();
        assert_eq!(stats[0].variance, 1.0);
        assert!((stats[0].norm_variance - 0.25).abs() < 1e-15);
        assert!((stats[1].norm_variance - 0.75).abs() < 1e-15);
        for s in &stats {
            assert!(rel_close(s.std_dev * s.std_dev, s.variance, 1e-12, 0.0));
        }
    }

    #[test]
    fn invalid_set_is_rejected() {
        let mut s = set(vec![vec![1.0, 2.0]]);
        s.layers[0].values = crate::trace::TraceValues::F64(vec![f64::NAN, 2.0]);
        assert!(matches!(
            compute_layer_stats(&s, &StatsConfig::default()),
            Err(Error::Validation(_))
        ));
        assert!(StatsConfig::new(0.0, 1e-6).is_err());
        assert!(StatsConfig::new(0.01, 2.0).is_err());
    }

    fn samples() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..400)
    }

    proptest! {
        #[test]
        fn streaming_agrees_with_two_pass(xs in samples()) {
            let (m1, v1) = mean_variance_two_pass(xs.iter().copied()).unwrap();
            let (m2, v2) = layer_mean_variance_streaming(xs.iter().copied()).unwrap();
            prop_assert!(rel_close(v1, v2, 1e-10, 1e-12), "{v1} vs {v2}");
            prop_assert!(rel_close(m1, m2, 1e-10, 1e-12));
        }

        #[test]
        fn variance_is_shift_invariant(xs in samples(), c in -50.0f64..50.0) {
            let (_, v) = mean_variance_two_pass(xs.iter().copied()).unwrap();
            let (_, vs) = mean_variance_two_pass(xs.iter().map(|x| x + c)).unwrap();
            prop_assert!(rel_close(v, vs, 1e-10, 1e-10), "{v} vs {vs}");
        }

        #[test]
        fn variance_scales_quadratically(xs in samples(), c in -20.0f64..20.0) {
            let (_, v) = mean_variance_two_pass(xs.iter().copied()).unwrap();
            let (_, vs) = mean_variance_two_pass(xs.iter().map(|x| x * c)).unwrap();
            prop_assert!(rel_close(v * c * c, vs, 1e-10, 1e-300));
        }

        #[test]
        fn sparsity_monotone_in_epsilon(xs in samples(), e1 in 1e-4f64..10.0, e2 in 1e-4f64..10.0) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let s1 = sparsity_of(xs.iter().copied(), lo).unwrap();
            let s2 = sparsity_of(xs.iter().copied(), hi).unwrap();
            prop_assert!(s1 <= s2);
            prop_assert!((0.0..=1.0).contains(&s1));
        }

        #[test]
        fn stats_are_permutation_equivariant(
            layers in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 1..6),
            rot in 0usize..6,
        ) {
            let m = layers.len();
            let rot = rot % m;
            let mut rotated = layers.clone();
            rotated.rotate_left(rot);
            let a = compute_layer_stats(&set(layers), &StatsConfig::default()).unwrap();
            let b = compute_layer_stats(&set(rotated), &StatsConfig::default()).unwrap();
            for i in 0..m {
                let x = &a[(i + rot) % m];
                let y = &b[i];
                prop_assert_eq!(x.variance, y.variance);
                prop_assert_eq!(x.sparsity, y.sparsity);
                prop_assert!(rel_close(x.norm_variance, y.norm_variance, 1e-12, 1e-15));
                prop_assert!(rel_close(x.norm_sparsity, y.norm_sparsity, 1e-12, 1e-15));
            }
        }

        #[test]
        fn normalization_partitions_unity(vals in prop::collection::vec(0.0f64..1e3, 1..16)) {
            let out = normalize_across_layers(&vals).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
