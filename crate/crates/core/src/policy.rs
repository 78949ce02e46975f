//! Pruning plans and the registry of layer-selection policies.
//!
//! Each policy turns a ranked list of [`AvssEntry`] values plus one numeric
//! parameter into a [`PruningPlan`]. Policies are looked up by name at run
//! time, so the CLI `--policy` flag and reports only ever carry the name.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{ascending_order, AvssEntry};

pub const LOWEST_FRACTION: &str = "lowest-fraction";
pub const CUMULATIVE_MASS: &str = "cumulative-mass";
pub const RANDOM_CONTROL: &str = "random-control";
pub const TIE_BREAK: &str = "lower index pruned first";
pub const DEFAULT_RHO: f64 = 0.25;

/// Slack for summing normalized scores against a mass budget.
const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Registered name of the policy that produced this plan.
    pub policy: String,
    /// The policy parameter: prune fraction for `lowest-fraction`, score
    /// mass for `cumulative-mass`, layer count for `random-control`.
    pub parameter: f64,
    pub layer_count: usize,
    pub pruned_layers: Vec<usize>,
    pub kept_layers: Vec<usize>,
    pub tie_break: String,
}

impl PruningPlan {
    fn from_pruned(policy: &str, parameter: f64, layer_count: usize, mut pruned: Vec<usize>) -> Self {
        pruned.sort_unstable();
        let kept = (0..layer_count).filter(|i| pruned.binary_search(i).is_err()).collect();
        PruningPlan {
            policy: policy.to_string(),
            parameter,
            layer_count,
            pruned_layers: pruned,
            kept_layers: kept,
            tie_break: TIE_BREAK.to_string(),
        }
    }

    /// Checks complementarity and index range against a model depth.
    pub fn check(&self, layer_count: usize) -> Result<()> {
        if self.layer_count != layer_count {
            return Err(Error::Plan(format!(
                "plan is for {} layers, model has {layer_count}",
                self.layer_count
            )));
        }
        if let Some(&bad) = self.pruned_layers.iter().chain(&self.kept_layers).find(|&&i| i >= layer_count) {
            return Err(Error::Plan(format!(
                "layer {bad} out of range for a {layer_count}-layer model"
            )));
        }
        let mut all: Vec<usize> = self.pruned_layers.iter().chain(&self.kept_layers).copied().collect();
        all.sort_unstable();
        if all != (0..layer_count).collect::<Vec<_>>() {
            return Err(Error::Plan(
                "pruned and kept layers must partition 0..M without duplicates".into(),
            ));
        }
        Ok(())
    }
}

fn check_unit(name: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be in [0, 1], got {value}")))
    }
}

fn norms(entries: &[AvssEntry]) -> Vec<f64> {
    entries.iter().map(|e| e.norm_avss).collect()
}

/// Prunes the `floor(rho * M)` layers with the lowest normalized score.
pub fn make_pruning_plan(entries: &[AvssEntry], rho: f64) -> Result<PruningPlan> {
    check_unit("rho", rho)?;
    let m = entries.len();
    // guard against products like 0.29 * 100 = 28.999999999999996
    let count = ((rho * m as f64) + 1e-9).floor() as usize;
    let pruned = ascending_order(&norms(entries)).into_iter().take(count.min(m)).collect();
    Ok(PruningPlan::from_pruned(LOWEST_FRACTION, rho, m, pruned))
}

/// Prunes the longest run of lowest-scoring layers whose summed normalized
/// score stays within `mass`.
pub fn make_pruning_plan_by_mass(entries: &[AvssEntry], mass: f64) -> Result<PruningPlan> {
    check_unit("mass", mass)?;
    let norm = norms(entries);
    let mut total = 0.0;
    let pruned = ascending_order(&norm)
        .into_iter()
        .take_while(|&i| {
            total += norm[i];
            total <= mass + MASS_TOLERANCE
        })
        .collect();
    Ok(PruningPlan::from_pruned(CUMULATIVE_MASS, mass, entries.len(), pruned))
}

/// Uniformly samples `count` of `layer_count` layers without replacement.
pub fn random_plan(layer_count: usize, count: usize, seed: u64) -> Result<PruningPlan> {
    if count > layer_count {
        return Err(Error::Plan(format!(
            "cannot prune {count} of {layer_count} layers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pruned = rand::seq::index::sample(&mut rng, layer_count, count).into_vec();
    Ok(PruningPlan::from_pruned(RANDOM_CONTROL, count as f64, layer_count, pruned))
}

pub trait SelectionPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Name of the numeric parameter, as shown in reports and on the CLI.
    fn parameter_name(&self) -> &'static str;

    fn select(&self, entries: &[AvssEntry], parameter: f64) -> Result<PruningPlan>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LowestFraction;

impl SelectionPolicy for LowestFraction {
    fn name(&self) -> &'static str {
        LOWEST_FRACTION
    }

    fn parameter_name(&self) -> &'static str {
        "rho"
    }

    fn select(&self, entries: &[AvssEntry], parameter: f64) -> Result<PruningPlan> {
        make_pruning_plan(entries, parameter)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CumulativeMass;

impl SelectionPolicy for CumulativeMass {
    fn name(&self) -> &'static str {
        CUMULATIVE_MASS
    }

    fn parameter_name(&self) -> &'static str {
        "mass"
    }

    fn select(&self, entries: &[AvssEntry], parameter: f64) -> Result<PruningPlan> {
        make_pruning_plan_by_mass(entries, parameter)
    }
}

pub struct PolicyRegistry {
    policies: BTreeMap<&'static str, Box<dyn SelectionPolicy>>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        PolicyRegistry {
            policies: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register(Box::new(LowestFraction)).unwrap();
        registry.register(Box::new(CumulativeMass)).unwrap();
        registry
    }

    pub fn register(&mut self, policy: Box<dyn SelectionPolicy>) -> Result<()> {
        let name = policy.name();
        if self.policies.contains_key(name) {
            return Err(Error::Usage(format!("policy `{name}` is already registered")));
        }
        self.policies.insert(name, policy);
        Ok(())
    }

    /// Looks up a policy; underscores are accepted in place of dashes.
    pub fn get(&self, name: &str) -> Result<&dyn SelectionPolicy> {
        let key = name.replace('_', "-");
        self.policies.get(key.as_str()).map(|p| p.as_ref()).ok_or_else(|| {
            Error::Usage(format!(
                "unknown policy `{name}` (available: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.policies.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(norm: &[f64]) -> Vec<AvssEntry> {
        norm.iter()
            .enumerate()
            .map(|(i, &n)| AvssEntry {
                layer_index: i,
                avss: n,
                norm_avss: n,
                cumulative_avss: 0.0,
                rank: 0,
            })
            .collect()
    }

    const EIGHT: [f64; 8] = [0.05, 0.30, 0.10, 0.25, 0.02, 0.08, 0.15, 0.05];

    #[test]
    fn zero_fraction_prunes_nothing() {
        let plan = make_pruning_plan(&entries(&EIGHT), 0.0).unwrap();
        assert!(plan.pruned_layers.is_empty());
        assert_eq!(plan.kept_layers, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn quarter_of_eight_uses_index_tie_break() {
        let plan = make_pruning_plan(&entries(&EIGHT), 0.25).unwrap();
        assert_eq!(plan.pruned_layers, vec![0, 4]);
        assert_eq!(plan.kept_layers, vec![1, 2, 3, 5, 6, 7]);
        assert_eq!(plan.policy, LOWEST_FRACTION);
    }

    #[test]
    fn quarter_of_four_prunes_argmin() {
        let plan = make_pruning_plan(&entries(&[0.3, 0.1, 0.4, 0.2]), 0.25).unwrap();
        assert_eq!(plan.pruned_layers, vec![1]);
    }

    #[test]
    fn fraction_out_of_range() {
        assert!(matches!(make_pruning_plan(&entries(&EIGHT), 1.5), Err(Error::Domain(_))));
        assert!(matches!(make_pruning_plan(&entries(&EIGHT), -0.1), Err(Error::Domain(_))));
        assert!(make_pruning_plan_by_mass(&entries(&EIGHT), f64::NAN).is_err());
    }

    #[test]
    fn mass_examples() {
        let e = entries(&EIGHT);
        assert!(make_pruning_plan_by_mass(&e, 0.0).unwrap().pruned_layers.is_empty());
        assert_eq!(make_pruning_plan_by_mass(&e, 0.2).unwrap().pruned_layers, vec![0, 4, 5, 7]);
        assert_eq!(make_pruning_plan_by_mass(&e, 1.0).unwrap().pruned_layers.len(), 8);
    }

    #[test]
    fn random_plan_is_seeded_and_sized() {
        let a = random_plan(8, 2, 42).unwrap();
        assert_eq!(a, random_plan(8, 2, 42).unwrap());
        assert_eq!(a.pruned_layers.len(), 2);
        a.check(8).unwrap();
        assert!(random_plan(3, 4, 0).is_err());
    }

    #[test]
    fn plan_check_rejects_out_of_range() {
        let mut plan = make_pruning_plan(&entries(&EIGHT), 0.25).unwrap();
        assert!(plan.check(8).is_ok());
        assert!(matches!(plan.check(6), Err(Error::Plan(_))));
        plan.pruned_layers.push(9);
        plan.layer_count = 8;
        assert!(matches!(plan.check(8), Err(Error::Plan(_))));
    }

    #[test]
    fn registry_lookup() {
        let registry = PolicyRegistry::with_builtins();
        assert_eq!(registry.names(), vec![CUMULATIVE_MASS, LOWEST_FRACTION]);
        assert_eq!(registry.get("lowest_fraction").unwrap().parameter_name(), "rho");
        let plan = registry.get("cumulative-mass").unwrap().select(&entries(&EIGHT), 0.2).unwrap();
        assert_eq!(plan.pruned_layers, vec![0, 4, 5, 7]);
        assert!(matches!(registry.get("gradient"), Err(Error::Usage(_))));
    }

    #[test]
    fn registry_accepts_custom_policies() {
        struct KeepAll;
        impl SelectionPolicy for KeepAll {
            fn name(&self) -> &'static str {
                "keep-all"
            }
            fn parameter_name(&self) -> &'static str {
                "unused"
            }
            fn select(&self, entries: &[AvssEntry], p: f64) -> Result<PruningPlan> {
                Ok(PruningPlan::from_pruned("keep-all", p, entries.len(), vec![]))
            }
        }
        let mut registry = PolicyRegistry::with_builtins();
        registry.register(Box::new(KeepAll)).unwrap();
        assert!(registry.register(Box::new(KeepAll)).is_err());
        let plan = registry.get("keep-all").unwrap().select(&entries(&EIGHT), 0.0).unwrap();
        assert_eq!(plan.kept_layers.len(), 8);
    }

    fn norm_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_map(|v| {
            let total: f64 = v.iter().sum();
            if total > 0.0 {
                v.iter().map(|x| x / total).collect()
            } else {
                vec![1.0 / v.len() as f64; v.len()]
            }
        })
    }

    proptest! {
        #[test]
        fn plans_partition_layers(norm in norm_vec(), p in 0.0f64..=1.0) {
            let e = entries(&norm);
            for plan in [make_pruning_plan(&e, p).unwrap(), make_pruning_plan_by_mass(&e, p).unwrap()] {
                plan.check(norm.len()).unwrap();
                let max_pruned = plan.pruned_layers.iter().map(|&i| norm[i]).fold(f64::MIN, f64::max);
                let min_kept = plan.kept_layers.iter().map(|&i| norm[i]).fold(f64::MAX, f64::min);
                prop_assert!(plan.pruned_layers.is_empty() || plan.kept_layers.is_empty() || max_pruned <= min_kept);
            }
        }

        #[test]
        fn fraction_plans_are_nested(norm in norm_vec(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let e = entries(&norm);
            let small = make_pruning_plan(&e, lo).unwrap();
            let large = make_pruning_plan(&e, hi).unwrap();
            prop_assert!(small.pruned_layers.iter().all(|i| large.pruned_layers.contains(i)));
            prop_assert_eq!(small.pruned_layers.len(), ((lo * norm.len() as f64) + 1e-9).floor() as usize);
        }
    }
}
