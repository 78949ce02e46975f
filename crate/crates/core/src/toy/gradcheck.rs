use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::Model;
use super::{init_checkpoint, ParamLayout, ToyModelConfig};
use crate::error::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, DENOM_FLOOR)`.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many parameters (sampled with `seed`); all when `None`.
    pub max_params: Option<usize>,
    /// Noise added on top of the standard initialization so that norm gains
    /// and biases are not at their trivial values.
    pub perturb_std: f64,
    /// Zero the output head weights before checking.
    pub zero_head: bool,
    /// Restrict the check to tensors whose name starts with this prefix.
    pub only: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            step: 1e-5,
            max_params: None,
            perturb_std: 0.1,
            zero_head: false,
            only: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
    pub loss: f64,
}

/// Compares analytic gradients of the training loss with central finite
/// differences on one random batch.
pub fn gradient_check(config: &ToyModelConfig, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut ckpt = init_checkpoint(config)?;
    let layout = ParamLayout::new(config);
    if layout.total > 20_000 {
        return Err(Error::Domain(format!(
            "{} parameters is too many for a finite-difference check",
            layout.total
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    if options.perturb_std > 0.0 {
        let noise = Normal::new(0.0, options.perturb_std).map_err(|e| Error::Domain(e.to_string()))?;
        ckpt.params.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
    }
    if options.zero_head {
        if let Some(head) = ckpt.tensor_mut("head.weight") {
            head.fill(0.0);
        }
    }

    let (b, t, v) = (config.batch_size, config.context_len, config.vocab_size as u32);
    let inputs: Vec<u32> = (0..b * t).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(0..v)).collect();

    let mut grad = vec![0.0; layout.total];
    let loss = Model::new(config, &layout, &ckpt.params).loss_and_gradient(&inputs, &targets, b, &mut grad)?;

    let mut candidates: Vec<usize> = match &options.only {
        Some(prefix) => layout
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix.as_str()))
            .flat_map(|t| t.range.clone())
            .collect(),
        None => (0..layout.total).collect(),
    };
    if let Some(limit) = options.max_params.filter(|&l| l < candidates.len()) {
        let picked = rand::seq::index::sample(&mut rng, candidates.len(), limit);
        let mut chosen: Vec<usize> = picked.iter().map(|i| candidates[i]).collect();
        chosen.sort_unstable();
        candidates = chosen;
    }

    let mut params = ckpt.params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_parameter: String::new(),
        checked: candidates.len(),
        loss,
    };
    for &i in &candidates {
        let original = params[i];
        params[i] = original + options.step;
        let plus = Model::new(config, &layout, &params).loss(&inputs, &targets, b)?;
        params[i] = original - options.step;
        let minus = Model::new(config, &layout, &params).loss(&inputs, &targets, b)?;
        params[i] = original;
        let numeric = (plus - minus) / (2.0 * options.step);
        let analytic = grad[i];
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            let owner = layout.owner(i).map(|t| t.name.as_str()).unwrap_or("?");
            report.worst_parameter = format!("{owner}[{}]", i - layout.owner(i).map_or(0, |t| t.range.start));
        }
    }
    Ok(report)
}
