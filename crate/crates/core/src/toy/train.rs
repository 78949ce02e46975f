use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::Model;
use super::{ParamLayout, ToyCheckpoint, ToyModelConfig};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;
/// Final learning rate as a fraction of the peak after cosine decay.
const LR_FLOOR: f64 = 0.1;

/// Seeded initialization: N(0, 0.02) weights and embeddings, residual output
/// projections scaled down by `1/sqrt(2 * n_layers)`, unit norm gains, zero biases.
pub fn init_checkpoint(config: &ToyModelConfig) -> Result<ToyCheckpoint> {
    config.check()?;
    let layout = ParamLayout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; layout.total];
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
    for t in &layout.tensors {
        let slot = &mut params[t.range.clone()];
        let name = t.name.as_str();
        if name.ends_with(".gain") {
            slot.fill(1.0);
        } else if name.ends_with(".bias") {
            slot.fill(0.0);
        } else {
            let scale = if name.ends_with("attn.out.weight") || name.ends_with("mlp.proj.weight") {
                residual_scale
            } else {
                1.0
            };
            slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng) * scale);
        }
    }
    Ok(ToyCheckpoint {
        config: config.clone(),
        params,
        train_loss_history: Vec::new(),
    })
}

fn learning_rate(config: &ToyModelConfig, step: usize) -> f64 {
    let total = config.train_steps.max(1);
    let warmup = (total / 10).clamp(1, 50);
    if step < warmup {
        return config.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    config.learning_rate * (LR_FLOOR + (1.0 - LR_FLOOR) * cosine)
}

/// Trains a model on `corpus` with next-token cross entropy.
///
/// Deterministic in `(config, corpus)`: initialization and batch sampling
/// both draw from a ChaCha8 stream seeded with `config.seed`.
pub fn train(config: &ToyModelConfig, corpus: &[u32]) -> Result<ToyCheckpoint> {
    let mut ckpt = init_checkpoint(config)?;
    let t = config.context_len;
    if corpus.len() < t + 1 {
        return Err(Error::Data(format!(
            "corpus has {} tokens, training needs at least context_len + 1 = {}",
            corpus.len(),
            t + 1
        )));
    }
    if let Some(&tok) = corpus.iter().find(|&&x| x as usize >= config.vocab_size) {
        return Err(Error::Data(format!(
            "corpus token {tok} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    let layout = ParamLayout::new(config);
    // separate stream from initialization so that changing train_steps does
    // not perturb the initial weights
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let (b, n) = (config.batch_size, layout.total);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut inputs = vec![0u32; b * t];
    let mut targets = vec![0u32; b * t];
    let max_start = corpus.len() - t - 1;

    for step in 0..config.train_steps {
        for i in 0..b {
            let s = rng.gen_range(0..=max_start);
            inputs[i * t..(i + 1) * t].copy_from_slice(&corpus[s..s + t]);
            targets[i * t..(i + 1) * t].copy_from_slice(&corpus[s + 1..s + t + 1]);
        }
        grad.fill(0.0);
        let loss = Model::new(config, &layout, &ckpt.params).loss_and_gradient(&inputs, &targets, b, &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        ckpt.train_loss_history.push(loss);

        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        let lr = learning_rate(config, step);
        let bc1 = 1.0 - BETA1.powi(step as i32 + 1);
        let bc2 = 1.0 - BETA2.powi(step as i32 + 1);
        for i in 0..n {
            let g = grad[i] * clip;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            ckpt.params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(ckpt)
}
