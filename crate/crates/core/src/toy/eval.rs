use super::model::{total_nll, Model};
use super::{SkipSet, ToyCheckpoint};
use crate::error::{Error, Result};
use crate::trace::{default_creator, ActivationPoint, Dtype, LayerTrace, TraceSet};

/// Full-length windows evaluated together per forward pass.
const EVAL_BATCH: usize = 16;

/// Splits `len` positions into consecutive windows of at most `width`,
/// returned as `(start, length)` pairs that cover `0..len` exactly once.
pub fn eval_windows(len: usize, width: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(width.max(1)).map(|s| (s, width.min(len - s))).collect()
}

/// Runs `tokens` in `context_len` windows, calling `visit` with the start
/// offset, window count, window length and the model activations.
fn for_each_batch<F>(ckpt: &ToyCheckpoint, tokens: &[u32], skip: &SkipSet, mut visit: F) -> Result<()>
where
    F: FnMut(usize, usize, usize, &super::model::Activations) -> Result<()>,
{
    let layout = ckpt.layout();
    let model = Model::new(&ckpt.config, &layout, &ckpt.params);
    let t = ckpt.config.context_len;
    let windows = eval_windows(tokens.len(), t);
    let full = windows.iter().filter(|w| w.1 == t).count();
    let mut start = 0;
    for chunk in (0..full).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let batch = chunk.len();
        let acts = model.run(&tokens[start..start + batch * t], batch, t, skip)?;
        visit(start, batch, t, &acts)?;
        start += batch * t;
    }
    if start < tokens.len() {
        let len = tokens.len() - start;
        let acts = model.run(&tokens[start..], 1, len, skip)?;
        visit(start, 1, len, &acts)?;
    }
    Ok(())
}

/// `exp(mean next-token cross entropy)` over every position of `heldout`
/// after the first, evaluated in consecutive non-overlapping windows.
pub fn perplexity(ckpt: &ToyCheckpoint, heldout: &[u32], skip: &SkipSet) -> Result<f64> {
    let t = ckpt.config.context_len;
    if heldout.len() <= t {
        return Err(Error::Data(format!(
            "held-out text has {} tokens, needs more than context_len = {t}",
            heldout.len()
        )));
    }
    SkipSet::new(skip.iter(), ckpt.config.n_layers)?;
    let inputs = &heldout[..heldout.len() - 1];
    let targets = &heldout[1..];
    let v = ckpt.config.vocab_size;
    if let Some(&bad) = targets.iter().find(|&&x| x as usize >= v) {
        return Err(Error::Input(format!("token {bad} out of range for vocabulary of {v}")));
    }
    let mut nll = 0.0;
    for_each_batch(ckpt, inputs, skip, |start, batch, len, acts| {
        nll += total_nll(&acts.logits, &targets[start..start + batch * len], v);
        Ok(())
    })?;
    Ok((nll / targets.len() as f64).exp())
}

/// Captures every layer's activations at `point` over `eval_tokens` and
/// packs them as a trace set: one layer trace of `eval_tokens.len()` samples
/// by `d_model` elements per layer.
pub fn capture_traceset(ckpt: &ToyCheckpoint, eval_tokens: &[u32], point: ActivationPoint) -> Result<TraceSet> {
    if eval_tokens.is_empty() {
        return Err(Error::Data("no evaluation tokens to capture".into()));
    }
    let (m, c) = (ckpt.config.n_layers, ckpt.config.d_model);
    let mut buffers: Vec<Vec<f64>> = vec![Vec::with_capacity(eval_tokens.len() * c); m];
    for_each_batch(ckpt, eval_tokens, &SkipSet::none(), |_, _, _, acts| {
        for (buffer, captured) in buffers.iter_mut().zip(acts.captured(point)) {
            buffer.extend(captured.expect("no layer is skipped during capture"));
        }
        Ok(())
    })?;
    let layers = buffers
        .into_iter()
        .enumerate()
        .map(|(i, values)| LayerTrace::from_f64(i, eval_tokens.len(), c, values))
        .collect();
    let mut set = TraceSet::new(ckpt.model_id(), point, Dtype::F64, layers)?;
    set.creator = default_creator();
    Ok(set)
}
