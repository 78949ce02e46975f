use std::ops::Range;

use super::kernels::{
    gelu_grad_from_tanh, gelu_with_tanh, gemm, gemm_into, layernorm, layernorm_backward, linear, linear_backward,
    softmax_in_place, View,
};
use super::{ParamLayout, SkipSet, ToyCheckpoint, ToyModelConfig};
use crate::error::{Error, Result};
use crate::trace::ActivationPoint;

pub(crate) struct Model<'a> {
    pub cfg: &'a ToyModelConfig,
    pub layout: &'a ParamLayout,
    pub params: &'a [f64],
}

struct LnCache {
    out: Vec<f64>,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl LnCache {
    fn run(x: &[f64], gain: &[f64], bias: &[f64], rows: usize, width: usize) -> Self {
        let mut cache = LnCache {
            out: vec![0.0; rows * width],
            mean: vec![0.0; rows],
            rstd: vec![0.0; rows],
        };
        layernorm(x, gain, bias, width, &mut cache.out, &mut cache.mean, &mut cache.rstd);
        cache
    }
}

struct BlockCache {
    input: Vec<f64>,
    ln1: LnCache,
    qkv: Vec<f64>,
    att: Vec<f64>,
    atty: Vec<f64>,
    attn_out: Vec<f64>,
    x1: Vec<f64>,
    ln2: LnCache,
    fc: Vec<f64>,
    fc_tanh: Vec<f64>,
    act: Vec<f64>,
    mlp_out: Vec<f64>,
    output: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Activations {
    batch: usize,
    len: usize,
    blocks: Vec<Option<BlockCache>>,
    final_input: Vec<f64>,
    lnf: LnCache,
    pub logits: Vec<f64>,
}

impl Activations {
    fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn captured(&self, point: ActivationPoint) -> Vec<Option<Vec<f64>>> {
        self.blocks
            .iter()
            .map(|b| {
                b.as_ref().map(|b| match point {
                    ActivationPoint::BlockOutput => b.output.clone(),
                    ActivationPoint::AttentionOutput => b.attn_out.clone(),
                    ActivationPoint::MlpOutput => b.mlp_out.clone(),
                    ActivationPoint::BlockUpdate => b.output.iter().zip(&b.input).map(|(o, i)| o - i).collect(),
                })
            })
            .collect()
    }
}

/// Output of [`forward`] / [`forward_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[batch * len, vocab_size]`, row-major.
    pub logits: Vec<f64>,
    /// Per layer, `[batch * len, d_model]` activations at the requested
    /// capture point; `None` for skipped layers or when capture is off.
    pub captured: Vec<Option<Vec<f64>>>,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a ToyModelConfig, layout: &'a ParamLayout, params: &'a [f64]) -> Self {
        Model { cfg, layout, params }
    }

    fn p(&self, r: &Range<usize>) -> &'a [f64] {
        &self.params[r.clone()]
    }

    fn head(&self) -> View<'a> {
        match &self.layout.head_weight {
            Some(r) => View::rows(self.p(r), self.cfg.vocab_size),
            None => View::transposed(self.p(&self.layout.tok_emb), self.cfg.d_model),
        }
    }

    fn check_input(&self, tokens: &[u32], batch: usize, len: usize, skip: &SkipSet) -> Result<()> {
        if batch == 0 || len == 0 || tokens.len() != batch * len {
            return Err(Error::Input(format!(
                "{} tokens do not form {batch} sequences of length {len}",
                tokens.len()
            )));
        }
        if len > self.cfg.context_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds context length {}",
                self.cfg.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if let Some(l) = skip.max().filter(|&l| l >= self.cfg.n_layers) {
            return Err(Error::Input(format!("skip layer {l} out of range")));
        }
        Ok(())
    }

    pub fn run(&self, tokens: &[u32], batch: usize, len: usize, skip: &SkipSet) -> Result<Activations> {
        self.check_input(tokens, batch, len, skip)?;
        let (c, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let rows = batch * len;
        let tok = self.p(&self.layout.tok_emb);
        let pos = self.p(&self.layout.pos_emb);
        let mut x = vec![0.0; rows * c];
        for (r, xr) in x.chunks_exact_mut(c).enumerate() {
            let t = tokens[r] as usize;
            let p = r % len;
            for i in 0..c {
                xr[i] = tok[t * c + i] + pos[p * c + i];
            }
        }
        let mut blocks = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            if skip.contains(l) {
                blocks.push(None);
                continue;
            }
            let cache = self.block_forward(l, x, batch, len);
            x = cache.output.clone();
            blocks.push(Some(cache));
        }
        let lnf = LnCache::run(&x, self.p(&self.layout.lnf_gain), self.p(&self.layout.lnf_bias), rows, c);
        let mut logits = vec![0.0; rows * v];
        linear(&lnf.out, self.head(), self.p(&self.layout.head_bias), rows, c, v, &mut logits);
        Ok(Activations {
            batch,
            len,
            blocks,
            final_input: x,
            lnf,
            logits,
        })
    }

    fn block_forward(&self, l: usize, input: Vec<f64>, batch: usize, len: usize) -> BlockCache {
        let bp = &self.layout.blocks[l];
        let (c, h) = (self.cfg.d_model, self.cfg.hidden());
        let rows = batch * len;

        let ln1 = LnCache::run(&input, self.p(&bp.ln1_gain), self.p(&bp.ln1_bias), rows, c);
        let mut qkv = vec![0.0; rows * 3 * c];
        linear(&ln1.out, View::rows(self.p(&bp.qkv_weight), 3 * c), self.p(&bp.qkv_bias), rows, c, 3 * c, &mut qkv);
        let mut att = vec![0.0; batch * self.cfg.n_heads * len * len];
        let mut atty = vec![0.0; rows * c];
        attention_forward(&qkv, batch, len, self.cfg.n_heads, self.cfg.head_dim(), &mut att, &mut atty);
        let mut attn_out = vec![0.0; rows * c];
        linear(&atty, View::rows(self.p(&bp.out_weight), c), self.p(&bp.out_bias), rows, c, c, &mut attn_out);
        let x1: Vec<f64> = input.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let ln2 = LnCache::run(&x1, self.p(&bp.ln2_gain), self.p(&bp.ln2_bias), rows, c);
        let mut fc = vec![0.0; rows * h];
        linear(&ln2.out, View::rows(self.p(&bp.fc_weight), h), self.p(&bp.fc_bias), rows, c, h, &mut fc);
        let (act, fc_tanh): (Vec<f64>, Vec<f64>) = fc.iter().map(|&z| gelu_with_tanh(z)).unzip();
        let mut mlp_out = vec![0.0; rows * c];
        linear(&act, View::rows(self.p(&bp.proj_weight), c), self.p(&bp.proj_bias), rows, h, c, &mut mlp_out);
        let output = x1.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

        BlockCache {
            input,
            ln1,
            qkv,
            att,
            atty,
            attn_out,
            x1,
            ln2,
            fc,
            fc_tanh,
            act,
            mlp_out,
            output,
        }
    }

    /// Accumulates parameter gradients into `grad` given `dlogits`.
    pub fn backward(&self, acts: &Activations, tokens: &[u32], dlogits: &[f64], grad: &mut [f64]) {
        let (c, v, h) = (self.cfg.d_model, self.cfg.vocab_size, self.cfg.hidden());
        let rows = acts.rows();
        let layout = self.layout;

        // output head
        let mut dxf = vec![0.0; rows * c];
        {
            let dw = layout.head_weight.clone();
            let (dw, db) = match &dw {
                Some(w) => {
                    let (a, b) = two_mut(grad, w, &layout.head_bias);
                    (Some(a), b)
                }
                None => (None, &mut grad[layout.head_bias.clone()]),
            };
            linear_backward(&acts.lnf.out, self.head(), dlogits, rows, c, v, dw, db, Some(&mut dxf));
        }
        if layout.head_weight.is_none() {
            // tied: logits = xf E^T, so dE += dlogits^T xf
            gemm(
                v,
                rows,
                c,
                View::transposed(dlogits, v),
                View::rows(&acts.lnf.out, c),
                1.0,
                &mut grad[layout.tok_emb.clone()],
            );
        }

        let mut dx = vec![0.0; rows * c];
        {
            let (dg, db) = two_mut(grad, &layout.lnf_gain, &layout.lnf_bias);
            layernorm_backward(
                &acts.final_input,
                self.p(&layout.lnf_gain),
                &acts.lnf.mean,
                &acts.lnf.rstd,
                &dxf,
                c,
                dg,
                db,
                &mut dx,
            );
        }

        for (l, cache) in acts.blocks.iter().enumerate().rev() {
            let Some(cache) = cache else { continue };
            let bp = &layout.blocks[l];

            // MLP branch: output = x1 + proj(gelu(fc(ln2(x1))))
            let mut dx1 = dx.clone();
            let mut dact = vec![0.0; rows * h];
            {
                let (dw, db) = two_mut(grad, &bp.proj_weight, &bp.proj_bias);
                linear_backward(&cache.act, View::rows(self.p(&bp.proj_weight), c), &dx, rows, h, c, Some(dw), db, Some(&mut dact));
            }
            for ((d, &z), &t) in dact.iter_mut().zip(&cache.fc).zip(&cache.fc_tanh) {
                *d *= gelu_grad_from_tanh(z, t);
            }
            let mut dln2 = vec![0.0; rows * c];
            {
                let (dw, db) = two_mut(grad, &bp.fc_weight, &bp.fc_bias);
                linear_backward(&cache.ln2.out, View::rows(self.p(&bp.fc_weight), h), &dact, rows, c, h, Some(dw), db, Some(&mut dln2));
            }
            {
                let (dg, db) = two_mut(grad, &bp.ln2_gain, &bp.ln2_bias);
                layernorm_backward(&cache.x1, self.p(&bp.ln2_gain), &cache.ln2.mean, &cache.ln2.rstd, &dln2, c, dg, db, &mut dx1);
            }

            // attention branch: x1 = input + out(attn(qkv(ln1(input))))
            let mut dinput = dx1.clone();
            let mut datty = vec![0.0; rows * c];
            {
                let (dw, db) = two_mut(grad, &bp.out_weight, &bp.out_bias);
                linear_backward(&cache.atty, View::rows(self.p(&bp.out_weight), c), &dx1, rows, c, c, Some(dw), db, Some(&mut datty));
            }
            let mut dqkv = vec![0.0; rows * 3 * c];
            attention_backward(
                &cache.qkv,
                &cache.att,
                &datty,
                acts.batch,
                acts.len,
                self.cfg.n_heads,
                self.cfg.head_dim(),
                &mut dqkv,
            );
            let mut dln1 = vec![0.0; rows * c];
            {
                let (dw, db) = two_mut(grad, &bp.qkv_weight, &bp.qkv_bias);
                linear_backward(&cache.ln1.out, View::rows(self.p(&bp.qkv_weight), 3 * c), &dqkv, rows, c, 3 * c, Some(dw), db, Some(&mut dln1));
            }
            {
                let (dg, db) = two_mut(grad, &bp.ln1_gain, &bp.ln1_bias);
                layernorm_backward(&cache.input, self.p(&bp.ln1_gain), &cache.ln1.mean, &cache.ln1.rstd, &dln1, c, dg, db, &mut dinput);
            }
            dx = dinput;
        }

        let len = acts.len;
        {
            let (dtok, dpos) = two_mut(grad, &layout.tok_emb, &layout.pos_emb);
            for (r, dr) in dx.chunks_exact(c).enumerate() {
                let t = tokens[r] as usize;
                let p = r % len;
                for i in 0..c {
                    dtok[t * c + i] += dr[i];
                    dpos[p * c + i] += dr[i];
                }
            }
        }
    }
}

/// Disjoint mutable views of two ranges of one buffer; `a` must precede `b`.
fn two_mut<'g>(buf: &'g mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'g mut [f64], &'g mut [f64]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

/// Strided `[len, hd]` view of one head's queries, keys or values
/// (`part` 0, 1, 2) inside the packed `[rows, 3c]` projection.
fn head_view(qkv: &[f64], b: usize, h: usize, part: usize, len: usize, c: usize, hd: usize) -> View<'_> {
    View {
        data: &qkv[b * len * 3 * c + part * c + h * hd..],
        row_stride: 3 * c,
        col_stride: 1,
    }
}

fn transpose(v: View<'_>) -> View<'_> {
    View {
        data: v.data,
        row_stride: v.col_stride,
        col_stride: v.row_stride,
    }
}

fn attention_forward(qkv: &[f64], batch: usize, len: usize, heads: usize, hd: usize, att: &mut [f64], y: &mut [f64]) {
    let c = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    for b in 0..batch {
        for h in 0..heads {
            let a = &mut att[(b * heads + h) * len * len..][..len * len];
            let q = head_view(qkv, b, h, 0, len, c, hd);
            let k = head_view(qkv, b, h, 1, len, c, hd);
            gemm_into(len, hd, len, scale, q, transpose(k), 0.0, a, len);
            for (t, row) in a.chunks_exact_mut(len).enumerate() {
                softmax_in_place(&mut row[..=t]);
                row[t + 1..].iter_mut().for_each(|x| *x = 0.0);
            }
            let v = head_view(qkv, b, h, 2, len, c, hd);
            gemm_into(len, len, hd, 1.0, View::rows(a, len), v, 0.0, &mut y[b * len * c + h * hd..], c);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f64],
    att: &[f64],
    dy: &[f64],
    batch: usize,
    len: usize,
    heads: usize,
    hd: usize,
    dqkv: &mut [f64],
) {
    let c = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut datt = vec![0.0; len * len];
    for b in 0..batch {
        for h in 0..heads {
            let a = &att[(b * heads + h) * len * len..][..len * len];
            let dyh = View {
                data: &dy[b * len * c + h * hd..],
                row_stride: c,
                col_stride: 1,
            };
            let base = b * len * 3 * c + h * hd;
            let v = head_view(qkv, b, h, 2, len, c, hd);
            gemm_into(len, hd, len, 1.0, dyh, transpose(v), 0.0, &mut datt, len);
            gemm_into(len, len, hd, 1.0, View::transposed(a, len), dyh, 1.0, &mut dqkv[base + 2 * c..], 3 * c);
            // softmax backward; masked entries have zero probability and stay zero
            for (row, drow) in a.chunks_exact(len).zip(datt.chunks_exact_mut(len)) {
                let dot: f64 = row.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
                drow.iter_mut().zip(row).for_each(|(d, p)| *d = p * (*d - dot) * scale);
            }
            let q = head_view(qkv, b, h, 0, len, c, hd);
            let k = head_view(qkv, b, h, 1, len, c, hd);
            gemm_into(len, len, hd, 1.0, View::rows(&datt, len), k, 1.0, &mut dqkv[base..], 3 * c);
            gemm_into(len, len, hd, 1.0, View::transposed(&datt, len), q, 1.0, &mut dqkv[base + c..], 3 * c);
        }
    }
}

/// Mean next-token cross entropy and `dloss/dlogits`.
pub(crate) fn cross_entropy(logits: &[f64], targets: &[u32], vocab: usize) -> (f64, Vec<f64>) {
    let rows = targets.len();
    let mut probs = logits.to_vec();
    let mut loss = 0.0;
    for (r, row) in probs.chunks_exact_mut(vocab).enumerate() {
        let t = targets[r] as usize;
        let logit = row[t];
        let lse = softmax_in_place(row);
        loss += lse - logit;
        row[t] -= 1.0;
        row.iter_mut().for_each(|p| *p /= rows as f64);
    }
    (loss / rows as f64, probs)
}

/// Summed (not averaged) negative log-likelihood of `targets` under `logits`.
pub(crate) fn total_nll(logits: &[f64], targets: &[u32], vocab: usize) -> f64 {
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .sum()
}

/// Runs one sequence (`tokens.len() <= context_len`) through the model.
///
/// Skipped layers act as the identity on the residual stream. With
/// `capture` set, each executed layer's activations at that point are
/// returned alongside the logits.
pub fn forward(
    ckpt: &ToyCheckpoint,
    tokens: &[u32],
    skip: &SkipSet,
    capture: Option<ActivationPoint>,
) -> Result<ForwardOutput> {
    forward_batch(ckpt, tokens, 1, skip, capture)
}

/// Like [`forward`] for `batch` equal-length sequences laid out back to back.
pub fn forward_batch(
    ckpt: &ToyCheckpoint,
    tokens: &[u32],
    batch: usize,
    skip: &SkipSet,
    capture: Option<ActivationPoint>,
) -> Result<ForwardOutput> {
    let layout = ckpt.layout();
    let model = Model::new(&ckpt.config, &layout, &ckpt.params);
    let len = tokens.len().checked_div(batch).unwrap_or(0);
    let acts = model.run(tokens, batch, len, skip)?;
    let captured = match capture {
        Some(point) => acts.captured(point),
        None => vec![None; ckpt.config.n_layers],
    };
    Ok(ForwardOutput {
        logits: acts.logits,
        captured,
    })
}

/// Mean cross entropy of predicting `targets` from `inputs` (both
/// `batch * len` tokens) and its gradient with respect to every parameter.
pub fn loss_and_gradient(ckpt: &ToyCheckpoint, inputs: &[u32], targets: &[u32], batch: usize) -> Result<(f64, Vec<f64>)> {
    let layout = ckpt.layout();
    let model = Model::new(&ckpt.config, &layout, &ckpt.params);
    let mut grad = vec![0.0; layout.total];
    let loss = model.loss_and_gradient(inputs, targets, batch, &mut grad)?;
    Ok((loss, grad))
}

impl Model<'_> {
    pub fn loss_and_gradient(&self, inputs: &[u32], targets: &[u32], batch: usize, grad: &mut [f64]) -> Result<f64> {
        if targets.len() != inputs.len() {
            return Err(Error::Input("inputs and targets differ in length".into()));
        }
        let v = self.cfg.vocab_size;
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Input(format!("target {t} out of range for vocabulary of {v}")));
        }
        let len = inputs.len().checked_div(batch).unwrap_or(0);
        let acts = self.run(inputs, batch, len, &SkipSet::none())?;
        let (loss, dlogits) = cross_entropy(&acts.logits, targets, v);
        self.backward(&acts, inputs, &dlogits, grad);
        Ok(loss)
    }

    pub fn loss(&self, inputs: &[u32], targets: &[u32], batch: usize) -> Result<f64> {
        let len = inputs.len().checked_div(batch).unwrap_or(0);
        let acts = self.run(inputs, batch, len, &SkipSet::none())?;
        Ok(total_nll(&acts.logits, targets, self.cfg.vocab_size) / targets.len() as f64)
    }
}
