//! A small byte-level decoder-only transformer used as a pruning testbed.
//!
//! Pre-norm blocks (norm -> attention -> residual add, norm -> MLP -> residual
//! add), learned positional embeddings, f64 everywhere. Removing a layer means
//! skipping its block, which leaves the residual stream untouched.

mod checkpoint;
mod eval;
mod gradcheck;
mod kernels;
mod model;
mod train;

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, CHECKPOINT_EXTENSION};
pub use eval::{capture_traceset, eval_windows, perplexity};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use model::{forward, forward_batch, loss_and_gradient, ForwardOutput};
pub use train::{init_checkpoint, train};

/// Hidden width of the MLP relative to `d_model`.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Share the token embedding with the output head.
    #[serde(default)]
    pub tie_head: bool,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: 256,
            context_len: 64,
            d_model: 128,
            n_heads: 4,
            n_layers: 8,
            seed: 0,
            learning_rate: 3e-3,
            train_steps: 150,
            batch_size: 16,
            tie_head: false,
        }
    }
}

impl ToyModelConfig {
    /// The single-layer configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ToyModelConfig {
            vocab_size: 11,
            context_len: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            seed: 7,
            learning_rate: 1e-2,
            train_steps: 0,
            batch_size: 2,
            tie_head: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Domain(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Domain(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Domain(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * MLP_RATIO
    }

    /// Applies `key=value` overrides, e.g. `d_model=64`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
        let bad = |e: &dyn std::fmt::Display| Error::Usage(format!("override `{assignment}`: {e}"));
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "vocab_size" => self.vocab_size = value.parse().map_err(|e| bad(&e))?,
            "context_len" => self.context_len = value.parse().map_err(|e| bad(&e))?,
            "d_model" => self.d_model = value.parse().map_err(|e| bad(&e))?,
            "n_heads" => self.n_heads = value.parse().map_err(|e| bad(&e))?,
            "n_layers" => self.n_layers = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|e| bad(&e))?,
            "train_steps" => self.train_steps = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
            "tie_head" => self.tie_head = value.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Layers replaced by the identity map on the residual stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipSet {
    layers: BTreeSet<usize>,
}

impl SkipSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(n_layers: usize) -> Self {
        SkipSet {
            layers: (0..n_layers).collect(),
        }
    }

    pub fn new(layers: impl IntoIterator<Item = usize>, n_layers: usize) -> Result<Self> {
        let mut set = BTreeSet::new();
        for layer in layers {
            if layer >= n_layers {
                return Err(Error::Input(format!(
                    "skip layer {layer} out of range for {n_layers} layers"
                )));
            }
            if !set.insert(layer) {
                return Err(Error::Input(format!("layer {layer} listed twice")));
            }
        }
        Ok(SkipSet { layers: set })
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().copied()
    }

    pub(crate) fn max(&self) -> Option<usize> {
        self.layers.iter().next_back().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub out_weight: Range<usize>,
    pub out_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc_weight: Range<usize>,
    pub fc_bias: Range<usize>,
    pub proj_weight: Range<usize>,
    pub proj_bias: Range<usize>,
}

/// Where each named tensor lives inside the flat parameter vector.
/// Matrices are stored `[in, out]` row-major.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) lnf_gain: Range<usize>,
    pub(crate) lnf_bias: Range<usize>,
    pub(crate) head_weight: Option<Range<usize>>,
    pub(crate) head_bias: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ToyModelConfig) -> Self {
        let (v, t, c, h) = (cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.hidden());
        let mut tensors = Vec::new();
        let mut next = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let range = next..next + len;
            next += len;
            tensors.push(TensorSpec {
                name,
                shape,
                range: range.clone(),
            });
            range
        };
        let tok_emb = add("tok_emb".into(), vec![v, c]);
        let pos_emb = add("pos_emb".into(), vec![t, c]);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                BlockParams {
                    ln1_gain: add(p("ln1.gain"), vec![c]),
                    ln1_bias: add(p("ln1.bias"), vec![c]),
                    qkv_weight: add(p("attn.qkv.weight"), vec![c, 3 * c]),
                    qkv_bias: add(p("attn.qkv.bias"), vec![3 * c]),
                    out_weight: add(p("attn.out.weight"), vec![c, c]),
                    out_bias: add(p("attn.out.bias"), vec![c]),
                    ln2_gain: add(p("ln2.gain"), vec![c]),
                    ln2_bias: add(p("ln2.bias"), vec![c]),
                    fc_weight: add(p("mlp.fc.weight"), vec![c, h]),
                    fc_bias: add(p("mlp.fc.bias"), vec![h]),
                    proj_weight: add(p("mlp.proj.weight"), vec![h, c]),
                    proj_bias: add(p("mlp.proj.bias"), vec![c]),
                }
            })
            .collect();
        let lnf_gain = add("ln_f.gain".into(), vec![c]);
        let lnf_bias = add("ln_f.bias".into(), vec![c]);
        let head_weight = (!cfg.tie_head).then(|| add("head.weight".into(), vec![c, v]));
        let head_bias = add("head.bias".into(), vec![v]);
        ParamLayout {
            tensors,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            head_weight,
            head_bias,
            total: next,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor holding flat parameter `index`.
    pub fn owner(&self, index: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range.contains(&index))
    }
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCheckpoint {
    pub config: ToyModelConfig,
    /// All parameters, laid out per [`ParamLayout`].
    pub params: Vec<f64>,
    pub train_loss_history: Vec<f64>,
}

impl ToyCheckpoint {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout().get(name).map(|t| &self.params[t.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout().get(name)?.range.clone();
        Some(&mut self.params[range])
    }

    /// Bitwise equality of config, parameters and loss history.
    pub fn bit_eq(&self, other: &ToyCheckpoint) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.config == other.config
            && same(&self.params, &other.params)
            && same(&self.train_loss_history, &other.train_loss_history)
    }

    pub fn model_id(&self) -> String {
        let c = &self.config;
        format!("toy-l{}-d{}-h{}-v{}-seed{}", c.n_layers, c.d_model, c.n_heads, c.vocab_size, c.seed)
    }

    pub fn check(&self) -> Result<()> {
        self.config.check()?;
        let expected = ParamLayout::new(&self.config).total;
        if self.params.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, config needs {expected}",
                self.params.len()
            )));
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            let name = self.layout().owner(i).map(|t| t.name.clone()).unwrap_or_default();
            return Err(Error::Data(format!("parameter {i} ({name}) is not finite")));
        }
        Ok(())
    }
}
