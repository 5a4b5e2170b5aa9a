//! Transformer encoder classifier with optional LoRA adapters.
//!
//! Architecture: token + learned position + segment embeddings, `n_layers`
//! pre-norm blocks (multi-head self-attention and a GELU MLP, each in a
//! residual branch), a final layer norm, masked mean pooling and a
//! `d_model → 3` head followed by softmax over (A, B, Tie).
//!
//! The segment of each position (prompt, response A, response B) is derived
//! from the separator tokens, so the encoder can tell the two responses apart.
//!
//! All parameters live in one flat, ordered store; layers refer to them by
//! [`ParamId`]. A LoRA adapter on a linear layer with frozen base `W` adds
//! `(α/r)·B·A` to the effective weight, where `A` is `r × d_in` and `B` is
//! `d_out × r`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ProbabilityTriple;
use crate::numeric::{
    read_checkpoint, write_checkpoint, NumericError, Parameter, Tape, Tensor, Var,
};
use crate::tokenizer::{self, Batch, TokenSequence, SEP_A, SEP_B, VOCAB_SIZE};

/// Standard deviation of the normal initializer for weights, embeddings and
/// LoRA `A` factors.
pub const INIT_STD: f64 = 0.02;

const NUM_SEGMENTS: usize = 3;
const NUM_OUTPUTS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid LoRA config: {0}")]
    InvalidLora(String),
    #[error("model already carries LoRA adapters")]
    AlreadyAdapted,
    #[error("model has no LoRA adapters")]
    NoAdapters,
    #[error("parameter `{0}` not found")]
    MissingParameter(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unexpected parameter `{0}` in checkpoint")]
    UnexpectedParameter(String),
    #[error("token id {0} out of range")]
    TokenOutOfRange(u32),
    #[error("batch of width {width} exceeds max_len {max_len}")]
    BatchTooWide { width: usize, max_len: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < tokenizer::MIN_MAX_LEN {
            return bad(format!(
                "max_len {} is below {}",
                self.max_len,
                tokenizer::MIN_MAX_LEN
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Matrices a LoRA adapter can be attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpIn,
    MlpOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::AttnQ,
        LoraTarget::AttnK,
        LoraTarget::AttnV,
        LoraTarget::AttnO,
        LoraTarget::MlpIn,
        LoraTarget::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::AttnQ => "attn_q",
            LoraTarget::AttnK => "attn_k",
            LoraTarget::AttnV => "attn_v",
            LoraTarget::AttnO => "attn_o",
            LoraTarget::MlpIn => "mlp_in",
            LoraTarget::MlpOut => "mlp_out",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraTarget {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ModelError::InvalidLora(format!("unknown target `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Number of lowest encoder layers that receive no adapters.
    pub frozen_layers: usize,
    pub targets: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidLora(msg));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.frozen_layers > model.n_layers {
            return bad(format!(
                "frozen_layers {} exceeds n_layers {}",
                self.frozen_layers, model.n_layers
            ));
        }
        if self.targets.is_empty() {
            return bad("no target matrices".into());
        }
        Ok(())
    }

    fn adapts(&self, layer: usize, target: LoraTarget) -> bool {
        layer >= self.frozen_layers && self.targets.contains(&target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLayer {
    /// `d_in × d_out`, applied as `x·W + b`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: Norm,
    attn_q: LinearLayer,
    attn_k: LinearLayer,
    attn_v: LinearLayer,
    attn_o: LinearLayer,
    ln2: Norm,
    mlp_in: LinearLayer,
    mlp_out: LinearLayer,
}

impl Block {
    fn linears(&self) -> [(LoraTarget, &LinearLayer); 6] {
        [
            (LoraTarget::AttnQ, &self.attn_q),
            (LoraTarget::AttnK, &self.attn_k),
            (LoraTarget::AttnV, &self.attn_v),
            (LoraTarget::AttnO, &self.attn_o),
            (LoraTarget::MlpIn, &self.mlp_in),
            (LoraTarget::MlpOut, &self.mlp_out),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// What a parameter is, for initialization and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Base(Init),
    Head(Init),
    LoraA,
    LoraB,
}

/// Configuration pair stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
}

/// Whether a forward pass is for training (LoRA dropout active) or inference.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    params: Vec<Parameter>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: LinearLayer,
}

/// Allocates parameters in canonical order, sourcing each value from a callback.
struct Builder<'f> {
    params: Vec<Parameter>,
    adapted: bool,
    source: &'f mut dyn FnMut(&str, &[usize], Role) -> Result<Tensor, ModelError>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], role: Role) -> Result<ParamId, ModelError> {
        let value = (self.source)(&name, shape, role)?;
        if value.shape() != shape {
            return Err(ModelError::ParameterShape {
                name,
                expected: shape.to_vec(),
                got: value.shape().to_vec(),
            });
        }
        let requires_grad = match role {
            Role::Base(_) => !self.adapted,
            Role::Head(_) | Role::LoraA | Role::LoraB => true,
        };
        self.params.push(Parameter::new(name, value, requires_grad));
        Ok(ParamId(self.params.len() - 1))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm, ModelError> {
        Ok(Norm {
            gamma: self.param(format!("{prefix}.gamma"), &[d], Role::Base(Init::Ones))?,
            beta: self.param(format!("{prefix}.beta"), &[d], Role::Base(Init::Zeros))?,
        })
    }

    fn linear(
        &mut self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        lora: Option<&LoraConfig>,
    ) -> Result<LinearLayer, ModelError> {
        let weight = self.param(
            format!("{prefix}.weight"),
            &[d_in, d_out],
            Role::Base(Init::Normal),
        )?;
        let bias = self.param(format!("{prefix}.bias"), &[d_out], Role::Base(Init::Zeros))?;
        let adapter = match lora {
            Some(cfg) => Some(LoraAdapter {
                a: self.param(format!("{prefix}.lora_a"), &[cfg.rank, d_in], Role::LoraA)?,
                b: self.param(format!("{prefix}.lora_b"), &[d_out, cfg.rank], Role::LoraB)?,
                scale: cfg.scale(),
                dropout: cfg.dropout,
            }),
            None => None,
        };
        Ok(LinearLayer {
            weight,
            bias,
            adapter,
        })
    }
}

impl Model {
    fn build(
        config: ModelConfig,
        lora: Option<LoraConfig>,
        source: &mut dyn FnMut(&str, &[usize], Role) -> Result<Tensor, ModelError>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if let Some(l) = &lora {
            l.validate(&config)?;
        }
        let d = config.d_model;
        let mut b = Builder {
            params: Vec::new(),
            adapted: lora.is_some(),
            source,
        };
        let tok_emb = b.param(
            "tok_emb".into(),
            &[config.vocab_size, d],
            Role::Base(Init::Normal),
        )?;
        let pos_emb = b.param(
            "pos_emb".into(),
            &[config.max_len, d],
            Role::Base(Init::Normal),
        )?;
        let seg_emb = b.param(
            "seg_emb".into(),
            &[NUM_SEGMENTS, d],
            Role::Base(Init::Normal),
        )?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let p = format!("blocks.{layer}");
            let lora_for = |t: LoraTarget| lora.as_ref().filter(|c| c.adapts(layer, t));
            let ln1 = b.norm(&format!("{p}.ln1"), d)?;
            let attn_q = b.linear(&format!("{p}.attn_q"), d, d, lora_for(LoraTarget::AttnQ))?;
            let attn_k = b.linear(&format!("{p}.attn_k"), d, d, lora_for(LoraTarget::AttnK))?;
            let attn_v = b.linear(&format!("{p}.attn_v"), d, d, lora_for(LoraTarget::AttnV))?;
            let attn_o = b.linear(&format!("{p}.attn_o"), d, d, lora_for(LoraTarget::AttnO))?;
            let ln2 = b.norm(&format!("{p}.ln2"), d)?;
            let mlp_in = b.linear(
                &format!("{p}.mlp_in"),
                d,
                config.d_ff,
                lora_for(LoraTarget::MlpIn),
            )?;
            let mlp_out = b.linear(
                &format!("{p}.mlp_out"),
                config.d_ff,
                d,
                lora_for(LoraTarget::MlpOut),
            )?;
            blocks.push(Block {
                ln1,
                attn_q,
                attn_k,
                attn_v,
                attn_o,
                ln2,
                mlp_in,
                mlp_out,
            });
        }
        let ln_f = b.norm("ln_f", d)?;
        let head = LinearLayer {
            weight: b.param(
                "head.weight".into(),
                &[d, NUM_OUTPUTS],
                Role::Head(Init::Normal),
            )?,
            bias: b.param("head.bias".into(), &[NUM_OUTPUTS], Role::Head(Init::Zeros))?,
            adapter: None,
        };
        Ok(Self {
            config,
            lora,
            params: b.params,
            tok_emb,
            pos_emb,
            seg_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// Rebuilds a model from named tensors. Every expected parameter must be
    /// present with the right shape and no extras are allowed.
    pub fn from_tensors(
        config: ModelConfig,
        lora: Option<LoraConfig>,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut named: HashMap<String, Tensor> = tensors.into_iter().collect();
        let model = Self::build(config, lora, &mut |name, _, _| {
            named
                .remove(name)
                .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
        })?;
        if let Some(extra) = named.into_keys().min() {
            return Err(ModelError::UnexpectedParameter(extra));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.config,
            lora: self.lora.clone(),
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.lora.is_some()
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(ModelError::ParameterShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Installed adapters as `(layer, target, adapter)`.
    pub fn adapters(&self) -> Vec<(usize, LoraTarget, LoraAdapter)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.linears()
                    .into_iter()
                    .filter_map(move |(t, l)| l.adapter.map(|a| (i, t, a)))
            })
            .collect()
    }

    /// `(trainable, total)` element counts, by `requires_grad`.
    pub fn trainable_param_count(&self) -> (usize, usize) {
        let total = self.params.iter().map(|p| p.value.len()).sum();
        let trainable = self
            .params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum();
        (trainable, total)
    }

    /// Installs adapters per `cfg` and freezes every base weight.
    ///
    /// `A` factors are drawn from N(0, 0.02²) and `B` factors start at zero,
    /// so the adapted model computes exactly what the base model does until
    /// the first update.
    pub fn attach_lora(&self, cfg: &LoraConfig, seed: u64) -> Result<Model, ModelError> {
        if self.lora.is_some() {
            return Err(ModelError::AlreadyAdapted);
        }
        cfg.validate(&self.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let base: HashMap<&str, &Tensor> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        Self::build(
            self.config,
            Some(cfg.clone()),
            &mut |name, shape, role| match role {
                Role::LoraA => Ok(random_tensor(shape, &normal, &mut rng)),
                Role::LoraB => Ok(Tensor::zeros(shape)),
                _ => base
                    .get(name)
                    .map(|t| (*t).clone())
                    .ok_or_else(|| ModelError::MissingParameter(name.to_string())),
            },
        )
    }

    /// Folds every adapter into its base weight: `W ← W + (α/r)·(B·A)ᵀ` in
    /// the `d_in × d_out` storage layout. Returns an adapter-free model.
    pub fn merge_lora(&self) -> Result<Model, ModelError> {
        if self.lora.is_none() {
            return Err(ModelError::NoAdapters);
        }
        let mut merged: HashMap<String, Tensor> = HashMap::new();
        for block in &self.blocks {
            for (_, linear) in block.linears() {
                if let Some(adapter) = linear.adapter {
                    let w = &self.params[linear.weight.0];
                    let a = &self.params[adapter.a.0].value;
                    let b = &self.params[adapter.b.0].value;
                    let (d_in, d_out) = w.value.dims2()?;
                    let rank = a.dims2()?.0;
                    let mut data = w.value.to_vec();
                    for i in 0..d_in {
                        for o in 0..d_out {
                            let mut delta = 0.0;
                            for k in 0..rank {
                                delta += b.data()[o * rank + k] * a.data()[k * d_in + i];
                            }
                            data[i * d_out + o] += adapter.scale * delta;
                        }
                    }
                    merged.insert(w.name.clone(), Tensor::new(vec![d_in, d_out], data)?);
                }
            }
        }
        let tensors = self
            .params
            .iter()
            .filter(|p| !p.name.ends_with(".lora_a") && !p.name.ends_with(".lora_b"))
            .map(|p| {
                let v = merged.remove(&p.name).unwrap_or_else(|| p.value.clone());
                (p.name.clone(), v)
            });
        Self::from_tensors(self.config, None, tensors.collect::<Vec<_>>())
    }

    /// One leaf per parameter, in store order. Leaves require a gradient only
    /// if `with_grad` is set and the parameter is trainable.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), with_grad && p.requires_grad))
            .collect()
    }

    /// Records the forward pass on `tape` using `leaves` (see [`Model::bind`])
    /// and returns the `[batch × 3]` probability node.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        batch: &Batch,
        mode: ForwardMode<'_>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if batch.width > cfg.max_len {
            return Err(ModelError::BatchTooWide {
                width: batch.width,
                max_len: cfg.max_len,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        let mut rng = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train(rng) => Some(rng),
        };
        let seq = batch.width;
        let leaf = |id: ParamId| leaves[id.0];

        let tokens: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let segments: Vec<usize> = batch.ids.chunks(seq.max(1)).flat_map(segment_ids).collect();
        let mask: Vec<f64> = batch.mask.iter().map(|&m| f64::from(m)).collect();

        let tok = tape.embedding(leaf(self.tok_emb), &tokens)?;
        let pos = tape.embedding(leaf(self.pos_emb), &positions)?;
        let seg = tape.embedding(leaf(self.seg_emb), &segments)?;
        let x = tape.add(tok, pos)?;
        let mut x = tape.add(x, seg)?;

        for block in &self.blocks {
            let h = self.norm(tape, leaves, block.ln1, x)?;
            let q = self.linear(tape, leaves, &block.attn_q, h, rng.as_deref_mut())?;
            let k = self.linear(tape, leaves, &block.attn_k, h, rng.as_deref_mut())?;
            let v = self.linear(tape, leaves, &block.attn_v, h, rng.as_deref_mut())?;
            let a = tape.attention(q, k, v, &mask, seq, cfg.n_heads)?;
            let o = self.linear(tape, leaves, &block.attn_o, a, rng.as_deref_mut())?;
            x = tape.add(x, o)?;

            let h = self.norm(tape, leaves, block.ln2, x)?;
            let m = self.linear(tape, leaves, &block.mlp_in, h, rng.as_deref_mut())?;
            let m = tape.gelu(m)?;
            let m = self.linear(tape, leaves, &block.mlp_out, m, rng.as_deref_mut())?;
            x = tape.add(x, m)?;
        }
        let x = self.norm(tape, leaves, self.ln_f, x)?;
        let pooled = tape.mean_pool_masked(x, &mask, seq)?;
        let logits = self.linear(tape, leaves, &self.head, pooled, None)?;
        Ok(tape.softmax_rows(logits)?)
    }

    fn norm(&self, tape: &mut Tape, leaves: &[Var], n: Norm, x: Var) -> Result<Var, ModelError> {
        Ok(tape.layer_norm(x, leaves[n.gamma.0], leaves[n.beta.0])?)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        layer: &LinearLayer,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let y = tape.matmul(x, leaves[layer.weight.0])?;
        let y = tape.add_row(y, leaves[layer.bias.0])?;
        let Some(adapter) = layer.adapter else {
            return Ok(y);
        };
        let input = match rng {
            Some(rng) if adapter.dropout > 0.0 => {
                let keep = 1.0 - adapter.dropout;
                let shape = tape.value(x).shape().to_vec();
                let n = tape.value(x).len();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(x, mask)?
            }
            _ => x,
        };
        let a_t = tape.transpose(leaves[adapter.a.0])?;
        let b_t = tape.transpose(leaves[adapter.b.0])?;
        let low = tape.matmul(input, a_t)?;
        let delta = tape.matmul(low, b_t)?;
        let delta = tape.scale(delta, adapter.scale)?;
        Ok(tape.add(y, delta)?)
    }

    /// Eval-mode class probabilities for one batch.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<ProbabilityTriple>, ModelError> {
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape, false);
        let probs = self.forward_tape(&mut tape, &leaves, batch, ForwardMode::Eval)?;
        Ok(triples(tape.value(probs)))
    }

    /// Eval-mode predictions for every sequence, in input order. Sequences
    /// are length-bucketed internally; results do not depend on `batch_size`.
    pub fn predict(
        &self,
        sequences: &[TokenSequence],
        batch_size: usize,
    ) -> Result<Vec<ProbabilityTriple>, ModelError> {
        let mut out = vec![ProbabilityTriple::UNIFORM; sequences.len()];
        for b in tokenizer::batch(sequences, batch_size) {
            for (idx, p) in b.indices.iter().zip(self.forward(&b)?) {
                out[*idx] = p;
            }
        }
        Ok(out)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<(), ModelError> {
        Ok(write_checkpoint(
            w,
            self.params.iter().map(|p| (p.name.as_str(), &p.value)),
        )?)
    }

    pub fn read_checkpoint<R: Read>(spec: &ModelSpec, r: R) -> Result<Self, ModelError> {
        let tensors = read_checkpoint(r)?;
        Self::from_tensors(spec.model, spec.lora.clone(), tensors)
    }
}

/// Fresh model with N(0, 0.02²) weights and embeddings, zero biases and unit
/// layer-norm gains. Identical seeds give bit-identical parameters.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Model::build(config, None, &mut |_, shape, role| {
        Ok(match role {
            Role::Base(Init::Normal) | Role::Head(Init::Normal) => {
                random_tensor(shape, &normal, &mut rng)
            }
            Role::Base(Init::Ones) | Role::Head(Init::Ones) => Tensor::filled(shape, 1.0),
            _ => Tensor::zeros(shape),
        })
    })
}

fn random_tensor(shape: &[usize], dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal samples")
}

/// Segment of each position: 0 for the prompt, 1 from `SEP_A`, 2 from `SEP_B`.
fn segment_ids(row: &[u32]) -> Vec<usize> {
    let mut seg = 0;
    row.iter()
        .map(|&t| {
            if t == SEP_A {
                seg = 1;
            } else if t == SEP_B {
                seg = 2;
            }
            seg
        })
        .collect()
}

fn triples(probs: &Tensor) -> Vec<ProbabilityTriple> {
    probs
        .data()
        .chunks_exact(NUM_OUTPUTS)
        .map(|r| ProbabilityTriple([r[0], r[1], r[2]]))
        .collect()
}
