//! Longformer-style encoder: embedding, a stack of post-norm layers with
//! sliding-window + global attention, per-layer CLS capture and one linear
//! head per task over the concatenated CLS rows.

use ehrformer_nn::{uniform_fan_in, Axis, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_layout, sparse_attention, AttentionLayout};
use crate::cohort::NUM_TASKS;
use crate::embedding::{Embedding, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::tokenizer::EventToken;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Full span; each side sees `window / 2` slots.
    pub window: usize,
    pub dropout: f64,
    pub tasks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 128,
            d_ff: 512,
            heads: 8,
            window: 128,
            dropout: 0.1,
            tasks: NUM_TASKS,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 || self.tasks == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.window % 2 != 0 {
            return Err(Error::Config(format!("window {} must be even", self.window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// CLS tokens plus the static slot.
    pub fn prefix_len(&self) -> usize {
        self.tasks + 1
    }

    pub fn global_positions(&self) -> Vec<usize> {
        (0..self.prefix_len()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            qkv_w: add("qkv.w", uniform_fan_in(rng, d, 3 * d))?,
            qkv_b: add("qkv.b", Tensor::zeros(vec![1, 3 * d]))?,
            out_w: add("out.w", uniform_fan_in(rng, d, d))?,
            out_b: add("out.b", Tensor::zeros(vec![1, d]))?,
            ln1_g: add("ln1.g", Tensor::ones(vec![1, d]))?,
            ln1_b: add("ln1.b", Tensor::zeros(vec![1, d]))?,
            ff1_w: add("ff1.w", uniform_fan_in(rng, d, ff))?,
            ff1_b: add("ff1.b", Tensor::zeros(vec![1, ff]))?,
            ff2_w: add("ff2.w", uniform_fan_in(rng, ff, d))?,
            ff2_b: add("ff2.b", Tensor::zeros(vec![1, d]))?,
            ln2_g: add("ln2.g", Tensor::ones(vec![1, d]))?,
            ln2_b: add("ln2.b", Tensor::zeros(vec![1, d]))?,
        })
    }

    /// `x <- LN(x + Attn(x))`, `x <- LN(x + FFN(x))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &AttentionLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let eps = T::lit(LN_EPS);
        let (w, b) = (tape.param(store, self.qkv_w), tape.param(store, self.qkv_b));
        let qkv = tape.affine(x, w, b)?;
        let att = sparse_attention(tape, qkv, layout, heads, dropout)?;
        let (w, b) = (tape.param(store, self.out_w), tape.param(store, self.out_b));
        let att = tape.affine(att, w, b)?;
        let att = tape.dropout(att, dropout)?;
        let res = tape.add(x, att)?;
        let (g, b) = (tape.param(store, self.ln1_g), tape.param(store, self.ln1_b));
        let x = tape.layer_norm(res, g, b, eps)?;

        let (w, b) = (tape.param(store, self.ff1_w), tape.param(store, self.ff1_b));
        let h = tape.affine(x, w, b)?;
        let h = tape.gelu(h)?;
        let (w, b) = (tape.param(store, self.ff2_w), tape.param(store, self.ff2_b));
        let h = tape.affine(h, w, b)?;
        let h = tape.dropout(h, dropout)?;
        let res = tape.add(x, h)?;
        let (g, b) = (tape.param(store, self.ln2_g), tape.param(store, self.ln2_b));
        Ok(tape.layer_norm(res, g, b, eps)?)
    }
}

/// Output of [`Transformer::forward_detailed`].
pub struct EncoderOutput {
    /// `[1, tasks]`.
    pub logits: Var,
    /// `[tasks, d]` CLS rows after each layer.
    pub cls: Vec<Var>,
    /// `[T, d]` final hidden states.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: EncoderConfig,
    pub embedding: Embedding,
    pub layers: Vec<EncoderLayer>,
    /// `[tasks, layers * d]`; row k is task k's linear head.
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Transformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: EncoderConfig,
        emb: EmbeddingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if emb.d_model != cfg.d_model {
            return Err(Error::Config(format!(
                "embedding width {} differs from encoder width {}",
                emb.d_model, cfg.d_model
            )));
        }
        let embedding = Embedding::new(store, "emb", emb, rng)?;
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, &format!("layer{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let cat = cfg.layers * cfg.d_model;
        let limit = 1.0 / (cat as f64).sqrt();
        let head = Tensor::from_fn(cfg.tasks, cat, |_, _| T::lit(rng.gen_range(-limit..limit)));
        let head_w = store.add("head.w", head)?;
        let head_b = store.add("head.b", Tensor::zeros(vec![1, cfg.tasks]))?;
        Ok(Self {
            cfg,
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    fn check_prefix(&self, tokens: &[EventToken]) -> Result<()> {
        let p = self.cfg.prefix_len();
        if tokens.len() < p || tokens[p - 1].var_id != self.embedding.cfg.static_id {
            return Err(Error::MissingPrefix { expected: p });
        }
        Ok(())
    }

    /// `[1, tasks]` logits for one assembled sequence.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[EventToken],
        static_vec: &[f64],
    ) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, tokens, static_vec, tokens.len())?.logits)
    }

    /// Full forward; slots at or beyond `valid_len` are padding.
    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[EventToken],
        static_vec: &[f64],
        valid_len: usize,
    ) -> Result<EncoderOutput> {
        self.check_prefix(tokens)?;
        let layout = build_layout(tokens.len(), valid_len, self.cfg.window, &self.cfg.global_positions())?;
        let mut x = self.embedding.embed_sequence(tape, store, tokens, static_vec)?;
        let mut cls = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(tape, store, x, &layout, self.cfg.heads, self.cfg.dropout)?;
            cls.push(tape.slice_rows(x, 0, self.cfg.tasks)?);
        }
        let cat = tape.concat(&cls, Axis::Cols)?;
        let w = tape.param(store, self.head_w);
        let per_task = tape.mul(cat, w)?;
        let summed = tape.sum_cols(per_task)?;
        let row = tape.reshape(summed, &[1, self.cfg.tasks])?;
        let b = tape.param(store, self.head_b);
        let logits = tape.add(row, b)?;
        Ok(EncoderOutput { logits, cls, hidden: x })
    }
}

/// Mean over tasks of binary cross-entropy with logits.
pub fn multi_task_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[bool]) -> Result<Var> {
    let targets: Vec<T> = labels.iter().map(|&y| if y { T::one() } else { T::zero() }).collect();
    Ok(tape.bce_with_logits(logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let odd = EncoderConfig { window: 5, ..Default::default() };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn loss_limits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(vec![1, 7]));
        let l = multi_task_loss(&mut tape, z, &[true; 7]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let big = tape.input(Tensor::full(vec![1, 7], 20.0));
        let l = multi_task_loss(&mut tape, big, &[true; 7]).unwrap();
        assert!((tape.value(l).item() - 2.061e-9).abs() < 1e-11);
    }
}
