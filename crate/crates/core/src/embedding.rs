//! Token embedding: id lookup + sinusoidal encoding of the non-unique
//! position + one affine map of `[t_abs, values]`, summed. The static slot
//! is replaced by the static encoder's output.

use ehrformer_nn::{normal, uniform_fan_in, Axis, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{EventToken, CONTINUOUS_FEATURES};

const SINUSOID_BASE: f64 = 10000.0;

/// `PE[2i] = sin(pos / 10000^(2i/d))`, `PE[2i+1] = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_encoding(pos: u32, d: usize) -> Vec<f64> {
    let p = pos as f64;
    (0..d)
        .map(|j| {
            let pair = (j / 2 * 2) as f64;
            let angle = p / SINUSOID_BASE.powf(pair / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Two affine layers with a tanh between, `static_dim -> d -> d`.
#[derive(Clone, Debug)]
pub struct StaticEncoder {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub static_dim: usize,
    pub d: usize,
}

impl StaticEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        static_dim: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1_w: store.add(format!("{prefix}.fc1.w"), uniform_fan_in(rng, static_dim, d))?,
            fc1_b: store.add(format!("{prefix}.fc1.b"), Tensor::zeros(vec![1, d]))?,
            fc2_w: store.add(format!("{prefix}.fc2.w"), uniform_fan_in(rng, d, d))?,
            fc2_b: store.add(format!("{prefix}.fc2.b"), Tensor::zeros(vec![1, d]))?,
            static_dim,
            d,
        })
    }

    /// `[1, d]` representation of a static vector.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, static_vec: &[f64]) -> Result<Var> {
        if static_vec.len() != self.static_dim {
            return Err(Error::Config(format!(
                "static vector has {} entries, encoder expects {}",
                static_vec.len(),
                self.static_dim
            )));
        }
        let x = tape.input(Tensor::row_vector(static_vec.iter().map(|&v| T::lit(v)).collect()));
        let (w1, b1) = (tape.param(store, self.fc1_w), tape.param(store, self.fc1_b));
        let h = tape.affine(x, w1, b1)?;
        let h = tape.tanh(h)?;
        let (w2, b2) = (tape.param(store, self.fc2_w), tape.param(store, self.fc2_b));
        Ok(tape.affine(h, w2, b2)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingConfig {
    pub d_model: usize,
    /// Rows of the id table (vocabulary size including reserved ids).
    pub vocab_size: usize,
    pub static_dim: usize,
    /// Id whose token is replaced by the static representation.
    pub static_id: u32,
    /// Drops the time/value path, leaving id and position only.
    pub discrete_only: bool,
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub cfg: EmbeddingConfig,
    pub id_table: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub static_encoder: StaticEncoder,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: EmbeddingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            id_table: store.add(format!("{prefix}.id_table"), normal(rng, cfg.vocab_size, d, 0.02))?,
            value_w: store.add(
                format!("{prefix}.value.w"),
                uniform_fan_in(rng, CONTINUOUS_FEATURES, d),
            )?,
            value_b: store.add(format!("{prefix}.value.b"), Tensor::zeros(vec![1, d]))?,
            static_encoder: StaticEncoder::new(store, &format!("{prefix}.static"), cfg.static_dim, d, rng)?,
            cfg,
        })
    }

    pub fn encode_static<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, static_vec: &[f64]) -> Result<Var> {
        self.static_encoder.encode(tape, store, static_vec)
    }

    /// `[T, d]` embedding of an assembled sequence.
    pub fn embed_sequence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[EventToken],
        static_vec: &[f64],
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput("embed_sequence"));
        }
        let mut ids = Vec::with_capacity(n);
        for t in tokens {
            let id = t.var_id as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.cfg.vocab_size,
                });
            }
            ids.push(id);
        }
        let table = tape.param(store, self.id_table);
        let id_part = tape.gather_rows(table, &ids)?;

        let mut pos = Vec::with_capacity(n * d);
        for t in tokens {
            pos.extend(sinusoidal_encoding(t.pos, d).into_iter().map(T::lit));
        }
        let pos_part = tape.input(Tensor::matrix(n, d, pos)?);
        let mut summed = tape.add(id_part, pos_part)?;

        if !self.cfg.discrete_only {
            let feats: Vec<T> = tokens
                .iter()
                .flat_map(|t| t.continuous())
                .map(T::lit)
                .collect();
            let x = tape.input(Tensor::matrix(n, CONTINUOUS_FEATURES, feats)?);
            let (w, b) = (tape.param(store, self.value_w), tape.param(store, self.value_b));
            let value_part = tape.affine(x, w, b)?;
            summed = tape.add(summed, value_part)?;
        }

        let Some(slot) = tokens.iter().position(|t| t.var_id == self.cfg.static_id) else {
            return Ok(summed);
        };
        let enc = self.encode_static(tape, store, static_vec)?;
        let pos0 = tape.input(Tensor::row_vector(
            sinusoidal_encoding(0, d).into_iter().map(T::lit).collect(),
        ));
        let static_row = tape.add(enc, pos0)?;
        let mut parts = Vec::with_capacity(3);
        if slot > 0 {
            parts.push(tape.slice_rows(summed, 0, slot)?);
        }
        parts.push(static_row);
        if slot + 1 < n {
            parts.push(tape.slice_rows(summed, slot + 1, n)?);
        }
        Ok(tape.concat(&parts, Axis::Rows)?)
    }
}
