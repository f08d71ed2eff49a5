//! Recurrent comparison models: a GRU over hourly resampled series, the same
//! with an additive attention readout, and a GRU with attention over the
//! token embeddings.

use ehrformer_nn::functional::sigmoid;
use ehrformer_nn::{uniform_fan_in, Axis, CustomOp, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::RawStay;
use crate::embedding::{Embedding, EmbeddingConfig, StaticEncoder};
use crate::error::{Error, Result};
use crate::tokenizer::{median, EventToken, Vocabulary};

/// Hourly resampled values, `hours × vars`, standardized like the current
/// value feature of the tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularSeries {
    pub hours: usize,
    pub vars: usize,
    pub values: Vec<f64>,
    /// Whether the variable was measured inside that hour.
    pub observed: Vec<bool>,
}

impl TabularSeries {
    pub fn get(&self, h: usize, v: usize) -> f64 {
        self.values[h * self.vars + v]
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.vars..(h + 1) * self.vars]
    }
}

/// Development-cohort median of each vocabulary variable's raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMedians(pub Vec<f64>);

impl TabularMedians {
    pub fn fit(dev: &[RawStay], vocab: &Vocabulary) -> Self {
        let mut per_var = vec![Vec::new(); vocab.num_variables()];
        for s in dev {
            for e in &s.events {
                if let Some(id) = vocab.id(&e.variable) {
                    if (id as usize) < per_var.len() {
                        per_var[id as usize].push(e.value);
                    }
                }
            }
        }
        Self(per_var.iter_mut().map(|v| median(v)).collect())
    }
}

/// Resamples a stay to `ceil(los_hours)` hourly bins over the vocabulary
/// variables. A bin holds the mean of its measurements; empty bins carry the
/// last observed value forward; bins before the first measurement take the
/// development median. Out-of-vocabulary variables are dropped.
pub fn tabularize(stay: &RawStay, vocab: &Vocabulary, medians: &TabularMedians) -> TabularSeries {
    let vars = vocab.num_variables();
    let hours = (stay.los_hours.ceil() as usize).max(1);
    let mut sums = vec![0.0; hours * vars];
    let mut counts = vec![0usize; hours * vars];
    for e in &stay.events {
        let Some(id) = vocab.id(&e.variable) else { continue };
        let v = id as usize;
        if v >= vars {
            continue;
        }
        let h = (e.time_hours.max(0.0).floor() as usize).min(hours - 1);
        sums[h * vars + v] += e.value;
        counts[h * vars + v] += 1;
    }
    let mut values = vec![0.0; hours * vars];
    let mut observed = vec![false; hours * vars];
    for v in 0..vars {
        let stats = vocab.value_stats(v as u32)[0];
        let mut carried = medians.0[v];
        for h in 0..hours {
            let k = h * vars + v;
            if counts[k] > 0 {
                carried = sums[k] / counts[k] as f64;
                observed[k] = true;
            }
            values[k] = stats.apply(carried);
        }
    }
    TabularSeries {
        hours,
        vars,
        values,
        observed,
    }
}

/// GRU weights with gates stacked as `[reset | update | candidate]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_x: store.add(format!("{prefix}.w_x"), uniform_fan_in(rng, input, 3 * hidden))?,
            b_x: store.add(format!("{prefix}.b_x"), Tensor::zeros(vec![1, 3 * hidden]))?,
            w_h: store.add(format!("{prefix}.w_h"), uniform_fan_in(rng, hidden, 3 * hidden))?,
            b_h: store.add(format!("{prefix}.b_h"), Tensor::zeros(vec![1, 3 * hidden]))?,
            input,
            hidden,
        })
    }
}

/// One step, built from tape primitives:
/// `r = σ(x Wxr + bxr + h Whr + bhr)`, `z = σ(x Wxz + bxz + h Whz + bhz)`,
/// `n = tanh(x Wxn + bxn + r ⊙ (h Whn + bhn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_cell<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let hd = p.hidden;
    let (wx, bx) = (tape.param(store, p.w_x), tape.param(store, p.b_x));
    let (wh, bh) = (tape.param(store, p.w_h), tape.param(store, p.b_h));
    let gx = tape.affine(x, wx, bx)?;
    let gh = tape.affine(h, wh, bh)?;
    let gx_rz = tape.slice_cols(gx, 0, 2 * hd)?;
    let gh_rz = tape.slice_cols(gh, 0, 2 * hd)?;
    let rz = tape.add(gx_rz, gh_rz)?;
    let rz = tape.sigmoid(rz)?;
    let r = tape.slice_cols(rz, 0, hd)?;
    let z = tape.slice_cols(rz, hd, 2 * hd)?;
    let gx_n = tape.slice_cols(gx, 2 * hd, 3 * hd)?;
    let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd)?;
    let rn = tape.mul(r, gh_n)?;
    let n = tape.add(gx_n, rn)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    Ok(tape.add(n, zd)?)
}

/// Cache and backward rule of [`gru_sequence`].
struct GruSequence<T> {
    hidden: usize,
    /// Per step: r, z, n, h·Whn + bhn.
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for GruSequence<T> {
    fn name(&self) -> &'static str {
        "gru_sequence"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let hd = self.hidden;
        let steps = output.rows();
        let w_h = inputs[1].data();
        let outs = output.data();
        let g = grad.data();
        let mut d_gx = vec![T::zero(); steps * 3 * hd];
        let mut d_wh = vec![T::zero(); hd * 3 * hd];
        let mut d_bh = vec![T::zero(); 3 * hd];
        let mut dh_next = vec![T::zero(); hd];
        let zero = vec![T::zero(); hd];
        let mut d_gh = vec![T::zero(); 3 * hd];
        for t in (0..steps).rev() {
            let h_prev = if t == 0 { &zero[..] } else { &outs[(t - 1) * hd..t * hd] };
            let base = t * hd;
            for c in 0..hd {
                let dh = g[base + c] + dh_next[c];
                let (r, z, n, ghn) = (self.r[base + c], self.z[base + c], self.n[base + c], self.ghn[base + c]);
                let dz = dh * (h_prev[c] - n);
                let dn = dh * (T::one() - z);
                let dan = dn * (T::one() - n * n);
                let dar = dan * ghn * r * (T::one() - r);
                let daz = dz * z * (T::one() - z);
                let row = t * 3 * hd;
                d_gx[row + c] = dar;
                d_gx[row + hd + c] = daz;
                d_gx[row + 2 * hd + c] = dan;
                d_gh[c] = dar;
                d_gh[hd + c] = daz;
                d_gh[2 * hd + c] = dan * r;
                dh_next[c] = dh * z;
            }
            for (b, &d) in d_bh.iter_mut().zip(&d_gh) {
                *b += d;
            }
            for i in 0..hd {
                let hp = h_prev[i];
                let wrow = &w_h[i * 3 * hd..(i + 1) * 3 * hd];
                let drow = &mut d_wh[i * 3 * hd..(i + 1) * 3 * hd];
                let mut acc = T::zero();
                for j in 0..3 * hd {
                    drow[j] += hp * d_gh[j];
                    acc += wrow[j] * d_gh[j];
                }
                dh_next[i] += acc;
            }
        }
        vec![
            Some(Tensor::matrix(steps, 3 * hd, d_gx).expect("shape")),
            Some(Tensor::matrix(hd, 3 * hd, d_wh).expect("shape")),
            Some(Tensor::matrix(1, 3 * hd, d_bh).expect("shape")),
        ]
    }
}

/// Runs the GRU from a zero state over the rows of `x` (`[steps, input]`)
/// and returns every hidden state, `[steps, hidden]`. Numerically the same
/// as chaining [`gru_cell`], with one fused backward pass through time.
pub fn gru_sequence<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &GruParams, x: Var) -> Result<Var> {
    let hd = p.hidden;
    let (wx, bx) = (tape.param(store, p.w_x), tape.param(store, p.b_x));
    let gx = tape.affine(x, wx, bx)?;
    let (wh, bh) = (tape.param(store, p.w_h), tape.param(store, p.b_h));
    let steps = tape.value(gx).rows();
    if steps == 0 {
        return Err(Error::EmptyInput("gru_sequence"));
    }
    let gxd = tape.value(gx).data();
    let whd = tape.value(wh).data();
    let bhd = tape.value(bh).data();
    let mut out = vec![T::zero(); steps * hd];
    let mut cache = GruSequence {
        hidden: hd,
        r: vec![T::zero(); steps * hd],
        z: vec![T::zero(); steps * hd],
        n: vec![T::zero(); steps * hd],
        ghn: vec![T::zero(); steps * hd],
    };
    let mut h = vec![T::zero(); hd];
    let mut gh = vec![T::zero(); 3 * hd];
    for t in 0..steps {
        gh.copy_from_slice(bhd);
        for i in 0..hd {
            let hi = h[i];
            if hi != T::zero() {
                for (acc, &w) in gh.iter_mut().zip(&whd[i * 3 * hd..(i + 1) * 3 * hd]) {
                    *acc += hi * w;
                }
            }
        }
        let row = &gxd[t * 3 * hd..(t + 1) * 3 * hd];
        for c in 0..hd {
            let r = sigmoid(row[c] + gh[c]);
            let z = sigmoid(row[hd + c] + gh[hd + c]);
            let n = (row[2 * hd + c] + r * gh[2 * hd + c]).tanh();
            let k = t * hd + c;
            cache.r[k] = r;
            cache.z[k] = z;
            cache.n[k] = n;
            cache.ghn[k] = gh[2 * hd + c];
            h[c] = n + z * (h[c] - n);
            out[k] = h[c];
        }
    }
    let value = Tensor::matrix(steps, hd, out)?;
    Ok(tape.custom(vec![gx, wh, bh], value, Box::new(cache)))
}

/// Additive attention over hidden states.
#[derive(Clone, Debug)]
pub struct AttentionReadout {
    pub w: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AttentionReadout {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), uniform_fan_in(rng, hidden, hidden))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, hidden]))?,
            v: store.add(format!("{prefix}.v"), uniform_fan_in(rng, hidden, 1))?,
        })
    }

    /// `score_t = vᵀ tanh(W h_t + b)`, softmax over the first `valid_len`
    /// steps (later steps get weight exactly 0). Returns `(context [1, h],
    /// weights [1, steps])`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        states: Var,
        valid_len: usize,
    ) -> Result<(Var, Var)> {
        let steps = tape.value(states).rows();
        if valid_len == 0 || valid_len > steps {
            return Err(Error::Config(format!("valid_len {valid_len} outside 1..={steps}")));
        }
        let (w, b, v) = (tape.param(store, self.w), tape.param(store, self.b), tape.param(store, self.v));
        let a = tape.affine(states, w, b)?;
        let a = tape.tanh(a)?;
        let scores = tape.matmul(a, v)?;
        let mut scores = tape.transpose(scores)?;
        if valid_len < steps {
            let mask = (0..steps)
                .map(|t| if t < valid_len { T::zero() } else { T::neg_infinity() })
                .collect();
            let mask = tape.input(Tensor::row_vector(mask));
            scores = tape.add(scores, mask)?;
        }
        let weights = tape.softmax(scores)?;
        let context = tape.matmul(weights, states)?;
        Ok((context, weights))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GruReadout {
    FinalState,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GruInput {
    /// Hourly series over `vars` variables.
    Tabular { vars: usize },
    /// Token embeddings (the CLS prefix is dropped, the static slot kept).
    Tokenized(EmbeddingConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruConfig {
    pub input: GruInput,
    pub hidden: usize,
    pub static_dim: usize,
    pub readout: GruReadout,
    pub dropout: f64,
    pub tasks: usize,
}

/// Sequence input of one stay.
pub enum GruSample<'a> {
    Tabular(&'a TabularSeries),
    /// Assembled model sequence (CLS prefix + static slot + events).
    Tokens(&'a [EventToken]),
}

#[derive(Clone, Debug)]
pub struct GruClassifier {
    pub cfg: GruConfig,
    pub embedding: Option<Embedding>,
    pub gru: GruParams,
    pub readout: Option<AttentionReadout>,
    pub static_encoder: StaticEncoder,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl GruClassifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: GruConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.hidden == 0 || cfg.tasks == 0 {
            return Err(Error::Config("GRU sizes must be positive".into()));
        }
        let (embedding, input) = match cfg.input {
            GruInput::Tabular { vars } => (None, vars),
            GruInput::Tokenized(e) => (Some(Embedding::new(store, "emb", e, rng)?), e.d_model),
        };
        let gru = GruParams::new(store, "gru", input, cfg.hidden, rng)?;
        let readout = match cfg.readout {
            GruReadout::Attention => Some(AttentionReadout::new(store, "attn", cfg.hidden, rng)?),
            GruReadout::FinalState => None,
        };
        let static_encoder = StaticEncoder::new(store, "static", cfg.static_dim, cfg.hidden, rng)?;
        let h = cfg.hidden;
        Ok(Self {
            embedding,
            gru,
            readout,
            static_encoder,
            fc1_w: store.add("fc1.w", uniform_fan_in(rng, 2 * h, h))?,
            fc1_b: store.add("fc1.b", Tensor::zeros(vec![1, h]))?,
            fc2_w: store.add("fc2.w", uniform_fan_in(rng, h, h))?,
            fc2_b: store.add("fc2.b", Tensor::zeros(vec![1, h]))?,
            head_w: store.add("head.w", uniform_fan_in(rng, h, cfg.tasks))?,
            head_b: store.add("head.b", Tensor::zeros(vec![1, cfg.tasks]))?,
            cfg,
        })
    }

    /// Hidden states `[steps, hidden]` of one stay.
    pub fn states<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        sample: &GruSample<'_>,
        static_vec: &[f64],
    ) -> Result<Var> {
        let x = match (sample, &self.embedding) {
            (GruSample::Tabular(s), None) => {
                if s.vars != self.gru.input {
                    return Err(Error::Config(format!(
                        "series has {} variables, model expects {}",
                        s.vars, self.gru.input
                    )));
                }
                tape.input(Tensor::matrix(s.hours, s.vars, s.values.iter().map(|&v| T::lit(v)).collect())?)
            }
            (GruSample::Tokens(tokens), Some(emb)) => {
                let prefix = self.cfg.tasks;
                if tokens.len() <= prefix || tokens[prefix].var_id != emb.cfg.static_id {
                    return Err(Error::MissingPrefix { expected: prefix + 1 });
                }
                let all = emb.embed_sequence(tape, store, tokens, static_vec)?;
                tape.slice_rows(all, prefix, tokens.len())?
            }
            _ => return Err(Error::Config("sample kind does not match the model input".into())),
        };
        gru_sequence(tape, store, &self.gru, x)
    }

    /// `[1, tasks]` logits.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        sample: &GruSample<'_>,
        static_vec: &[f64],
    ) -> Result<Var> {
        let states = self.states(tape, store, sample, static_vec)?;
        let steps = tape.value(states).rows();
        let summary = match &self.readout {
            Some(att) => att.forward(tape, store, states, steps)?.0,
            None => tape.slice_rows(states, steps - 1, steps)?,
        };
        let summary = tape.dropout(summary, self.cfg.dropout)?;
        let stat = self.static_encoder.encode(tape, store, static_vec)?;
        let h = tape.concat(&[summary, stat], Axis::Cols)?;
        let (w, b) = (tape.param(store, self.fc1_w), tape.param(store, self.fc1_b));
        let h = tape.affine(h, w, b)?;
        let h = tape.tanh(h)?;
        let (w, b) = (tape.param(store, self.fc2_w), tape.param(store, self.fc2_b));
        let h = tape.affine(h, w, b)?;
        let h = tape.tanh(h)?;
        let (w, b) = (tape.param(store, self.head_w), tape.param(store, self.head_b));
        Ok(tape.affine(h, w, b)?)
    }
}

/// Turns a value-inclusive embedding configuration into the discrete-only
/// ablation (id + position only).
pub fn discrete_only_switch(cfg: EmbeddingConfig) -> EmbeddingConfig {
    EmbeddingConfig {
        discrete_only: true,
        ..cfg
    }
}
