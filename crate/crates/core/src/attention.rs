//! Sliding-window self-attention with global tokens.
//!
//! Token `i` may attend to `j` iff `|i - j| <= window_half`, or either of
//! them is global, and `j < valid_len`. Non-global query rows only ever touch
//! their band plus the global columns, so work and storage for them are
//! `O(T · window)`; no `T × T` score matrix is formed.

use ehrformer_nn::{functional, CustomOp, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub seq_len: usize,
    pub valid_len: usize,
    pub window_half: usize,
    global: Vec<bool>,
    globals: Vec<usize>,
}

impl AttentionLayout {
    pub fn is_global(&self, i: usize) -> bool {
        self.global[i]
    }

    pub fn global_positions(&self) -> &[usize] {
        &self.globals
    }

    /// The attention predicate.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if i >= self.valid_len || j >= self.valid_len {
            return false;
        }
        i.abs_diff(j) <= self.window_half || self.global[i] || self.global[j]
    }

    /// Keys of query `i` in increasing order.
    pub fn keys(&self, i: usize, out: &mut Vec<u32>) {
        out.clear();
        if i >= self.valid_len {
            return;
        }
        if self.global[i] {
            out.extend(0..self.valid_len as u32);
            return;
        }
        let lo = i.saturating_sub(self.window_half);
        let hi = (i + self.window_half).min(self.valid_len - 1);
        let mut g = self.globals.iter().copied().filter(|&g| g < self.valid_len).peekable();
        while let Some(&p) = g.peek() {
            if p >= lo {
                break;
            }
            out.push(p as u32);
            g.next();
        }
        out.extend(lo as u32..=hi as u32);
        for p in g {
            if p > hi {
                out.push(p as u32);
            }
        }
    }
}

/// Layout for a sequence of `seq_len` slots of which the first `valid_len`
/// are real. `window` is the full span; each side sees `window / 2`.
pub fn build_layout(seq_len: usize, valid_len: usize, window: usize, global_positions: &[usize]) -> Result<AttentionLayout> {
    if valid_len > seq_len {
        return Err(Error::Config(format!("valid_len {valid_len} exceeds seq_len {seq_len}")));
    }
    if window % 2 != 0 {
        return Err(Error::Config(format!("window {window} must be even")));
    }
    let mut global = vec![false; seq_len];
    for &g in global_positions {
        if g >= seq_len {
            return Err(Error::Config(format!("global position {g} outside sequence of {seq_len}")));
        }
        global[g] = true;
    }
    let globals = (0..seq_len).filter(|&i| global[i]).collect();
    Ok(AttentionLayout {
        seq_len,
        valid_len,
        window_half: window / 2,
        global,
        globals,
    })
}

/// Score evaluations (query-key dot products, counted per head).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreCounts {
    pub non_global_rows: u64,
    pub global_rows: u64,
}

/// Forward result and backward cache of [`sparse_attention_forward`].
pub struct SparseAttention<T> {
    heads: usize,
    head_dim: usize,
    scale: T,
    row_start: Vec<usize>,
    keys: Vec<u32>,
    /// Softmax weights, `[entry * heads + head]`.
    probs: Vec<T>,
    /// Inverted-dropout multipliers on the weights, same layout.
    mask: Option<Vec<T>>,
    pub counts: ScoreCounts,
}

impl<T: Scalar> SparseAttention<T> {
    /// Normalized weight of `(i, j)` in head `h` (before dropout); zero for
    /// every pair the layout disallows.
    pub fn weight(&self, h: usize, i: usize, j: usize) -> T {
        if i + 1 >= self.row_start.len() {
            return T::zero();
        }
        let row = &self.keys[self.row_start[i]..self.row_start[i + 1]];
        match row.binary_search(&(j as u32)) {
            Ok(e) => self.probs[(self.row_start[i] + e) * self.heads + h],
            Err(_) => T::zero(),
        }
    }

    /// Every stored `(head, i, j, weight)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, T)> + '_ {
        (0..self.row_start.len().saturating_sub(1)).flat_map(move |i| {
            (self.row_start[i]..self.row_start[i + 1]).flat_map(move |e| {
                (0..self.heads).map(move |h| (h, i, self.keys[e] as usize, self.probs[e * self.heads + h]))
            })
        })
    }
}

fn check_qkv<T: Scalar>(qkv: &Tensor<T>, layout: &AttentionLayout, heads: usize) -> Result<(usize, usize)> {
    let (t, three_d) = qkv.dims2()?;
    if t != layout.seq_len {
        return Err(Error::Config(format!(
            "layout covers {} slots but input has {t} rows",
            layout.seq_len
        )));
    }
    if three_d % 3 != 0 || heads == 0 || (three_d / 3) % heads != 0 {
        return Err(Error::Config(format!(
            "qkv width {three_d} incompatible with {heads} heads"
        )));
    }
    Ok((t, three_d / 3))
}

/// Multi-head scaled dot-product attention over the allowed pairs only.
///
/// `qkv` is `[T, 3d]` holding queries, keys and values side by side. Rows at
/// or beyond `valid_len` produce zeros. With `dropout = Some((rng, p))` the
/// normalized weights are dropped (inverted scaling) before the weighted sum.
pub fn sparse_attention_forward<T: Scalar, R: Rng>(
    qkv: &Tensor<T>,
    layout: &AttentionLayout,
    heads: usize,
    dropout: Option<(&mut R, f64)>,
) -> Result<(Tensor<T>, SparseAttention<T>)> {
    let (t, d) = check_qkv(qkv, layout, heads)?;
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let width = 3 * d;
    let data = qkv.data();

    let mut row_start = Vec::with_capacity(t + 1);
    let mut keys = Vec::new();
    let mut probs = Vec::new();
    let mut counts = ScoreCounts::default();
    let mut row_keys = Vec::new();
    let mut scores: Vec<T> = Vec::new();
    let mut out = vec![T::zero(); t * d];

    row_start.push(0);
    for i in 0..t {
        layout.keys(i, &mut row_keys);
        let nk = row_keys.len();
        let evals = (nk * heads) as u64;
        if i < layout.valid_len {
            if layout.is_global(i) {
                counts.global_rows += evals;
            } else {
                counts.non_global_rows += evals;
            }
        }
        let base = probs.len();
        probs.resize(base + nk * heads, T::zero());
        for h in 0..heads {
            let q = &data[i * width + h * hd..i * width + (h + 1) * hd];
            scores.clear();
            for &j in &row_keys {
                let k = &data[j as usize * width + d + h * hd..j as usize * width + d + (h + 1) * hd];
                let s: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                scores.push(s * scale);
            }
            if nk > 0 {
                functional::softmax_in_place(&mut scores)?;
            }
            for (e, &p) in scores.iter().enumerate() {
                probs[base + e * heads + h] = p;
            }
        }
        keys.extend_from_slice(&row_keys);
        row_start.push(keys.len());
    }

    let mask = match dropout {
        Some((rng, p)) if p > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - p));
            Some(
                (0..probs.len())
                    .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                    .collect::<Vec<T>>(),
            )
        }
        _ => None,
    };

    for i in 0..t {
        for e in row_start[i]..row_start[i + 1] {
            let j = keys[e] as usize;
            for h in 0..heads {
                let mut w = probs[e * heads + h];
                if let Some(m) = &mask {
                    w *= m[e * heads + h];
                }
                let v = &data[j * width + 2 * d + h * hd..j * width + 2 * d + (h + 1) * hd];
                let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for (oo, &vv) in o.iter_mut().zip(v) {
                    *oo += w * vv;
                }
            }
        }
    }

    Ok((
        Tensor::matrix(t, d, out)?,
        SparseAttention {
            heads,
            head_dim: hd,
            scale,
            row_start,
            keys,
            probs,
            mask,
            counts,
        },
    ))
}

impl<T: Scalar> CustomOp<T> for SparseAttention<T> {
    fn name(&self) -> &'static str {
        "sparse_attention"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let qkv = inputs[0];
        let (t, width) = qkv.dims2().expect("checked in forward");
        let d = width / 3;
        let (heads, hd) = (self.heads, self.head_dim);
        let data = qkv.data();
        let g = grad.data();
        let mut dqkv = vec![T::zero(); t * width];
        let mut dp: Vec<T> = Vec::new();

        for i in 0..t {
            let (lo, hi) = (self.row_start[i], self.row_start[i + 1]);
            for h in 0..heads {
                let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                dp.clear();
                for e in lo..hi {
                    let j = self.keys[e] as usize;
                    let p = self.probs[e * heads + h];
                    let m = self.mask.as_ref().map_or(T::one(), |m| m[e * heads + h]);
                    let v0 = j * width + 2 * d + h * hd;
                    let mut dw = T::zero();
                    for c in 0..hd {
                        dw += go[c] * data[v0 + c];
                        dqkv[v0 + c] += p * m * go[c];
                    }
                    dp.push(dw * m);
                }
                let dot: T = (lo..hi).zip(&dp).map(|(e, &x)| self.probs[e * heads + h] * x).sum();
                let q0 = i * width + h * hd;
                for (n, e) in (lo..hi).enumerate() {
                    let j = self.keys[e] as usize;
                    let ds = self.probs[e * heads + h] * (dp[n] - dot) * self.scale;
                    let k0 = j * width + d + h * hd;
                    for c in 0..hd {
                        dqkv[q0 + c] += ds * data[k0 + c];
                        dqkv[k0 + c] += ds * data[q0 + c];
                    }
                }
            }
        }
        vec![Some(Tensor::matrix(t, width, dqkv).expect("shape preserved"))]
    }
}

/// Records sparse attention on `tape`; dropout on the weights is applied when
/// the tape is training and `dropout > 0`.
pub fn sparse_attention<T: Scalar>(
    tape: &mut Tape<T>,
    qkv: Var,
    layout: &AttentionLayout,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let training = tape.is_training() && dropout > 0.0;
    let value = tape.value(qkv).clone();
    let (out, cache) = if training {
        sparse_attention_forward(&value, layout, heads, Some((tape.rng(), dropout)))?
    } else {
        sparse_attention_forward::<T, rand_chacha::ChaCha8Rng>(&value, layout, heads, None)?
    };
    Ok(tape.custom(vec![qkv], out, Box::new(cache)))
}

/// Dense reference: materializes the full `T × T` score matrix per head and
/// masks disallowed pairs with `-inf`. Returns the output, the dense weights
/// `[h][i][j]` and the score evaluations of non-global valid rows.
pub fn dense_attention_reference<T: Scalar>(
    qkv: &Tensor<T>,
    layout: &AttentionLayout,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>, ScoreCounts)> {
    let (t, d) = check_qkv(qkv, layout, heads)?;
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let width = 3 * d;
    let data = qkv.data();
    let mut weights = vec![T::zero(); heads * t * t];
    let mut out = vec![T::zero(); t * d];
    let mut counts = ScoreCounts::default();
    for h in 0..heads {
        let mut scores = vec![T::zero(); t * t];
        for i in 0..t {
            for j in 0..t {
                let q = &data[i * width + h * hd..i * width + (h + 1) * hd];
                let k = &data[j * width + d + h * hd..j * width + d + (h + 1) * hd];
                scores[i * t + j] = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                if i < layout.valid_len {
                    if layout.is_global(i) {
                        counts.global_rows += 1;
                    } else {
                        counts.non_global_rows += 1;
                    }
                }
            }
        }
        for i in 0..layout.valid_len {
            let mut row: Vec<T> = (0..t)
                .map(|j| if layout.allows(i, j) { scores[i * t + j] } else { T::neg_infinity() })
                .collect();
            row = functional::softmax(&row)?;
            for j in 0..t {
                weights[(h * t + i) * t + j] = row[j];
                let v = &data[j * width + 2 * d + h * hd..j * width + 2 * d + (h + 1) * hd];
                for c in 0..hd {
                    out[i * d + h * hd + c] += row[j] * v[c];
                }
            }
        }
    }
    Ok((Tensor::matrix(t, d, out)?, weights, counts))
}
