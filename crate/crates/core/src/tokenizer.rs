//! Event tokenization: vocabulary, non-unique positional indices, cumulative
//! value features, standardization and static vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::cohort::{Event, RawStay, NUM_TASKS};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Current value plus eight cumulative features.
pub const VALUE_FEATURES: usize = 9;
/// `t_abs` plus the value features.
pub const CONTINUOUS_FEATURES: usize = 1 + VALUE_FEATURES;
/// Seven task tokens plus the static slot.
pub const SPECIAL_PREFIX: usize = NUM_TASKS + 1;
pub const SD_FLOOR: f64 = 1e-6;

/// One tokenized event: `(pos, var_id, t_abs, values[9])`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventToken {
    pub pos: u32,
    pub var_id: u32,
    pub t_abs: f64,
    pub values: [f64; VALUE_FEATURES],
}

impl EventToken {
    pub fn continuous(&self) -> [f64; CONTINUOUS_FEATURES] {
        let mut out = [0.0; CONTINUOUS_FEATURES];
        out[0] = self.t_abs;
        out[1..].copy_from_slice(&self.values);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub const IDENTITY: Self = Self { mean: 0.0, sd: 1.0 };

    /// Two-pass population mean and sd, with the sd floored at [`SD_FLOOR`].
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            sd: var.sqrt().max(SD_FLOOR),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericField {
    pub name: String,
    pub stats: Standardizer,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub categories: Vec<String>,
}

/// Static vector layout: standardized numerics, one-hot categoricals,
/// numeric missingness masks, categorical missingness masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticSchema {
    pub numeric: Vec<NumericField>,
    pub categorical: Vec<CategoricalField>,
}

impl StaticSchema {
    pub fn dim(&self) -> usize {
        2 * self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.categories.len() + 1)
                .sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub min_prevalence: f64,
    pub max_seq_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            min_prevalence: 0.01,
            max_seq_len: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabularyRepr {
    schema_version: u32,
    names: Vec<String>,
    value_stats: Vec<[Standardizer; VALUE_FEATURES]>,
    global_value_stats: [Standardizer; VALUE_FEATURES],
    time_stats: Standardizer,
    static_schema: StaticSchema,
    config: TokenizerConfig,
}

/// Variable ids and every standardization statistic, fit on the development
/// cohort only.
///
/// Ids `0..n` are measured variables (sorted by name), followed by the seven
/// task tokens, the static token, out-of-vocabulary and padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, u32>,
    value_stats: Vec<[Standardizer; VALUE_FEATURES]>,
    pub global_value_stats: [Standardizer; VALUE_FEATURES],
    pub time_stats: Standardizer,
    pub static_schema: StaticSchema,
    pub config: TokenizerConfig,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion(r.schema_version));
        }
        if r.names.len() != r.value_stats.len() {
            return Err(Error::Config("vocabulary names/statistics length mismatch".into()));
        }
        let index = r
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Ok(Self {
            names: r.names,
            index,
            value_stats: r.value_stats,
            global_value_stats: r.global_value_stats,
            time_stats: r.time_stats,
            static_schema: r.static_schema,
            config: r.config,
        })
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            names: v.names,
            value_stats: v.value_stats,
            global_value_stats: v.global_value_stats,
            time_stats: v.time_stats,
            static_schema: v.static_schema,
            config: v.config,
        }
    }
}

impl Vocabulary {
    pub fn num_variables(&self) -> usize {
        self.names.len()
    }

    /// Embedding-table rows including the reserved ids.
    pub fn size(&self) -> usize {
        self.names.len() + NUM_TASKS + 3
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn task_id(&self, task: usize) -> u32 {
        assert!(task < NUM_TASKS);
        (self.names.len() + task) as u32
    }

    pub fn static_id(&self) -> u32 {
        (self.names.len() + NUM_TASKS) as u32
    }

    pub fn oov_id(&self) -> u32 {
        (self.names.len() + NUM_TASKS + 1) as u32
    }

    pub fn pad_id(&self) -> u32 {
        (self.names.len() + NUM_TASKS + 2) as u32
    }

    pub fn value_stats(&self, var_id: u32) -> &[Standardizer; VALUE_FEATURES] {
        self.value_stats
            .get(var_id as usize)
            .unwrap_or(&self.global_value_stats)
    }

    pub fn static_dim(&self) -> usize {
        self.static_schema.dim()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Running summary of earlier measurements of one variable.
#[derive(Clone, Debug, Default)]
pub struct CumulativeState {
    count: usize,
    sum: f64,
    mean: f64,
    m2: f64,
    sorted: Vec<f64>,
    min: f64,
    max: f64,
    first: f64,
    last_time: f64,
}

impl CumulativeState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(mean, median, count, min, max, std, first, t_now - last_time)` over
    /// the measurements pushed so far. With none, value statistics fall back to
    /// `v_now` and count, std and elapsed are zero.
    pub fn features(&self, t_now: f64, v_now: f64) -> [f64; 8] {
        if self.count == 0 {
            return [v_now, v_now, 0.0, v_now, v_now, 0.0, v_now, 0.0];
        }
        let n = self.sorted.len();
        let median = if n % 2 == 1 {
            self.sorted[n / 2]
        } else {
            0.5 * (self.sorted[n / 2 - 1] + self.sorted[n / 2])
        };
        [
            self.sum / self.count as f64,
            median,
            self.count as f64,
            self.min,
            self.max,
            (self.m2 / self.count as f64).max(0.0).sqrt(),
            self.first,
            t_now - self.last_time,
        ]
    }

    pub fn push(&mut self, t: f64, v: f64) {
        if self.count == 0 {
            self.min = v;
            self.max = v;
            self.first = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += 1;
        self.sum += v;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
        let at = self.sorted.partition_point(|&x| x <= v);
        self.sorted.insert(at, v);
        self.last_time = t;
    }
}

/// Eight cumulative features of `v_now` at `t_now` given earlier
/// `(time, value)` measurements of the same variable, in time order.
pub fn cumulative_features(prior: &[(f64, f64)], t_now: f64, v_now: f64) -> [f64; 8] {
    let mut state = CumulativeState::new();
    for &(t, v) in prior {
        debug_assert!(t <= t_now);
        state.push(t, v);
    }
    state.features(t_now, v_now)
}

/// Dense rank of each time among the distinct times; equal times share an
/// index. Input must be non-decreasing.
pub fn positional_indices(times: &[f64]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(times.len());
    let mut pos = 0u32;
    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            let prev = times[i - 1];
            if !(t >= prev) {
                return Err(Error::UnsortedTimes { index: i });
            }
            if t > prev {
                pos += 1;
            }
        }
        out.push(pos);
    }
    Ok(out)
}

/// Raw (unstandardized) value features of time-sorted events, tracking history
/// per variable name.
fn raw_value_features(events: &[Event]) -> Vec<[f64; VALUE_FEATURES]> {
    let mut history: HashMap<&str, CumulativeState> = HashMap::new();
    events
        .iter()
        .map(|e| {
            let state = history.entry(e.variable.as_str()).or_default();
            let mut f = [0.0; VALUE_FEATURES];
            f[0] = e.value;
            f[1..].copy_from_slice(&state.features(e.time_hours, e.value));
            state.push(e.time_hours, e.value);
            f
        })
        .collect()
}

fn sorted_events(stay: &RawStay) -> Vec<Event> {
    let mut events = stay.events.clone();
    events.sort_by(|a, b| a.time_hours.total_cmp(&b.time_hours));
    events
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn fit_columns(rows: &[[f64; VALUE_FEATURES]]) -> [Standardizer; VALUE_FEATURES] {
    let mut out = [Standardizer::IDENTITY; VALUE_FEATURES];
    let mut column = Vec::with_capacity(rows.len());
    for (c, slot) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(rows.iter().map(|r| r[c]));
        *slot = Standardizer::fit(&column);
    }
    out
}

/// Builds the vocabulary from development stays. Variables measured in fewer
/// than `cfg.min_prevalence` of the stays are dropped.
pub fn build_vocabulary(dev: &[RawStay], cfg: TokenizerConfig) -> Result<Vocabulary> {
    if dev.is_empty() {
        return Err(Error::EmptyInput("build_vocabulary"));
    }
    let mut stays_with: BTreeMap<&str, usize> = BTreeMap::new();
    for s in dev {
        let distinct: BTreeSet<&str> = s.events.iter().map(|e| e.variable.as_str()).collect();
        for name in distinct {
            *stays_with.entry(name).or_default() += 1;
        }
    }
    let n = dev.len() as f64;
    let names: Vec<String> = stays_with
        .iter()
        .filter(|(_, &c)| c as f64 / n >= cfg.min_prevalence)
        .map(|(name, _)| name.to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyVocabulary {
            threshold: cfg.min_prevalence,
        });
    }
    let index: HashMap<String, u32> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i as u32))
        .collect();

    let mut per_var: Vec<Vec<[f64; VALUE_FEATURES]>> = vec![Vec::new(); names.len()];
    let mut all = Vec::new();
    let mut times = Vec::new();
    for s in dev {
        let events = sorted_events(s);
        for (e, f) in events.iter().zip(raw_value_features(&events)) {
            if let Some(&id) = index.get(&e.variable) {
                per_var[id as usize].push(f);
            }
            all.push(f);
            times.push(e.time_hours);
        }
    }
    let value_stats = per_var.iter().map(|rows| fit_columns(rows)).collect();
    let global_value_stats = fit_columns(&all);
    let time_stats = Standardizer::fit(&times);

    let mut numeric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut categorical: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in dev {
        for (k, v) in &s.static_numeric {
            let e = numeric.entry(k.as_str()).or_default();
            if let Some(v) = v {
                e.push(*v);
            }
        }
        for (k, v) in &s.static_categorical {
            let e = categorical.entry(k.as_str()).or_default();
            if let Some(v) = v {
                e.insert(v.as_str());
            }
        }
    }
    let static_schema = StaticSchema {
        numeric: numeric
            .into_iter()
            .map(|(name, mut vals)| NumericField {
                name: name.to_string(),
                stats: Standardizer::fit(&vals),
                median: median(&mut vals),
            })
            .collect(),
        categorical: categorical
            .into_iter()
            .map(|(name, cats)| CategoricalField {
                name: name.to_string(),
                categories: cats.into_iter().map(str::to_string).collect(),
            })
            .collect(),
    };

    Ok(Vocabulary {
        names,
        index,
        value_stats,
        global_value_stats,
        time_stats,
        static_schema,
        config: cfg,
    })
}

/// Static vector of one stay: missing numerics take the development median
/// and set their mask bit; missing categoricals are all-zero with the mask
/// bit set; unseen categories are all-zero with the mask clear.
pub fn static_vector(stay: &RawStay, schema: &StaticSchema) -> Vec<f64> {
    let mut values = Vec::with_capacity(schema.dim());
    let mut masks = Vec::with_capacity(schema.numeric.len() + schema.categorical.len());
    for f in &schema.numeric {
        match stay.static_numeric.get(&f.name).copied().flatten() {
            Some(v) => {
                values.push(f.stats.apply(v));
                masks.push(0.0);
            }
            None => {
                values.push(f.stats.apply(f.median));
                masks.push(1.0);
            }
        }
    }
    for f in &schema.categorical {
        let observed = stay.static_categorical.get(&f.name).cloned().flatten();
        values.extend(
            f.categories
                .iter()
                .map(|c| if observed.as_deref() == Some(c) { 1.0 } else { 0.0 }),
        );
        masks.push(if observed.is_none() { 1.0 } else { 0.0 });
    }
    values.extend(masks);
    values
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Val,
}

/// A stay after tokenization; one JSONL line of the tokenized format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedStay {
    pub schema_version: u32,
    pub stay_id: u64,
    pub patient_id: u64,
    pub admission_order: u64,
    pub los_hours: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub static_vec: Vec<f64>,
    pub tokens: Vec<EventToken>,
    pub labels: [bool; NUM_TASKS],
}

/// Tokenizes one stay's events (time order) and builds its static vector.
/// Stays longer than `max_seq_len` are rejected with [`Error::OverLength`].
pub fn tokenize_stay(stay: &RawStay, vocab: &Vocabulary) -> Result<TokenizedStay> {
    let max = vocab.config.max_seq_len;
    if stay.events.len() > max {
        return Err(Error::OverLength {
            stay_id: stay.stay_id,
            len: stay.events.len(),
            max,
        });
    }
    let events = sorted_events(stay);
    let times: Vec<f64> = events.iter().map(|e| e.time_hours).collect();
    let positions = positional_indices(&times)?;
    let raw = raw_value_features(&events);
    let tokens = events
        .iter()
        .zip(raw)
        .zip(positions)
        .map(|((e, f), pos)| {
            let var_id = vocab.id(&e.variable).unwrap_or_else(|| vocab.oov_id());
            let stats = vocab.value_stats(var_id);
            let mut values = [0.0; VALUE_FEATURES];
            for c in 0..VALUE_FEATURES {
                values[c] = stats[c].apply(f[c]);
            }
            EventToken {
                pos,
                var_id,
                t_abs: vocab.time_stats.apply(e.time_hours),
                values,
            }
        })
        .collect();
    Ok(TokenizedStay {
        schema_version: SCHEMA_VERSION,
        stay_id: stay.stay_id,
        patient_id: stay.patient_id,
        admission_order: stay.admission_order,
        los_hours: stay.los_hours,
        split: None,
        static_vec: static_vector(stay, &vocab.static_schema),
        tokens,
        labels: stay.labels.to_array(),
    })
}

/// Prepends the seven task tokens and the static slot. Task tokens carry
/// their reserved id, the standardized length of stay and zero values; all
/// eight special tokens sit at position 0 and event positions are unchanged.
pub fn assemble_model_sequence(tokens: &[EventToken], los_hours: f64, vocab: &Vocabulary) -> Vec<EventToken> {
    let t_cls = vocab.time_stats.apply(los_hours);
    let mut out = Vec::with_capacity(SPECIAL_PREFIX + tokens.len());
    for k in 0..NUM_TASKS {
        out.push(EventToken {
            pos: 0,
            var_id: vocab.task_id(k),
            t_abs: t_cls,
            values: [0.0; VALUE_FEATURES],
        });
    }
    out.push(EventToken {
        pos: 0,
        var_id: vocab.static_id(),
        t_abs: 0.0,
        values: [0.0; VALUE_FEATURES],
    });
    out.extend_from_slice(tokens);
    out
}

pub fn write_tokenized(stays: &[TokenizedStay], w: &mut impl Write) -> Result<()> {
    for s in stays {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tokenized(r: impl BufRead) -> Result<Vec<TokenizedStay>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TokenizedStay = serde_json::from_str(&line)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion(s.schema_version));
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_positional_example() {
        assert_eq!(
            positional_indices(&[0.1, 0.2, 0.2, 0.3, 0.3]).unwrap(),
            vec![0, 1, 1, 2, 2]
        );
        assert!(positional_indices(&[]).unwrap().is_empty());
        assert!(matches!(
            positional_indices(&[0.2, 0.1]),
            Err(Error::UnsortedTimes { index: 1 })
        ));
    }

    #[test]
    fn empty_prior_fallback() {
        assert_eq!(cumulative_features(&[], 2.0, 5.0), [5.0, 5.0, 0.0, 5.0, 5.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn two_priors_by_hand() {
        let f = cumulative_features(&[(1.0, 4.0), (2.0, 6.0)], 3.0, 100.0);
        assert_eq!(f, [5.0, 5.0, 2.0, 4.0, 6.0, 1.0, 4.0, 1.0]);
    }

    #[test]
    fn single_prior_has_zero_std() {
        let f = cumulative_features(&[(0.5, 7.0)], 0.5, 1.0);
        assert_eq!(f[5], 0.0);
        assert_eq!(f[7], 0.0);
    }

    #[test]
    fn standardizer_floors_sd() {
        let s = Standardizer::fit(&[3.0, 3.0, 3.0]);
        assert_eq!(s.sd, SD_FLOOR);
        assert_eq!(s.apply(3.0), 0.0);
    }
}
