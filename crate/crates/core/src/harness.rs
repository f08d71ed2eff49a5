//! Training, early stopping, AUROC evaluation and the five-model comparison.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use ehrformer_nn::{Adam, AdamConfig, ParamStore, Scalar, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    discrete_only_switch, tabularize, GruClassifier, GruConfig, GruInput, GruReadout, GruSample, TabularMedians,
    TabularSeries,
};
use crate::cohort::{generate_cohort, split_chronological, GeneratorConfig, RawStay, NUM_TASKS, TASK_NAMES};
use crate::embedding::EmbeddingConfig;
use crate::encoder::{multi_task_loss, EncoderConfig, Transformer};
use crate::error::{Error, Result};
use crate::tokenizer::{assemble_model_sequence, build_vocabulary, tokenize_stay, EventToken, TokenizerConfig, Vocabulary};

/// Area under the ROC curve in the Mann–Whitney form; tied scores count
/// one half. Fails when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks (1-based) summed over positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Transformer,
    TransformerDiscrete,
    Gru,
    GruAttn,
    GruAttnTokenized,
}

impl ModelKind {
    /// Row order of the comparison table.
    pub const TABLE_ORDER: [ModelKind; 5] = [
        ModelKind::TransformerDiscrete,
        ModelKind::Transformer,
        ModelKind::Gru,
        ModelKind::GruAttn,
        ModelKind::GruAttnTokenized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::TransformerDiscrete => "transformer-discrete",
            ModelKind::Gru => "gru",
            ModelKind::GruAttn => "gru-attn",
            ModelKind::GruAttnTokenized => "gru-attn-tokenized",
        }
    }

    fn index(self) -> u64 {
        Self::TABLE_ORDER.iter().position(|&k| k == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::TABLE_ORDER
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

/// Architecture hyperparameters shared by the five variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// GRU hidden size; 0 means "same as the encoder width".
    pub gru_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gru_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn gru_hidden(&self) -> usize {
        if self.gru_hidden == 0 {
            self.encoder.d_model
        } else {
            self.gru_hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the development cohort held out (from its end) for early
    /// stopping.
    pub early_stop_frac: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            model: ModelKind::Transformer,
            batch_size: 21,
            max_epochs: 50,
            patience: 4,
            early_stop_frac: 0.1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.early_stop_frac > 0.0 && self.early_stop_frac < 1.0) {
            return Err(Error::Config(format!(
                "early_stop_frac {} outside (0, 1)",
                self.early_stop_frac
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Everything any of the five models needs from one stay.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stay_id: u64,
    /// Assembled sequence: task tokens, static slot, events.
    pub tokens: Vec<EventToken>,
    pub static_vec: Vec<f64>,
    pub tabular: TabularSeries,
    pub labels: [bool; NUM_TASKS],
}

/// Frozen development-cohort preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub medians: TabularMedians,
}

impl Featurizer {
    pub fn fit(dev: &[RawStay], cfg: TokenizerConfig) -> Result<Self> {
        let vocab = build_vocabulary(dev, cfg)?;
        let medians = TabularMedians::fit(dev, &vocab);
        Ok(Self { vocab, medians })
    }

    pub fn sample(&self, stay: &RawStay) -> Result<Sample> {
        let tok = tokenize_stay(stay, &self.vocab)?;
        Ok(Sample {
            stay_id: stay.stay_id,
            tokens: assemble_model_sequence(&tok.tokens, stay.los_hours, &self.vocab),
            static_vec: tok.static_vec,
            tabular: tabularize(stay, &self.vocab, &self.medians),
            labels: tok.labels,
        })
    }

    /// Samples of every stay; over-length stays are excluded and counted.
    pub fn samples(&self, stays: &[RawStay]) -> Result<(Vec<Sample>, usize)> {
        let mut out = Vec::with_capacity(stays.len());
        let mut excluded = 0;
        for s in stays {
            match self.sample(s) {
                Ok(x) => out.push(x),
                Err(Error::OverLength { .. }) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, excluded))
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Transformer(Transformer),
    Gru(GruClassifier),
}

impl Model {
    pub fn build<T: Scalar>(
        kind: ModelKind,
        cfg: &ModelConfig,
        vocab: &Vocabulary,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1417 + kind.index()));
        let emb = EmbeddingConfig {
            d_model: cfg.encoder.d_model,
            vocab_size: vocab.size(),
            static_dim: vocab.static_dim(),
            static_id: vocab.static_id(),
            discrete_only: false,
        };
        let gru = |input, readout| GruConfig {
            input,
            hidden: cfg.gru_hidden(),
            static_dim: vocab.static_dim(),
            readout,
            dropout: cfg.encoder.dropout,
            tasks: cfg.encoder.tasks,
        };
        Ok(match kind {
            ModelKind::Transformer => Model::Transformer(Transformer::new(store, cfg.encoder.clone(), emb, &mut rng)?),
            ModelKind::TransformerDiscrete => Model::Transformer(Transformer::new(
                store,
                cfg.encoder.clone(),
                discrete_only_switch(emb),
                &mut rng,
            )?),
            ModelKind::Gru => Model::Gru(GruClassifier::new(
                store,
                gru(
                    GruInput::Tabular {
                        vars: vocab.num_variables(),
                    },
                    GruReadout::FinalState,
                ),
                &mut rng,
            )?),
            ModelKind::GruAttn => Model::Gru(GruClassifier::new(
                store,
                gru(
                    GruInput::Tabular {
                        vars: vocab.num_variables(),
                    },
                    GruReadout::Attention,
                ),
                &mut rng,
            )?),
            ModelKind::GruAttnTokenized => Model::Gru(GruClassifier::new(
                store,
                gru(
                    GruInput::Tokenized(EmbeddingConfig {
                        d_model: cfg.gru_hidden(),
                        ..emb
                    }),
                    GruReadout::Attention,
                ),
                &mut rng,
            )?),
        })
    }

    /// `[1, tasks]` logits of one sample.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, s: &Sample) -> Result<Var> {
        match self {
            Model::Transformer(m) => m.forward(tape, store, &s.tokens, &s.static_vec),
            Model::Gru(m) => {
                let input = match m.cfg.input {
                    GruInput::Tabular { .. } => GruSample::Tabular(&s.tabular),
                    GruInput::Tokenized(_) => GruSample::Tokens(&s.tokens),
                };
                m.forward(tape, store, &input, &s.static_vec)
            }
        }
    }
}

/// SplitMix64 finalizer over two words; used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Probability-free risk scores (logits) for every sample, dropout off.
pub fn predict(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<[f64; NUM_TASKS]>> {
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let l = model.forward(&mut tape, store, s)?;
            let v = tape.value(l).data();
            let mut out = [0.0; NUM_TASKS];
            for (o, &x) in out.iter_mut().zip(v) {
                *o = x as f64;
            }
            Ok(out)
        })
        .collect()
}

/// Per-task AUROC; `None` where a task has a single class.
pub fn task_aurocs(scores: &[[f64; NUM_TASKS]], samples: &[Sample]) -> Result<[Option<f64>; NUM_TASKS]> {
    let mut out = [None; NUM_TASKS];
    for (k, slot) in out.iter_mut().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let y: Vec<bool> = samples.iter().map(|x| x.labels[k]).collect();
        *slot = match auroc(&s, &y) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric { .. }) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Early-stopping bookkeeping: strictly better metrics become the new best,
/// so ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub internal_val_auroc: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best epoch.
    pub store: ParamStore<f32>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

/// Mean AUROC over tasks with both classes present.
fn selection_metric(aurocs: &[Option<f64>; NUM_TASKS]) -> Result<f64> {
    let defined: Vec<f64> = aurocs.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric {
            positives: 0,
            negatives: 0,
        });
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mini-batch Adam on `dev`, early-stopped on the mean internal-validation
/// AUROC. Each sample runs on its own tape and the batch gradient is the
/// mean of the per-sample gradients. Deterministic in `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    dev: &[Sample],
    internal_val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() || internal_val.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(cfg.model, model_cfg, vocab, &mut store, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), &store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..dev.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = store.zeros_like();
            for &i in batch {
                let mut tape = Tape::<f32>::training(mix(mix(cfg.seed, epoch as u64), dev[i].stay_id));
                let logits = model.forward(&mut tape, &store, &dev[i])?;
                let loss = multi_task_loss(&mut tape, logits, &dev[i].labels)?;
                let l = tape.value(loss).item() as f64;
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, loss: l });
                }
                loss_sum += l;
                tape.backward(loss)?.accumulate_into(&mut grads);
            }
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.scale_in_place(scale);
                if !g.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    });
                }
            }
            adam.step(&mut store, &grads);
        }
        let scores = predict(&model, &store, internal_val)?;
        let metric = selection_metric(&task_aurocs(&scores, internal_val)?)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / dev.len() as f64,
            internal_val_auroc: metric,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, metric) {
            StopDecision::Improved => best = store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let (best_epoch, _) = stopper.best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        store: best,
        best_epoch,
        epochs_run: history.len(),
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub per_task: [f64; NUM_TASKS],
    pub mean: f64,
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

/// Evaluates on held-out samples with dropout off. Every task must have
/// both classes present.
pub fn evaluate(
    kind: ModelKind,
    model: &Model,
    store: &ParamStore<f32>,
    val: &[Sample],
    epochs: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let scores = predict(model, store, val)?;
    let mut per_task = [0.0; NUM_TASKS];
    for (k, slot) in per_task.iter_mut().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let y: Vec<bool> = val.iter().map(|x| x.labels[k]).collect();
        *slot = auroc(&s, &y)?;
    }
    Ok(MetricsReport {
        model: kind,
        mean: per_task.iter().sum::<f64>() / NUM_TASKS as f64,
        per_task,
        epochs,
        seed,
        config_hash: config_hash.to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

const CSV_LEAD: [&str; 2] = ["model", "mean"];
const CSV_TAIL: [&str; 4] = ["epochs", "seed", "config_hash", "wall_clock_secs"];

pub fn csv_header() -> Vec<String> {
    CSV_LEAD
        .iter()
        .chain(TASK_NAMES.iter())
        .chain(CSV_TAIL.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Writes reports as CSV; the timing column is last so it can be stripped
/// when comparing runs.
pub fn write_reports_csv(reports: &[MetricsReport], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header())?;
    for r in reports {
        let mut row = vec![r.model.to_string(), r.mean.to_string()];
        row.extend(r.per_task.iter().map(|x| x.to_string()));
        row.extend([
            r.epochs.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.wall_clock_secs.to_string(),
        ]);
        wr.write_record(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_reports_csv(r: impl Read) -> Result<Vec<MetricsReport>> {
    let mut rd = csv::Reader::from_reader(r);
    if rd.headers()?.iter().ne(csv_header().iter().map(String::as_str)) {
        return Err(Error::Config("unexpected report CSV header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number '{s}'"))) };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Config(format!("bad integer '{s}'"))) };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut per_task = [0.0; NUM_TASKS];
        for (k, slot) in per_task.iter_mut().enumerate() {
            *slot = num(&rec[2 + k])?;
        }
        let t = 2 + NUM_TASKS;
        out.push(MetricsReport {
            model: rec[0].parse()?,
            mean: num(&rec[1])?,
            per_task,
            epochs: int(&rec[t])? as usize,
            seed: int(&rec[t + 1])?,
            config_hash: rec[t + 2].to_string(),
            wall_clock_secs: num(&rec[t + 3])?,
        });
    }
    Ok(out)
}

/// Short SHA-256 digest of any serializable configuration.
pub fn config_hash(cfg: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: GeneratorConfig,
    pub dev_frac: f64,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    /// `train.model` is ignored by the suite.
    pub train: TrainConfig,
    pub models: Vec<ModelKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: GeneratorConfig::default(),
            dev_frac: 0.8,
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            models: ModelKind::TABLE_ORDER.to_vec(),
        }
    }
}

/// Chronological, patient-exclusive split of a cohort into development,
/// early-stopping and validation samples.
pub struct PreparedData {
    pub featurizer: Featurizer,
    pub dev: Vec<Sample>,
    pub internal_val: Vec<Sample>,
    pub val: Vec<Sample>,
    pub excluded: usize,
}

pub fn prepare_data(
    stays: &[RawStay],
    dev_frac: f64,
    early_stop_frac: f64,
    tokenizer: TokenizerConfig,
) -> Result<PreparedData> {
    let (dev_raw, val_raw) = split_chronological(stays, dev_frac)?;
    let featurizer = Featurizer::fit(&dev_raw, tokenizer)?;
    // the early-stopping slice is the chronological end of the dev cohort
    let (train_raw, internal_raw) = split_chronological(&dev_raw, 1.0 - early_stop_frac)?;
    let (dev, e1) = featurizer.samples(&train_raw)?;
    let (internal_val, e2) = featurizer.samples(&internal_raw)?;
    let (val, e3) = featurizer.samples(&val_raw)?;
    Ok(PreparedData {
        featurizer,
        dev,
        internal_val,
        val,
        excluded: e1 + e2 + e3,
    })
}

/// Trains and evaluates each configured model on one cohort and split, in
/// table row order.
pub fn run_experiment_suite(
    cfg: &ExperimentConfig,
    mut log: impl FnMut(ModelKind, &EpochRecord),
) -> Result<Vec<MetricsReport>> {
    let stays = generate_cohort(&cfg.cohort)?;
    let data = prepare_data(&stays, cfg.dev_frac, cfg.train.early_stop_frac, cfg.tokenizer)?;
    let hash = config_hash(cfg)?;
    let mut reports = Vec::new();
    for kind in ModelKind::TABLE_ORDER {
        if !cfg.models.contains(&kind) {
            continue;
        }
        let start = Instant::now();
        let tc = TrainConfig {
            model: kind,
            ..cfg.train.clone()
        };
        let out = train(&tc, &cfg.model, &data.featurizer.vocab, &data.dev, &data.internal_val, |r| {
            log(kind, r)
        })?;
        let mut report = evaluate(kind, &out.model, &out.store, &data.val, out.epochs_run, tc.seed, &hash)?;
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        reports.push(report);
    }
    Ok(reports)
}
