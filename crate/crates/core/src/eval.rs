//! Metrics, the masking baseline, epoch averaging, the topic-leakage probe
//! and the eight-variant comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, TrainConfig, TrainOutput};
use crate::corpus::{Corpus, SentenceRecord, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::net::{self, Checkpoint, Dropout, HeadParams, ModelParams, Vocab};
use crate::rng;
use crate::sampler::TopicDataset;

/// Probabilities at or above this are classified angry.
pub const DECISION_THRESHOLD: f64 = 0.5;
pub const FIRST_EPOCH: usize = 3;
pub const LAST_EPOCH: usize = 9;

/// Positive-class (angry) F1; 0 when precision + recall is 0.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Anything that maps a token sequence to an anger probability.
pub trait AngerModel {
    fn anger_probability(&self, tokens: &[String]) -> Result<f64>;
}

impl AngerModel for Checkpoint {
    fn anger_probability(&self, tokens: &[String]) -> Result<f64> {
        self.predict(tokens)
    }
}

/// Borrowed parameters plus vocabulary.
#[derive(Clone, Copy)]
pub struct Classifier<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
}

impl AngerModel for Classifier<'_> {
    fn anger_probability(&self, tokens: &[String]) -> Result<f64> {
        net::predict_sentiment(self.params, &self.vocab.encode(tokens))
    }
}

/// Fraction of bias-prone records with anger probability strictly below
/// `threshold`.
pub fn bias_accuracy(model: &dyn AngerModel, bias_set: &Corpus, threshold: f64) -> Result<f64> {
    if bias_set.is_empty() {
        return Err(Error::Evaluation("empty bias-prone set".into()));
    }
    let mut correct = 0usize;
    for r in bias_set.iter() {
        if !r.is_bias_prone() {
            return Err(Error::Evaluation(format!("record {} is not flagged bias-prone", r.id)));
        }
        if model.anger_probability(&r.tokens)? < threshold {
            correct += 1;
        }
    }
    Ok(correct as f64 / bias_set.len() as f64)
}

/// Tokens replaced by [`MASK_TOKEN`] in the masking baseline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskList(pub BTreeSet<String>);

impl MaskList {
    /// The mask token itself is dropped so masking stays idempotent.
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        MaskList(tokens.into_iter().filter(|t| t != MASK_TOKEN).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    /// One token per line, sorted, each line newline-terminated.
    pub fn to_text(&self) -> String {
        self.0.iter().fold(String::new(), |mut s, t| {
            s.push_str(t);
            s.push('\n');
            s
        })
    }

    pub fn from_text(text: &str) -> Self {
        MaskList::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(MaskList::from_text(&text))
    }
}

pub fn mask_tokens(sentence: &SentenceRecord, mask: &MaskList) -> SentenceRecord {
    let mut out = sentence.clone();
    for t in &mut out.tokens {
        if mask.contains(t) {
            *t = MASK_TOKEN.to_string();
        }
    }
    out
}

pub fn mask_corpus(corpus: &Corpus, mask: &MaskList) -> Corpus {
    corpus.iter().map(|r| mask_tokens(r, mask)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub f1: f64,
    pub bias_accuracy: f64,
}

/// F1 on `test` and bias accuracy on `bias_set`.
pub fn evaluate_model(model: &dyn AngerModel, test: &Corpus, bias_set: &Corpus) -> Result<EpochMetrics> {
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for r in test.iter() {
        preds.push(model.anger_probability(&r.tokens)? >= DECISION_THRESHOLD);
        labels.push(r.anger);
    }
    Ok(EpochMetrics {
        f1: f1_score(&preds, &labels)?,
        bias_accuracy: bias_accuracy(model, bias_set, DECISION_THRESHOLD)?,
    })
}

/// Mean of each metric over the inclusive epoch range.
pub fn average_over_epochs(
    per_epoch: &BTreeMap<usize, EpochMetrics>,
    first: usize,
    last: usize,
) -> Result<EpochMetrics> {
    if first > last {
        return Err(Error::Evaluation(format!("empty epoch range {first}..={last}")));
    }
    let mut sum = EpochMetrics::default();
    for e in first..=last {
        let m = per_epoch
            .get(&e)
            .ok_or_else(|| Error::Evaluation(format!("no metrics for epoch {e}")))?;
        sum.f1 += m.f1;
        sum.bias_accuracy += m.bias_accuracy;
    }
    let n = (last - first + 1) as f64;
    Ok(EpochMetrics {
        f1: sum.f1 / n,
        bias_accuracy: sum.bias_accuracy / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub head_dim: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            head_dim: 16,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a fresh head trained to predict `has_topic` from the
/// frozen encoder's latent vectors.
pub fn probe_topic_leakage(
    params: &ModelParams,
    vocab: &Vocab,
    dt: &TopicDataset,
    config: &ProbeConfig,
) -> Result<f64> {
    let labels = dt.labels();
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::Evaluation("probe data has a single class".into()));
    }
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) || config.batch_size == 0 {
        return Err(Error::Evaluation("invalid probe configuration".into()));
    }
    let z: Vec<_> = dt
        .records
        .iter()
        .map(|r| Ok(net::encode(&params.encoder, &vocab.encode(&r.tokens), &mut Dropout::eval())?.0))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, &[rng::tag("probe/split")]));
    let n_hold = ((z.len() as f64 * config.holdout_fraction).floor() as usize).clamp(1, z.len() - 1);
    let (held, fit) = order.split_at(n_hold);

    let mut head = HeadParams::init(params.encoder.latent_dim(), config.head_dim, rng::derive_seed(config.seed, &[rng::tag("probe/head")]));
    let mut shuffle = rng::stream(config.seed, &[rng::tag("probe/order")]);
    let mut fit = fit.to_vec();
    for _ in 0..config.epochs {
        fit.shuffle(&mut shuffle);
        for batch in fit.chunks(config.batch_size) {
            let mut grad = HeadParams::zeros(head.latent_dim(), head.b1.len());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let trace = net::head_traced(&head, &z[i], &mut Dropout::eval())?;
                let y = if labels[i] { 1.0 } else { 0.0 };
                let g = net::head_gradient(&head, &z[i], &trace, scale * (trace.prob - y));
                // sgd_step with lr = -1 accumulates.
                net::sgd_step(&mut grad, &g, -1.0)?;
            }
            net::sgd_step(&mut head, &grad, config.lr)?;
        }
    }
    let mut correct = 0usize;
    for &i in held {
        let p = net::head_traced(&head, &z[i], &mut Dropout::eval())?.prob;
        if (p >= DECISION_THRESHOLD) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / held.len() as f64)
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub debiased: bool,
    pub gru: bool,
    pub mask: bool,
}

impl Variant {
    /// The eight rows in table order: unmasked (R, R+gru, D, D+gru) then masked.
    pub fn all() -> [Variant; 8] {
        let mut out = [Variant { debiased: false, gru: false, mask: false }; 8];
        for (i, v) in out.iter_mut().enumerate() {
            *v = Variant {
                mask: i >= 4,
                debiased: i % 4 >= 2,
                gru: i % 2 == 1,
            };
        }
        out
    }

    pub fn classifier(&self) -> &'static str {
        if self.debiased {
            "D"
        } else {
            "R"
        }
    }
}

fn yn(b: bool) -> &'static str {
    if b {
        "Y"
    } else {
        "N"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub f1: f64,
    pub bias_accuracy: f64,
    /// Seed-averaged metrics for each epoch in the range.
    pub per_epoch: BTreeMap<usize, EpochMetrics>,
    pub seeds_averaged: usize,
    pub epochs: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Table1Config {
    /// Template for every run; `debias`, `use_gru` and `seed` are overridden.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Caps the number of seeds used for gru rows.
    pub gru_seed_limit: Option<usize>,
    /// Learning rate for gru runs; the recurrent encoder learns slowly at
    /// the bag-of-embeddings rate.
    pub gru_lr: Option<f64>,
    pub first_epoch: usize,
    pub last_epoch: usize,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            gru_seed_limit: Some(1),
            gru_lr: Some(2.0),
            first_epoch: FIRST_EPOCH,
            last_epoch: LAST_EPOCH,
            threads: 0,
        }
    }
}

pub struct Table1Data<'a> {
    pub ds: &'a Corpus,
    pub dt: &'a TopicDataset,
    pub dev: Option<&'a Corpus>,
    pub test: &'a Corpus,
    /// Bias-prone sentences, every record flagged.
    pub bias_set: &'a Corpus,
    pub mask: &'a MaskList,
}

/// Evaluation inputs in one masking condition.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub test: Corpus,
    pub bias_set: Corpus,
}

impl EvalSet {
    pub fn masked(&self, mask: &MaskList) -> EvalSet {
        EvalSet {
            test: mask_corpus(&self.test, mask),
            bias_set: mask_corpus(&self.bias_set, mask),
        }
    }
}

/// Per-epoch metrics of one trained model on the unmasked and masked test set.
pub type RunMetrics = (BTreeMap<usize, EpochMetrics>, BTreeMap<usize, EpochMetrics>);

/// Evaluates checkpoints `first..=last` of a training run.
pub fn evaluate_run(
    out: &TrainOutput,
    plain_set: &EvalSet,
    masked_set: &EvalSet,
    first: usize,
    last: usize,
) -> Result<RunMetrics> {
    let mut plain = BTreeMap::new();
    let mut masked = BTreeMap::new();
    for e in first..=last {
        let params = out
            .checkpoints
            .get(e)
            .ok_or_else(|| Error::Evaluation(format!("no checkpoint for epoch {e}")))?;
        let model = Classifier { params, vocab: &out.vocab };
        plain.insert(e, evaluate_model(&model, &plain_set.test, &plain_set.bias_set)?);
        masked.insert(e, evaluate_model(&model, &masked_set.test, &masked_set.bias_set)?);
    }
    Ok((plain, masked))
}

/// Runs `jobs` on a scoped worker pool, returning results in input order.
pub fn parallel_map<T: Sync, R: Send>(
    jobs: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= jobs.len() {
                            break done;
                        }
                        done.push((i, f(&jobs[i])));
                    }
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains R/D × gru for every seed and evaluates each checkpoint with and
/// without masking the test inputs. Rows come back in table order.
pub fn run_table1(config: &Table1Config, data: &Table1Data<'_>) -> Result<Vec<MetricsReport>> {
    if config.seeds.is_empty() {
        return Err(Error::Evaluation("no seeds".into()));
    }
    if data.mask.is_empty() {
        return Err(Error::Evaluation("mask list is empty".into()));
    }
    let (first, last) = (config.first_epoch, config.last_epoch);
    if first == 0 || first > last || last > config.train.epochs {
        return Err(Error::Evaluation(format!(
            "epoch range {first}..={last} not covered by {} training epochs",
            config.train.epochs
        )));
    }
    let plain_set = EvalSet {
        test: data.test.clone(),
        bias_set: data.bias_set.clone(),
    };
    let masked_set = plain_set.masked(data.mask);
    let gru_seeds = config.gru_seed_limit.unwrap_or(config.seeds.len()).min(config.seeds.len());
    let mut jobs = Vec::new();
    for gru in [false, true] {
        let n = if gru { gru_seeds } else { config.seeds.len() };
        for debiased in [false, true] {
            for &seed in &config.seeds[..n] {
                jobs.push((debiased, gru, seed));
            }
        }
    }
    let results = parallel_map(&jobs, config.threads, |&(debiased, gru, seed)| -> Result<RunMetrics> {
        let cfg = TrainConfig {
            debias: debiased,
            use_gru: gru,
            seed,
            lr: if gru { config.gru_lr.unwrap_or(config.train.lr) } else { config.train.lr },
            ..config.train.clone()
        };
        let out = adversarial::train(&cfg, data.ds, Some(data.dt), data.dev)?;
        evaluate_run(&out, &plain_set, &masked_set, first, last)
    });

    let mut grouped: BTreeMap<(bool, bool, bool), Vec<BTreeMap<usize, EpochMetrics>>> = BTreeMap::new();
    for (&(debiased, gru, _), r) in jobs.iter().zip(results) {
        let (plain, masked) = r?;
        grouped.entry((debiased, gru, false)).or_default().push(plain);
        grouped.entry((debiased, gru, true)).or_default().push(masked);
    }

    let mut reports = Vec::with_capacity(8);
    for v in Variant::all() {
        let Some(runs) = grouped.get(&(v.debiased, v.gru, v.mask)) else {
            continue;
        };
        let mut per_epoch = BTreeMap::new();
        for e in first..=last {
            let n = runs.len() as f64;
            per_epoch.insert(
                e,
                EpochMetrics {
                    f1: runs.iter().map(|r| r[&e].f1).sum::<f64>() / n,
                    bias_accuracy: runs.iter().map(|r| r[&e].bias_accuracy).sum::<f64>() / n,
                },
            );
        }
        let avg = average_over_epochs(&per_epoch, first, last)?;
        reports.push(MetricsReport {
            variant: v,
            f1: avg.f1,
            bias_accuracy: avg.bias_accuracy,
            per_epoch,
            seeds_averaged: runs.len(),
            epochs: (first, last),
        });
    }
    Ok(reports)
}

pub const REPORT_COLUMNS: [&str; 7] = ["variant", "gru", "mask", "f1", "bias_accuracy", "seeds", "epochs_range"];

fn report_fields(r: &MetricsReport) -> [String; 7] {
    [
        r.variant.classifier().to_string(),
        yn(r.variant.gru).to_string(),
        yn(r.variant.mask).to_string(),
        format!("{:.4}", r.f1),
        format!("{:.4}", r.bias_accuracy),
        r.seeds_averaged.to_string(),
        format!("{}-{}", r.epochs.0, r.epochs.1),
    ]
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Evaluation(format!("csv: {e}"));
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in reports {
        w.write_record(report_fields(r)).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Evaluation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Plain-text table with space-padded columns.
pub fn reports_to_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<[String; 7]> = reports.iter().map(report_fields).collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in &rows {
        for (w, f) in widths.iter_mut().zip(row) {
            *w = (*w).max(f.len());
        }
    }
    let mut out = String::new();
    let mut line = |fields: Vec<&str>| {
        let cells: Vec<String> = fields.iter().zip(widths).map(|(f, w)| format!("{f:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    };
    line(REPORT_COLUMNS.to_vec());
    for row in &rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
