//! Three-step adversarial training.
//!
//! For every batch:
//! 1. sentiment step: fit encoder θ and sentiment head ψ on `D_s`;
//! 2. topic step: fit topic head ϕ on `D_t` (weighted by the topic coefficient);
//! 3. anti-topic step: fit θ alone on the same `D_t` batch with inverted
//!    labels, through the just-updated ϕ.
//!
//! Step 2's update is applied before step 3's forward pass. `D_s` is
//! shuffled by its own stream; `D_t` and its inverted twin share one order.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval;
use crate::net::{self, Dims, Dropout, HeadKind, ModelParams, Tape, Tensors, Vocab};
use crate::rng;
use crate::sampler::TopicDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// λ, applied to both the topic and anti-topic losses.
    pub topic_coeff: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub use_gru: bool,
    pub dropout: f64,
    pub seed: u64,
    /// `false` skips steps 2 and 3 entirely.
    pub debias: bool,
    pub emb_dim: usize,
    pub hid_dim: usize,
    pub head_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topic_coeff: 1.0,
            epochs: 9,
            batch_size: 32,
            lr: 0.4,
            use_gru: false,
            dropout: 0.1,
            seed: 0,
            debias: true,
            emb_dim: 32,
            hid_dim: 32,
            head_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.topic_coeff >= 0.0 && self.topic_coeff.is_finite()) {
            return Err(Error::Training(format!("topic_coeff {} must be >= 0", self.topic_coeff)));
        }
        if self.batch_size == 0 {
            return Err(Error::Training("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Training(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Training(format!("invalid learning rate {}", self.lr)));
        }
        if self.emb_dim == 0 || self.head_dim == 0 || (self.use_gru && self.hid_dim == 0) {
            return Err(Error::Training("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> Dims {
        Dims {
            vocab,
            emb: self.emb_dim,
            hid: self.hid_dim,
            head: self.head_dim,
        }
    }
}

/// Swaps every has_topic label; records keep their order.
pub fn invert_labels(dataset: &TopicDataset) -> TopicDataset {
    TopicDataset {
        records: dataset
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.has_topic = r.has_topic.map(|y| !y);
                r
            })
            .collect(),
        per_topic_counts: dataset.per_topic_counts.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub label: bool,
}

/// Token-id encoded training sets sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub vocab: Vocab,
    pub sentiment: Vec<Example>,
    pub topic: Vec<Example>,
    pub anti_topic: Vec<Example>,
}

impl TrainingData {
    /// Builds the vocabulary from `D_s ∪ D_t` and encodes all three sets.
    pub fn new(ds: &Corpus, dt: Option<&TopicDataset>) -> Result<Self> {
        let vocab = Vocab::build(
            ds.iter()
                .chain(dt.into_iter().flat_map(|d| d.records.iter()))
                .flat_map(|r| r.tokens.iter()),
        );
        let sentiment = ds
            .iter()
            .map(|r| Example {
                id: r.id,
                tokens: vocab.encode(&r.tokens),
                label: r.anger,
            })
            .collect();
        let encode_topic = |d: &TopicDataset| -> Result<Vec<Example>> {
            d.records
                .iter()
                .map(|r| {
                    let label = r.has_topic.ok_or_else(|| {
                        Error::Training(format!("topic record {} lacks has_topic", r.id))
                    })?;
                    Ok(Example {
                        id: r.id,
                        tokens: vocab.encode(&r.tokens),
                        label,
                    })
                })
                .collect()
        };
        let (topic, anti_topic) = match dt {
            Some(d) => (encode_topic(d)?, encode_topic(&invert_labels(d))?),
            None => (Vec::new(), Vec::new()),
        };
        Ok(TrainingData {
            vocab,
            sentiment,
            topic,
            anti_topic,
        })
    }
}

pub struct TrainState {
    pub params: ModelParams,
    pub epoch: usize,
    sentiment_order: ChaCha8Rng,
    topic_order: ChaCha8Rng,
    dropout_seed: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Self {
        let seed = config.seed;
        TrainState {
            params: ModelParams::init(
                config.dims(vocab_size),
                config.use_gru,
                rng::derive_seed(seed, &[rng::tag("params")]),
            ),
            epoch: 0,
            sentiment_order: rng::stream(seed, &[rng::tag("order/sentiment")]),
            topic_order: rng::stream(seed, &[rng::tag("order/topic")]),
            dropout_seed: rng::derive_seed(seed, &[rng::tag("dropout")]),
        }
    }

    fn dropout(&self, config: &TrainConfig, batch: usize, step: Step) -> Dropout {
        Dropout::train(
            config.dropout,
            rng::derive_seed(self.dropout_seed, &[self.epoch as u64, batch as u64, step as u64]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Sentiment = 1,
    Topic = 2,
    AntiTopic = 3,
}

/// Emitted after every parameter update.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub step: Step,
    pub ids: &'a [u64],
    pub loss: f64,
    /// Parameters before the update; only when the hook asks for snapshots.
    pub before: Option<&'a ModelParams>,
    pub after: &'a ModelParams,
}

/// Observer for the training loop.
pub trait TrainHook {
    fn wants_snapshots(&self) -> bool {
        false
    }

    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

impl TrainHook for () {}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DevMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub sentiment_loss: f64,
    pub topic_loss: f64,
    pub anti_topic_loss: f64,
    pub dev: Option<DevMetrics>,
}

fn run_step(
    state: &mut TrainState,
    config: &TrainConfig,
    hook: &mut dyn TrainHook,
    batch: usize,
    step: Step,
    examples: &[&Example],
) -> Result<f64> {
    let (head, coeff) = match step {
        Step::Sentiment => (HeadKind::Sentiment, 1.0),
        Step::Topic | Step::AntiTopic => (HeadKind::Topic, config.topic_coeff),
    };
    let mut dropout = state.dropout(config, batch, step);
    let mut tape = Tape::new(coeff);
    for ex in examples {
        tape.record(&state.params, head, &ex.tokens, ex.label, &mut dropout)?;
    }
    let loss = tape.loss();
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite {step:?} loss {loss} at epoch {} batch {batch}",
            state.epoch
        )));
    }
    let before = hook.wants_snapshots().then(|| state.params.clone());
    let lr = config.lr;
    match step {
        Step::Sentiment => {
            let g = tape.backward(&state.params)?;
            net::sgd_step(&mut state.params.encoder, &g.encoder, lr)?;
            net::sgd_step(&mut state.params.sentiment_head, &g.sentiment_head, lr)?;
        }
        Step::Topic => {
            let g = tape.backward_heads(&state.params)?;
            net::sgd_step(&mut state.params.topic_head, &g.topic_head, lr)?;
        }
        Step::AntiTopic => {
            let g = tape.backward(&state.params)?;
            net::sgd_step(&mut state.params.encoder, &g.encoder, lr)?;
        }
    }
    if !state.params.all_finite() {
        return Err(Error::Training(format!(
            "parameters became non-finite after {step:?} at epoch {} batch {batch}",
            state.epoch
        )));
    }
    let ids: Vec<u64> = examples.iter().map(|e| e.id).collect();
    hook.on_step(&StepEvent {
        epoch: state.epoch,
        batch,
        step,
        ids: &ids,
        loss,
        before: before.as_ref(),
        after: &state.params,
    });
    Ok(tape.mean_bce())
}

/// One pass over the data. Increments `state.epoch` first, so the first
/// epoch is numbered 1.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainingData,
    config: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<EpochLog> {
    config.validate()?;
    if config.debias && data.topic.len() != data.sentiment.len() {
        return Err(Error::Training(format!(
            "D_s has {} records but D_t has {}; they must match",
            data.sentiment.len(),
            data.topic.len()
        )));
    }
    state.epoch += 1;
    let mut s_order: Vec<usize> = (0..data.sentiment.len()).collect();
    s_order.shuffle(&mut state.sentiment_order);
    let mut t_order: Vec<usize> = (0..data.topic.len()).collect();
    t_order.shuffle(&mut state.topic_order);

    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let bs = config.batch_size;
    for (batch, s_idx) in s_order.chunks(bs).enumerate() {
        let s_batch: Vec<&Example> = s_idx.iter().map(|&i| &data.sentiment[i]).collect();
        sums[0] += run_step(state, config, hook, batch, Step::Sentiment, &s_batch)? * s_batch.len() as f64;
        counts[0] += s_batch.len();
        if config.debias {
            let t_idx = &t_order[batch * bs..(batch * bs + bs).min(t_order.len())];
            let t_batch: Vec<&Example> = t_idx.iter().map(|&i| &data.topic[i]).collect();
            let anti_batch: Vec<&Example> = t_idx.iter().map(|&i| &data.anti_topic[i]).collect();
            sums[1] += run_step(state, config, hook, batch, Step::Topic, &t_batch)? * t_batch.len() as f64;
            sums[2] += run_step(state, config, hook, batch, Step::AntiTopic, &anti_batch)?
                * anti_batch.len() as f64;
            counts[1] += t_batch.len();
            counts[2] += anti_batch.len();
        }
    }
    let mean = |i: usize| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 };
    Ok(EpochLog {
        epoch: state.epoch,
        sentiment_loss: mean(0),
        topic_loss: mean(1),
        anti_topic_loss: mean(2),
        dev: None,
    })
}

/// Per-epoch parameter snapshots; index 0 is the initialization.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub vocab: Vocab,
    pub checkpoints: Vec<ModelParams>,
    pub logs: Vec<EpochLog>,
}

impl TrainOutput {
    pub fn checkpoint(&self, epoch: usize) -> Option<net::Checkpoint> {
        self.checkpoints.get(epoch).map(|p| net::Checkpoint {
            epoch,
            vocab: self.vocab.clone(),
            params: p.clone(),
        })
    }

    pub fn final_params(&self) -> &ModelParams {
        self.checkpoints.last().expect("initial checkpoint always present")
    }
}

/// Mean sentiment BCE, F1 and accuracy on a labeled corpus (eval mode).
pub fn dev_metrics(params: &ModelParams, vocab: &Vocab, dev: &Corpus) -> Result<DevMetrics> {
    let mut preds = Vec::with_capacity(dev.len());
    let mut probs = Vec::with_capacity(dev.len());
    let labels: Vec<bool> = dev.iter().map(|r| r.anger).collect();
    for r in dev.iter() {
        let p = net::predict_sentiment(params, &vocab.encode(&r.tokens))?;
        probs.push(p);
        preds.push(p >= eval::DECISION_THRESHOLD);
    }
    let correct = preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(DevMetrics {
        f1: eval::f1_score(&preds, &labels)?,
        accuracy: if dev.is_empty() { 0.0 } else { correct as f64 / dev.len() as f64 },
        loss: net::bce_batch(&probs, &labels)?,
    })
}

pub fn train(
    config: &TrainConfig,
    ds: &Corpus,
    dt: Option<&TopicDataset>,
    dev: Option<&Corpus>,
) -> Result<TrainOutput> {
    train_with_hook(config, ds, dt, dev, &mut ())
}

/// Runs `config.epochs` epochs, snapshotting parameters (and dev metrics
/// when a dev corpus is given) after each. A topic dataset passed with
/// `debias = false` only contributes to the vocabulary, so plain and
/// debiased runs over the same data share initializations.
pub fn train_with_hook(
    config: &TrainConfig,
    ds: &Corpus,
    dt: Option<&TopicDataset>,
    dev: Option<&Corpus>,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutput> {
    config.validate()?;
    if config.debias && dt.is_none() {
        return Err(Error::Training("debiased training needs a topic dataset".into()));
    }
    let data = TrainingData::new(ds, dt)?;
    if data.sentiment.is_empty() && config.epochs > 0 {
        return Err(Error::Training("empty sentiment training set".into()));
    }
    let mut state = TrainState::new(config, data.vocab.len());
    let mut checkpoints = vec![state.params.clone()];
    let mut logs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut log = train_epoch(&mut state, &data, config, hook)?;
        if let Some(dev) = dev {
            log.dev = Some(dev_metrics(&state.params, &data.vocab, dev)?);
        }
        logs.push(log);
        checkpoints.push(state.params.clone());
    }
    Ok(TrainOutput {
        vocab: data.vocab,
        checkpoints,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SentenceRecord, TopicLabel};
    use std::collections::BTreeMap;

    fn rec(id: u64, tokens: &str, anger: bool, topic: Option<bool>) -> SentenceRecord {
        let mut r = SentenceRecord::new(id, tokens.split(' ').map(String::from).collect(), anger);
        if let Some(t) = topic {
            r.has_topic = Some(t);
            r.topic_id = Some(if t { TopicLabel::Topic(0) } else { TopicLabel::Misc });
            r.topic_score = Some(0.5);
            r.misc_score = Some(0.5);
        }
        r
    }

    fn toy() -> (Corpus, TopicDataset) {
        let ds: Corpus = (0..24)
            .map(|i| {
                let angry = i % 2 == 0;
                let words = match (angry, i % 3) {
                    (true, 0) => "mad vax day",
                    (true, _) => "furious vax",
                    (false, 0) => "calm day",
                    (false, _) => "vax fine day",
                };
                rec(i, words, angry, None)
            })
            .collect();
        let dt = TopicDataset {
            records: (100..124)
                .map(|i| {
                    let t = i % 2 == 0;
                    rec(i, if t { "vax mask day" } else { "day fine" }, false, Some(t))
                })
                .collect(),
            per_topic_counts: BTreeMap::new(),
        };
        (ds, dt)
    }

    fn cfg(debias: bool, coeff: f64) -> TrainConfig {
        TrainConfig {
            topic_coeff: coeff,
            epochs: 3,
            batch_size: 5,
            lr: 0.5,
            debias,
            emb_dim: 4,
            hid_dim: 4,
            head_dim: 3,
            seed: 17,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn invert_labels_examples() {
        let (_, dt) = toy();
        let inv = invert_labels(&dt);
        for (a, b) in dt.records.iter().zip(&inv.records) {
            assert_eq!(a.has_topic.map(|y| !y), b.has_topic);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.id, b.id);
        }
        assert_eq!(invert_labels(&inv), dt);
        assert!(invert_labels(&TopicDataset::default()).is_empty());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, dt) = toy();
        let out = train(&TrainConfig { epochs: 0, ..cfg(true, 1.0) }, &ds, Some(&dt), None).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert!(out.logs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, dt) = toy();
        for gru in [false, true] {
            let c = TrainConfig { use_gru: gru, ..cfg(true, 1.0) };
            let a = train(&c, &ds, Some(&dt), Some(&ds)).unwrap();
            let b = train(&c, &ds, Some(&dt), Some(&ds)).unwrap();
            assert_eq!(a.checkpoints, b.checkpoints);
            assert_eq!(a.logs, b.logs);
        }
    }

    #[test]
    fn zero_coefficient_matches_plain_training() {
        let (ds, dt) = toy();
        for gru in [false, true] {
            let plain = train(&TrainConfig { use_gru: gru, ..cfg(false, 1.0) }, &ds, Some(&dt), None).unwrap();
            let adv = train(&TrainConfig { use_gru: gru, ..cfg(true, 0.0) }, &ds, Some(&dt), None).unwrap();
            for (p, a) in plain.checkpoints.iter().zip(&adv.checkpoints) {
                assert_eq!(p.encoder, a.encoder);
                assert_eq!(p.sentiment_head, a.sentiment_head);
                assert_eq!(p.topic_head, a.topic_head);
            }
        }
    }

    #[derive(Default)]
    struct Recorder {
        topic_ids: Vec<Vec<u64>>,
        anti_ids: Vec<Vec<u64>>,
        violations: Vec<String>,
        steps: Vec<Step>,
    }

    impl TrainHook for Recorder {
        fn wants_snapshots(&self) -> bool {
            true
        }

        fn on_step(&mut self, ev: &StepEvent<'_>) {
            let before = ev.before.unwrap();
            let after = ev.after;
            let same_enc = before.encoder == after.encoder;
            let same_topic = before.topic_head == after.topic_head;
            let same_sent = before.sentiment_head == after.sentiment_head;
            let ok = match ev.step {
                Step::Sentiment => same_topic,
                Step::Topic => same_enc && same_sent,
                Step::AntiTopic => same_topic && same_sent,
            };
            if !ok {
                self.violations.push(format!("{:?} epoch {} batch {}", ev.step, ev.epoch, ev.batch));
            }
            match ev.step {
                Step::Topic => self.topic_ids.push(ev.ids.to_vec()),
                Step::AntiTopic => self.anti_ids.push(ev.ids.to_vec()),
                Step::Sentiment => {}
            }
            self.steps.push(ev.step);
        }
    }

    #[test]
    fn hold_fixed_and_joint_order_contracts() {
        let (ds, dt) = toy();
        let mut rec = Recorder::default();
        train_with_hook(&cfg(true, 1.0), &ds, Some(&dt), None, &mut rec).unwrap();
        assert!(rec.violations.is_empty(), "{:?}", rec.violations);
        assert_eq!(rec.topic_ids, rec.anti_ids);
        // 24 records, batch 5 → 5 batches (last one short) × 3 epochs.
        assert_eq!(rec.topic_ids.len(), 15);
        assert_eq!(rec.topic_ids[4].len(), 4);
        assert_eq!(&rec.steps[..3], &[Step::Sentiment, Step::Topic, Step::AntiTopic]);
    }

    #[test]
    fn one_batch_matches_scripted_three_steps() {
        let (ds, dt) = toy();
        let c = TrainConfig {
            batch_size: 64,
            epochs: 1,
            dropout: 0.0,
            ..cfg(true, 0.8)
        };
        let out = train(&c, &ds, Some(&dt), None).unwrap();

        // Reference: same init, same orders, gradients applied by hand.
        let data = TrainingData::new(&ds, Some(&dt)).unwrap();
        let mut state = TrainState::new(&c, data.vocab.len());
        let mut s_order: Vec<usize> = (0..ds.len()).collect();
        s_order.shuffle(&mut state.sentiment_order);
        let mut t_order: Vec<usize> = (0..dt.len()).collect();
        t_order.shuffle(&mut state.topic_order);
        let mut p = out.checkpoints[0].clone();
        let tape_for = |p: &ModelParams, head, set: &[Example], order: &[usize], coeff| {
            let mut t = Tape::new(coeff);
            for &i in order {
                t.record(p, head, &set[i].tokens, set[i].label, &mut Dropout::eval()).unwrap();
            }
            t
        };
        let g1 = tape_for(&p, HeadKind::Sentiment, &data.sentiment, &s_order, 1.0).backward(&p).unwrap();
        net::sgd_step(&mut p.encoder, &g1.encoder, c.lr).unwrap();
        net::sgd_step(&mut p.sentiment_head, &g1.sentiment_head, c.lr).unwrap();
        let g2 = tape_for(&p, HeadKind::Topic, &data.topic, &t_order, 0.8).backward(&p).unwrap();
        net::sgd_step(&mut p.topic_head, &g2.topic_head, c.lr).unwrap();
        let g3 = tape_for(&p, HeadKind::Topic, &data.anti_topic, &t_order, 0.8).backward(&p).unwrap();
        net::sgd_step(&mut p.encoder, &g3.encoder, c.lr).unwrap();

        let got = &out.checkpoints[1];
        for (a, b) in got.flat().iter().zip(p.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let (ds, mut dt) = toy();
        dt.records.pop();
        assert!(train(&cfg(true, 1.0), &ds, Some(&dt), None).is_err());
        assert!(train(&cfg(true, 1.0), &ds, None, None).is_err());
        assert!(train(&TrainConfig { batch_size: 0, ..cfg(false, 1.0) }, &ds, None, None).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (ds, dt) = toy();
        let c = TrainConfig { lr: f64::MAX, ..cfg(true, 1.0) };
        match train(&c, &ds, Some(&dt), None) {
            Err(Error::Training(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected training error, got {:?}", other.map(|o| o.logs)),
        }
    }
}
