//! Synthetic corpora with injected correlation bias.
//!
//! Every sentence mixes filler tokens, topic tokens when it belongs to a
//! topic, and emotion tokens exactly when it is angry. Topics with a high
//! anger rate make their (emotionally neutral) tokens correlate with anger.
//! Non-angry sentences from those topics are the bias-prone cases.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentenceRecord, SplitCorpora, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::eval::MaskList;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Extra bias-prone sentences generated alongside the test split.
    pub n_bias_probe: usize,
    pub n_topics: usize,
    pub emotion_pool: usize,
    /// Tokens per topic pool.
    pub topic_pool: usize,
    pub filler_pool: usize,
    /// Probability that a filler slot holds the mask token itself, so the
    /// token masking substitutes is ordinary neutral vocabulary.
    pub mask_token_rate: f64,
    /// Inclusive total sentence length range.
    pub length: (usize, usize),
    pub topic_tokens: (usize, usize),
    pub emotion_tokens: (usize, usize),
    pub anger_base_rate: f64,
    /// Anger probability ρ_k for each topic.
    pub topic_anger_corr: Vec<f64>,
    pub misc_fraction: f64,
    /// Fraction of qualifying sentences flagged bias-prone.
    pub bias_prone_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let n_topics = 8;
        let anger_base_rate = 0.2;
        GenConfig {
            n_train: 4000,
            n_dev: 1000,
            n_test: 1000,
            n_bias_probe: 300,
            n_topics,
            // Large enough that most test-time emotion tokens are rare or
            // unseen in training, so topic tokens become the easier cue.
            emotion_pool: 3000,
            topic_pool: 4,
            filler_pool: 120,
            mask_token_rate: 0.15,
            length: (6, 8),
            topic_tokens: (3, 4),
            emotion_tokens: (1, 1),
            anger_base_rate,
            topic_anger_corr: (0..n_topics).map(|k| if k < n_topics / 2 { 0.9 } else { anger_base_rate }).collect(),
            misc_fraction: 0.5,
            bias_prone_rate: 1.0,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo > hi {
        return Err(Error::GenConfig(format!("{name} range ({lo}, {hi}) is inverted")));
    }
    Ok(())
}

impl GenConfig {
    /// All topics at the base rate: no correlation bias.
    pub fn null(seed: u64) -> Self {
        let c = GenConfig::default();
        GenConfig {
            topic_anger_corr: vec![c.anger_base_rate; c.n_topics],
            n_bias_probe: 0,
            seed,
            ..c
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("anger_base_rate", self.anger_base_rate),
            ("misc_fraction", self.misc_fraction),
            ("bias_prone_rate", self.bias_prone_rate),
            ("mask_token_rate", self.mask_token_rate),
        ];
        for (name, p) in probs.into_iter().chain(self.topic_anger_corr.iter().map(|&p| ("topic_anger_corr", p))) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::GenConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if self.topic_anger_corr.len() != self.n_topics {
            return Err(Error::GenConfig(format!(
                "{} anger rates for {} topics",
                self.topic_anger_corr.len(),
                self.n_topics
            )));
        }
        if self.n_topics == 0 && self.misc_fraction < 1.0 {
            return Err(Error::GenConfig("no topics but misc_fraction < 1".into()));
        }
        check_range("length", self.length)?;
        check_range("topic_tokens", self.topic_tokens)?;
        check_range("emotion_tokens", self.emotion_tokens)?;
        if self.length.0 < self.topic_tokens.1 + self.emotion_tokens.1 {
            return Err(Error::GenConfig(format!(
                "minimum length {} cannot hold {} topic plus {} emotion tokens",
                self.length.0, self.topic_tokens.1, self.emotion_tokens.1
            )));
        }
        if self.length.1 == 0 {
            return Err(Error::GenConfig("sentences must have at least one token".into()));
        }
        let needs = [
            ("emotion_pool", self.emotion_pool, self.emotion_tokens.1),
            ("topic_pool", self.topic_pool, if self.n_topics > 0 { self.topic_tokens.1 } else { 0 }),
            ("filler_pool", self.filler_pool, self.length.1 - self.topic_tokens.0.min(self.length.1)),
        ];
        for (name, size, used) in needs {
            if used > 0 && size == 0 {
                return Err(Error::GenConfig(format!("{name} is empty")));
            }
        }
        if self.emotion_tokens.0 == 0 {
            return Err(Error::GenConfig("angry sentences need at least one emotion token".into()));
        }
        if self.topic_tokens.0 == 0 && self.n_topics > 0 {
            return Err(Error::GenConfig("topical sentences need at least one topic token".into()));
        }
        if self.n_bias_probe > 0 && self.high_topics().is_empty() {
            return Err(Error::GenConfig("bias probes need a topic with anger rate above base".into()));
        }
        Ok(())
    }

    /// Topics whose anger rate exceeds the base rate.
    pub fn high_topics(&self) -> Vec<usize> {
        (0..self.n_topics).filter(|&k| self.topic_anger_corr[k] > self.anger_base_rate).collect()
    }
}

fn emotion_token(i: usize) -> String {
    format!("emo{i:03}")
}

fn topic_token(k: usize, i: usize) -> String {
    format!("top{k}_{i:02}")
}

fn filler_token(i: usize) -> String {
    format!("w{i:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub emotion_tokens: BTreeSet<String>,
    pub bias_prone_tokens: BTreeSet<String>,
    pub topic_pools: Vec<Vec<String>>,
    pub topic_anger_corr: Vec<f64>,
    /// Generating topic of each record, by id; `None` for miscellaneous.
    pub sentence_topics: Vec<(u64, Option<usize>)>,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub bias_probe: usize,
    pub bias_prone_total: usize,
}

#[derive(Clone, Copy)]
enum Kind {
    Natural,
    BiasProbe,
}

fn sentence(config: &GenConfig, id: u64, kind: Kind) -> (SentenceRecord, Option<usize>) {
    let mut rng = rng::stream(config.seed, &[rng::tag("sentence"), id]);
    let (topic, anger) = match kind {
        Kind::Natural => {
            let topic = (config.n_topics > 0 && !rng.gen_bool(config.misc_fraction))
                .then(|| rng.gen_range(0..config.n_topics));
            let rate = topic.map_or(config.anger_base_rate, |k| config.topic_anger_corr[k]);
            (topic, rng.gen_bool(rate))
        }
        Kind::BiasProbe => {
            let high = config.high_topics();
            (Some(high[rng.gen_range(0..high.len())]), false)
        }
    };
    let length = rng.gen_range(config.length.0..=config.length.1);
    let mut tokens = Vec::with_capacity(length);
    if let Some(k) = topic {
        let n = rng.gen_range(config.topic_tokens.0..=config.topic_tokens.1);
        tokens.extend((0..n).map(|_| topic_token(k, rng.gen_range(0..config.topic_pool))));
    }
    if anger {
        let n = rng.gen_range(config.emotion_tokens.0..=config.emotion_tokens.1);
        tokens.extend((0..n).map(|_| emotion_token(rng.gen_range(0..config.emotion_pool))));
    }
    while tokens.len() < length {
        tokens.push(if rng.gen_bool(config.mask_token_rate) {
            MASK_TOKEN.to_string()
        } else {
            filler_token(rng.gen_range(0..config.filler_pool))
        });
    }
    tokens.shuffle(&mut rng);
    let qualifies = !anger && topic.is_some_and(|k| config.topic_anger_corr[k] > config.anger_base_rate);
    let bias_prone = match kind {
        Kind::BiasProbe => true,
        Kind::Natural => qualifies && rng.gen_bool(config.bias_prone_rate),
    };
    let mut record = SentenceRecord::new(id, tokens, anger);
    record.bias_prone = Some(bias_prone);
    (record, topic)
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub splits: SplitCorpora,
    /// Extra bias-prone sentences for measuring bias accuracy.
    pub bias_probe: Corpus,
    pub truth: GroundTruth,
}

impl Generated {
    /// The natural bias-prone test sentences followed by the probes.
    pub fn bias_set(&self) -> Corpus {
        let mut set = self.splits.test.bias_prone_subset();
        set.records.extend(self.bias_probe.records.iter().cloned());
        set
    }
}

/// Train, dev and test splits, bias probes and ground truth. Ids run
/// consecutively through train, dev, test and the probes.
pub fn generate_corpus(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let mut sentence_topics = Vec::new();
    let mut next_id = 0u64;
    let mut make = |n: usize, kind: Kind| -> Corpus {
        (0..n)
            .map(|_| {
                let (r, t) = sentence(config, next_id, kind);
                sentence_topics.push((next_id, t));
                next_id += 1;
                r
            })
            .collect()
    };
    let train = make(config.n_train, Kind::Natural);
    let dev = make(config.n_dev, Kind::Natural);
    let test = make(config.n_test, Kind::Natural);
    let bias_probe = make(config.n_bias_probe, Kind::BiasProbe);

    let topic_pools: Vec<Vec<String>> = (0..config.n_topics)
        .map(|k| (0..config.topic_pool).map(|i| topic_token(k, i)).collect())
        .collect();
    let bias_prone_tokens = config
        .high_topics()
        .into_iter()
        .flat_map(|k| topic_pools[k].iter().cloned())
        .collect();
    let bias_prone_total = [&train, &dev, &test, &bias_probe]
        .iter()
        .map(|c| c.iter().filter(|r| r.is_bias_prone()).count())
        .sum();
    let truth = GroundTruth {
        emotion_tokens: (0..config.emotion_pool).map(emotion_token).collect(),
        bias_prone_tokens,
        topic_pools,
        topic_anger_corr: config.topic_anger_corr.clone(),
        sentence_topics,
        counts: SplitCounts {
            train: train.len(),
            dev: dev.len(),
            test: test.len(),
            bias_probe: config.n_bias_probe,
            bias_prone_total,
        },
    };
    Ok(Generated {
        splits: SplitCorpora { train, dev, test },
        bias_probe,
        truth,
    })
}

pub fn emit_mask_list(truth: &GroundTruth) -> MaskList {
    MaskList::new(truth.bias_prone_tokens.iter().cloned())
}
