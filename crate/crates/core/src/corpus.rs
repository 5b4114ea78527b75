//! Sentence records, JSONL corpus files, seeded splitting and label balancing.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Token that replaces masked tokens at evaluation time.
pub const MASK_TOKEN: &str = "it";

/// Topic annotation of a sentence: one of the fitted topics, or the
/// miscellaneous bucket. Serialized as an integer, `-1` for miscellaneous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i64", try_from = "i64")]
pub enum TopicLabel {
    Topic(usize),
    Misc,
}

impl TopicLabel {
    pub const MISC_SENTINEL: i64 = -1;
}

impl From<TopicLabel> for i64 {
    fn from(t: TopicLabel) -> i64 {
        match t {
            TopicLabel::Topic(k) => k as i64,
            TopicLabel::Misc => TopicLabel::MISC_SENTINEL,
        }
    }
}

impl TryFrom<i64> for TopicLabel {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            TopicLabel::MISC_SENTINEL => Ok(TopicLabel::Misc),
            k if k >= 0 => Ok(TopicLabel::Topic(k as usize)),
            k => Err(format!("invalid topic_id {k}")),
        }
    }
}

impl fmt::Display for TopicLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopicLabel::Topic(k) => write!(f, "{k}"),
            TopicLabel::Misc => f.write_str("misc"),
        }
    }
}

/// Binary flags travel as `0`/`1` in JSON.
mod bin01 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(de::Error::custom(format!("expected 0 or 1, got {v}"))),
        }
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(b) => s.serialize_u8(u8::from(*b)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] bool);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// One annotated sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: u64,
    pub tokens: Vec<String>,
    #[serde(with = "bin01")]
    pub anger: bool,
    /// Evaluation-only ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "bin01::opt")]
    pub bias_prone: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<TopicLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misc_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "bin01::opt")]
    pub has_topic: Option<bool>,
}

impl SentenceRecord {
    pub fn new(id: u64, tokens: Vec<String>, anger: bool) -> Self {
        SentenceRecord {
            id,
            tokens,
            anger,
            bias_prone: None,
            topic_id: None,
            topic_score: None,
            misc_score: None,
            has_topic: None,
        }
    }

    pub fn is_bias_prone(&self) -> bool {
        self.bias_prone == Some(true)
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("tokens must be non-empty".into());
        }
        if self.has_topic.is_some() && (self.topic_score.is_none() || self.misc_score.is_none()) {
            return Err("has_topic requires topic_score and misc_score".into());
        }
        if self.is_bias_prone() && self.anger {
            return Err("bias_prone = 1 requires anger = 0".into());
        }
        for (name, v) in [("topic_score", self.topic_score), ("misc_score", self.misc_score)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Line format accepted on input: `text` or `tokens`, optional `id`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<u64>,
    text: Option<String>,
    tokens: Option<Vec<String>>,
    #[serde(with = "bin01")]
    anger: bool,
    #[serde(default, with = "bin01::opt")]
    bias_prone: Option<bool>,
    #[serde(default)]
    topic_id: Option<TopicLabel>,
    #[serde(default)]
    topic_score: Option<f64>,
    #[serde(default)]
    misc_score: Option<f64>,
    #[serde(default, with = "bin01::opt")]
    has_topic: Option<bool>,
}

/// An ordered collection of records with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Corpus {
    pub records: Vec<SentenceRecord>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and invalid records.
    pub fn new(records: Vec<SentenceRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|message| Error::Malformed { line: i + 1, message })?;
            if !seen.insert(r.id) {
                return Err(Error::DuplicateId { id: r.id, line: i + 1 });
            }
        }
        Ok(Corpus { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentenceRecord> {
        self.records.iter()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Token lists only; the unsupervised topic model sees nothing else.
    pub fn token_lists(&self) -> Vec<Vec<String>> {
        self.records.iter().map(|r| r.tokens.clone()).collect()
    }

    pub fn angry_count(&self) -> usize {
        self.records.iter().filter(|r| r.anger).count()
    }

    /// Records flagged bias-prone.
    pub fn bias_prone_subset(&self) -> Corpus {
        Corpus {
            records: self.records.iter().filter(|r| r.is_bias_prone()).cloned().collect(),
        }
    }

    /// Parses JSONL from any reader. Records without an `id` get their
    /// zero-based line index.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
            let tokens = match (raw.tokens, raw.text) {
                (Some(tokens), _) => tokens,
                (None, Some(text)) => tokenize(&text),
                (None, None) => {
                    return Err(Error::Malformed {
                        line: lineno,
                        message: "record needs `text` or `tokens`".into(),
                    })
                }
            };
            let record = SentenceRecord {
                id: raw.id.unwrap_or(idx as u64),
                tokens,
                anger: raw.anger,
                bias_prone: raw.bias_prone,
                topic_id: raw.topic_id,
                topic_score: raw.topic_score,
                misc_score: raw.misc_score,
                has_topic: raw.has_topic,
            };
            record
                .validate()
                .map_err(|message| Error::Malformed { line: lineno, message })?;
            if !seen.insert(record.id) {
                return Err(Error::DuplicateId {
                    id: record.id,
                    line: lineno,
                });
            }
            records.push(record);
        }
        Ok(Corpus { records })
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.to_writer(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl FromIterator<SentenceRecord> for Corpus {
    fn from_iter<I: IntoIterator<Item = SentenceRecord>>(iter: I) -> Self {
        Corpus {
            records: iter.into_iter().collect(),
        }
    }
}

/// Reads a JSONL corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_reader(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Seeded three-way split. Dev and test sizes are `floor(n * ratio)`; the
/// remainder goes to train. Each split keeps the input's relative order.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitCorpora> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios));
    }
    let n = corpus.len();
    let n_dev = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("split")]));

    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        Corpus {
            records: idx.into_iter().map(|i| corpus.records[i].clone()).collect(),
        }
    };
    Ok(SplitCorpora {
        train: take(0..n_train),
        dev: take(n_train..n_train + n_dev),
        test: take(n_train + n_dev..n),
    })
}

/// Deletes majority-label records uniformly at random until both anger
/// labels have equal counts. Minority records are all kept.
pub fn balance_by_label(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    let (angry, calm): (Vec<usize>, Vec<usize>) =
        (0..corpus.len()).partition(|&i| corpus.records[i].anger);
    if angry.is_empty() {
        return Err(Error::MissingLabel(1));
    }
    if calm.is_empty() {
        return Err(Error::MissingLabel(0));
    }
    let (minority, majority) = if angry.len() <= calm.len() {
        (angry, calm)
    } else {
        (calm, angry)
    };
    let mut rng = rng::stream(seed, &[rng::tag("balance")]);
    let kept = index::sample(&mut rng, majority.len(), minority.len());
    let mut keep: Vec<usize> = minority
        .iter()
        .copied()
        .chain(kept.into_iter().map(|i| majority[i]))
        .collect();
    keep.sort_unstable();
    Ok(Corpus {
        records: keep.into_iter().map(|i| corpus.records[i].clone()).collect(),
    })
}
