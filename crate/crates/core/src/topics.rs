//! Unsupervised topic model: spherical k-means over tf-idf sentence vectors.
//!
//! The model exposes a best-topic score and a miscellaneous score, both in
//! `[0, 1]`, and the binary has-topic rule built on them. It never sees
//! sentiment labels: fitting takes token lists only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentenceRecord, TopicLabel};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TOPICS: usize = 8;
pub const HAS_TOPIC_THRESHOLD: f64 = 0.25;
const MAX_ITERATIONS: usize = 100;

/// How raw cosine similarity maps onto the `[0, 1]` score scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `best = clamp(cos, 0, 1)`, `misc = 1 - best`. Sentence vectors are
    /// nonnegative, so cosine already lies in `[0, 1]`.
    CosineClamped,
}

impl ScoreScale {
    fn map(self, cos: f64) -> f64 {
        match self {
            ScoreScale::CosineClamped => cos.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopicScores {
    pub best_topic: usize,
    pub best_score: f64,
    pub misc_score: f64,
}

/// Sparse unit-norm sentence vector, sorted by term index.
type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TopicModelFile", into = "TopicModelFile")]
pub struct TopicModel {
    k: usize,
    vocabulary: Vec<String>,
    idf: Vec<f64>,
    /// Unit-norm centroids, one per topic, each of vocabulary length.
    centroids: Vec<Vec<f64>>,
    score_scale: ScoreScale,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TopicModelFile {
    k: usize,
    score_scale: ScoreScale,
    vocabulary: Vec<String>,
    idf: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

impl From<TopicModelFile> for TopicModel {
    fn from(f: TopicModelFile) -> Self {
        let index = build_index(&f.vocabulary);
        TopicModel {
            k: f.k,
            vocabulary: f.vocabulary,
            idf: f.idf,
            centroids: f.centroids,
            score_scale: f.score_scale,
            index,
        }
    }
}

impl From<TopicModel> for TopicModelFile {
    fn from(m: TopicModel) -> Self {
        TopicModelFile {
            k: m.k,
            score_scale: m.score_scale,
            vocabulary: m.vocabulary,
            idf: m.idf,
            centroids: m.centroids,
        }
    }
}

fn build_index(vocab: &[String]) -> HashMap<String, usize> {
    vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

fn dot_dense(v: &SparseVec, dense: &[f64]) -> f64 {
    v.iter().map(|&(i, x)| x * dense[i]).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl TopicModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn score_scale(&self) -> ScoreScale {
        self.score_scale
    }

    fn vectorize(&self, tokens: &[String]) -> SparseVec {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokens {
            if let Some(&i) = self.index.get(t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut v: SparseVec = counts.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, x)| *x /= norm);
        }
        v
    }

    /// Cosine similarity to every centroid.
    pub fn similarities(&self, tokens: &[String]) -> Vec<f64> {
        let v = self.vectorize(tokens);
        self.centroids.iter().map(|c| dot_dense(&v, c)).collect()
    }

    pub fn score_tokens(&self, tokens: &[String]) -> TopicScores {
        let v = self.vectorize(tokens);
        if v.is_empty() {
            return TopicScores {
                best_topic: 0,
                best_score: 0.0,
                misc_score: 1.0,
            };
        }
        let (best_topic, cos) = argmax(self.centroids.iter().map(|c| dot_dense(&v, c)));
        let best_score = self.score_scale.map(cos);
        TopicScores {
            best_topic,
            best_score,
            misc_score: 1.0 - best_score,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: TopicModel = serde_json::from_str(&text)?;
        let dim = model.vocabulary.len();
        if model.k == 0
            || model.centroids.len() != model.k
            || model.idf.len() != dim
            || model.centroids.iter().any(|c| c.len() != dim)
        {
            return Err(Error::TopicModel(format!("inconsistent model file {}", path.display())));
        }
        Ok(model)
    }
}

/// Index and value of the maximum; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Fits `k` topics over the given token lists with seeded k-means++
/// initialization followed by Lloyd iterations on the unit sphere.
pub fn fit_topic_model(sentences: &[Vec<String>], k: usize, seed: u64) -> Result<TopicModel> {
    fit_topic_model_with(sentences, k, seed, &FitOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitOptions {
    /// Tokens occurring in fewer sentences are left out of the vocabulary.
    pub min_df: usize,
    /// Independent k-means++ initializations; the fit with the highest
    /// total similarity is kept.
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { min_df: 1, restarts: 1 }
    }
}

pub fn fit_topic_model_with(
    sentences: &[Vec<String>],
    k: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<TopicModel> {
    let min_df = options.min_df;
    if k == 0 {
        return Err(Error::TopicModel("K must be at least 1".into()));
    }
    if sentences.is_empty() {
        return Err(Error::TopicModel("empty corpus".into()));
    }
    let vocab: Vec<String> = {
        let mut df: BTreeMap<&String, usize> = BTreeMap::new();
        for s in sentences {
            let uniq: HashSet<&String> = s.iter().collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        df.into_iter().filter(|&(_, d)| d >= min_df).map(|(t, _)| t.clone()).collect()
    };
    if vocab.is_empty() {
        return Err(Error::TopicModel("empty vocabulary".into()));
    }
    let distinct: HashSet<Vec<&String>> = sentences
        .iter()
        .map(|s| {
            let mut s: Vec<&String> = s.iter().collect();
            s.sort();
            s
        })
        .collect();
    if k > distinct.len() {
        return Err(Error::TopicModel(format!(
            "K = {k} exceeds {} distinct sentences",
            distinct.len()
        )));
    }

    let index = build_index(&vocab);
    let n = sentences.len() as f64;
    let mut df = vec![0usize; vocab.len()];
    for s in sentences {
        let uniq: HashSet<usize> = s.iter().filter_map(|t| index.get(t).copied()).collect();
        for i in uniq {
            df[i] += 1;
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();

    let mut model = TopicModel {
        k,
        vocabulary: vocab,
        idf,
        centroids: Vec::new(),
        score_scale: ScoreScale::CosineClamped,
        index,
    };
    let vectors: Vec<SparseVec> = sentences.iter().map(|s| model.vectorize(s)).collect();
    let dim = model.vocabulary.len();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for restart in 0..options.restarts.max(1) {
        let init_seed = if restart == 0 { seed } else { rng::derive_seed(seed, &[restart as u64]) };
        let centroids = lloyd(&vectors, kmeans_plus_plus(&vectors, k, dim, init_seed), dim);
        let fit: f64 = vectors
            .iter()
            .map(|v| argmax(centroids.iter().map(|c| dot_dense(v, c))).1)
            .sum();
        if best.as_ref().is_none_or(|(b, _)| fit > *b) {
            best = Some((fit, centroids));
        }
    }
    model.centroids = best.expect("at least one restart").1;
    Ok(model)
}

fn densify(v: &SparseVec, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; dim];
    for &(i, x) in v {
        d[i] = x;
    }
    d
}

fn kmeans_plus_plus(vectors: &[SparseVec], k: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[rng::tag("kmeans++")]);
    let mut centroids = vec![densify(&vectors[rng.gen_range(0..vectors.len())], dim)];
    let mut best_sim: Vec<f64> = vectors.iter().map(|v| dot_dense(v, &centroids[0])).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = best_sim.iter().map(|s| (1.0 - s).max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..vectors.len())
        };
        let c = densify(&vectors[pick], dim);
        for (s, v) in best_sim.iter_mut().zip(vectors) {
            *s = s.max(dot_dense(v, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given initial centroids until assignments
/// stop changing. Empty clusters are reseeded from the point farthest
/// from its assigned centroid.
fn lloyd(vectors: &[SparseVec], mut centroids: Vec<Vec<f64>>, dim: usize) -> Vec<Vec<f64>> {
    let k = centroids.len();
    let mut assign: Vec<usize> = vec![usize::MAX; vectors.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut sims = vec![0.0; vectors.len()];
        for (i, v) in vectors.iter().enumerate() {
            let (best, sim) = argmax(centroids.iter().map(|c| dot_dense(v, c)));
            sims[i] = sim;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assign) {
            counts[a] += 1;
            for &(j, x) in v {
                sums[a][j] += x;
            }
        }
        let mut used = HashSet::new();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..vectors.len())
                    .filter(|i| !used.contains(i))
                    .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)))
                    .expect("k never exceeds the number of points");
                used.insert(far);
                sums[c] = densify(&vectors[far], dim);
            }
            normalize(&mut sums[c]);
        }
        centroids = sums;
    }
    centroids
}

pub fn score_topics(model: &TopicModel, sentence: &SentenceRecord) -> TopicScores {
    model.score_tokens(&sentence.tokens)
}

/// 1 iff the best topic clears `threshold` and beats the miscellaneous score.
pub fn binarize_topic(scores: &TopicScores, threshold: f64) -> bool {
    scores.best_score > threshold && scores.best_score > scores.misc_score
}

/// Annotates every record with topic_id, topic_score, misc_score and
/// has_topic. Records without a recognizable topic get `TopicLabel::Misc`.
pub fn label_corpus(model: &TopicModel, corpus: &Corpus, threshold: f64) -> Corpus {
    corpus
        .iter()
        .map(|r| {
            let s = score_topics(model, r);
            let has = binarize_topic(&s, threshold);
            SentenceRecord {
                topic_id: Some(if has {
                    TopicLabel::Topic(s.best_topic)
                } else {
                    TopicLabel::Misc
                }),
                topic_score: Some(s.best_score),
                misc_score: Some(s.misc_score),
                has_topic: Some(has),
                ..r.clone()
            }
        })
        .collect()
}
