//! Data preparation shared by the CLI and the experiments: fit topics on the
//! training split, label it, balance it into `D_s` and sample `D_t` of the
//! same size.

use crate::corpus::{balance_by_label, Corpus};
use crate::error::Result;
use crate::rng;
use crate::sampler::{build_topic_dataset, TopicSample};
use crate::topics::{fit_topic_model_with, label_corpus, FitOptions, TopicModel, HAS_TOPIC_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub n_topics: usize,
    pub threshold: f64,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for PrepConfig {
    /// Tuned for the default synthetic corpus. K exceeds its 8 generated
    /// topics because miscellaneous sentences claim some centroids, and
    /// `min_df` keeps the long tail of emotion tokens out of the clustering.
    fn default() -> Self {
        PrepConfig {
            n_topics: 16,
            threshold: HAS_TOPIC_THRESHOLD,
            fit: FitOptions { min_df: 5, restarts: 10 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub topic_model: TopicModel,
    pub labeled_train: Corpus,
    pub ds: Corpus,
    pub dt: TopicSample,
}

pub fn fit_topics(train: &Corpus, config: &PrepConfig) -> Result<TopicModel> {
    fit_topic_model_with(
        &train.token_lists(),
        config.n_topics,
        rng::derive_seed(config.seed, &[rng::tag("prep/topics")]),
        &config.fit,
    )
}

/// Balances labeled training data into `D_s` and samples `D_t` with
/// `|D_t| = |D_s|`.
pub fn sample(labeled_train: &Corpus, seed: u64) -> Result<(Corpus, TopicSample)> {
    let ds = balance_by_label(labeled_train, rng::derive_seed(seed, &[rng::tag("prep/balance")]))?;
    let dt = build_topic_dataset(labeled_train, ds.len(), rng::derive_seed(seed, &[rng::tag("prep/sample")]))?;
    Ok((ds, dt))
}

pub fn prepare(train: &Corpus, config: &PrepConfig) -> Result<Prepared> {
    let topic_model = fit_topics(train, config)?;
    let labeled_train = label_corpus(&topic_model, train, config.threshold);
    let (ds, dt) = sample(&labeled_train, config.seed)?;
    Ok(Prepared {
        topic_model,
        labeled_train,
        ds,
        dt,
    })
}
