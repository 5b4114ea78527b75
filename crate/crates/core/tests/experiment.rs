//! End-to-end checks on the default synthetic corpus.

use std::collections::{BTreeMap, HashMap};

use debias_core::adversarial::{dev_metrics, train, TrainConfig};
use debias_core::corpus::{Corpus, TopicLabel};
use debias_core::eval::{AngerModel, Classifier, DECISION_THRESHOLD};
use debias_core::pipeline::{prepare, PrepConfig, Prepared};
use debias_core::synthgen::{generate_corpus, GenConfig, Generated};

fn setup_seeded(seed: u64) -> (Generated, Prepared) {
    let gen = generate_corpus(&GenConfig {
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    let prep = prepare(&gen.splits.train, &PrepConfig { seed, ..PrepConfig::default() }).unwrap();
    (gen, prep)
}

fn setup() -> (Generated, Prepared) {
    setup_seeded(0)
}

fn false_positive_rate(model: &dyn AngerModel, records: &Corpus) -> f64 {
    let calm: Vec<_> = records.iter().filter(|r| !r.anger).collect();
    let wrong = calm
        .iter()
        .filter(|r| model.anger_probability(&r.tokens).unwrap() >= DECISION_THRESHOLD)
        .count();
    wrong as f64 / calm.len() as f64
}

#[test]
fn learned_topics_recover_generated_topics() {
    let (gen, prep) = setup();
    let truth: HashMap<u64, Option<usize>> = gen.truth.sentence_topics.iter().copied().collect();
    // For each generated topic, the share of its sentences in its most common cluster.
    let mut clusters: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut misc_topical = 0;
    let mut misc_total = 0;
    for r in prep.labeled_train.iter() {
        match truth[&r.id] {
            Some(k) => {
                if let (Some(true), Some(TopicLabel::Topic(c))) = (r.has_topic, r.topic_id) {
                    *clusters.entry(k).or_default().entry(c).or_insert(0) += 1;
                }
            }
            None => {
                misc_total += 1;
                misc_topical += usize::from(r.has_topic == Some(true));
            }
        }
    }
    assert_eq!(clusters.len(), gen.truth.topic_anger_corr.len());
    for (k, counts) in &clusters {
        let total: usize = counts.values().sum();
        let top = *counts.values().max().unwrap();
        assert!(top as f64 / total as f64 > 0.9, "topic {k}: {counts:?}");
    }
    assert!((misc_topical as f64) < 0.1 * misc_total as f64, "{misc_topical}/{misc_total}");
}

#[test]
fn early_sentiment_loss_drops_below_initialization() {
    let (_, prep) = setup();
    for debias in [false, true] {
        for seed in 0..3 {
            let config = TrainConfig {
                debias,
                seed,
                epochs: 3,
                ..TrainConfig::default()
            };
            let out = train(&config, &prep.ds, Some(&prep.dt.dataset), None).unwrap();
            let loss: Vec<f64> = out
                .checkpoints
                .iter()
                .map(|p| dev_metrics(p, &out.vocab, &prep.ds).unwrap().loss)
                .collect();
            assert!(loss.iter().all(|l| l.is_finite()));
            let early = loss[1..=3].iter().sum::<f64>() / 3.0;
            assert!(early < loss[0], "debias={debias} seed={seed}: {loss:?}");
        }
    }
}

/// On each of five corpora, the fully trained plain classifier calls calm
/// bias-prone sentences angry more often than calm miscellaneous ones.
#[test]
fn regular_classifier_learns_and_shows_correlation_bias() {
    let mut fp_bias = 0.0;
    let mut fp_misc = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let (gen, prep) = setup_seeded(seed);
        let truth: HashMap<u64, Option<usize>> = gen.truth.sentence_topics.iter().copied().collect();
        let misc: Corpus = gen.splits.test.iter().filter(|r| truth[&r.id].is_none()).cloned().collect();
        let config = TrainConfig {
            debias: false,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&config, &prep.ds, Some(&prep.dt.dataset), None).unwrap();
        let first = out.logs.first().unwrap().sentiment_loss;
        let last = out.logs.last().unwrap().sentiment_loss;
        assert!(last < 0.5 * first, "seed {seed}: loss {first} -> {last}");
        let model = Classifier {
            params: out.final_params(),
            vocab: &out.vocab,
        };
        let (bias, calm) = (false_positive_rate(&model, &gen.bias_set()), false_positive_rate(&model, &misc));
        assert!(bias > calm, "seed {seed}: bias-prone {bias} vs misc {calm}");
        fp_bias += bias;
        fp_misc += calm;
    }
    let (fp_bias, fp_misc) = (fp_bias / seeds as f64, fp_misc / seeds as f64);
    assert!(fp_bias > fp_misc, "bias-prone {fp_bias} vs misc {fp_misc}");
}
