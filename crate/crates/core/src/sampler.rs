//! Anger-weighted stratified sampling of the topic training set.
//!
//! Each topic is weighted by a conservative estimate of how many of its
//! sentences are angry: the continuity-corrected Wilson lower bound on the
//! anger rate times the topic size. Half of the topic dataset is drawn from
//! topics in proportion to those weights, the other half uniformly from
//! miscellaneous sentences.

use std::collections::BTreeMap;

use rand::seq::index;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Corpus, SentenceRecord, TopicLabel};
use crate::error::{Error, Result};
use crate::rng;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959964;

fn z_for(confidence: f64) -> f64 {
    if confidence == 0.95 {
        Z_95
    } else {
        Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
    }
}

/// Lower bound of the Wilson score interval with continuity correction,
/// clamped at 0. Exactly 0 when `successes == 0`.
pub fn wilson_lower(successes: u64, trials: u64, confidence: f64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Sampling("wilson_lower needs at least one trial".into()));
    }
    if successes > trials {
        return Err(Error::Sampling(format!("{successes} successes exceed {trials} trials")));
    }
    if !(0.0..1.0).contains(&confidence) || confidence == 0.0 {
        return Err(Error::Sampling(format!("confidence {confidence} outside (0, 1)")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let z = z_for(confidence);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let radicand = z2 - 1.0 / n + 4.0 * n * p * (1.0 - p) + (4.0 * p - 2.0);
    let lower = (2.0 * n * p + z2 - (z * radicand.max(0.0).sqrt() + 1.0)) / (2.0 * (n + z2));
    Ok(lower.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicStats {
    pub topic_id: usize,
    pub size: usize,
    pub angry: usize,
    pub p_lower: f64,
    pub expected: f64,
    pub normalized: f64,
}

fn topic_of(r: &SentenceRecord) -> Option<usize> {
    match (r.has_topic, r.topic_id) {
        (Some(true), Some(TopicLabel::Topic(k))) => Some(k),
        _ => None,
    }
}

fn is_misc(r: &SentenceRecord) -> bool {
    r.has_topic == Some(false)
}

/// Per-topic anger statistics over records with a recognizable topic,
/// ordered by topic id.
pub fn topic_stats(train: &Corpus) -> Result<Vec<TopicStats>> {
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in train.iter() {
        if r.has_topic.is_none() {
            return Err(Error::Sampling(format!("record {} lacks topic annotations", r.id)));
        }
        if let Some(k) = topic_of(r) {
            let e = groups.entry(k).or_default();
            e.0 += 1;
            e.1 += usize::from(r.anger);
        }
    }
    if groups.is_empty() {
        return Err(Error::Sampling("no records with a recognizable topic".into()));
    }
    let mut stats = groups
        .into_iter()
        .map(|(topic_id, (size, angry))| {
            let p_lower = wilson_lower(angry as u64, size as u64, 0.95)?;
            Ok(TopicStats {
                topic_id,
                size,
                angry,
                p_lower,
                expected: p_lower * size as f64,
                normalized: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = stats.iter().map(|s| s.expected).sum();
    if total > 0.0 {
        for s in &mut stats {
            s.normalized = s.expected / total;
        }
    }
    Ok(stats)
}

/// Hamilton apportionment of `total` units by `weights`; leftover units go
/// to the largest fractional parts, ties to the lower position.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Integer sample counts per topic summing exactly to `total`, never
/// exceeding a topic's size. Units that overflow a full topic are
/// reapportioned among topics with spare capacity.
pub fn allocate_samples(stats: &[TopicStats], total: usize) -> Result<BTreeMap<usize, usize>> {
    let capacity: usize = stats.iter().map(|s| s.size).sum();
    if total > capacity {
        return Err(Error::Sampling(format!(
            "requested {total} topical samples but only {capacity} are available"
        )));
    }
    if stats.iter().all(|s| s.normalized <= 0.0) {
        return Err(Error::Sampling(
            "every topic has zero anger weight; the topic dataset cannot be built".into(),
        ));
    }
    let mut counts = vec![0usize; stats.len()];
    let mut remaining = total;
    while remaining > 0 {
        let spare = |i: usize| stats[i].size - counts[i];
        let mut open: Vec<usize> = (0..stats.len())
            .filter(|&i| spare(i) > 0 && stats[i].normalized > 0.0)
            .collect();
        let weights: Vec<f64> = if open.is_empty() {
            // Every weighted topic is full: spread the rest by spare capacity.
            open = (0..stats.len()).filter(|&i| spare(i) > 0).collect();
            open.iter().map(|&i| spare(i) as f64).collect()
        } else {
            open.iter().map(|&i| stats[i].normalized).collect()
        };
        let shares = largest_remainder(&weights, remaining);
        let mut overflow = 0;
        for (&i, share) in open.iter().zip(shares) {
            let granted = share.min(stats[i].size - counts[i]);
            overflow += share - granted;
            counts[i] += granted;
        }
        remaining = overflow;
    }
    Ok(stats.iter().map(|s| s.topic_id).zip(counts).collect())
}

/// Topic classification data: records labeled by `has_topic`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopicDataset {
    pub records: Vec<SentenceRecord>,
    pub per_topic_counts: BTreeMap<usize, usize>,
}

impl TopicDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.has_topic == Some(true)).collect()
    }

    pub fn as_corpus(&self) -> Corpus {
        Corpus {
            records: self.records.clone(),
        }
    }

    /// Rebuilds a dataset from annotated records (e.g. a JSONL file).
    pub fn from_corpus(corpus: Corpus) -> Result<Self> {
        let mut per_topic_counts = BTreeMap::new();
        for r in corpus.iter() {
            match r.has_topic {
                None => {
                    return Err(Error::Sampling(format!("record {} lacks has_topic", r.id)));
                }
                Some(true) => {
                    if let Some(k) = topic_of(r) {
                        *per_topic_counts.entry(k).or_insert(0) += 1;
                    }
                }
                Some(false) => {}
            }
        }
        Ok(TopicDataset {
            records: corpus.records,
            per_topic_counts,
        })
    }
}

/// Result of building the topic dataset: records plus the allocation report.
#[derive(Debug, Clone)]
pub struct TopicSample {
    pub dataset: TopicDataset,
    pub stats: Vec<TopicStats>,
}

/// Samples `total / 2` topical sentences per [`allocate_samples`] and the
/// rest uniformly from miscellaneous sentences.
pub fn build_topic_dataset(train: &Corpus, total: usize, seed: u64) -> Result<TopicSample> {
    if total == 0 {
        return Ok(TopicSample {
            dataset: TopicDataset::default(),
            stats: Vec::new(),
        });
    }
    let stats = topic_stats(train)?;
    let topical = total / 2;
    let misc_target = total - topical;
    let allocation = allocate_samples(&stats, topical)?;

    let mut by_topic: BTreeMap<usize, Vec<&SentenceRecord>> = BTreeMap::new();
    let mut misc: Vec<&SentenceRecord> = Vec::new();
    for r in train.iter() {
        if let Some(k) = topic_of(r) {
            by_topic.entry(k).or_default().push(r);
        } else if is_misc(r) {
            misc.push(r);
        }
    }
    if misc.len() < misc_target {
        return Err(Error::Sampling(format!(
            "need {misc_target} miscellaneous sentences, only {} available",
            misc.len()
        )));
    }

    let mut records = Vec::with_capacity(total);
    for (&k, &count) in &allocation {
        let pool = &by_topic[&k];
        let mut rng = rng::stream(seed, &[rng::tag("topic-sample"), k as u64]);
        let mut picked = index::sample(&mut rng, pool.len(), count).into_vec();
        picked.sort_unstable();
        records.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    let mut rng = rng::stream(seed, &[rng::tag("misc-sample")]);
    let mut picked = index::sample(&mut rng, misc.len(), misc_target).into_vec();
    picked.sort_unstable();
    records.extend(picked.into_iter().map(|i| misc[i].clone()));

    Ok(TopicSample {
        dataset: TopicDataset {
            records,
            per_topic_counts: allocation,
        },
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    /// Independent reference: Newcombe's method 4, lower limit written as
    /// `(2np + z² - 1 - z·sqrt(z² - 2 - 1/n + 4p(n(1-p) + 1))) / (2(n + z²))`.
    fn newcombe_lower(x: u64, n: u64) -> f64 {
        if x == 0 {
            return 0.0;
        }
        let (x, n) = (x as f64, n as f64);
        let z = 1.959964_f64;
        let p = x / n;
        let num = 2.0 * n * p + z * z - 1.0
            - z * (z * z - 2.0 - 1.0 / n + 4.0 * p * (n * (1.0 - p) + 1.0)).sqrt();
        (num / (2.0 * (n + z * z))).max(0.0)
    }

    fn stat(topic_id: usize, size: usize, normalized: f64) -> TopicStats {
        TopicStats {
            topic_id,
            size,
            angry: 0,
            p_lower: 0.0,
            expected: 0.0,
            normalized,
        }
    }

    fn annotated(topic: Option<usize>, id: u64, anger: bool) -> SentenceRecord {
        let mut r = SentenceRecord::new(id, vec![format!("t{id}")], anger);
        r.has_topic = Some(topic.is_some());
        r.topic_id = Some(topic.map_or(TopicLabel::Misc, TopicLabel::Topic));
        r.topic_score = Some(if topic.is_some() { 0.8 } else { 0.1 });
        r.misc_score = Some(1.0 - r.topic_score.unwrap());
        r
    }

    #[test]
    fn wilson_edge_values() {
        assert_eq!(wilson_lower(0, 10, 0.95).unwrap(), 0.0);
        assert!(wilson_lower(1, 0, 0.95).is_err());
        assert!(wilson_lower(0, 0, 0.95).is_err());
        assert!(wilson_lower(11, 10, 0.95).is_err());
        let full = wilson_lower(10, 10, 0.95).unwrap();
        assert!((full - newcombe_lower(10, 10)).abs() < 1e-9);
        let part = wilson_lower(5, 20, 0.95).unwrap();
        assert!((part - newcombe_lower(5, 20)).abs() < 1e-9);
        assert!(part < 0.25);
    }

    #[test]
    fn wilson_matches_reference_grid() {
        for n in 1..=50 {
            for x in 0..=n {
                let a = wilson_lower(x, n, 0.95).unwrap();
                assert!((a - newcombe_lower(x, n)).abs() < 1e-9, "x={x} n={n}");
            }
        }
    }

    #[test]
    fn wilson_other_confidence_levels() {
        let narrow = wilson_lower(30, 60, 0.80).unwrap();
        let wide = wilson_lower(30, 60, 0.99).unwrap();
        assert!(narrow > wilson_lower(30, 60, 0.95).unwrap());
        assert!(wide < wilson_lower(30, 60, 0.95).unwrap());
    }

    #[test]
    fn single_topic_takes_all_mass() {
        let c: Corpus = (0..10).map(|i| annotated(Some(0), i, true)).collect();
        let s = topic_stats(&c).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].normalized, 1.0);
    }

    #[test]
    fn symmetric_topics_share_equally() {
        let c: Corpus = (0..20).map(|i| annotated(Some((i % 2) as usize), i, i % 4 < 2)).collect();
        let s = topic_stats(&c).unwrap();
        assert_eq!(s[0].normalized, s[1].normalized);
    }

    #[test]
    fn small_topic_is_discounted() {
        let mut recs = vec![annotated(Some(0), 0, true)];
        recs.extend((1..=100).map(|i| annotated(Some(1), i, true)));
        let s = topic_stats(&Corpus { records: recs }).unwrap();
        let small = newcombe_lower(1, 1);
        let large = newcombe_lower(100, 100);
        let expected_ratio = (100.0 * large) / small;
        assert!((s[1].normalized / s[0].normalized - expected_ratio).abs() < 1e-9);
        // The lower bound punishes the single-sentence topic well beyond 100×.
        assert!(expected_ratio > 100.0);
        assert!((s[0].normalized - small / (small + 100.0 * large)).abs() < 1e-12);
    }

    #[test]
    fn misc_records_excluded_from_stats() {
        let mut recs: Vec<_> = (0..5).map(|i| annotated(Some(3), i, true)).collect();
        recs.extend((5..50).map(|i| annotated(None, i, true)));
        let s = topic_stats(&Corpus { records: recs }).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].size, 5);
        assert!(topic_stats(&(0..3).map(|i| annotated(None, i, true)).collect()).is_err());
    }

    #[test]
    fn allocation_examples() {
        let a = allocate_samples(&[stat(0, 100, 0.5), stat(1, 100, 0.5)], 10).unwrap();
        assert_eq!(a.values().copied().collect::<Vec<_>>(), vec![5, 5]);
        let a = allocate_samples(&[stat(0, 100, 2.0 / 3.0), stat(1, 100, 1.0 / 3.0)], 10).unwrap();
        assert_eq!(a.values().copied().collect::<Vec<_>>(), vec![7, 3]);
        // Topic 0 wants 5 of 10 but only has 2; its overflow of 3 moves on.
        let a = allocate_samples(&[stat(0, 2, 0.5), stat(1, 100, 0.5)], 10).unwrap();
        assert_eq!(a.values().copied().collect::<Vec<_>>(), vec![2, 8]);
    }

    #[test]
    fn allocation_errors() {
        assert!(allocate_samples(&[stat(0, 3, 1.0)], 4).is_err());
        assert!(allocate_samples(&[stat(0, 30, 0.0), stat(1, 30, 0.0)], 4).is_err());
    }

    #[test]
    fn allocation_spills_into_zero_weight_topics_when_needed() {
        let a = allocate_samples(&[stat(0, 3, 1.0), stat(1, 10, 0.0)], 8).unwrap();
        assert_eq!(a[&0], 3);
        assert_eq!(a[&1], 5);
    }

    fn annotated_train(n: usize) -> Corpus {
        (0..n as u64)
            .map(|i| {
                let topic = if i % 3 == 0 { None } else { Some((i % 5) as usize) };
                annotated(topic, i, i % 2 == 0 || i % 5 == 1)
            })
            .collect()
    }

    #[test]
    fn topic_dataset_is_half_topical() {
        let train = annotated_train(600);
        let sample = build_topic_dataset(&train, 200, 4).unwrap();
        let d = &sample.dataset;
        assert_eq!(d.len(), 200);
        assert_eq!(d.labels().iter().filter(|&&l| l).count(), 100);
        let ids: HashSet<u64> = d.records.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 200);
        // Recount per-topic membership and compare with the allocation.
        let expected = allocate_samples(&sample.stats, 100).unwrap();
        let mut recount = BTreeMap::new();
        for r in &d.records {
            if let Some(k) = topic_of(r) {
                *recount.entry(k).or_insert(0) += 1;
            }
        }
        assert_eq!(recount, expected);
        assert_eq!(d.per_topic_counts, expected);
        assert_eq!(
            build_topic_dataset(&train, 200, 4).unwrap().dataset,
            sample.dataset
        );
    }

    #[test]
    fn topic_dataset_odd_and_empty_totals() {
        let train = annotated_train(300);
        let d = build_topic_dataset(&train, 51, 1).unwrap().dataset;
        assert_eq!(d.labels().iter().filter(|&&l| l).count(), 25);
        assert_eq!(d.len(), 51);
        assert!(build_topic_dataset(&train, 0, 1).unwrap().dataset.is_empty());
    }

    #[test]
    fn topic_dataset_needs_misc_sentences() {
        let train = annotated_train(60);
        assert!(build_topic_dataset(&train, 50, 0).is_err());
    }

    #[test]
    fn reported_scale_split() {
        // 12,025 annotated sentences, 4,172-sentence topic dataset.
        let train: Corpus = (0..12_025u64)
            .map(|i| {
                let topic = if i % 2 == 0 { None } else { Some((i % 49) as usize) };
                annotated(topic, i, i % 7 == 1 || i % 49 < 4)
            })
            .collect();
        let d = build_topic_dataset(&train, 4_172, 0).unwrap().dataset;
        let topical = d.labels().iter().filter(|&&l| l).count();
        assert_eq!((topical, d.len() - topical), (2_086, 2_086));
    }

    proptest! {
        #[test]
        fn wilson_bounded_and_monotone(n in 1u64..400, x in 0u64..400) {
            let x = x.min(n);
            let p = wilson_lower(x, n, 0.95).unwrap();
            prop_assert!(p >= 0.0);
            prop_assert!(p <= x as f64 / n as f64);
            if x < n {
                prop_assert!(wilson_lower(x + 1, n, 0.95).unwrap() >= p);
            }
            if x > 0 && x < n {
                prop_assert!(p < x as f64 / n as f64);
            }
            // Same ratio, more data: the bound tightens toward x/n.
            let p2 = wilson_lower(2 * x, 2 * n, 0.95).unwrap();
            prop_assert!(p2 >= p);
        }

        #[test]
        fn allocation_exact_and_capped(
            sizes in prop::collection::vec(0usize..50, 1..12),
            raw in prop::collection::vec(0.0f64..1.0, 12),
            frac in 0.0f64..=1.0,
        ) {
            let weights: Vec<f64> = sizes.iter().zip(&raw).map(|(_, w)| *w).collect();
            let sum: f64 = weights.iter().sum();
            prop_assume!(sum > 0.0);
            let stats: Vec<TopicStats> = sizes
                .iter()
                .zip(&weights)
                .enumerate()
                .map(|(i, (&s, &w))| stat(i, s, w / sum))
                .collect();
            let cap: usize = sizes.iter().sum();
            let total = (cap as f64 * frac).floor() as usize;
            let a = allocate_samples(&stats, total).unwrap();
            prop_assert_eq!(a.values().sum::<usize>(), total);
            for s in &stats {
                prop_assert!(a[&s.topic_id] <= s.size);
            }
        }
    }
}
