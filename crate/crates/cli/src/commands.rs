use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use debias_core::adversarial::{self, TrainConfig, TrainOutput};
use debias_core::corpus::{load_corpus, Corpus};
use debias_core::eval::{
    self, average_over_epochs, evaluate_model, evaluate_run, parallel_map, probe_topic_leakage, EpochMetrics, EvalSet,
    MaskList, MetricsReport, ProbeConfig, Table1Config, Table1Data, Variant,
};
use debias_core::net::Checkpoint;
use debias_core::pipeline::{self, PrepConfig};
use debias_core::sampler::TopicDataset;
use debias_core::synthgen::{self, GenConfig};
use debias_core::topics::{label_corpus, FitOptions, TopicModel};

use crate::settings::{to_kv_text, Settings};
use crate::Common;

pub type Runner = fn(&mut Ctx) -> Result<()>;

/// Everything a command needs: resolved settings, the output directory and
/// a record of the files it touched.
pub struct Ctx {
    pub settings: Settings,
    pub seed: u64,
    out: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Ctx {
    fn input(&mut self, key: &str) -> Result<PathBuf> {
        let p = self.settings.path(key)?;
        self.touch_input(&p)?;
        Ok(p)
    }

    fn optional_input(&mut self, key: &str) -> Result<Option<PathBuf>> {
        let p = self.settings.optional_path(key)?;
        if let Some(p) = &p {
            self.touch_input(p)?;
        }
        Ok(p)
    }

    fn touch_input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            bail!("input {} does not exist", p.display());
        }
        self.inputs.push(p.display().to_string());
        Ok(())
    }

    /// Input file `name` inside a directory given by `key`.
    fn input_in(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        let p = dir.join(name);
        self.touch_input(&p)?;
        Ok(p)
    }

    fn output(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        if self.inputs.iter().any(|i| same_file(Path::new(i), &p)) {
            bail!("output {} would overwrite an input", p.display());
        }
        self.outputs.push(p.display().to_string());
        Ok(p)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.output(name)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), b.parent().and_then(|d| fs::canonicalize(d).ok())) {
        (Ok(a), Some(dir)) => b.file_name().is_some_and(|n| dir.join(n) == a),
        _ => false,
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    inputs: &'a [String],
    outputs: &'a [String],
    duration_secs: f64,
}

fn parse_set(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => bail!("--set expects KEY=VALUE, got {s:?}"),
        })
        .collect()
}

/// Resolves settings, runs the command and writes `manifest.json` and
/// `config.txt` into the output directory. Replaying with
/// `--config <out>/config.txt` reproduces the run.
pub fn execute(
    command: &str,
    argv: Vec<String>,
    common: &Common,
    path_flags: Vec<(String, String)>,
    run: Runner,
) -> Result<()> {
    let start = Instant::now();
    let mut overrides = parse_set(&common.set)?;
    overrides.extend(path_flags);
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let settings = Settings::load(common.config.as_deref(), &overrides)?;
    let seed = settings.get("seed", 0u64)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut ctx = Ctx {
        settings,
        seed,
        out: common.out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(c) = &common.config {
        ctx.touch_input(c)?;
    }
    run(&mut ctx)?;
    let config = ctx.settings.finish()?;
    ctx.write("config.txt", &to_kv_text(&config))?;
    let manifest_path = ctx.output("manifest.json")?;
    let manifest = RunManifest {
        command,
        argv: &argv,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: &config,
        inputs: &ctx.inputs,
        outputs: &ctx.outputs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    Ok(())
}

fn gen_config(s: &Settings, seed: u64) -> Result<GenConfig> {
    let d = GenConfig::default();
    let n_topics = s.get("n_topics", d.n_topics)?;
    let anger_base_rate = s.get("anger_base_rate", d.anger_base_rate)?;
    let high_rho = s.get("high_rho", 0.9)?;
    let default_corr = (0..n_topics)
        .map(|k| if k < n_topics / 2 { high_rho } else { anger_base_rate })
        .collect();
    Ok(GenConfig {
        n_train: s.get("n_train", d.n_train)?,
        n_dev: s.get("n_dev", d.n_dev)?,
        n_test: s.get("n_test", d.n_test)?,
        n_bias_probe: s.get("n_bias_probe", d.n_bias_probe)?,
        n_topics,
        emotion_pool: s.get("emotion_pool", d.emotion_pool)?,
        topic_pool: s.get("topic_pool", d.topic_pool)?,
        filler_pool: s.get("filler_pool", d.filler_pool)?,
        mask_token_rate: s.get("mask_token_rate", d.mask_token_rate)?,
        length: s.get_pair("length", d.length)?,
        topic_tokens: s.get_pair("topic_tokens", d.topic_tokens)?,
        emotion_tokens: s.get_pair("emotion_tokens", d.emotion_tokens)?,
        anger_base_rate,
        topic_anger_corr: s.get_list("topic_anger_corr", default_corr)?,
        misc_fraction: s.get("misc_fraction", d.misc_fraction)?,
        bias_prone_rate: s.get("bias_prone_rate", d.bias_prone_rate)?,
        seed,
    })
}

pub fn generate(ctx: &mut Ctx) -> Result<()> {
    let config = gen_config(&ctx.settings, ctx.seed)?;
    let generated = synthgen::generate_corpus(&config)?;
    for (name, corpus) in [
        ("train.jsonl", &generated.splits.train),
        ("dev.jsonl", &generated.splits.dev),
        ("test.jsonl", &generated.splits.test),
        ("bias_probe.jsonl", &generated.bias_probe),
        ("bias_set.jsonl", &generated.bias_set()),
    ] {
        corpus.save(ctx.output(name)?)?;
    }
    synthgen::emit_mask_list(&generated.truth).save(ctx.output("mask.txt")?)?;
    #[derive(Serialize)]
    struct Truth<'a> {
        config: &'a GenConfig,
        #[serde(flatten)]
        truth: &'a synthgen::GroundTruth,
    }
    let text = serde_json::to_string_pretty(&Truth {
        config: &config,
        truth: &generated.truth,
    })?;
    ctx.write("ground_truth.json", &(text + "\n"))
}

fn prep_config(s: &Settings, seed: u64) -> Result<PrepConfig> {
    let d = PrepConfig::default();
    Ok(PrepConfig {
        n_topics: s.get("n_topics", d.n_topics)?,
        threshold: s.get("threshold", d.threshold)?,
        fit: FitOptions {
            min_df: s.get("min_df", d.fit.min_df)?,
            restarts: s.get("restarts", d.fit.restarts)?,
        },
        seed,
    })
}

pub fn topics_fit(ctx: &mut Ctx) -> Result<()> {
    let input = ctx.input("input")?;
    let config = prep_config(&ctx.settings, ctx.seed)?;
    let corpus = load_corpus(&input)?;
    let model = pipeline::fit_topics(&corpus, &config)?;
    model.save(ctx.output("topic_model.json")?)?;
    Ok(())
}

pub fn topics_label(ctx: &mut Ctx) -> Result<()> {
    let model_path = ctx.input("model")?;
    let input = ctx.input("input")?;
    let threshold = ctx.settings.get("threshold", PrepConfig::default().threshold)?;
    let model = TopicModel::load(&model_path)?;
    let corpus = load_corpus(&input)?;
    let name = input
        .file_name()
        .map_or_else(|| "labeled.jsonl".into(), |n| n.to_string_lossy().into_owned());
    label_corpus(&model, &corpus, threshold).save(ctx.output(&name)?)?;
    Ok(())
}

pub fn sample(ctx: &mut Ctx) -> Result<()> {
    let input = ctx.input("input")?;
    let labeled = load_corpus(&input)?;
    let (ds, dt) = pipeline::sample(&labeled, ctx.seed)?;
    ds.save(ctx.output("ds.jsonl")?)?;
    dt.dataset.as_corpus().save(ctx.output("dt.jsonl")?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["topic_id", "size", "angry", "p_lower", "expected", "normalized", "allocated"])?;
    for s in &dt.stats {
        let allocated = dt.dataset.per_topic_counts.get(&s.topic_id).copied().unwrap_or(0);
        w.write_record([
            s.topic_id.to_string(),
            s.size.to_string(),
            s.angry.to_string(),
            format!("{:.6}", s.p_lower),
            format!("{:.6}", s.expected),
            format!("{:.6}", s.normalized),
            allocated.to_string(),
        ])?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    ctx.write("allocation.csv", &text)
}

/// Training hyperparameters shared by every command that trains. `debias`
/// and `use_gru` keep their defaults; `train` reads them separately.
fn train_config(s: &Settings, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        topic_coeff: s.get("topic_coeff", d.topic_coeff)?,
        epochs: s.get("epochs", d.epochs)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        lr: s.get("lr", d.lr)?,
        dropout: s.get("dropout", d.dropout)?,
        seed,
        emb_dim: s.get("emb_dim", d.emb_dim)?,
        hid_dim: s.get("hid_dim", d.hid_dim)?,
        head_dim: s.get("head_dim", d.head_dim)?,
        ..d
    })
}

fn load_topic_dataset(path: &Path) -> Result<TopicDataset> {
    Ok(TopicDataset::from_corpus(load_corpus(path)?)?)
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:03}.json")
}

pub fn train(ctx: &mut Ctx) -> Result<()> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        use_gru: ctx.settings.get_bool("use_gru", d.use_gru)?,
        debias: ctx.settings.get_bool("debias", d.debias)?,
        ..train_config(&ctx.settings, ctx.seed)?
    };
    let ds = load_corpus(ctx.input("ds")?)?;
    let dt = match ctx.optional_input("dt")? {
        Some(p) => Some(load_topic_dataset(&p)?),
        None => None,
    };
    let dev = match ctx.optional_input("dev")? {
        Some(p) => Some(load_corpus(p)?),
        None => None,
    };
    let out = adversarial::train(&config, &ds, dt.as_ref(), dev.as_ref())?;
    for epoch in 0..out.checkpoints.len() {
        let ckpt = out.checkpoint(epoch).expect("epoch in range");
        ckpt.save(ctx.output(&checkpoint_name(epoch))?)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "sentiment_loss", "topic_loss", "anti_topic_loss", "dev_f1", "dev_accuracy", "dev_loss"])?;
    for log in &out.logs {
        let dev = |f: fn(&adversarial::DevMetrics) -> f64| log.dev.as_ref().map_or(String::new(), |d| format!("{:.6}", f(d)));
        w.write_record([
            log.epoch.to_string(),
            format!("{:.6}", log.sentiment_loss),
            format!("{:.6}", log.topic_loss),
            format!("{:.6}", log.anti_topic_loss),
            dev(|d| d.f1),
            dev(|d| d.accuracy),
            dev(|d| d.loss),
        ])?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    ctx.write("epoch_log.csv", &text)
}

fn epoch_range(s: &Settings) -> Result<(usize, usize)> {
    Ok((s.get("first_epoch", eval::FIRST_EPOCH)?, s.get("last_epoch", eval::LAST_EPOCH)?))
}

fn per_epoch_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "gru", "mask", "epoch", "f1", "bias_accuracy"])?;
    let yn = |b: bool| if b { "Y" } else { "N" };
    for r in reports {
        for (e, m) in &r.per_epoch {
            w.write_record([
                r.variant.classifier().to_string(),
                yn(r.variant.gru).to_string(),
                yn(r.variant.mask).to_string(),
                e.to_string(),
                format!("{:.4}", m.f1),
                format!("{:.4}", m.bias_accuracy),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn write_reports(ctx: &mut Ctx, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    ctx.write(&format!("{stem}.csv"), &eval::reports_to_csv(reports)?)?;
    ctx.write(&format!("{stem}.txt"), &eval::reports_to_table(reports))?;
    ctx.write("per_epoch.csv", &per_epoch_csv(reports)?)
}

pub fn evaluate(ctx: &mut Ctx) -> Result<()> {
    let run = ctx.input("run")?;
    let test = load_corpus(ctx.input("test")?)?;
    let bias_set = match ctx.optional_input("bias_set")? {
        Some(p) => load_corpus(p)?,
        None => test.bias_prone_subset(),
    };
    let mask = match ctx.optional_input("mask")? {
        Some(p) => Some(MaskList::load(p)?),
        None => None,
    };
    let (first, last) = epoch_range(&ctx.settings)?;
    if first > last {
        bail!("empty epoch range {first}..={last}");
    }
    let run_config = crate::settings::parse_kv(&fs::read_to_string(ctx.input_in(&run, "config.txt")?)?)?;
    let flag = |k: &str| run_config.get(k).is_some_and(|v| v == "true");
    let (debiased, gru) = (flag("debias"), flag("use_gru"));

    let mut conditions = vec![(false, EvalSet { test, bias_set })];
    if let Some(mask) = &mask {
        conditions.push((true, conditions[0].1.masked(mask)));
    }
    let mut per_epoch: Vec<BTreeMap<usize, EpochMetrics>> = vec![BTreeMap::new(); conditions.len()];
    for e in first..=last {
        let ckpt = Checkpoint::load(ctx.input_in(&run, &checkpoint_name(e))?)?;
        for ((_, set), acc) in conditions.iter().zip(per_epoch.iter_mut()) {
            acc.insert(e, evaluate_model(&ckpt, &set.test, &set.bias_set)?);
        }
    }
    let mut reports = Vec::new();
    for ((masked, _), per_epoch) in conditions.iter().zip(per_epoch) {
        let avg = average_over_epochs(&per_epoch, first, last)?;
        reports.push(MetricsReport {
            variant: Variant {
                debiased,
                gru,
                mask: *masked,
            },
            f1: avg.f1,
            bias_accuracy: avg.bias_accuracy,
            per_epoch,
            seeds_averaged: 1,
            epochs: (first, last),
        });
    }
    write_reports(ctx, "metrics", &reports)
}

/// Generated corpus files read by `table1` and `sweep`.
struct DataDir {
    train: Corpus,
    dev: Corpus,
    test: Corpus,
    bias_set: Corpus,
    mask: MaskList,
}

fn load_data_dir(ctx: &mut Ctx) -> Result<DataDir> {
    let dir = ctx.input("data")?;
    Ok(DataDir {
        train: load_corpus(ctx.input_in(&dir, "train.jsonl")?)?,
        dev: load_corpus(ctx.input_in(&dir, "dev.jsonl")?)?,
        test: load_corpus(ctx.input_in(&dir, "test.jsonl")?)?,
        bias_set: load_corpus(ctx.input_in(&dir, "bias_set.jsonl")?)?,
        mask: MaskList::load(ctx.input_in(&dir, "mask.txt")?)?,
    })
}

/// Training seeds `seed, seed + 1, ...`.
fn run_seeds(s: &Settings, seed: u64) -> Result<Vec<u64>> {
    let n: u64 = s.get("n_seeds", 5)?;
    Ok((0..n).map(|i| seed.wrapping_add(i)).collect())
}

pub fn table1(ctx: &mut Ctx) -> Result<()> {
    let data = load_data_dir(ctx)?;
    let s = &ctx.settings;
    let prep = prep_config(s, ctx.seed)?;
    let d = Table1Config::default();
    let (first_epoch, last_epoch) = epoch_range(s)?;
    let config = Table1Config {
        train: train_config(s, ctx.seed)?,
        seeds: run_seeds(s, ctx.seed)?,
        gru_seed_limit: Some(s.get("gru_seeds", d.gru_seed_limit.unwrap_or(1))?),
        gru_lr: Some(s.get("gru_lr", d.gru_lr.unwrap_or(d.train.lr))?),
        first_epoch,
        last_epoch,
        threads: s.get("threads", d.threads)?,
    };
    let prepared = pipeline::prepare(&data.train, &prep)?;
    let reports = eval::run_table1(
        &config,
        &Table1Data {
            ds: &prepared.ds,
            dt: &prepared.dt.dataset,
            dev: Some(&data.dev),
            test: &data.test,
            bias_set: &data.bias_set,
            mask: &data.mask,
        },
    )?;
    write_reports(ctx, "table1", &reports)
}

struct SweepRow {
    lambda: f64,
    seed: u64,
    plain: EpochMetrics,
    masked: EpochMetrics,
    leakage: f64,
}

fn sweep_summary(rows: &[SweepRow], lambdas: &[f64]) -> String {
    let mean = |lambda: f64, f: &dyn Fn(&SweepRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.lambda == lambda).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let mut out = String::from("lambda  f1      bias_accuracy  masked_f1  masked_bias_accuracy  leakage\n");
    for &l in lambdas {
        let _ = writeln!(
            out,
            "{:<6}  {:.4}  {:.4}         {:.4}     {:.4}                {:.4}",
            l,
            mean(l, &|r| r.plain.f1),
            mean(l, &|r| r.plain.bias_accuracy),
            mean(l, &|r| r.masked.f1),
            mean(l, &|r| r.masked.bias_accuracy),
            mean(l, &|r| r.leakage),
        );
    }
    let baseline = lambdas.iter().copied().find(|&l| l == 0.0);
    if let Some(b) = baseline {
        out.push_str("\nobserved trends (lambda = 0 is the regular classifier):\n");
        let masked_regular = mean(b, &|r| r.masked.bias_accuracy);
        for &l in lambdas.iter().filter(|&&l| l > 0.0) {
            let debiased = mean(l, &|r| r.plain.bias_accuracy);
            let both = mean(l, &|r| r.masked.bias_accuracy);
            let _ = writeln!(
                out,
                "lambda {l}: debiasing {} masking ({debiased:.4} vs {masked_regular:.4}); debias+mask {} debias alone ({both:.4} vs {debiased:.4})",
                if debiased > masked_regular { "beats" } else { "does not beat" },
                if both < debiased { "underperforms" } else { "does not underperform" },
            );
        }
    }
    out
}

pub fn sweep(ctx: &mut Ctx) -> Result<()> {
    let data = load_data_dir(ctx)?;
    let s = &ctx.settings;
    let prep = prep_config(s, ctx.seed)?;
    let template = train_config(s, ctx.seed)?;
    let lambdas: Vec<f64> = s.get_list("lambdas", vec![0.0, 1.0])?;
    if lambdas.is_empty() {
        bail!("empty lambda grid");
    }
    let seeds = run_seeds(s, ctx.seed)?;
    let (first, last) = epoch_range(s)?;
    let threads = s.get("threads", 0usize)?;
    if first == 0 || first > last || last > template.epochs {
        bail!("epoch range {first}..={last} not covered by {} epochs", template.epochs);
    }

    let prepared = pipeline::prepare(&data.train, &prep)?;
    let plain_set = EvalSet {
        test: data.test.clone(),
        bias_set: data.bias_set.clone(),
    };
    let masked_set = plain_set.masked(&data.mask);
    let grid: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results = parallel_map(&grid, threads, |&(lambda, seed)| -> Result<SweepRow> {
        let config = TrainConfig {
            topic_coeff: lambda,
            debias: true,
            seed,
            ..template.clone()
        };
        let out: TrainOutput = adversarial::train(&config, &prepared.ds, Some(&prepared.dt.dataset), Some(&data.dev))?;
        let (plain, masked) = evaluate_run(&out, &plain_set, &masked_set, first, last)?;
        let probe = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        Ok(SweepRow {
            lambda,
            seed,
            plain: average_over_epochs(&plain, first, last)?,
            masked: average_over_epochs(&masked, first, last)?,
            leakage: probe_topic_leakage(out.final_params(), &out.vocab, &prepared.dt.dataset, &probe)?,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda", "seed", "f1", "bias_accuracy", "masked_f1", "masked_bias_accuracy", "leakage"])?;
    for r in &rows {
        w.write_record([
            r.lambda.to_string(),
            r.seed.to_string(),
            format!("{:.4}", r.plain.f1),
            format!("{:.4}", r.plain.bias_accuracy),
            format!("{:.4}", r.masked.f1),
            format!("{:.4}", r.masked.bias_accuracy),
            format!("{:.4}", r.leakage),
        ])?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    ctx.write("sweep.csv", &text)?;
    ctx.write("sweep_summary.txt", &sweep_summary(&rows, &lambdas))?;
    Ok(())
}
