//! End-to-end orchestration: data preparation, victim training, autolabeling,
//! gradient stores, selection, retraining and reporting, plus the experiment
//! grids built on top of them.

mod cache;
mod config;
mod report;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use cache::{content_key, derive_seed, Cache};
pub use config::{
    AblationSpec, CrossSeedSpec, DataSource, ExperimentConfig, ExperimentKind, FileData, LeakageSpec,
    ModelSpec, OptimizerGrid, ProjectionSpec, ScalingSpec, SelectionSpec,
};
pub use report::{
    aggregate, figure_csv, figure_svg, AggregateRow, Failure, Figure, Provenance, ReportBundle,
    ReportRow, RowMetrics, Series,
};

use crate::corpus::{build_vocab, load_jsonl, mix_leakage, split, tokenize_all, DocumentSet, SeedPool, Vocab};
use crate::error::{Error, Result};
use crate::gradstore::{build_store, direction, GradientStore, Projection, StoreOptions, DEFAULT_CHUNK_ROWS};
use crate::metrics::{
    embed, ot_distance, retrain_and_eval, vocab_containment, EmbeddingSet, MetricsReport, OtConfig, OtMode,
};
use crate::model::{
    examples, fingerprint, init_params, train, Example, ModelConfig, ModelParams, OptimizerConfig, Task,
};
use crate::selector::{autolabel, select_baseline, select_batch, select_greedy, synth_checkpoints, Method, SelectionResult};

/// Labeled splits, candidate pool and vocabulary for one seed.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub task: Task,
    pub num_classes: usize,
    pub vocab: Vocab,
    pub seq_len: usize,
    pub train: DocumentSet,
    pub validation: DocumentSet,
    pub test: DocumentSet,
    pub pool: SeedPool,
    /// Digest of the inputs, for cache keys.
    pub key: String,
}

impl PreparedData {
    pub fn model_config(&self, spec: &ModelSpec) -> ModelConfig {
        match self.task {
            Task::Classification => ModelConfig::classification(self.vocab.len(), spec.embed_dim, self.num_classes),
            Task::NextToken => ModelConfig::next_token(self.vocab.len(), spec.embed_dim),
        }
        .with_hidden(spec.hidden_layer)
    }

    pub fn examples(&self, docs: &DocumentSet) -> Result<Vec<Example>> {
        let config = ModelConfig {
            task: self.task,
            vocab_size: self.vocab.len(),
            embed_dim: 1,
            num_classes: self.num_classes,
            hidden_layer: false,
        };
        examples(docs, &self.vocab, self.seq_len, &config)
    }

    /// Same labeled data and vocabulary with a different candidate pool.
    pub fn with_pool(&self, pool: SeedPool) -> Self {
        let mut key = self.key.clone();
        key.push_str(&content_key(&pool.documents.docs().iter().map(|d| &d.text).collect::<Vec<_>>()));
        Self {
            pool,
            key: content_key(&key),
            ..self.clone()
        }
    }
}

/// Raw sets produced by a data source: (train, validation, test, pool).
fn load_sets(source: &DataSource, seed: u64) -> Result<(DocumentSet, DocumentSet, DocumentSet, DocumentSet)> {
    match source {
        DataSource::Synthetic(toy) => {
            let toy = synthetic::ToyConfig {
                seed: derive_seed(seed ^ toy.seed, "synthetic"),
                ..toy.clone()
            };
            let d = synthetic::generate(&toy)?;
            Ok((d.train, d.validation, d.test, d.pool))
        }
        DataSource::Files(f) => {
            let labeled = load_jsonl(&f.labeled)?;
            let s = split(&labeled, f.fractions, derive_seed(seed, "split"))?;
            Ok((s.train, s.seed, s.test, load_jsonl(&f.pool)?))
        }
    }
}

fn source_key(source: &DataSource) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        source: &'a DataSource,
        digests: Vec<String>,
    }
    let digests = match source {
        DataSource::Synthetic(_) => vec![],
        DataSource::Files(f) => [&f.labeled, &f.pool]
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::file(p, e))?;
                Ok(format!("{:x}", Sha256::digest(bytes)))
            })
            .collect::<Result<_>>()?,
    };
    Ok(content_key(&Key { source, digests }))
}

fn concat(sets: &[&DocumentSet]) -> DocumentSet {
    DocumentSet::from_texts(
        sets.iter()
            .flat_map(|s| s.iter())
            .map(|d| (d.text.clone(), d.label)),
    )
}

/// Builds splits and vocabulary for `seed`. Documents of `extra_pools` only
/// contribute to the vocabulary, so pools can later be swapped in.
pub fn prepare_data(
    source: &DataSource,
    extra_pools: &[DataSource],
    spec: &ModelSpec,
    seed: u64,
) -> Result<PreparedData> {
    let (train, validation, test, pool) = load_sets(source, seed)?;
    let mut vocab_sets = vec![train.clone(), pool.clone()];
    for extra in extra_pools {
        vocab_sets.push(load_sets(extra, seed)?.3);
    }
    let refs: Vec<&DocumentSet> = vocab_sets.iter().collect();
    let vocab = build_vocab(&concat(&refs), spec.max_vocab, 0)?;
    let task = source.task();
    let num_classes = match task {
        Task::Classification => {
            let max = train
                .iter()
                .chain(validation.iter())
                .chain(test.iter())
                .map(|d| d.label.ok_or_else(|| Error::invalid(format!("document {} has no label", d.id))))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .ok_or_else(|| Error::invalid("labeled corpus is empty"))?;
            match source {
                DataSource::Synthetic(t) => t.num_classes.max(max + 1),
                DataSource::Files(_) => max + 1,
            }
        }
        Task::NextToken => 0,
    };
    let mut key_parts = vec![source_key(source)?];
    for extra in extra_pools {
        key_parts.push(source_key(extra)?);
    }
    let key = content_key(&(key_parts, spec, seed));
    Ok(PreparedData {
        task,
        num_classes,
        vocab,
        seq_len: spec.seq_len,
        train,
        validation,
        test,
        pool: SeedPool::unleaked(pool),
        key,
    })
}

/// Base and finetuned weights of the victim.
#[derive(Clone, Debug)]
pub struct Victim {
    pub theta0: ModelParams,
    pub theta_f: ModelParams,
    pub key: String,
}

pub fn train_victim(
    data: &PreparedData,
    spec: &ModelSpec,
    opt: &OptimizerConfig,
    seed: u64,
    cache: &Cache,
) -> Result<Victim> {
    let config = data.model_config(spec);
    let theta0 = init_params(config, derive_seed(seed, "init"))?;
    let opt = OptimizerConfig {
        seed: derive_seed(seed, "victim"),
        ..*opt
    };
    let key = content_key(&("victim", &data.key, spec, &opt));
    let theta_f = cache.checkpoint(&key, || {
        let train_ex = data.examples(&data.train)?;
        let val_ex = data.examples(&data.validation)?;
        Ok(train(&theta0, &train_ex, &opt, Some(&val_ex))?.params)
    })?;
    Ok(Victim { theta0, theta_f, key })
}

/// Autolabeled pool examples, store and per-checkpoint directions.
pub struct StoreContext {
    pub pool_examples: Vec<Example>,
    pub store: GradientStore,
    pub directions: Vec<Vec<f32>>,
    pub key: String,
}

pub fn prepare_store(
    data: &PreparedData,
    victim: &Victim,
    checkpoints: usize,
    k: usize,
    seed: u64,
    cache: &Cache,
) -> Result<StoreContext> {
    let seqs = tokenize_all(&data.pool.documents, &data.vocab, data.seq_len);
    let targets = autolabel(&seqs, &victim.theta_f)?;
    let pool_examples: Vec<Example> = seqs
        .into_iter()
        .zip(targets)
        .map(|(seq, target)| Example { seq, target })
        .collect();
    let schedule = synth_checkpoints(&victim.theta0, &victim.theta_f, checkpoints)?;
    let proj = Projection::new(
        victim.theta_f.config.head_len(),
        k,
        derive_seed(seed, "projection"),
    )?;
    let key = content_key(&("store", &victim.key, &data.key, checkpoints, k, proj.seed));
    let store = cache.store(&key, |path| {
        let opts = StoreOptions {
            projection: proj,
            chunk_rows: DEFAULT_CHUNK_ROWS,
            path,
        };
        build_store(&schedule.checkpoints, &victim.theta_f, &pool_examples, &opts)
    })?;
    let directions = schedule
        .checkpoints
        .iter()
        .map(|c| direction(c, &victim.theta_f, &proj))
        .collect::<Result<_>>()?;
    Ok(StoreContext {
        pool_examples,
        store,
        directions,
        key,
    })
}

pub fn run_method(
    ctx: &StoreContext,
    spec: &SelectionSpec,
    m: usize,
    method: Method,
    seed: u64,
    cache: &Cache,
) -> Result<SelectionResult> {
    let rng_seed = derive_seed(seed, "random_baseline");
    let key = content_key(&("selection", &ctx.key, spec.rule, spec.batch_size, m, method, rng_seed));
    cache.json("selection", &key, || match method {
        Method::Select => select_greedy(&ctx.store, &ctx.directions, m, spec.rule),
        Method::SelectBatch => select_batch(&ctx.store, &ctx.directions, m, spec.batch_size),
        other => select_baseline(&ctx.store, &ctx.directions, m, other, rng_seed),
    })
}

/// Sorted positions of at most `cap` of `n` items, drawn without replacement.
pub fn sample_positions(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    v.sort_unstable();
    v
}

fn embed_sample(
    docs: &DocumentSet,
    data: &PreparedData,
    base: &ModelParams,
    cap: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    let e = embed(docs, &data.vocab, base, data.seq_len)?;
    e.subset(&sample_positions(e.len(), cap, seed))
}

/// Retrains on a selection and measures utility, containment and transport
/// distance to the true training set.
pub fn evaluate_selection(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    ctx: &StoreContext,
    victim: &Victim,
    selection: &SelectionResult,
    retrain_opt: &OptimizerConfig,
    seed: u64,
) -> Result<RowMetrics> {
    let selected: Vec<Example> = selection
        .indices
        .iter()
        .map(|&i| ctx.pool_examples[i].clone())
        .collect();
    let opt = OptimizerConfig {
        seed: derive_seed(seed, "retrain"),
        ..*retrain_opt
    };
    let test = data.examples(&data.test)?;
    let validation = data.examples(&data.validation)?;
    let eval = retrain_and_eval(&victim.theta0, &selected, &opt, &test, &validation)?;
    let docs = data.pool.documents.subset(&selection.indices)?;
    let containment = vocab_containment(&docs, &data.train)?;
    let ea = embed_sample(&docs, data, &victim.theta0, cfg.ot_sample, derive_seed(seed, "ot_selected"))?;
    let eb = embed_sample(&data.train, data, &victim.theta0, cfg.ot_sample, derive_seed(seed, "ot_true"))?;
    let ot = ot_distance(&ea, &eb, &cfg.ot)?;
    let mut row = RowMetrics::from(&MetricsReport::new(eval, containment, ot));
    if data.pool.leaked_count() > 0 {
        row.leaked_selected = Some(selection.indices.iter().filter(|&&i| data.pool.leak_mask[i]).count());
    }
    Ok(row)
}

/// Error tagged with the pipeline stage that produced it.
struct StageError {
    stage: &'static str,
    error: Error,
}

trait Staged<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Staged<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

/// Rows and checkpoint fingerprints produced by one job.
#[derive(Default)]
struct JobOutput {
    rows: Vec<ReportRow>,
    checksums: BTreeMap<String, String>,
}

impl JobOutput {
    fn push(&mut self, method: impl Into<String>, seed: u64, group: &[(&str, String)], metrics: RowMetrics) {
        self.rows.push(ReportRow {
            method: method.into(),
            seed,
            group: group.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            metrics,
        });
    }

    fn victim(&mut self, seed: u64, label: &str, v: &Victim) {
        let prefix = if label.is_empty() {
            format!("seed{seed}")
        } else {
            format!("seed{seed}/{label}")
        };
        self.checksums.insert(format!("{prefix}/theta0"), fingerprint(&v.theta0));
        self.checksums.insert(format!("{prefix}/theta_f"), fingerprint(&v.theta_f));
    }
}

/// Runs jobs with at most `limit` in flight; results keep job order.
fn run_jobs<T: Send, R: Send>(limit: usize, jobs: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if limit > 1 && jobs.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
            return pool.install(|| jobs.into_par_iter().map(&f).collect());
        }
    }
    let _ = limit;
    jobs.into_iter().map(f).collect()
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// Utility metric plotted for a task: accuracy or perplexity.
fn utility_metric(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::NextToken => "perplexity",
    }
}

/// Entry point for every experiment kind.
pub fn run(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let cache = match (&cfg.out_dir, cfg.cache_enabled()) {
        (Some(dir), true) => Cache::new(Some(dir.join("cache")))?,
        _ => Cache::disabled(),
    };
    let jobs: Vec<u64> = cfg.seeds.clone();
    let outputs = run_jobs(cfg.parallel, jobs, |seed| {
        let mut out = JobOutput::default();
        let r = match cfg.kind {
            ExperimentKind::Pipeline => job_pipeline(cfg, seed, &cache, &mut out, &[cfg.selection.m]),
            ExperimentKind::Scaling => job_pipeline(cfg, seed, &cache, &mut out, &cfg.scaling.m_list),
            ExperimentKind::Leakage => job_leakage(cfg, seed, &cache, &mut out),
            ExperimentKind::Crossseed => job_crossseed(cfg, seed, &cache, &mut out),
            ExperimentKind::ProjectionDim => job_projection(cfg, seed, &cache, &mut out),
            ExperimentKind::Optimizer => job_optimizer(cfg, seed, &cache, &mut out),
            ExperimentKind::MetricAblation => job_ablation(cfg, seed, &cache, &mut out),
        };
        (seed, r, out)
    });
    let mut rows = Vec::new();
    let mut checksums = BTreeMap::new();
    let mut failures = Vec::new();
    for (seed, r, out) in outputs {
        match r {
            Ok(()) => {
                rows.extend(out.rows);
                checksums.extend(out.checksums);
            }
            Err(e) => {
                log::error!("seed {seed} failed at {}: {}", e.stage, e.error);
                failures.push(Failure {
                    seed,
                    stage: e.stage.to_string(),
                    message: e.error.to_string(),
                });
            }
        }
    }
    let aggregates = aggregate(&rows);
    let figures = figures_for(cfg, &aggregates);
    let bundle = ReportBundle {
        kind: cfg.kind,
        rows,
        aggregates,
        figures,
        provenance: Provenance {
            config_hash: content_key(&ExperimentConfig {
                // where and how fast a run goes does not change its results
                out_dir: None,
                cache: true,
                parallel: 1,
                ..cfg.clone()
            }),
            checkpoint_checksums: checksums,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        },
        failures,
    };
    if let Some(dir) = &cfg.out_dir {
        bundle.write(dir)?;
    }
    Ok(bundle)
}

fn job_pipeline(
    cfg: &ExperimentConfig,
    seed: u64,
    cache: &Cache,
    out: &mut JobOutput,
    m_list: &[usize],
) -> StageResult<()> {
    let data = prepare_data(&cfg.data, &[], &cfg.model, seed).stage("data")?;
    let victim = train_victim(&data, &cfg.model, &cfg.victim, seed, cache).stage("victim")?;
    out.victim(seed, "", &victim);
    let ctx = prepare_store(&data, &victim, cfg.selection.checkpoints, cfg.selection.k, seed, cache)
        .stage("store")?;
    for &m in m_list {
        if m > ctx.store.num_examples() {
            return Err(StageError {
                stage: "select",
                error: Error::invalid(format!("M = {m} exceeds the pool of {}", ctx.store.num_examples())),
            });
        }
        for &method in &cfg.selection.methods {
            let sel = run_method(&ctx, &cfg.selection, m, method, seed, cache).stage("select")?;
            let metrics = evaluate_selection(cfg, &data, &ctx, &victim, &sel, &cfg.retrain, seed).stage("retrain")?;
            let group = if cfg.kind == ExperimentKind::Scaling {
                vec![("M", m.to_string())]
            } else {
                vec![]
            };
            out.push(method.as_str(), seed, &group, metrics);
        }
    }
    Ok(())
}

fn job_leakage(cfg: &ExperimentConfig, seed: u64, cache: &Cache, out: &mut JobOutput) -> StageResult<()> {
    let data = prepare_data(&cfg.data, &[], &cfg.model, seed).stage("data")?;
    let victim = train_victim(&data, &cfg.model, &cfg.victim, seed, cache).stage("victim")?;
    out.victim(seed, "", &victim);
    let distractors = data.pool.documents.clone();
    for &fraction in &cfg.leakage.fractions {
        let pool = mix_leakage(
            &data.train,
            &distractors,
            fraction,
            cfg.leakage.pool_size,
            derive_seed(seed, "leakage"),
        )
        .stage("data")?;
        let leaky = data.with_pool(pool);
        let ctx = prepare_store(&leaky, &victim, cfg.selection.checkpoints, cfg.selection.k, seed, cache)
            .stage("store")?;
        for &method in &cfg.leakage.methods {
            let sel = run_method(&ctx, &cfg.selection, cfg.selection.m, method, seed, cache).stage("select")?;
            let mut metrics =
                evaluate_selection(cfg, &leaky, &ctx, &victim, &sel, &cfg.retrain, seed).stage("retrain")?;
            metrics.leaked_selected.get_or_insert(0);
            out.push(method.as_str(), seed, &[("leak_fraction", fmt_f(fraction))], metrics);
        }
    }
    Ok(())
}

fn job_crossseed(cfg: &ExperimentConfig, seed: u64, cache: &Cache, out: &mut JobOutput) -> StageResult<()> {
    let spec = &cfg.crossseed;
    for (t, task) in spec.test_tasks.iter().enumerate() {
        let data = prepare_data(task, &spec.seed_datasets, &cfg.model, seed).stage("data")?;
        let victim = train_victim(&data, &cfg.model, &cfg.victim, seed, cache).stage("victim")?;
        out.victim(seed, &format!("task{t}"), &victim);
        for (s, source) in spec.seed_datasets.iter().enumerate() {
            let pool = load_sets(source, seed).stage("data")?.3;
            let cell = data.with_pool(SeedPool::unleaked(pool));
            let ctx = prepare_store(&cell, &victim, cfg.selection.checkpoints, cfg.selection.k, seed, cache)
                .stage("store")?;
            let m = cfg.selection.m.min(ctx.store.num_examples());
            let sel = run_method(&ctx, &cfg.selection, m, Method::Select, seed, cache).stage("select")?;
            let metrics = evaluate_selection(cfg, &cell, &ctx, &victim, &sel, &cfg.retrain, seed).stage("retrain")?;
            out.push(
                Method::Select.as_str(),
                seed,
                &[("task", t.to_string()), ("seed_dataset", s.to_string())],
                metrics,
            );
        }
    }
    Ok(())
}

fn job_projection(cfg: &ExperimentConfig, seed: u64, cache: &Cache, out: &mut JobOutput) -> StageResult<()> {
    let data = prepare_data(&cfg.data, &[], &cfg.model, seed).stage("data")?;
    let victim = train_victim(&data, &cfg.model, &cfg.victim, seed, cache).stage("victim")?;
    out.victim(seed, "", &victim);
    for &k in &cfg.projection_dim.k_list {
        let ctx = prepare_store(&data, &victim, cfg.selection.checkpoints, k, seed, cache).stage("store")?;
        for &method in &cfg.projection_dim.methods {
            let sel = run_method(&ctx, &cfg.selection, cfg.selection.m, method, seed, cache).stage("select")?;
            let metrics = evaluate_selection(cfg, &data, &ctx, &victim, &sel, &cfg.retrain, seed).stage("retrain")?;
            out.push(method.as_str(), seed, &[("k", k.to_string())], metrics);
        }
    }
    Ok(())
}

/// Distinct display names for a list of optimizers.
fn optimizer_labels(list: &[OptimizerConfig]) -> Vec<String> {
    list.iter()
        .enumerate()
        .map(|(i, o)| {
            let name = o.kind.to_string();
            if list.iter().filter(|p| p.kind == o.kind).count() > 1 {
                format!("{name}#{i}")
            } else {
                name
            }
        })
        .collect()
}

fn job_optimizer(cfg: &ExperimentConfig, seed: u64, cache: &Cache, out: &mut JobOutput) -> StageResult<()> {
    let or_default = |list: &[OptimizerConfig], fallback: &OptimizerConfig| {
        if list.is_empty() {
            vec![*fallback]
        } else {
            list.to_vec()
        }
    };
    let victims = or_default(&cfg.optimizer.victim, &cfg.victim);
    let retrains = or_default(&cfg.optimizer.retrain, &cfg.retrain);
    let victim_labels = optimizer_labels(&victims);
    let retrain_labels = optimizer_labels(&retrains);
    let data = prepare_data(&cfg.data, &[], &cfg.model, seed).stage("data")?;
    for (vopt, vlabel) in victims.iter().zip(&victim_labels) {
        let victim = train_victim(&data, &cfg.model, vopt, seed, cache).stage("victim")?;
        out.victim(seed, vlabel, &victim);
        let ctx = prepare_store(&data, &victim, cfg.selection.checkpoints, cfg.selection.k, seed, cache)
            .stage("store")?;
        for method in [Method::Select, Method::Random] {
            let sel = run_method(&ctx, &cfg.selection, cfg.selection.m, method, seed, cache).stage("select")?;
            for (ropt, rlabel) in retrains.iter().zip(&retrain_labels) {
                let metrics = evaluate_selection(cfg, &data, &ctx, &victim, &sel, ropt, seed).stage("retrain")?;
                out.push(
                    method.as_str(),
                    seed,
                    &[("victim_optimizer", vlabel.clone()), ("retrain_optimizer", rlabel.clone())],
                    metrics,
                );
            }
        }
    }
    Ok(())
}

/// Containment and exact transport distance of `recovered` as it is replaced,
/// step by step, with documents from `reference`, averaged over trials.
/// Returns one `(fraction, containment, ot)` triple per step.
pub fn replacement_curve(
    recovered: &DocumentSet,
    reference: &DocumentSet,
    embed_fn: &dyn Fn(&DocumentSet) -> Result<EmbeddingSet>,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let s = recovered.len();
    if s == 0 || reference.len() < s || steps == 0 || trials == 0 {
        return Err(Error::invalid(
            "replacement needs a non-empty recovered set no larger than the reference",
        ));
    }
    let exact = OtConfig {
        mode: OtMode::Exact,
        ..OtConfig::default()
    };
    let reference_emb = embed_fn(reference)?;
    let mut sums = vec![(0.0, 0.0); steps + 1];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("ablation{trial}")));
        let mut slots: Vec<usize> = (0..s).collect();
        slots.shuffle(&mut rng);
        let donors = rand::seq::index::sample(&mut rng, reference.len(), s).into_vec();
        for (step, acc) in sums.iter_mut().enumerate() {
            let replaced = (step * s + steps / 2) / steps;
            let mut docs = recovered.docs().to_vec();
            for (&slot, &donor) in slots[..replaced].iter().zip(&donors) {
                docs[slot] = reference.docs()[donor].clone();
            }
            let mixed = DocumentSet::from_texts(docs.into_iter().map(|d| (d.text, d.label)));
            acc.0 += vocab_containment(&mixed, reference)?;
            acc.1 += ot_distance(&embed_fn(&mixed)?, &reference_emb, &exact)?.distance;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (c, o))| (i as f64 / steps as f64, c / trials as f64, o / trials as f64))
        .collect())
}

fn job_ablation(cfg: &ExperimentConfig, seed: u64, cache: &Cache, out: &mut JobOutput) -> StageResult<()> {
    let data = prepare_data(&cfg.data, &[], &cfg.model, seed).stage("data")?;
    let victim = train_victim(&data, &cfg.model, &cfg.victim, seed, cache).stage("victim")?;
    out.victim(seed, "", &victim);
    let ctx = prepare_store(&data, &victim, cfg.selection.checkpoints, cfg.selection.k, seed, cache)
        .stage("store")?;
    let sel = run_method(&ctx, &cfg.selection, cfg.selection.m, Method::Select, seed, cache).stage("select")?;
    let s = sel.indices.len().min(cfg.ot_sample);
    let recovered = data.pool.documents.subset(&sel.indices[..s]).stage("metrics")?;
    let reference_size = (2 * s).min(data.train.len());
    let reference = data
        .train
        .subset(&sample_positions(data.train.len(), reference_size, derive_seed(seed, "reference")))
        .stage("metrics")?;
    let embed_fn = |d: &DocumentSet| embed(d, &data.vocab, &victim.theta0, data.seq_len);
    let curve = replacement_curve(
        &recovered,
        &reference,
        &embed_fn,
        cfg.metric_ablation.steps,
        cfg.metric_ablation.trials,
        seed,
    )
    .stage("metrics")?;
    for (fraction, containment, ot) in curve {
        let metrics = RowMetrics {
            vocab_containment: Some(containment),
            ot_distance: Some(ot),
            ot_mode: Some(OtMode::Exact),
            ot_converged: Some(true),
            ..RowMetrics::default()
        };
        out.push(Method::Select.as_str(), seed, &[("replace_fraction", fmt_f(fraction))], metrics);
    }
    Ok(())
}

/// Series of aggregate means, one per method, against a numeric group key.
fn series_by(aggregates: &[AggregateRow], key: &str, metric: &str) -> Vec<Series> {
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for a in aggregates {
        let (Some(x), Some(&y)) = (a.group.get(key).and_then(|v| v.parse::<f64>().ok()), a.mean.get(metric)) else {
            continue;
        };
        if !by_method.contains_key(a.method.as_str()) {
            order.push(&a.method);
        }
        by_method.entry(&a.method).or_default().push((x, y));
    }
    order
        .into_iter()
        .map(|m| {
            let mut points = by_method.remove(m).unwrap_or_default();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: m.to_string(),
                points,
            }
        })
        .collect()
}

fn figure(name: &str, x: &str, y: &str, series: Vec<Series>) -> Figure {
    Figure {
        name: name.into(),
        x_label: x.into(),
        y_label: y.into(),
        series,
    }
}

fn figures_for(cfg: &ExperimentConfig, aggregates: &[AggregateRow]) -> Vec<Figure> {
    let utility = utility_metric(cfg.data.task());
    match cfg.kind {
        ExperimentKind::Pipeline => {
            let pts = |metric: &str| {
                aggregates
                    .iter()
                    .filter_map(|a| a.mean.get(metric).map(|&y| Series {
                        name: a.method.clone(),
                        points: vec![(0.0, y)],
                    }))
                    .collect()
            };
            vec![
                figure("methods_utility", "run", utility, pts(utility)),
                figure("methods_ot", "run", "ot_distance", pts("ot_distance")),
            ]
        }
        ExperimentKind::Scaling => vec![figure("scaling", "M", utility, series_by(aggregates, "M", utility))],
        ExperimentKind::Leakage => vec![
            figure("leakage_utility", "leak_fraction", utility, series_by(aggregates, "leak_fraction", utility)),
            figure("leakage_ot", "leak_fraction", "ot_distance", series_by(aggregates, "leak_fraction", "ot_distance")),
        ],
        ExperimentKind::Crossseed => {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for a in aggregates {
                if let (Some(t), Some(s), Some(&y)) = (a.group.get("task"), a.group.get("seed_dataset"), a.mean.get(utility)) {
                    series
                        .entry(format!("task{t}"))
                        .or_default()
                        .push((s.parse().unwrap_or(0.0), y));
                }
            }
            let series = series
                .into_iter()
                .map(|(name, points)| Series { name, points })
                .collect();
            vec![figure("crossseed", "seed_dataset", utility, series)]
        }
        ExperimentKind::ProjectionDim => vec![figure("projection_dim", "k", utility, series_by(aggregates, "k", utility))],
        ExperimentKind::Optimizer => {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            let retrains: Vec<String> = {
                let mut v: Vec<String> = aggregates
                    .iter()
                    .filter_map(|a| a.group.get("retrain_optimizer").cloned())
                    .collect();
                v.dedup();
                v
            };
            for a in aggregates {
                if let (Some(v), Some(r), Some(&y)) = (
                    a.group.get("victim_optimizer"),
                    a.group.get("retrain_optimizer"),
                    a.mean.get(utility),
                ) {
                    let x = retrains.iter().position(|q| q == r).unwrap_or(0) as f64;
                    series.entry(format!("{}/{v}", a.method)).or_default().push((x, y));
                }
            }
            let series = series
                .into_iter()
                .map(|(name, points)| Series { name, points })
                .collect();
            vec![figure("optimizer", "retrain_optimizer", utility, series)]
        }
        ExperimentKind::MetricAblation => vec![
            figure(
                "ablation_containment",
                "replace_fraction",
                "vocab_containment",
                series_by(aggregates, "replace_fraction", "vocab_containment"),
            ),
            figure(
                "ablation_ot",
                "replace_fraction",
                "ot_distance",
                series_by(aggregates, "replace_fraction", "ot_distance"),
            ),
        ],
    }
}
