//! `selectkit`: run the selection pipeline stage by stage, or whole
//! experiment grids, from the command line.
//!
//! Stage subcommands share a working directory (`--out`). `train-victim`
//! fills it with the data splits, vocabulary and both checkpoints; later
//! stages read what earlier ones wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use selectkit_core::corpus::{load_jsonl, tokenize_all, write_jsonl, DocumentSet, Vocab};
use selectkit_core::gradstore::{build_store, direction, GradientStore, Projection, StoreOptions, DEFAULT_CHUNK_ROWS};
use selectkit_core::harness::{self, derive_seed, sample_positions, Cache, ExperimentConfig, ExperimentKind};
use selectkit_core::metrics::{embed, ot_distance, retrain_and_eval, vocab_containment, EmbeddingSet};
use selectkit_core::model::{
    evaluate, examples, load_checkpoint, save_checkpoint, Example, ModelParams, Target, Task,
};
use selectkit_core::selector::{
    autolabel, select_baseline, select_batch, select_greedy, synth_checkpoints, Method, ScoringRule,
    SelectionResult,
};

#[derive(Parser, Debug)]
#[command(name = "selectkit", version, about = "Recover finetuning data from two checkpoints")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replaces the first configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent experiment jobs.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prepare data and train the victim from the base model.
    TrainVictim,
    /// Pseudolabel the seed pool with the victim.
    Autolabel,
    /// Project per-example last-layer gradients into a store.
    BuildStore {
        /// Synthetic checkpoints P.
        #[arg(long)]
        checkpoints: Option<usize>,
        /// Projection dimension.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Select documents from the store.
    Select {
        #[arg(long, default_value = "select")]
        method: Method,
        /// Number of documents.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        rule: Option<ScoringRule>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Retrain the base model on a selection and evaluate it.
    Retrain {
        #[arg(long, default_value = "select")]
        method: Method,
    },
    /// Containment and transport distance of a selection to a reference set.
    Metrics {
        #[arg(long, default_value = "select")]
        method: Method,
        /// Reference JSONL; the victim's training split by default.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run a full experiment grid and write the report bundle.
    Experiment { kind: ExperimentKind },
}

/// Facts about the working directory recorded by `train-victim`.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    task: Task,
    num_classes: usize,
    seq_len: usize,
    seed: u64,
}

struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn need(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} is missing; run `selectkit {stage}` first", p.display());
        }
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", p.display()))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: &str) -> Result<T> {
        let p = self.need(name, stage)?;
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    fn info(&self) -> Result<RunInfo> {
        self.read_json("run.json", "train-victim")
    }

    fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::load(self.need("vocab.json", "train-victim")?)?)
    }

    fn checkpoint(&self, name: &str) -> Result<ModelParams> {
        Ok(load_checkpoint(self.need(name, "train-victim")?)?)
    }

    fn docs(&self, name: &str) -> Result<DocumentSet> {
        Ok(load_jsonl(self.need(name, "train-victim")?)?)
    }

    fn labeled(&self, name: &str, info: &RunInfo, vocab: &Vocab, model: &ModelParams) -> Result<Vec<Example>> {
        Ok(examples(&self.docs(name)?, vocab, info.seq_len, &model.config)?)
    }

    /// Seed pool with pseudolabel targets.
    fn pool_examples(&self, info: &RunInfo, vocab: &Vocab) -> Result<Vec<Example>> {
        let pool = self.docs("pool.jsonl")?;
        let labels: Vec<Option<usize>> = self.read_json("pseudolabels.json", "autolabel")?;
        if labels.len() != pool.len() {
            bail!("pseudolabels.json has {} entries for {} pool documents", labels.len(), pool.len());
        }
        Ok(tokenize_all(&pool, vocab, info.seq_len)
            .into_iter()
            .zip(labels)
            .map(|(seq, label)| Example {
                seq,
                target: label.map_or(Target::NextToken, Target::Class),
            })
            .collect())
    }

    fn selection(&self, method: Method) -> Result<SelectionResult> {
        self.read_json(&format!("selection-{}.json", method.as_str()), "select")
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cfg.seeds.first_mut() {
            Some(first) => *first = seed,
            None => cfg.seeds.push(seed),
        }
    }
    if let Some(p) = cli.parallel {
        cfg.parallel = p;
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seeds.first().copied().context("the configuration lists no seeds")
}

fn print_eval(label: &str, m: &selectkit_core::model::EvalMetrics) {
    match (m.accuracy, m.perplexity) {
        (Some(a), _) => println!("{label}: accuracy {a:.4}, mean loss {:.4}", m.mean_loss),
        (_, Some(p)) => println!("{label}: perplexity {p:.4}, mean loss {:.4}", m.mean_loss),
        _ => println!("{label}: mean loss {:.4}", m.mean_loss),
    }
}

fn train_victim_cmd(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let seed = first_seed(cfg)?;
    let data = harness::prepare_data(&cfg.data, &[], &cfg.model, seed)?;
    let victim = harness::train_victim(&data, &cfg.model, &cfg.victim, seed, &Cache::disabled())?;
    data.vocab.save(ws.path("vocab.json"))?;
    write_jsonl(&data.train, ws.path("train.jsonl"))?;
    write_jsonl(&data.validation, ws.path("validation.jsonl"))?;
    write_jsonl(&data.test, ws.path("test.jsonl"))?;
    write_jsonl(&data.pool.documents, ws.path("pool.jsonl"))?;
    save_checkpoint(&victim.theta0, ws.path("theta0.selc"))?;
    save_checkpoint(&victim.theta_f, ws.path("theta_f.selc"))?;
    let info = RunInfo {
        task: data.task,
        num_classes: data.num_classes,
        seq_len: data.seq_len,
        seed,
    };
    ws.write_json("run.json", &info)?;
    println!(
        "{} train / {} validation / {} test / {} pool documents, vocabulary {}",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.pool.documents.len(),
        data.vocab.len()
    );
    let test = data.examples(&data.test)?;
    print_eval("base model", &evaluate(&victim.theta0, &test)?);
    print_eval("victim", &evaluate(&victim.theta_f, &test)?);
    Ok(())
}

fn autolabel_cmd(ws: &Workspace) -> Result<()> {
    let info = ws.info()?;
    let vocab = ws.vocab()?;
    let theta_f = ws.checkpoint("theta_f.selc")?;
    let seqs = tokenize_all(&ws.docs("pool.jsonl")?, &vocab, info.seq_len);
    let labels: Vec<Option<usize>> = autolabel(&seqs, &theta_f)?
        .into_iter()
        .map(|t| match t {
            Target::Class(c) => Some(c),
            Target::NextToken => None,
        })
        .collect();
    ws.write_json("pseudolabels.json", &labels)?;
    if info.task == Task::Classification {
        let mut hist = vec![0usize; info.num_classes];
        labels.iter().flatten().for_each(|&c| hist[c] += 1);
        println!("pseudolabel counts per class: {hist:?}");
    } else {
        println!("next-token pool: {} documents keep their own tokens as targets", labels.len());
    }
    Ok(())
}

fn build_store_cmd(ws: &Workspace, cfg: &ExperimentConfig, checkpoints: Option<usize>, k: Option<usize>) -> Result<()> {
    let info = ws.info()?;
    let vocab = ws.vocab()?;
    let theta0 = ws.checkpoint("theta0.selc")?;
    let theta_f = ws.checkpoint("theta_f.selc")?;
    let pool = ws.pool_examples(&info, &vocab)?;
    let p = checkpoints.unwrap_or(cfg.selection.checkpoints);
    let k = k.unwrap_or(cfg.selection.k);
    let schedule = synth_checkpoints(&theta0, &theta_f, p)?;
    let proj = Projection::new(theta_f.config.head_len(), k, derive_seed(info.seed, "projection"))?;
    let path = ws.path("store.selg");
    let opts = StoreOptions {
        projection: proj,
        chunk_rows: DEFAULT_CHUNK_ROWS,
        path: Some(&path),
    };
    let store = build_store(&schedule.checkpoints, &theta_f, &pool, &opts)?;
    let dirs: Vec<Vec<f32>> = schedule
        .checkpoints
        .iter()
        .map(|c| direction(c, &theta_f, &proj))
        .collect::<selectkit_core::Result<_>>()?;
    ws.write_json("directions.json", &dirs)?;
    println!(
        "store: {} examples × {} checkpoints × k = {} (input dimension {})",
        store.num_examples(),
        store.num_checkpoints(),
        store.k(),
        proj.input_dim
    );
    Ok(())
}

fn select_cmd(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    method: Method,
    m: Option<usize>,
    rule: Option<ScoringRule>,
    batch_size: Option<usize>,
) -> Result<()> {
    let info = ws.info()?;
    let store = GradientStore::load(ws.need("store.selg", "build-store")?)?;
    let dirs: Vec<Vec<f32>> = ws.read_json("directions.json", "build-store")?;
    let m = m.unwrap_or(cfg.selection.m);
    let rule = rule.unwrap_or(cfg.selection.rule);
    let result = match method {
        Method::Select => select_greedy(&store, &dirs, m, rule)?,
        Method::SelectBatch => select_batch(&store, &dirs, m, batch_size.unwrap_or(cfg.selection.batch_size))?,
        other => select_baseline(&store, &dirs, m, other, derive_seed(info.seed, "random_baseline"))?,
    };
    ws.write_json(&format!("selection-{}.json", method.as_str()), &result)?;
    let head: Vec<String> = result.indices.iter().take(10).map(usize::to_string).collect();
    println!(
        "{}: selected {} of {} (first: {}{})",
        method.as_str(),
        result.indices.len(),
        store.num_examples(),
        head.join(", "),
        if result.indices.len() > 10 { ", ..." } else { "" }
    );
    Ok(())
}

fn retrain_cmd(ws: &Workspace, cfg: &ExperimentConfig, method: Method) -> Result<()> {
    let info = ws.info()?;
    let vocab = ws.vocab()?;
    let theta0 = ws.checkpoint("theta0.selc")?;
    let pool = ws.pool_examples(&info, &vocab)?;
    let sel = ws.selection(method)?;
    let selected: Vec<Example> = sel
        .indices
        .iter()
        .map(|&i| pool.get(i).cloned().with_context(|| format!("selection index {i} is outside the pool")))
        .collect::<Result<_>>()?;
    let test = ws.labeled("test.jsonl", &info, &vocab, &theta0)?;
    let validation = ws.labeled("validation.jsonl", &info, &vocab, &theta0)?;
    let opt = selectkit_core::model::OptimizerConfig {
        seed: derive_seed(info.seed, "retrain"),
        ..cfg.retrain
    };
    let eval = retrain_and_eval(&theta0, &selected, &opt, &test, &validation)?;
    ws.write_json(&format!("retrain-{}.json", method.as_str()), &eval)?;
    print_eval(&format!("retrained on {}", method.as_str()), &eval);
    Ok(())
}

fn sampled(docs: &DocumentSet, vocab: &Vocab, base: &ModelParams, seq_len: usize, cap: usize, seed: u64) -> Result<EmbeddingSet> {
    let e = embed(docs, vocab, base, seq_len)?;
    Ok(e.subset(&sample_positions(e.len(), cap, seed))?)
}

fn metrics_cmd(ws: &Workspace, cfg: &ExperimentConfig, method: Method, reference: Option<&Path>) -> Result<()> {
    let info = ws.info()?;
    let vocab = ws.vocab()?;
    let theta0 = ws.checkpoint("theta0.selc")?;
    let sel = ws.selection(method)?;
    let chosen = ws.docs("pool.jsonl")?.subset(&sel.indices)?;
    let reference = match reference {
        Some(p) => load_jsonl(p)?,
        None => ws.docs("train.jsonl")?,
    };
    let containment = vocab_containment(&chosen, &reference)?;
    let ea = sampled(&chosen, &vocab, &theta0, info.seq_len, cfg.ot_sample, derive_seed(info.seed, "ot_selected"))?;
    let eb = sampled(&reference, &vocab, &theta0, info.seq_len, cfg.ot_sample, derive_seed(info.seed, "ot_true"))?;
    let ot = ot_distance(&ea, &eb, &cfg.ot)?;
    #[derive(Serialize)]
    struct Out {
        vocab_containment: f64,
        ot: selectkit_core::metrics::OtResult,
    }
    ws.write_json(&format!("metrics-{}.json", method.as_str()), &Out { vocab_containment: containment, ot: ot.clone() })?;
    println!(
        "{}: containment {containment:.4}, OT distance {:.4} ({:?}{})",
        method.as_str(),
        ot.distance,
        ot.mode,
        if ot.converged { "" } else { ", not converged" }
    );
    Ok(())
}

fn experiment_cmd(cli: &Cli, mut cfg: ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    cfg.kind = kind;
    cfg.out_dir = Some(cli.out.clone());
    let bundle = harness::run(&cfg)?;
    for a in &bundle.aggregates {
        let group: Vec<String> = a.group.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let metrics: Vec<String> = a.mean.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("{:14} {:24} {}", a.method, group.join(" "), metrics.join(", "));
    }
    for f in &bundle.failures {
        eprintln!("seed {} failed at {}: {}", f.seed, f.stage, f.message);
    }
    println!("report written to {}", cli.out.display());
    if !bundle.failures.is_empty() && bundle.rows.is_empty() {
        bail!("every job failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    cfg.validate()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ws = Workspace { dir: cli.out.clone() };
    match &cli.command {
        Command::TrainVictim => train_victim_cmd(&ws, &cfg),
        Command::Autolabel => autolabel_cmd(&ws),
        Command::BuildStore { checkpoints, k } => build_store_cmd(&ws, &cfg, *checkpoints, *k),
        Command::Select {
            method,
            m,
            rule,
            batch_size,
        } => select_cmd(&ws, &cfg, *method, *m, *rule, *batch_size),
        Command::Retrain { method } => retrain_cmd(&ws, &cfg, *method),
        Command::Metrics { method, reference } => metrics_cmd(&ws, &cfg, *method, reference.as_deref()),
        Command::Experiment { kind } => experiment_cmd(&cli, cfg.clone(), *kind),
    }
}
