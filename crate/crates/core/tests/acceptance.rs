//! Acceptance suite. Each test prints one `[acceptance N] PASS|FAIL` line and
//! asserts the criterion. Tests hold a shared lock so the reported runtimes
//! are not inflated by each other.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selectkit_core::corpus::{tokenize_all, TokenSeq};
use selectkit_core::gradstore::{last_layer_grad, GradientStore, Projection};
use selectkit_core::harness::{self, ExperimentConfig, ReportBundle};
use selectkit_core::metrics::{cost_matrix, exact_transport, sinkhorn_transport};
use selectkit_core::model::{self, init_params, load_checkpoint, save_checkpoint, ModelConfig, Params, Target, Task};
use selectkit_core::selector::{autolabel, select_baseline, select_greedy, synth_checkpoints, Method, ScoringRule};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: usize, name: &str, ok: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let within = limit.is_none_or(|l| elapsed <= l);
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0}s", l.as_secs_f64()));
    println!(
        "[acceptance {id}] {verdict} {name}: {detail} ({:.1}s{budget})",
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
    assert!(within, "criterion {id} ({name}) exceeded its time budget");
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).expect("acceptance config")
}

fn run(cfg: &ExperimentConfig) -> ReportBundle {
    let bundle = harness::run(cfg).expect("experiment");
    assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
    bundle
}

fn seq(ids: &[u32], len: usize) -> TokenSeq {
    let mut padded = ids.to_vec();
    padded.resize(len, 0);
    TokenSeq {
        ids: padded,
        valid_len: ids.len(),
    }
}

fn head_slot(q: &mut Params<f64>, i: usize) -> &mut f64 {
    let n_w = q.head_weight.len();
    if i < n_w {
        &mut q.head_weight[i]
    } else {
        &mut q.head_bias[i - n_w]
    }
}

#[test]
fn c01_gradient_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 2];
    for pair in 0..50 {
        let vocab = rng.gen_range(5..40);
        let h = rng.gen_range(2..9);
        let cfg = if pair % 2 == 0 {
            counts[0] += 1;
            ModelConfig::classification(vocab, h, rng.gen_range(2..7)).with_hidden(rng.gen_bool(0.5))
        } else {
            counts[1] += 1;
            ModelConfig::next_token(vocab, h).with_hidden(rng.gen_bool(0.5))
        };
        let p = init_params(cfg, rng.gen()).unwrap().cast::<f64>();
        let len = rng.gen_range(2..12);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect();
        let x = seq(&ids, 12);
        let target = match cfg.task {
            Task::Classification => Target::Class(rng.gen_range(0..cfg.num_classes)),
            Task::NextToken => Target::NextToken,
        };
        let analytic = last_layer_grad(&p, &x, target).unwrap();
        let mut probe = p.clone();
        let step = 1e-5;
        let numeric: Vec<f64> = (0..cfg.head_len())
            .map(|i| {
                let orig = *head_slot(&mut probe, i);
                *head_slot(&mut probe, i) = orig + step;
                let up = model::loss(&probe, &x, target).unwrap();
                *head_slot(&mut probe, i) = orig - step;
                let down = model::loss(&probe, &x, target).unwrap();
                *head_slot(&mut probe, i) = orig;
                (up - down) / (2.0 * step)
            })
            .collect();
        let err = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(err / scale);
    }
    report(
        1,
        "last-layer gradient vs central differences",
        worst < 1e-4,
        t.elapsed(),
        Some(Duration::from_secs(10)),
        &format!(
            "{} classification + {} next-token pairs, worst relative error {worst:.2e} (< 1e-4)",
            counts[0], counts[1]
        ),
    );
}

#[test]
fn c02_dot_rule_equals_topk() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=500);
        let k = rng.gen_range(1..=64);
        let p = if rng.gen_bool(0.5) { 1 } else { 3 };
        let blocks: Vec<Vec<f32>> = (0..p)
            .map(|_| (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let dirs: Vec<Vec<f32>> = (0..p)
            .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let store = GradientStore::from_blocks(blocks, k, vec![0.0; n], vec![None; n]).unwrap();
        let m = rng.gen_range(0..=n);
        let greedy: BTreeSet<usize> = select_greedy(&store, &dirs, m, ScoringRule::Dot)
            .unwrap()
            .indices
            .into_iter()
            .collect();
        let topk: BTreeSet<usize> = select_baseline(&store, &dirs, m, Method::Topk, 0)
            .unwrap()
            .indices
            .into_iter()
            .collect();
        if greedy != topk {
            mismatches += 1;
        }
    }
    report(
        2,
        "greedy dot rule selects the top-M set",
        mismatches == 0,
        t.elapsed(),
        None,
        &format!("{mismatches} of 200 instances differ"),
    );
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn c03_projection_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    // 4-class head on 4999-wide features: n = C·h + C = 20000
    let cfg = config(
        r#"{"model":{"embed_dim":4999,"max_vocab":1000},
            "victim":{"kind":"sgd","learning_rate":0.5,"epochs":10},
            "data":{"synthetic":{"train":400,"validation":100,"test":100,"pool":600}}}"#,
    );
    let data = harness::prepare_data(&cfg.data, &[], &cfg.model, 0).unwrap();
    let victim = harness::train_victim(&data, &cfg.model, &cfg.victim, 0, &harness::Cache::disabled()).unwrap();
    let n = victim.theta_f.config.head_len();
    let schedule = synth_checkpoints(&victim.theta0, &victim.theta_f, 2).unwrap();
    let theta_f = victim.theta_f.head_flat();
    let directions: Vec<Vec<f32>> = schedule
        .checkpoints
        .iter()
        .map(|c| theta_f.iter().zip(c.head_flat()).map(|(f, h)| f - h).collect())
        .collect();
    let seqs = tokenize_all(&data.pool.documents, &data.vocab, data.seq_len);
    let labels = autolabel(&seqs, &victim.theta_f).unwrap();
    let pool: Vec<(TokenSeq, Target)> = seqs.into_iter().zip(labels).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // 500 examples against each of the 2 checkpoint directions
    let picks = rand::seq::index::sample(&mut rng, pool.len(), 500).into_vec();
    let mut grads: Vec<Vec<f32>> = Vec::with_capacity(1000);
    let mut pair_dirs = Vec::with_capacity(1000);
    for (j, checkpoint) in schedule.checkpoints.iter().enumerate() {
        for &i in &picks {
            let g = last_layer_grad(checkpoint, &pool[i].0, pool[i].1).unwrap();
            grads.push(g.into_iter().map(|v| -v).collect());
            pair_dirs.push(j);
        }
    }
    let proj = Projection::new(n, 4096, 5).unwrap();
    let views: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    let pg = proj.project_batch(&views).unwrap();
    let dviews: Vec<&[f32]> = directions.iter().map(Vec::as_slice).collect();
    let pd = proj.project_batch(&dviews).unwrap();
    let (mut exact, mut projected, mut within) = (Vec::new(), Vec::new(), 0);
    for (idx, g) in grads.iter().enumerate() {
        let d = &directions[pair_dirs[idx]];
        let e = dot(g, d);
        let p = dot(&pg[idx], &pd[pair_dirs[idx]]);
        let bound = 0.1 * dot(g, g).sqrt() * dot(d, d).sqrt();
        if (p - e).abs() <= bound {
            within += 1;
        }
        exact.push(e);
        projected.push(p);
    }
    let share = within as f64 / grads.len() as f64;
    let r = pearson(&exact, &projected);
    report(
        3,
        "random projection preserves inner products",
        share >= 0.95 && r > 0.95,
        t.elapsed(),
        Some(Duration::from_secs(60)),
        &format!("n = {n}, k = 4096, {within}/1000 within 0.1‖a‖‖b‖, Pearson r = {r:.4}"),
    );
}

/// Calibrated classification toy shared by the ordering checks.
const CLASSIFICATION: &str = r#""data":{"synthetic":{"task":"classification"}}"#;

#[test]
fn c04_classification_ordering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = config(&format!(
        r#"{{"kind":"pipeline","seeds":[0,1,2],"cache":false,
            "selection":{{"M":500,"k":1024,"P":4,"methods":["select","select_batch","random","topk"]}},
            {CLASSIFICATION}}}"#
    ));
    let b = run(&cfg);
    let acc = |m: &str| b.mean(m, &[], "accuracy").unwrap();
    let (s, sb, r, tk) = (acc("select"), acc("select_batch"), acc("random"), acc("topk"));
    let ok = s >= sb && sb >= r && s >= r + 0.05 && tk < r;
    report(
        4,
        "classification ordering",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(300)),
        &format!("accuracy select {s:.4} ≥ select_batch {sb:.4} ≥ random {r:.4}, topk {tk:.4} < random"),
    );
}

#[test]
fn c05_next_token_ordering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = config(
        r#"{"kind":"pipeline","seeds":[0,1,2],"cache":false,
            "model":{"embed_dim":16},
            "selection":{"M":500,"k":512,"P":4,"methods":["select","random","topk"]},
            "data":{"synthetic":{"task":"next_token","keywords_per_topic":20,"filler_words":100,
                                 "keyword_rate":0.6,"pool_keyword_rate":0.6,"on_topic_fraction":0.25,
                                 "duplicate_fraction":0.05,"duplicate_templates":2}}}"#,
    );
    let b = run(&cfg);
    let ppl = |m: &str| b.mean(m, &[], "perplexity").unwrap();
    let (s, r, tk) = (ppl("select"), ppl("random"), ppl("topk"));
    report(
        5,
        "next-token ordering",
        s < r && r < tk,
        t.elapsed(),
        Some(Duration::from_secs(300)),
        &format!("perplexity select {s:.3} < random {r:.3} < topk {tk:.3}"),
    );
}

/// Monotone in the given sense, tolerating one adjacent inversion no larger
/// than the pooled standard deviation of the two points.
fn monotone_with_slack(values: &[(f64, f64)], increasing: bool) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        let ((a, sa), (b, sb)) = (w[0], w[1]);
        let wrong = if increasing { b < a } else { b > a };
        if wrong {
            inversions += 1;
            if (a - b).abs() > sa.max(sb) {
                return false;
            }
        }
    }
    inversions <= 1
}

#[test]
fn c06_leakage_monotonicity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = config(&format!(
        r#"{{"kind":"leakage","seeds":[0,1,2],"cache":false,
            "selection":{{"M":500,"k":1024,"P":4}},
            "leakage":{{"fractions":[0.1,0.5,0.9],"pool_size":2000,"methods":["select"]}},
            {CLASSIFICATION}}}"#
    ));
    let b = run(&cfg);
    let series = |metric: &str| -> Vec<(f64, f64)> {
        ["0.1", "0.5", "0.9"]
            .iter()
            .map(|f| {
                let g = [("leak_fraction", *f)];
                (b.mean("select", &g, metric).unwrap(), b.std("select", &g, metric).unwrap())
            })
            .collect()
    };
    let (acc, ot) = (series("accuracy"), series("ot_distance"));
    let ok = monotone_with_slack(&acc, true) && monotone_with_slack(&ot, false);
    let show = |v: &[(f64, f64)]| v.iter().map(|(m, s)| format!("{m:.4}±{s:.4}")).collect::<Vec<_>>().join(", ");
    report(
        6,
        "leakage monotonicity",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(300)),
        &format!("accuracy [{}], OT [{}]", show(&acc), show(&ot)),
    );
}

#[test]
fn c07_metric_ablation() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = config(&format!(
        r#"{{"kind":"metric_ablation","seeds":[0],"cache":false,
            "selection":{{"M":500,"k":1024,"P":4}},
            "metric_ablation":{{"steps":10,"trials":5}},
            {CLASSIFICATION}}}"#
    ));
    let b = run(&cfg);
    let mut curve: Vec<(f64, f64, f64)> = b
        .aggregates
        .iter()
        .map(|a| {
            let f: f64 = a.group["replace_fraction"].parse().unwrap();
            (f, a.mean["vocab_containment"], a.mean["ot_distance"])
        })
        .collect();
    curve.sort_by(|x, y| x.0.total_cmp(&y.0));
    let full = curve.last().map(|c| c.1).unwrap_or(0.0);
    let inversions = curve.windows(2).filter(|w| w[1].2 > w[0].2).count();
    let ok = curve.len() == 11 && full == 1.0 && inversions <= 1;
    let ots: Vec<String> = curve.iter().map(|c| format!("{:.3}", c.2)).collect();
    report(
        7,
        "metric ablation",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(120)),
        &format!(
            "containment at 100% = {full}, exact OT [{}] with {inversions} inversion(s)",
            ots.join(", ")
        ),
    );
}

#[test]
fn c08_sinkhorn_matches_exact() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dim = 4;
        let a: Vec<f32> = (0..8 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cost = cost_matrix(&a, &b, dim);
        let exact = exact_transport(&cost, 8, 8).unwrap();
        let (approx, _, _) = sinkhorn_transport(&cost, 8, 8, 0.01, 20_000).unwrap();
        worst = worst.max((approx - exact).abs() / exact);
    }
    report(
        8,
        "Sinkhorn (ε = 0.01) vs exact transport",
        worst < 0.05,
        t.elapsed(),
        Some(Duration::from_secs(10)),
        &format!("20 instances with n = m = 8, worst relative gap {worst:.2e}"),
    );
}

fn cache_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir.join("cache"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn c09_determinism_and_formats() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut problems: Vec<String> = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let make = |dir: &Path| {
        config(&format!(
            r#"{{"kind":"pipeline","seeds":[3],"out_dir":{:?},
                "selection":{{"M":40,"k":64,"P":2,"methods":["select","select_batch","random","topk"]}},
                "data":{{"synthetic":{{"train":200,"validation":50,"test":100,"pool":300}}}}}}"#,
            dir.to_str().unwrap()
        ))
    };
    let first = run(&make(dirs[0].path()));
    let second = run(&make(dirs[1].path()));
    let (fa, fb) = (cache_files(dirs[0].path()), cache_files(dirs[1].path()));
    let kinds = ["checkpoint-", "store-", "selection-"];
    for kind in kinds {
        if !fa.keys().any(|k| k.starts_with(kind)) {
            problems.push(format!("no {kind}* artifact cached"));
        }
    }
    if fa != fb {
        problems.push("cached checkpoints, stores or selections differ between runs".into());
    }
    if first.canonical_json() != second.canonical_json() {
        problems.push("reports differ between runs".into());
    }
    // a rerun served from the cache must agree with the fresh run
    let again = run(&make(dirs[0].path()));
    if again.canonical_json() != first.canonical_json() {
        problems.push("cached rerun differs".into());
    }

    let scratch = tempfile::tempdir().unwrap();
    for (name, bytes) in &fa {
        let path = dirs[0].path().join("cache").join(name);
        let copy = scratch.path().join(name);
        if name.starts_with("checkpoint-") {
            save_checkpoint(&load_checkpoint(&path).unwrap(), &copy).unwrap();
        } else if name.starts_with("store-") {
            GradientStore::load(&path).unwrap().save(&copy).unwrap();
        } else {
            continue;
        }
        if fs::read(&copy).unwrap() != *bytes {
            problems.push(format!("{name} does not round-trip bit-exactly"));
        }
        let mut corrupt = bytes.clone();
        corrupt[0] ^= 0x20;
        fs::write(&copy, &corrupt).unwrap();
        let (err, magic) = if name.starts_with("checkpoint-") {
            (load_checkpoint(&copy).unwrap_err().to_string(), "SELC")
        } else {
            (GradientStore::load(&copy).unwrap_err().to_string(), "SELG")
        };
        if !err.contains(&format!("expected \"{magic}\"")) {
            problems.push(format!("{name}: bad magic gave `{err}`"));
        }
        fs::write(&copy, &bytes[..bytes.len() / 2]).unwrap();
        let err = if name.starts_with("checkpoint-") {
            load_checkpoint(&copy).unwrap_err().to_string()
        } else {
            GradientStore::load(&copy).unwrap_err().to_string()
        };
        if !err.contains("unexpected end") {
            problems.push(format!("{name}: truncation gave `{err}`"));
        }
    }
    report(
        9,
        "determinism and file formats",
        problems.is_empty(),
        t.elapsed(),
        None,
        &if problems.is_empty() {
            format!("{} cached artifacts identical across runs, round-trips and corruption errors as specified", fa.len())
        } else {
            problems.join("; ")
        },
    );
}

#[test]
fn c10_projection_dimension() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cfg = config(&format!(
        r#"{{"kind":"projection_dim","seeds":[0,1,2],"cache":false,
            "selection":{{"M":500,"P":4}},
            "projection_dim":{{"k_list":[512,4096],"methods":["select","random"]}},
            {CLASSIFICATION}}}"#
    ));
    let b = run(&cfg);
    let acc = |m: &str, k: &str| b.mean(m, &[("k", k)], "accuracy").unwrap();
    let cells: Vec<(String, f64, f64)> = ["512", "4096"]
        .iter()
        .map(|k| (k.to_string(), acc("select", k), acc("random", k)))
        .collect();
    let ok = cells.iter().all(|(_, s, r)| s > r);
    let detail = cells
        .iter()
        .map(|(k, s, r)| format!("k = {k}: select {s:.4} vs random {r:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    report(
        10,
        "projection dimension ablation",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(300)),
        &detail,
    );
}
