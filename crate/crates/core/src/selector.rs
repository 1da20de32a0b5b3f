//! Synthetic checkpoints, autolabeling, greedy gradient-alignment selection
//! and the comparison baselines.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::gradstore::{GradientStore, RowSource};
use crate::model::{argmax, forward, ModelParams, Target, Task};

pub const DEFAULT_CHECKPOINTS: usize = 1;
pub const MAX_CHECKPOINTS: usize = 8;

/// Linear interpolations `(1 - j/P) θ₀ + (j/P) θ_f` for `j = 0..P`.
#[derive(Clone, Debug)]
pub struct CheckpointSchedule {
    pub checkpoints: Vec<ModelParams>,
}

impl CheckpointSchedule {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

pub fn synth_checkpoints(theta0: &ModelParams, theta_f: &ModelParams, p: usize) -> Result<CheckpointSchedule> {
    theta0.check_compatible(theta_f)?;
    if p == 0 {
        return Err(Error::invalid("number of synthetic checkpoints must be at least 1"));
    }
    let checkpoints = (0..p)
        .map(|j| {
            let t = j as f64 / p as f64;
            let mut out = theta0.clone();
            for (o, f) in out.blocks_mut().into_iter().zip(theta_f.blocks()) {
                for (x, &y) in o.iter_mut().zip(f) {
                    *x = ((1.0 - t) * *x as f64 + t * y as f64) as f32;
                }
            }
            out
        })
        .collect();
    Ok(CheckpointSchedule { checkpoints })
}

/// Pseudolabels from the final model: the most probable class (lowest index
/// on ties) for classification, the sequence itself for next-token models.
pub fn autolabel(pool: &[TokenSeq], theta_f: &ModelParams) -> Result<Vec<Target>> {
    pool.iter()
        .map(|x| match theta_f.config.task {
            Task::Classification => Ok(Target::Class(argmax(&forward(theta_f, x)?.probs))),
            Task::NextToken => Ok(Target::NextToken),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// `Σ_j ⟨g_i^j, d_j⟩`; ignores the running sums, so equals top-k.
    Dot,
    /// `Σ_j cos(S_j + g_i^j, d_j)`.
    #[default]
    CosineSum,
    /// `Σ_j ⟨g_i^j, d_j - S_j⟩`.
    Residual,
}

impl fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringRule::Dot => "dot",
            ScoringRule::CosineSum => "cosine_sum",
            ScoringRule::Residual => "residual",
        })
    }
}

impl FromStr for ScoringRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "dot" => Ok(ScoringRule::Dot),
            "cosine_sum" | "cosine" => Ok(ScoringRule::CosineSum),
            "residual" => Ok(ScoringRule::Residual),
            _ => Err(Error::invalid(format!("unknown scoring rule {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Select,
    SelectBatch,
    Random,
    Topk,
    TopkBalanced,
    Pmin,
    Pmax,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Select,
        Method::SelectBatch,
        Method::Random,
        Method::Topk,
        Method::TopkBalanced,
        Method::Pmin,
        Method::Pmax,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Select => "select",
            Method::SelectBatch => "select_batch",
            Method::Random => "random",
            Method::Topk => "topk",
            Method::TopkBalanced => "topk_balanced",
            Method::Pmin => "pmin",
            Method::Pmax => "pmax",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown selection method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub rule: Option<ScoringRule>,
    /// Seed-pool positions in selection order.
    pub indices: Vec<usize>,
    /// Score of each pick when it was made.
    pub step_scores: Vec<f64>,
}

fn check_inputs(store: &GradientStore, dirs: &[Vec<f32>], m: usize) -> Result<()> {
    if m > store.num_examples() {
        return Err(Error::invalid(format!(
            "cannot select {m} of {} examples",
            store.num_examples()
        )));
    }
    if dirs.len() != store.num_checkpoints() {
        return Err(Error::invalid(format!(
            "{} directions for {} checkpoints",
            dirs.len(),
            store.num_checkpoints()
        )));
    }
    if let Some(d) = dirs.iter().find(|d| d.len() != store.k()) {
        return Err(Error::invalid(format!(
            "direction dimension {} does not match store k = {}",
            d.len(),
            store.k()
        )));
    }
    Ok(())
}

/// f32 dot with independent lanes so the loop vectorizes; summed in f64.
pub(crate) fn fast_dot(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 16;
    let mut acc = [0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().map(|&v| v as f64).sum::<f64>() + tail
}

/// Orthonormal basis (rows of length `k`) of the projection's range, when
/// that range is smaller than `k`. Projected rows lie in this span, so their
/// pairwise inner products can be taken between basis coordinates instead.
fn projection_basis(store: &GradientStore) -> Option<(Vec<f32>, usize)> {
    let header = &store.header;
    let (r, k) = (header.input_dim, header.k);
    if r == 0 || 2 * r > k {
        return None;
    }
    let proj = header.projection();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    for row in 0..r {
        let mut v: Vec<f64> = (0..k).map(|c| proj.sign(row, c) as f64).collect();
        // two Gram-Schmidt passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 * (k as f64).sqrt() {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let dim = basis.len();
    Some((basis.into_iter().flatten().map(|x| x as f32).collect(), dim))
}

/// Block rows expressed in basis coordinates.
fn compress(rows: &[f32], k: usize, basis: &[f32], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() / k * dim);
    for row in rows.chunks_exact(k) {
        out.extend(basis.chunks_exact(k).map(|b| fast_dot(row, b) as f32));
    }
    out
}

/// Running-sum bookkeeping for one checkpoint block.
struct BlockState<'a> {
    rows: std::borrow::Cow<'a, [f32]>,
    k: usize,
    /// ⟨g_i, d⟩
    align: Vec<f64>,
    /// ‖g_i‖²
    norm2: Vec<f64>,
    /// ⟨S, g_i⟩
    sum_dot: Vec<f64>,
    /// ⟨S, d⟩
    sum_dir: f64,
    /// ‖S‖²
    sum_norm2: f64,
    dir_norm: f64,
}

impl<'a> BlockState<'a> {
    fn new(
        store: &'a GradientStore,
        j: usize,
        dir: &[f32],
        basis: Option<&(Vec<f32>, usize)>,
        track_pairs: bool,
    ) -> Result<Self> {
        let k = store.k();
        let mut align = Vec::with_capacity(store.num_examples());
        let mut norm2 = Vec::with_capacity(store.num_examples());
        store.for_each_rows(j, &mut |_, chunk| {
            for row in chunk.chunks_exact(k) {
                align.push(fast_dot(row, dir));
                norm2.push(fast_dot(row, row));
            }
        })?;
        let (rows, k) = match basis {
            Some((b, dim)) if track_pairs => (std::borrow::Cow::Owned(compress(store.block(j), k, b, *dim)), *dim),
            _ => (std::borrow::Cow::Borrowed(store.block(j)), k),
        };
        Ok(Self {
            rows,
            k,
            sum_dot: vec![0.0; align.len()],
            align,
            norm2,
            sum_dir: 0.0,
            sum_norm2: 0.0,
            dir_norm: fast_dot(dir, dir).sqrt(),
        })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    /// `cos(S + g_i, d)`; `None` when `S + g_i` is the zero vector.
    fn cosine(&self, i: usize) -> Option<f64> {
        if self.dir_norm == 0.0 {
            return Some(0.0);
        }
        let n2 = self.sum_norm2 + 2.0 * self.sum_dot[i] + self.norm2[i];
        let scale = self.sum_norm2 + self.norm2[i];
        if n2 <= 1e-12 * scale || n2 <= f64::MIN_POSITIVE {
            return None;
        }
        Some((self.sum_dir + self.align[i]) / (n2.sqrt() * self.dir_norm))
    }

    fn add(&mut self, pick: usize, track_pairs: bool) {
        self.sum_dir += self.align[pick];
        self.sum_norm2 += 2.0 * self.sum_dot[pick] + self.norm2[pick];
        if track_pairs {
            let g = self.row(pick).to_vec();
            for i in 0..self.sum_dot.len() {
                self.sum_dot[i] += fast_dot(&g, self.row(i));
            }
        }
    }
}

struct Greedy<'a> {
    blocks: Vec<BlockState<'a>>,
    rule: ScoringRule,
    taken: Vec<bool>,
}

impl<'a> Greedy<'a> {
    fn new(store: &'a GradientStore, dirs: &[Vec<f32>], rule: ScoringRule) -> Result<Self> {
        let track_pairs = rule != ScoringRule::Dot;
        let basis = if track_pairs { projection_basis(store) } else { None };
        let blocks = dirs
            .iter()
            .enumerate()
            .map(|(j, d)| BlockState::new(store, j, d, basis.as_ref(), track_pairs))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            rule,
            taken: vec![false; store.num_examples()],
        })
    }

    fn score(&self, i: usize) -> f64 {
        match self.rule {
            ScoringRule::Dot => self.blocks.iter().map(|b| b.align[i]).sum(),
            ScoringRule::Residual => self.blocks.iter().map(|b| b.align[i] - b.sum_dot[i]).sum(),
            ScoringRule::CosineSum => {
                let mut total = 0.0;
                for b in &self.blocks {
                    match b.cosine(i) {
                        Some(c) => total += c,
                        None => return f64::NEG_INFINITY,
                    }
                }
                total
            }
        }
    }

    /// Best untaken candidate in `range`; lowest index wins ties.
    fn best_in(&self, range: std::ops::Range<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in range {
            if self.taken[i] {
                continue;
            }
            let s = self.score(i);
            match best {
                Some((_, bs)) if !(s > bs) => {}
                _ => best = Some((i, s)),
            }
        }
        best
    }

    fn take(&mut self, i: usize) {
        self.taken[i] = true;
        let track = self.rule != ScoringRule::Dot;
        for b in &mut self.blocks {
            b.add(i, track);
        }
    }
}

/// Greedy selection of `m` examples, maintaining per-checkpoint running sums
/// of the selected rows and picking the best-scoring remaining example at each step.
pub fn select_greedy(
    store: &GradientStore,
    dirs: &[Vec<f32>],
    m: usize,
    rule: ScoringRule,
) -> Result<SelectionResult> {
    check_inputs(store, dirs, m)?;
    let mut g = Greedy::new(store, dirs, rule)?;
    let n = store.num_examples();
    let mut indices = Vec::with_capacity(m);
    let mut step_scores = Vec::with_capacity(m);
    for _ in 0..m {
        let (i, s) = g.best_in(0..n).expect("m <= n leaves a candidate");
        g.take(i);
        indices.push(i);
        step_scores.push(s);
    }
    Ok(SelectionResult {
        method: Method::Select,
        rule: Some(rule),
        indices,
        step_scores,
    })
}

/// Windowed greedy: candidates are visited in index windows of `batch_size`
/// and each window contributes up to `ceil(m * batch_size / n)` cosine-sum
/// picks, with running sums carried from window to window.
pub fn select_batch(
    store: &GradientStore,
    dirs: &[Vec<f32>],
    m: usize,
    batch_size: usize,
) -> Result<SelectionResult> {
    check_inputs(store, dirs, m)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let n = store.num_examples();
    let mut g = Greedy::new(store, dirs, ScoringRule::CosineSum)?;
    let mut indices = Vec::with_capacity(m);
    let mut step_scores = Vec::with_capacity(m);
    if n > 0 {
        let quota = (m * batch_size).div_ceil(n);
        let mut start = 0;
        while start < n && indices.len() < m {
            let end = (start + batch_size).min(n);
            for _ in 0..quota.min(end - start) {
                if indices.len() == m {
                    break;
                }
                let (i, s) = g.best_in(start..end).expect("window has a candidate");
                g.take(i);
                indices.push(i);
                step_scores.push(s);
            }
            start = end;
        }
    }
    Ok(SelectionResult {
        method: Method::SelectBatch,
        rule: Some(ScoringRule::CosineSum),
        indices,
        step_scores,
    })
}

/// Static alignment `Σ_j ⟨g_i^j, d_j⟩` for every example.
pub fn static_scores(store: &GradientStore, dirs: &[Vec<f32>]) -> Result<Vec<f64>> {
    check_inputs(store, dirs, 0)?;
    let mut scores = vec![0.0; store.num_examples()];
    for (j, d) in dirs.iter().enumerate() {
        for (i, s) in scores.iter_mut().enumerate() {
            *s += fast_dot(store.row(j, i), d);
        }
    }
    Ok(scores)
}

/// Positions sorted by descending score, ascending index on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn result_from(method: Method, indices: Vec<usize>, scores: &[f64]) -> SelectionResult {
    let step_scores = indices.iter().map(|&i| scores[i]).collect();
    SelectionResult {
        method,
        rule: None,
        indices,
        step_scores,
    }
}

/// Takes the top `ceil(m/C)` of every pseudolabel class by static score and
/// keeps the best `m` of that union. If the union is smaller than `m`, the
/// rest comes from the global ranking.
pub fn select_topk_balanced(
    store: &GradientStore,
    dirs: &[Vec<f32>],
    m: usize,
    num_classes: usize,
) -> Result<SelectionResult> {
    check_inputs(store, dirs, m)?;
    if num_classes == 0 {
        return Err(Error::invalid("topk_balanced needs at least one class"));
    }
    let labels: Vec<usize> = store
        .pseudolabels
        .iter()
        .map(|l| l.ok_or_else(|| Error::invalid("topk_balanced requires pseudolabels")))
        .collect::<Result<_>>()?;
    let scores = static_scores(store, dirs)?;
    let order = ranked(&scores);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in &order {
        if labels[i] < num_classes {
            per_class[labels[i]].push(i);
        }
    }
    let quota = m.div_ceil(num_classes);
    let mut taken = vec![false; store.num_examples()];
    for list in &per_class {
        list.iter().take(quota).for_each(|&i| taken[i] = true);
    }
    // union of the per-class heads, cut to m in global score order
    let mut indices: Vec<usize> = order.iter().copied().filter(|&i| taken[i]).take(m).collect();
    if indices.len() < m {
        log::warn!("topk_balanced: {} slots filled from the global ranking", m - indices.len());
        indices.iter().for_each(|&i| taken[i] = true);
        let fill: Vec<usize> = order.iter().copied().filter(|&i| !taken[i]).take(m - indices.len()).collect();
        indices.extend(fill);
        indices.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    Ok(result_from(Method::TopkBalanced, indices, &scores))
}

/// Random, top-k, balanced top-k, and lowest/highest final-model loss.
/// `Select` and `SelectBatch` are dispatched to their greedy counterparts
/// with default settings.
pub fn select_baseline(
    store: &GradientStore,
    dirs: &[Vec<f32>],
    m: usize,
    method: Method,
    seed: u64,
) -> Result<SelectionResult> {
    check_inputs(store, dirs, m)?;
    let n = store.num_examples();
    match method {
        Method::Random => {
            let scores = static_scores(store, dirs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let indices = rand::seq::index::sample(&mut rng, n, m).into_vec();
            Ok(result_from(Method::Random, indices, &scores))
        }
        Method::Topk => {
            let scores = static_scores(store, dirs)?;
            let indices = ranked(&scores).into_iter().take(m).collect();
            Ok(result_from(Method::Topk, indices, &scores))
        }
        Method::TopkBalanced => {
            let classes = store
                .pseudolabels
                .iter()
                .flatten()
                .max()
                .map_or(0, |&c| c + 1);
            select_topk_balanced(store, dirs, m, classes)
        }
        Method::Pmin | Method::Pmax => {
            let losses: Vec<f64> = store.final_loss.iter().map(|&l| l as f64).collect();
            let mut order: Vec<usize> = (0..n).collect();
            if method == Method::Pmin {
                order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
            } else {
                order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            }
            order.truncate(m);
            Ok(result_from(method, order, &losses))
        }
        Method::Select => select_greedy(store, dirs, m, ScoringRule::CosineSum),
        Method::SelectBatch => select_batch(store, dirs, m, 64),
    }
}
