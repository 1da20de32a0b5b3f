//! Recovery-quality metrics: lexical containment, optimal transport between
//! document embeddings, and retrain-then-evaluate utility.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, words, DocumentSet, Vocab};
use crate::error::{Error, Result};
use crate::model::{evaluate, train, EvalMetrics, Example, ModelParams, OptimizerConfig};

/// Largest `n * m` the exact solver accepts.
pub const EXACT_OT_MAX_ENTRIES: usize = 4_000_000;
pub const DEFAULT_SINKHORN_EPSILON: f64 = 0.05;
pub const DEFAULT_SINKHORN_ITERS: usize = 2000;
const SINKHORN_TOL: f64 = 1e-6;

fn token_set(docs: &DocumentSet) -> BTreeSet<String> {
    docs.iter().flat_map(|d| words(&d.text)).collect()
}

/// `max(|A∩B| / |A|, |A∩B| / |B|)` over the two sets' token vocabularies.
pub fn vocab_containment(a: &DocumentSet, b: &DocumentSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("vocab_containment needs two non-empty document sets"));
    }
    let ta = token_set(a);
    let tb = token_set(b);
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::invalid("a document set has no tokens"));
    }
    let common = ta.intersection(&tb).count() as f64;
    Ok((common / ta.len() as f64).max(common / tb.len() as f64))
}

/// Row-major `n × dim` matrix of unit-norm document embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub rows: Vec<f32>,
    pub dim: usize,
    pub source: String,
}

impl EmbeddingSet {
    /// Validates shape and unit row norms.
    pub fn new(rows: Vec<f32>, dim: usize, source: impl Into<String>) -> Result<Self> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(Error::invalid("embedding matrix must be non-empty with whole rows"));
        }
        for (i, r) in rows.chunks_exact(dim).enumerate() {
            let norm = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(Self {
            rows,
            dim,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at the given positions, in order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            if p >= self.len() {
                return Err(Error::invalid(format!("embedding position {p} out of range")));
            }
            rows.extend_from_slice(self.row(p));
        }
        Self::new(rows, self.dim, self.source.clone())
    }
}

/// Mean of the base model's embedding rows over each document's tokens,
/// L2-normalized.
pub fn embed(docs: &DocumentSet, vocab: &Vocab, base: &ModelParams, seq_len: usize) -> Result<EmbeddingSet> {
    let h = base.config.embed_dim;
    let mut rows = Vec::with_capacity(docs.len() * h);
    for d in docs.iter() {
        let seq = tokenize(d, vocab, seq_len);
        if seq.valid_len == 0 {
            return Err(Error::invalid(format!("document {} has no tokens to embed", d.id)));
        }
        let mut acc = vec![0f64; h];
        for &t in seq.valid() {
            let t = t as usize;
            if t >= base.config.vocab_size {
                return Err(Error::invalid(format!("token id {t} outside model vocabulary")));
            }
            for (a, &e) in acc.iter_mut().zip(&base.embedding[t * h..(t + 1) * h]) {
                *a += e as f64;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("document {} has a zero embedding", d.id)));
        }
        rows.extend(acc.iter().map(|&x| (x / norm) as f32));
    }
    EmbeddingSet::new(rows, h, "base_embedding_mean")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtMode {
    /// Exact below the size cutoff, Sinkhorn above it.
    #[default]
    Auto,
    Exact,
    Sinkhorn,
}

impl fmt::Display for OtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OtMode::Auto => "auto",
            OtMode::Exact => "exact",
            OtMode::Sinkhorn => "sinkhorn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtConfig {
    pub mode: OtMode,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            mode: OtMode::Auto,
            epsilon: DEFAULT_SINKHORN_EPSILON,
            max_iters: DEFAULT_SINKHORN_ITERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtResult {
    pub distance: f64,
    /// `Exact` or `Sinkhorn`; never `Auto`.
    pub mode: OtMode,
    pub epsilon: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Pairwise Euclidean distances between the rows of two point sets.
pub fn cost_matrix(a: &[f32], b: &[f32], dim: usize) -> Vec<f64> {
    let m = b.len() / dim;
    let row = |ra: &[f32]| -> Vec<f64> {
        b.chunks_exact(dim)
            .map(|rb| {
                ra.iter()
                    .zip(rb)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        a.par_chunks_exact(dim).map(row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = a.chunks_exact(dim).map(row).collect();
    let mut out = Vec::with_capacity(rows.len() * m);
    rows.into_iter().for_each(|r| out.extend(r));
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact transport cost between uniform distributions on `n` sources and
/// `m` sinks, by successive shortest augmenting paths on integer masses
/// `m/g` and `n/g` (`g = gcd(n, m)`).
pub fn exact_transport(cost: &[f64], n: usize, m: usize) -> Result<f64> {
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::invalid("cost matrix shape does not match n × m"));
    }
    if n * m > EXACT_OT_MAX_ENTRIES {
        return Err(Error::invalid(format!(
            "exact transport limited to {EXACT_OT_MAX_ENTRIES} cost entries, got {}",
            n * m
        )));
    }
    let g = gcd(n, m);
    let mut supply = vec![(m / g) as u64; n];
    let mut demand = vec![(n / g) as u64; m];
    let total = (n / g * m) as u64;
    let mut flow = vec![0u64; n * m];
    // reduced cost c_ij + pu_i - pv_j stays non-negative on residual arcs
    let mut pu = vec![0f64; n];
    let mut pv = vec![0f64; m];
    let mut shipped = 0u64;
    let mut du = vec![0f64; n];
    let mut dv = vec![0f64; m];
    let mut pred_v = vec![0usize; m];
    let mut pred_u: Vec<Option<usize>> = vec![None; n];
    let mut done_u = vec![false; n];
    let mut done_v = vec![false; m];

    while shipped < total {
        du.iter_mut().zip(&supply).for_each(|(d, &s)| *d = if s > 0 { 0.0 } else { f64::INFINITY });
        dv.fill(f64::INFINITY);
        pred_u.fill(None);
        done_u.fill(false);
        done_v.fill(false);
        let sink = loop {
            // dense Dijkstra: pick the closest unfinished node of either side
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for (i, &d) in du.iter().enumerate() {
                if !done_u[i] && d < best {
                    best = d;
                    pick = Some((true, i));
                }
            }
            for (j, &d) in dv.iter().enumerate() {
                if !done_v[j] && d < best {
                    best = d;
                    pick = Some((false, j));
                }
            }
            match pick {
                None => return Err(Error::invalid("transport problem has no augmenting path")),
                Some((true, i)) => {
                    done_u[i] = true;
                    let row = &cost[i * m..(i + 1) * m];
                    for j in 0..m {
                        if done_v[j] {
                            continue;
                        }
                        let nd = best + (row[j] + pu[i] - pv[j]).max(0.0);
                        if nd < dv[j] {
                            dv[j] = nd;
                            pred_v[j] = i;
                        }
                    }
                }
                Some((false, j)) => {
                    done_v[j] = true;
                    if demand[j] > 0 {
                        break j;
                    }
                    for i in 0..n {
                        if done_u[i] || flow[i * m + j] == 0 {
                            continue;
                        }
                        let nd = best + (-cost[i * m + j] - pu[i] + pv[j]).max(0.0);
                        if nd < du[i] {
                            du[i] = nd;
                            pred_u[i] = Some(j);
                        }
                    }
                }
            }
        };
        let reach = dv[sink];
        for i in 0..n {
            pu[i] += du[i].min(reach);
        }
        for j in 0..m {
            pv[j] += dv[j].min(reach);
        }
        // walk back to the originating source, collecting the bottleneck
        let mut amount = demand[sink];
        let mut j = sink;
        let origin = loop {
            let i = pred_v[j];
            match pred_u[i] {
                None => break i,
                Some(prev) => {
                    amount = amount.min(flow[i * m + prev]);
                    j = prev;
                }
            }
        };
        amount = amount.min(supply[origin]);
        let mut j = sink;
        loop {
            let i = pred_v[j];
            flow[i * m + j] += amount;
            match pred_u[i] {
                None => break,
                Some(prev) => {
                    flow[i * m + prev] -= amount;
                    j = prev;
                }
            }
        }
        supply[origin] -= amount;
        demand[sink] -= amount;
        shipped += amount;
    }
    let cost_sum: f64 = flow
        .iter()
        .zip(cost)
        .filter(|(&f, _)| f > 0)
        .map(|(&f, &c)| f as f64 * c)
        .sum();
    Ok(cost_sum / total as f64)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with uniform marginals. Returns `⟨plan, cost⟩`, the
/// iterations used and whether the row-marginal violation fell below 1e-6.
pub fn sinkhorn_transport(cost: &[f64], n: usize, m: usize, epsilon: f64, max_iters: usize) -> Result<(f64, usize, bool)> {
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::invalid("cost matrix shape does not match n × m"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid("sinkhorn epsilon must be positive"));
    }
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0f64; n];
    let mut g = vec![0f64; m];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        update_rows(&mut f, &g, cost, m, epsilon, log_a);
        for (j, gj) in g.iter_mut().enumerate() {
            let terms = (0..n).map(|i| (f[i] - cost[i * m + j]) / epsilon);
            *gj = epsilon * (log_b - log_sum_exp(terms));
        }
        let violation: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[i * m + j]) / epsilon).exp())
                    .sum();
                (row - 1.0 / n as f64).abs()
            })
            .sum();
        if violation < SINKHORN_TOL {
            converged = true;
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / epsilon).exp() * c;
        }
    }
    Ok((total, iterations, converged))
}

fn update_rows(f: &mut [f64], g: &[f64], cost: &[f64], m: usize, epsilon: f64, log_a: f64) {
    let one = |(i, fi): (usize, &mut f64)| {
        let row = &cost[i * m..(i + 1) * m];
        let terms = row.iter().zip(g).map(|(&c, &gj)| (gj - c) / epsilon);
        *fi = epsilon * (log_a - log_sum_exp(terms));
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        f.par_iter_mut().enumerate().for_each(one);
    }
    #[cfg(not(feature = "parallel"))]
    f.iter_mut().enumerate().for_each(one);
}

/// Transport distance between raw point sets of dimension `dim`.
pub fn ot_points(a: &[f32], b: &[f32], dim: usize, config: &OtConfig) -> Result<OtResult> {
    if dim == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::invalid("point sets must be non-empty with whole rows"));
    }
    let n = a.len() / dim;
    let m = b.len() / dim;
    let mode = match config.mode {
        OtMode::Auto if n * m <= EXACT_OT_MAX_ENTRIES => OtMode::Exact,
        OtMode::Auto => OtMode::Sinkhorn,
        other => other,
    };
    let cost = cost_matrix(a, b, dim);
    match mode {
        OtMode::Exact => Ok(OtResult {
            distance: exact_transport(&cost, n, m)?,
            mode,
            epsilon: None,
            iterations: 0,
            converged: true,
        }),
        _ => {
            let (distance, iterations, converged) =
                sinkhorn_transport(&cost, n, m, config.epsilon, config.max_iters)?;
            if !converged {
                log::warn!("sinkhorn did not converge in {iterations} iterations (epsilon {})", config.epsilon);
            }
            Ok(OtResult {
                distance,
                mode,
                epsilon: Some(config.epsilon),
                iterations,
                converged,
            })
        }
    }
}

pub fn ot_distance(ea: &EmbeddingSet, eb: &EmbeddingSet, config: &OtConfig) -> Result<OtResult> {
    if ea.dim != eb.dim {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            ea.dim, eb.dim
        )));
    }
    ot_points(&ea.rows, &eb.rows, ea.dim, config)
}

/// Trains from `theta0` on the selected examples and evaluates the
/// best-validation snapshot on `test`.
pub fn retrain_and_eval(
    theta0: &ModelParams,
    selected: &[Example],
    opt: &OptimizerConfig,
    test: &[Example],
    validation: &[Example],
) -> Result<EvalMetrics> {
    if selected.is_empty() {
        return Err(Error::invalid("cannot retrain on an empty selection"));
    }
    let outcome = train(theta0, selected, opt, Some(validation))?;
    evaluate(&outcome.params, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub mean_loss: f64,
    pub perplexity: Option<f64>,
    pub vocab_containment: f64,
    pub ot: OtResult,
}

impl MetricsReport {
    pub fn new(eval: EvalMetrics, vocab_containment: f64, ot: OtResult) -> Self {
        Self {
            accuracy: eval.accuracy,
            mean_loss: eval.mean_loss,
            perplexity: eval.perplexity,
            vocab_containment,
            ot,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn docs(texts: &[&str]) -> DocumentSet {
        DocumentSet::from_texts(texts.iter().map(|t| (*t, None)))
    }

    fn unit_points(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| (x / norm) as f32));
        }
        out
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Replicates sources and sinks into an equal-size assignment problem and
    /// minimizes over all permutations.
    fn brute_force(cost: &[f64], n: usize, m: usize) -> f64 {
        let g = gcd(n, m);
        let (rs, rt) = (m / g, n / g);
        let units = n * rs;
        permutations(units)
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(u, &v)| cost[(u / rs) * m + v / rt])
                    .sum::<f64>()
                    / units as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn containment_examples() {
        let a = docs(&["a b c"]);
        let b = docs(&["b c d"]);
        assert!((vocab_containment(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(vocab_containment(&a, &a).unwrap(), 1.0);
        let nested = docs(&["a b", "c d e"]);
        assert_eq!(vocab_containment(&a, &nested).unwrap(), 1.0);
        assert!(vocab_containment(&a, &docs(&[])).is_err());
    }

    proptest! {
        #[test]
        fn containment_symmetric_and_bounded(xs in prop::collection::vec("[a-f]{1,2}( [a-f]{1,2}){0,4}", 1..5),
                                             ys in prop::collection::vec("[a-f]{1,2}( [a-f]{1,2}){0,4}", 1..5)) {
            let a = DocumentSet::from_texts(xs.iter().map(|t| (t.as_str(), None)));
            let b = DocumentSet::from_texts(ys.iter().map(|t| (t.as_str(), None)));
            let ab = vocab_containment(&a, &b).unwrap();
            prop_assert_eq!(ab, vocab_containment(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let ta = token_set(&a);
            let tb = token_set(&b);
            prop_assert_eq!(ab == 1.0, ta.is_subset(&tb) || tb.is_subset(&ta));
        }

        #[test]
        fn exact_matches_brute_force(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=4) {
            let g = gcd(n, m);
            prop_assume!(n * (m / g) <= 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_points(&mut rng, n, 3);
            let b = unit_points(&mut rng, m, 3);
            let cost = cost_matrix(&a, &b, 3);
            let got = exact_transport(&cost, n, m).unwrap();
            prop_assert!((got - brute_force(&cost, n, m)).abs() < 1e-9);
        }

        #[test]
        fn exact_is_symmetric_and_sinkhorn_is_an_upper_bound(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_points(&mut rng, n, 4);
            let b = unit_points(&mut rng, n, 4);
            let exact = OtConfig { mode: OtMode::Exact, ..OtConfig::default() };
            let ab = ot_points(&a, &b, 4, &exact).unwrap().distance;
            let ba = ot_points(&b, &a, 4, &exact).unwrap().distance;
            prop_assert!((ab - ba).abs() < 1e-9);
            let sk = ot_points(&a, &b, 4, &OtConfig { mode: OtMode::Sinkhorn, ..OtConfig::default() }).unwrap();
            prop_assert!(sk.distance >= ab - 1e-5);
        }
    }

    #[test]
    fn exact_identity_and_single_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_points(&mut rng, 20, 5);
        let cfg = OtConfig::default();
        let r = ot_points(&a, &a, 5, &cfg).unwrap();
        assert_eq!(r.mode, OtMode::Exact);
        assert_eq!(r.distance, 0.0);
        let r = ot_points(&[0.0, 0.0], &[3.0, 4.0], 2, &cfg).unwrap();
        assert!((r.distance - 5.0).abs() < 1e-12);
    }

    #[test]
    fn strict_subset_stays_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = unit_points(&mut rng, 9, 6);
        let a = b[..4 * 6].to_vec();
        let exact = OtConfig {
            mode: OtMode::Exact,
            ..OtConfig::default()
        };
        assert!(ot_points(&a, &b, 6, &exact).unwrap().distance > 0.0);
    }

    #[test]
    fn sinkhorn_approaches_exact_as_epsilon_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = unit_points(&mut rng, 8, 8);
        let b = unit_points(&mut rng, 8, 8);
        let cost = cost_matrix(&a, &b, 8);
        let exact = exact_transport(&cost, 8, 8).unwrap();
        let gaps: Vec<f64> = [0.5, 0.1, 0.02]
            .iter()
            .map(|&eps| sinkhorn_transport(&cost, 8, 8, eps, 20000).unwrap().0 - exact)
            .collect();
        assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
        assert!(gaps[2] / exact < 0.05);
    }

    #[test]
    fn sinkhorn_flags_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = unit_points(&mut rng, 10, 4);
        let b = unit_points(&mut rng, 7, 4);
        let cfg = OtConfig {
            mode: OtMode::Sinkhorn,
            epsilon: 0.001,
            max_iters: 2,
        };
        let r = ot_points(&a, &b, 4, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.distance.is_finite());
        assert!(ot_points(&a, &b, 4, &OtConfig { epsilon: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn exact_rejects_oversized_problems() {
        assert!(exact_transport(&[], 2001, 2000).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let set = docs(&["alpha beta gamma", "alpha beta gamma", "delta", "beta beta"]);
        let vocab = build_vocab(&set, 50, 0).unwrap();
        let base = init_params(ModelConfig::classification(vocab.len(), 8, 2), 2).unwrap();
        let e = embed(&set, &vocab, &base, 16).unwrap();
        assert_eq!(e.len(), 4);
        assert_eq!(e.row(0), e.row(1));
        for i in 0..4 {
            let n: f64 = e.row(i).iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
        let bad = docs(&["!!!"]);
        let empty_vocab = build_vocab(&docs(&["x"]), 3, 0).unwrap();
        let base = init_params(ModelConfig::classification(empty_vocab.len(), 4, 2), 0).unwrap();
        assert!(embed(&bad, &empty_vocab, &base, 0).is_err());
    }

    #[test]
    fn disjoint_documents_are_near_orthogonal_on_average() {
        let set = docs(&["one two three four", "five six seven eight"]);
        let vocab = build_vocab(&set, 50, 0).unwrap();
        let mut total = 0.0;
        for seed in 0..100 {
            let base = init_params(ModelConfig::classification(vocab.len(), 32, 2), seed).unwrap();
            let e = embed(&set, &vocab, &base, 16).unwrap();
            total += e.row(0).iter().zip(e.row(1)).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
        }
        assert!((total / 100.0).abs() < 0.05, "{}", total / 100.0);
    }

    #[test]
    fn report_json_shape() {
        let r = MetricsReport::new(
            EvalMetrics {
                accuracy: Some(0.5),
                mean_loss: 1.0,
                perplexity: None,
            },
            0.75,
            OtResult {
                distance: 0.3,
                mode: OtMode::Exact,
                epsilon: None,
                iterations: 0,
                converged: true,
            },
        );
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["ot"]["mode"], "exact");
        assert_eq!(v["vocab_containment"], 0.75);
        assert!(v["perplexity"].is_null());
    }
}
