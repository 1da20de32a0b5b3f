//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every exported function takes plain numbers and returns a JSON string;
//! the page does its own drawing. The `*_report` functions are the same
//! computations without the bindings, for native tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use selectkit_core::gradstore::{GradientStore, Projection};
use selectkit_core::metrics::{cost_matrix, exact_transport, sinkhorn_transport};
use selectkit_core::selector::{select_baseline, select_greedy, Method, ScoringRule};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

#[derive(Debug, Serialize)]
pub struct GreedyReport {
    pub points: Vec<[f32; 2]>,
    pub direction: [f32; 2],
    /// Points that belong to the tight, high-norm cluster.
    pub clustered: Vec<bool>,
    pub select: Vec<usize>,
    pub topk: Vec<usize>,
    /// Cosine between each selection's summed vector and the direction.
    pub select_cosine: f64,
    pub topk_cosine: f64,
}

fn cosine(sum: [f64; 2], d: [f32; 2]) -> f64 {
    let n = (sum[0].powi(2) + sum[1].powi(2)).sqrt() * ((d[0] as f64).powi(2) + (d[1] as f64).powi(2)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        (sum[0] * d[0] as f64 + sum[1] * d[1] as f64) / n
    }
}

/// Two-dimensional "gradients": a tight cluster of large vectors close to
/// the target direction plus scattered ones. Top-K keeps taking the cluster;
/// the cosine-sum greedy rule mixes in vectors that correct the sum.
pub fn greedy_report(n: usize, m: usize, cluster_share: f64, seed: u32) -> Result<GreedyReport, String> {
    if n == 0 || m == 0 || m > n {
        return Err("need 1 <= m <= n".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let direction = [1.0f32, 0.35];
    let cluster_angle = 0.0f64;
    let mut points = Vec::with_capacity(n);
    let mut clustered = Vec::with_capacity(n);
    for _ in 0..n {
        let in_cluster = rng.gen_bool(cluster_share.clamp(0.0, 1.0));
        let (angle, norm) = if in_cluster {
            (cluster_angle + 0.05 * gaussian(&mut rng), 1.6 + 0.1 * gaussian(&mut rng))
        } else {
            (rng.gen_range(-1.6..2.2), rng.gen_range(0.2..1.2))
        };
        points.push([(norm * angle.cos()) as f32, (norm * angle.sin()) as f32]);
        clustered.push(in_cluster);
    }
    let flat: Vec<f32> = points.iter().flatten().copied().collect();
    let store = GradientStore::from_blocks(vec![flat], 2, vec![0.0; n], vec![None; n]).map_err(|e| e.to_string())?;
    let dirs = vec![direction.to_vec()];
    let select = select_greedy(&store, &dirs, m, ScoringRule::CosineSum).map_err(|e| e.to_string())?.indices;
    let topk = select_baseline(&store, &dirs, m, Method::Topk, 0).map_err(|e| e.to_string())?.indices;
    let sum = |idx: &[usize]| {
        idx.iter().fold([0.0f64; 2], |acc, &i| [acc[0] + points[i][0] as f64, acc[1] + points[i][1] as f64])
    };
    Ok(GreedyReport {
        select_cosine: cosine(sum(&select), direction),
        topk_cosine: cosine(sum(&topk), direction),
        points,
        direction,
        clustered,
        select,
        topk,
    })
}

#[derive(Debug, Serialize)]
pub struct TransportReport {
    pub a: Vec<[f32; 2]>,
    pub b: Vec<[f32; 2]>,
    pub exact: f64,
    pub sinkhorn: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact and entropic transport cost between two random point clouds.
pub fn transport_report(n: usize, m: usize, epsilon: f64, seed: u32) -> Result<TransportReport, String> {
    if n == 0 || m == 0 || n * m > 40_000 {
        return Err("need 1 <= n, m and n·m <= 40000".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let a: Vec<[f32; 2]> = (0..n).map(|_| [rng.gen_range(0.0..0.6), rng.gen_range(0.0..1.0)]).collect();
    let b: Vec<[f32; 2]> = (0..m).map(|_| [rng.gen_range(0.4..1.0), rng.gen_range(0.0..1.0)]).collect();
    let fa: Vec<f32> = a.iter().flatten().copied().collect();
    let fb: Vec<f32> = b.iter().flatten().copied().collect();
    let cost = cost_matrix(&fa, &fb, 2);
    let exact = exact_transport(&cost, n, m).map_err(|e| e.to_string())?;
    let (sinkhorn, iterations, converged) =
        sinkhorn_transport(&cost, n, m, epsilon, 5000).map_err(|e| e.to_string())?;
    Ok(TransportReport {
        a,
        b,
        exact,
        sinkhorn,
        iterations,
        converged,
    })
}

#[derive(Debug, Serialize)]
pub struct ProjectionReport {
    /// `(exact, projected)` inner product per pair, scaled by `‖a‖‖b‖`.
    pub pairs: Vec<[f64; 2]>,
    /// Share of pairs with error at most `0.1·‖a‖‖b‖`.
    pub within: f64,
    pub pearson: f64,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Inner-product distortion of a `dim → k` random sign projection on pairs
/// with random correlation.
pub fn projection_report(dim: usize, k: usize, pairs: usize, seed: u32) -> Result<ProjectionReport, String> {
    if dim == 0 || k == 0 || pairs < 2 || dim * pairs > 4_000_000 {
        return Err("need dim, k >= 1, pairs >= 2 and dim·pairs <= 4e6".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let proj = Projection::new(dim, k, seed as u64 ^ 0x9e37).map_err(|e| e.to_string())?;
    let mut vs: Vec<Vec<f32>> = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let rho: f64 = rng.gen_range(-1.0..1.0);
        let a: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|&x| (rho * x + (1.0 - rho * rho).sqrt() * gaussian(&mut rng)) as f32)
            .collect();
        vs.push(a.into_iter().map(|x| x as f32).collect());
        vs.push(b);
    }
    let views: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
    let projected = proj.project_batch(&views).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(pairs);
    let mut inside = 0;
    for p in 0..pairs {
        let (a, b) = (&vs[2 * p], &vs[2 * p + 1]);
        let scale = (dot(a, a) * dot(b, b)).sqrt().max(f64::MIN_POSITIVE);
        let exact = dot(a, b) / scale;
        let approx = dot(&projected[2 * p], &projected[2 * p + 1]) / scale;
        if (approx - exact).abs() <= 0.1 {
            inside += 1;
        }
        out.push([exact, approx]);
    }
    let xs: Vec<f64> = out.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = out.iter().map(|p| p[1]).collect();
    Ok(ProjectionReport {
        pearson: pearson(&xs, &ys),
        within: inside as f64 / pairs as f64,
        pairs: out,
    })
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
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn greedy_demo(n: usize, m: usize, cluster_share: f64, seed: u32) -> Result<String, JsValue> {
    to_js(greedy_report(n, m, cluster_share, seed))
}

#[wasm_bindgen]
pub fn transport_demo(n: usize, m: usize, epsilon: f64, seed: u32) -> Result<String, JsValue> {
    to_js(transport_report(n, m, epsilon, seed))
}

#[wasm_bindgen]
pub fn projection_demo(dim: usize, k: usize, pairs: usize, seed: u32) -> Result<String, JsValue> {
    to_js(projection_report(dim, k, pairs, seed))
}
