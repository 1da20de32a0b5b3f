//! Per-example last-layer gradients, seeded sign projections, and the chunked
//! on-disk store that selection scans.
//!
//! Store file layout (little-endian):
//!
//! ```text
//! "SELG" | version u32 | header_len u32 | JSON header
//! | P blocks, each num_examples × k row-major f32 written in chunks of chunk_rows
//! | aux block: num_examples final-model losses, then num_examples pseudolabels (-1 = none), f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{self, forward, forward_positions, Example, ModelParams, Params, Real, Target, Task};

pub const DEFAULT_PROJECTION_DIM: usize = 4096;
pub const DEFAULT_CHUNK_ROWS: usize = 1024;

const MAGIC: &[u8; 4] = b"SELG";
const VERSION: u32 = 1;

/// Gradient of the loss with respect to the output head only, flattened as
/// head weight (row-major, out×h) followed by head bias.
///
/// With residual `e = probs - onehot(y)` the weight gradient is `outer(e, z)`
/// and the bias gradient is `e`, where `z` is the head input. Next-token
/// gradients average the per-position terms.
pub fn last_layer_grad<F: Real>(params: &Params<F>, x: &TokenSeq, target: Target) -> Result<Vec<F>> {
    let cfg = params.config;
    let (h, out) = (cfg.embed_dim, cfg.output_dim());
    let mut grad = vec![F::zero(); cfg.head_len()];
    let mut accumulate = |fo: &model::ForwardOutput<F>, y: usize, w: F| {
        let (gw, gb) = grad.split_at_mut(out * h);
        for (o, &p) in fo.probs.iter().enumerate() {
            let e = (if o == y { p - F::one() } else { p }) * w;
            if e == F::zero() {
                continue;
            }
            gb[o] += e;
            for (g, &z) in gw[o * h..(o + 1) * h].iter_mut().zip(&fo.pooled_hidden) {
                *g += e * z;
            }
        }
    };
    match (cfg.task, target) {
        (Task::Classification, Target::Class(y)) if y < cfg.num_classes => {
            accumulate(&forward(params, x)?, y, F::one());
        }
        (Task::NextToken, Target::NextToken) => {
            let outs = forward_positions(params, x)?;
            if outs.is_empty() {
                return Err(Error::invalid("next-token gradient needs at least 2 valid tokens"));
            }
            let w = F::one() / F::of(outs.len() as f64);
            for (t, fo) in outs.iter().enumerate() {
                accumulate(fo, x.ids[t + 1] as usize, w);
            }
        }
        (task, target) => {
            return Err(Error::invalid(format!(
                "target {target:?} is not valid for task {task:?}"
            )))
        }
    }
    Ok(grad)
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded Rademacher projection `R^n -> R^k`. Entry `(r, c)` is `±1/sqrt(k)`,
/// the sign being bit `c % 64` of a counter hash of `(seed, r, c / 64)`.
/// Entries are regenerated on demand; the matrix is never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Projection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::invalid("projection output_dim must be at least 1"));
        }
        Ok(Self {
            input_dim,
            output_dim,
            seed,
        })
    }

    #[inline]
    fn word(&self, r: usize, w: usize) -> u64 {
        splitmix(splitmix(self.seed ^ splitmix(r as u64)) ^ (w as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    /// Unscaled sign of entry `(r, c)`.
    pub fn sign(&self, r: usize, c: usize) -> f32 {
        if (self.word(r, c / 64) >> (c % 64)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn entry(&self, r: usize, c: usize) -> f32 {
        self.sign(r, c) / (self.output_dim as f32).sqrt()
    }

    fn sign_row(&self, r: usize, out: &mut [f32]) {
        for (w, chunk) in out.chunks_mut(64).enumerate() {
            let bits = self.word(r, w);
            for (b, s) in chunk.iter_mut().enumerate() {
                *s = if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
    }

    pub fn project(&self, v: &[f32]) -> Result<Vec<f32>> {
        Ok(self.project_batch(&[v])?.pop().unwrap())
    }

    /// Projects several vectors at once, regenerating each projection row a
    /// single time. Every output is bit-identical to projecting it alone.
    pub fn project_batch(&self, vs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if let Some(bad) = vs.iter().find(|v| v.len() != self.input_dim) {
            return Err(Error::invalid(format!(
                "projection expects dimension {}, got {}",
                self.input_dim,
                bad.len()
            )));
        }
        let k = self.output_dim;
        let mut out = vec![vec![0f32; k]; vs.len()];
        let mut signs = vec![0f32; k];
        for r in 0..self.input_dim {
            if vs.iter().all(|v| v[r] == 0.0) {
                continue;
            }
            self.sign_row(r, &mut signs);
            for (o, v) in out.iter_mut().zip(vs) {
                let x = v[r];
                if x == 0.0 {
                    continue;
                }
                for (acc, &s) in o.iter_mut().zip(&signs) {
                    *acc += x * s;
                }
            }
        }
        let scale = 1.0 / (k as f32).sqrt();
        for o in &mut out {
            o.iter_mut().for_each(|x| *x *= scale);
        }
        Ok(out)
    }
}

/// Projected last-layer weight difference `theta_f - theta_hat`.
pub fn direction(theta_hat: &ModelParams, theta_f: &ModelParams, proj: &Projection) -> Result<Vec<f32>> {
    theta_hat.check_compatible(theta_f)?;
    let diff: Vec<f32> = theta_f
        .head_flat()
        .iter()
        .zip(theta_hat.head_flat())
        .map(|(&f, h)| (f as f64 - h as f64) as f32)
        .collect();
    proj.project(&diff)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub num_examples: usize,
    pub k: usize,
    #[serde(rename = "P")]
    pub checkpoints: usize,
    pub projection_seed: u64,
    pub input_dim: usize,
    pub chunk_rows: usize,
    /// Checksums of each synthetic checkpoint, in block order.
    pub checkpoint_fingerprints: Vec<String>,
    pub aux_fields: Vec<String>,
    /// Rows hold projected descent directions (negated gradients).
    pub rows: String,
}

impl StoreHeader {
    pub fn projection(&self) -> Projection {
        Projection {
            input_dim: self.input_dim,
            output_dim: self.k,
            seed: self.projection_seed,
        }
    }
}

/// In-memory gradient store: one `num_examples × k` block per checkpoint.
///
/// Row `(j, i)` is the projection of `-last_layer_grad(theta_hat_j, x_i, y_hat_i)`,
/// the direction one gradient step on example `i` moves the head.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStore {
    pub header: StoreHeader,
    blocks: Vec<Vec<f32>>,
    /// `loss(theta_f, x_i, y_hat_i)` per example.
    pub final_loss: Vec<f32>,
    /// Pseudolabel per example; `None` for next-token pools.
    pub pseudolabels: Vec<Option<usize>>,
}

impl GradientStore {
    /// Assembles a store from dense blocks; mostly useful for tests and demos.
    pub fn from_blocks(
        blocks: Vec<Vec<f32>>,
        k: usize,
        final_loss: Vec<f32>,
        pseudolabels: Vec<Option<usize>>,
    ) -> Result<Self> {
        if k == 0 || blocks.is_empty() {
            return Err(Error::invalid("store needs k >= 1 and at least one block"));
        }
        let n = blocks[0].len() / k;
        if blocks.iter().any(|b| b.len() != n * k) {
            return Err(Error::invalid("store blocks must all be num_examples × k"));
        }
        if final_loss.len() != n || pseudolabels.len() != n {
            return Err(Error::invalid("aux columns must have one entry per example"));
        }
        Ok(Self {
            header: StoreHeader {
                num_examples: n,
                k,
                checkpoints: blocks.len(),
                projection_seed: 0,
                input_dim: 0,
                chunk_rows: DEFAULT_CHUNK_ROWS,
                checkpoint_fingerprints: vec![String::new(); blocks.len()],
                aux_fields: vec!["final_loss".into(), "pseudolabel".into()],
                rows: "descent".into(),
            },
            blocks,
            final_loss,
            pseudolabels,
        })
    }

    pub fn num_examples(&self) -> usize {
        self.header.num_examples
    }

    pub fn k(&self) -> usize {
        self.header.k
    }

    pub fn num_checkpoints(&self) -> usize {
        self.header.checkpoints
    }

    pub fn row(&self, j: usize, i: usize) -> &[f32] {
        let k = self.header.k;
        &self.blocks[j][i * k..(i + 1) * k]
    }

    pub fn block(&self, j: usize) -> &[f32] {
        &self.blocks[j]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = StoreWriter::create(path, self.header.clone())?;
        let k = self.header.k;
        for block in &self.blocks {
            for chunk in block.chunks(self.header.chunk_rows.max(1) * k) {
                w.write_chunk(chunk)?;
            }
        }
        w.finish(&self.final_loss, &self.pseudolabels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = StoreFile::open(path)?;
        let header = file.header.clone();
        let mut blocks = Vec::with_capacity(header.checkpoints);
        for j in 0..header.checkpoints {
            let mut block = Vec::with_capacity(header.num_examples * header.k);
            file.for_each_chunk(j, |_, rows| block.extend_from_slice(rows))?;
            blocks.push(block);
        }
        let (final_loss, pseudolabels) = file.aux()?;
        Ok(Self {
            header,
            blocks,
            final_loss,
            pseudolabels,
        })
    }
}

fn store_err(msg: impl Into<String>) -> Error {
    Error::Store(msg.into())
}

fn encode_header(header: &StoreHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

/// Single writer that commits chunks sequentially.
struct StoreWriter {
    out: BufWriter<File>,
    chunk: usize,
}

impl StoreWriter {
    fn create(path: &Path, header: StoreHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&encode_header(&header))
            .map_err(|source| Error::StoreWrite { chunk: 0, source })?;
        Ok(Self { out, chunk: 0 })
    }

    fn write_chunk(&mut self, rows: &[f32]) -> Result<()> {
        let mut bytes = Vec::with_capacity(rows.len() * 4);
        for x in rows {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        self.out.write_all(&bytes).map_err(|source| Error::StoreWrite {
            chunk: self.chunk,
            source,
        })?;
        self.chunk += 1;
        Ok(())
    }

    fn finish(mut self, final_loss: &[f32], labels: &[Option<usize>]) -> Result<()> {
        let aux: Vec<f32> = final_loss
            .iter()
            .copied()
            .chain(labels.iter().map(|l| l.map_or(-1.0, |v| v as f32)))
            .collect();
        self.write_chunk(&aux)?;
        let chunk = self.chunk;
        self.out
            .flush()
            .map_err(|source| Error::StoreWrite { chunk, source })
    }
}

/// Read handle over a store file; chunks are streamed, never fully loaded.
#[derive(Debug)]
pub struct StoreFile {
    path: PathBuf,
    pub header: StoreHeader,
    data_offset: u64,
}

impl StoreFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = File::open(path).map_err(|e| Error::file(path, e))?;
        let len = f.metadata()?.len();
        let mut fixed = [0u8; 12];
        read_exact_or(&mut f, &mut fixed)?;
        if &fixed[..4] != MAGIC {
            return Err(store_err(format!(
                "bad magic {:?}, expected \"SELG\"",
                String::from_utf8_lossy(&fixed[..4])
            )));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(store_err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let header_len = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; header_len];
        read_exact_or(&mut f, &mut raw)?;
        let header: StoreHeader =
            serde_json::from_slice(&raw).map_err(|e| store_err(format!("bad header: {e}")))?;
        if header.k == 0 || header.chunk_rows == 0 || header.checkpoints == 0 {
            return Err(store_err("header has zero k, chunk_rows or P"));
        }
        let data_offset = 12 + header_len as u64;
        let expected = data_offset
            + 4 * (header.checkpoints * header.num_examples * header.k + 2 * header.num_examples) as u64;
        if len < expected {
            return Err(store_err("unexpected end of store"));
        }
        if len > expected {
            return Err(store_err(format!("{} trailing bytes", len - expected)));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            data_offset,
        })
    }

    fn reader_at(&self, offset: u64) -> Result<BufReader<File>> {
        let mut f = File::open(&self.path).map_err(|e| Error::file(&self.path, e))?;
        f.seek(SeekFrom::Start(self.data_offset + offset))?;
        Ok(BufReader::with_capacity(1 << 20, f))
    }

    /// Streams block `j` in chunks of `chunk_rows` rows: `f(first_row, rows)`.
    pub fn for_each_chunk(&self, j: usize, mut f: impl FnMut(usize, &[f32])) -> Result<()> {
        let h = &self.header;
        if j >= h.checkpoints {
            return Err(store_err(format!("block {j} out of range")));
        }
        let block_bytes = (h.num_examples * h.k * 4) as u64;
        let mut r = self.reader_at(j as u64 * block_bytes)?;
        let mut bytes = Vec::new();
        let mut rows = Vec::new();
        let mut start = 0;
        while start < h.num_examples {
            let count = h.chunk_rows.min(h.num_examples - start);
            read_f32s(&mut r, count * h.k, &mut bytes, &mut rows)?;
            f(start, &rows);
            start += count;
        }
        Ok(())
    }

    pub fn aux(&self) -> Result<(Vec<f32>, Vec<Option<usize>>)> {
        let h = &self.header;
        let offset = (h.checkpoints * h.num_examples * h.k * 4) as u64;
        let mut r = self.reader_at(offset)?;
        let (mut bytes, mut vals) = (Vec::new(), Vec::new());
        read_f32s(&mut r, 2 * h.num_examples, &mut bytes, &mut vals)?;
        let labels = vals[h.num_examples..]
            .iter()
            .map(|&l| (l >= 0.0).then_some(l as usize))
            .collect();
        vals.truncate(h.num_examples);
        Ok((vals, labels))
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => store_err("unexpected end of store"),
        _ => Error::Io(e),
    })
}

fn read_f32s(r: &mut impl Read, n: usize, bytes: &mut Vec<u8>, out: &mut Vec<f32>) -> Result<()> {
    bytes.resize(n * 4, 0);
    read_exact_or(r, bytes)?;
    out.clear();
    out.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    Ok(())
}

/// Anything that can stream the rows of each checkpoint block.
pub trait RowSource {
    fn header(&self) -> &StoreHeader;
    fn for_each_rows(&self, j: usize, f: &mut dyn FnMut(usize, &[f32])) -> Result<()>;
}

impl RowSource for GradientStore {
    fn header(&self) -> &StoreHeader {
        &self.header
    }

    fn for_each_rows(&self, j: usize, f: &mut dyn FnMut(usize, &[f32])) -> Result<()> {
        let k = self.header.k;
        let rows = self.header.chunk_rows.max(1);
        for (c, chunk) in self.blocks[j].chunks(rows * k).enumerate() {
            f(c * rows, chunk);
        }
        Ok(())
    }
}

impl RowSource for StoreFile {
    fn header(&self) -> &StoreHeader {
        &self.header
    }

    fn for_each_rows(&self, j: usize, f: &mut dyn FnMut(usize, &[f32])) -> Result<()> {
        self.for_each_chunk(j, f)
    }
}

/// Per-example score `sum_j combiner(row(j, i), dirs[j])`, streaming over
/// chunks. The default combiner is the dot product.
pub fn scan_scores(
    store: &dyn RowSource,
    dirs: &[Vec<f32>],
    combiner: Option<&dyn Fn(&[f32], &[f32]) -> f64>,
) -> Result<Vec<f64>> {
    let h = store.header();
    if dirs.len() != h.checkpoints {
        return Err(store_err(format!(
            "{} directions for {} checkpoint blocks",
            dirs.len(),
            h.checkpoints
        )));
    }
    if let Some(d) = dirs.iter().find(|d| d.len() != h.k) {
        return Err(store_err(format!("direction has dimension {}, store has k = {}", d.len(), h.k)));
    }
    let k = h.k;
    let mut scores = vec![0f64; h.num_examples];
    for (j, dir) in dirs.iter().enumerate() {
        store.for_each_rows(j, &mut |start, rows| {
            for (r, row) in rows.chunks_exact(k).enumerate() {
                scores[start + r] += match combiner {
                    Some(c) => c(row, dir),
                    None => dot64(row, dir),
                };
            }
        })?;
    }
    Ok(scores)
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    // f32 lanes summed in blocks keep the loop vectorizable
    let mut total = 0f64;
    for (ca, cb) in a.chunks(256).zip(b.chunks(256)) {
        let s: f32 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
        total += s as f64;
    }
    total
}

/// Per-example scalar columns cached alongside the gradients.
fn aux_columns(theta_f: &ModelParams, pool: &[Example]) -> Result<(Vec<f32>, Vec<Option<usize>>)> {
    let losses = map_examples(pool, |ex| model::loss(theta_f, &ex.seq, ex.target).map(|l| l as f32))?;
    let labels = pool
        .iter()
        .map(|ex| match ex.target {
            Target::Class(y) => Some(y),
            Target::NextToken => None,
        })
        .collect();
    Ok((losses, labels))
}

fn map_examples<T: Send>(
    items: &[Example],
    f: impl Fn(&Example) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Options for [`build_store`].
#[derive(Clone, Debug)]
pub struct StoreOptions<'a> {
    pub projection: Projection,
    pub chunk_rows: usize,
    /// When set, chunks are written here as they are produced.
    pub path: Option<&'a Path>,
}

/// Computes row `(j, i) = project(-last_layer_grad(theta_hat_j, x_i, y_hat_i))`
/// for every checkpoint and pool example, and caches `loss(theta_f, x_i, y_hat_i)`.
/// `pool` targets must already carry pseudolabels.
pub fn build_store(
    checkpoints: &[ModelParams],
    theta_f: &ModelParams,
    pool: &[Example],
    opts: &StoreOptions<'_>,
) -> Result<GradientStore> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("at least one checkpoint is required"))?;
    for c in checkpoints {
        first.check_compatible(c)?;
    }
    first.check_compatible(theta_f)?;
    let proj = opts.projection;
    if proj.input_dim != first.config.head_len() {
        return Err(Error::invalid(format!(
            "projection input_dim {} does not match head size {}",
            proj.input_dim,
            first.config.head_len()
        )));
    }
    let chunk_rows = opts.chunk_rows.max(1);
    let (final_loss, pseudolabels) = aux_columns(theta_f, pool)?;
    let header = StoreHeader {
        num_examples: pool.len(),
        k: proj.output_dim,
        checkpoints: checkpoints.len(),
        projection_seed: proj.seed,
        input_dim: proj.input_dim,
        chunk_rows,
        checkpoint_fingerprints: checkpoints.iter().map(model::fingerprint).collect(),
        aux_fields: vec!["final_loss".into(), "pseudolabel".into()],
        rows: "descent".into(),
    };
    let mut writer = match opts.path {
        Some(p) => Some(StoreWriter::create(p, header.clone())?),
        None => None,
    };
    let mut blocks = Vec::with_capacity(checkpoints.len());
    for theta in checkpoints {
        let mut block = Vec::with_capacity(pool.len() * proj.output_dim);
        for chunk in pool.chunks(chunk_rows) {
            let rows = project_chunk(theta, chunk, &proj)?;
            if let Some(w) = writer.as_mut() {
                w.write_chunk(&rows)?;
            }
            block.extend_from_slice(&rows);
        }
        blocks.push(block);
    }
    if let Some(w) = writer {
        w.finish(&final_loss, &pseudolabels)?;
    }
    Ok(GradientStore {
        header,
        blocks,
        final_loss,
        pseudolabels,
    })
}

/// Projected descent rows for a chunk of examples, flattened row-major.
fn project_chunk(theta: &ModelParams, chunk: &[Example], proj: &Projection) -> Result<Vec<f32>> {
    let grads = map_examples(chunk, |ex| {
        let mut g = last_layer_grad(theta, &ex.seq, ex.target)?;
        g.iter_mut().for_each(|x| *x = -*x);
        Ok(g)
    })?;
    // sub-batches bound the scratch memory and let threads share the work
    const SUB: usize = 64;
    let parts: Vec<&[Vec<f32>]> = grads.chunks(SUB).collect();
    let project = |part: &&[Vec<f32>]| -> Result<Vec<f32>> {
        let views: Vec<&[f32]> = part.iter().map(Vec::as_slice).collect();
        Ok(proj.project_batch(&views)?.concat())
    };
    #[cfg(feature = "parallel")]
    let projected: Vec<Vec<f32>> = parts.par_iter().map(project).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let projected: Vec<Vec<f32>> = parts.iter().map(project).collect::<Result<_>>()?;
    Ok(projected.concat())
}
