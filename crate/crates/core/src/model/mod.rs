//! Mean-pooled embedding model with an optional tanh hidden layer and a
//! linear softmax head, for classification or causal next-token prediction.
//!
//! All math is generic over [`Real`] so gradients can be checked against
//! finite differences on `f64` shadows of the `f32` weights.

mod checkpoint;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, DocumentSet, TokenSeq, Vocab};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with_meta, CheckpointMeta};
pub use optim::{
    optimizer_step, train, EpochRecord, OptimizerConfig, OptimizerKind, OptimizerState,
    TrainOutcome,
};

pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    NextToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Ignored for [`Task::NextToken`], whose head spans the vocabulary.
    pub num_classes: usize,
    pub hidden_layer: bool,
}

impl ModelConfig {
    pub fn classification(vocab_size: usize, embed_dim: usize, num_classes: usize) -> Self {
        Self {
            task: Task::Classification,
            vocab_size,
            embed_dim,
            num_classes,
            hidden_layer: false,
        }
    }

    pub fn next_token(vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            task: Task::NextToken,
            vocab_size,
            embed_dim,
            num_classes: vocab_size,
            hidden_layer: false,
        }
    }

    pub fn with_hidden(mut self, hidden: bool) -> Self {
        self.hidden_layer = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size must be at least 3"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim must be at least 2"));
        }
        if self.task == Task::Classification && self.num_classes < 2 {
            return Err(Error::invalid("classification needs at least 2 classes"));
        }
        Ok(())
    }

    /// Width of the output head: classes, or the vocabulary for next-token.
    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification => self.num_classes,
            Task::NextToken => self.vocab_size,
        }
    }

    /// Length of a flattened last-layer gradient: `out*h + out`.
    pub fn head_len(&self) -> usize {
        self.output_dim() * (self.embed_dim + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hidden<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

/// Model weights. Matrices are row-major: `embedding` is V×h, `hidden.weight`
/// h×h (output-major), `head_weight` out×h.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F = f32> {
    pub config: ModelConfig,
    pub embedding: Vec<F>,
    pub hidden: Option<Hidden<F>>,
    pub head_weight: Vec<F>,
    pub head_bias: Vec<F>,
}

pub type ModelParams = Params<f32>;

/// Named tensor shapes in serialization order.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(&'static str, [usize; 2])> {
    let (v, h, o) = (config.vocab_size, config.embed_dim, config.output_dim());
    let mut shapes = vec![("embedding", [v, h])];
    if config.hidden_layer {
        shapes.push(("hidden_weight", [h, h]));
        shapes.push(("hidden_bias", [1, h]));
    }
    shapes.push(("head_weight", [o, h]));
    shapes.push(("head_bias", [1, o]));
    shapes
}

impl<F: Real> Params<F> {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, h, o) = (config.vocab_size, config.embed_dim, config.output_dim());
        Self {
            config,
            embedding: vec![F::zero(); v * h],
            hidden: config.hidden_layer.then(|| Hidden {
                weight: vec![F::zero(); h * h],
                bias: vec![F::zero(); h],
            }),
            head_weight: vec![F::zero(); o * h],
            head_bias: vec![F::zero(); o],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn blocks(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![&self.embedding];
        if let Some(hd) = &self.hidden {
            out.push(&hd.weight);
            out.push(&hd.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![&mut self.embedding];
        if let Some(hd) = &mut self.hidden {
            out.push(&mut hd.weight);
            out.push(&mut hd.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let conv = |v: &[F]| v.iter().map(|&x| G::of(x.as_f64())).collect::<Vec<G>>();
        Params {
            config: self.config,
            embedding: conv(&self.embedding),
            hidden: self.hidden.as_ref().map(|hd| Hidden {
                weight: conv(&hd.weight),
                bias: conv(&hd.bias),
            }),
            head_weight: conv(&self.head_weight),
            head_bias: conv(&self.head_bias),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::invalid(format!(
                "incompatible model configs: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }

    /// Flattened head weight followed by head bias.
    pub fn head_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.config.head_len());
        out.extend_from_slice(&self.head_weight);
        out.extend_from_slice(&self.head_bias);
        out
    }

    fn row(&self, token: u32) -> &[F] {
        let h = self.config.embed_dim;
        let t = token as usize;
        &self.embedding[t * h..(t + 1) * h]
    }
}

/// Draws every weight uniformly from `[-a, a]` with `a = sqrt(3/h)` (variance
/// `1/h`, so embedding rows have unit expected squared norm). Biases start at zero.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let h = config.embed_dim;
    let a = (3.0 / h as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-a, a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    let mut fill = |v: &mut [f32]| v.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
    fill(&mut params.embedding);
    if let Some(hd) = &mut params.hidden {
        fill(&mut hd.weight);
    }
    fill(&mut params.head_weight);
    Ok(params)
}

/// Short content checksum of a checkpoint's serialized bytes.
pub fn fingerprint(params: &ModelParams) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(checkpoint::encode(params));
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// What a sequence is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    /// The sequence itself, shifted by one position.
    NextToken,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: TokenSeq,
    pub target: Target,
}

/// Tokenizes a document set into training examples. Classification requires
/// every document to carry a label below `num_classes`.
pub fn examples(
    docs: &DocumentSet,
    vocab: &Vocab,
    seq_len: usize,
    config: &ModelConfig,
) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            let seq = tokenize(d, vocab, seq_len);
            let target = match config.task {
                Task::Classification => Target::Class(d.label.ok_or_else(|| {
                    Error::invalid(format!("document {} has no label", d.id))
                })?),
                Task::NextToken => Target::NextToken,
            };
            Ok(Example { seq, target })
        })
        .collect()
}

/// Output of one softmax evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F = f32> {
    /// Pooled context after the optional hidden layer; the head's input.
    pub pooled_hidden: Vec<F>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
}

fn check_seq<F: Real>(params: &Params<F>, x: &TokenSeq) -> Result<()> {
    if x.valid_len == 0 {
        return Err(Error::invalid("sequence has no valid tokens"));
    }
    if x.valid_len > x.ids.len() {
        return Err(Error::invalid("valid_len exceeds sequence length"));
    }
    let v = params.config.vocab_size as u32;
    if let Some(bad) = x.valid().iter().find(|&&t| t >= v) {
        return Err(Error::invalid(format!("token id {bad} out of vocabulary of size {v}")));
    }
    Ok(())
}

fn check_target<F: Real>(params: &Params<F>, x: &TokenSeq, target: Target) -> Result<()> {
    match (params.config.task, target) {
        (Task::Classification, Target::Class(y)) if y < params.config.num_classes => Ok(()),
        (Task::Classification, Target::Class(y)) => Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            params.config.num_classes
        ))),
        (Task::NextToken, Target::NextToken) if x.valid_len >= 2 => Ok(()),
        (Task::NextToken, Target::NextToken) => Err(Error::invalid(
            "next-token loss needs at least 2 valid tokens",
        )),
        (task, target) => Err(Error::invalid(format!(
            "target {target:?} does not match task {task:?}"
        ))),
    }
}

pub(crate) fn softmax_in_place<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Activations<F> {
    /// Mean of the context embeddings (hidden-layer input).
    context: Vec<F>,
    out: ForwardOutput<F>,
}

fn head_forward<F: Real>(params: &Params<F>, context: Vec<F>) -> Activations<F> {
    let h = params.config.embed_dim;
    let pooled_hidden = match &params.hidden {
        Some(hd) => (0..h)
            .map(|r| {
                let w = &hd.weight[r * h..(r + 1) * h];
                (dot(w, &context) + hd.bias[r]).tanh()
            })
            .collect(),
        None => context.clone(),
    };
    let logits: Vec<F> = params
        .head_bias
        .iter()
        .enumerate()
        .map(|(o, &b)| dot(&params.head_weight[o * h..(o + 1) * h], &pooled_hidden) + b)
        .collect();
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    Activations {
        context,
        out: ForwardOutput {
            pooled_hidden,
            logits,
            probs,
        },
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn mean_context<F: Real>(params: &Params<F>, tokens: &[u32]) -> Vec<F> {
    let h = params.config.embed_dim;
    let mut ctx = vec![F::zero(); h];
    for &t in tokens {
        for (c, &e) in ctx.iter_mut().zip(params.row(t)) {
            *c += e;
        }
    }
    let inv = F::one() / F::of(tokens.len() as f64);
    ctx.iter_mut().for_each(|c| *c *= inv);
    ctx
}

/// Causal running means: entry `t` is the mean of embeddings `0..=t`.
fn causal_contexts<F: Real>(params: &Params<F>, tokens: &[u32]) -> Vec<Vec<F>> {
    let h = params.config.embed_dim;
    let mut sum = vec![F::zero(); h];
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            for (s, &e) in sum.iter_mut().zip(params.row(tok)) {
                *s += e;
            }
            let inv = F::one() / F::of((t + 1) as f64);
            sum.iter().map(|&s| s * inv).collect()
        })
        .collect()
}

/// Sequence-level forward pass: the head applied to the mean of all valid
/// token embeddings. For next-token models this is the prediction of the
/// token following the sequence.
pub fn forward<F: Real>(params: &Params<F>, x: &TokenSeq) -> Result<ForwardOutput<F>> {
    check_seq(params, x)?;
    Ok(head_forward(params, mean_context(params, x.valid())).out)
}

/// Per-position forward pass for next-token models: entry `t` predicts token
/// `t + 1` from the causal mean over positions `0..=t`. Only positions with a
/// valid successor are returned.
pub fn forward_positions<F: Real>(params: &Params<F>, x: &TokenSeq) -> Result<Vec<ForwardOutput<F>>> {
    check_seq(params, x)?;
    let tokens = x.valid();
    let n = tokens.len().saturating_sub(1);
    Ok(causal_contexts(params, &tokens[..n])
        .into_iter()
        .map(|c| head_forward(params, c).out)
        .collect())
}

fn nll<F: Real>(out: &ForwardOutput<F>, y: usize) -> f64 {
    // log-sum-exp form avoids log(0) when probs underflow
    let max = out.logits.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
    let lse = max
        + out
            .logits
            .iter()
            .map(|l| (l.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    lse - out.logits[y].as_f64()
}

/// Cross-entropy. Next-token loss is the mean over predicted positions.
pub fn loss<F: Real>(params: &Params<F>, x: &TokenSeq, target: Target) -> Result<f64> {
    check_seq(params, x)?;
    check_target(params, x, target)?;
    match target {
        Target::Class(y) => Ok(nll(&forward(params, x)?, y)),
        Target::NextToken => {
            let outs = forward_positions(params, x)?;
            let tokens = x.valid();
            let total: f64 = outs
                .iter()
                .enumerate()
                .map(|(t, o)| nll(o, tokens[t + 1] as usize))
                .sum();
            Ok(total / outs.len() as f64)
        }
    }
}

/// Backpropagates `dlogits` (already scaled) through one head application,
/// accumulating head/hidden gradients and returning d(context).
fn head_backward<F: Real>(
    params: &Params<F>,
    act: &Activations<F>,
    dlogits: &[F],
    grad: &mut Params<F>,
) -> Vec<F> {
    let h = params.config.embed_dim;
    let z = &act.out.pooled_hidden;
    let mut dz = vec![F::zero(); h];
    for (o, &e) in dlogits.iter().enumerate() {
        if e == F::zero() {
            continue;
        }
        grad.head_bias[o] += e;
        let gw = &mut grad.head_weight[o * h..(o + 1) * h];
        let w = &params.head_weight[o * h..(o + 1) * h];
        for k in 0..h {
            gw[k] += e * z[k];
            dz[k] += e * w[k];
        }
    }
    match (&params.hidden, &mut grad.hidden) {
        (Some(hd), Some(ghd)) => {
            let da: Vec<F> = dz
                .iter()
                .zip(z)
                .map(|(&d, &zz)| d * (F::one() - zz * zz))
                .collect();
            let mut dctx = vec![F::zero(); h];
            for r in 0..h {
                ghd.bias[r] += da[r];
                let gw = &mut ghd.weight[r * h..(r + 1) * h];
                let w = &hd.weight[r * h..(r + 1) * h];
                for k in 0..h {
                    gw[k] += da[r] * act.context[k];
                    dctx[k] += da[r] * w[k];
                }
            }
            dctx
        }
        _ => dz,
    }
}

/// Loss plus gradient accumulation: `grad += scale * d(loss)/d(params)`.
pub fn loss_and_grad<F: Real>(
    params: &Params<F>,
    x: &TokenSeq,
    target: Target,
    scale: F,
    grad: &mut Params<F>,
) -> Result<f64> {
    check_seq(params, x)?;
    check_target(params, x, target)?;
    let h = params.config.embed_dim;
    let tokens = x.valid();
    match target {
        Target::Class(y) => {
            let act = head_forward(params, mean_context(params, tokens));
            let value = nll(&act.out, y);
            let mut e = act.out.probs.clone();
            e[y] -= F::one();
            e.iter_mut().for_each(|v| *v *= scale);
            let dctx = head_backward(params, &act, &e, grad);
            let inv = F::one() / F::of(tokens.len() as f64);
            for &t in tokens {
                let row = &mut grad.embedding[t as usize * h..(t as usize + 1) * h];
                for (g, &d) in row.iter_mut().zip(&dctx) {
                    *g += d * inv;
                }
            }
            Ok(value)
        }
        Target::NextToken => {
            let n = tokens.len() - 1;
            let pos_scale = scale / F::of(n as f64);
            let contexts = causal_contexts(params, &tokens[..n]);
            let mut total = 0.0;
            // d(loss)/d(context_t) / (t+1), summed from the end
            let mut per_pos = Vec::with_capacity(n);
            for (t, ctx) in contexts.into_iter().enumerate() {
                let act = head_forward(params, ctx);
                let y = tokens[t + 1] as usize;
                total += nll(&act.out, y);
                let mut e = act.out.probs.clone();
                e[y] -= F::one();
                e.iter_mut().for_each(|v| *v *= pos_scale);
                let dctx = head_backward(params, &act, &e, grad);
                let inv = F::one() / F::of((t + 1) as f64);
                per_pos.push(dctx.into_iter().map(|d| d * inv).collect::<Vec<F>>());
            }
            let mut suffix = vec![F::zero(); h];
            for s in (0..n).rev() {
                for (acc, &d) in suffix.iter_mut().zip(&per_pos[s]) {
                    *acc += d;
                }
                let t = tokens[s] as usize;
                for (g, &d) in grad.embedding[t * h..(t + 1) * h].iter_mut().zip(&suffix) {
                    *g += d;
                }
            }
            Ok(total / n as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Classification only.
    pub accuracy: Option<f64>,
    pub mean_loss: f64,
    /// Next-token only: `exp(mean_loss)`.
    pub perplexity: Option<f64>,
}

/// Mean per-example loss, plus accuracy (classification) or perplexity (next-token).
pub fn evaluate(params: &ModelParams, test: &[Example]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    for ex in test {
        total += loss(params, &ex.seq, ex.target)?;
        if let Target::Class(y) = ex.target {
            if argmax(&forward(params, &ex.seq)?.probs) == y {
                correct += 1;
            }
        }
    }
    let mean_loss = total / test.len() as f64;
    Ok(match params.config.task {
        Task::Classification => EvalMetrics {
            accuracy: Some(correct as f64 / test.len() as f64),
            mean_loss,
            perplexity: None,
        },
        Task::NextToken => EvalMetrics {
            accuracy: None,
            mean_loss,
            perplexity: Some(mean_loss.exp()),
        },
    })
}

/// Mean loss over a set of examples.
pub fn mean_loss(params: &ModelParams, data: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += loss(params, &ex.seq, ex.target)?;
    }
    Ok(total / data.len().max(1) as f64)
}
