use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, mean_loss, Example, ModelParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, used by AdamW only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            epochs: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// First/second moment buffers; empty until the first Adam step.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    m: Option<ModelParams>,
    v: Option<ModelParams>,
}

pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    opt: &OptimizerConfig,
) {
    state.step += 1;
    let lr = opt.learning_rate as f32;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.blocks_mut().into_iter().zip(grads.blocks()) {
                for (x, &d) in p.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
        }
        OptimizerKind::Adam | OptimizerKind::AdamW => {
            let decay = match opt.kind {
                OptimizerKind::AdamW => (opt.learning_rate * opt.weight_decay) as f32,
                _ => 0.0,
            };
            let t = state.step as i32;
            let c1 = (1.0 - opt.beta1.powi(t)) as f32;
            let c2 = (1.0 - opt.beta2.powi(t)) as f32;
            let (b1, b2, eps) = (opt.beta1 as f32, opt.beta2 as f32, opt.epsilon as f32);
            let m = state.m.get_or_insert_with(|| params.zeros_like());
            let v = state.v.get_or_insert_with(|| params.zeros_like());
            let blocks = params
                .blocks_mut()
                .into_iter()
                .zip(grads.blocks())
                .zip(m.blocks_mut().into_iter().zip(v.blocks_mut()));
            for ((p, g), (mb, vb)) in blocks {
                for i in 0..p.len() {
                    let gi = g[i];
                    mb[i] = b1 * mb[i] + (1.0 - b1) * gi;
                    vb[i] = b2 * vb[i] + (1.0 - b2) * gi * gi;
                    let mhat = mb[i] / c1;
                    let vhat = vb[i] / c2;
                    if decay != 0.0 {
                        p[i] -= decay * p[i];
                    }
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned, when validation was supplied.
    pub best_epoch: Option<usize>,
}

/// Mini-batch training. With a validation set the returned parameters are the
/// epoch-end snapshot with the lowest validation loss (earliest on ties);
/// otherwise the final parameters.
pub fn train(
    initial: &ModelParams,
    data: &[Example],
    opt: &OptimizerConfig,
    validation: Option<&[Example]>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut params = initial.clone();
    let mut grads = params.zeros_like();
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(opt.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(opt.batch_size).enumerate() {
            grads.blocks_mut().into_iter().for_each(|b| b.fill(0.0));
            let scale = 1.0 / idx.len() as f32;
            let mut batch_loss = 0.0;
            for &i in idx {
                let ex = &data[i];
                batch_loss += loss_and_grad(&params, &ex.seq, ex.target, scale, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += batch_loss;
            optimizer_step(&mut params, &grads, &mut state, opt);
        }
        let validation_loss = match validation {
            Some(v) if !v.is_empty() => Some(mean_loss(&params, v)?),
            _ => None,
        };
        if let Some(vl) = validation_loss {
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, params.clone()));
            }
        }
        trace.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / data.len() as f64,
            validation_loss,
        });
    }

    Ok(match best {
        Some((_, epoch, snapshot)) => TrainOutcome {
            params: snapshot,
            trace,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params,
            trace,
            best_epoch: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSeq;
    use crate::model::{evaluate, init_params, ModelConfig, Target};

    fn scalar_params(value: f32) -> ModelParams {
        let mut p = ModelParams::zeros(ModelConfig::classification(3, 2, 2));
        p.head_bias[0] = value;
        p
    }

    #[test]
    fn sgd_step_is_lr_times_grad() {
        let mut p = scalar_params(1.0);
        let mut g = p.zeros_like();
        g.head_bias[0] = 1.0;
        let opt = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..Default::default()
        };
        optimizer_step(&mut p, &g, &mut OptimizerState::default(), &opt);
        assert!((p.head_bias[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // at t=1, mhat = g and vhat = g^2, so the step is lr * g / (|g| + eps)
        for g0 in [1e-3f32, 0.5, 40.0] {
            let mut p = scalar_params(0.0);
            let mut g = p.zeros_like();
            g.head_bias[0] = g0;
            let opt = OptimizerConfig {
                learning_rate: 0.01,
                ..Default::default()
            };
            optimizer_step(&mut p, &g, &mut OptimizerState::default(), &opt);
            assert!((p.head_bias[0] + 0.01).abs() < 1e-6, "{g0}: {}", p.head_bias[0]);
        }
    }

    #[test]
    fn adamw_without_decay_matches_adam() {
        let cfg = ModelConfig::classification(10, 4, 3);
        let p0 = init_params(cfg, 1).unwrap();
        let mut g = p0.zeros_like();
        g.head_weight.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32).sin());
        let adam = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let adamw = OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay: 0.0,
            ..adam
        };
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (OptimizerState::default(), OptimizerState::default());
        for _ in 0..5 {
            optimizer_step(&mut a, &g, &mut sa, &adam);
            optimizer_step(&mut b, &g, &mut sb, &adamw);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adamw_decays_weights() {
        let mut p = scalar_params(1.0);
        let g = p.zeros_like();
        let opt = OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        optimizer_step(&mut p, &g, &mut OptimizerState::default(), &opt);
        assert!((p.head_bias[0] - 0.95).abs() < 1e-7);
    }

    fn toy_separable(n: usize) -> Vec<Example> {
        // tokens 2..6 signal class 0, 6..10 class 1, 10..14 are shared noise
        (0..n)
            .map(|i| {
                let class = i % 2;
                let base = 2 + 4 * class as u32;
                let ids = vec![base + (i as u32 % 4), 10 + (i as u32 % 4), base + ((i as u32 + 1) % 4)];
                let mut padded = ids.clone();
                padded.resize(6, 0);
                Example {
                    seq: TokenSeq {
                        ids: padded,
                        valid_len: 3,
                    },
                    target: Target::Class(class),
                }
            })
            .collect()
    }

    #[test]
    fn learns_separable_toy() {
        let data = toy_separable(64);
        for seed in 0..3 {
            let p0 = init_params(ModelConfig::classification(14, 8, 2), seed).unwrap();
            let opt = OptimizerConfig {
                learning_rate: 0.05,
                epochs: 30,
                batch_size: 8,
                seed,
                ..Default::default()
            };
            let out = train(&p0, &data, &opt, None).unwrap();
            assert_eq!(out.trace.len(), 30);
            let acc = evaluate(&out.params, &data).unwrap().accuracy.unwrap();
            assert!(acc >= 0.95, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn zero_lr_sgd_is_noop() {
        let p0 = init_params(ModelConfig::classification(14, 4, 2), 0).unwrap();
        let opt = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let out = train(&p0, &toy_separable(10), &opt, None).unwrap();
        assert_eq!(out.params, p0);
    }

    #[test]
    fn training_is_deterministic() {
        let p0 = init_params(ModelConfig::classification(14, 4, 2).with_hidden(true), 0).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 0.01,
            epochs: 3,
            seed: 11,
            ..Default::default()
        };
        let a = train(&p0, &toy_separable(20), &opt, None).unwrap();
        let b = train(&p0, &toy_separable(20), &opt, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn best_validation_epoch_is_returned() {
        let data = toy_separable(32);
        let p0 = init_params(ModelConfig::classification(14, 4, 2), 2).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 0.02,
            epochs: 6,
            seed: 3,
            ..Default::default()
        };
        let out = train(&p0, &data, &opt, Some(&data)).unwrap();
        let best = out.best_epoch.unwrap();
        let losses: Vec<f64> = out.trace.iter().map(|r| r.validation_loss.unwrap()).collect();
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(losses.iter().position(|&l| l == min), Some(best));
        let got = mean_loss(&out.params, &data).unwrap();
        assert!((got - min).abs() < 1e-12);
    }

    #[test]
    fn divergence_names_batch() {
        let data = toy_separable(8);
        let mut p0 = init_params(ModelConfig::classification(14, 4, 2), 2).unwrap();
        p0.head_bias[0] = f32::NAN;
        let opt = OptimizerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let err = train(&p0, &data, &opt, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
    }
}
