use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::metrics::{Confusion, EpochRecord, Metrics};
use super::TrainError;
use crate::data::{pad_batch, Batch, Video};
use crate::model::{forward, infer, AblationConfig, ForwardOptions, ModelParams, VideoInput};
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// GRU hidden size per direction.
    pub hidden: usize,
    /// Width of the head's ReLU layer; `None` uses `2 * hidden`.
    pub head_hidden: Option<usize>,
    pub seed: u64,
    pub ablation: AblationConfig,
    /// Global gradient-norm clipping threshold; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch_size: 16,
            epochs: 75,
            dropout: 0.4,
            hidden: 100,
            head_hidden: None,
            seed: 0,
            ablation: AblationConfig::B6,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Names the first offending field.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::Config { field, reason });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} must lie in [0, 1)", self.dropout));
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive".into());
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden", "must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm", format!("{c} must be positive"));
            }
        }
        if let Err(e) = self.ablation.validate() {
            return bad("ablation", e.to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation accuracy, or the
    /// final parameters when there is no validation split.
    pub model: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Deterministic per-video dropout seed.
fn stream_seed(seed: u64, epoch: usize, batch: usize, video: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for part in [epoch as u64, batch as u64, video as u64] {
        x = x.wrapping_add(part).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 29;
    }
    x
}

/// Loss (mean over the batch's real utterances) and summed gradients.
///
/// Each video is run on its own tape; per-video gradients are reduced in
/// video order so the result does not depend on thread scheduling.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &ModelParams<T>,
    batch: &Batch<T>,
    opts: &ForwardOptions,
    seeds: impl Fn(usize) -> u64 + Sync,
) -> Result<(T, Vec<Tensor<T>>), TrainError> {
    let real = batch.real_utterances();
    if real == 0 {
        return Err(TrainError::Contract("batch has no real utterances".into()));
    }
    let scale = T::one() / T::of(real as f64);
    let per_video: Vec<(T, Vec<Tensor<T>>)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds(i));
            let mut g = Graph::new(&model.store);
            let (probs, _) = forward(&mut g, model, &batch.input(i), opts, &mut rng)?;
            let loss = g.nll(probs, &batch.targets(i), scale)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), g.param_grads()))
        })
        .collect::<Result<_, crate::tensor::TensorError>>()?;

    let mut total = T::zero();
    let mut grads = model.store.zeros_like();
    for (loss, g) in per_video {
        total = total + loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a = *a + b;
            }
        }
    }
    Ok((total, grads))
}

fn clip(grads: &mut [Tensor<f64>], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

pub fn train<T: Scalar>(
    model: ModelParams<T>,
    train_set: &[Video],
    val_set: &[Video],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    train_with(model, train_set, val_set, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    mut model: ModelParams<T>,
    train_set: &[Video],
    val_set: &[Video],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Contract("training split is empty".into()));
    }
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;
    let opts = ForwardOptions::train(config.dropout);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted_loss = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let videos: Vec<&Video> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch: Batch<T> = pad_batch(&videos)?;
            let (loss, grads) =
                batch_loss_and_grads(&model, &batch, &opts, |v| stream_seed(config.seed, epoch, bi, v))?;
            let loss = loss.as_f64();
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::Divergence { epoch, batch: bi + 1 });
            }
            let grads = match config.clip_norm {
                Some(c) => {
                    let mut g64: Vec<Tensor<f64>> = grads.iter().map(Tensor::cast).collect();
                    clip(&mut g64, c);
                    g64.iter().map(Tensor::cast).collect()
                }
                None => grads,
            };
            adam.step(&mut model.store, &grads)?;
            let n = batch.real_utterances();
            weighted_loss += loss * n as f64;
            seen += n;
        }
        let (val_acc, val_f1) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate(&model, val_set)?;
            (m.accuracy, m.f1)
        };
        if !val_set.is_empty() && best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss: weighted_loss / seen as f64,
            val_acc,
            val_f1,
        };
        on_epoch(&record);
        history.push(record);
    }

    Ok(match best {
        Some((_, epoch, best_model)) => TrainOutcome {
            model: best_model,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            model,
            history,
            best_epoch: None,
        },
    })
}

/// One prediction per real utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub video_id: String,
    pub utt_idx: usize,
    pub label: u8,
    pub pred: u8,
    pub p_pos: f64,
}

fn video_tensors<T: Scalar>(v: &Video) -> [Tensor<T>; 3] {
    crate::model::Modality::ALL.map(|m| v.matrix(m))
}

/// Eval-mode predictions for every utterance; class 1 iff `p_pos >= 0.5`.
pub fn predict_dataset<T: Scalar>(model: &ModelParams<T>, videos: &[Video]) -> Result<Vec<Prediction>, TrainError> {
    let per_video: Vec<Vec<Prediction>> = videos
        .par_iter()
        .map(|v| {
            let feats = video_tensors::<T>(v);
            let mask = vec![true; v.len()];
            let input = VideoInput {
                features: [&feats[0], &feats[1], &feats[2]],
                mask: &mask,
            };
            // Eval mode draws no random numbers.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (probs, _) = infer(model, &input, &ForwardOptions::eval(), &mut rng)?;
            Ok(v.utterances
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let p_pos = probs.get(i, 1).as_f64();
                    Prediction {
                        video_id: v.id.clone(),
                        utt_idx: i,
                        label: u.label,
                        pred: u8::from(p_pos >= 0.5),
                        p_pos,
                    }
                })
                .collect())
        })
        .collect::<Result<_, crate::tensor::TensorError>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn metrics_of(predictions: &[Prediction]) -> Metrics {
    let mut c = Confusion::default();
    for p in predictions {
        c.record(p.label, p.pred);
    }
    c.into()
}

/// Utterance-level accuracy and positive-class F1 in eval mode.
pub fn evaluate<T: Scalar>(model: &ModelParams<T>, videos: &[Video]) -> Result<Metrics, TrainError> {
    Ok(metrics_of(&predict_dataset(model, videos)?))
}
