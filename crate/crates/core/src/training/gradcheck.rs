use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::model::{forward, ForwardOptions, ModelParams};
use crate::params::{Graph, ParamStore};
use crate::tape::{BackwardFault, Tape, Var};
use crate::tensor::TensorError;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates to check; all of them when this exceeds the parameter count.
    pub samples: usize,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 200,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel.is_finite() && self.max_rel < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` on a seeded sample of coordinates.
///
/// `loss` builds a scalar on whatever graph it is given; the same closure is
/// used for the analytic pass and for every perturbed evaluation.
pub fn grad_check_with<F>(
    store: &ParamStore<f64>,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>) -> Result<Var, TensorError>,
{
    let tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let mut g = Graph::on_tape(store, tape);
    let l = loss(&mut g)?;
    g.backward(l)?;
    let grads = g.param_grads();
    drop(g);

    let total = store.num_scalars();
    let n = opts.samples.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut flat = rand::seq::index::sample(&mut rng, total, n).into_vec();
    flat.sort_unstable();

    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for t in store.tensors() {
        offsets.push(acc);
        acc += t.len();
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut probe = store.clone();
    let mut sum = 0.0;
    let mut worst: Option<Coordinate> = None;
    for k in flat {
        let p = offsets.partition_point(|&o| o <= k) - 1;
        let i = k - offsets[p];
        let id = store.ids().nth(p).expect("offset table matches store");
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + opts.epsilon;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - opts.epsilon;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * opts.epsilon);
        let analytic = grads[p].data()[i];
        let rel = relative_error(analytic, numeric);
        sum += rel;
        if worst.as_ref().is_none_or(|w| rel.is_nan() || rel > w.rel_error) {
            worst = Some(Coordinate {
                param: store.name(id).to_string(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: n,
        max_rel: worst.as_ref().map_or(0.0, |w| w.rel_error),
        mean_rel: if n == 0 { 0.0 } else { sum / n as f64 },
        worst,
    })
}

/// Gradient check of the batch-mean NLL of `model`, dropout disabled.
pub fn grad_check_model(
    model: &ModelParams<f64>,
    batch: &Batch<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError> {
    let real = batch.real_utterances();
    if real == 0 {
        return Err(TensorError::Contract {
            op: "grad_check",
            reason: "batch has no real utterances".into(),
        });
    }
    let scale = 1.0 / real as f64;
    let fwd = ForwardOptions::eval();
    grad_check_with(
        &model.store,
        |g| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut total: Option<Var> = None;
            for i in 0..batch.len() {
                let (probs, _) = forward(g, model, &batch.input(i), &fwd, &mut rng)?;
                let l = g.nll(probs, &batch.targets(i), scale)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("non-empty batch"))
        },
        opts,
    )
}
