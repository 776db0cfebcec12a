//! Plain logistic-regression probe, independent of the autodiff tape, used
//! to measure how much label information a feature set carries linearly.

use crate::data::Video;
use crate::model::Modality;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn features(v: &Video, i: usize, modalities: &[Modality]) -> Vec<f64> {
    modalities
        .iter()
        .flat_map(|&m| v.utterances[i].features(m).iter().copied())
        .collect()
}

/// `(x, y)` rows for every utterance.
pub fn design(videos: &[Video], modalities: &[Modality]) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in videos {
        for (i, u) in v.utterances.iter().enumerate() {
            xs.push(features(v, i, modalities));
            ys.push(u.label);
        }
    }
    (xs, ys)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    /// Full-batch gradient descent on the mean logistic loss.
    pub fn fit(xs: &[Vec<f64>], ys: &[u8], iterations: usize, lr: f64) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let mut p = Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        };
        let n = xs.len().max(1) as f64;
        for _ in 0..iterations {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                let r = p.prob(x) - f64::from(y);
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
                gb += r;
            }
            for (w, g) in p.weights.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            p.bias -= lr * gb / n;
        }
        p
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| u8::from(self.prob(x) >= 0.5) == y)
            .count();
        hits as f64 / xs.len() as f64
    }
}

/// Fits on `train` and reports held-out accuracy on `test`.
pub fn probe_accuracy(train: &[Video], test: &[Video], modalities: &[Modality]) -> f64 {
    let (xs, ys) = design(train, modalities);
    let probe = LogisticProbe::fit(&xs, &ys, 500, 0.5);
    let (tx, ty) = design(test, modalities);
    probe.accuracy(&tx, &ty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_points_are_learned() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 10.0 - 2.0, 1.0]).collect();
        let ys: Vec<u8> = xs.iter().map(|x| u8::from(x[0] > 0.0)).collect();
        let p = LogisticProbe::fit(&xs, &ys, 2000, 1.0);
        assert!(p.accuracy(&xs, &ys) >= 0.95);
    }

    #[test]
    fn empty_inputs() {
        let p = LogisticProbe::fit(&[], &[], 10, 0.1);
        assert_eq!(p.accuracy(&[], &[]), 0.0);
    }
}
