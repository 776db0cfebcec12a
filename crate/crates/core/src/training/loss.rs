use crate::params::Graph;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::TensorError;

/// Mean negative log-likelihood over real utterances of a `u x 2`
/// probability matrix, with the log clamped at probability `1e-12`.
pub fn cross_entropy_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[u8],
    mask: &[bool],
) -> Result<Var, TensorError> {
    if labels.len() != mask.len() {
        return Err(TensorError::Contract {
            op: "cross_entropy_loss",
            reason: format!("{} labels for {} mask entries", labels.len(), mask.len()),
        });
    }
    let targets = targets(labels, mask);
    let real = targets.iter().filter(|t| t.is_some()).count();
    if real == 0 {
        return Err(TensorError::Contract {
            op: "cross_entropy_loss",
            reason: "no real utterances".into(),
        });
    }
    g.nll(probs, &targets, T::one() / T::of(real as f64))
}

pub(crate) fn targets(labels: &[u8], mask: &[bool]) -> Vec<Option<usize>> {
    labels
        .iter()
        .zip(mask)
        .map(|(&l, &m)| m.then_some(l as usize))
        .collect()
}
