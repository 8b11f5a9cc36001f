use std::cmp::Ordering;

use super::mask::PruneMask;
use crate::error::{FedMapError, Result};
use crate::scalar::Scalar;
use crate::tensor_nn::Model;

/// Layer-adaptive magnitude scores, one per weight, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LampScores<T> {
    layers: Vec<Vec<T>>,
}

impl<T: Scalar> LampScores<T> {
    pub fn layers(&self) -> &[Vec<T>] {
        &self.layers
    }
}

/// Scores for one layer: with weights ordered by ascending magnitude (ties by
/// index), `score(u) = w_u^2 / sum of w_v^2 over v at or after u`.
pub fn lamp_layer<T: Scalar>(weights: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .abs()
            .partial_cmp(&weights[b].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut scores = vec![T::zero(); weights.len()];
    let mut suffix = T::zero();
    for &u in order.iter().rev() {
        let sq = weights[u] * weights[u];
        suffix += sq;
        scores[u] = if suffix > T::zero() {
            sq / suffix
        } else {
            T::zero()
        };
    }
    scores
}

pub fn lamp_scores<T: Scalar>(model: &Model<T>) -> LampScores<T> {
    LampScores {
        layers: model
            .layers()
            .iter()
            .map(|l| lamp_layer(l.weight.values()))
            .collect(),
    }
}

/// Picks the `k` best positions by score, descending; ties go to the lower
/// layer and then the lower flat index. Positions outside `within` (when
/// given) are never selected.
fn select_top_k<T: Scalar>(
    scores: &LampScores<T>,
    k: usize,
    within: Option<&PruneMask>,
) -> PruneMask {
    let sizes: Vec<usize> = scores.layers.iter().map(Vec::len).collect();
    let mut candidates: Vec<(usize, usize)> = match within {
        Some(m) => m.support().collect(),
        None => scores
            .layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| (0..l.len()).map(move |i| (li, i)))
            .collect(),
    };
    let score = |&(l, i): &(usize, usize)| scores.layers[l][i];
    if k < candidates.len() {
        let cmp = |a: &(usize, usize), b: &(usize, usize)| {
            score(b)
                .partial_cmp(&score(a))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        candidates.select_nth_unstable_by(k, cmp);
        candidates.truncate(k);
    }
    let mut mask = PruneMask::zeros(&sizes);
    for (l, i) in candidates {
        mask.set(l, i, true);
    }
    mask
}

/// Keeps exactly the `k` globally highest LAMP scores and zeroes every other
/// weight. Biases are untouched.
pub fn prune<T: Scalar>(model: &Model<T>, k: usize) -> Result<(Model<T>, PruneMask)> {
    let d = model.num_weights();
    if k > d {
        return Err(FedMapError::structural(format!(
            "cannot keep {k} of {d} prunable weights"
        )));
    }
    let mask = select_top_k(&lamp_scores(model), k, None);
    let pruned = apply_mask(model, &mask)?;
    Ok((pruned, mask))
}

/// Like [`prune`], but only positions surviving in `current` are eligible, so
/// the returned mask is always a subset of `current`.
pub fn prune_within<T: Scalar>(
    model: &Model<T>,
    k: usize,
    current: &PruneMask,
) -> Result<(Model<T>, PruneMask)> {
    current.check_sizes(&model.layer_sizes())?;
    if k > current.count() {
        return Err(FedMapError::structural(format!(
            "cannot keep {k} weights inside a mask of {}",
            current.count()
        )));
    }
    let mask = select_top_k(&lamp_scores(model), k, Some(current));
    let pruned = apply_mask(model, &mask)?;
    Ok((pruned, mask))
}

/// Elementwise product of weights and mask; biases pass through.
pub fn apply_mask<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    mask.check_sizes(&model.layer_sizes())?;
    let mut out = model.clone();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        for (i, w) in layer.weight.values_mut().iter_mut().enumerate() {
            if !mask.get(li, i) {
                *w = T::zero();
            }
        }
    }
    Ok(out)
}

/// `supp(a) ⊆ supp(b)`.
pub fn is_subset(a: &PruneMask, b: &PruneMask) -> Result<bool> {
    a.is_subset(b)
}
