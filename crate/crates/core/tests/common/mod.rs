use std::cmp::Ordering;

use fedmap::tensor_nn::{Activation, Layer, Model, WeightTensor};

/// MLP with the given widths holding `layers` as weights.
pub fn model_from(widths: &[usize], layers: &[Vec<f64>]) -> Model<f64> {
    let n = layers.len();
    let built = layers
        .iter()
        .enumerate()
        .map(|(i, w)| Layer {
            weight: WeightTensor::new(vec![widths[i + 1], widths[i]], w.clone()).unwrap(),
            bias: None,
            activation: if i + 1 == n {
                Activation::Softmax
            } else {
                Activation::Relu
            },
        })
        .collect();
    Model::new(built).unwrap()
}

/// Score by the definition: squared weight over the squared mass of every
/// weight ranked at or above it (magnitude, then index), summed largest first.
pub fn oracle_scores(layers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    layers
        .iter()
        .map(|w| {
            let key = |i: usize| (w[i].abs(), i);
            (0..w.len())
                .map(|u| {
                    let mut above: Vec<usize> = (0..w.len())
                        .filter(|&v| key(v).partial_cmp(&key(u)) != Some(Ordering::Less))
                        .collect();
                    above.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap());
                    let mass: f64 = above.iter().fold(0.0, |s, &v| s + w[v] * w[v]);
                    if mass > 0.0 {
                        w[u] * w[u] / mass
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn oracle_top_k(scores: &[Vec<f64>], k: usize) -> Vec<Vec<bool>> {
    let mut all: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.iter().enumerate().map(move |(i, &v)| (v, l, i)))
        .collect();
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut keep: Vec<Vec<bool>> = scores.iter().map(|s| vec![false; s.len()]).collect();
    for &(_, l, i) in all.iter().take(k) {
        keep[l][i] = true;
    }
    keep
}
