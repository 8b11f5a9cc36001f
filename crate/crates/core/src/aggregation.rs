//! Server-side fusion of client updates.
//!
//! Summation always runs in ascending `client_id` order so results are
//! bitwise stable regardless of arrival order.

use crate::codec::SparsePayload;
use crate::error::{FedMapError, Result};
use crate::pruning::PruneMask;
use crate::scalar::Scalar;
use crate::tensor_nn::LayerValues;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub payload: SparsePayload<T>,
    /// Identifies the shared mask the payload was compressed with.
    pub mask_id: u64,
    pub num_samples: usize,
}

/// Elementwise mean of equally long payloads. Without `weights` this is
/// `sum / N`; with weights (nonnegative, summing to one, indexed like
/// `updates`) it is `sum of w_n * x_n`.
pub fn fedavg_aggregate<T: Scalar>(
    updates: &[ClientUpdate<T>],
    weights: Option<&[f64]>,
) -> Result<SparsePayload<T>> {
    let first = updates
        .first()
        .ok_or_else(|| FedMapError::structural("no client updates to aggregate"))?;
    let len = first.payload.len();
    if let Some(u) = updates.iter().find(|u| u.payload.len() != len) {
        return Err(FedMapError::structural(format!(
            "client {} sent {} values, expected {len}",
            u.client_id,
            u.payload.len()
        )));
    }
    if let Some(u) = updates.iter().find(|u| u.mask_id != first.mask_id) {
        return Err(FedMapError::structural(format!(
            "client {} used mask {:#x}, expected {:#x}",
            u.client_id, u.mask_id, first.mask_id
        )));
    }
    if let Some(w) = weights {
        if w.len() != updates.len() {
            return Err(FedMapError::structural(format!(
                "{} weights for {} updates",
                w.len(),
                updates.len()
            )));
        }
        if w.iter().any(|&x| x.is_nan() || x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FedMapError::structural(
                "aggregation weights must be nonnegative and sum to 1",
            ));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let mut acc = vec![T::zero(); len];
    for &i in &order {
        let vals = updates[i].payload.values();
        match weights {
            Some(w) => {
                let wi = T::of(w[i]);
                for (a, &v) in acc.iter_mut().zip(vals) {
                    *a += wi * v;
                }
            }
            None => {
                for (a, &v) in acc.iter_mut().zip(vals) {
                    *a += v;
                }
            }
        }
    }
    if weights.is_none() {
        let n = T::of(updates.len() as f64);
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(SparsePayload::new(acc))
}

/// Sample-size weights `n_k / sum_j n_j`, aligned with `updates`.
pub fn sample_size_weights<T>(updates: &[ClientUpdate<T>]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(FedMapError::structural(
            "clients report zero samples in total",
        ));
    }
    Ok(updates
        .iter()
        .map(|u| u.num_samples as f64 / total as f64)
        .collect())
}

/// Mask-aware average: at each position, the mean over the clients whose
/// mask keeps that position. Positions no client keeps come out as 0.
/// `deltas` and `supports` are paired by index, which is taken as client order.
pub fn masked_aggregate<T: Scalar>(
    deltas: &[LayerValues<T>],
    supports: &[PruneMask],
) -> Result<LayerValues<T>> {
    if deltas.len() != supports.len() {
        return Err(FedMapError::structural(format!(
            "{} deltas but {} masks",
            deltas.len(),
            supports.len()
        )));
    }
    let first = deltas
        .first()
        .ok_or_else(|| FedMapError::structural("no client deltas to aggregate"))?;
    let sizes = first.sizes();
    for (d, m) in deltas.iter().zip(supports) {
        d.check_sizes(&sizes)?;
        m.check_sizes(&sizes)?;
    }
    let mut out = LayerValues::zeros(&sizes);
    for (l, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let mut sum = T::zero();
            let mut count = 0usize;
            for (d, m) in deltas.iter().zip(supports) {
                if m.get(l, i) {
                    sum += d.layers()[l][i];
                    count += 1;
                }
            }
            if count > 0 {
                out.layers_mut()[l][i] = sum / T::of(count as f64);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: usize, v: &[f64]) -> ClientUpdate<f64> {
        ClientUpdate {
            client_id: id,
            payload: SparsePayload::new(v.to_vec()),
            mask_id: 0,
            num_samples: 1,
        }
    }

    #[test]
    fn fedavg_examples() {
        let agg = fedavg_aggregate(&[upd(0, &[1.0, 3.0]), upd(1, &[3.0, 5.0])], None).unwrap();
        assert_eq!(agg.values(), &[2.0, 4.0]);
        let one = fedavg_aggregate(&[upd(4, &[1.25, -7.0])], None).unwrap();
        assert_eq!(one.values(), &[1.25, -7.0]);
        let w = fedavg_aggregate(&[upd(0, &[0.0]), upd(1, &[4.0])], Some(&[0.25, 0.75])).unwrap();
        assert_eq!(w.values(), &[3.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert!(fedavg_aggregate::<f64>(&[], None).is_err());
        assert!(fedavg_aggregate(&[upd(0, &[1.0]), upd(1, &[1.0, 2.0])], None).is_err());
        assert!(fedavg_aggregate(&[upd(0, &[1.0]), upd(1, &[1.0])], Some(&[0.5, 0.6])).is_err());
        let mut other = upd(1, &[1.0]);
        other.mask_id = 9;
        assert!(fedavg_aggregate(&[upd(0, &[1.0]), other], None).is_err());
    }

    #[test]
    fn fedavg_order_independent() {
        let a = [
            upd(2, &[0.1, 0.7]),
            upd(0, &[0.2, 0.3]),
            upd(1, &[1e-17, 5.0]),
        ];
        let b = [a[1].clone(), a[2].clone(), a[0].clone()];
        assert_eq!(
            fedavg_aggregate(&a, None).unwrap(),
            fedavg_aggregate(&b, None).unwrap()
        );
    }

    #[test]
    fn sample_weights() {
        let mut a = upd(0, &[0.0]);
        a.num_samples = 1;
        let mut b = upd(1, &[4.0]);
        b.num_samples = 3;
        let w = sample_size_weights(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
        assert_eq!(
            fedavg_aggregate(&[a, b], Some(&w)).unwrap().values(),
            &[3.0]
        );
    }

    #[test]
    fn masked_examples() {
        let deltas = vec![
            LayerValues::new(vec![vec![2.0, 9.0]]),
            LayerValues::new(vec![vec![100.0, 9.0]]),
            LayerValues::new(vec![vec![4.0, 9.0]]),
        ];
        let masks = vec![
            PruneMask::from_bools(&[vec![true, false]]),
            PruneMask::from_bools(&[vec![false, false]]),
            PruneMask::from_bools(&[vec![true, false]]),
        ];
        let out = masked_aggregate(&deltas, &masks).unwrap();
        assert_eq!(out.layers(), &[vec![3.0, 0.0]]);
        assert!(masked_aggregate(&deltas, &masks[..2]).is_err());
        assert!(masked_aggregate::<f64>(&[], &[]).is_err());
    }
}
