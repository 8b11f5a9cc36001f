//! Synthetic Gaussian-blob datasets and client partitioning.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FedMapError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor_nn::Dataset;

/// Fraction of generated examples kept for training; the rest is test data.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Redraws allowed when a Dirichlet draw leaves some client empty.
const DIRICHLET_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

/// Vertices of a regular simplex with unit norm, rotated by a random
/// orthogonal map into `dim` dimensions.
fn simplex_means<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let inv = 1.0 / classes as f64;
    let vertex_norm = (1.0 - inv).sqrt();
    let base: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            (0..dim)
                .map(|j| {
                    let e = if j == k { 1.0 } else { 0.0 };
                    let c = if j < classes { inv } else { 0.0 };
                    (e - c) / vertex_norm
                })
                .collect()
        })
        .collect();
    // Gram-Schmidt on a Gaussian matrix gives a random orthonormal basis
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    base.iter()
        .map(|p| {
            (0..dim)
                .map(|i| (0..dim).map(|j| basis[j][i] * p[j]).sum())
                .collect()
        })
        .collect()
}

/// `n` examples in `classes` isotropic Gaussian clusters of standard deviation
/// `spread` around unit-norm simplex vertices. Labels are assigned
/// round-robin, then a seeded shuffle splits 80/20 into train and test.
pub fn synth_blobs<T: Scalar>(
    classes: usize,
    dim: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<Split<T>> {
    if classes < 2 {
        return Err(FedMapError::config(
            "data.classes",
            "need at least 2 classes",
        ));
    }
    if classes > dim {
        return Err(FedMapError::config(
            "data.dim",
            "must be at least the number of classes",
        ));
    }
    if n < classes {
        return Err(FedMapError::config(
            "data.samples",
            "need at least one example per class",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FedMapError::config(
            "data.spread",
            "must be finite and nonnegative",
        ));
    }
    let mut rng = rng::stream(seed, "data");
    let means = simplex_means(classes, dim, &mut rng);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(T::of(m + spread * z));
        }
        labels.push(c);
    }
    let all = Dataset::new(features, labels, dim, classes)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    Ok(Split {
        train: all.select(&order[..n_train]),
        test: all.select(&order[n_train..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Iid,
    DirichletLabelSkew,
    SizeSkew,
}

impl PartitionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionMode::Iid => "iid",
            PartitionMode::DirichletLabelSkew => "dirichlet_label_skew",
            PartitionMode::SizeSkew => "size_skew",
        }
    }
}

impl FromStr for PartitionMode {
    type Err = FedMapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "dirichlet_label_skew" | "dirichlet" => Ok(PartitionMode::DirichletLabelSkew),
            "size_skew" => Ok(PartitionMode::SizeSkew),
            _ => Err(FedMapError::config(
                "partition.mode",
                format!("unknown mode `{s}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Dirichlet concentration for label skew.
    pub beta: f64,
    /// Client `k` receives a share proportional to `skew_factor^k`.
    pub skew_factor: f64,
    pub clients: usize,
    pub seed: u64,
}

/// Splits `data` into `spec.clients` disjoint datasets covering every row.
pub fn partition<T: Scalar>(data: &Dataset<T>, spec: &PartitionSpec) -> Result<Vec<Dataset<T>>> {
    let rows = partition_indices(data, spec)?;
    Ok(rows.iter().map(|r| data.select(r)).collect())
}

/// Row indices per client; see [`partition`].
pub fn partition_indices<T: Scalar>(
    data: &Dataset<T>,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    let n = spec.clients;
    if n == 0 {
        return Err(FedMapError::config("clients", "need at least one client"));
    }
    if data.len() < n {
        return Err(FedMapError::config(
            "clients",
            format!("{} examples cannot cover {n} clients", data.len()),
        ));
    }
    let mut rng = rng::stream(spec.seed, "partition");
    let parts = match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let sizes = equal_sizes(data.len(), n);
            chunk(&order, &sizes)
        }
        PartitionMode::SizeSkew => {
            if !(spec.skew_factor > 0.0 && spec.skew_factor.is_finite()) {
                return Err(FedMapError::config(
                    "partition.skew_factor",
                    "must be positive",
                ));
            }
            let shares: Vec<f64> = (0..n).map(|k| spec.skew_factor.powi(k as i32)).collect();
            let sizes = apportion(data.len(), &shares);
            if sizes.contains(&0) {
                return Err(FedMapError::config(
                    "partition.skew_factor",
                    "some client would receive no examples",
                ));
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            chunk(&order, &sizes)
        }
        PartitionMode::DirichletLabelSkew => dirichlet_split(data, spec, &mut rng)?,
    };
    Ok(parts)
}

fn equal_sizes(total: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|k| total / n + usize::from(k < total % n))
        .collect()
}

/// Largest-remainder apportionment of `total` items by `shares`.
fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - sizes.iter().sum::<usize>();
    let mut by_rem: Vec<usize> = (0..shares.len()).collect();
    by_rem.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &k in by_rem.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    sizes
}

fn chunk(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let part = order[start..start + s].to_vec();
            start += s;
            part
        })
        .collect()
}

fn dirichlet_split<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(spec.beta > 0.0 && spec.beta.is_finite()) {
        return Err(FedMapError::config("partition.beta", "must be positive"));
    }
    let gamma = Gamma::new(spec.beta, 1.0)
        .map_err(|e| FedMapError::config("partition.beta", e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for _ in 0..DIRICHLET_ATTEMPTS {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
        for rows in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(rng);
            let mut draw: Vec<f64> = (0..spec.clients).map(|_| gamma.sample(rng)).collect();
            if draw.iter().sum::<f64>() <= 0.0 {
                // every gamma variate underflowed; fall back to one client
                draw = vec![0.0; spec.clients];
                draw[rng.random_range(0..spec.clients)] = 1.0;
            }
            let sizes = apportion(rows.len(), &draw);
            for (part, piece) in parts.iter_mut().zip(chunk(&rows, &sizes)) {
                part.extend(piece);
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(FedMapError::config(
        "partition.beta",
        format!(
            "no Dirichlet draw in {DIRICHLET_ATTEMPTS} attempts gave every one of {} clients an example",
            spec.clients
        ),
    ))
}

/// `features..., label` CSV of one dataset.
pub fn dataset_csv<T: Scalar>(data: &Dataset<T>) -> String {
    let mut out = String::new();
    for j in 0..data.dim() {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label\n");
    for i in 0..data.len() {
        for v in data.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", data.labels()[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Split<f64> {
        synth_blobs(4, 8, n, 0.3, seed).unwrap()
    }

    #[test]
    fn blobs_are_balanced_and_split() {
        let s = blobs(1000, 1);
        assert_eq!(s.train.len(), 800);
        assert_eq!(s.test.len(), 200);
        let mut h = s.train.label_histogram();
        for (a, b) in h.iter_mut().zip(s.test.label_histogram()) {
            *a += b;
        }
        assert!(h.iter().all(|&c| c == 250));
        let s = blobs(1001, 1);
        let mut h = s.train.label_histogram();
        for (a, b) in h.iter_mut().zip(s.test.label_histogram()) {
            *a += b;
        }
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn blobs_deterministic() {
        assert_eq!(blobs(100, 5), blobs(100, 5));
        assert_ne!(blobs(100, 5), blobs(100, 6));
    }

    #[test]
    fn simplex_means_are_unit_and_equidistant() {
        let mut r = rng::stream(0, "t");
        let m = simplex_means(4, 6, &mut r);
        for a in &m {
            let n: f64 = a.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let dist =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let d01 = dist(&m[0], &m[1]);
        assert!((dist(&m[2], &m[3]) - d01).abs() < 1e-12);
    }

    #[test]
    fn blob_errors() {
        assert!(synth_blobs::<f64>(1, 4, 10, 0.1, 0).is_err());
        assert!(synth_blobs::<f64>(5, 4, 10, 0.1, 0).is_err());
        assert!(synth_blobs::<f64>(4, 4, 3, 0.1, 0).is_err());
    }

    fn spec(mode: PartitionMode, clients: usize) -> PartitionSpec {
        PartitionSpec {
            mode,
            beta: 0.5,
            skew_factor: 0.7,
            clients,
            seed: 3,
        }
    }

    fn assert_cover(parts: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| !p.is_empty()));
    }

    #[test]
    fn iid_equal_chunks() {
        let s = blobs(1250, 0);
        let parts = partition_indices(&s.train, &spec(PartitionMode::Iid, 10)).unwrap();
        assert!(parts.iter().all(|p| p.len() == 100));
        assert_cover(&parts, 1000);
    }

    #[test]
    fn size_skew_shares() {
        let s = blobs(1250, 0);
        let parts = partition_indices(&s.train, &spec(PartitionMode::SizeSkew, 4)).unwrap();
        assert_cover(&parts, 1000);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        let mut sp = spec(PartitionMode::SizeSkew, 10);
        sp.skew_factor = 0.01;
        assert!(partition_indices(&s.train, &sp).is_err());
    }

    #[test]
    fn dirichlet_cover_and_skew() {
        let s = blobs(1250, 0);
        let mut sp = spec(PartitionMode::DirichletLabelSkew, 5);
        sp.beta = 0.1;
        let parts = partition(&s.train, &sp).unwrap();
        let total: usize = parts.iter().map(Dataset::len).sum();
        assert_eq!(total, 1000);
        let skewed = parts.iter().any(|p| {
            let h = p.label_histogram();
            *h.iter().max().unwrap() as f64 > 0.7 * p.len() as f64
        });
        assert!(skewed);
    }

    #[test]
    fn too_many_clients_is_error() {
        let s = blobs(10, 0);
        assert!(partition_indices(&s.train, &spec(PartitionMode::Iid, 9)).is_err());
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 1.0]), vec![0, 7]);
    }

    #[test]
    fn csv_export_header() {
        let d = Dataset::new(vec![1.0f64, 2.0], vec![1], 2, 2).unwrap();
        assert_eq!(dataset_csv(&d), "x0,x1,label\n1,2,1\n");
    }
}
