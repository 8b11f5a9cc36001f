use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::WeightTensor;
use crate::error::{FedMapError, Result};
use crate::scalar::Scalar;

/// Nonlinearity applied to a layer's pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Only valid on the output layer; folded into the cross-entropy loss.
    Softmax,
}

/// Fully connected layer. `weight` has shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: WeightTensor<T>,
    pub bias: Option<WeightTensor<T>>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multilayer perceptron. Only weights are prunable; biases are counted
/// separately and never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FedMapError::structural("model needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 {
                return Err(FedMapError::structural(format!(
                    "layer {i} weight must be 2-D, got shape {:?}",
                    layer.weight.shape()
                )));
            }
            if let Some(b) = &layer.bias {
                if b.shape() != [layer.fan_out()] {
                    return Err(FedMapError::structural(format!(
                        "layer {i} bias shape {:?} does not match {} outputs",
                        b.shape(),
                        layer.fan_out()
                    )));
                }
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(FedMapError::structural(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.fan_in(),
                    i - 1,
                    layers[i - 1].fan_out()
                )));
            }
            let last = i + 1 == layers.len();
            if last != (layer.activation == Activation::Softmax) {
                return Err(FedMapError::structural(
                    "softmax must be the activation of the output layer and only there",
                ));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialised MLP with ReLU hidden layers and a softmax output.
    /// `widths` lists every layer width including input and output.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], bias: bool, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(FedMapError::structural(format!(
                "MLP widths {widths:?} need at least two positive entries"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let values = (0..fan_in * fan_out)
                .map(|_| T::of(normal.sample(rng)))
                .collect();
            let activation = if i + 2 == widths.len() {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight: WeightTensor::new(vec![fan_out, fan_in], values)?,
                bias: bias.then(|| WeightTensor::zeros(vec![fan_out])),
                activation,
            });
        }
        Model::new(layers)
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Prunable parameter count `d`: weights only.
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn num_biases(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.len()).collect()
    }

    /// Layer widths including input, the inverse of [`Model::mlp`].
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out()))
            .collect()
    }

    pub fn weight_values(&self) -> LayerValues<T> {
        LayerValues::new(
            self.layers
                .iter()
                .map(|l| l.weight.values().to_vec())
                .collect(),
        )
    }

    /// All biases concatenated in layer order.
    pub fn bias_values(&self) -> Vec<T> {
        self.layers
            .iter()
            .filter_map(|l| l.bias.as_ref())
            .flat_map(|b| b.values().iter().copied())
            .collect()
    }

    pub fn same_shape(&self, other: &Model<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape()
                    && a.bias.as_ref().map(|t| t.len()) == b.bias.as_ref().map(|t| t.len())
            })
    }

    pub(crate) fn check_same_shape(&self, other: &Model<T>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(FedMapError::structural(
                "models have different architectures",
            ))
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        let mut out = self.clone();
        out.for_each_param_mut(|v| *v = f(*v));
        out
    }

    /// Elementwise combination of two congruent models, weights and biases alike.
    pub fn zip_map(&self, other: &Model<T>, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (lo, lb) in out.layers.iter_mut().zip(&other.layers) {
            for (a, &b) in lo.weight.values_mut().iter_mut().zip(lb.weight.values()) {
                *a = f(*a, b);
            }
            if let (Some(ba), Some(bb)) = (lo.bias.as_mut(), lb.bias.as_ref()) {
                for (a, &b) in ba.values_mut().iter_mut().zip(bb.values()) {
                    *a = f(*a, b);
                }
            }
        }
        Ok(out)
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for layer in &mut self.layers {
            layer.weight.values_mut().iter_mut().for_each(&mut f);
            if let Some(b) = layer.bias.as_mut() {
                b.values_mut().iter_mut().for_each(&mut f);
            }
        }
    }

    /// Subtracts per-layer weight values in place.
    pub fn sub_weights(&mut self, delta: &LayerValues<T>) -> Result<()> {
        delta.check_sizes(&self.layer_sizes())?;
        for (layer, d) in self.layers.iter_mut().zip(delta.layers()) {
            for (w, &dv) in layer.weight.values_mut().iter_mut().zip(d) {
                *w -= dv;
            }
        }
        Ok(())
    }

    /// Subtracts a flat bias vector (layer order) in place.
    pub fn sub_biases(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.num_biases() {
            return Err(FedMapError::structural(format!(
                "bias delta has {} values, model has {} biases",
                delta.len(),
                self.num_biases()
            )));
        }
        let mut it = delta.iter();
        for b in self.layers.iter_mut().filter_map(|l| l.bias.as_mut()) {
            for (v, &dv) in b.values_mut().iter_mut().zip(&mut it) {
                *v -= dv;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.values().iter().all(|v| v.is_finite())
                && l.bias
                    .as_ref()
                    .is_none_or(|b| b.values().iter().all(|v| v.is_finite()))
        })
    }
}

/// Per-layer flat weight values congruent with a model ("model-shaped" data
/// such as deltas or recovered updates).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerValues<T> {
    layers: Vec<Vec<T>>,
}

impl<T: Scalar> LayerValues<T> {
    pub fn new(layers: Vec<Vec<T>>) -> Self {
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn layers(&self) -> &[Vec<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Vec<T>> {
        self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flatten()
    }

    pub(crate) fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        if self.sizes() == sizes {
            Ok(())
        } else {
            Err(FedMapError::structural(format!(
                "layer sizes {:?} do not match {:?}",
                self.sizes(),
                sizes
            )))
        }
    }
}

/// Gradients of the mean batch loss, congruent with the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_for(model: &Model<T>) -> Self {
        Self {
            weights: model
                .layers()
                .iter()
                .map(|l| vec![T::zero(); l.weight.len()])
                .collect(),
            biases: model
                .layers()
                .iter()
                .map(|l| l.bias.as_ref().map(|b| vec![T::zero(); b.len()]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten().flatten())
    }

    pub(crate) fn check_matches(&self, model: &Model<T>) -> Result<()> {
        let ok = self.weights.len() == model.layers().len()
            && self.biases.len() == model.layers().len()
            && model.layers().iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weight.len()
                    && self.biases[i].as_ref().map(Vec::len) == l.bias.as_ref().map(|b| b.len())
            });
        if ok {
            Ok(())
        } else {
            Err(FedMapError::structural(
                "gradients are not congruent with the model",
            ))
        }
    }
}

/// Labelled examples; features are row-major with `dim` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        features: Vec<T>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(FedMapError::structural(
                "dataset needs dim > 0 and classes > 0",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(FedMapError::structural(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FedMapError::structural(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New dataset holding the given rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Self {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Per-class example counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Borrowed view of a batch of rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    pub features: &'a [T],
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> Batch<'a, T> {
    pub fn of(data: &'a Dataset<T>) -> Self {
        Self {
            features: data.features(),
            labels: data.labels(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
