use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{Activation, Batch, Dataset, Gradients, Model};
use crate::error::{FedMapError, Result};
use crate::pruning::PruneMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Mean softmax cross-entropy over the batch.
    pub loss: T,
    /// Per-row argmax of the logits; ties go to the lowest class id.
    pub predictions: Vec<usize>,
}

/// Activations kept for the backward pass. `inputs[l]` feeds layer `l`,
/// `pre[l]` is its pre-activation.
struct Trace<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

fn check_batch<T: Scalar>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<usize> {
    let rows = batch.len();
    if batch.features.len() != rows * model.input_dim() {
        return Err(FedMapError::structural(format!(
            "batch has {} feature values for {rows} rows; model expects width {}",
            batch.features.len(),
            model.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= model.output_dim()) {
        return Err(FedMapError::structural(format!(
            "label {bad} outside the model's {} classes",
            model.output_dim()
        )));
    }
    Ok(rows)
}

fn run_layers<T: Scalar>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<Trace<T>> {
    let rows = check_batch(model, batch)?;
    let mut inputs = Vec::with_capacity(model.layers().len());
    let mut pre = Vec::with_capacity(model.layers().len());
    let mut current = batch.features.to_vec();
    for (li, layer) in model.layers().iter().enumerate() {
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let w = layer.weight.values();
        let mut z = vec![T::zero(); rows * fan_out];
        for r in 0..rows {
            let x = &current[r * fan_in..(r + 1) * fan_in];
            let zr = &mut z[r * fan_out..(r + 1) * fan_out];
            for (o, zo) in zr.iter_mut().enumerate() {
                let wo = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = T::zero();
                for (&wi, &xi) in wo.iter().zip(x) {
                    acc += wi * xi;
                }
                if let Some(b) = &layer.bias {
                    acc += b.values()[o];
                }
                *zo = acc;
            }
        }
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return Err(FedMapError::Numeric {
                layer: li,
                msg: format!("non-finite pre-activation at row {}", pos / fan_out),
            });
        }
        let next = match layer.activation {
            Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Identity | Activation::Softmax => z.clone(),
        };
        inputs.push(std::mem::replace(&mut current, next));
        pre.push(z);
    }
    Ok(Trace { inputs, pre })
}

/// Row-wise loss terms and softmax probabilities from output logits.
fn softmax_xent<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>, Vec<usize>) {
    let rows = labels.len();
    let mut probs = vec![T::zero(); logits.len()];
    let mut preds = Vec::with_capacity(rows);
    let mut total = T::zero();
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let mut arg = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[arg] {
                arg = c;
            }
        }
        preds.push(arg);
        let max = z[arg];
        let p = &mut probs[r * classes..(r + 1) * classes];
        let mut sum = T::zero();
        for (pc, &v) in p.iter_mut().zip(z) {
            *pc = (v - max).exp();
            sum += *pc;
        }
        for pc in p.iter_mut() {
            *pc /= sum;
        }
        total += sum.ln() + max - z[labels[r]];
    }
    let loss = if rows == 0 {
        T::zero()
    } else {
        total / T::of(rows as f64)
    };
    (loss, probs, preds)
}

pub fn forward<T: Scalar>(model: &Model<T>, batch: &Batch<'_, T>) -> Result<ForwardOutput<T>> {
    let trace = run_layers(model, batch)?;
    let logits = trace.pre.last().expect("model has layers");
    let (loss, _, predictions) = softmax_xent(logits, batch.labels, model.output_dim());
    if !loss.is_finite() {
        return Err(FedMapError::Numeric {
            layer: model.layers().len() - 1,
            msg: "non-finite loss".into(),
        });
    }
    Ok(ForwardOutput { loss, predictions })
}

/// Exact gradients of the mean batch loss. Weight entries whose mask bit is
/// clear are returned as exactly zero.
pub fn backward<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<'_, T>,
    mask: Option<&PruneMask>,
) -> Result<Gradients<T>> {
    if let Some(m) = mask {
        m.check_sizes(&model.layer_sizes())?;
    }
    let trace = run_layers(model, batch)?;
    let rows = batch.len();
    let classes = model.output_dim();
    let (_, probs, _) = softmax_xent(trace.pre.last().expect("layers"), batch.labels, classes);

    let mut grads = Gradients::zeros_for(model);
    if rows == 0 {
        return Ok(grads);
    }
    let scale = T::one() / T::of(rows as f64);
    // dL/dz for the output layer
    let mut dz = probs;
    for r in 0..rows {
        dz[r * classes + batch.labels[r]] -= T::one();
    }
    dz.iter_mut().for_each(|v| *v *= scale);

    for li in (0..model.layers().len()).rev() {
        let layer = &model.layers()[li];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let x = &trace.inputs[li];
        let gw = &mut grads.weights[li];
        for r in 0..rows {
            let xr = &x[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let d = dz[r * fan_out + o];
                if d == T::zero() {
                    continue;
                }
                for (g, &xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                    *g += d * xi;
                }
            }
        }
        if let Some(gb) = grads.biases[li].as_mut() {
            for r in 0..rows {
                for o in 0..fan_out {
                    gb[o] += dz[r * fan_out + o];
                }
            }
        }
        if let Some(m) = mask {
            for (i, g) in gw.iter_mut().enumerate() {
                if !m.get(li, i) {
                    *g = T::zero();
                }
            }
        }
        if li == 0 {
            break;
        }
        let w = layer.weight.values();
        let prev_pre = &trace.pre[li - 1];
        let prev_act = model.layers()[li - 1].activation;
        let mut dprev = vec![T::zero(); rows * fan_in];
        for r in 0..rows {
            let dp = &mut dprev[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let d = dz[r * fan_out + o];
                if d == T::zero() {
                    continue;
                }
                for (acc, &wi) in dp.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *acc += d * wi;
                }
            }
        }
        if prev_act == Activation::Relu {
            for (g, &z) in dprev.iter_mut().zip(prev_pre) {
                if z <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        dz = dprev;
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(FedMapError::Numeric {
            layer: 0,
            msg: "non-finite gradient".into(),
        });
    }
    Ok(grads)
}

/// `w <- w - lr * (g + weight_decay * w)`; biases get no decay.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    grads.check_matches(model)?;
    let lr = T::of(lr);
    let wd = T::of(weight_decay);
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        for (w, &g) in layer.weight.values_mut().iter_mut().zip(&grads.weights[li]) {
            *w -= lr * (g + wd * *w);
        }
        if let (Some(b), Some(gb)) = (layer.bias.as_mut(), grads.biases[li].as_ref()) {
            for (v, &g) in b.values_mut().iter_mut().zip(gb) {
                *v -= lr * g;
            }
        }
        let bad = !layer.weight.values().iter().all(|v| v.is_finite())
            || layer
                .bias
                .as_ref()
                .is_some_and(|b| !b.values().iter().all(|v| v.is_finite()));
        if bad {
            return Err(FedMapError::Numeric {
                layer: li,
                msg: "SGD step produced a non-finite parameter".into(),
            });
        }
    }
    Ok(())
}

/// Minibatch SGD hyperparameters for one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Quadratic pull `(1 / 2 eta) * ||theta - center||^2` added to every batch loss.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a, T> {
    pub center: &'a Model<T>,
    pub eta: f64,
}

/// Runs `epochs` passes of shuffled minibatch SGD. Masked-off weights receive
/// no gradient, no decay and no proximal pull, so they stay exactly zero.
pub fn train_local<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    mask: &PruneMask,
    data: &Dataset<T>,
    hyper: &LocalTraining,
    prox: Option<Proximal<'_, T>>,
    rng: &mut R,
) -> Result<Model<T>> {
    if data.is_empty() {
        return Err(FedMapError::structural("local dataset is empty"));
    }
    if hyper.batch_size == 0 {
        return Err(FedMapError::structural("batch size must be positive"));
    }
    mask.check_sizes(&model.layer_sizes())?;
    if let Some(p) = &prox {
        model.check_same_shape(p.center)?;
    }
    let mut model = model.clone();
    if hyper.epochs == 0 {
        return Ok(model);
    }
    let dim = data.dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(hyper.batch_size * dim);
    let mut labels = Vec::with_capacity(hyper.batch_size);
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch_size) {
            feats.clear();
            labels.clear();
            for &r in chunk {
                feats.extend_from_slice(data.row(r));
                labels.push(data.labels()[r]);
            }
            let batch = Batch {
                features: &feats,
                labels: &labels,
            };
            let mut grads = backward(&model, &batch, Some(mask))?;
            if let Some(p) = &prox {
                let pull = crate::feddr::proximal_gradient_term(&model, p.center, p.eta)?;
                add_masked(&mut grads, &pull, mask);
            }
            sgd_step(&mut model, &grads, hyper.lr, hyper.weight_decay)?;
            zero_masked(&mut model, mask);
        }
    }
    Ok(model)
}

fn add_masked<T: Scalar>(grads: &mut Gradients<T>, extra: &Gradients<T>, mask: &PruneMask) {
    for (li, (g, e)) in grads.weights.iter_mut().zip(&extra.weights).enumerate() {
        for (i, (gv, &ev)) in g.iter_mut().zip(e).enumerate() {
            if mask.get(li, i) {
                *gv += ev;
            }
        }
    }
    for (g, e) in grads.biases.iter_mut().zip(&extra.biases) {
        if let (Some(g), Some(e)) = (g.as_mut(), e.as_ref()) {
            for (gv, &ev) in g.iter_mut().zip(e) {
                *gv += ev;
            }
        }
    }
}

fn zero_masked<T: Scalar>(model: &mut Model<T>, mask: &PruneMask) {
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        for (i, w) in layer.weight.values_mut().iter_mut().enumerate() {
            if !mask.get(li, i) {
                *w = T::zero();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Fraction of rows whose argmax prediction equals the label.
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FedMapError::structural(
            "cannot evaluate on an empty dataset",
        ));
    }
    const CHUNK: usize = 512;
    let dim = data.dim();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let batch = Batch {
            features: &data.features()[start * dim..end * dim],
            labels: &data.labels()[start..end],
        };
        let out = forward(model, &batch)?;
        correct += out
            .predictions
            .iter()
            .zip(batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        loss_sum += out.loss.as_f64() * (end - start) as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}
