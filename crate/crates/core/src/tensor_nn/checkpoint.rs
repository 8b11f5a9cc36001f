//! `FMAP1` model checkpoints.
//!
//! Layout (little-endian): magic `FMAP1`, `u32` layer count, then per layer
//! `u32` rows, `u32` cols, `u32` bias length (0 when the layer has no bias),
//! then every weight as `f64` in layer order, then every bias as `f64`.
//! Hidden layers are ReLU and the last layer is softmax.

use std::io::Read;
use std::path::Path;

use super::model::{Activation, Layer, Model};
use super::tensor::WeightTensor;
use crate::error::{FedMapError, Result};
use crate::io_util::{read_array, read_u32, write_atomic};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FMAP1";

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        9 + 12 * model.layers().len() + 8 * (model.num_weights() + model.num_biases()),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
        let bias_len = layer.bias.as_ref().map_or(0, |b| b.len());
        out.extend_from_slice(&(bias_len as u32).to_le_bytes());
    }
    for layer in model.layers() {
        for v in layer.weight.values() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    for v in model.bias_values() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(mut r: impl Read) -> Result<Model<T>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| FedMapError::Format("checkpoint truncated before magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FedMapError::Format("not an FMAP1 checkpoint".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let bias = read_u32(&mut r)? as usize;
        if bias != 0 && bias != rows {
            return Err(FedMapError::Format(format!(
                "bias length {bias} does not match {rows} rows"
            )));
        }
        dims.push((rows, cols, bias));
    }
    let mut weights = Vec::with_capacity(count);
    for &(rows, cols, _) in &dims {
        weights.push(read_array(&mut r, rows * cols)?);
    }
    let mut layers = Vec::with_capacity(count);
    for (i, (&(rows, cols, bias), w)) in dims.iter().zip(weights).enumerate() {
        let bias = if bias > 0 {
            Some(WeightTensor::new(vec![rows], read_array(&mut r, bias)?)?)
        } else {
            None
        };
        layers.push(Layer {
            weight: WeightTensor::new(vec![rows, cols], w)?,
            bias,
            activation: if i + 1 == count {
                Activation::Softmax
            } else {
                Activation::Relu
            },
        });
    }
    Model::new(layers)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = std::fs::File::open(path).map_err(|e| FedMapError::io(path, e))?;
    decode_checkpoint(std::io::BufReader::new(file))
}
