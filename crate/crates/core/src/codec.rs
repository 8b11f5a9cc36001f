//! Sparse payloads, the `FPAY1` wire frame and communication accounting.
//!
//! Remove-where-zero (`rwz`) keeps the values at the mask's support in
//! canonical `(layer, flat index)` order; recover-from-mask (`rfm`) scatters
//! them back. Both ends hold the same mask, so no positions travel.

use crate::error::{FedMapError, Result};
use crate::pruning::PruneMask;
use crate::scalar::Scalar;
use crate::tensor_nn::LayerValues;

pub const PAYLOAD_MAGIC: &[u8; 5] = b"FPAY1";

/// Client id written into frames sent by the parameter server.
pub const SERVER_ID: u32 = u32::MAX;

/// Dense array of the values that survive a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload<T> {
    values: Vec<T>,
}

impl<T: Scalar> SparsePayload<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Remove where zero: values at `supp(mask)`; everything else is dropped.
pub fn rwz<T: Scalar>(delta: &LayerValues<T>, mask: &PruneMask) -> Result<SparsePayload<T>> {
    mask.check_sizes(&delta.sizes())?;
    let values = mask.support().map(|(l, i)| delta.layers()[l][i]).collect();
    Ok(SparsePayload { values })
}

/// Recover from mask: the `j`-th payload value lands on the `j`-th set bit.
pub fn rfm<T: Scalar>(payload: &SparsePayload<T>, mask: &PruneMask) -> Result<LayerValues<T>> {
    if payload.len() != mask.count() {
        return Err(FedMapError::structural(format!(
            "payload has {} values but the mask keeps {}",
            payload.len(),
            mask.count()
        )));
    }
    let mut out = LayerValues::zeros(&mask.sizes());
    for ((l, i), &v) in mask.support().zip(&payload.values) {
        out.layers_mut()[l][i] = v;
    }
    Ok(out)
}

/// Bytes for `count` values at `bits_per_param`.
pub fn value_bytes(count: usize, bits_per_param: u32) -> u64 {
    (count as u64 * u64::from(bits_per_param)).div_ceil(8)
}

/// Bytes for a flat bitmap over `d` positions.
pub fn mask_bytes(d: usize) -> u64 {
    (d as u64).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Bytes moved in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundBytes {
    /// Size of one client's upload.
    pub uplink_per_client: u64,
    /// Size of the message each client receives, mask included.
    pub downlink: u64,
    /// Mask bytes inside `downlink`.
    pub mask_bytes: u64,
    /// Every message of the round, all clients and both directions.
    pub total: u64,
    /// Running total up to and including this round.
    pub cumulative: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ByteLedger {
    bits_per_param: u32,
    current: RoundBytes,
    history: Vec<RoundBytes>,
    cumulative: u64,
}

impl ByteLedger {
    pub fn new(bits_per_param: u32) -> Self {
        Self {
            bits_per_param,
            current: RoundBytes::default(),
            history: Vec::new(),
            cumulative: 0,
        }
    }

    pub fn bits_per_param(&self) -> u32 {
        self.bits_per_param
    }

    /// Records one message of `k` values, optionally followed by a `d`-bit
    /// mask. Returns the message size in bytes.
    pub fn account(&mut self, k: usize, direction: Direction, with_mask: bool, d: usize) -> u64 {
        let params = value_bytes(k, self.bits_per_param);
        let mask = if with_mask { mask_bytes(d) } else { 0 };
        let bytes = params + mask;
        match direction {
            Direction::Up => self.current.uplink_per_client = bytes,
            Direction::Down => {
                self.current.downlink = bytes;
                self.current.mask_bytes = mask;
            }
        }
        self.current.total += bytes;
        bytes
    }

    /// Closes the current round and starts a fresh one.
    pub fn close_round(&mut self) -> RoundBytes {
        self.cumulative += self.current.total;
        let mut done = std::mem::take(&mut self.current);
        done.cumulative = self.cumulative;
        self.history.push(done);
        done
    }

    pub fn history(&self) -> &[RoundBytes] {
        &self.history
    }

    pub fn cumulative(&self) -> u64 {
        self.cumulative
    }
}

/// Header of one `FPAY1` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub round: u32,
    pub client: u32,
}

/// `FPAY1`, `u32` round, `u32` client id, `u32` K, then K little-endian floats
/// of `bits_per_param` width (32 or 64).
pub fn encode_frame<T: Scalar>(
    header: FrameHeader,
    values: &[T],
    bits_per_param: u32,
) -> Result<Vec<u8>> {
    check_width(bits_per_param)?;
    let k = u32::try_from(values.len())
        .map_err(|_| FedMapError::structural("payload too long for a u32 count"))?;
    let mut out = Vec::with_capacity(17 + value_bytes(values.len(), bits_per_param) as usize);
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.extend_from_slice(&header.round.to_le_bytes());
    out.extend_from_slice(&header.client.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for v in values {
        match bits_per_param {
            32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_frame<T: Scalar>(bytes: &[u8], bits_per_param: u32) -> Result<(FrameHeader, Vec<T>)> {
    check_width(bits_per_param)?;
    if bytes.len() < 17 || &bytes[..5] != PAYLOAD_MAGIC {
        return Err(FedMapError::Format("not an FPAY1 frame".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let header = FrameHeader {
        round: word(5),
        client: word(9),
    };
    let k = word(13) as usize;
    let width = bits_per_param as usize / 8;
    let body = &bytes[17..];
    if body.len() != k * width {
        return Err(FedMapError::Format(format!(
            "frame declares {k} values but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(width)
        .map(|c| match width {
            4 => T::of(f64::from(f32::from_le_bytes(
                c.try_into().expect("4 bytes"),
            ))),
            _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        })
        .collect();
    Ok((header, values))
}

fn check_width(bits: u32) -> Result<()> {
    if bits == 32 || bits == 64 {
        Ok(())
    } else {
        Err(FedMapError::config(
            "bits_per_param",
            format!("wire format supports 32 or 64 bits, got {bits}"),
        ))
    }
}
