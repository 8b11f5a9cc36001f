//! Binary pruning masks and the `FMSK1` mask file.
//!
//! File layout (little-endian): magic `FMSK1`, `u32` layer count, `u32` bit
//! count per layer, then one bitmap per layer. Bit `i` of a layer lives in
//! byte `i / 8` at position `i % 8` (least significant first); each layer's
//! bitmap is padded to a whole byte.

use std::io::Read;
use std::path::Path;

use crate::error::{FedMapError, Result};
use crate::io_util::{read_u32, write_atomic};

pub const MASK_MAGIC: &[u8; 5] = b"FMSK1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct BitLayer {
    len: usize,
    words: Vec<u64>,
}

impl BitLayer {
    fn filled(len: usize, on: bool) -> Self {
        let mut words = vec![if on { u64::MAX } else { 0 }; len.div_ceil(64)];
        if on && !len.is_multiple_of(64) {
            *words.last_mut().expect("nonempty") = (1u64 << (len % 64)) - 1;
        }
        Self { len, words }
    }

    fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize, on: bool) {
        let bit = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Per-layer survival bits over the prunable weights, in the same flat
/// row-major order as the weight tensors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PruneMask {
    layers: Vec<BitLayer>,
    count: usize,
}

impl PruneMask {
    pub fn ones(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| BitLayer::filled(n, true)).collect(),
            count: sizes.iter().sum(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| BitLayer::filled(n, false)).collect(),
            count: 0,
        }
    }

    pub fn from_bools(layers: &[Vec<bool>]) -> Self {
        let mut mask = Self::zeros(&layers.iter().map(Vec::len).collect::<Vec<_>>());
        for (li, bits) in layers.iter().enumerate() {
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    mask.set(li, i, true);
                }
            }
        }
        mask
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|l| (0..l.len).map(|i| l.get(i)).collect())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of positions `d`.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of surviving positions.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, layer: usize, index: usize) -> bool {
        self.layers[layer].get(index)
    }

    pub fn set(&mut self, layer: usize, index: usize, on: bool) {
        let l = &mut self.layers[layer];
        let was = l.get(index);
        if was != on {
            l.set(index, on);
            if on {
                self.count += 1;
            } else {
                self.count -= 1;
            }
        }
    }

    /// Surviving positions as `(layer, flat index)` in canonical order.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| (0..l.len).filter(move |&i| l.get(i)).map(move |i| (li, i)))
    }

    pub(crate) fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        if self.sizes() == sizes {
            Ok(())
        } else {
            Err(FedMapError::structural(format!(
                "mask layer sizes {:?} do not match {:?}",
                self.sizes(),
                sizes
            )))
        }
    }

    /// `supp(self) ⊆ supp(other)`.
    pub fn is_subset(&self, other: &PruneMask) -> Result<bool> {
        other.check_sizes(&self.sizes())?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.words.iter().zip(&b.words).all(|(x, y)| x & !y == 0)))
    }

    /// Number of bytes needed to send this mask as one flat bitmap.
    pub fn wire_bytes(&self) -> u64 {
        (self.len() as u64).div_ceil(8)
    }

    /// Recounts set bits; equals [`PruneMask::count`] by construction.
    pub fn popcount(&self) -> usize {
        self.layers.iter().map(BitLayer::popcount).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.len as u32).to_le_bytes());
        }
        for l in &self.layers {
            let nbytes = l.len.div_ceil(8);
            let bytes = l.words.iter().flat_map(|w| w.to_le_bytes());
            out.extend(bytes.take(nbytes));
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| FedMapError::Format("mask truncated before magic".into()))?;
        if &magic != MASK_MAGIC {
            return Err(FedMapError::Format("not an FMSK1 mask".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let sizes = (0..n)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut mask = PruneMask::zeros(&sizes);
        for (li, &len) in sizes.iter().enumerate() {
            let mut buf = vec![0u8; len.div_ceil(8)];
            r.read_exact(&mut buf)
                .map_err(|_| FedMapError::Format(format!("mask bitmap {li} truncated")))?;
            for i in 0..len {
                if buf[i / 8] >> (i % 8) & 1 == 1 {
                    mask.set(li, i, true);
                }
            }
            if len % 8 != 0 && buf[len / 8] >> (len % 8) != 0 {
                return Err(FedMapError::Format(format!(
                    "mask bitmap {li} has bits set past its length"
                )));
            }
        }
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FedMapError::io(path, e))?;
        Self::from_reader(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_and_zeros_counts() {
        let m = PruneMask::ones(&[3, 70]);
        assert_eq!(m.count(), 73);
        assert_eq!(m.popcount(), 73);
        // bits past the layer length stay clear
        assert_eq!(m.layers[1].words[1] >> 6, 0);
        let z = PruneMask::zeros(&[3, 70]);
        assert_eq!(z.count(), 0);
        assert!(z.is_subset(&m).unwrap());
        assert!(!m.is_subset(&z).unwrap());
    }

    #[test]
    fn subset_detects_extra_bit() {
        let b = PruneMask::from_bools(&[vec![true, false, true], vec![false, true]]);
        let mut a = PruneMask::from_bools(&[vec![true, false, false], vec![false, true]]);
        assert!(a.is_subset(&a).unwrap());
        assert!(a.is_subset(&b).unwrap());
        a.set(0, 1, true);
        assert!(!a.is_subset(&b).unwrap());
    }

    #[test]
    fn subset_shape_mismatch_is_error() {
        let a = PruneMask::ones(&[3]);
        let b = PruneMask::ones(&[4]);
        assert!(a.is_subset(&b).is_err());
    }

    #[test]
    fn file_roundtrip_and_layout() {
        let m = PruneMask::from_bools(&[
            vec![true, false, true, true, false, false, false, false, true],
            vec![false, true],
        ]);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..5], b"FMSK1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &9u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..], &[0b0000_1101, 0b1, 0b10]);
        assert_eq!(PruneMask::from_reader(bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_magic_and_padding() {
        assert!(PruneMask::from_reader(&b"FMSK0\0\0\0\0"[..]).is_err());
        let mut bytes = PruneMask::zeros(&[3]).to_bytes();
        *bytes.last_mut().unwrap() = 0b1000;
        assert!(PruneMask::from_reader(bytes.as_slice()).is_err());
    }
}
