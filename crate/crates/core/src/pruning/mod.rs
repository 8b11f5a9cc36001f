//! LAMP scoring, global magnitude pruning and mask algebra.

mod lamp;
mod mask;

pub use lamp::{apply_mask, is_subset, lamp_layer, lamp_scores, prune, prune_within, LampScores};
pub use mask::{PruneMask, MASK_MAGIC};
