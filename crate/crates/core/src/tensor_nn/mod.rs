//! Dense MLP engine: forward pass, exact backpropagation, SGD with weight
//! decay and mask-respecting local training.

mod checkpoint;
mod engine;
mod model;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use engine::{
    backward, evaluate, forward, sgd_step, train_local, Evaluation, ForwardOutput, LocalTraining,
    Proximal,
};
pub use model::{Activation, Batch, Dataset, Gradients, Layer, LayerValues, Model};
pub use tensor::WeightTensor;
