//! Dense tensors, feed-forward networks, reverse-mode gradients, Adam and
//! the cross-entropy losses.

mod adam;
mod batch;
mod checkpoint;
mod layer;
mod loss;
mod model;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use batch::epoch_batches;
pub use checkpoint::Checkpoint;
pub use layer::{LayerSpec, NetworkSpec, OutputActivation, DEFAULT_LEAK};
pub use loss::{
    bce_term, binary_cross_entropy, binary_cross_entropy_grad, binary_cross_entropy_logit_grad,
    categorical_cross_entropy, categorical_cross_entropy_grad, clamp_prob, PROB_FLOOR,
};
pub(crate) use loss::bce_sum;
pub use model::{argmax, sigmoid, softmax, AdamState, ForwardTrace, Gradients, Model, ParamMap};
pub use tensor::Tensor;
