//! Dense arrays, a reverse-mode tape, Adam, and seeded sampling.

mod kernels;
mod optim;
mod params;
mod rng;
mod sample;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{attention, conv1d, conv1d_out_len, gelu, layernorm, matmul, softmax, LAYERNORM_EPS};
pub use optim::{adam_step, clip_grad_norm, cosine_lr, warmup_lr, AdamConfig, AdamState};
pub use params::{Bound, ParamStore};
pub use rng::Rng;
pub use sample::{argmax_categorical, sample_categorical};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
