//! Class-conditional denoising diffusion on low-dimensional vectors and
//! label-mixup outlier generation.
//!
//! The denoiser sees `concat(x_t, label_vector, time_embedding)` and predicts
//! the injected noise. Conditioning on the element-wise sum of two one-hot
//! vectors, a combination never seen in training, yields samples between
//! the two classes.

mod denoiser;
mod schedule;

pub use denoiser::{
    denoising_loss, generate_label_mixup, sample, time_embedding, train_denoiser, DdpmConfig, DenoiserModel,
    DenoiserTraining, LabelVector,
};
pub use schedule::{forward_noise, make_schedule, DiffusionSchedule};
