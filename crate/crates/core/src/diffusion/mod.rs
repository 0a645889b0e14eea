//! Toy conditional diffusion testbed on labelled 2-D Gaussian mixtures.

mod data;
mod loss;
mod model;
mod sampler;
mod schedule;

pub use data::{read_samples, write_samples, ConceptSet, ConceptSpec, LabeledSample};
pub use loss::{denoise_loss, denoise_loss_with, denoise_term, NoiseDraws};
pub use model::{predict, time_embedding, Architecture, DenoiserModel, Layout, NoisePredictor};
pub use sampler::{sample, sample_labels};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, Point, ScheduleDescriptor};
