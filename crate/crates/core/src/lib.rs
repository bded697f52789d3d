pub mod anonymizer;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gan;
pub mod mlp;
pub mod model;
pub mod nn;
pub mod ot;
pub mod sampler;
pub mod scalar;
pub mod strategy;
pub mod vector;

pub use error::{Error, Result};

pub type SpeakerVectorF64 = vector::SpeakerVector<f64>;
pub type SpeakerVectorF32 = vector::SpeakerVector<f32>;
pub type NetworkF64 = nn::Network<f64>;
pub type NetworkF32 = nn::Network<f32>;
