//! Contrastive visual forgetting with null-space constrained low-rank
//! adapters, on a desk-scale multimodal model.

pub mod autodiff;
pub mod linalg;
pub mod rng;
pub mod codec;
pub mod world;
pub mod model;
pub mod losses;
pub mod eval;
pub mod ncu;
pub mod engine;
pub mod gradcheck;
