//! Physics-informed neural networks with Dirichlet/Neumann-aligned Fourier
//! features (DaFFs), loss balancing and layer-wise relevance propagation.

pub mod balancer;
pub mod config;
pub mod eigen;
pub mod error;
pub mod features;
pub mod harness;
pub mod jet;
pub mod lrp;
pub mod model;
pub mod network;
pub mod optim;
pub mod problems;
pub mod tape;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use jet::Jet;
