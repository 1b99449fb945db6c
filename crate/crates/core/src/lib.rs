//! Out-of-town trip recommendation. Static preferences come from hometown
//! history enriched by a POI knowledge graph; dynamic preferences evolve as a
//! latent ODE with a point-process intensity; both feed a fusion head that
//! scores the target region's POIs for every trip position.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kg;
pub mod model;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod par;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use par::Execution;
