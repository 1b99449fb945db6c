//! Latent ODE machinery: a differentiable Runge–Kutta solver and the dynamic
//! preference model built on it.

pub mod dynamic;
pub mod solver;

pub use dynamic::{
    build_grid, dynamic_loss, embed_behavior, event_times, kl_to_standard_normal, nhpp_loglik, reconstruction_loglik,
    reparameterize, BehaviorEmbedder, DynNetworks, DynamicConfig, DynamicOutput, TimeAxis, INTENSITY_EPS,
};
pub use solver::{
    odeint, odeint_replay, trapezoid, trapezoid_weights, Solution, SolverConfig, SolverMethod, StepRecord,
};
