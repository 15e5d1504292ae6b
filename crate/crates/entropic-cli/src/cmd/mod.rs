pub mod convergence;
pub mod logcase;
pub mod market;
pub mod plan;
pub mod solve;
pub mod verify;
