pub mod activation;
pub mod dynamics;
pub mod error;
pub mod gauss;
pub mod lanczos;
pub mod linalg;
pub mod meanfield;
pub mod network;
pub mod rng;
pub mod spectra;
pub mod theory;
