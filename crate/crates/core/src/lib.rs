//! Self-supervised axial super-resolution for anisotropic volumetric stacks.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod critic;
pub mod error;
pub mod evalkit;
pub mod flownet;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod shapelab;
pub mod synth;
pub mod trainer;
pub mod triplets;
pub mod volio;
pub mod zaugment;

pub use error::{Error, Result};
