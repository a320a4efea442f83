//! Desk-scale molecular graph pre-training.
//!
//! SMILES strings become [`chem::MolGraph`]s, which are stitched into
//! [`molgnet::BatchedGraph`]s with a virtual collection node and run through
//! the MolGNet message-passing encoder.

pub mod checkpoint;
pub mod chem;
mod error;
pub mod molgnet;
pub mod numcore;
pub mod params;
pub mod ssl;
pub mod synthetic;
pub mod tasks;

pub use error::{Error, Result};
