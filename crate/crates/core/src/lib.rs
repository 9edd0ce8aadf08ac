pub mod artifact;
pub mod datapipe;
pub mod error;
pub mod experiments;
pub mod kdpc;
pub mod multisine;
pub mod numerics;
pub mod observables;
pub mod plants;
pub mod predictor;
pub mod terminal;

pub use error::{Error, Result};
