//! Mini-batch SGD with history-driven sample emphasis ("active bias"),
//! plus Laplace-approximation tools for binary logistic regression.

pub mod analysis;
pub mod data;
pub mod emphasis;
pub mod error;
pub mod experiment;
pub mod history;
pub mod models;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
