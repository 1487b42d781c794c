//! Model-inversion attack workbench: autodiff, models, losses,
//! augmentation, attacks, metrics, theory checks and data loading.

pub mod attacks;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
