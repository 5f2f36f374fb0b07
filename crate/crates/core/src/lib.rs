//! Class-incremental semantic segmentation: scenario construction, region
//! proposals, a two-branch proposal-classification model, label remodeling,
//! unseen-class mining losses, replay memory, training and evaluation.

pub mod error;
pub mod eval;
pub mod kv;
pub mod losses;
pub mod memory;
pub mod model;
pub mod par;
pub mod proposals;
pub mod remodel;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Exec;
