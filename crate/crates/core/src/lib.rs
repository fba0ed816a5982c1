pub mod assignment;
pub mod balance;
pub mod cli;
pub mod design;
pub mod error;
pub mod estimators;
pub mod fisher;
pub mod linalg;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod simulation;

pub use assignment::Assignment;
pub use design::{fit_projection, CenteredDesign, LinearProjection, Sample};
pub use error::{Error, Result};
