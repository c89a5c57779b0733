//! A small CPU convolutional network stack with hand-written backpropagation.

pub mod adam;
pub mod audit;
pub mod bsn;
pub mod checkpoint;
pub mod conv;
pub mod tensor;

pub use adam::Adam;
pub use audit::{blind_spot_audit, AuditReport, AuditTrial};
pub use bsn::{Bsn, BsnConfig, BsnGrads};
pub use checkpoint::{Checkpoint, TrainingMeta};
pub use conv::{Conv2d, ConvGrad};
pub use tensor::{Activations, Real};
