//! Margin disparity discrepancy (MDD) domain adaptation on synthetic
//! FMCW-radar spectrograms: a self-contained reverse-mode autodiff tape,
//! the margin-loss family, a two-branch convolutional network with an
//! adversarial scorer head, adversarial minimax training via gradient
//! reversal, and a deterministic synthetic data generator whose domain
//! shift comes from the radar configuration.

pub mod error;
pub mod losses;
pub mod mdd;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{MddError, Result};
pub use losses::{Margin, Scores};
pub use mdd::{ObjectiveConfig, Variant, DEFAULT_RHO};
pub use model::{MddNetwork, ModelConfig, Part};
pub use rng::Xoshiro256;
pub use synthdata::{DomainDataset, DomainPair, RadarConfigSpec, SpectrogramSample};
pub use tensor::{Tape, Var};
pub use train::{EvalReport, Metrics, TrainingConfig};
