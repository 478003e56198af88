//! Hyperbolic (Lorentz-model) joint embeddings for brain activation maps and
//! text, with hierarchy-aware training objectives.

pub(crate) mod binio;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod par;
pub mod presets;
pub mod training;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, PairedSample, SyntheticSpec};
pub use encoders::{EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use geometry::{Curvature, LorentzPoint};
pub use losses::{LossBreakdown, LossConfig};
pub use model::DualEncoder;
pub use training::{TrainConfig, TrainState};
