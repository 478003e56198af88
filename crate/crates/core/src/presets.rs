//! The bundled synthetic benchmark: a small region tree and a model/training
//! configuration sized to train in seconds on a desktop CPU.

use crate::data::SyntheticSpec;
use crate::encoders::EncoderConfig;
use crate::training::{derive_seed, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub data: SyntheticSpec,
    pub brain: EncoderConfig,
    pub text: EncoderConfig,
    pub train: TrainConfig,
}

/// Encoder configs with seeds derived from a single run seed.
pub fn encoder_configs(
    brain_dim: usize,
    text_dim: usize,
    hidden: usize,
    out: usize,
    seed: u64,
) -> (EncoderConfig, EncoderConfig) {
    let brain = EncoderConfig {
        hidden_dim: hidden,
        output_dim: out,
        ..EncoderConfig::brain(brain_dim, derive_seed(seed, 1))
    };
    let text = EncoderConfig {
        hidden_dim: hidden,
        output_dim: out,
        ..EncoderConfig::text(text_dim, derive_seed(seed, 2))
    };
    (brain, text)
}

impl Preset {
    /// Same data, different model initialisation, shuffling and folds.
    pub fn with_run_seed(self, seed: u64) -> Preset {
        let (brain, text) = encoder_configs(
            self.brain.input_dim,
            self.text.input_dim,
            self.brain.hidden_dim,
            self.brain.output_dim,
            seed,
        );
        Preset {
            brain,
            text,
            train: TrainConfig { seed, ..self.train },
            ..self
        }
    }
}

/// Depth-3, branching-3 tree with 30 samples per node (390 pairs); every
/// seed (data, initialisation, shuffling) set to `seed`.
pub fn synthetic_benchmark(seed: u64) -> Preset {
    let data = SyntheticSpec {
        tree_depth: 3,
        branching: 3,
        samples_per_node: 30,
        seed,
        ..SyntheticSpec::default()
    };
    let (brain, text) = encoder_configs(data.brain_dim, data.text_dim, HIDDEN, OUT, seed);
    let train = TrainConfig {
        epochs: EPOCHS,
        batch_size: BATCH,
        lr: LR,
        seed,
        ..TrainConfig::default()
    };
    Preset {
        data,
        brain,
        text,
        train,
    }
}

const HIDDEN: usize = 64;
const OUT: usize = 16;
const EPOCHS: usize = 200;
const BATCH: usize = 64;
const LR: f64 = 1e-3;
