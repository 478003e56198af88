//! Versioned binary checkpoints.
//!
//! ```text
//! "MNMCKPT1"  u32 version
//! brain: u32 input, hidden, output, depth, seed_lo, seed_hi
//! text:  u32 input, hidden, output, depth, seed_lo, seed_hi
//! u32 run_seed_lo, run_seed_hi, epochs_completed, has_optimizer
//! f64 curvature
//! brain tensors, text tensors              (f64, declaration order)
//! [u32 step_lo, step_hi, first moments, second moments]   if has_optimizer
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::model::DualEncoder;
use crate::training::{OptimizerState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder,
    pub seed: u64,
    pub epochs_completed: usize,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, seed: u64) -> Self {
        Checkpoint {
            model: state.model.clone(),
            seed,
            epochs_completed: state.epochs_completed,
            optimizer: Some(state.optimizer.clone()),
        }
    }

    /// Training state to resume from; moments restart at zero when the
    /// checkpoint carries none.
    pub fn into_state(self) -> TrainState {
        let optimizer = self
            .optimizer
            .unwrap_or_else(|| OptimizerState::new(&self.model.tensor_lens()));
        TrainState {
            model: self.model,
            optimizer,
            epochs_completed: self.epochs_completed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for cfg in [&self.model.brain.config, &self.model.text.config] {
            w.len(cfg.input_dim, "input_dim")?;
            w.len(cfg.hidden_dim, "hidden_dim")?;
            w.len(cfg.output_dim, "output_dim")?;
            w.len(cfg.depth, "depth")?;
            write_u64(&mut w, cfg.seed);
        }
        write_u64(&mut w, self.seed);
        w.len(self.epochs_completed, "epochs_completed")?;
        w.u32(u32::from(self.optimizer.is_some()));
        w.f64(self.model.curvature.value());
        for t in self.model.tensors() {
            w.f64s(t);
        }
        if let Some(opt) = &self.optimizer {
            if opt.lens() != self.model.tensor_lens() {
                return Err(Error::Validation(
                    "optimizer state does not match model shapes".into(),
                ));
            }
            write_u64(&mut w, opt.step);
            for t in opt.m.iter().chain(&opt.v) {
                w.f64s(t);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let brain_cfg = read_config(&mut r)?;
        let text_cfg = read_config(&mut r)?;
        let seed = read_u64(&mut r)?;
        let epochs_completed = r.usize()?;
        let has_optimizer = match r.u32()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        let curvature = Curvature::new(r.f64()?)
            .map_err(|e| Error::Format(format!("stored curvature: {e}")))?;

        let mut problems = brain_cfg.problems("brain");
        problems.extend(text_cfg.problems("text"));
        if !problems.is_empty() {
            return Err(Error::Format(problems.join("; ")));
        }
        // Shapes are fixed by the header; check the byte count before
        // allocating anything proportional to it.
        let floats = param_count(&brain_cfg) + param_count(&text_cfg);
        let (copies, extra) = if has_optimizer { (3, 8) } else { (1, 0) };
        let expected = floats * 8 * copies + extra;
        if expected != r.remaining() as u128 {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                r.remaining()
            )));
        }
        let shapes: Vec<usize> = EncoderParams::tensor_lens_for(&brain_cfg)
            .into_iter()
            .chain(EncoderParams::tensor_lens_for(&text_cfg))
            .collect();

        let mut model = DualEncoder {
            brain: EncoderParams::zeros(brain_cfg)?,
            text: EncoderParams::zeros(text_cfg)?,
            curvature,
        };
        for t in model.tensors_mut() {
            let vals = r.f64s(t.len())?;
            t.copy_from_slice(&vals);
        }
        let optimizer = if has_optimizer {
            let step = read_u64(&mut r)?;
            let m = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            let v = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
            Some(OptimizerState { m, v, step })
        } else {
            None
        };
        r.expect_end()?;
        if !model.brain.is_finite() || !model.text.is_finite() {
            return Err(Error::Validation("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint {
            model,
            seed,
            epochs_completed,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_u64(w: &mut Writer, v: u64) {
    w.u32(v as u32);
    w.u32((v >> 32) as u32);
}

fn read_u64(r: &mut Reader) -> Result<u64> {
    let lo = r.u32()? as u64;
    let hi = r.u32()? as u64;
    Ok(lo | (hi << 32))
}

fn param_count(cfg: &EncoderConfig) -> u128 {
    let (i, h, o, d) = (
        cfg.input_dim as u128,
        cfg.hidden_dim as u128,
        cfg.output_dim as u128,
        cfg.depth as u128,
    );
    i * h + h + d * (h * h + 3 * h) + 2 * h + h * o + o
}

fn read_config(r: &mut Reader) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        input_dim: r.usize()?,
        hidden_dim: r.usize()?,
        output_dim: r.usize()?,
        depth: r.usize()?,
        seed: read_u64(r)?,
    })
}
