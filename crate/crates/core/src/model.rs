//! The brain/text encoder pair sharing one hyperboloid.

use crate::data::Dataset;
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, LorentzPoint};

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub brain: EncoderParams,
    pub text: EncoderParams,
    pub curvature: Curvature,
}

/// Embeddings of a dataset in record order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub brain: Vec<LorentzPoint>,
    pub text: Vec<LorentzPoint>,
}

impl DualEncoder {
    pub fn init(brain: EncoderConfig, text: EncoderConfig, curvature: Curvature) -> Result<Self> {
        let mut problems = brain.problems("brain");
        problems.extend(text.problems("text"));
        if brain.output_dim != text.output_dim {
            problems.push(format!(
                "brain.output_dim {} differs from text.output_dim {}",
                brain.output_dim, text.output_dim
            ));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        Ok(DualEncoder {
            brain: EncoderParams::init(brain)?,
            text: EncoderParams::init(text)?,
            curvature,
        })
    }

    /// Hyperbolic dimension `d`.
    pub fn dim(&self) -> usize {
        self.brain.config.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.brain.num_params() + self.text.num_params()
    }

    /// Brain tensors followed by text tensors.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.brain
            .tensors()
            .into_iter()
            .chain(self.text.tensors())
            .map(|(t, _)| t)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.brain.tensors_mut();
        out.extend(self.text.tensors_mut());
        out
    }

    /// Which tensors receive weight decay (weight matrices only).
    pub fn decay_mask(&self) -> Vec<bool> {
        self.brain
            .tensors()
            .into_iter()
            .chain(self.text.tensors())
            .map(|(_, kind)| kind.decays())
            .collect()
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    /// Rejects datasets whose feature widths differ from the encoder inputs.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let mut problems = Vec::new();
        if ds.brain_dim() != self.brain.config.input_dim {
            problems.push(format!(
                "dataset brain_dim {} but checkpoint brain input_dim {}",
                ds.brain_dim(),
                self.brain.config.input_dim
            ));
        }
        if ds.text_dim() != self.text.config.input_dim {
            problems.push(format!(
                "dataset text_dim {} but checkpoint text input_dim {}",
                ds.text_dim(),
                self.text.config.input_dim
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn embed(&self, ds: &Dataset) -> Result<Embeddings> {
        self.check_dataset(ds)?;
        self.embed_indices(ds, &(0..ds.len()).collect::<Vec<_>>())
    }

    pub fn embed_indices(&self, ds: &Dataset, indices: &[usize]) -> Result<Embeddings> {
        let s = ds.samples();
        let brain_in: Vec<&[f64]> = indices.iter().map(|&i| s[i].brain.as_slice()).collect();
        let text_in: Vec<&[f64]> = indices.iter().map(|&i| s[i].text.as_slice()).collect();
        let (brain, _) = self.brain.forward_batch(&brain_in, self.curvature)?;
        let (text, _) = self.text.forward_batch(&text_in, self.curvature)?;
        Ok(Embeddings { brain, text })
    }
}
