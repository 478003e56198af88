//! Paired brain/text feature records, the binary container they are stored
//! in, and a synthetic generator with a known region hierarchy.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "MNMDATA1"  u32 version  u32 N  u32 B  u32 T  f64 delta
//! N x ( B x f64 brain, T x f64 text, u32 region_count )
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MNMDATA1";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_DELTA: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub brain: Vec<f64>,
    pub text: Vec<f64>,
    pub region_count: u32,
}

/// Number of entries strictly greater than `delta`.
pub fn compute_region_count(brain: &[f64], delta: f64) -> u32 {
    brain.iter().filter(|v| **v > delta).count() as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<PairedSample>,
    brain_dim: usize,
    text_dim: usize,
    delta: f64,
    provenance: String,
}

impl Dataset {
    /// Builds a dataset from raw feature pairs, deriving region counts.
    pub fn from_pairs(
        pairs: Vec<(Vec<f64>, Vec<f64>)>,
        brain_dim: usize,
        text_dim: usize,
        delta: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let samples = pairs
            .into_iter()
            .map(|(brain, text)| PairedSample {
                region_count: compute_region_count(&brain, delta),
                brain,
                text,
            })
            .collect();
        let ds = Dataset {
            samples,
            brain_dim,
            text_dim,
            delta,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn brain_dim(&self) -> usize {
        self.brain_dim
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn region_counts(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.region_count).collect()
    }

    /// Checks dimensions, finiteness and stored region counts; errors name
    /// the first offending sample.
    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::Validation(format!("non-finite delta {}", self.delta)));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.brain.len() != self.brain_dim || s.text.len() != self.text_dim {
                return Err(Error::Validation(format!(
                    "sample {i}: dims ({}, {}) differ from dataset dims ({}, {})",
                    s.brain.len(),
                    s.text.len(),
                    self.brain_dim,
                    self.text_dim
                )));
            }
            if s.brain.iter().chain(&s.text).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("sample {i}: non-finite value")));
            }
            let expected = compute_region_count(&s.brain, self.delta);
            if s.region_count != expected {
                return Err(Error::Validation(format!(
                    "sample {i}: stored region count {} but {} entries exceed delta {}",
                    s.region_count, expected, self.delta
                )));
            }
        }
        Ok(())
    }

    /// Copies the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            brain_dim: self.brain_dim,
            text_dim: self.text_dim,
            delta: self.delta,
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.len(self.samples.len(), "sample count")?;
        w.len(self.brain_dim, "brain dim")?;
        w.len(self.text_dim, "text dim")?;
        w.f64(self.delta);
        for s in &self.samples {
            w.f64s(&s.brain);
            w.f64s(&s.text);
            w.u32(s.region_count);
        }
        Ok(w.finish())
    }

    /// Parses and validates a container. Nothing is returned unless the
    /// whole payload is well-formed.
    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let mut r = Reader::new(bytes, DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = r.usize()?;
        let brain_dim = r.usize()?;
        let text_dim = r.usize()?;
        let delta = r.f64()?;
        let record = (brain_dim + text_dim) as u64 * 8 + 4;
        if record * n as u64 != r.remaining() as u64 {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                r.remaining(),
                record * n as u64
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let brain = r.f64s(brain_dim)?;
            let text = r.f64s(text_dim)?;
            let region_count = r.u32()?;
            samples.push(PairedSample {
                brain,
                text,
                region_count,
            });
        }
        r.expect_end()?;
        let ds = Dataset {
            samples,
            brain_dim,
            text_dim,
            delta,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes, format!("file:{}", path.display()))
}

#[derive(Deserialize)]
struct JsonRecord {
    brain: Vec<f64>,
    text: Vec<f64>,
}

/// Imports one `{"brain": [...], "text": [...]}` object per line. Blank
/// lines are skipped; region counts are computed with `delta`.
pub fn load_jsonl(path: impl AsRef<Path>, delta: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        pairs.push((rec.brain, rec.text));
    }
    let (b, t) = pairs
        .first()
        .map(|(b, t)| (b.len(), t.len()))
        .ok_or_else(|| Error::Validation(format!("{}: no records", path.display())))?;
    Dataset::from_pairs(pairs, b, t, delta, format!("jsonl:{}", path.display()))
}

/// Parameters of the synthetic region tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tree_depth: usize,
    pub branching: usize,
    pub samples_per_node: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub brain_dim: usize,
    pub text_dim: usize,
    pub delta: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tree_depth: 3,
            branching: 3,
            samples_per_node: 30,
            noise_sigma: 0.5,
            seed: 0,
            brain_dim: 128,
            text_dim: 64,
            delta: DEFAULT_DELTA,
        }
    }
}

impl SyntheticSpec {
    /// `1 + b + ... + b^(depth-1)`.
    pub fn node_count(&self) -> usize {
        (0..self.tree_depth)
            .map(|l| self.branching.saturating_pow(l as u32))
            .fold(0usize, usize::saturating_add)
    }

    pub fn sample_count(&self) -> usize {
        self.node_count().saturating_mul(self.samples_per_node)
    }

    /// Tree node (breadth-first index) that generated sample `i`.
    pub fn node_of_sample(&self, i: usize) -> usize {
        i / self.samples_per_node
    }

    /// Depth of a breadth-first node index, root = 0.
    pub fn node_level(&self, node: usize) -> usize {
        let mut level = 0;
        let mut first_of_next = 1;
        let mut width = 1;
        while node >= first_of_next {
            width *= self.branching;
            first_of_next += width;
            level += 1;
        }
        level
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in [
            ("depth", self.tree_depth),
            ("branching", self.branching),
            ("per_node", self.samples_per_node),
            ("brain_dim", self.brain_dim),
            ("text_dim", self.text_dim),
        ] {
            if v == 0 {
                out.push(format!("{k} must be positive"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            out.push(format!("noise must be nonnegative, got {}", self.noise_sigma));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            out.push(format!("delta must be positive, got {}", self.delta));
        }
        if out.is_empty() && self.brain_dim < self.node_count() {
            out.push(format!(
                "brain_dim {} is smaller than the node count {}",
                self.brain_dim,
                self.node_count()
            ));
        }
        out
    }
}

/// Each tree node owns a block of brain coordinates; its support is its own
/// block plus every descendant's, so supports shrink strictly towards the
/// leaves. Supported coordinates get `2 delta`, every coordinate gets
/// Gaussian noise. Text vectors are a per-node Gaussian prototype plus
/// per-sample noise. Samples are emitted node by node, breadth first.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let nodes = spec.node_count();
    let own = spec.brain_dim / nodes;
    let mut support = vec![vec![false; spec.brain_dim]; nodes];
    for node in (0..nodes).rev() {
        for k in node * own..(node + 1) * own {
            support[node][k] = true;
        }
        for child in (1..=spec.branching).map(|j| spec.branching * node + j) {
            if child < nodes {
                let (head, tail) = support.split_at_mut(child);
                for (s, c) in head[node].iter_mut().zip(&tail[0]) {
                    *s |= *c;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let high = 2.0 * spec.delta;
    let mut pairs = Vec::with_capacity(spec.sample_count());
    for node_support in &support {
        let prototype: Vec<f64> = (0..spec.text_dim).map(|_| gauss(&mut rng)).collect();
        for _ in 0..spec.samples_per_node {
            let brain = node_support
                .iter()
                .map(|&on| if on { high } else { 0.0 } + spec.noise_sigma * gauss(&mut rng))
                .collect();
            let text = prototype
                .iter()
                .map(|p| p + spec.noise_sigma * gauss(&mut rng))
                .collect();
            pairs.push((brain, text));
        }
    }
    Dataset::from_pairs(
        pairs,
        spec.brain_dim,
        spec.text_dim,
        spec.delta,
        format!(
            "synthetic:depth={},branching={},per_node={},noise={},seed={}",
            spec.tree_depth, spec.branching, spec.samples_per_node, spec.noise_sigma, spec.seed
        ),
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled k-fold partition of `0..n`. Test folds are disjoint, cover every
/// index, and differ in size by at most one (the first `n % k` are larger).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut test = order[start..start + len].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}
