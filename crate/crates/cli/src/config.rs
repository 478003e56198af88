//! Flat run settings: a JSON file of `key: value` pairs, overridden by flags
//! of the same name (kebab-case on the command line, snake_case in JSON).

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use hyperbrain::data::{load_dataset, load_jsonl, SyntheticSpec};
use hyperbrain::{Curvature, Dataset, EncoderConfig, LossConfig, TrainConfig};

/// Takes each field from `top` when set there, else from `self`.
macro_rules! overlay {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(self, top: $ty) -> $ty {
                $ty { $($f: top.$f.or(self.$f)),* }
            }
        }
    };
}

/// Where the paired features come from.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataArgs {
    /// Dataset container (.bin) or JSON-lines file (.jsonl). Omit to use a
    /// synthetic tree dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic tree depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Synthetic children per node.
    #[arg(long)]
    pub branching: Option<usize>,
    /// Synthetic samples per tree node.
    #[arg(long)]
    pub per_node: Option<usize>,
    /// Synthetic noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub brain_dim: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    /// Region-count threshold (synthetic data and JSON-lines import).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(DataArgs { data, depth, branching, per_node, noise, brain_dim, text_dim, delta, seed });

/// Model shape, optimiser and loss settings.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hyperbolic dimension of the embeddings.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub brain_depth: Option<usize>,
    #[arg(long)]
    pub text_depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Centroid loss weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Hierarchy loss weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Text centroid target (`acosh(c p) / sqrt(c)` from the origin).
    #[arg(long)]
    pub p: Option<f64>,
    /// Brain centroid target.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Also contrast brain candidates for each text anchor.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetric: Option<bool>,
}

overlay!(FitArgs {
    hidden, dim, brain_depth, text_depth, epochs, batch_size, lr, weight_decay, adam_beta1,
    adam_beta2, adam_eps, tau, lambda1, lambda2, p, q, curvature, symmetric,
});

fn keys_of<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("settings serialise to objects"),
    }
}

fn one_key<T: DeserializeOwned>(k: &str, v: &Value) -> Result<T, String> {
    let mut m = Map::new();
    m.insert(k.to_string(), v.clone());
    serde_json::from_value(Value::Object(m)).map_err(|e| format!("{k}: {e}"))
}

/// Reads a flat JSON settings file. Every unknown key and every ill-typed
/// value is reported, not just the first.
pub fn read_file(path: &Path) -> Result<(DataArgs, FitArgs, Vec<String>), Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
    let map: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| vec![format!("config {}: {e}", path.display())])?;
    let (data_keys, fit_keys) = (keys_of::<DataArgs>(), keys_of::<FitArgs>());
    let mut data = DataArgs::default();
    let mut fit = FitArgs::default();
    let mut problems = Vec::new();
    for (k, v) in &map {
        if data_keys.contains(k) {
            match one_key::<DataArgs>(k, v) {
                Ok(d) => data = data.overlay(d),
                Err(e) => problems.push(e),
            }
        } else if fit_keys.contains(k) {
            match one_key::<FitArgs>(k, v) {
                Ok(f) => fit = fit.overlay(f),
                Err(e) => problems.push(e),
            }
        } else {
            problems.push(format!("{k}: unknown key"));
        }
    }
    Ok((data, fit, problems))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Source {
    pub fn load(&self, delta: f64) -> hyperbrain::Result<Dataset> {
        match self {
            Source::File(p) if p.extension().is_some_and(|e| e == "jsonl") => load_jsonl(p, delta),
            Source::File(p) => load_dataset(p),
            Source::Synthetic(spec) => hyperbrain::data::generate_synthetic(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: Source,
    pub delta: f64,
    pub seed: u64,
}

/// Resolves data settings, collecting every problem.
pub fn resolve_data(d: &DataArgs, problems: &mut Vec<String>) -> DataSettings {
    let seed = d.seed.unwrap_or(0);
    let delta = d.delta.unwrap_or(hyperbrain::data::DEFAULT_DELTA);
    let synthetic_keys: Vec<&str> = [
        ("depth", d.depth.is_some()),
        ("branching", d.branching.is_some()),
        ("per_node", d.per_node.is_some()),
        ("noise", d.noise.is_some()),
        ("brain_dim", d.brain_dim.is_some()),
        ("text_dim", d.text_dim.is_some()),
    ]
    .iter()
    .filter(|(_, set)| *set)
    .map(|(k, _)| *k)
    .collect();
    let source = if let Some(path) = &d.data {
        if !synthetic_keys.is_empty() {
            problems.push(format!(
                "data: a dataset path excludes synthetic keys ({})",
                synthetic_keys.join(", ")
            ));
        }
        if !(delta.is_finite() && delta > 0.0) {
            problems.push(format!("delta must be positive, got {delta}"));
        }
        Source::File(path.clone())
    } else {
        let base = SyntheticSpec::default();
        let spec = SyntheticSpec {
            tree_depth: d.depth.unwrap_or(base.tree_depth),
            branching: d.branching.unwrap_or(base.branching),
            samples_per_node: d.per_node.unwrap_or(base.samples_per_node),
            noise_sigma: d.noise.unwrap_or(base.noise_sigma),
            seed,
            brain_dim: d.brain_dim.unwrap_or(base.brain_dim),
            text_dim: d.text_dim.unwrap_or(base.text_dim),
            delta,
        };
        problems.extend(spec.problems());
        Source::Synthetic(spec)
    };
    DataSettings {
        source,
        delta,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub hidden: usize,
    pub dim: usize,
    pub brain_depth: usize,
    pub text_depth: usize,
}

impl ModelShape {
    /// Encoder configs for the given input widths, seeded from the run seed.
    pub fn encoders(&self, brain_dim: usize, text_dim: usize, seed: u64) -> (EncoderConfig, EncoderConfig) {
        let (mut b, mut t) =
            hyperbrain::presets::encoder_configs(brain_dim, text_dim, self.hidden, self.dim, seed);
        b.depth = self.brain_depth;
        t.depth = self.text_depth;
        (b, t)
    }
}

/// Resolves model and training settings, collecting every problem.
pub fn resolve_fit(f: &FitArgs, seed: u64, problems: &mut Vec<String>) -> Option<(ModelShape, TrainConfig)> {
    let shape = ModelShape {
        hidden: f.hidden.unwrap_or(EncoderConfig::DEFAULT_HIDDEN),
        dim: f.dim.unwrap_or(EncoderConfig::DEFAULT_OUTPUT),
        brain_depth: f.brain_depth.unwrap_or(3),
        text_depth: f.text_depth.unwrap_or(2),
    };
    for (k, v) in [
        ("hidden", shape.hidden),
        ("dim", shape.dim),
        ("brain_depth", shape.brain_depth),
        ("text_depth", shape.text_depth),
    ] {
        if v == 0 {
            problems.push(format!("{k} must be positive"));
        }
    }
    let base = TrainConfig::default();
    let lb = LossConfig::default();
    let curvature = match f.curvature {
        None => lb.curvature,
        Some(c) => match Curvature::new(c) {
            Ok(c) => c,
            Err(_) => {
                problems.push(format!("curvature must be positive and finite, got {c}"));
                return None;
            }
        },
    };
    let train = TrainConfig {
        epochs: f.epochs.unwrap_or(base.epochs),
        batch_size: f.batch_size.unwrap_or(base.batch_size),
        lr: f.lr.unwrap_or(base.lr),
        weight_decay: f.weight_decay.unwrap_or(base.weight_decay),
        adam_beta1: f.adam_beta1.unwrap_or(base.adam_beta1),
        adam_beta2: f.adam_beta2.unwrap_or(base.adam_beta2),
        adam_eps: f.adam_eps.unwrap_or(base.adam_eps),
        loss: LossConfig {
            tau: f.tau.unwrap_or(lb.tau),
            lambda1: f.lambda1.unwrap_or(lb.lambda1),
            lambda2: f.lambda2.unwrap_or(lb.lambda2),
            p: f.p.unwrap_or(lb.p),
            q: f.q.unwrap_or(lb.q),
            curvature,
            symmetric: f.symmetric.unwrap_or(lb.symmetric),
        },
        seed,
    };
    problems.extend(train.problems());
    Some((shape, train))
}

/// The fully resolved settings as flat keys, in the same vocabulary as the
/// config file (so the output can be fed back in with `--config`).
pub fn echo(data: &DataSettings, shape: &ModelShape, train: &TrainConfig) -> Map<String, Value> {
    let d = match &data.source {
        Source::File(p) => DataArgs {
            data: Some(p.clone()),
            delta: Some(data.delta),
            seed: Some(data.seed),
            ..Default::default()
        },
        Source::Synthetic(s) => DataArgs {
            data: None,
            depth: Some(s.tree_depth),
            branching: Some(s.branching),
            per_node: Some(s.samples_per_node),
            noise: Some(s.noise_sigma),
            brain_dim: Some(s.brain_dim),
            text_dim: Some(s.text_dim),
            delta: Some(s.delta),
            seed: Some(data.seed),
        },
    };
    let l = &train.loss;
    let f = FitArgs {
        hidden: Some(shape.hidden),
        dim: Some(shape.dim),
        brain_depth: Some(shape.brain_depth),
        text_depth: Some(shape.text_depth),
        epochs: Some(train.epochs),
        batch_size: Some(train.batch_size),
        lr: Some(train.lr),
        weight_decay: Some(train.weight_decay),
        adam_beta1: Some(train.adam_beta1),
        adam_beta2: Some(train.adam_beta2),
        adam_eps: Some(train.adam_eps),
        tau: Some(l.tau),
        lambda1: Some(l.lambda1),
        lambda2: Some(l.lambda2),
        p: Some(l.p),
        q: Some(l.q),
        curvature: Some(l.curvature.value()),
        symmetric: Some(l.symmetric),
    };
    let mut out = Map::new();
    for v in [serde_json::to_value(d), serde_json::to_value(f)] {
        if let Ok(Value::Object(m)) = v {
            out.extend(m.into_iter().filter(|(_, v)| !v.is_null()));
        }
    }
    out
}
