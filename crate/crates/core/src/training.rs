//! Mini-batch AdamW training of the encoder pair on the joint loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{joint_loss_grad, LossBreakdown, LossConfig};
use crate::model::DualEncoder;

/// SplitMix64 finaliser over `seed + stream`; used to give each consumer of
/// randomness (brain init, text init, fold shuffles, ...) its own seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        TrainConfig {
            epochs: 200,
            batch_size: 4096,
            lr: a.lr,
            weight_decay: a.weight_decay,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Every offending field, by its flat config key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            out.push(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            ));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            out.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        out.extend(self.loss.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(lens: &[usize]) -> Self {
        OptimizerState {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn lens(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }
}

/// One decoupled-weight-decay Adam update:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`, with decay
/// only on tensors whose `decay` flag is set.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    decay: &[bool],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    for (what, len) in [
        ("gradient", grads.len()),
        ("decay mask", decay.len()),
        ("first moment", state.m.len()),
        ("second moment", state.v.len()),
    ] {
        if len != n {
            return Err(Error::InvalidArgument(format!(
                "{what} has {len} tensors, parameters have {n}"
            )));
        }
    }
    for i in 0..n {
        let len = params[i].len();
        if grads[i].len() != len || state.m[i].len() != len || state.v[i].len() != len {
            return Err(Error::InvalidArgument(format!(
                "tensor {i}: parameter length {len}, gradient {}, moments {}/{}",
                grads[i].len(),
                state.m[i].len(),
                state.v[i].len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in params[i].iter_mut().enumerate() {
            let g = grads[i][k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + cfg.lr * wd * *p;
        }
    }
    Ok(())
}

/// Sample-weighted mean loss over one epoch. `epoch` is 1-based and counts
/// epochs completed by the model, including any before a resume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub angle: f64,
    pub centroid: f64,
    pub hierarchy: f64,
    pub total: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: DualEncoder,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn fresh(model: DualEncoder) -> Self {
        let optimizer = OptimizerState::new(&model.tensor_lens());
        TrainState {
            model,
            optimizer,
            epochs_completed: 0,
        }
    }
}

/// Permutation of `0..n` for a given absolute epoch. The generator is
/// keyed by `(seed, epoch)`, so a resumed run sees the same order as an
/// uninterrupted one.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs `cfg.epochs` further epochs on `dataset`, calling `progress` after
/// each one, and returns the updated state with the per-epoch log.
pub fn train(
    dataset: &Dataset,
    state: TrainState,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainState, Vec<EpochRecord>)> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    train_indices(dataset, &all, state, cfg, progress)
}

/// As [`train`], restricted to the given sample indices.
pub fn train_indices(
    dataset: &Dataset,
    indices: &[usize],
    mut state: TrainState,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainState, Vec<EpochRecord>)> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    state.model.check_dataset(dataset)?;
    if state.model.curvature != cfg.loss.curvature {
        return Err(Error::Validation(format!(
            "model curvature {} differs from loss curvature {}",
            state.model.curvature.value(),
            cfg.loss.curvature.value()
        )));
    }
    if state.optimizer.lens() != state.model.tensor_lens() {
        return Err(Error::Validation(
            "optimizer state does not match model shapes".into(),
        ));
    }

    let n = indices.len();
    let batch_size = cfg.batch_size.min(n);
    let adamw = cfg.adamw();
    let decay = state.model.decay_mask();
    let samples = dataset.samples();
    let mut log = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let epoch = state.epochs_completed;
        let order = epoch_order(n, cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let ids: Vec<usize> = chunk.iter().map(|&k| indices[k]).collect();
            let brain_in: Vec<&[f64]> = ids.iter().map(|&i| samples[i].brain.as_slice()).collect();
            let text_in: Vec<&[f64]> = ids.iter().map(|&i| samples[i].text.as_slice()).collect();
            let counts: Vec<u32> = ids.iter().map(|&i| samples[i].region_count).collect();

            let model = &state.model;
            let c = model.curvature;
            let (_, brain_cache) = model.brain.forward_batch(&brain_in, c)?;
            let (_, text_cache) = model.text.forward_batch(&text_in, c)?;
            let brain_z: Vec<Vec<f64>> = brain_cache.iter().map(|k| k.tangent().to_vec()).collect();
            let text_z: Vec<Vec<f64>> = text_cache.iter().map(|k| k.tangent().to_vec()).collect();

            let grad = joint_loss_grad(&brain_z, &text_z, &counts, &cfg.loss)?;
            let LossBreakdown {
                angle,
                centroid,
                hierarchy,
                total,
            } = grad.breakdown;
            if !grad.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    angle,
                    centroid,
                    hierarchy,
                    total,
                });
            }
            let w = ids.len() as f64;
            for (s, v) in sums.iter_mut().zip([angle, centroid, hierarchy, total]) {
                *s += w * v;
            }

            let g_brain = model.brain.backward_batch(&brain_cache, &grad.total.brain)?;
            let g_text = model.text.backward_batch(&text_cache, &grad.total.text)?;
            let grads: Vec<&[f64]> = g_brain
                .tensors()
                .into_iter()
                .chain(g_text.tensors())
                .map(|(t, _)| t)
                .collect();
            let mut params = state.model.tensors_mut();
            adamw_step(&mut params, &grads, &decay, &mut state.optimizer, &adamw)?;
        }
        state.epochs_completed += 1;
        let nf = n as f64;
        let rec = EpochRecord {
            epoch: state.epochs_completed,
            angle: sums[0] / nf,
            centroid: sums[1] / nf,
            hierarchy: sums[2] / nf,
            total: sums[3] / nf,
        };
        progress(&rec);
        log.push(rec);
    }
    Ok((state, log))
}
