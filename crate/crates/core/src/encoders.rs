//! Residual-MLP encoders projecting onto the hyperboloid.
//!
//! Layout of one encoder:
//!
//! ```text
//! h0    = W_in x + b_in
//! h_k+1 = h_k + relu(W_k LN_k(h_k) + b_k)        k = 0..depth
//! z     = W_out LN_final(h_depth) + b_out       tangent vector at the origin
//! out   = exp_map_origin(z)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_map_origin, Curvature, LorentzPoint, TangentVector};
use crate::par;

const LN_EPS: f64 = 1e-5;

/// Samples per gradient-accumulation chunk. Fixed so that the reduction
/// tree, and therefore every floating-point sum, does not depend on the
/// number of worker threads.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub const DEFAULT_HIDDEN: usize = 512;
    pub const DEFAULT_OUTPUT: usize = 64;

    /// Two residual blocks.
    pub fn text(input_dim: usize, seed: u64) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            output_dim: Self::DEFAULT_OUTPUT,
            depth: 2,
            seed,
        }
    }

    /// Three residual blocks.
    pub fn brain(input_dim: usize, seed: u64) -> Self {
        EncoderConfig {
            depth: 3,
            ..Self::text(input_dim, seed)
        }
    }

    pub fn problems(&self, name: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("depth", self.depth),
        ] {
            if v == 0 {
                out.push(format!("{name}.{field} must be positive"));
            } else if v > u32::MAX as usize {
                out.push(format!("{name}.{field} does not fit in 32 bits"));
            }
        }
        out
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let p = self.problems(name);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }
}

/// Dense layer with a row-major `fan_out x fan_in` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut layer = Linear::zeros(fan_in, fan_out);
        for w in &mut layer.weight {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.fan_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.fan_in..(o + 1) * self.fan_in;
            for ((gw, w), (xi, dxi)) in grad.weight[row.clone()]
                .iter_mut()
                .zip(&self.weight[row])
                .zip(x.iter().zip(dx.iter_mut()))
            {
                *gw += g * xi;
                *dxi += g * w;
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

struct NormCache {
    normalized: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    fn identity(width: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; width],
            offset: vec![0.0; width],
        }
    }

    fn zeros(width: usize) -> Self {
        LayerNorm {
            gain: vec![0.0; width],
            offset: vec![0.0; width],
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, NormCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = normalized
            .iter()
            .zip(self.gain.iter().zip(&self.offset))
            .map(|(xh, (g, b))| g * xh + b)
            .collect();
        (y, NormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = Vec::with_capacity(dy.len());
        for (k, (&g, &xh)) in dy.iter().zip(&cache.normalized).enumerate() {
            grad.gain[k] += g * xh;
            grad.offset[k] += g;
            dxhat.push(g * self.gain[k]);
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat
            .iter()
            .zip(&cache.normalized)
            .map(|(d, xh)| d * xh)
            .sum::<f64>()
            / n;
        dxhat
            .iter()
            .zip(&cache.normalized)
            .map(|(d, xh)| cache.inv_std * (d - mean_d - xh * mean_dx))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub norm: LayerNorm,
    pub linear: Linear,
}

/// Role of a parameter tensor; decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
    Offset,
}

impl TensorKind {
    pub fn decays(self) -> bool {
        self == TensorKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

struct BlockCache {
    norm: NormCache,
    normed: Vec<f64>,
    pre_activation: Vec<f64>,
}

/// Activations retained by [`EncoderParams::forward`] for backprop.
pub struct ForwardCache {
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_normed: Vec<f64>,
    tangent: Vec<f64>,
}

impl ForwardCache {
    /// The pre-projection tangent vector `z`.
    pub fn tangent(&self) -> &[f64] {
        &self.tangent
    }
}

impl EncoderParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit gains.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate("encoder")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let input = Linear::uniform(config.input_dim, h, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| ResidualBlock {
                norm: LayerNorm::identity(h),
                linear: Linear::uniform(h, h, &mut rng),
            })
            .collect();
        let output = Linear::uniform(h, config.output_dim, &mut rng);
        Ok(EncoderParams {
            config,
            input,
            blocks,
            final_norm: LayerNorm::identity(h),
            output,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate("encoder")?;
        let c = config;
        Ok(EncoderParams {
            config: c,
            input: Linear::zeros(c.input_dim, c.hidden_dim),
            blocks: (0..c.depth)
                .map(|_| ResidualBlock {
                    norm: LayerNorm::zeros(c.hidden_dim),
                    linear: Linear::zeros(c.hidden_dim, c.hidden_dim),
                })
                .collect(),
            final_norm: LayerNorm::zeros(c.hidden_dim),
            output: Linear::zeros(c.hidden_dim, c.output_dim),
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config was validated at construction")
    }

    /// Tensor lengths for `config` in declaration order, without
    /// allocating. Saturates rather than overflowing on absurd configs.
    pub fn tensor_lens_for(config: &EncoderConfig) -> Vec<usize> {
        let (i, h, o) = (config.input_dim, config.hidden_dim, config.output_dim);
        let mut out = vec![i.saturating_mul(h), h];
        for _ in 0..config.depth {
            out.extend([h, h, h.saturating_mul(h), h]);
        }
        out.extend([h, h, h.saturating_mul(o), o]);
        out
    }

    /// Tensors in declaration order: input W/b, then per block gain,
    /// offset, W, b, then final gain/offset, then output W/b.
    pub fn tensors(&self) -> Vec<(&[f64], TensorKind)> {
        let mut out: Vec<(&[f64], TensorKind)> = vec![
            (&self.input.weight, TensorKind::Weight),
            (&self.input.bias, TensorKind::Bias),
        ];
        for b in &self.blocks {
            out.push((&b.norm.gain, TensorKind::Gain));
            out.push((&b.norm.offset, TensorKind::Offset));
            out.push((&b.linear.weight, TensorKind::Weight));
            out.push((&b.linear.bias, TensorKind::Bias));
        }
        out.push((&self.final_norm.gain, TensorKind::Gain));
        out.push((&self.final_norm.offset, TensorKind::Offset));
        out.push((&self.output.weight, TensorKind::Weight));
        out.push((&self.output.bias, TensorKind::Bias));
        out
    }

    /// Mutable view in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            out.push(&mut b.norm.gain);
            out.push(&mut b.norm.offset);
            out.push(&mut b.linear.weight);
            out.push(&mut b.linear.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.offset);
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    fn add_assign(&mut self, other: &EncoderParams) {
        for (dst, (src, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn forward(&self, x: &[f64], c: Curvature) -> Result<(LorentzPoint, ForwardCache)> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite encoder input {v}"
            )));
        }
        let mut h = self.input.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (normed, norm) = block.norm.forward(&h);
            let pre_activation = block.linear.forward(&normed);
            let next: Vec<f64> = h
                .iter()
                .zip(&pre_activation)
                .map(|(hv, a)| hv + a.max(0.0))
                .collect();
            h = next;
            blocks.push(BlockCache {
                norm,
                normed,
                pre_activation,
            });
        }
        let (final_normed, final_norm) = self.final_norm.forward(&h);
        let tangent = self.output.forward(&final_normed);
        let point = exp_map_origin(&TangentVector(tangent.clone()), c);
        Ok((
            point,
            ForwardCache {
                input: x.to_vec(),
                blocks,
                final_norm,
                final_normed,
                tangent,
            },
        ))
    }

    fn check_cache(&self, cache: &ForwardCache, grad_tangent: &[f64]) -> Result<()> {
        let cfg = &self.config;
        let ok = cache.input.len() == cfg.input_dim
            && cache.blocks.len() == cfg.depth
            && cache.tangent.len() == cfg.output_dim
            && cache.final_normed.len() == cfg.hidden_dim
            && grad_tangent.len() == cfg.output_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "forward cache or gradient does not match encoder shape".into(),
            ))
        }
    }

    /// Reverse-mode pass for one sample given `dL/dz`. Adds parameter
    /// gradients into `grad` and returns `dL/dx`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_tangent: &[f64],
        grad: &mut EncoderParams,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache, grad_tangent)?;
        let d_normed = self
            .output
            .backward(&cache.final_normed, grad_tangent, &mut grad.output);
        let mut dh = self
            .final_norm
            .backward(&cache.final_norm, &d_normed, &mut grad.final_norm);
        for ((block, bc), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grad.blocks)
            .rev()
        {
            let da: Vec<f64> = dh
                .iter()
                .zip(&bc.pre_activation)
                .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                .collect();
            let du = block.linear.backward(&bc.normed, &da, &mut gb.linear);
            let dnorm = block.norm.backward(&bc.norm, &du, &mut gb.norm);
            for (a, b) in dh.iter_mut().zip(&dnorm) {
                *a += b;
            }
        }
        Ok(self.input.backward(&cache.input, &dh, &mut grad.input))
    }

    /// Parameter gradients and input gradient for one sample.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_tangent: &[f64],
    ) -> Result<(EncoderParams, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let dx = self.backward_into(cache, grad_tangent, &mut grad)?;
        Ok((grad, dx))
    }

    /// Forward pass over many inputs; samples are independent.
    pub fn forward_batch(
        &self,
        inputs: &[&[f64]],
        c: Curvature,
    ) -> Result<(Vec<LorentzPoint>, Vec<ForwardCache>)> {
        let out = par::try_map_range(inputs.len(), |i| self.forward(inputs[i], c))?;
        Ok(out.into_iter().unzip())
    }

    /// Summed parameter gradients over a batch.
    pub fn backward_batch(
        &self,
        caches: &[ForwardCache],
        grad_tangents: &[Vec<f64>],
    ) -> Result<EncoderParams> {
        if caches.len() != grad_tangents.len() {
            return Err(Error::DimensionMismatch {
                expected: caches.len(),
                found: grad_tangents.len(),
            });
        }
        let chunks = caches.len().div_ceil(GRAD_CHUNK);
        let partials = par::try_map_range(chunks, |ci| {
            let mut acc = self.zeros_like();
            let range = ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(caches.len());
            for i in range {
                self.backward_into(&caches[i], &grad_tangents[i], &mut acc)?;
            }
            Ok::<_, Error>(acc)
        })?;
        let mut total = self.zeros_like();
        for p in &partials {
            total.add_assign(p);
        }
        Ok(total)
    }
}
