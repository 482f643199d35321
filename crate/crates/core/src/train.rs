//! One optimizer step over a batch: encode, density-driven drop, additive
//! noise, masked decode, loss, backward, Adam, EMA update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::codec::{loss_on_tape, Codec, CodecError, LossBreakdown, LossWeights};
use crate::density::{composite_score, DensityError, DropBounds, NormalizationState};
use crate::entropy::bitstream::encode_density;
use crate::entropy::Layout;
use crate::nn::{AdamState, NnError, Tape, Tensor};
use crate::taildrop::{build_mask, DropMask, channel_importance, sample_training_drop, MaskMode};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("empty batch")]
    EmptyBatch,
}

/// Which latents the tail-drop applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropStrategy {
    /// Feature and coordinate channels drop together.
    Combined,
    /// Only feature channels drop; coordinates are always kept whole.
    FeatureOnly,
}

impl DropStrategy {
    pub fn layout(self) -> Layout {
        match self {
            DropStrategy::Combined => Layout::Combined,
            DropStrategy::FeatureOnly => Layout::FeatureOnly,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DropStrategy::Combined => "combined",
            DropStrategy::FeatureOnly => "feature_only",
        }
    }
}

impl std::str::FromStr for DropStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "combined" => Ok(DropStrategy::Combined),
            "feature_only" => Ok(DropStrategy::FeatureOnly),
            other => Err(format!("unknown drop strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPolicy {
    pub bounds: DropBounds,
    pub mix_probability: f64,
    pub beta: f64,
    pub strategy: DropStrategy,
    /// Disable to train without tail-drop (every channel kept).
    pub enabled: bool,
}

impl Default for DropPolicy {
    fn default() -> Self {
        Self {
            bounds: DropBounds::default(),
            mix_probability: crate::taildrop::DEFAULT_MIX_PROBABILITY,
            beta: crate::taildrop::DEFAULT_BETA,
            strategy: DropStrategy::Combined,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Batch mean of each term.
    pub loss: LossBreakdown,
    pub rho: Vec<f64>,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub codec: Codec,
    pub adam: AdamState,
    pub norm: NormalizationState,
    pub weights: LossWeights,
    pub policy: DropPolicy,
    pub rng: ChaCha8Rng,
}

fn uniform_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
}

impl Trainer {
    pub fn new(codec: Codec, weights: LossWeights, policy: DropPolicy, rng: ChaCha8Rng) -> Self {
        let adam = AdamState::new(&codec.store, crate::nn::BASE_LR);
        Self {
            codec,
            adam,
            norm: NormalizationState::default(),
            weights,
            policy,
            rng,
        }
    }

    /// Forward and backward for a batch; gradients are averaged into the
    /// parameter store but not applied.
    pub fn accumulate(&mut self, batch: &[PointCloud]) -> Result<StepReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let codec = &self.codec;
        let mut encoded = Vec::with_capacity(batch.len());
        for pc in batch {
            let mut tape = Tape::new();
            let enc = codec.encode_tape(&mut tape, pc)?;
            encoded.push((tape, enc));
        }
        let batch_num: Vec<f64> = encoded.iter().flat_map(|(_, e)| e.density.d_num.clone()).collect();
        let batch_dist: Vec<f64> = encoded.iter().flat_map(|(_, e)| e.density.d_dist.clone()).collect();
        let fresh = !self.norm.is_initialized();
        if fresh {
            self.norm = self.norm.ema_update(&batch_num, &batch_dist)?;
        }

        let mut store = codec.store.clone();
        store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut sums = [0.0; 5];
        let mut rhos = Vec::with_capacity(batch.len());
        for (pc, (mut tape, enc)) in batch.iter().zip(encoded) {
            let delta = composite_score(&enc.density, &self.norm)?.mean();
            let (m, c, cx) = (enc.sample_coords.len(), codec.cfg.c, codec.cfg.c_xyz);
            let rho = if self.policy.enabled {
                sample_training_drop(
                    delta,
                    c,
                    self.policy.bounds,
                    self.policy.mix_probability,
                    &mut self.rng,
                )
            } else {
                0.0
            };
            rhos.push(rho);

            let nz = tape.constant(uniform_noise(m, c, &mut self.rng));
            let nx = tape.constant(uniform_noise(m, cx, &mut self.rng));
            let z_noisy = tape.add(enc.z, nz)?;
            let x_noisy = tape.add(enc.z_xyz, nx)?;
            let mask_z = build_mask(
                &channel_importance(tape.value(z_noisy), self.policy.beta),
                rho,
                MaskMode::Train,
            );
            let mask_x = match self.policy.strategy {
                DropStrategy::Combined => build_mask(
                    &channel_importance(tape.value(x_noisy), self.policy.beta),
                    rho,
                    MaskMode::Train,
                ),
                DropStrategy::FeatureOnly => DropMask::all(cx),
            };
            let row = |bits: &[bool]| {
                Tensor::new(1, bits.len(), bits.iter().map(|&b| f64::from(u8::from(b))).collect())
            };
            let mzv = tape.constant(row(&mask_z.bits));
            let mxv = tape.constant(row(&mask_x.bits));
            let z_masked = tape.mul(z_noisy, mzv)?;
            let x_masked = tape.mul(x_noisy, mxv)?;

            let bits_z = codec.bz.bits(&mut tape, &codec.store, z_noisy, Some(&mask_z.bits))?;
            let bits_x = codec.bxyz.bits(&mut tape, &codec.store, x_noisy, Some(&mask_x.bits))?;
            let counts: Vec<u32> = enc.density.d_num.iter().map(|&v| v as u32).collect();
            let density_bits = 8.0 * encode_density(&counts).len() as f64;
            let bits = tape.add(bits_z, bits_x)?;
            let bits = tape.add_scalar(bits, density_bits);

            let decoded = codec.decode_tape(&mut tape, z_masked, x_masked, &enc.density.d_num)?;
            let loss = loss_on_tape(
                &mut tape,
                pc,
                &decoded,
                &enc.density.d_num,
                enc.z_xyz,
                x_masked,
                bits,
                self.weights,
            )?;
            let b = loss.breakdown;
            for (s, v) in sums.iter_mut().zip([b.cd, b.dens, b.coord, b.points, b.bpp]) {
                *s += v * scale;
            }
            let root = tape.scale(loss.total, scale);
            let grads = tape.backward(root);
            tape.accumulate_param_grads(&grads, &mut store);
        }
        for (dst, src) in self.codec.store.iter_mut().zip(store.iter()) {
            dst.grad = src.grad.clone();
        }
        if !fresh {
            self.norm = self.norm.ema_update(&batch_num, &batch_dist)?;
        }
        let loss = LossBreakdown::new(sums[0], sums[1], sums[2], sums[3], sums[4], self.weights)?;
        Ok(StepReport {
            loss,
            rho: rhos,
            grad_norm: self.codec.store.grad_norm(),
        })
    }

    /// Accumulates gradients for `batch` and applies one Adam update.
    /// Parameters are left untouched when a gradient is not finite.
    pub fn step(&mut self, batch: &[PointCloud], lr: f64) -> Result<StepReport, TrainError> {
        let report = self.accumulate(batch)?;
        self.adam.step(&mut self.codec.store, lr)?;
        Ok(report)
    }
}
