//! Channel importance, top-k retention masks and the training-time drop
//! ratio sampler.
//!
//! Latents are `M x C` tensors: one row per downsampled position (in FPS
//! emission order), one column per channel.

use rand::Rng;

use crate::density::DropBounds;
use crate::nn::Tensor;

pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_MIX_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Variance,
    Gradient,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance {
    pub scores: Vec<f64>,
    pub provenance: Provenance,
    pub beta: f64,
}

impl ChannelImportance {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Channel indices from most to least important, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_desc(&self.scores)
    }
}

pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Population variance of each column.
pub fn channel_variance(z: &Tensor) -> Vec<f64> {
    let (m, c) = (z.rows(), z.cols());
    (0..c)
        .map(|j| {
            let mean = (0..m).map(|i| z.at(i, j)).sum::<f64>() / m as f64;
            (0..m).map(|i| (z.at(i, j) - mean).powi(2)).sum::<f64>() / m as f64
        })
        .collect()
}

/// Mean absolute difference between consecutive rows; 0 when M = 1.
pub fn channel_gradient(z: &Tensor) -> Vec<f64> {
    let (m, c) = (z.rows(), z.cols());
    if m < 2 {
        return vec![0.0; c];
    }
    (0..c)
        .map(|j| {
            (0..m - 1)
                .map(|i| (z.at(i + 1, j) - z.at(i, j)).abs())
                .sum::<f64>()
                / (m - 1) as f64
        })
        .collect()
}

/// Min-max normalization across channels; a constant vector maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

pub fn channel_importance(z: &Tensor, beta: f64) -> ChannelImportance {
    let var = min_max(&channel_variance(z));
    let grad = min_max(&channel_gradient(z));
    ChannelImportance {
        scores: var
            .iter()
            .zip(&grad)
            .map(|(v, g)| beta * v + (1.0 - beta) * g)
            .collect(),
        provenance: Provenance::Combined,
        beta,
    }
}

/// Dataset-level importance: the mean of per-cloud combined scores.
pub fn aggregate_importance(latents: &[Tensor], beta: f64) -> ChannelImportance {
    let c = latents.first().map_or(0, |z| z.cols());
    let mut scores = vec![0.0; c];
    for z in latents {
        for (s, v) in scores.iter_mut().zip(channel_importance(z, beta).scores) {
            *s += v / latents.len() as f64;
        }
    }
    ChannelImportance {
        scores,
        provenance: Provenance::Combined,
        beta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// `k = 0` allowed.
    Eval,
    /// At least one channel survives.
    Train,
}

/// `ceil((1 - rho) * c)`, immune to the rounding of `1 - rho` (e.g.
/// `(1 - 0.97) * 32` evaluates just above 0.96).
pub fn retained_count(rho: f64, c: usize) -> usize {
    let x = (1.0 - rho) * c as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub bits: Vec<bool>,
    pub rho: f64,
    pub k: usize,
}

impl DropMask {
    pub fn retained(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn all(c: usize) -> Self {
        Self {
            bits: vec![true; c],
            rho: 0.0,
            k: c,
        }
    }

    /// Mask keeping exactly the first `k` entries of `ranking`.
    pub fn from_ranking(ranking: &[usize], k: usize, rho: f64) -> Self {
        let mut bits = vec![false; ranking.len()];
        for &c in &ranking[..k.min(ranking.len())] {
            bits[c] = true;
        }
        Self { bits, rho, k }
    }
}

pub fn build_mask(importance: &ChannelImportance, rho: f64, mode: MaskMode) -> DropMask {
    let rho = rho.clamp(0.0, 1.0);
    let c = importance.len();
    let mut k = retained_count(rho, c);
    if mode == MaskMode::Train {
        k = k.max(1.min(c));
    }
    DropMask::from_ranking(&importance.ranking(), k, rho)
}

/// Zeroes every column not retained by `mask`.
pub fn apply_mask(z: &Tensor, mask: &DropMask) -> Tensor {
    let mut out = z.clone();
    let c = z.cols();
    for i in 0..z.rows() {
        for (j, keep) in mask.bits.iter().enumerate() {
            if !keep {
                out.data[i * c + j] = 0.0;
            }
        }
    }
    out
}

/// Drops the same fraction `rho` of channels from both latents.
pub fn apply_tail_drop(
    z: &Tensor,
    z_xyz: &Tensor,
    rho: f64,
    importance_z: &ChannelImportance,
    importance_xyz: &ChannelImportance,
    mode: MaskMode,
) -> (Tensor, Tensor) {
    let mz = build_mask(importance_z, rho, mode);
    let mx = build_mask(importance_xyz, rho, mode);
    (apply_mask(z, &mz), apply_mask(z_xyz, &mx))
}

/// Draws a training drop ratio: with probability `mix_probability` the
/// density-derived ratio for `delta_scene`, otherwise uniform on
/// `[0, (C-1)/C]`.
pub fn sample_training_drop<R: Rng>(
    delta_scene: f64,
    channels: usize,
    bounds: DropBounds,
    mix_probability: f64,
    rng: &mut R,
) -> f64 {
    if rng.random::<f64>() < mix_probability {
        bounds.rho(delta_scene.clamp(0.0, 1.0))
    } else {
        let hi = (channels.saturating_sub(1)) as f64 / channels.max(1) as f64;
        rng.random_range(0.0..=hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn imp(scores: Vec<f64>) -> ChannelImportance {
        ChannelImportance {
            scores,
            provenance: Provenance::Combined,
            beta: DEFAULT_BETA,
        }
    }

    #[test]
    fn gradient_of_short_channel() {
        let z = Tensor::new(3, 1, vec![1.0, 3.0, 2.0]);
        assert_eq!(channel_gradient(&z), vec![1.5]);
        assert_eq!(channel_gradient(&Tensor::new(1, 2, vec![4.0, 5.0])), vec![0.0, 0.0]);
    }

    #[test]
    fn combined_weighting() {
        // Channel 0 has maximal variance, minimal gradient; channel 1 the reverse.
        let z = Tensor::new(4, 2, vec![0.0, 0.0, 0.0, 5.0, 10.0, 0.0, 10.0, 5.0]);
        let i = channel_importance(&z, 0.6);
        assert!((i.scores[0] - 0.6).abs() < 1e-12);
        assert!((i.scores[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn constant_metric_normalizes_to_zero() {
        assert_eq!(min_max(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
    }

    #[test]
    fn top_two_mask() {
        let m = build_mask(&imp(vec![0.9, 0.1, 0.5, 0.3]), 0.5, MaskMode::Eval);
        assert_eq!(m.bits, vec![true, false, true, false]);
        assert_eq!(m.k, 2);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = build_mask(&imp(vec![0.5, 0.5, 0.5, 0.5]), 0.5, MaskMode::Eval);
        assert_eq!(m.bits, vec![true, true, false, false]);
    }

    #[test]
    fn ceiling_counts() {
        assert_eq!(retained_count(0.97, 32), 1);
        assert_eq!(retained_count(0.0, 32), 32);
        assert_eq!(retained_count(1.0, 32), 0);
        assert_eq!(retained_count(0.5, 4), 2);
        assert_eq!(retained_count(1.0 - 1.0 / 32.0, 32), 1);
        let m = build_mask(&imp(vec![0.1; 4]), 1.0, MaskMode::Train);
        assert_eq!(m.k, 1);
        let m = build_mask(&imp(vec![0.1; 4]), 1.0, MaskMode::Eval);
        assert_eq!(m.k, 0);
    }

    #[test]
    fn zero_rho_is_identity() {
        let z = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = Tensor::new(2, 2, vec![7.0, 8.0, 9.0, 10.0]);
        let (a, b) = apply_tail_drop(
            &z,
            &x,
            0.0,
            &channel_importance(&z, 0.6),
            &channel_importance(&x, 0.6),
            MaskMode::Eval,
        );
        assert_eq!(a, z);
        assert_eq!(b, x);
    }

    #[test]
    fn density_branch_and_uniform_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DropBounds::default();
        assert!((sample_training_drop(1.0, 32, b, 1.0, &mut rng) - 0.15).abs() < 1e-12);
        for _ in 0..1000 {
            let r = sample_training_drop(0.3, 32, b, 0.0, &mut rng);
            assert!((0.0..=31.0 / 32.0).contains(&r));
        }
    }
}
