//! Factorized (per-channel, position-independent) entropy model.
//!
//! Each channel owns a small monotone network `x -> logit CDF(x)` with
//! widths 1-3-3-1. Positivity of the weights comes from a softplus, and the
//! hidden layers add a `tanh(a) * tanh(h)` term with `tanh(a) > -1`, which
//! keeps every layer monotone.

use rand::Rng;
use thiserror::Error;

use crate::nn::{softplus, NnError, ParamStore, Tape, Tensor, Var};

pub const FILTERS: [usize; 4] = [1, 3, 3, 1];
pub const INIT_SCALE: f64 = 10.0;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("model integrity: likelihood {value} for symbol {symbol} in channel {channel}")]
    Integrity {
        channel: usize,
        symbol: i64,
        value: f64,
    },
    #[error("channel {channel} symbol range [{lo}, {hi}] exceeds the alphabet limit {limit}")]
    AlphabetTooWide {
        channel: usize,
        lo: i64,
        hi: i64,
        limit: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Parameter ids for one bottleneck. Layer `l` stores its weight matrix as
/// `(out*in) x C` (row `o*in + i` is the weight from input unit `i` to
/// output unit `o`, one column per channel), its bias as `out x C` and, for
/// hidden layers, the tanh factor as `out x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    pub prefix: String,
    pub channels: usize,
    matrices: Vec<usize>,
    biases: Vec<usize>,
    factors: Vec<usize>,
}

fn layers() -> usize {
    FILTERS.len() - 1
}

impl EntropyModel {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let scale = INIT_SCALE.powf(1.0 / layers() as f64);
        let mut model = Self {
            prefix: prefix.to_string(),
            channels,
            matrices: Vec::new(),
            biases: Vec::new(),
            factors: Vec::new(),
        };
        for l in 0..layers() {
            let (fi, fo) = (FILTERS[l], FILTERS[l + 1]);
            let init = (1.0 / scale / fo as f64).exp_m1().ln();
            model.matrices.push(store.add(
                format!("{prefix}.matrix{l}"),
                Tensor::full(fo * fi, channels, init),
            )?);
            model.biases.push(store.add(
                format!("{prefix}.bias{l}"),
                Tensor::uniform(fo, channels, -0.5, 0.5, rng),
            )?);
            if l + 1 < layers() {
                model.factors.push(
                    store.add(format!("{prefix}.factor{l}"), Tensor::zeros(fo, channels))?,
                );
            }
        }
        Ok(model)
    }

    /// Rebinds to parameters already present in `store` (e.g. a checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str, channels: usize) -> Result<Self, NnError> {
        let mut model = Self {
            prefix: prefix.to_string(),
            channels,
            matrices: Vec::new(),
            biases: Vec::new(),
            factors: Vec::new(),
        };
        for l in 0..layers() {
            model.matrices.push(store.id(&format!("{prefix}.matrix{l}"))?);
            model.biases.push(store.id(&format!("{prefix}.bias{l}"))?);
            if l + 1 < layers() {
                model.factors.push(store.id(&format!("{prefix}.factor{l}"))?);
            }
        }
        Ok(model)
    }

    /// Logit of the CDF, elementwise over an `M x C` input.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let mut h = vec![x];
        for l in 0..layers() {
            let (fi, fo) = (FILTERS[l], FILTERS[l + 1]);
            let mat = tape.param(store, self.matrices[l]);
            let mat = tape.softplus(mat);
            let bias = tape.param(store, self.biases[l]);
            let factor = if l + 1 < layers() {
                let f = tape.param(store, self.factors[l]);
                Some(tape.tanh(f))
            } else {
                None
            };
            let mut next = Vec::with_capacity(fo);
            for o in 0..fo {
                let b = tape.slice_rows(bias, o, 1)?;
                let mut acc: Option<Var> = None;
                for (i, &hi) in h.iter().enumerate() {
                    let w = tape.slice_rows(mat, o * fi + i, 1)?;
                    let term = tape.mul(hi, w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                let mut out = tape.add(acc.expect("fi >= 1"), b)?;
                if let Some(f) = factor {
                    let fr = tape.slice_rows(f, o, 1)?;
                    let t = tape.tanh(out);
                    let ft = tape.mul(fr, t)?;
                    out = tape.add(out, ft)?;
                }
                next.push(out);
            }
            h = next;
        }
        Ok(h[0])
    }

    /// Probability mass of the unit bin centred at each element of `x`.
    pub fn likelihood(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let lo = tape.add_scalar(x, -0.5);
        let hi = tape.add_scalar(x, 0.5);
        let lower = self.logits(tape, store, lo)?;
        let upper = self.logits(tape, store, hi)?;
        // Evaluate on whichever tail keeps the sigmoids away from 1.
        let sign = {
            let (l, u) = (tape.value(lower), tape.value(upper));
            Tensor {
                shape: l.shape.clone(),
                data: l
                    .data
                    .iter()
                    .zip(&u.data)
                    .map(|(a, b)| if a + b > 0.0 { -1.0 } else { 1.0 })
                    .collect(),
            }
        };
        let s = tape.constant(sign);
        let su = tape.mul(upper, s)?;
        let sl = tape.mul(lower, s)?;
        let pu = tape.sigmoid(su);
        let pl = tape.sigmoid(sl);
        let d = tape.sub(pu, pl)?;
        Ok(tape.abs(d))
    }

    /// Total bits `-sum log2 p` over the channels flagged in `retained`
    /// (all when `None`), with the likelihood floored for stability.
    pub fn bits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        retained: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let lik = self.likelihood(tape, store, x)?;
        let lik = tape.clamp_min(lik, LIKELIHOOD_FLOOR);
        let ln = tape.log(lik);
        let ln = match retained {
            Some(mask) => {
                let row = Tensor::new(
                    1,
                    mask.len(),
                    mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                );
                let m = tape.constant(row);
                tape.mul(ln, m)?
            }
            None => ln,
        };
        let total = tape.sum(ln);
        Ok(tape.scale(total, -1.0 / std::f64::consts::LN_2))
    }

    /// Scalar forward of the CDF logit for one channel.
    pub fn logit_value(&self, store: &ParamStore, channel: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for l in 0..layers() {
            let (fi, fo) = (FILTERS[l], FILTERS[l + 1]);
            let mat = store.value(self.matrices[l]);
            let bias = store.value(self.biases[l]);
            let mut next = Vec::with_capacity(fo);
            for o in 0..fo {
                let mut acc = 0.0;
                for (i, &hv) in h.iter().enumerate() {
                    acc += hv * softplus(mat.at(o * fi + i, channel));
                }
                let mut out = acc + bias.at(o, channel);
                if l + 1 < layers() {
                    let f = store.value(self.factors[l]).at(o, channel).tanh();
                    out += f * out.tanh();
                }
                next.push(out);
            }
            h = next;
        }
        h[0]
    }

    pub fn likelihood_value(&self, store: &ParamStore, channel: usize, x: f64) -> f64 {
        let lower = self.logit_value(store, channel, x - 0.5);
        let upper = self.logit_value(store, channel, x + 0.5);
        let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        (crate::nn::sigmoid(s * upper) - crate::nn::sigmoid(s * lower)).abs()
    }

    /// Bits for one integer symbol; errors when the model assigns no mass.
    pub fn symbol_bits(&self, store: &ParamStore, channel: usize, symbol: i64) -> Result<f64, EntropyError> {
        let p = self.likelihood_value(store, channel, symbol as f64);
        if !(p > 0.0) || !p.is_finite() {
            return Err(EntropyError::Integrity {
                channel,
                symbol,
                value: p,
            });
        }
        Ok(-p.log2())
    }

    /// Masses for the integer symbols `lo..=hi`, floored so every symbol
    /// stays codable.
    pub fn pmf(&self, store: &ParamStore, channel: usize, lo: i64, hi: i64) -> Vec<f64> {
        (lo..=hi)
            .map(|s| {
                self.likelihood_value(store, channel, s as f64)
                    .max(LIKELIHOOD_FLOOR)
            })
            .collect()
    }
}

/// Round half to even, elementwise.
pub fn quantize_infer(t: &Tensor) -> Tensor {
    t.map(f64::round_ties_even)
}

/// Additive uniform noise on (-1/2, 1/2), the training surrogate for rounding.
pub fn quantize_train<R: Rng>(t: &Tensor, rng: &mut R) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t
            .data
            .iter()
            .map(|&x| x + rng.random_range(-0.5..0.5))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(channels: usize) -> (ParamStore, EntropyModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = EntropyModel::register(&mut store, "bz", channels, &mut rng).unwrap();
        // Move away from the symmetric initialization.
        for p in store.iter_mut() {
            for v in &mut p.value.data {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        (store, m)
    }

    #[test]
    fn rounding_is_half_even() {
        let t = Tensor::new(1, 5, vec![2.5, 3.5, -2.5, 0.4, 7.0]);
        assert_eq!(quantize_infer(&t).data, vec![2.0, 4.0, -2.0, 0.0, 7.0]);
    }

    #[test]
    fn cdf_is_monotone_and_pmf_sums_to_one() {
        let (store, m) = model(3);
        for c in 0..3 {
            let mut prev = f64::NEG_INFINITY;
            for i in -200..200 {
                let v = m.logit_value(&store, c, i as f64 * 0.25);
                assert!(v > prev);
                prev = v;
            }
            let total: f64 = m.pmf(&store, c, -300, 300).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "channel {c}: {total}");
        }
    }

    #[test]
    fn tape_and_scalar_paths_agree() {
        let (store, m) = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(6, 4, -4.0, 4.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let lik = m.likelihood(&mut tape, &store, xv).unwrap();
        for r in 0..6 {
            for c in 0..4 {
                let a = tape.value(lik).at(r, c);
                let b = m.likelihood_value(&store, c, x.at(r, c));
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn masked_bits_only_count_retained() {
        let (store, m) = model(2);
        let x = Tensor::new(3, 2, vec![0.0, 1.0, -1.0, 2.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = m.bits(&mut tape, &store, xv, Some(&[false, true])).unwrap();
        let expected: f64 = (0..3)
            .map(|r| m.symbol_bits(&store, 1, x.at(r, 1) as i64).unwrap())
            .sum();
        assert!((tape.value(b).data[0] - expected).abs() < 1e-9);
    }
}
