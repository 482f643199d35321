//! The autoencoder: staged set-abstraction encoder, coordinate latent,
//! density-conditioned tree decoder, and the training loss.
//!
//! Encoder stage: FPS downsample, gather each sample's k nearest features
//! together with scaled relative offsets, a shared two-layer MLP, then a
//! max over the neighbourhood. The final stage yields the feature latent
//! `z` (M x C), the coordinate latent `z_xyz` (M x C_xyz) and per-sample
//! counts `d`.
//!
//! Decoder: anchors are read back from `z_xyz` through a linear map; a
//! per-anchor MLP on `(z, z_xyz, log1p d)` predicts a soft point count and
//! drives three upsampling stages whose children form a mixed-radix tree
//! of `prod(u_j)` candidates per anchor. The first `round(count)` children
//! in interleaved order are emitted, so partial subsets stay spread out.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::{Point3, PointCloud};
use crate::density::{compute_density_stats, DensityStats};
use crate::entropy::{EntropyModel, Models};
use crate::geometry::{self, Factor, GeometryError};
use crate::nn::{NnError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("loss term '{term}' is not finite")]
    NonFiniteLoss { term: &'static str },
    #[error("latent shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordMode {
    /// Learned `C_xyz`-channel coordinate latent.
    Learned,
    /// Quantized anchor coordinates themselves (`C_xyz = 3`).
    Literal,
}

impl FromStr for CoordMode {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(CoordMode::Learned),
            "literal" => Ok(CoordMode::Literal),
            other => Err(CodecError::Config(format!("unknown coord mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub c_xyz: usize,
    pub stages: Vec<Factor>,
    pub k: usize,
    pub hidden: usize,
    pub seed: u64,
    pub coord_mode: CoordMode,
    /// Multiplies the feature latent before quantization.
    pub latent_gain: f64,
    /// Coordinate quantization: anchors are carried in steps of
    /// `1 / coord_gain` unit-cube units.
    pub coord_gain: f64,
    /// Scale of encoder neighbourhood offsets.
    pub offset_gain: f64,
    /// Half-width of first decoder stage offsets; halves per stage.
    pub spread: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 32,
            c_xyz: 16,
            stages: vec![Factor::Half, Factor::Third, Factor::Quarter],
            k: 8,
            hidden: 32,
            seed: 0,
            coord_mode: CoordMode::Learned,
            latent_gain: 4.0,
            coord_gain: 64.0,
            offset_gain: 10.0,
            spread: 0.12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::Config(m));
        if self.c < 2 || self.c > 255 {
            return bad(format!("C = {} must be in [2, 255]", self.c));
        }
        match self.coord_mode {
            CoordMode::Learned if self.c_xyz < 2 || self.c_xyz > 255 => {
                return bad(format!("C_xyz = {} must be in [2, 255]", self.c_xyz))
            }
            CoordMode::Literal if self.c_xyz != 3 => {
                return bad("literal coordinate mode needs C_xyz = 3".into())
            }
            _ => {}
        }
        if self.stages.is_empty() {
            return bad("at least one stage".into());
        }
        if self.k == 0 || self.hidden == 0 {
            return bad("k and hidden must be positive".into());
        }
        for (name, v) in [
            ("latent_gain", self.latent_gain),
            ("coord_gain", self.coord_gain),
            ("offset_gain", self.offset_gain),
            ("spread", self.spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        Ok(())
    }

    /// `M` after all stages: nested ceilings.
    pub fn latent_count(&self, n: usize) -> usize {
        self.stages.iter().fold(n, |m, f| f.apply(m))
    }

    /// Decoder expansion per stage, coarse to fine: `min(8, 2 * den)` of the
    /// encoder stages in reverse.
    pub fn upsample_factors(&self) -> Vec<usize> {
        self.stages
            .iter()
            .rev()
            .map(|f| (2 * f.denominator()).min(8))
            .collect()
    }

    pub fn max_children(&self) -> usize {
        self.upsample_factors().iter().product()
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(format!("model.{k}"), v);
        };
        put("C", self.c.to_string());
        put("C_xyz", self.c_xyz.to_string());
        put(
            "stages",
            self.stages
                .iter()
                .map(|f| format!("1/{}", f.denominator()))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("k", self.k.to_string());
        put("hidden", self.hidden.to_string());
        put("seed", self.seed.to_string());
        put(
            "coord_mode",
            match self.coord_mode {
                CoordMode::Learned => "learned",
                CoordMode::Literal => "literal",
            }
            .into(),
        );
        put("latent_gain", self.latent_gain.to_string());
        put("coord_gain", self.coord_gain.to_string());
        put("offset_gain", self.offset_gain.to_string());
        put("spread", self.spread.to_string());
        kv
    }

    /// Applies every `model.*` key present; unknown `model.*` keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<(), CodecError> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T, CodecError> {
            v.trim()
                .parse()
                .map_err(|_| CodecError::Config(format!("{k}: cannot parse '{v}'")))
        }
        for (key, v) in kv {
            let Some(k) = key.strip_prefix("model.") else {
                continue;
            };
            match k {
                "C" => self.c = num(key, v)?,
                "C_xyz" => self.c_xyz = num(key, v)?,
                "stages" => self.stages = parse_stages(v)?,
                "k" => self.k = num(key, v)?,
                "hidden" => self.hidden = num(key, v)?,
                "seed" => self.seed = num(key, v)?,
                "coord_mode" => self.coord_mode = v.trim().parse()?,
                "latent_gain" => self.latent_gain = num(key, v)?,
                "coord_gain" => self.coord_gain = num(key, v)?,
                "offset_gain" => self.offset_gain = num(key, v)?,
                "spread" => self.spread = num(key, v)?,
                _ => return Err(CodecError::Config(format!("unknown key '{key}'"))),
            }
        }
        self.validate()
    }
}

/// Parses `"1/2,1/3,1/4"` (or bare denominators `"2,3,4"`).
pub fn parse_stages(s: &str) -> Result<Vec<Factor>, CodecError> {
    s.split(',')
        .map(|part| {
            let p = part.trim();
            let den = p.strip_prefix("1/").unwrap_or(p);
            den.parse::<usize>()
                .ok()
                .and_then(Factor::from_denominator)
                .ok_or_else(|| CodecError::Config(format!("stage factor '{p}' not in 1/2, 1/3, 1/4")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sigma: f64,
    pub omega: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sigma: 1e-4,
            omega: 5e-5,
            eta: 1e-3,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cd: f64,
    pub dens: f64,
    pub coord: f64,
    pub points: f64,
    pub bpp: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        cd: f64,
        dens: f64,
        coord: f64,
        points: f64,
        bpp: f64,
        weights: LossWeights,
    ) -> Result<Self, CodecError> {
        for (term, v) in [
            ("cd", cd),
            ("dens", dens),
            ("coord", coord),
            ("points", points),
            ("bpp", bpp),
        ] {
            if !v.is_finite() {
                return Err(CodecError::NonFiniteLoss { term });
            }
        }
        let w = weights;
        Ok(Self {
            cd,
            dens,
            coord,
            points,
            bpp,
            weights,
            total: cd + w.sigma * dens + w.omega * coord + w.eta * points + w.lambda * bpp,
        })
    }
}

/// Value-level inputs of [`total_loss`].
pub struct LossInputs<'a> {
    pub original: &'a PointCloud,
    pub reconstruction: &'a PointCloud,
    pub predicted_counts: &'a [f64],
    pub d_num: &'a [f64],
    pub z_xyz: &'a Tensor,
    pub z_xyz_hat: &'a Tensor,
    pub bpp: f64,
}

pub fn total_loss(inp: &LossInputs, weights: LossWeights) -> Result<LossBreakdown, CodecError> {
    if inp.predicted_counts.len() != inp.d_num.len() || inp.z_xyz.shape != inp.z_xyz_hat.shape {
        return Err(CodecError::Shape("loss inputs disagree in length".into()));
    }
    let cd = crate::metrics::chamfer_distance(inp.original, inp.reconstruction);
    let m = inp.d_num.len().max(1) as f64;
    let dens = inp
        .predicted_counts
        .iter()
        .zip(inp.d_num)
        .map(|(c, d)| (c - d).powi(2))
        .sum::<f64>()
        / m;
    let coord = inp
        .z_xyz
        .data
        .iter()
        .zip(&inp.z_xyz_hat.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / inp.z_xyz.len().max(1) as f64;
    let n = inp.original.len() as f64;
    let points = (inp.predicted_counts.iter().sum::<f64>() - n).abs() / n;
    LossBreakdown::new(cd, dens, coord, points, inp.bpp, weights)
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub z_xyz: Tensor,
    pub d: Vec<f64>,
    pub m: usize,
    /// Final-stage sample positions in emission order (not transmitted).
    pub sample_coords: Vec<Point3>,
    pub density: DensityStats,
}

/// Encoder output still attached to a tape.
pub struct EncodedVars {
    pub z: Var,
    pub z_xyz: Var,
    pub sample_coords: Vec<Point3>,
    pub density: DensityStats,
}

/// Decoder output attached to a tape.
pub struct DecodedVars {
    /// Emitted points, `N' x 3`.
    pub points: Var,
    /// Soft counts, `M x 1`.
    pub counts: Var,
    pub anchors: Var,
    pub emitted_per_anchor: Vec<usize>,
}

struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out))?,
        })
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self, NnError> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

const LEAK: f64 = 0.2;

struct Layers {
    f0: Linear,
    stages: Vec<(Linear, Linear)>,
    z_out: Linear,
    xyz_out: Option<Linear>,
    anchor: Option<Linear>,
    cond1: Linear,
    cond2: Linear,
    count: Linear,
    up_offsets: Vec<Linear>,
    up_features: Vec<Linear>,
}

/// Parameters plus the structure that uses them.
pub struct Codec {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    layers: Layers,
    pub bz: EntropyModel,
    pub bxyz: EntropyModel,
}

impl Codec {
    pub fn new(cfg: ModelConfig) -> Result<Self, CodecError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let r = &mut rng;
        let f0 = Linear::register(&mut store, "enc.f0", 3, h, r)?;
        let mut stages = Vec::new();
        for s in 0..cfg.stages.len() {
            stages.push((
                Linear::register(&mut store, &format!("enc.s{s}.l1"), h + 3, h, r)?,
                Linear::register(&mut store, &format!("enc.s{s}.l2"), h, h, r)?,
            ));
        }
        let z_out = Linear::register(&mut store, "enc.z", h, cfg.c, r)?;
        let (xyz_out, anchor) = if cfg.coord_mode == CoordMode::Learned {
            let e = Linear::register(&mut store, "enc.xyz", 3 + h, cfg.c_xyz, r)?;
            // Start with the first three channels carrying x, y, z and the
            // rest nearly silent; the decoder map starts as its pseudo-inverse.
            let we = store.value_mut(e.w);
            for i in 0..3 + h {
                for j in 0..cfg.c_xyz {
                    let base = if i < 3 && i == j { 1.0 } else { 0.0 };
                    we.set(i, j, base + r.random_range(-0.05..0.05));
                }
            }
            let coord_block = nalgebra::DMatrix::from_fn(3, cfg.c_xyz, |i, j| we.at(i, j));
            let pinv = coord_block
                .pseudo_inverse(1e-12)
                .map_err(|e| CodecError::Config(e.to_string()))?;
            let d = store.add(
                "dec.anchor.w",
                Tensor::new(
                    cfg.c_xyz,
                    3,
                    (0..cfg.c_xyz)
                        .flat_map(|i| (0..3).map(move |j| (i, j)))
                        .map(|(i, j)| pinv[(i, j)])
                        .collect(),
                ),
            )?;
            let db = store.add("dec.anchor.b", Tensor::zeros(1, 3))?;
            (Some(e), Some(Linear { w: d, b: db }))
        } else {
            (None, None)
        };
        let cond1 = Linear::register(&mut store, "dec.cond1", cfg.c + cfg.c_xyz + 1, h, r)?;
        let cond2 = Linear::register(&mut store, "dec.cond2", h, h, r)?;
        let count = Linear::register(&mut store, "dec.count", h, 1, r)?;
        store.value_mut(count.w).data.iter_mut().for_each(|v| *v = 0.0);
        let ups = cfg.upsample_factors();
        let mut up_offsets = Vec::new();
        let mut up_features = Vec::new();
        for (j, &u) in ups.iter().enumerate() {
            up_offsets.push(Linear::register(&mut store, &format!("dec.up{j}.off"), h, 3 * u, r)?);
            if j + 1 < ups.len() {
                up_features.push(Linear::register(
                    &mut store,
                    &format!("dec.up{j}.feat"),
                    h,
                    h * u,
                    r,
                )?);
            }
        }
        let bz = EntropyModel::register(&mut store, "bz", cfg.c, r)?;
        let bxyz = EntropyModel::register(&mut store, "bxyz", cfg.c_xyz, r)?;
        Ok(Self {
            cfg,
            store,
            layers: Layers {
                f0,
                stages,
                z_out,
                xyz_out,
                anchor,
                cond1,
                cond2,
                count,
                up_offsets,
                up_features,
            },
            bz,
            bxyz,
        })
    }

    /// Rebinds a configuration to stored parameters (e.g. from a checkpoint).
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self, CodecError> {
        cfg.validate()?;
        let fresh = Codec::new(cfg.clone())?;
        if fresh.store.len() != store.len() {
            return Err(CodecError::Config(format!(
                "checkpoint has {} parameters, config implies {}",
                store.len(),
                fresh.store.len()
            )));
        }
        for p in fresh.store.iter() {
            let id = store.id(&p.name)?;
            if store.value(id).shape != p.value.shape {
                return Err(CodecError::Config(format!(
                    "parameter '{}' has shape {} in checkpoint, {} in config",
                    p.name,
                    store.value(id).shape_str(),
                    p.value.shape_str()
                )));
            }
        }
        let ups = cfg.upsample_factors().len();
        let layers = Layers {
            f0: Linear::bind(&store, "enc.f0")?,
            stages: (0..cfg.stages.len())
                .map(|s| {
                    Ok((
                        Linear::bind(&store, &format!("enc.s{s}.l1"))?,
                        Linear::bind(&store, &format!("enc.s{s}.l2"))?,
                    ))
                })
                .collect::<Result<_, NnError>>()?,
            z_out: Linear::bind(&store, "enc.z")?,
            xyz_out: match cfg.coord_mode {
                CoordMode::Learned => Some(Linear::bind(&store, "enc.xyz")?),
                CoordMode::Literal => None,
            },
            anchor: match cfg.coord_mode {
                CoordMode::Learned => Some(Linear::bind(&store, "dec.anchor")?),
                CoordMode::Literal => None,
            },
            cond1: Linear::bind(&store, "dec.cond1")?,
            cond2: Linear::bind(&store, "dec.cond2")?,
            count: Linear::bind(&store, "dec.count")?,
            up_offsets: (0..ups)
                .map(|j| Linear::bind(&store, &format!("dec.up{j}.off")))
                .collect::<Result<_, _>>()?,
            up_features: (0..ups.saturating_sub(1))
                .map(|j| Linear::bind(&store, &format!("dec.up{j}.feat")))
                .collect::<Result<_, _>>()?,
        };
        let bz = EntropyModel::bind(&store, "bz", cfg.c)?;
        let bxyz = EntropyModel::bind(&store, "bxyz", cfg.c_xyz)?;
        Ok(Self {
            cfg,
            store,
            layers,
            bz,
            bxyz,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            z: &self.bz,
            xyz: &self.bxyz,
            store: &self.store,
        }
    }

    pub fn encode_tape(&self, tape: &mut Tape, pc: &PointCloud) -> Result<EncodedVars, CodecError> {
        let cfg = &self.cfg;
        let s = &self.store;
        let mut pos: Vec<Point3> = pc.coords().to_vec();
        let centered: Vec<f64> = pos
            .iter()
            .flat_map(|p| p.iter().map(|c| (c - 0.5) * 2.0))
            .collect();
        let x = tape.constant(Tensor::new(pos.len(), 3, centered));
        let f = self.layers.f0.apply(tape, s, x)?;
        let mut feat = tape.leaky_relu(f, LEAK);
        for (stage, factor) in cfg.stages.iter().enumerate() {
            let m = factor.apply(pos.len());
            let idx = geometry::farthest_point_sample(&pos, m);
            let samples: Vec<Point3> = idx.iter().map(|&i| pos[i]).collect();
            let k = cfg.k.min(pos.len());
            let nbrs = geometry::knn_points(&pos, &samples, k)?;
            let mut offsets = Vec::with_capacity(m * k * 3);
            for (q, sp) in samples.iter().enumerate() {
                for &j in nbrs.row(q) {
                    for a in 0..3 {
                        offsets.push((pos[j][a] - sp[a]) * cfg.offset_gain);
                    }
                }
            }
            let gathered = tape.gather_rows(feat, nbrs.indices.clone())?;
            let off = tape.constant(Tensor::new(m * k, 3, offsets));
            let x = tape.concat_cols(&[gathered, off])?;
            let (l1, l2) = &self.layers.stages[stage];
            let h = l1.apply(tape, s, x)?;
            let h = tape.leaky_relu(h, LEAK);
            let h = l2.apply(tape, s, h)?;
            feat = tape.group_max(h, k)?;
            pos = samples;
        }
        let m = pos.len();
        let z = self.layers.z_out.apply(tape, s, feat)?;
        let z = tape.scale(z, cfg.latent_gain);
        let rel: Vec<f64> = pos
            .iter()
            .flat_map(|p| p.iter().map(|c| (c - 0.5) * cfg.coord_gain))
            .collect();
        let rel = tape.constant(Tensor::new(m, 3, rel));
        let z_xyz = match &self.layers.xyz_out {
            Some(lin) => {
                let x = tape.concat_cols(&[rel, feat])?;
                lin.apply(tape, s, x)?
            }
            None => rel,
        };
        let sampled = PointCloud::new(pos.clone(), "samples").map_err(|e| {
            CodecError::Shape(format!("degenerate sample set: {e}"))
        })?;
        let assignment = geometry::nearest_assignment(pc, &sampled);
        let density = compute_density_stats(&assignment, pc, &sampled);
        Ok(EncodedVars {
            z,
            z_xyz,
            sample_coords: pos,
            density,
        })
    }

    pub fn encode(&self, pc: &PointCloud) -> Result<LatentCode, CodecError> {
        let mut tape = Tape::new();
        let enc = self.encode_tape(&mut tape, pc)?;
        Ok(LatentCode {
            z: tape.value(enc.z).clone(),
            z_xyz: tape.value(enc.z_xyz).clone(),
            d: enc.density.d_num.clone(),
            m: enc.sample_coords.len(),
            sample_coords: enc.sample_coords,
            density: enc.density,
        })
    }

    /// Decoder on the tape. `counts_override` fixes the number of emitted
    /// children per anchor (otherwise the rounded soft counts are used).
    pub fn decode_tape(
        &self,
        tape: &mut Tape,
        z: Var,
        z_xyz: Var,
        d: &[f64],
    ) -> Result<DecodedVars, CodecError> {
        let cfg = &self.cfg;
        let s = &self.store;
        let (zt, xt) = (tape.value(z), tape.value(z_xyz));
        let m = zt.rows();
        if zt.cols() != cfg.c || xt.cols() != cfg.c_xyz || xt.rows() != m || d.len() != m {
            return Err(CodecError::Shape(format!(
                "z {} / z_xyz {} / d {} do not match C={} C_xyz={}",
                zt.shape_str(),
                xt.shape_str(),
                d.len(),
                cfg.c,
                cfg.c_xyz
            )));
        }
        let xyz_scaled = tape.scale(z_xyz, 1.0 / cfg.coord_gain);
        let anchors = match &self.layers.anchor {
            Some(lin) => {
                let a = lin.apply(tape, s, z_xyz)?;
                let a = tape.scale(a, 1.0 / cfg.coord_gain);
                tape.add_scalar(a, 0.5)
            }
            None => tape.add_scalar(xyz_scaled, 0.5),
        };
        let z_scaled = tape.scale(z, 1.0 / cfg.latent_gain);
        let dv = tape.constant(Tensor::new(m, 1, d.to_vec()));
        let log_d = tape.constant(Tensor::new(m, 1, d.iter().map(|x| x.ln_1p()).collect()));
        let cond = tape.concat_cols(&[z_scaled, xyz_scaled, log_d])?;
        let h = self.layers.cond1.apply(tape, s, cond)?;
        let h = tape.leaky_relu(h, LEAK);
        let h = self.layers.cond2.apply(tape, s, h)?;
        let mut h = tape.leaky_relu(h, LEAK);
        let lc = self.layers.count.apply(tape, s, h)?;
        let ec = tape.exp(lc);
        let counts = tape.mul(dv, ec)?;

        let ups = cfg.upsample_factors();
        let mut pos = anchors;
        let mut n = m;
        let mut scale = cfg.spread;
        for (j, &u) in ups.iter().enumerate() {
            let off = self.layers.up_offsets[j].apply(tape, s, h)?;
            let off = tape.tanh(off);
            let off = tape.reshape(off, n * u, 3)?;
            let off = tape.scale(off, scale);
            let parent: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, u)).collect();
            let base = tape.gather_rows(pos, parent)?;
            pos = tape.add(base, off)?;
            if j + 1 < ups.len() {
                let f = self.layers.up_features[j].apply(tape, s, h)?;
                let f = tape.leaky_relu(f, LEAK);
                h = tape.reshape(f, n * u, cfg.hidden)?;
            }
            n *= u;
            scale *= 0.5;
        }
        let total = cfg.max_children();
        let emitted: Vec<usize> = tape
            .value(counts)
            .data
            .iter()
            .map(|&c| emitted_count(c, total))
            .collect();
        let mut rows = Vec::with_capacity(emitted.iter().sum());
        for (i, &e) in emitted.iter().enumerate() {
            for t in 0..e {
                rows.push(i * total + child_slot(t, &ups));
            }
        }
        let points = tape.gather_rows(pos, rows)?;
        Ok(DecodedVars {
            points,
            counts,
            anchors,
            emitted_per_anchor: emitted,
        })
    }

    pub fn decode(&self, z: &Tensor, z_xyz: &Tensor, d: &[f64]) -> Result<PointCloud, CodecError> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let xv = tape.constant(z_xyz.clone());
        let out = self.decode_tape(&mut tape, zv, xv, d)?;
        let t = tape.value(out.points);
        let coords = (0..t.rows())
            .map(|r| [t.at(r, 0), t.at(r, 1), t.at(r, 2)])
            .collect();
        PointCloud::new(coords, "decoded").map_err(|e| CodecError::Shape(e.to_string()))
    }

    /// Anchor positions decoded from a coordinate latent.
    pub fn decode_anchors(&self, z_xyz: &Tensor) -> Result<Vec<Point3>, CodecError> {
        let mut tape = Tape::new();
        let m = z_xyz.rows();
        let z = tape.constant(Tensor::zeros(m, self.cfg.c));
        let x = tape.constant(z_xyz.clone());
        let out = self.decode_tape(&mut tape, z, x, &vec![1.0; m])?;
        let a = tape.value(out.anchors);
        Ok((0..m).map(|r| [a.at(r, 0), a.at(r, 1), a.at(r, 2)]).collect())
    }
}

/// Children emitted for a soft count: `round(c)` clamped to `[1, max]`.
pub fn emitted_count(c: f64, max: usize) -> usize {
    (c.round().max(1.0) as usize).min(max)
}

/// Tree slot of the `t`-th emitted child. The first stage digit varies
/// fastest so any prefix spreads across first-level branches.
pub fn child_slot(t: usize, ups: &[usize]) -> usize {
    let mut rest = t;
    let mut slot = 0;
    for &u in ups {
        slot = slot * u + rest % u;
        rest /= u;
    }
    slot
}

/// Chamfer distance built on the tape. Nearest-neighbour indices come from
/// the current values; the distances themselves are differentiable.
pub fn chamfer_on_tape(
    tape: &mut Tape,
    recon: Var,
    original: &PointCloud,
) -> Result<Var, CodecError> {
    let r = tape.value(recon);
    let rp: Vec<Point3> = (0..r.rows()).map(|i| [r.at(i, 0), r.at(i, 1), r.at(i, 2)]).collect();
    let o = original.coords();
    let o2r = geometry::nearest_indices(&rp, o);
    let r2o = geometry::nearest_indices(o, &rp);
    let ot = tape.constant(Tensor::new(o.len(), 3, o.iter().flatten().copied().collect()));
    let nearest_r = tape.gather_rows(recon, o2r)?;
    let d1 = tape.sub(nearest_r, ot)?;
    let d1 = tape.square(d1);
    let s1 = tape.sum(d1);
    let s1 = tape.scale(s1, 1.0 / o.len() as f64);
    let nearest_o = tape.gather_rows(ot, r2o)?;
    let d2 = tape.sub(recon, nearest_o)?;
    let d2 = tape.square(d2);
    let s2 = tape.sum(d2);
    let s2 = tape.scale(s2, 1.0 / rp.len() as f64);
    Ok(tape.add(s1, s2)?)
}

/// Scalar pieces of the loss that live on the tape.
pub struct TapeLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Assembles the weighted loss on the tape.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    tape: &mut Tape,
    original: &PointCloud,
    decoded: &DecodedVars,
    d_num: &[f64],
    z_xyz: Var,
    z_xyz_hat: Var,
    bits: Var,
    weights: LossWeights,
) -> Result<TapeLoss, CodecError> {
    let n = original.len() as f64;
    let cd = chamfer_on_tape(tape, decoded.points, original)?;
    let m = d_num.len();
    let target = tape.constant(Tensor::new(m, 1, d_num.to_vec()));
    let dd = tape.sub(decoded.counts, target)?;
    let dd = tape.square(dd);
    let dens = tape.mean(dd);
    let target_xyz = tape.detach(z_xyz_hat);
    let dc = tape.sub(z_xyz, target_xyz)?;
    let dc = tape.square(dc);
    let coord = tape.mean(dc);
    let total_count = tape.sum(decoded.counts);
    let shifted = tape.add_scalar(total_count, -n);
    let abs = tape.abs(shifted);
    let points = tape.scale(abs, 1.0 / n);
    let bpp = tape.scale(bits, 1.0 / n);

    let terms = [
        (dens, weights.sigma),
        (coord, weights.omega),
        (points, weights.eta),
        (bpp, weights.lambda),
    ];
    let mut total = cd;
    for (v, w) in terms {
        let sv = tape.scale(v, w);
        total = tape.add(total, sv)?;
    }
    let val = |v: Var| tape.value(v).data[0];
    let breakdown = LossBreakdown::new(
        val(cd),
        val(dens),
        val(coord),
        val(points),
        val(bpp),
        weights,
    )?;
    Ok(TapeLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, Shape};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            c: 4,
            c_xyz: 3,
            hidden: 6,
            k: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stage_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.latent_count(96), 4);
        assert_eq!(cfg.latent_count(2048), 86);
        assert_eq!(cfg.upsample_factors(), vec![8, 6, 4]);
        assert_eq!(cfg.max_children(), 192);
    }

    #[test]
    fn encode_shapes() {
        let codec = Codec::new(ModelConfig::default()).unwrap();
        let pc = generate_synthetic(Shape::SphereSurface, 96, 1.0, 3).unwrap();
        let lat = codec.encode(&pc).unwrap();
        assert_eq!(lat.m, 4);
        assert_eq!(lat.z.shape, vec![4, 32]);
        assert_eq!(lat.z_xyz.shape, vec![4, 16]);
        assert_eq!(lat.d.iter().sum::<f64>(), 96.0);
    }

    #[test]
    fn degenerate_cloud_is_finite() {
        let codec = Codec::new(small_cfg()).unwrap();
        let pc = PointCloud::new(vec![[0.3, 0.3, 0.3]; 40], "flat").unwrap();
        let lat = codec.encode(&pc).unwrap();
        assert!(lat.z.all_finite() && lat.z_xyz.all_finite());
        let out = codec.decode(&lat.z, &lat.z_xyz, &lat.d).unwrap();
        assert!(out.coords().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn child_slots_cover_tree() {
        let ups = [8, 6, 4];
        let mut seen = vec![false; 192];
        for t in 0..192 {
            let s = child_slot(t, &ups);
            assert!(!seen[s]);
            seen[s] = true;
        }
        // The first eight children hit eight distinct first-level branches.
        let firsts: std::collections::HashSet<usize> =
            (0..8).map(|t| child_slot(t, &ups) / 24).collect();
        assert_eq!(firsts.len(), 8);
    }

    #[test]
    fn loss_total_is_weighted_sum() {
        let w = LossWeights::default();
        let b = LossBreakdown::new(0.5, 2.0, 3.0, 0.1, 4.0, w).unwrap();
        assert_eq!(b.total, 0.5 + 1e-4 * 2.0 + 5e-5 * 3.0 + 1e-3 * 0.1 + 1e-3 * 4.0);
        assert_eq!(
            LossBreakdown::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, w),
            Err(CodecError::NonFiniteLoss { term: "cd" })
        );
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = ModelConfig {
            c: 12,
            stages: vec![Factor::Quarter, Factor::Half],
            coord_mode: CoordMode::Learned,
            ..ModelConfig::default()
        };
        cfg.seed = 77;
        let mut back = ModelConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn from_store_rebinds_identically() {
        let codec = Codec::new(small_cfg()).unwrap();
        let pc = generate_synthetic(Shape::Plane, 64, 2.0, 1).unwrap();
        let a = codec.encode(&pc).unwrap();
        let again = Codec::from_store(codec.cfg.clone(), codec.store.clone()).unwrap();
        let b = again.encode(&pc).unwrap();
        assert_eq!(a.z, b.z);
    }
}
