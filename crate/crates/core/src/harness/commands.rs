//! train, compress, decompress, evaluate and synth-data.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::codec::{Codec, LossBreakdown};
use crate::density::NormalizationState;
use crate::entropy::bitstream::{estimate_bpp, retained_for_alpha};
use crate::entropy::{truncate, Layout, ProgressiveBitstream};
use crate::io::{write_pointcloud, Format};
use crate::nn::lr_schedule;
use crate::pipeline::{compress, decompress, Compressed};
use crate::synth::{generate_synthetic, Shape};
use crate::train::{TrainError, Trainer};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::{load_dataset, HarnessError};

pub const METRICS_HEADER: &str = "epoch,lr,steps,loss,cd,dens,coord,points,bpp,d_max,m_max";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub norm: NormalizationState,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.steps,
            l.total,
            l.cd,
            l.dens,
            l.coord,
            l.points,
            l.bpp,
            self.norm.d_max,
            self.norm.m_max
        )
    }
}

fn model_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Model(e.to_string())
}

/// Trains for `cfg.epochs`, writing the checkpoint after every epoch and
/// one metrics line per epoch. On a non-finite loss or gradient the run
/// stops and the last completed epoch's checkpoint stays on disk.
pub fn train(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    metrics_path: &Path,
) -> Result<Vec<EpochLog>, HarnessError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let codec = Codec::new(cfg.model.clone()).map_err(model_err)?;
    let mut trainer = Trainer::new(
        codec,
        cfg.weights,
        cfg.drop,
        ChaCha8Rng::seed_from_u64(cfg.seed),
    );
    trainer.adam.base_lr = cfg.lr;
    trainer.norm = NormalizationState::new(cfg.gamma).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut metrics = std::fs::File::create(metrics_path).map_err(HarnessError::io(metrics_path))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(HarnessError::io(metrics_path))?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr);
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 5];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PointCloud> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let report = trainer.step(&batch, lr).map_err(|e| match e {
                TrainError::Nn(_) | TrainError::Codec(_) => HarnessError::Model(format!(
                    "training diverged in epoch {epoch}, step {steps}: {e}; last good checkpoint kept at {}",
                    checkpoint_path.display()
                )),
                other => model_err(other),
            })?;
            let l = report.loss;
            for (s, v) in sums.iter_mut().zip([l.cd, l.dens, l.coord, l.points, l.bpp]) {
                *s += v;
            }
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let loss = LossBreakdown::new(
            sums[0] / k,
            sums[1] / k,
            sums[2] / k,
            sums[3] / k,
            sums[4] / k,
            cfg.weights,
        )
        .map_err(model_err)?;
        let log = EpochLog {
            epoch,
            lr,
            steps,
            loss,
            norm: trainer.norm,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} loss {:.6} cd {:.6} bpp {:.4}",
            loss.total,
            loss.cd,
            loss.bpp
        );
        writeln!(metrics, "{}", log.csv_line()).map_err(HarnessError::io(metrics_path))?;
        Checkpoint::from_codec(cfg, &trainer.codec, &trainer.adam, trainer.norm, epoch as u64 + 1)
            .save(checkpoint_path)?;
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressStats {
    pub n: usize,
    pub m: usize,
    pub entropy_bpp: f64,
    pub file_bpp: f64,
}

impl std::fmt::Display for CompressStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N={} M={} entropy_bpp={:.6} file_bpp={:.6}",
            self.n, self.m, self.entropy_bpp, self.file_bpp
        )
    }
}

/// Entropy-model rate of what a stream truncated at `alpha` carries.
pub fn entropy_bpp_at(
    codec: &Codec,
    c: &Compressed,
    alpha: f64,
    layout: Layout,
) -> Result<f64, HarnessError> {
    let q = &c.quantized;
    let (kz, kx) = retained_for_alpha(alpha, q.c, q.c_xyz, layout);
    let rz: Vec<usize> = c.importance_z.ranking()[..kz].to_vec();
    let rx: Vec<usize> = c.importance_xyz.ranking()[..kx].to_vec();
    let density_bits = 8 * c.bitstream.header.density_len as usize;
    estimate_bpp(q, &codec.models(), &rz, &rx, c.latent.d.iter().sum::<f64>() as usize, density_bits)
        .map_err(model_err)
}

pub fn compress_file(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    format: Option<Format>,
) -> Result<CompressStats, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let codec = ck.codec()?;
    let pc = super::load_unit_cube(input, format)?;
    let layout = ck.run.drop.strategy.layout();
    let c = compress(&codec, &pc, layout, ck.run.drop.beta).map_err(model_err)?;
    let bytes = c.bitstream.to_bytes();
    std::fs::write(output, &bytes).map_err(HarnessError::io(output))?;
    Ok(CompressStats {
        n: pc.len(),
        m: c.latent.m,
        entropy_bpp: entropy_bpp_at(&codec, &c, 1.0, layout)?,
        file_bpp: (bytes.len() * 8) as f64 / pc.len() as f64,
    })
}

/// Rounds `alpha` up to the `1/C` grid.
pub fn grid_alpha(alpha: f64, c: usize) -> Result<f64, HarnessError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(HarnessError::Parse(format!("--pr {alpha} not in (0, 1]")));
    }
    let k = crate::taildrop::retained_count(1.0 - alpha, c);
    let snapped = k as f64 / c as f64;
    if (snapped - alpha).abs() > 1e-9 {
        log::warn!("--pr {alpha} is off the 1/{c} grid; using {snapped}");
    }
    Ok(snapped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompressStats {
    pub alpha: f64,
    pub k_z: usize,
    pub k_xyz: usize,
    pub n_out: usize,
}

pub fn decompress_file(
    checkpoint: &Path,
    bitstream: &Path,
    alpha: f64,
    output: &Path,
    format: Format,
) -> Result<DecompressStats, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let codec = ck.codec()?;
    let bytes = std::fs::read(bitstream).map_err(HarnessError::io(bitstream))?;
    let bs = ProgressiveBitstream::from_bytes(&bytes).map_err(|e| HarnessError::Parse(e.to_string()))?;
    let (pc, stats) = decompress_stream(&codec, &bs, alpha)?;
    write_pointcloud(output, &pc, format)?;
    Ok(stats)
}

pub fn decompress_stream(
    codec: &Codec,
    bs: &ProgressiveBitstream,
    alpha: f64,
) -> Result<(PointCloud, DecompressStats), HarnessError> {
    let h = &bs.header;
    if h.c != codec.cfg.c || h.c_xyz != codec.cfg.c_xyz {
        return Err(HarnessError::Model(format!(
            "version mismatch: stream has C={} C_xyz={}, checkpoint has C={} C_xyz={}",
            h.c, h.c_xyz, codec.cfg.c, codec.cfg.c_xyz
        )));
    }
    let alpha = grid_alpha(alpha, h.c)?;
    let cut = truncate(bs, alpha).map_err(model_err)?;
    let (k_z, k_xyz) = cut.retained().map_err(model_err)?;
    log::info!("decoding alpha={alpha}: {k_z} feature layer(s), {k_xyz} coordinate layer(s)");
    let pc = decompress(codec, &cut).map_err(model_err)?;
    let n_out = pc.len();
    Ok((
        pc,
        DecompressStats {
            alpha,
            k_z,
            k_xyz,
            n_out,
        },
    ))
}

pub fn synth_data(
    shape: Shape,
    n: usize,
    contrast: f64,
    seed: u64,
    output: &Path,
    format: Format,
) -> Result<PathBuf, HarnessError> {
    let pc = generate_synthetic(shape, n, contrast, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
    write_pointcloud(output, &pc, format)?;
    Ok(output.to_path_buf())
}
