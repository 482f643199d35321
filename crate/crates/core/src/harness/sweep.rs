//! Rate-distortion sweeps over checkpoints, clouds and progressive ratios.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::codec::Codec;
use crate::entropy::truncate;
use crate::metrics::{bd_rate, chamfer_distance, psnr_d, MetricError, PeakMode, PsnrMode, RdPoint};
use crate::pipeline::{compress, decompress};
use crate::train::DropStrategy;

use super::checkpoint::Checkpoint;
use super::HarnessError;

pub const RD_CSV_VERSION: &str = "# progcloud rd v1";
pub const RD_COLUMNS: &str =
    "lambda,strategy,cloud,alpha,k_z,k_xyz,entropy_bpp,file_bpp,cd,psnr_d1,psnr_d2,n_out";
pub const BD_COLUMNS: &str = "lambda,anchor,test,bd_rate_percent";

#[derive(Debug, Clone, PartialEq)]
pub struct RdRow {
    pub lambda: f64,
    pub strategy: DropStrategy,
    pub cloud: String,
    pub alpha: f64,
    pub k_z: usize,
    pub k_xyz: usize,
    pub entropy_bpp: f64,
    pub file_bpp: f64,
    pub cd: f64,
    pub psnr_d1: f64,
    pub psnr_d2: f64,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdRow {
    pub lambda: f64,
    /// `Err` carries the reason when the curves do not support a BD-rate.
    pub bd_rate: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdReport {
    pub rows: Vec<RdRow>,
    pub bd: Vec<BdRow>,
}

/// The `1/C` grid: `1/C, 2/C, ..., 1`.
pub fn alpha_grid(c: usize) -> Vec<f64> {
    (1..=c).map(|k| k as f64 / c as f64).collect()
}

/// One (checkpoint, cloud) cell: compress once, then cut and decode per alpha.
pub fn evaluate_cloud(
    codec: &Codec,
    lambda: f64,
    strategy: DropStrategy,
    beta: f64,
    pc: &PointCloud,
    alphas: &[f64],
) -> Result<Vec<RdRow>, HarnessError> {
    let err = |e: &dyn std::fmt::Display| HarnessError::Model(format!("{}: {e}", pc.source_id));
    let layout = strategy.layout();
    let c = compress(codec, pc, layout, beta).map_err(|e| err(&e))?;
    let n = pc.len() as f64;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cut = truncate(&c.bitstream, alpha).map_err(|e| err(&e))?;
        let (k_z, k_xyz) = cut.retained().map_err(|e| err(&e))?;
        let rec = decompress(codec, &cut).map_err(|e| err(&e))?;
        let metric = |m| psnr_d(pc, &rec, m, PeakMode::Literal).map_err(|e| err(&e));
        rows.push(RdRow {
            lambda,
            strategy,
            cloud: pc.source_id.clone(),
            alpha,
            k_z,
            k_xyz,
            entropy_bpp: super::commands::entropy_bpp_at(codec, &c, alpha, layout)?,
            file_bpp: (cut.byte_len() * 8) as f64 / n,
            cd: chamfer_distance(pc, &rec),
            psnr_d1: metric(PsnrMode::D1)?,
            psnr_d2: metric(PsnrMode::D2)?,
            n_out: rec.len(),
        });
    }
    Ok(rows)
}

/// Evaluates every checkpoint on every cloud at every alpha. Cells run in
/// parallel unless deterministic mode is on; the output order is fixed.
pub fn rd_sweep(
    checkpoints: &[Checkpoint],
    clouds: &[PointCloud],
    alphas: Option<&[f64]>,
) -> Result<RdReport, HarnessError> {
    if checkpoints.is_empty() {
        return Err(HarnessError::Config("rd-sweep needs at least one checkpoint".into()));
    }
    let codecs: Vec<Codec> = checkpoints.iter().map(|c| c.codec()).collect::<Result<_, _>>()?;
    let cells: Vec<(usize, usize)> = (0..checkpoints.len())
        .flat_map(|i| (0..clouds.len()).map(move |j| (i, j)))
        .collect();
    let run = |&(i, j): &(usize, usize)| {
        let ck = &checkpoints[i];
        let grid = alphas.map_or_else(|| alpha_grid(ck.run.model.c), <[f64]>::to_vec);
        evaluate_cloud(
            &codecs[i],
            ck.run.weights.lambda,
            ck.run.drop.strategy,
            ck.run.drop.beta,
            &clouds[j],
            &grid,
        )
    };
    let results: Vec<Result<Vec<RdRow>, HarnessError>> = if super::deterministic_mode() {
        cells.iter().map(run).collect()
    } else {
        cells.par_iter().map(run).collect()
    };
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    sort_rows(&mut rows);
    let bd = bd_summaries(&rows);
    Ok(RdReport { rows, bd })
}

pub fn sort_rows(rows: &mut [RdRow]) {
    rows.sort_by(|a, b| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.strategy.as_str().cmp(b.strategy.as_str()))
            .then(a.cloud.cmp(&b.cloud))
            .then(a.alpha.total_cmp(&b.alpha))
    });
}

/// Mean (file-bpp, PSNR-D2) per alpha for one (lambda, strategy).
pub fn mean_curve(rows: &[RdRow], lambda: f64, strategy: DropStrategy) -> Vec<RdPoint> {
    let mut alphas: Vec<f64> = rows
        .iter()
        .filter(|r| r.lambda == lambda && r.strategy == strategy)
        .map(|r| r.alpha)
        .collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas
        .iter()
        .map(|&a| {
            let cell: Vec<&RdRow> = rows
                .iter()
                .filter(|r| r.lambda == lambda && r.strategy == strategy && r.alpha == a)
                .collect();
            let k = cell.len() as f64;
            RdPoint::new(
                cell.iter().map(|r| r.file_bpp).sum::<f64>() / k,
                cell.iter().map(|r| r.psnr_d2).sum::<f64>() / k,
                format!("alpha={a}"),
            )
        })
        .collect()
}

/// BD-rate of the combined curve against the feature-only curve for each
/// lambda that has both.
pub fn bd_from_rows(rows: &[RdRow], lambda: f64) -> Result<f64, MetricError> {
    let anchor = mean_curve(rows, lambda, DropStrategy::FeatureOnly);
    let test = mean_curve(rows, lambda, DropStrategy::Combined);
    bd_rate(&anchor, &test)
}

fn bd_summaries(rows: &[RdRow]) -> Vec<BdRow> {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    lambdas
        .into_iter()
        .filter(|&l| {
            [DropStrategy::Combined, DropStrategy::FeatureOnly]
                .iter()
                .all(|&s| rows.iter().any(|r| r.lambda == l && r.strategy == s))
        })
        .map(|l| BdRow {
            lambda: l,
            bd_rate: bd_from_rows(rows, l).map_err(|e| e.to_string()),
        })
        .collect()
}

pub fn rows_to_csv(rows: &[RdRow]) -> String {
    let mut s = format!("{RD_CSV_VERSION}\n{RD_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.strategy.as_str(),
            r.cloud,
            r.alpha,
            r.k_z,
            r.k_xyz,
            r.entropy_bpp,
            r.file_bpp,
            r.cd,
            r.psnr_d1,
            r.psnr_d2,
            r.n_out
        );
    }
    s
}

pub fn rows_from_csv(text: &str) -> Result<Vec<RdRow>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(RD_CSV_VERSION) {
        return Err(HarnessError::Parse("missing rd csv version line".into()));
    }
    if lines.next() != Some(RD_COLUMNS) {
        return Err(HarnessError::Parse("unexpected rd csv columns".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| HarnessError::Parse(format!("rd csv row {}: bad {what}", i + 1));
            if f.len() != 12 {
                return Err(bad("field count"));
            }
            let real = |k: usize, what: &str| f[k].parse::<f64>().map_err(|_| bad(what));
            let int = |k: usize, what: &str| f[k].parse::<usize>().map_err(|_| bad(what));
            Ok(RdRow {
                lambda: real(0, "lambda")?,
                strategy: f[1].parse().map_err(|_| bad("strategy"))?,
                cloud: f[2].to_string(),
                alpha: real(3, "alpha")?,
                k_z: int(4, "k_z")?,
                k_xyz: int(5, "k_xyz")?,
                entropy_bpp: real(6, "entropy_bpp")?,
                file_bpp: real(7, "file_bpp")?,
                cd: real(8, "cd")?,
                psnr_d1: real(9, "psnr_d1")?,
                psnr_d2: real(10, "psnr_d2")?,
                n_out: int(11, "n_out")?,
            })
        })
        .collect()
}

pub fn bd_to_csv(bd: &[BdRow]) -> String {
    let mut s = format!("{BD_COLUMNS}\n");
    for b in bd {
        let v = match &b.bd_rate {
            Ok(v) => v.to_string(),
            Err(_) => "undefined".to_string(),
        };
        let _ = writeln!(s, "{},feature_only,combined,{v}", b.lambda);
    }
    s
}

/// Gnuplot data: one block per (lambda, strategy) with per-alpha means,
/// blocks separated by two blank lines (addressable with `index`).
pub fn gnuplot_data(rows: &[RdRow]) -> String {
    let mut keys: Vec<(f64, DropStrategy)> = rows.iter().map(|r| (r.lambda, r.strategy)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.as_str().cmp(b.1.as_str())));
    keys.dedup();
    let mut s = String::new();
    for (bi, (l, st)) in keys.iter().enumerate() {
        if bi > 0 {
            s.push_str("\n\n");
        }
        let _ = writeln!(s, "# lambda={l} strategy={}", st.as_str());
        s.push_str("# alpha file_bpp entropy_bpp cd psnr_d1 psnr_d2\n");
        let mut alphas: Vec<f64> = rows
            .iter()
            .filter(|r| r.lambda == *l && r.strategy == *st)
            .map(|r| r.alpha)
            .collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        for a in alphas {
            let cell: Vec<&RdRow> = rows
                .iter()
                .filter(|r| r.lambda == *l && r.strategy == *st && r.alpha == a)
                .collect();
            let k = cell.len() as f64;
            let mean = |f: fn(&RdRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / k;
            let _ = writeln!(
                s,
                "{a} {} {} {} {} {}",
                mean(|r| r.file_bpp),
                mean(|r| r.entropy_bpp),
                mean(|r| r.cd),
                mean(|r| r.psnr_d1),
                mean(|r| r.psnr_d2)
            );
        }
    }
    s
}
