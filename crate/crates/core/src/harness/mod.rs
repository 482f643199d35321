//! Command implementations behind the `progcloud` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod sweep;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::{normalize_to_unit_cube, PointCloud};
use crate::io::{load_pointcloud, Format};
use crate::synth::generate_synthetic;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, RunConfig};

/// Setting this to `1` forces single-threaded, schedule-independent runs.
pub const DETERMINISTIC_ENV: &str = "PROGCLOUD_DETERMINISTIC";

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse(_) => 2,
            HarnessError::Config(_) => 3,
            HarnessError::Model(_) => 4,
            HarnessError::Io(_) => 5,
        }
    }

    pub(crate) fn io(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
        move |e| HarnessError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<crate::io::IoError> for HarnessError {
    fn from(e: crate::io::IoError) -> Self {
        match e {
            crate::io::IoError::Os(_) => HarnessError::Io(e.to_string()),
            _ => HarnessError::Parse(e.to_string()),
        }
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// Materializes the configured clouds in the unit cube. Synthetic cloud `i`
/// cycles through the shapes with a seeded density contrast.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    let all = match &cfg.data {
        DataSource::Synthetic {
            count,
            points,
            shapes,
            max_contrast,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*count)
                .map(|i| {
                    let contrast = if *max_contrast > 1.0 {
                        rng.random_range(1.0..=*max_contrast)
                    } else {
                        1.0
                    };
                    let cloud_seed: u64 = rng.random();
                    let mut pc = generate_synthetic(shapes[i % shapes.len()], *points, contrast, cloud_seed)
                        .map_err(|e| HarnessError::Config(e.to_string()))?;
                    pc.source_id = format!("synth{i:03}_{}", shapes[i % shapes.len()]);
                    Ok(pc)
                })
                .collect::<Result<Vec<_>, HarnessError>>()?
        }
        DataSource::Files(paths) => paths
            .iter()
            .map(|p| load_unit_cube(p, None))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if all.len() <= cfg.test_count {
        return Err(HarnessError::Config(format!(
            "{} clouds cannot leave {} for testing",
            all.len(),
            cfg.test_count
        )));
    }
    let split = all.len() - cfg.test_count;
    let mut train = all;
    let test = train.split_off(split);
    Ok(Dataset { train, test })
}

/// Loads a cloud file, guessing the format from the extension when not
/// given. Clouds already inside the unit cube are kept as they are; others
/// are rescaled into it.
pub fn load_unit_cube(path: &Path, format: Option<Format>) -> Result<PointCloud, HarnessError> {
    let fmt = format
        .or_else(|| Format::from_path(path))
        .ok_or_else(|| HarnessError::Parse(format!("{}: unknown cloud format", path.display())))?;
    let pc = load_pointcloud(path, fmt)?;
    let b = pc.bounding_box();
    if b.p_min.iter().chain(&b.p_max).all(|v| (0.0..=1.0).contains(v)) {
        return Ok(pc);
    }
    let (unit, t) = normalize_to_unit_cube(&pc, 0.0).map_err(|e| HarnessError::Parse(e.to_string()))?;
    log::info!(
        "{}: rescaled into the unit cube (scale {}, offset {:?})",
        path.display(),
        t.scale,
        t.offset
    );
    Ok(unit)
}
