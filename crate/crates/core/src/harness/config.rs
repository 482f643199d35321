//! Flat `namespace.key = value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::codec::{LossWeights, ModelConfig};
use crate::density::{DropBounds, EMA_GAMMA};
use crate::synth::Shape;
use crate::train::DropPolicy;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        count: usize,
        points: usize,
        shapes: Vec<Shape>,
        max_contrast: f64,
        seed: u64,
    },
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Trailing clouds held out for evaluation.
    pub test_count: usize,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub drop: DropPolicy,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                count: 64,
                points: 2048,
                shapes: vec![Shape::SphereSurface, Shape::Plane, Shape::GaussianClusters],
                max_contrast: 5.0,
                seed: 0,
            },
            test_count: 8,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            drop: DropPolicy::default(),
            gamma: EMA_GAMMA,
            epochs: 50,
            batch_size: 32,
            lr: crate::nn::BASE_LR,
            seed: 0,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Parse(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if !k.contains('.') {
            return Err(HarnessError::Parse(format!(
                "config line {}: key '{k}' needs a namespace",
                i + 1
            )));
        }
        kv.insert(k.to_string(), v.trim().to_string());
    }
    Ok(kv)
}

/// Turns `--ns.key=value` arguments into entries.
pub fn parse_overrides(args: &[String]) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut kv = BTreeMap::new();
    for a in args {
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| HarnessError::Parse(format!("unexpected argument '{a}'")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| HarnessError::Parse(format!("override '{a}' needs =value")))?;
        if !k.contains('.') {
            return Err(HarnessError::Parse(format!("override key '{k}' needs a namespace")));
        }
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, HarnessError> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{k}: cannot parse '{v}'")))
}

impl RunConfig {
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<(), HarnessError> {
        self.model
            .apply_kv(kv)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let (mut rho_min, mut rho_max) = (self.drop.bounds.rho_min, self.drop.bounds.rho_max);
        let mut files: Option<Vec<PathBuf>> = None;
        let (mut count, mut points, mut shapes, mut max_contrast, mut data_seed) = match &self.data {
            DataSource::Synthetic {
                count,
                points,
                shapes,
                max_contrast,
                seed,
            } => (*count, *points, shapes.clone(), *max_contrast, *seed),
            DataSource::Files(f) => {
                files = Some(f.clone());
                let d = RunConfig::default();
                match d.data {
                    DataSource::Synthetic {
                        count,
                        points,
                        shapes,
                        max_contrast,
                        seed,
                    } => (count, points, shapes, max_contrast, seed),
                    DataSource::Files(_) => unreachable!(),
                }
            }
        };
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                k if k.starts_with("model.") => {}
                "data.count" => count = num(k, v)?,
                "data.points" => points = num(k, v)?,
                "data.shapes" => {
                    shapes = v
                        .split(',')
                        .map(|s| s.trim().parse::<Shape>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| HarnessError::Config(format!("{k}: {e}")))?
                }
                "data.max_contrast" => max_contrast = num(k, v)?,
                "data.seed" => data_seed = num(k, v)?,
                "data.files" => {
                    files = if v.is_empty() {
                        None
                    } else {
                        Some(v.split(',').map(|s| PathBuf::from(s.trim())).collect())
                    }
                }
                "data.test_count" => self.test_count = num(k, v)?,
                "train.lambda" => self.weights.lambda = num(k, v)?,
                "train.sigma" => self.weights.sigma = num(k, v)?,
                "train.omega" => self.weights.omega = num(k, v)?,
                "train.eta" => self.weights.eta = num(k, v)?,
                "train.epochs" => self.epochs = num(k, v)?,
                "train.batch_size" => self.batch_size = num(k, v)?,
                "train.lr" => self.lr = num(k, v)?,
                "train.seed" => self.seed = num(k, v)?,
                "drop.rho_min" => rho_min = num(k, v)?,
                "drop.rho_max" => rho_max = num(k, v)?,
                "drop.beta" => self.drop.beta = num(k, v)?,
                "drop.gamma" => self.gamma = num(k, v)?,
                "drop.mix_probability" => self.drop.mix_probability = num(k, v)?,
                "drop.enabled" => self.drop.enabled = num(k, v)?,
                "drop.strategy" => {
                    self.drop.strategy = v.parse().map_err(|e| HarnessError::Config(format!("{k}: {e}")))?
                }
                other => return Err(HarnessError::Config(format!("unknown key '{other}'"))),
            }
        }
        self.drop.bounds =
            DropBounds::new(rho_min, rho_max).map_err(|e| HarnessError::Config(e.to_string()))?;
        self.data = match files {
            Some(f) => DataSource::Files(f),
            None => DataSource::Synthetic {
                count,
                points,
                shapes,
                max_contrast,
                seed: data_seed,
            },
        };
        self.validate()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let w = &self.weights;
        for (name, v) in [
            ("train.lambda", w.lambda),
            ("train.sigma", w.sigma),
            ("train.omega", w.omega),
            ("train.eta", w.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        if !(1e-5..=1e-2).contains(&w.lambda) {
            log::warn!("train.lambda = {} is outside [1e-5, 1e-2]", w.lambda);
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config("train.lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop.beta) || !(0.0..=1.0).contains(&self.drop.mix_probability)
        {
            return Err(HarnessError::Config(
                "drop.beta and drop.mix_probability must lie in [0, 1]".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HarnessError::Config("drop.gamma must lie in (0, 1]".into()));
        }
        if let DataSource::Synthetic {
            count,
            points,
            shapes,
            max_contrast,
            ..
        } = &self.data
        {
            if *count <= self.test_count {
                return Err(HarnessError::Config(format!(
                    "data.count = {count} leaves no training clouds after {} test clouds",
                    self.test_count
                )));
            }
            if *points < 8 || shapes.is_empty() || !(*max_contrast >= 1.0) {
                return Err(HarnessError::Config(
                    "synthetic data needs points >= 8, a shape, max_contrast >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.to_kv();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        match &self.data {
            DataSource::Synthetic {
                count,
                points,
                shapes,
                max_contrast,
                seed,
            } => {
                put("data.count", count.to_string());
                put("data.points", points.to_string());
                put(
                    "data.shapes",
                    shapes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
                );
                put("data.max_contrast", max_contrast.to_string());
                put("data.seed", seed.to_string());
            }
            DataSource::Files(f) => put(
                "data.files",
                f.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
        }
        put("data.test_count", self.test_count.to_string());
        put("train.lambda", self.weights.lambda.to_string());
        put("train.sigma", self.weights.sigma.to_string());
        put("train.omega", self.weights.omega.to_string());
        put("train.eta", self.weights.eta.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", self.lr.to_string());
        put("train.seed", self.seed.to_string());
        put("drop.rho_min", self.drop.bounds.rho_min.to_string());
        put("drop.rho_max", self.drop.bounds.rho_max.to_string());
        put("drop.beta", self.drop.beta.to_string());
        put("drop.gamma", self.gamma.to_string());
        put("drop.mix_probability", self.drop.mix_probability.to_string());
        put("drop.enabled", self.drop.enabled.to_string());
        put("drop.strategy", self.drop.strategy.as_str().to_string());
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::DropStrategy;

    #[test]
    fn kv_round_trip() {
        let text = "# comment\ntrain.lambda = 0.002\nmodel.C = 16\ndrop.strategy = feature_only\n";
        let cfg = RunConfig::from_kv(&parse_kv(text).unwrap()).unwrap();
        assert_eq!(cfg.weights.lambda, 0.002);
        assert_eq!(cfg.model.c, 16);
        assert_eq!(cfg.drop.strategy, DropStrategy::FeatureOnly);
        let back = RunConfig::from_kv(&parse_kv(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_kv("no_equals"), Err(HarnessError::Parse(_))));
        assert!(matches!(
            RunConfig::from_kv(&parse_kv("train.bogus = 1").unwrap()),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_kv(&parse_kv("train.sigma = -1").unwrap()),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            parse_overrides(&["--lambda=3".into()]),
            Err(HarnessError::Parse(_))
        ));
    }

    #[test]
    fn overrides_layer_on_file() {
        let mut kv = parse_kv("train.epochs = 3").unwrap();
        kv.extend(parse_overrides(&["--train.epochs=7".into()]).unwrap());
        assert_eq!(RunConfig::from_kv(&kv).unwrap().epochs, 7);
    }
}
