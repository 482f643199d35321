use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use progcloud::harness::checkpoint::Checkpoint;
use progcloud::harness::commands::{self, CompressStats};
use progcloud::harness::config::{parse_kv, parse_overrides, RunConfig};
use progcloud::harness::sweep::{bd_to_csv, gnuplot_data, rd_sweep, rows_to_csv};
use progcloud::harness::{deterministic_mode, load_dataset, load_unit_cube, HarnessError};
use progcloud::io::Format;
use progcloud::synth::Shape;

#[derive(Parser)]
#[command(name = "progcloud", version, about = "Progressive learned point-cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint after every epoch.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV (default: <out>.metrics.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Config overrides such as --train.lambda=0.002.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Encode a cloud into a full progressive bitstream.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Decode a (possibly truncated) bitstream at progressive ratio --pr.
    Decompress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        pr: f64,
        #[arg(long, default_value = "ply_ascii")]
        format: Format,
    },
    /// Evaluate one checkpoint on the test split or given files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Progressive ratios (default: the full 1/C grid).
        #[arg(long, value_delimiter = ',')]
        pr: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RD sweep over several checkpoints; writes CSV, BD-rate CSV and gnuplot data.
    RdSweep {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        pr: Vec<f64>,
        /// Output prefix: <out>.csv, <out>.bd.csv, <out>.dat.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic cloud.
    SynthData {
        #[arg(long, default_value = "sphere_surface")]
        shape: String,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        contrast: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "ply_binary_le")]
        format: Format,
    },
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Evaluation clouds: explicit files, otherwise the checkpoint's test split.
fn eval_clouds(
    ck: &Checkpoint,
    inputs: &[PathBuf],
) -> Result<Vec<progcloud::PointCloud>, HarnessError> {
    if inputs.is_empty() {
        Ok(load_dataset(&ck.run)?.test)
    } else {
        inputs.iter().map(|p| load_unit_cube(p, None)).collect()
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train {
            config,
            out,
            metrics,
            overrides,
        } => {
            let mut kv: BTreeMap<String, String> = match &config {
                Some(p) => parse_kv(
                    &std::fs::read_to_string(p)
                        .map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?,
                )?,
                None => BTreeMap::new(),
            };
            kv.extend(parse_overrides(&overrides)?);
            let cfg = RunConfig::from_kv(&kv)?;
            let metrics = metrics.unwrap_or_else(|| with_ext(&out, ".metrics.csv"));
            let logs = commands::train(&cfg, &out, &metrics)?;
            if let Some(last) = logs.last() {
                println!(
                    "trained {} epochs: loss {:.6} cd {:.6} bpp {:.4} -> {}",
                    logs.len(),
                    last.loss.total,
                    last.loss.cd,
                    last.loss.bpp,
                    out.display()
                );
            }
        }
        Command::Compress {
            checkpoint,
            input,
            output,
            format,
        } => {
            let stats: CompressStats = commands::compress_file(&checkpoint, &input, &output, format)?;
            println!("{stats}");
        }
        Command::Decompress {
            checkpoint,
            input,
            output,
            pr,
            format,
        } => {
            let s = commands::decompress_file(&checkpoint, &input, pr, &output, format)?;
            println!(
                "alpha={} k_z={} k_xyz={} N'={}",
                s.alpha, s.k_z, s.k_xyz, s.n_out
            );
        }
        Command::Evaluate {
            checkpoint,
            inputs,
            pr,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let clouds = eval_clouds(&ck, &inputs)?;
            let alphas = (!pr.is_empty()).then_some(pr.as_slice());
            let report = rd_sweep(std::slice::from_ref(&ck), &clouds, alphas)?;
            let csv = rows_to_csv(&report.rows);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::RdSweep {
            checkpoints,
            inputs,
            pr,
            out,
        } => {
            let cks: Vec<Checkpoint> = checkpoints
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<_, _>>()?;
            let clouds = eval_clouds(&cks[0], &inputs)?;
            let alphas = (!pr.is_empty()).then_some(pr.as_slice());
            let report = rd_sweep(&cks, &clouds, alphas)?;
            write(&with_ext(&out, ".csv"), &rows_to_csv(&report.rows))?;
            write(&with_ext(&out, ".bd.csv"), &bd_to_csv(&report.bd))?;
            write(&with_ext(&out, ".dat"), &gnuplot_data(&report.rows))?;
            println!("{} rows, {} BD-rate summaries", report.rows.len(), report.bd.len());
        }
        Command::SynthData {
            shape,
            n,
            contrast,
            seed,
            output,
            format,
        } => {
            let shape: Shape = shape
                .parse()
                .map_err(|e: progcloud::CloudError| HarnessError::Parse(e.to_string()))?;
            commands::synth_data(shape, n, contrast, seed, &output, format)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if deterministic_mode() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
