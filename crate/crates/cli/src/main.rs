use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use leanvae::lvid::RawVideo;
use leanvae::metrics::{cost_model_with, psnr, serialize_metric, ssim, FlopConvention};
use leanvae::model::{Model, ModelConfig};
use leanvae::tensor::{read_ntsr_file, write_ntsr_file};
use leanvae::tiling::{frame_chunks, row_chunks, split_rows, stream_decode, stream_encode, StreamState};
use leanvae::training::{run_training, TrainConfig};
use leanvae::{Error, Tensor};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "leanvae", version, about = "Lightweight video autoencoder")]
struct Cli {
    /// Worker threads for op-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for commands with randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an LVID clip to an NTSR latent.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stream in chunks of N frames (first chunk N = 1 + 4k, later N - 1).
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Decode an NTSR latent to an LVID clip.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stream in chunks matching `encode --chunk N`.
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Encode and decode a clip and report PSNR and SSIM.
    Roundtrip {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train on the synthetic corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the log and checkpoints.
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
    },
    /// Analytic parameter and FLOP counts.
    Flops {
        /// TOML with model fields, either top-level or under `[model]`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Clip shape as FxHxW.
        #[arg(long, default_value = "17x768x768")]
        shape: String,
        #[arg(long, value_enum, default_value_t = Convention::MacAsOne)]
        convention: Convention,
    },
    /// Run the built-in correctness suites.
    Selftest,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Convention {
    MacAsOne,
    MacAsTwo,
}

/// A failure with its exit code: 2 bad input, 3 model mismatch, 4 I/O.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Version(_) => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Io { .. } => 4,
            Error::NonFinite { .. } | Error::Graph(_) | Error::Cache(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn mismatch(message: String) -> Failure {
    Failure { code: 3, message }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Encode { input, model, out, chunk } => encode(&input, &model, &out, chunk),
        Command::Decode { input, model, out, chunk } => decode(&input, &model, &out, chunk),
        Command::Roundtrip { input, model, report } => roundtrip(&input, &model, &report),
        Command::Train { config, out } => train(&config, &out, cli.seed),
        Command::Flops { config, shape, convention } => flops(config.as_deref(), &shape, convention),
        Command::Selftest => selftest(cli.seed.unwrap_or(0)),
    };
    match outcome {
        Ok(value) => {
            let failed = value.get("passed") == Some(&serde_json::Value::Bool(false));
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON output"));
            if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn encode_video(model: &Model<f32>, x: &Tensor<f32>, chunk: Option<usize>) -> Result<(Tensor<f32>, usize), Failure> {
    match chunk {
        None => Ok((model.encode(x)?.z, 1)),
        Some(n) => {
            let pieces = split_rows(x, &frame_chunks(x.shape()[0], n)?)?;
            let rows = stream_encode(model, &pieces, &mut StreamState::new(model))?;
            Ok((Tensor::concat_axis0(&rows.iter().collect::<Vec<_>>())?, pieces.len()))
        }
    }
}

fn decode_latent(model: &Model<f32>, z: &Tensor<f32>, chunk: Option<usize>) -> Result<(Tensor<f32>, usize), Failure> {
    if z.ndim() != 4 || z.shape()[3] != model.config.d {
        return Err(mismatch(format!("latent {:?} does not fit a model with d = {}", z.shape(), model.config.d)));
    }
    match chunk {
        None => Ok((model.decode(z)?, 1)),
        Some(n) => {
            let pieces = split_rows(z, &row_chunks(z.shape()[0], n)?)?;
            let frames = stream_decode(model, &pieces, &mut StreamState::new(model))?;
            Ok((Tensor::concat_axis0(&frames.iter().collect::<Vec<_>>())?, pieces.len()))
        }
    }
}

fn encode(input: &Path, model: &Path, out: &Path, chunk: Option<usize>) -> CmdResult {
    let start = Instant::now();
    let video = RawVideo::read(input)?;
    let model = Model::<f32>::load(model)?;
    let (z, chunks) = encode_video(&model, &video.to_tensor(), chunk)?;
    write_ntsr_file(&z, out).map_err(io_failure)?;
    Ok(json!({ "latent_shape": z.shape(), "chunks": chunks, "out": out, "wall_time_ms": elapsed_ms(start) }))
}

fn decode(input: &Path, model: &Path, out: &Path, chunk: Option<usize>) -> CmdResult {
    let start = Instant::now();
    let z = read_ntsr_file::<f32>(input)?;
    let model = Model::<f32>::load(model)?;
    let (x, chunks) = decode_latent(&model, &z, chunk)?;
    let video = RawVideo::from_tensor(&x)?;
    video.write(out).map_err(io_failure)?;
    Ok(json!({
        "video_shape": [video.frames, video.height, video.width, 3],
        "chunks": chunks,
        "out": out,
        "wall_time_ms": elapsed_ms(start),
    }))
}

/// Output files failing to open are I/O errors, not bad input.
fn io_failure(e: Error) -> Failure {
    match e {
        Error::Io { .. } => Failure { code: 4, message: e.to_string() },
        other => other.into(),
    }
}

#[derive(Serialize)]
struct RoundtripReport {
    #[serde(serialize_with = "serialize_metric")]
    psnr: f64,
    #[serde(serialize_with = "serialize_metric")]
    ssim: f64,
    latent_shape: Vec<usize>,
    wall_time_ms: f64,
}

fn roundtrip(input: &Path, model: &Path, report: &Path) -> CmdResult {
    let start = Instant::now();
    let video = RawVideo::read(input)?;
    let model = Model::<f32>::load(model)?;
    let x = video.to_tensor::<f32>();
    let z = model.encode(&x)?.z;
    // metrics compare the 8-bit clips, as a decode to file would produce
    let recon = RawVideo::from_tensor(&model.decode(&z)?)?;
    let (a, b) = (video.to_tensor::<f64>(), recon.to_tensor::<f64>());
    let out = RoundtripReport { psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)?, latent_shape: z.shape().to_vec(), wall_time_ms: elapsed_ms(start) };
    let value = serde_json::to_value(&out).expect("report serializes");
    let text = serde_json::to_string_pretty(&value).expect("report serializes");
    std::fs::write(report, text).map_err(|e| Failure { code: 4, message: format!("{}: {e}", report.display()) })?;
    Ok(value)
}

fn train(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::from(Error::io(config, e)))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.data_seed = s;
    }
    let summary = run_training(&cfg, out).map_err(io_failure)?;
    Ok(serde_json::to_value(summary).expect("summary serializes"))
}

fn model_config(path: &Path) -> Result<ModelConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let table: toml::Table = text.parse().map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })?;
    let parsed = if table.contains_key("model") {
        TrainConfig::from_toml(&text).map(|c| c.model)
    } else {
        toml::from_str::<ModelConfig>(&text).map_err(|e| Error::Input(format!("config: {e}")))
    };
    Ok(parsed?)
}

fn parse_shape(shape: &str) -> Result<[usize; 4], Failure> {
    let dims: Vec<usize> = shape
        .split(['x', 'X'])
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure { code: 2, message: format!("shape {shape:?} is not FxHxW") })?;
    match dims[..] {
        [f, h, w] => Ok([f, h, w, 3]),
        _ => Err(Failure { code: 2, message: format!("shape {shape:?} is not FxHxW") }),
    }
}

fn flops(config: Option<&Path>, shape: &str, convention: Convention) -> CmdResult {
    let cfg = match config {
        Some(p) => model_config(p)?,
        None => ModelConfig::default(),
    };
    let convention = match convention {
        Convention::MacAsOne => FlopConvention::MacAsOne,
        Convention::MacAsTwo => FlopConvention::MacAsTwo,
    };
    let report = cost_model_with(&cfg, parse_shape(shape)?, convention)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn selftest(seed: u64) -> CmdResult {
    let suites = leanvae::selftest::run_all(seed);
    for s in &suites {
        eprintln!("{} {} ({:.0} ms) {}", if s.passed { "pass" } else { "FAIL" }, s.name, s.elapsed_ms, s.detail);
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(json!({ "passed": passed, "seed": seed, "suites": suites }))
}
