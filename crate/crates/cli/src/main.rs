use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use depthkit::bench_scorer::{self, AnswerKey, ScoreError, DEFAULT_BONUS_WEIGHT};
use depthkit::depth_api::{DepthServer, DepthStore};
use depthkit::depth_codec::{self, RelativeDepthParams};
use depthkit::qa_pipeline::{self, DepthFormat, PipelineConfig, PipelineError};
use depthkit::raster::{self, RasterError};
use depthkit::{par, par::Execution};

#[derive(Debug, Parser)]
#[command(name = "depthkit", version, about = "Depth-map codec, QA conversion, depth query server and scoring")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Worker threads for data-parallel work; 1 runs sequentially.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Depth map format conversion.
    #[command(subcommand)]
    Depth(DepthCommand),
    /// Convert an image manifest into a depth QA dataset.
    Convert(ConvertArgs),
    /// Run the depth query server until interrupted.
    Serve(ServeArgs),
    /// Score benchmark predictions against an answer key.
    Score(ScoreArgs),
}

#[derive(Debug, Subcommand)]
enum DepthCommand {
    /// Metric depth (SBD1, 16-bit mm PNG or encoded PNG) to an encoded file.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = EncodeFormat::Png)]
        format: EncodeFormat,
    },
    /// Encoded file back to metric depth. Encoded PNGs are validated first.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = DecodeFormat::U24)]
        format: DecodeFormat,
    },
    /// Normalized 16-bit inverse relative depth to metric, then encoded.
    Relative {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        d_min_mm: f64,
        #[arg(long)]
        d_max_mm: f64,
        #[arg(long, value_enum, default_value_t = EncodeFormat::Png)]
        format: EncodeFormat,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EncodeFormat {
    /// Three-channel RGB PNG.
    Png,
    /// SBD1 container with 24-bit millimeters.
    U24,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecodeFormat {
    /// SBD1 container with 24-bit millimeters.
    U24,
    /// 16-bit grayscale PNG in millimeters (fails above 65535 mm).
    Png16,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    point_qas: Option<usize>,
    #[arg(long)]
    api_fraction: Option<f64>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long, value_enum)]
    depth_format: Option<EncodeFormat>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// JSON with `listen`, `store_root` and `max_turns`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    max_turns: Option<u32>,
    /// Write the bound address here once listening.
    #[arg(long)]
    addr_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BONUS_WEIGHT)]
    bonus_weight: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Validation = 1,
    Io = 2,
    Internal = 3,
}

#[derive(Debug)]
struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

impl Failure {
    fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    fn validation(msg: impl std::fmt::Display) -> Self {
        Self::new(Kind::Validation, anyhow::anyhow!("{msg}"))
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(Kind::Io, anyhow::Error::new(e).context(path.display().to_string()))
}

impl From<RasterError> for Failure {
    fn from(e: RasterError) -> Self {
        let kind = if e.is_io() { Kind::Io } else { Kind::Validation };
        Failure::new(kind, e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io { .. } => Failure::new(Kind::Io, e),
            PipelineError::Raster(r) => r.into(),
            _ => Failure::new(Kind::Validation, e),
        }
    }
}

impl From<ScoreError> for Failure {
    fn from(e: ScoreError) -> Self {
        Failure::new(Kind::Validation, e)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn write_encoded(path: &Path, map: &depth_codec::DepthMap, format: EncodeFormat, exec: Execution) -> Outcome {
    match format {
        EncodeFormat::Png => raster::write_encoded_png(path, &depth_codec::encode_map_with(map, exec))?,
        EncodeFormat::U24 => raster::write_sbd1(path, map)?,
    }
    Ok(())
}

fn run_depth(cmd: DepthCommand, exec: Execution) -> Outcome {
    match cmd {
        DepthCommand::Encode { input, output, format } => {
            let map = raster::read_depth(&input)?;
            write_encoded(&output, &map, format, exec)
        }
        DepthCommand::Decode { input, output, format } => {
            let bytes = read_file(&input)?;
            let map = if bytes.starts_with(raster::SBD1_MAGIC) {
                raster::sbd1_from_bytes(&bytes)?
            } else {
                let img = raster::read_encoded_png(&input)?;
                let violations = depth_codec::validate_encoded(&img);
                if let Some(v) = violations.first() {
                    return Err(Failure::validation(format!(
                        "{}: {} invalid pixel(s); first at ({}, {}): channel {} value {} ({})",
                        input.display(),
                        violations.len(),
                        v.x,
                        v.y,
                        v.channel,
                        v.value,
                        v.reason
                    )));
                }
                depth_codec::decode_map_with(&img, exec).map_err(Failure::validation)?
            };
            match format {
                DecodeFormat::U24 => raster::write_sbd1(&output, &map)?,
                DecodeFormat::Png16 => raster::write_mm16_png(&output, &map)?,
            }
            Ok(())
        }
        DepthCommand::Relative {
            input,
            output,
            d_min_mm,
            d_max_mm,
            format,
        } => {
            let params = RelativeDepthParams::new(d_min_mm, d_max_mm).map_err(Failure::validation)?;
            let (map, saturated) = raster::read_relative_png(&input, params)?;
            if saturated > 0 {
                log::warn!("{saturated} pixel(s) clamped to the maximum encodable depth");
            }
            write_encoded(&output, &map, format, exec)
        }
    }
}

fn run_convert(args: ConvertArgs, seed: u64, exec: Execution) -> Outcome {
    let mut config: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = args.point_qas {
        config.point_qas = n;
    }
    if let Some(f) = args.api_fraction {
        config.api_fraction = f;
    }
    if let Some(n) = args.shard_size {
        config.shard_size = n;
    }
    if let Some(f) = args.depth_format {
        config.depth_format = match f {
            EncodeFormat::Png => DepthFormat::Png,
            EncodeFormat::U24 => DepthFormat::U24,
        };
    }
    let summary = qa_pipeline::convert_dataset(&args.manifest, &args.out, &config, seed, exec)?;
    let skipped: usize = summary.skipped_images.values().sum();
    if skipped > 0 {
        log::warn!(
            "converted {} of {} images; skipped {skipped}: {:?}",
            summary.images_converted,
            summary.images_total,
            summary.skipped_images
        );
    } else {
        log::info!("converted {} images, {} records", summary.images_converted, summary.total_records);
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeFileConfig {
    listen: Option<String>,
    store_root: Option<PathBuf>,
    max_turns: Option<u32>,
}

fn run_serve(args: ServeArgs) -> Outcome {
    let file: ServeFileConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ServeFileConfig::default(),
    };
    let listen = args
        .listen
        .or(file.listen)
        .unwrap_or_else(|| "127.0.0.1:7878".to_string());
    let store_root = args
        .store
        .or(file.store_root)
        .ok_or_else(|| Failure::validation("no depth store given (--store or store_root)"))?;
    let max_turns = args.max_turns.or(file.max_turns).unwrap_or(depthkit::depth_api::DEFAULT_MAX_TURNS);
    if max_turns == 0 {
        return Err(Failure::validation("max_turns must be at least 1"));
    }
    if !store_root.is_dir() {
        return Err(Failure::validation(format!(
            "store root {} is not a directory",
            store_root.display()
        )));
    }

    let server = DepthServer::bind_with_store(&listen, DepthStore::at(&store_root), max_turns)
        .map_err(|e| Failure::new(Kind::Io, anyhow::Error::new(e).context(format!("cannot bind {listen}"))))?;
    let addr = server
        .local_addr()
        .map_err(|e| Failure::new(Kind::Io, e))?;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| Failure::new(Kind::Internal, e))?;

    let running = server.spawn().map_err(|e| Failure::new(Kind::Io, e))?;
    log::info!("listening on {addr}");
    if let Some(path) = &args.addr_file {
        write_file(path, addr.to_string().as_bytes())?;
    }
    let _ = rx.recv();
    log::info!("interrupted; closing {} open session(s)", running.open_sessions());
    running.shutdown();
    Ok(())
}

fn run_score(args: ScoreArgs) -> Outcome {
    let preds_text = String::from_utf8(read_file(&args.preds)?)
        .map_err(|e| Failure::validation(format!("{}: {e}", args.preds.display())))?;
    let preds = bench_scorer::parse_predictions(&preds_text)?;
    let key = AnswerKey::from_json(&read_file(&args.key)?)?;
    let report = bench_scorer::score_all(&preds, &key, args.bonus_weight)?;
    if report.unanswered > 0 {
        log::warn!("{} item(s) had no prediction and scored as wrong", report.unanswered);
    }
    write_file(&args.out, report.to_json().as_bytes())
}

fn run(cli: Cli) -> Outcome {
    let workers = cli.workers.map(|n| n as usize);
    let seed = cli.seed;
    match cli.command {
        Command::Depth(cmd) => par::with_workers(workers, |exec| run_depth(cmd, exec)),
        Command::Convert(args) => par::with_workers(workers, |exec| run_convert(args, seed, exec)),
        Command::Serve(args) => run_serve(args),
        Command::Score(args) => run_score(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(Kind::Validation as u8),
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();

    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            log::error!("{:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
        Err(_) => ExitCode::from(Kind::Internal as u8),
    }
}
