//! Command-line front end: `track`, `ablation`, `export-response`, `suite`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::binfmt::{read_blob, write_blob, Blob};
use crate::error::Error;
use crate::geometry::CellBox;
use crate::harness::{run_ablation, track, Pipeline, TrackResult, TrackerConfig, TransformerMode};
use crate::models::ResponseMap;
use crate::synth::{benchmark_suite, generate, SceneSpec};

pub const RESPONSES_MAGIC: [u8; 4] = *b"TCTR";
pub const MASKS_MAGIC: [u8; 4] = *b"TCTM";
pub const THREADS_ENV: &str = "TCT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "tct",
    about = "Template-ensemble transformer tracker on synthetic feature scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track one scene and write result.csv and summary.txt.
    Track(TrackArgs),
    /// Run every pipeline/mode pair over a directory of scene files.
    Ablation(AblationArgs),
    /// Turn exported responses (and masks) of a run into P5 graymaps and CSVs.
    ExportResponse(ExportArgs),
    /// Write the default benchmark scene files.
    Suite(SuiteArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Off,
    Encoder,
    Mask,
    Feature,
    Full,
}

impl From<ModeArg> for TransformerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Off => TransformerMode::Off,
            ModeArg::Encoder => TransformerMode::EncoderOnly,
            ModeArg::Mask => TransformerMode::MaskOnly,
            ModeArg::Feature => TransformerMode::FeatureOnly,
            ModeArg::Full => TransformerMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Siamese,
    Dcf,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Siamese => Pipeline::Siamese,
            PipelineArg::Dcf => Pipeline::Dcf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportArg {
    Responses,
    Masks,
}

#[derive(Debug, clap::Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Tracker config file; --mode and --pipeline override its values.
    #[arg(long)]
    pub tracker: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub pipeline: Option<PipelineArg>,
    /// Replaces the scene's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub export: Vec<ExportArg>,
}

#[derive(Debug, clap::Args)]
pub struct AblationArgs {
    /// Directory of `*.scene` files, run in file-name order.
    #[arg(long)]
    pub suite: PathBuf,
    /// Base tracker config; pipeline and mode are swept.
    #[arg(long)]
    pub tracker: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    /// Directory of a `track --export responses` run.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Errors while loading inputs are configuration errors.
fn load_error(path: &Path, e: Error) -> CliError {
    match e {
        Error::Parse { .. } => config(e),
        other => CliError::Config(format!("{}: {other}", path.display())),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Track(a) => cmd_track(&a),
        Command::Ablation(a) => cmd_ablation(&a),
        Command::ExportResponse(a) => cmd_export_response(&a),
        Command::Suite(a) => cmd_suite(&a),
    }
}

fn load_tracker(path: Option<&Path>) -> Result<TrackerConfig, CliError> {
    match path {
        Some(p) => {
            let cfg = TrackerConfig::load(p).map_err(|e| load_error(p, e))?;
            for w in [&cfg.self_weights, &cfg.cross_weights]
                .into_iter()
                .flatten()
            {
                if !w.is_file() {
                    return Err(CliError::Config(format!(
                        "weights file {} not found",
                        w.display()
                    )));
                }
            }
            Ok(cfg)
        }
        None => Ok(TrackerConfig::default()),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Config(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_track(a: &TrackArgs) -> Result<(), CliError> {
    let mut scene = SceneSpec::load(&a.scene).map_err(|e| load_error(&a.scene, e))?;
    let mut cfg = load_tracker(a.tracker.as_deref())?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(p) = a.pipeline {
        cfg.pipeline = p.into();
    }
    if let Some(s) = a.seed {
        scene.seed = s;
    }
    prepare_out(&a.out)?;

    let frames = generate(&scene).map_err(runtime)?;
    let result = track(&frames, &cfg).map_err(runtime)?;
    write(a.out.join("result.csv"), result.to_csv())?;
    write(a.out.join("summary.txt"), result.summary())?;
    if a.export.contains(&ExportArg::Responses) {
        write_responses(&a.out.join("responses.bin"), &result)?;
    }
    if a.export.contains(&ExportArg::Masks) {
        write_masks(&a.out.join("masks.bin"), &result)?;
    }
    print!("{}", result.summary());
    Ok(())
}

fn dims(h: usize, w: usize) -> Result<(u16, u16), CliError> {
    match (u16::try_from(h), u16::try_from(w)) {
        (Ok(h), Ok(w)) => Ok((h, w)),
        _ => Err(runtime("grid too large to export")),
    }
}

fn write_blob_file(path: &Path, blob: &Blob) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    write_blob(BufWriter::new(f), blob).map_err(runtime)
}

/// Payload: per frame `[valid row, col, h, w, values…]`.
fn write_responses(path: &Path, result: &TrackResult) -> Result<(), CliError> {
    let first = &result.responses[0];
    let (h, w) = dims(first.height(), first.width())?;
    let mut payload = Vec::new();
    for r in &result.responses {
        let v = r.valid();
        payload.extend([v.row, v.col, v.height, v.width].map(|x| x as f64));
        payload.extend_from_slice(r.data());
    }
    write_blob_file(
        path,
        &Blob {
            magic: RESPONSES_MAGIC,
            a: h,
            b: w,
            payload,
        },
    )
}

/// Payload: per frame `[present, values…]`; absent masks are zero-filled.
fn write_masks(path: &Path, result: &TrackResult) -> Result<(), CliError> {
    let first = &result.responses[0];
    let (h, w) = dims(first.height(), first.width())?;
    let n = first.height() * first.width();
    let mut payload = Vec::new();
    for m in &result.masks {
        match m {
            Some(v) => {
                payload.push(1.0);
                payload.extend_from_slice(v);
            }
            None => {
                payload.push(0.0);
                payload.extend(std::iter::repeat_n(0.0, n));
            }
        }
    }
    write_blob_file(
        path,
        &Blob {
            magic: MASKS_MAGIC,
            a: h,
            b: w,
            payload,
        },
    )
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseMap>, Error> {
    let blob = read_blob(fs::File::open(path)?, RESPONSES_MAGIC)?;
    let (h, w) = (blob.a as usize, blob.b as usize);
    let stride = 4 + h * w;
    if h == 0 || w == 0 || blob.payload.len() % stride != 0 {
        return Err(Error::Format(
            "response payload does not match its header".into(),
        ));
    }
    blob.payload
        .chunks(stride)
        .map(|c| {
            let valid = CellBox {
                row: c[0] as usize,
                col: c[1] as usize,
                height: c[2] as usize,
                width: c[3] as usize,
            };
            ResponseMap::with_valid(h, w, c[4..].to_vec(), valid)
        })
        .collect()
}

pub fn read_masks(path: &Path) -> Result<(usize, usize, Vec<Option<Vec<f64>>>), Error> {
    let blob = read_blob(fs::File::open(path)?, MASKS_MAGIC)?;
    let (h, w) = (blob.a as usize, blob.b as usize);
    let stride = 1 + h * w;
    if h == 0 || w == 0 || blob.payload.len() % stride != 0 {
        return Err(Error::Format(
            "mask payload does not match its header".into(),
        ));
    }
    let masks = blob
        .payload
        .chunks(stride)
        .map(|c| (c[0] != 0.0).then(|| c[1..].to_vec()))
        .collect();
    Ok((h, w, masks))
}

/// Binary graymap with values min-max scaled to 0..=255. A constant map is
/// all 128.
pub fn to_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

/// Response values with the zero padding outside the valid window replaced
/// by the window's minimum, so the image peak is the localized peak.
pub fn display_values(r: &ResponseMap) -> Vec<f64> {
    let v = r.valid();
    let inside = |i: usize| {
        let (row, col) = (i / r.width(), i % r.width());
        row >= v.row && row < v.row + v.height && col >= v.col && col < v.col + v.width
    };
    let floor = (0..r.data().len())
        .filter(|&i| inside(i))
        .map(|i| r.data()[i])
        .fold(f64::INFINITY, f64::min);
    r.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if inside(i) { x } else { floor })
        .collect()
}

fn values_csv(values: &[f64], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn cmd_export_response(a: &ExportArgs) -> Result<(), CliError> {
    let path = a.run.join("responses.bin");
    if !path.is_file() {
        return Err(runtime(format!(
            "{} missing; run `track --export responses` first",
            path.display()
        )));
    }
    let responses =
        read_responses(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let dir = a.run.join("responses");
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    for (t, r) in responses.iter().enumerate() {
        write(
            dir.join(format!("frame_{t:04}.pgm")),
            to_pgm(&display_values(r), r.height(), r.width()),
        )?;
        write(
            dir.join(format!("frame_{t:04}.csv")),
            values_csv(r.data(), r.width()),
        )?;
    }

    let mask_path = a.run.join("masks.bin");
    if mask_path.is_file() {
        let (h, w, masks) =
            read_masks(&mask_path).map_err(|e| runtime(format!("{}: {e}", mask_path.display())))?;
        let dir = a.run.join("masks");
        fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for (t, m) in masks.iter().enumerate() {
            if let Some(m) = m {
                write(dir.join(format!("frame_{t:04}.pgm")), to_pgm(m, h, w))?;
            }
        }
    }
    println!("frames,{}", responses.len());
    Ok(())
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn cmd_ablation(a: &AblationArgs) -> Result<(), CliError> {
    let threads = thread_cap()?;
    let base = load_tracker(a.tracker.as_deref())?;
    let entries = fs::read_dir(&a.suite)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.suite.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scene"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "no .scene files in {}",
            a.suite.display()
        )));
    }
    let suite = files
        .iter()
        .map(|p| SceneSpec::load(p).map_err(|e| load_error(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(&a.out)?;

    let table = run_ablation(&suite, &base.ablation_grid(), threads).map_err(runtime)?;
    let csv = table.to_csv();
    write(a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    eprint!("{table}");
    Ok(())
}

pub fn cmd_suite(a: &SuiteArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(config("--count must be >= 1"));
    }
    prepare_out(&a.out)?;
    for (i, spec) in benchmark_suite(a.count, a.seed).iter().enumerate() {
        write(a.out.join(format!("scene_{i:02}.scene")), spec.to_text())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_mid_gray() {
        let img = to_pgm(&[0.3; 6], 2, 3);
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        assert!(img[img.len() - 6..].iter().all(|&b| b == 128));
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let img = to_pgm(&[-1.0, 0.0, 1.0, 0.5], 2, 2);
        assert_eq!(&img[img.len() - 4..], &[0, 128, 255, 191]);
    }

    #[test]
    fn padding_takes_window_minimum() {
        let valid = CellBox {
            row: 1,
            col: 1,
            height: 1,
            width: 2,
        };
        let r = ResponseMap::with_valid(3, 3, vec![0., 0., 0., 0., -2., -1., 0., 0., 0.], valid)
            .unwrap();
        let v = display_values(&r);
        assert_eq!(v, vec![-2., -2., -2., -2., -2., -1., -2., -2., -2.]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 3);
    }
}
