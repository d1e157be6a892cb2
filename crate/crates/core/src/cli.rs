//! `lidar-evs` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 malformed input file, 3 invalid
//! configuration, 4 nothing renderable, 5 incompatible inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::curation::{self, CurationStats, FusionConfig, PseudoScan, DEFAULT_NORMAL_K};
use crate::dropout::{self, MaskHeader, RoiSpec, DEFAULT_D_MAX};
use crate::fixtures;
use crate::geom::{Point, Pose};
use crate::io::{self, FileKind, FormatError};
use crate::metrics::{self, LidarMetrics, MetricsError};
use crate::rng::{CounterStream, StreamRng};
use crate::sensor::{rasterize, LidarFrame, SensorModel, SensorModelJson};
use crate::splat::{self, GaussianSet};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Malformed { path: PathBuf, source: FormatError },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Malformed {
                source: FormatError::Io(_),
                ..
            } => 1,
            CliError::Malformed { .. } | CliError::Parse { .. } => 2,
            CliError::Config(_) => 3,
            CliError::Degenerate(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "lidar-evs",
    version,
    about = "Pseudo-LiDAR curation for laterally shifted sensor views"
)]
pub struct Cli {
    /// Worker threads; 0 or unset uses one per core.
    #[arg(long, global = true, env = "LIDAR_EVS_THREADS")]
    pub threads: Option<usize>,
    /// Pipeline configuration JSON; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build pseudo scans for shifted poses from a directory of LEVP frames.
    Curate(CurateArgs),
    /// Print the laterally shifted pose of a frame.
    ShiftPose(ShiftPoseArgs),
    /// Keep only the nearest hit per range-map cell of a frame.
    Curl(CurlArgs),
    /// Re-shade a frame's intensities for a shifted viewpoint.
    AdjustIntensity(AdjustArgs),
    /// Sample a dropout mask for a Gaussian set.
    DropoutMask(DropoutArgs),
    /// Render a Gaussian set into a range map.
    Render(RenderArgs),
    /// Compare a prediction against ground truth.
    Eval(EvalArgs),
    /// Time the main stages on synthetic scenes.
    Bench(BenchArgs),
    /// Write the synthetic test scenes.
    GenFixtures(GenFixturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Random,
    Both,
}

#[derive(Debug, Args, Default)]
pub struct ShiftFlags {
    /// Lateral shift in meters.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub direction: Option<Direction>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Directory of LEVP frames, ordered by file name.
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub sensor: Option<PathBuf>,
    #[command(flatten)]
    pub shift: ShiftFlags,
    #[arg(long)]
    pub window: Option<usize>,
    /// Neighbours per normal fit.
    #[arg(long)]
    pub normal_k: Option<usize>,
    /// Frame indices to curate; all frames when omitted.
    #[arg(long = "frame", value_delimiter = ',')]
    pub frame_indices: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write `x y z intensity` text files.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct ShiftPoseArgs {
    /// LEVP frame or pose JSON.
    pub pose: PathBuf,
    #[command(flatten)]
    pub shift: ShiftFlags,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurlArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub sensor: Option<PathBuf>,
    /// Output LEVP path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub shift: ShiftFlags,
    #[arg(long)]
    pub normal_k: Option<usize>,
    /// Output LEVP path, points in the shifted sensor frame.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct RoiFlags {
    #[arg(long)]
    pub sensor: Option<PathBuf>,
    /// Sensor pose as a LEVP frame or pose JSON; identity when omitted.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    /// ROI distance cutoff in meters.
    #[arg(long)]
    pub d_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DropoutArgs {
    pub gaussians: PathBuf,
    #[command(flatten)]
    pub roi: RoiFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mask path; the JSON header goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub gaussians: PathBuf,
    #[command(flatten)]
    pub roi: RoiFlags,
    /// Sample and apply a dropout mask with this seed.
    #[arg(long, conflicts_with = "compensate")]
    pub drop_seed: Option<u64>,
    /// Scale in-ROI opacities by the retention probability.
    #[arg(long)]
    pub compensate: bool,
    /// Output LEVR path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Sensor used to back-project range maps for Chamfer.
    #[arg(long)]
    pub sensor: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene sizes in points.
    #[arg(long = "points", value_delimiter = ',', default_values_t = [100_000usize, 1_000_000])]
    pub points: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Frames in the corridor sequence.
    #[arg(long, default_value_t = 11)]
    pub corridor_frames: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings shared by all commands; every field can come from the config
/// file and be overridden on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sensor: Option<PathBuf>,
    pub fusion: FusionConfig,
    pub delta_m: f64,
    pub direction: Direction,
    pub seed: u64,
    pub normal_k: usize,
    pub dropout: DropoutConfig,
    pub frames: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub d_max: f64,
    pub drop_rate: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            d_max: DEFAULT_D_MAX,
            drop_rate: dropout::DEFAULT_DROP_RATE,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sensor: None,
            fusion: FusionConfig::default(),
            delta_m: 4.0,
            direction: Direction::Left,
            seed: 0,
            normal_k: DEFAULT_NORMAL_K,
            dropout: DropoutConfig::default(),
            frames: None,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_m >= 0.0) || !self.delta_m.is_finite() {
            return Err(CliError::Config(format!(
                "delta_m must be a finite value >= 0, got {}",
                self.delta_m
            )));
        }
        self.fusion
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.normal_k < 3 {
            return Err(CliError::Config(format!(
                "normal_k must be at least 3, got {}",
                self.normal_k
            )));
        }
        if !(0.0..1.0).contains(&self.dropout.drop_rate) {
            return Err(CliError::Config(format!(
                "drop rate {} outside [0, 1)",
                self.dropout.drop_rate
            )));
        }
        if !(self.dropout.d_max > 0.0) {
            return Err(CliError::Config(format!(
                "d_max {} must be positive",
                self.dropout.d_max
            )));
        }
        Ok(())
    }

    fn apply_shift(&mut self, f: &ShiftFlags) {
        if let Some(d) = f.delta {
            self.delta_m = d;
        }
        if let Some(d) = f.direction {
            self.direction = d;
        }
        if let Some(s) = f.seed {
            self.seed = s;
        }
    }

    fn apply_roi(&mut self, f: &RoiFlags) {
        if let Some(s) = &f.sensor {
            self.sensor = Some(s.clone());
        }
        if let Some(r) = f.drop_rate {
            self.dropout.drop_rate = r;
        }
        if let Some(d) = f.d_max {
            self.dropout.d_max = d;
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_sensor(path: Option<&Path>) -> Result<SensorModel> {
    let path = path.ok_or_else(|| {
        CliError::Config("a sensor model is required (--sensor or config)".into())
    })?;
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let json: SensorModelJson = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    SensorModel::from_json(&json).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn malformed(path: &Path) -> impl FnOnce(FormatError) -> CliError + '_ {
    move |source| CliError::Malformed {
        path: path.to_path_buf(),
        source,
    }
}

fn read_frame(path: &Path) -> Result<LidarFrame> {
    io::read_levp(path).map_err(malformed(path))
}

fn read_gaussians(path: &Path) -> Result<GaussianSet> {
    io::read_levg(path).map_err(malformed(path))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoseJson {
    Bare([f64; 16]),
    Wrapped { pose: [f64; 16] },
}

/// A pose from a LEVP header or from JSON (a row-major array of 16 numbers,
/// optionally under a `pose` key).
fn load_pose(path: &Path) -> Result<Pose> {
    let bytes = io::read_file(path).map_err(malformed(path))?;
    if bytes.starts_with(&io::LEVP_MAGIC) {
        return Ok(io::decode_levp(&bytes).map_err(malformed(path))?.pose);
    }
    let parse_err = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let json: PoseJson = serde_json::from_slice(&bytes).map_err(|e| parse_err(e.to_string()))?;
    let values = match json {
        PoseJson::Bare(v) | PoseJson::Wrapped { pose: v } => v,
    };
    Pose::try_from_row_major(&values).map_err(|e| parse_err(e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "levp") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Signs of the requested shifts for one frame. `Random` draws from a
/// stream keyed by the seed and indexed by the frame, so the choice for a
/// frame does not depend on which other frames are processed.
pub fn shift_signs(direction: Direction, seed: u64, frame: usize) -> Vec<i8> {
    match direction {
        Direction::Left => vec![1],
        Direction::Right => vec![-1],
        Direction::Both => vec![1, -1],
        Direction::Random => {
            let mut rng = StreamRng::from_stream(CounterStream::new(seed).substream(frame as u64));
            vec![curation::sample_shift_direction(&mut rng)]
        }
    }
}

fn side_name(sign: i8) -> &'static str {
    if sign > 0 {
        "left"
    } else {
        "right"
    }
}

/// Sidecar written next to every pseudo scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame_index: usize,
    pub frame_file: String,
    pub base_pose: [f64; 16],
    pub extrapolated_pose: [f64; 16],
    pub direction: String,
    pub delta_m: f64,
    pub window: usize,
    pub include_dynamic_from_current: bool,
    pub normal_k: usize,
    pub seed: u64,
    pub source_frame_ids: Vec<u32>,
    pub source_frame_files: Vec<String>,
    pub sensor: SensorModelJson,
    pub stats: CurationStats,
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_ascii(path: &Path, points: &[Point], intensities: &[f64]) -> Result<()> {
    write_bytes(
        &path.with_extension("txt"),
        io::encode_ascii(points, intensities).as_bytes(),
    )
}

fn cmd_curate(args: &CurateArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.apply_shift(&args.shift);
    if let Some(s) = &args.sensor {
        cfg.sensor = Some(s.clone());
    }
    if let Some(w) = args.window {
        cfg.fusion.window = w;
    }
    if let Some(k) = args.normal_k {
        cfg.normal_k = k;
    }
    if let Some(f) = &args.frames {
        cfg.frames = Some(f.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    let sensor = load_sensor(cfg.sensor.as_deref())?;
    let frames_dir = cfg
        .frames
        .clone()
        .ok_or_else(|| CliError::Config("a frame directory is required".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("an output directory is required (--out)".into()))?;

    let files = frame_files(&frames_dir)?;
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "no .levp frames in {}",
            frames_dir.display()
        )));
    }
    let frames = files
        .iter()
        .map(|f| read_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<usize> = if args.frame_indices.is_empty() {
        (0..frames.len()).collect()
    } else {
        args.frame_indices.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= frames.len()) {
        return Err(CliError::Config(format!(
            "frame index {bad} out of range for {} frames",
            frames.len()
        )));
    }

    for &i in &indices {
        for sign in shift_signs(cfg.direction, cfg.seed, i) {
            let target = curation::shift_pose(&frames[i].pose, sign as f64 * cfg.delta_m);
            let curated =
                curation::curate_with(&frames, i, &sensor, &cfg.fusion, &target, cfg.normal_k)
                    .map_err(|e| CliError::Config(format!("frame {i}: {e}")))?;
            let stem = format!("scan_{i:04}_{}", side_name(sign));
            let scan = curated.scan;
            let frame = scan.to_frame(target, frames[i].timestamp);
            write_bytes(&out.join(format!("{stem}.levp")), &io::encode_levp(&frame))?;
            let map = rasterize(&scan.points, &scan.intensities, &sensor);
            write_bytes(&out.join(format!("{stem}.levr")), &io::encode_levr(&map))?;
            if args.ascii {
                write_ascii(&out.join(&stem), &scan.points, &scan.intensities)?;
            }
            let ids = scan.frame_ids();
            let provenance = Provenance {
                frame_index: i,
                frame_file: file_name(&files[i]),
                base_pose: frames[i].pose.to_row_major(),
                extrapolated_pose: target.to_row_major(),
                direction: side_name(sign).into(),
                delta_m: cfg.delta_m,
                window: cfg.fusion.window,
                include_dynamic_from_current: cfg.fusion.include_dynamic_from_current,
                normal_k: cfg.normal_k,
                seed: cfg.seed,
                source_frame_files: ids.iter().map(|&j| file_name(&files[j as usize])).collect(),
                source_frame_ids: ids,
                sensor: sensor.to_json(),
                stats: curated.stats,
            };
            write_json(&out.join(format!("{stem}.json")), &provenance)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ShiftedPose {
    base_pose: [f64; 16],
    direction: &'static str,
    delta_m: f64,
    seed: u64,
    pose: [f64; 16],
}

fn cmd_shift_pose(args: &ShiftPoseArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.apply_shift(&args.shift);
    cfg.validate()?;
    let base = load_pose(&args.pose)?;
    let shifted: Vec<ShiftedPose> = shift_signs(cfg.direction, cfg.seed, 0)
        .into_iter()
        .map(|sign| ShiftedPose {
            base_pose: base.to_row_major(),
            direction: side_name(sign),
            delta_m: cfg.delta_m,
            seed: cfg.seed,
            pose: curation::shift_pose(&base, sign as f64 * cfg.delta_m).to_row_major(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&shifted).expect("serializable") + "\n";
    match &args.out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_curl(args: &CurlArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let sensor = load_sensor(args.sensor.as_deref().or(cfg.sensor.as_deref()))?;
    let frame = read_frame(&args.input)?;
    let keep = curation::raycast(frame.points(), &sensor);
    let pick = |i: usize| keep[i];
    let idx: Vec<usize> = (0..frame.len()).filter(|&i| pick(i)).collect();
    let points: Vec<Point> = idx.iter().map(|&i| frame.points()[i]).collect();
    let intensities: Vec<f64> = idx.iter().map(|&i| frame.intensities()[i]).collect();
    let dynamic: Vec<bool> = idx.iter().map(|&i| frame.dynamic_flags()[i]).collect();
    let out = LidarFrame::new(points, intensities, dynamic, frame.pose, frame.timestamp)
        .expect("subset of a valid frame");
    write_bytes(&args.out, &io::encode_levp(&out))?;
    if args.ascii {
        write_ascii(&args.out, out.points(), out.intensities())?;
    }
    Ok(())
}

fn cmd_adjust(args: &AdjustArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.apply_shift(&args.shift);
    if let Some(k) = args.normal_k {
        cfg.normal_k = k;
    }
    cfg.validate()?;
    let frame = read_frame(&args.input)?;
    if cfg.direction == Direction::Both {
        return Err(CliError::Config(
            "adjust-intensity takes a single direction".into(),
        ));
    }
    let sign = shift_signs(cfg.direction, cfg.seed, 0)[0];
    let target = curation::shift_pose(&frame.pose, sign as f64 * cfg.delta_m);
    let to_target = target.relative_from(&frame.pose);
    let origin_ori = to_target.translation();
    let points = to_target.transform_points(frame.points());
    let all: Vec<usize> = (0..points.len()).collect();
    let normals = curation::estimate_normals_at(&points, &all, cfg.normal_k, &origin_ori)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let intensities: Vec<f64> = points
        .iter()
        .zip(frame.intensities())
        .zip(&normals.normals)
        .map(|((p, &i), n)| curation::adjust_intensity(i, n, &(p - origin_ori), p).value)
        .collect();
    let scan = PseudoScan {
        points,
        intensities,
        source_frame_ids: vec![0; frame.len()],
        normals: Some(normals.normals),
    };
    let out = scan.to_frame(target, frame.timestamp);
    write_bytes(&args.out, &io::encode_levp(&out))?;
    if args.ascii {
        write_ascii(&args.out, out.points(), out.intensities())?;
    }
    Ok(())
}

fn roi_setup(flags: &RoiFlags, cfg: &mut PipelineConfig) -> Result<(SensorModel, Pose, RoiSpec)> {
    cfg.apply_roi(flags);
    cfg.validate()?;
    let sensor = load_sensor(cfg.sensor.as_deref())?;
    let pose = match &flags.pose {
        Some(p) => load_pose(p)?,
        None => Pose::identity(),
    };
    let [lo, hi] = sensor.elevation_fov();
    let spec = RoiSpec::new(cfg.dropout.d_max, lo, hi, cfg.dropout.drop_rate)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((sensor, pose, spec))
}

fn cmd_dropout_mask(args: &DropoutArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let (_, pose, spec) = roi_setup(&args.roi, &mut cfg)?;
    let set = read_gaussians(&args.gaussians)?;
    let roi = dropout::roi_mask(&set.means(), &pose, &spec);
    let mask = dropout::sample_mask(&roi, spec.drop_rate, cfg.seed);
    write_bytes(&args.out, &mask.to_bytes())?;
    write_json(
        &args.out.with_extension("json"),
        &MaskHeader::new(&mask, &spec),
    )
}

fn cmd_render(args: &RenderArgs, mut cfg: PipelineConfig) -> Result<()> {
    let (sensor, pose, spec) = roi_setup(&args.roi, &mut cfg)?;
    let set = read_gaussians(&args.gaussians)?;
    let set = if args.compensate || args.drop_seed.is_some() {
        let roi = dropout::roi_mask(&set.means(), &pose, &spec);
        match args.drop_seed {
            Some(seed) => {
                let mask = dropout::sample_mask(&roi, spec.drop_rate, seed);
                dropout::apply_mask(&set, &mask).expect("mask built for this set")
            }
            None => {
                dropout::compensate_set(&set, &roi, spec.drop_rate).expect("roi built for this set")
            }
        }
    } else {
        set
    };
    let rendered = splat::render_range_map(&set, &pose, &sensor);
    if !set.is_empty() && rendered.skipped.len() == set.len() {
        return Err(CliError::Degenerate(format!(
            "{}: all {} Gaussians sit on the sensor's pole axis",
            args.gaussians.display(),
            set.len()
        )));
    }
    write_bytes(&args.out, &io::encode_levr(&rendered.map))?;
    if args.ascii {
        let points = rendered.map.to_points(&sensor);
        let intensities: Vec<f64> = rendered
            .map
            .intensities()
            .iter()
            .zip(rendered.map.occupancy())
            .filter_map(|(&i, &o)| o.then_some(i))
            .collect();
        write_ascii(&args.out, &points, &intensities)?;
    }
    Ok(())
}

fn metrics_error(e: MetricsError) -> CliError {
    CliError::Mismatch(e.to_string())
}

/// Metrics for two LEVR maps or two LEVP clouds (Chamfer only).
pub fn evaluate_files(
    pred: &Path,
    gt: &Path,
    sensor: Option<&SensorModel>,
) -> Result<LidarMetrics> {
    let pred_bytes = io::read_file(pred).map_err(malformed(pred))?;
    let gt_bytes = io::read_file(gt).map_err(malformed(gt))?;
    let pred_kind = io::detect_kind(&pred_bytes).map_err(malformed(pred))?;
    let gt_kind = io::detect_kind(&gt_bytes).map_err(malformed(gt))?;
    match (pred_kind, gt_kind) {
        (FileKind::RangeMap, FileKind::RangeMap) => {
            let p = io::decode_levr(&pred_bytes).map_err(malformed(pred))?;
            let g = io::decode_levr(&gt_bytes).map_err(malformed(gt))?;
            if (p.height(), p.width()) != (g.height(), g.width()) {
                return Err(metrics_error(MetricsError::DimensionMismatch {
                    pred: (p.height(), p.width()),
                    gt: (g.height(), g.width()),
                }));
            }
            let sensor = match sensor {
                Some(s) if (s.height(), s.width()) == (g.height(), g.width()) => *s,
                Some(s) => {
                    return Err(CliError::Mismatch(format!(
                        "sensor is {}x{} but range maps are {}x{}",
                        s.height(),
                        s.width(),
                        g.height(),
                        g.width()
                    )))
                }
                None => SensorModel::nuscenes_32()
                    .with_size(g.height(), g.width())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            };
            metrics::evaluate_range_maps(&p, &g, &sensor).map_err(metrics_error)
        }
        (FileKind::Frame, FileKind::Frame) => {
            let p = io::decode_levp(&pred_bytes).map_err(malformed(pred))?;
            let g = io::decode_levp(&gt_bytes).map_err(malformed(gt))?;
            let chamfer = match metrics::chamfer(p.points(), g.points()) {
                Ok(v) => Some(v),
                Err(MetricsError::EmptyCloud) => None,
                Err(e) => return Err(metrics_error(e)),
            };
            Ok(LidarMetrics {
                chamfer,
                ..Default::default()
            })
        }
        (a, b) => Err(CliError::Mismatch(format!(
            "cannot compare {a:?} with {b:?}; both inputs must be range maps or both point clouds"
        ))),
    }
}

fn metrics_table(m: &LidarMetrics) -> String {
    let rows = [
        ("depth_mse_median", m.depth_mse_median),
        ("chamfer", m.chamfer),
        ("intensity_rmse", m.intensity_rmse),
        ("raydrop_accuracy", m.raydrop_accuracy),
    ];
    let mut s = String::new();
    for (name, v) in rows {
        let v = v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("{name:<18} {v:>14}\n"));
    }
    s
}

fn cmd_eval(args: &EvalArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let sensor_path = args.sensor.as_deref().or(cfg.sensor.as_deref());
    let sensor = sensor_path.map(|p| load_sensor(Some(p))).transpose()?;
    let m = evaluate_files(&args.pred, &args.gt, sensor.as_ref())?;
    if let Some(out) = &args.out {
        write_json(out, &m)?;
    }
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&m).expect("serializable")
        );
    } else {
        print!("{}", metrics_table(&m));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub points: usize,
    pub threads: usize,
    pub seconds: f64,
    pub points_per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MachineInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpu: Option<String>,
    pub logical_cores: usize,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub sensor: SensorModelJson,
    pub stages: Vec<StageTiming>,
    pub skipped: Vec<String>,
}

fn cpu_model() -> Option<String> {
    let info = fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split(':').nth(1))
        .map(|s| s.trim().to_string())
}

fn timed<T>(stage: &str, points: usize, f: impl FnOnce() -> T) -> (T, StageTiming) {
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    let timing = StageTiming {
        stage: stage.into(),
        points,
        threads: rayon::current_num_threads(),
        seconds,
        points_per_second: if seconds > 0.0 {
            points as f64 / seconds
        } else {
            0.0
        },
    };
    (out, timing)
}

/// Runs every stage on scenes of each size. Stage point counts depend only
/// on the sizes and seed.
pub fn run_bench(sizes: &[usize], seed: u64) -> BenchReport {
    let sensor = SensorModel::nuscenes_32();
    let mut stages = Vec::new();
    let mut skipped = Vec::new();
    for &n in sizes {
        let mut rng = StreamRng::new(seed ^ n as u64);
        let frame_count = 10;
        let frames: Vec<LidarFrame> = (0..frame_count)
            .map(|i| {
                let per = n / frame_count + usize::from(i < n % frame_count);
                let mut frame = fixtures::random_frame(&mut rng, per, &sensor, Pose::identity());
                frame.pose = Pose::from_translation(Point::new(i as f64, 0.0, 0.0));
                frame.timestamp = i as i64;
                frame
            })
            .collect();
        let (fused, t) = timed("fuse", n, || {
            curation::fuse(&frames, 0, &FusionConfig::with_window(frame_count))
                .expect("valid window")
        });
        stages.push(t);
        let (_, t) = timed("raycast", fused.len(), || {
            curation::raycast(&fused.points, &sensor)
        });
        stages.push(t);
        let (_, t) = timed("curl", fused.len(), || {
            curation::occlusion_curl(&fused, &sensor)
        });
        stages.push(t);
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => {
                let (_, t) = pool.install(|| {
                    timed("raycast+curl (1 thread)", fused.len(), || {
                        curation::occlusion_curl(&fused, &sensor)
                    })
                });
                stages.push(t);
            }
            Err(e) => skipped.push(format!("raycast+curl (1 thread): {e}")),
        }
        let gaussians: Vec<splat::Gaussian> = fused
            .points
            .iter()
            .zip(&fused.intensities)
            .map(|(p, &i)| splat::Gaussian::isotropic(*p, 0.02, 0.8, i))
            .collect();
        let set = GaussianSet::new(gaussians).expect("finite fixture gaussians");
        let (_, t) = timed("render", set.len(), || {
            splat::render_range_map(&set, &Pose::identity(), &sensor)
        });
        stages.push(t);
    }
    BenchReport {
        machine: MachineInfo {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpu: cpu_model(),
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: rayon::current_num_threads(),
        },
        sensor: sensor.to_json(),
        stages,
        skipped,
    }
}

fn cmd_bench(args: &BenchArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let report = run_bench(&args.points, args.seed.unwrap_or(cfg.seed));
    for s in &report.stages {
        println!(
            "{:<26} {:>9} pts {:>10.4} s {:>14.0} pts/s",
            s.stage, s.points, s.seconds, s.points_per_second
        );
    }
    for s in &report.skipped {
        println!("skipped: {s}");
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_gen_fixtures(args: &GenFixturesArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out = &args.out;

    let tp = fixtures::two_plane();
    write_bytes(
        &out.join("two_plane/frame_0000.levp"),
        &io::encode_levp(&tp.frame),
    )?;
    write_json(&out.join("two_plane/sensor.json"), &tp.sensor.to_json())?;

    let corridor = fixtures::corridor(args.corridor_frames);
    for (i, f) in corridor.frames.iter().enumerate() {
        write_bytes(
            &out.join(format!("corridor/frame_{i:04}.levp")),
            &io::encode_levp(f),
        )?;
    }
    write_json(
        &out.join("corridor/sensor.json"),
        &corridor.sensor.to_json(),
    )?;

    let mut rng = StreamRng::new(seed);
    let sphere = fixtures::sphere_cloud(&mut rng, 1000);
    let sphere_frame =
        LidarFrame::new_static(sphere.clone(), vec![0.5; sphere.len()], Pose::identity(), 0)
            .expect("valid sphere frame");
    write_bytes(&out.join("sphere.levp"), &io::encode_levp(&sphere_frame))?;
    let plane = fixtures::plane_cloud(&mut rng, 40, 0.25);
    let plane_frame =
        LidarFrame::new_static(plane.clone(), vec![0.5; plane.len()], Pose::identity(), 0)
            .expect("valid plane frame");
    write_bytes(&out.join("plane.levp"), &io::encode_levp(&plane_frame))?;

    let grid = fixtures::gaussian_grid(seed);
    write_bytes(
        &out.join("gaussian_grid/gaussians.levg"),
        &io::encode_levg(&grid.set),
    )?;
    write_json(
        &out.join("gaussian_grid/sensor.json"),
        &grid.sensor.to_json(),
    )?;
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    // Each command validates after applying its flag overrides.
    let cfg = load_config(cli.config.as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Curate(a) => cmd_curate(a, cfg),
        Command::ShiftPose(a) => cmd_shift_pose(a, cfg),
        Command::Curl(a) => cmd_curl(a, cfg),
        Command::AdjustIntensity(a) => cmd_adjust(a, cfg),
        Command::DropoutMask(a) => cmd_dropout_mask(a, cfg),
        Command::Render(a) => cmd_render(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::Bench(a) => cmd_bench(a, cfg),
        Command::GenFixtures(a) => cmd_gen_fixtures(a, cfg),
    })
}

/// Parses `std::env::args`, runs, reports errors on stderr and returns the
/// process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lidar-evs: {e}");
            e.exit_code()
        }
    }
}
