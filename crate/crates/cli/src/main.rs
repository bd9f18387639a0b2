use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidarpass::checkpoint::Checkpoint;
use lidarpass::config::{RunConfig, TrainMode};
use lidarpass::dataio::{generate_synthetic_dataset, list_scene_dirs, load_scene, save_dataset, SynthConfig};
use lidarpass::evalmetrics::MetricsReport;
use lidarpass::pipeline::{
    evaluate, load_scenes, mapping_csv, projection_stats, split_validation, train, voxel_counts, PreparedScene,
    StepLog,
};
use lidarpass::Error;
use serde_json::Value;

/// Environment variable that replaces the configured training seed.
const SEED_ENV: &str = "LIDARPASS_SEED";

fn config_help() -> String {
    format!(
        "Defaults taken from the reference method:\n{}\n\n{SEED_ENV} overrides the `seed` config field.\n\
         Exit codes: 0 success, 1 internal error, 2 input or format error, 3 invalid configuration.",
        RunConfig::provenance_help()
    )
}

#[derive(Parser)]
#[command(name = "lidarpass", version, about = "Camera-assisted LiDAR segmentation toolkit", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of scene directories.
    Generate(GenerateArgs),
    /// Project a scene's points into one camera and report the overlap.
    Project(ProjectArgs),
    /// Report occupied voxels at each scale.
    Voxels(VoxelArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint with the point branch alone.
    Eval(EvalArgs),
    /// Convert a training log or metrics report to CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory (scene_0000, scene_0001, ...).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Seed of the first scene; later scenes use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().num_points)]
    points: usize,
    #[arg(long, default_value_t = SynthConfig::default().num_classes)]
    classes: usize,
    /// Share of points that should land inside the image.
    #[arg(long, default_value_t = SynthConfig::default().camera_fov_fraction)]
    fov_fraction: f64,
    #[arg(long, default_value_t = SynthConfig::default().image_height)]
    height: usize,
    #[arg(long, default_value_t = SynthConfig::default().image_width)]
    width: usize,
}

#[derive(Args)]
struct ProjectArgs {
    /// Scene directory.
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Also write `index,row,col,depth,valid` per point.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VoxelArgs {
    scene: PathBuf,
    #[arg(long, default_value_t = RunConfig::default().base_voxel_size)]
    voxel_size: f64,
    #[arg(long, default_value_t = RunConfig::default().scales)]
    scales: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (JSON or `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "2dpass")]
    mode: TrainMode,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines loss log; one entry per optimizer step.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Keep only the point-branch parameters in the checkpoint.
    #[arg(long)]
    export_3d_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory or a directory of scene directories.
    #[arg(long)]
    data: PathBuf,
    /// Vote over rotations about the vertical axis.
    #[arg(long)]
    tta: bool,
    /// Rotation count used with --tta.
    #[arg(long, default_value_t = RunConfig::default().tta_angles)]
    angles: usize,
    /// Metrics JSON destination (printed to stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Averaged per-point class scores as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Training log (.jsonl) or metrics report (.json).
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } | Error::Format(_) | Error::Invalid(_) => 2,
        Error::AtScale { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Project(a) => project(a),
        Command::Voxels(a) => voxels(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        seed: a.seed,
        num_points: a.points,
        num_classes: a.classes,
        camera_fov_fraction: a.fov_fraction,
        image_height: a.height,
        image_width: a.width,
        ..SynthConfig::default()
    };
    let scenes: Vec<_> = generate_synthetic_dataset(&cfg, a.scenes)?
        .into_iter()
        .map(|s| (s.scene, Some(s.mapping)))
        .collect();
    let dirs = save_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", dirs.len(), a.out.display());
    Ok(())
}

fn project(a: ProjectArgs) -> Result<(), Failure> {
    let loaded = load_scene(&a.scene)?;
    let (mapping, stats) = projection_stats(&loaded.scene, a.camera)?;
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    if let Some(path) = a.csv {
        write_file(&path, mapping_csv(&mapping).as_bytes())?;
    }
    Ok(())
}

fn voxels(a: VoxelArgs) -> Result<(), Failure> {
    let loaded = load_scene(&a.scene)?;
    let counts = voxel_counts(&loaded.scene.cloud, a.voxel_size, a.scales)?;
    println!("scale,resolution,voxels");
    for (l, (r, n)) in counts.iter().enumerate() {
        println!("{},{r},{n}", l + 1);
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.override_seed(&raw)?;
    }
    let scenes = load_scenes(&cfg)?;
    let (train_set, val_set) = split_validation(scenes, cfg.val_scenes)?;
    let mut log_file = a.log.as_deref().map(create).transpose()?;
    let log_path = a.log.clone().unwrap_or_default();
    let mut sink = |entry: &StepLog| -> lidarpass::Result<()> {
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        }
        Ok(())
    };
    let outcome = train(&cfg, a.mode, &train_set, &val_set, &mut sink)?;
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| io_failure(&log_path, e))?;
    }
    let ckpt = if a.export_3d_only {
        outcome.checkpoint.export_3d_only()
    } else {
        outcome.checkpoint
    };
    ckpt.save(&a.out)?;
    println!(
        "mode {} steps {} final seg3d {:.6} checkpoint {}",
        a.mode,
        outcome.steps,
        outcome.final_seg3d,
        a.out.display()
    );
    if let Some(report) = outcome.validation {
        println!("validation mIoU {:.6}", report.miou);
    }
    Ok(())
}

fn eval_scenes(data: &Path) -> Result<Vec<PreparedScene>, Failure> {
    let dirs = if data.join("cloud.bin").exists() {
        vec![data.to_path_buf()]
    } else {
        list_scene_dirs(data)?
    };
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("{} contains no scenes", data.display())).into());
    }
    dirs.iter()
        .map(|d| {
            let s = load_scene(d)?;
            Ok(PreparedScene::new(s.scene, s.mapping)?)
        })
        .collect()
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let scenes = eval_scenes(&a.data)?;
    if a.angles == 0 {
        return Err(Error::Config(vec!["`--angles` must be positive".into()]).into());
    }
    let angles = if a.tta { a.angles } else { 1 };
    let outcome = evaluate(&ckpt, &scenes, angles)?;
    let json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    match &a.out {
        Some(path) => write_file(path, format!("{json}\n").as_bytes())?,
        None => println!("{json}"),
    }
    eprint!("{}", outcome.report.to_table());
    if let Some(path) = a.scores {
        let mut w = csv::Writer::from_writer(create(&path)?);
        let c = ckpt.net.num_classes;
        let mut header = vec!["scene".to_string(), "index".to_string()];
        header.extend((0..c).map(|k| format!("class_{k}")));
        let csv_err = |e: csv::Error| Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        };
        w.write_record(&header).map_err(csv_err)?;
        for (s, scores) in outcome.scores.iter().enumerate() {
            for (i, row) in scores.rows().into_iter().enumerate() {
                let mut rec = vec![s.to_string(), i.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| io_failure(&path, e))?;
    }
    Ok(())
}

/// Loss columns written for a training log.
const LOG_COLUMNS: [&str; 7] = ["step", "epoch", "seg3d", "seg2d", "seg_fuse", "kd", "total"];

fn plot(a: PlotArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let bad = |msg: String| Failure {
        code: 2,
        message: format!("{}: {msg}", a.input.display()),
    };
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let trimmed = text.trim_start();
    if let Ok(report) = serde_json::from_str::<MetricsReport>(trimmed) {
        w.write_record(["lo", "hi", "miou", "points"]).expect("in-memory write");
        for b in &report.distance_bins {
            let hi = b.hi.map_or(String::new(), |h| h.to_string());
            let miou = if b.empty { String::new() } else { b.miou.to_string() };
            w.write_record([b.lo.to_string(), hi, miou, b.points.to_string()])
                .expect("in-memory write");
        }
    } else {
        w.write_record(LOG_COLUMNS).expect("in-memory write");
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            let record: Vec<String> = LOG_COLUMNS
                .iter()
                .map(|k| match v.get(*k) {
                    Some(Value::Array(xs)) => {
                        // Per-scale terms are summed into one column.
                        xs.iter().filter_map(Value::as_f64).sum::<f64>().to_string()
                    }
                    Some(x) => x.to_string(),
                    None => String::new(),
                })
                .collect();
            if record[0].is_empty() {
                return Err(bad(format!("line {} is neither a log entry nor a metrics report", n + 1)));
            }
            w.write_record(&record).expect("in-memory write");
        }
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_file(&a.out, &bytes)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
