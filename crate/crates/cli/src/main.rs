use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use sceneflow::coarse::label_sequence;
use sceneflow::metrics::{evaluate, EvalFrame};
use sceneflow::network::{load_checkpoint, save_checkpoint};
use sceneflow::scene::{read_frame, write_frame};
use sceneflow::synth::{generate_dataset, SceneSpec};
use sceneflow::trainer::{
    ablate, ablation_table, infer, loss_curve_csv, prepare_sequence, train_prepared, PreparedPair,
    TrainConfig,
};
use sceneflow::{FlowField, FlowKind, FramePair, PointCloud};

#[derive(Parser)]
#[command(
    name = "sceneflow",
    version,
    about = "Self-supervised scene flow and instance segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize seeded frame pairs, one subdirectory per pair
    Gen(GenArgs),
    /// Write coarse pseudo-labels for a directory of consecutive frames
    Label(LabelArgs),
    /// Train a model and write a checkpoint and loss curve
    Train(TrainArgs),
    /// Predict total flow and instance labels for one frame pair
    Infer(InferArgs),
    /// Score predictions against ground-truth frames
    Eval(EvalArgs),
    /// Train the five cumulative loss configurations and compare them
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene JSON; missing fields take their defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of pairs; pair i uses seed spec.seed + i
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// Training config JSON; missing fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory of frames named with a trailing frame index
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Print the effective config as JSON and exit
    #[arg(long)]
    dump_config: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frame directory; it and each subdirectory holding frames form one sequence
    #[arg(long, required_unless_present = "dump_config")]
    data: Option<PathBuf>,
    /// Output directory for checkpoint.sfck and loss_curve.csv
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output frame holding source points, predicted labels and total flow
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction frame, or directory of frames matched to --gt by file name
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth frame or directory; frames need labels and flow
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    half_extent: f64,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training frames, laid out as for `train`
    #[arg(long)]
    data: PathBuf,
    /// Held-out frames with ground truth
    #[arg(long)]
    held_out: PathBuf,
    /// Only score ground-truth instances with at least this many points
    #[arg(long, default_value_t = 50)]
    min_instance_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_config(arg: &ConfigArg) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(arg.config.as_deref())?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "sfpc" || x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Frames of one directory ordered by frame index.
fn read_sequence(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut frames = frame_files(dir)?
        .iter()
        .map(|p| read_frame(p).map_err(|e| data_err(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    frames.sort_by_key(|f| f.frame_index);
    Ok(frames)
}

fn consecutive_pairs(frames: Vec<PointCloud>) -> Result<Vec<FramePair>> {
    frames
        .windows(2)
        .map(|w| FramePair::new(w[0].clone(), w[1].clone()).map_err(data_err))
        .collect()
}

/// The directory itself and each immediate subdirectory, in name order; each
/// one with at least two frames is a sequence.
fn read_sequences(dir: &Path) -> Result<Vec<Vec<FramePair>>> {
    let mut dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let mut sequences = Vec::new();
    for d in dirs {
        let frames = read_sequence(&d)?;
        if frames.len() >= 2 {
            sequences.push(consecutive_pairs(frames)?);
        }
    }
    if sequences.is_empty() {
        return Err(data_err(format!("{}: no frame pairs found", dir.display())));
    }
    Ok(sequences)
}

fn prepare_all(dir: &Path, cfg: &TrainConfig) -> Result<Vec<PreparedPair>> {
    let mut prepared = Vec::new();
    for seq in read_sequences(dir)? {
        prepared.extend(prepare_sequence(&seq, cfg).map_err(data_err)?);
    }
    Ok(prepared)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn frame_name(index: i64) -> String {
    format!("frame_{index:06}.sfpc")
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let spec: SceneSpec = read_json(args.spec.as_deref())?;
    spec.validate().map_err(CliError::Usage)?;
    create_dir(&args.out)?;
    for (i, s) in generate_dataset(&spec, args.count).iter().enumerate() {
        let dir = args.out.join(format!("pair_{i:04}"));
        create_dir(&dir)?;
        for cloud in [&s.pair.source, &s.pair.target] {
            write_frame(cloud, dir.join(frame_name(cloud.frame_index))).map_err(data_err)?;
        }
    }
    Ok(())
}

fn run_label(args: &LabelArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let frames = read_sequence(&args.frames)?;
    if frames.len() < 2 {
        return Err(data_err("need at least two consecutive frames"));
    }
    let pairs = consecutive_pairs(frames)?;
    let hinted = pairs
        .iter()
        .map(|p| {
            let hint = sceneflow::rigid::icp_ego_motion(&p.source, &p.target, &cfg.icp)
                .map_err(data_err)?;
            Ok(p.clone().with_hint(hint.transform))
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = label_sequence(&hinted, &cfg.coarse).map_err(data_err)?;
    create_dir(&args.out)?;
    for (pair, out) in hinted.iter().zip(outputs) {
        let cloud = PointCloud::new(pair.source.points().to_vec(), pair.source.frame_index)
            .and_then(|c| c.with_labels(out.pseudo.labels))
            .map_err(data_err)?;
        write_frame(&cloud, args.out.join(frame_name(cloud.frame_index))).map_err(data_err)?;
    }
    Ok(())
}

fn with_overrides(
    mut cfg: TrainConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<TrainConfig> {
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = with_overrides(load_config(&args.config)?, args.epochs, args.lr)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.dump_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        return Ok(());
    }
    let (data, out) = (
        args.data.as_ref().expect("required"),
        args.out.as_ref().expect("required"),
    );
    let prepared = prepare_all(data, &cfg)?;
    let trained = train_prepared(&prepared, &cfg).map_err(data_err)?;
    create_dir(out)?;
    save_checkpoint(&trained.params, out.join("checkpoint.sfck")).map_err(data_err)?;
    write_text(&out.join("loss_curve.csv"), &loss_curve_csv(&trained.curve))
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let params = load_checkpoint(&args.checkpoint).map_err(data_err)?;
    let source = read_frame(&args.source).map_err(data_err)?;
    let target = read_frame(&args.target).map_err(data_err)?;
    let pair = FramePair::new(source, target).map_err(data_err)?;
    let result = infer(&params, &pair, &cfg).map_err(data_err)?;
    let cloud = PointCloud::new(pair.source.points().to_vec(), pair.source.frame_index)
        .and_then(|c| c.with_labels(result.labels))
        .and_then(|c| c.with_flow(result.total.vectors))
        .map_err(data_err)?;
    write_frame(&cloud, &args.out).map_err(data_err)
}

fn matched_frames(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    match (pred.is_dir(), gt.is_dir()) {
        (false, false) => return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]),
        (true, true) => {}
        _ => {
            return Err(CliError::Usage(
                "--pred and --gt must both be files or both be directories".into(),
            ))
        }
    }
    let pairs: Vec<(PathBuf, PathBuf)> = frame_files(gt)?
        .into_iter()
        .filter_map(|g| {
            let p = pred.join(g.file_name()?);
            p.is_file().then_some((p, g))
        })
        .collect();
    if pairs.is_empty() {
        return Err(data_err(
            "no prediction files match the ground-truth file names",
        ));
    }
    Ok(pairs)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    if args.half_extent.is_nan() || args.half_extent <= 0.0 {
        return Err(CliError::Usage("--half-extent must be positive".into()));
    }
    let mut loaded = Vec::new();
    for (p, g) in matched_frames(&args.pred, &args.gt)? {
        let pred = read_frame(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
        let gt = read_frame(&g).map_err(|e| data_err(format!("{}: {e}", g.display())))?;
        let flow = pred
            .gt_flow()
            .ok_or_else(|| data_err(format!("{}: prediction has no flow", p.display())))?;
        let labels = pred
            .gt_labels()
            .map_or_else(|| vec![0; pred.len()], <[u32]>::to_vec);
        loaded.push((gt, FlowField::new(flow.to_vec(), FlowKind::Total), labels));
    }
    let frames: Vec<EvalFrame<'_>> = loaded
        .iter()
        .map(|(source, flow, labels)| EvalFrame {
            source,
            flow,
            labels,
        })
        .collect();
    let json = evaluate(&frames, args.half_extent)
        .map_err(data_err)?
        .to_json();
    match &args.out {
        Some(path) => write_text(path, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = with_overrides(load_config(&args.config)?, args.epochs, args.lr)?;
    let train_set = prepare_all(&args.data, &cfg)?;
    let held_out = prepare_all(&args.held_out, &cfg)?;
    let rows = ablate(&train_set, &held_out, &cfg, args.min_instance_points).map_err(data_err)?;
    let table = ablation_table(&rows);
    match &args.out {
        Some(path) => write_text(path, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Label(a) => run_label(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Data(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
