mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airtrack_core::airway::{camera_pose_at, centerline_path, generate_patient, AirwayTree, LobeLabel, PatientSpec};
use airtrack_core::dataset::{build_dataset, Dataset, DatasetConfig, SplitScheme};
use airtrack_core::eval::{
    evaluate, select, trajectory_trace_csv, DeltaPredictor, EvalMode, EvalReport, ModelPredictor, OraclePredictor,
    ZeroPredictor,
};
use airtrack_core::grid::{run_experiment_grid, GridConfig, GridReport};
use airtrack_core::net::{load_model, HeadKind, ModelConfig};
use airtrack_core::render::{render, CameraIntrinsics};
use airtrack_core::train::{read_run_record, split_stats, train, TrainConfig};
use airtrack_core::{EulerAngles, LossCombo, Pose, Position};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "airtrack", version, about = "Synthetic airway datasets and relative camera pose estimation")]
struct Cli {
    /// Worker threads for rendering, evaluation and grid cells (default: one per core).
    /// Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Progress logging on stderr: -v info, -vv debug, -vvv trace.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted override applied after the config file, e.g. `--set camera.width=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; replaces the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one synthetic patient airway tree as JSON.
    GenAnatomy(ConfigArgs),
    /// Render a dataset of trajectories with poses, manifest and split.
    GenDataset(ConfigArgs),
    /// Train one model; writes checkpoint, run record and loss curve.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long)]
        head: Option<HeadKind>,
        /// mse-mse, mse-de or mse-ce.
        #[arg(long)]
        loss: Option<LossCombo>,
        /// personalized, personalized:T/V or cross-subject:pN.
        #[arg(long)]
        scheme: Option<SplitScheme>,
    },
    /// Evaluate a predictor on the validation trajectories of a split.
    Eval {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Model checkpoint (required for --predictor model).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
        predictor: PredictorKind,
        /// per-pair or accumulated; both when omitted.
        #[arg(long)]
        mode: Option<EvalMode>,
        /// Split to evaluate; defaults to the training split of the checkpoint, else the dataset's.
        #[arg(long)]
        scheme: Option<SplitScheme>,
        /// Pairs per inference window; defaults to the training chunk length.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train and evaluate every head x loss x scheme cell.
    Grid {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Restrict to these heads. Repeatable.
        #[arg(long)]
        head: Vec<HeadKind>,
        /// Restrict to these loss combinations. Repeatable.
        #[arg(long)]
        loss: Vec<LossCombo>,
        /// Population schemes to run. Repeatable.
        #[arg(long)]
        scheme: Vec<SplitScheme>,
    },
    /// Render a single frame as PPM.
    RenderPreview(PreviewArgs),
}

#[derive(Args, Debug, Serialize)]
struct PreviewArgs {
    /// Airway JSON from gen-anatomy; a straight tube when omitted.
    #[arg(long, value_name = "FILE")]
    tree: Option<PathBuf>,
    /// Camera position x,y,z.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    position: Option<Vec<f64>>,
    /// Camera Euler angles alpha,beta,gamma in radians.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    orientation: Option<Vec<f64>>,
    /// Place the camera on the centreline towards this lobe instead.
    #[arg(long, conflicts_with_all = ["position", "orientation"])]
    lobe: Option<LobeLabel>,
    /// Arc length along the lobe path.
    #[arg(long, default_value_t = 10.0)]
    arc: f64,
    /// Roll about the viewing axis, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    roll: f64,
    /// Seed choosing the branch at each bifurcation of the lobe path.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PredictorKind {
    Model,
    Oracle,
    Zero,
}

/// Model and training settings of `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<airtrack_core::Error> for Failure {
    fn from(e: airtrack_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn runtime<E: std::fmt::Display>(context: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", context.display()))
}

/// The config file (or `default` without one) with the `--set` overrides applied.
fn load_config<T: Serialize + DeserializeOwned>(args: &ConfigArgs, default: impl FnOnce() -> T) -> CliResult<T> {
    let base: T = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => default(),
    };
    overrides::apply_all(&base, &args.overrides).map_err(Failure::Config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(runtime(dir))?;
    }
    let text = airtrack_core::json::to_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(runtime(path))
}

fn echo_config<T: Serialize>(out: &Path, value: &T) -> CliResult<()> {
    write_json(&out.join("effective_config.json"), value)
}

fn open_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::open(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn gen_anatomy(args: &ConfigArgs) -> CliResult<()> {
    let mut spec = load_config(args, || PatientSpec::new(args.seed.unwrap_or(0)))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let tree = generate_patient(&spec)?;
    echo_config(&args.out, &spec)?;
    let path = args.out.join("airway.json");
    std::fs::write(&path, tree.to_json()?).map_err(runtime(&path))?;
    println!("{}", path.display());
    Ok(())
}

fn gen_dataset(args: &ConfigArgs) -> CliResult<()> {
    let mut cfg = load_config(args, DatasetConfig::default)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = build_dataset(&cfg, &args.out)?;
    echo_config(&args.out, &cfg)?;
    println!(
        "{} trajectories, {} frames, config {}",
        manifest.trajectories.len(),
        manifest.total_frames,
        manifest.config_hash
    );
    Ok(())
}

fn cmd_train(
    args: &ConfigArgs,
    dataset: &Path,
    head: Option<HeadKind>,
    loss: Option<LossCombo>,
    scheme: Option<SplitScheme>,
) -> CliResult<()> {
    let mut cfg = load_config(args, RunConfig::default)?;
    if let Some(h) = head {
        cfg.model.head = h;
    }
    if let Some(l) = loss {
        cfg.train.loss = l;
    }
    if let Some(s) = scheme {
        cfg.train.split = s;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let ds = open_dataset(dataset)?;
    let cam = ds.manifest.config.camera;
    cfg.model.input_size = [cam.height, cam.width];
    cfg.model.dropout_rate = cfg.train.dropout_rate;
    echo_config(&args.out, &cfg)?;
    let trained = train(&ds, &cfg.model, &cfg.train, Some(&args.out))?;
    let r = &trained.record;
    println!(
        "{} epochs, best {} (val loss {:.6}), {} parameters",
        r.epochs.len(),
        r.best_epoch,
        r.best_val_loss,
        r.param_count
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    dataset: &'a Path,
    checkpoint: Option<&'a Path>,
    predictor: PredictorKind,
    modes: Vec<EvalMode>,
    scheme: SplitScheme,
    window: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    dataset: &Path,
    checkpoint: Option<&Path>,
    predictor: PredictorKind,
    mode: Option<EvalMode>,
    scheme: Option<SplitScheme>,
    window: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    let ds = open_dataset(dataset)?;
    // stats, window and split of a trained model come from the run record beside it
    let run = match (predictor, checkpoint) {
        (PredictorKind::Model, None) => return Err(Failure::Config("--predictor model needs --checkpoint".into())),
        (PredictorKind::Model, Some(ckpt)) => match ckpt.parent().map(|d| d.join("run.json")).filter(|p| p.exists()) {
            Some(p) => Some(read_run_record(&p)?),
            None => None,
        },
        _ => None,
    };
    let scheme = scheme
        .or_else(|| run.as_ref().map(|r| r.train_config.split))
        .unwrap_or(ds.manifest.split.scheme);
    let window = window.or_else(|| run.as_ref().map(|r| r.train_config.chunk_len));
    let modes = mode.map_or(EvalMode::ALL.to_vec(), |m| vec![m]);
    echo_config(
        out,
        &EvalSettings {
            dataset,
            checkpoint,
            predictor,
            modes: modes.clone(),
            scheme,
            window,
        },
    )?;
    let split = ds.split(scheme)?;
    let val = select(&ds, &split.val)?;
    let (boxed, head, loss): (Box<dyn DeltaPredictor>, String, String) = match predictor {
        PredictorKind::Oracle => (Box::new(OraclePredictor), "oracle".into(), "-".into()),
        PredictorKind::Zero => (Box::new(ZeroPredictor), "zero".into(), "-".into()),
        PredictorKind::Model => {
            let ckpt = checkpoint.expect("checked above");
            let (net, store) = load_model::<f32>(ckpt)?;
            let stats = match &run {
                Some(r) => r.stats,
                None => split_stats(&ds, &split)?,
            };
            let head = net.config.head.name().to_string();
            let loss = run.as_ref().map_or("-".into(), |r| r.train_config.loss.name().to_string());
            let p = ModelPredictor::new(net, store, stats, window.unwrap_or(TrainConfig::default().chunk_len))?;
            (Box::new(p), head, loss)
        }
    };
    let rows = modes
        .iter()
        .map(|&m| Ok(evaluate(boxed.as_ref(), &val, m)?.labelled(&scheme.to_string(), &head, &loss)))
        .collect::<airtrack_core::Result<Vec<EvalReport>>>()?;
    let report = GridReport { rows, failures: vec![] };
    report.write(out)?;
    let traces = out.join("traces");
    std::fs::create_dir_all(&traces).map_err(runtime(&traces))?;
    for t in &val {
        let path = traces.join(format!("{}.csv", t.entry.traj_id));
        std::fs::write(&path, trajectory_trace_csv(boxed.as_ref(), t)?).map_err(runtime(&path))?;
    }
    for r in &report.rows {
        println!(
            "{} {}: PositionL2 {:.4} ± {:.4}, RotationL2 {:.4} ± {:.4}, DE {:.4} ± {:.4}, CE {:.4} ± {:.4} (n = {})",
            r.mode, r.head, r.pos_l2.mean, r.pos_l2.std, r.rot_l2.mean, r.rot_l2.std, r.de.mean, r.de.std, r.ce.mean, r.ce.std, r.n
        );
    }
    Ok(())
}

fn cmd_grid(
    args: &ConfigArgs,
    dataset: &Path,
    heads: &[HeadKind],
    losses: &[LossCombo],
    schemes: &[SplitScheme],
) -> CliResult<()> {
    let mut cfg = load_config(args, GridConfig::default)?;
    if !heads.is_empty() {
        cfg.heads = heads.to_vec();
    }
    if !losses.is_empty() {
        cfg.losses = losses.to_vec();
    }
    if !schemes.is_empty() {
        cfg.schemes = schemes.to_vec();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = open_dataset(dataset)?;
    let cam = ds.manifest.config.camera;
    cfg.model.input_size = [cam.height, cam.width];
    echo_config(&args.out, &cfg)?;
    let report = run_experiment_grid(&ds, &cfg, &args.out)?;
    println!(
        "{} rows, {} failed cells, report in {}",
        report.rows.len(),
        report.failures.len(),
        args.out.join("report.md").display()
    );
    if !report.failures.is_empty() {
        return Err(Failure::Runtime(format!(
            "{} grid cells failed, see {}",
            report.failures.len(),
            args.out.join("report.md").display()
        )));
    }
    Ok(())
}

fn render_preview(args: &PreviewArgs) -> CliResult<()> {
    let tree = match &args.tree {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(runtime(path))?;
            AirwayTree::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => AirwayTree::straight_tube(80.0, 6.0),
    };
    let pose = match args.lobe {
        Some(lobe) => {
            let path = centerline_path(&tree, lobe, args.seed)?;
            camera_pose_at(&path, args.arc, 4.0, args.roll.to_radians())?
        }
        None => {
            let p = args.position.clone().unwrap_or_else(|| vec![10.0, 0.0, 0.0]);
            let o = args.orientation.clone().unwrap_or_else(|| vec![0.0; 3]);
            if p.len() != 3 || o.len() != 3 {
                return Err(Failure::Config("--position and --orientation take three comma-separated values".into()));
            }
            Pose::new(Position::new(p[0], p[1], p[2]), EulerAngles::new(o[0], o[1], o[2]))
        }
    };
    let cam = CameraIntrinsics {
        width: args.width,
        height: args.height,
        ..CameraIntrinsics::default()
    };
    cam.validate()?;
    let frame = render(&tree, &pose, &cam)?;
    echo_config(&args.out, args)?;
    let path = args.out.join("preview.ppm");
    frame.write_ppm(&path)?;
    write_json(&args.out.join("pose.json"), &pose)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::GenAnatomy(args) => gen_anatomy(args),
        Command::GenDataset(args) => gen_dataset(args),
        Command::Train {
            common,
            dataset,
            head,
            loss,
            scheme,
        } => cmd_train(common, dataset, *head, *loss, *scheme),
        Command::Eval {
            dataset,
            checkpoint,
            predictor,
            mode,
            scheme,
            window,
            out,
        } => cmd_eval(dataset, checkpoint.as_deref(), *predictor, *mode, *scheme, *window, out),
        Command::Grid {
            common,
            dataset,
            head,
            loss,
            scheme,
        } => cmd_grid(common, dataset, head, loss, scheme),
        Command::RenderPreview(args) => render_preview(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let one_line = |s: String| s.replace(['\n', '\r'], " ");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error[config]: {}", one_line(msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error[runtime]: {}", one_line(msg));
            ExitCode::from(1)
        }
    }
}
