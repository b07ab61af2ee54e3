use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motionsel::analysis::{export_alpha_curves, render_decomposition, temporal_average, AlphaTrace};
use motionsel::checkpoint::{save_checkpoint, Checkpoint};
use motionsel::config::RunConfig;
use motionsel::metrics::{baseline_b0, evaluate, Variant};
use motionsel::predictor::predict_with_alpha_trace;
use motionsel::trainer::{self, LogRecord, Observer, TrainLog, TrainState};
use motionsel::video_io::{load_clip, read_frame, write_frame, FramePattern};
use motionsel::{Clip, DualNet, Error, Frame, ParamSet};

/// Checkpoint period during training, in optimizer steps.
const CHECKPOINT_EVERY: u64 = 500;

#[derive(Parser)]
#[command(name = "motionsel", version, about = "Single-clip video frame prediction")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs both training stages and writes checkpoints and a log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `data.output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicts frames recursively from a conditioning entry point.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame index of the first conditioning frame.
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores predicted frames against ground truth, alongside copy-last.
    Evaluate {
        /// Directory of predicted frames; the trailing number in each file
        /// name is its frame index.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth pattern such as `frames/%04d.png`.
        #[arg(long)]
        gt: String,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "M2")]
        variant: Variant,
    },
    /// Writes decomposition renders, alpha curves and temporal averages.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    err: Error,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Divergence(_) | Error::NonFiniteGradient(_) => 3,
            Error::Incompatible(_) => 4,
            _ => 2,
        };
        Failure { code, err }
    }
}

type CmdResult = Result<(), Failure>;

fn checkpoint_failure(err: Error) -> Failure {
    match err {
        Error::Io { .. } | Error::NotFound(_) => Failure::from(err),
        other => Failure { code: 4, err: other },
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<DualNet<f32>, Failure> {
    let ck = Checkpoint::load(path).map_err(checkpoint_failure)?;
    ck.check_compatible(&cfg.model, &cfg.selector)?;
    ck.model::<f32>().map_err(checkpoint_failure)
}

fn entry_of(cfg: &RunConfig, entry: Option<usize>) -> Result<usize, Error> {
    entry
        .or_else(|| cfg.data.eval_range.map(|(a, _)| a.saturating_sub(cfg.model.context)))
        .ok_or_else(|| Error::Argument("--entry is required when the config has no data.eval_range".into()))
}

fn conditioning(cfg: &RunConfig, entry: usize) -> Result<Vec<Frame<f32>>, Error> {
    let d = cfg.model.context;
    let clip: Clip<f32> = load_clip(&cfg.data.clip, Some((entry, entry + d - 1))).map_err(|e| match e {
        Error::NotFound(what) => Error::Argument(format!(
            "entry {entry} needs frames {entry}..={} but {what} is missing",
            entry + d - 1
        )),
        other => other,
    })?;
    Ok(clip.frames)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

struct CliObserver {
    dir: PathBuf,
    log_path: PathBuf,
    train: motionsel::TrainConfig,
}

impl Observer<f32> for CliObserver {
    fn record(&mut self, r: &LogRecord) {
        use std::io::Write;
        let fresh = !self.log_path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&self.log_path);
        match file {
            Ok(mut f) => {
                let mut text = String::new();
                if fresh {
                    text.push_str(&TrainLog::csv_header(r.active_channels.len()));
                    text.push('\n');
                }
                text.push_str(&TrainLog::csv_line(r));
                text.push('\n');
                if let Err(e) = f.write_all(text.as_bytes()) {
                    log::warn!("cannot append to {}: {e}", self.log_path.display());
                }
            }
            Err(e) => log::warn!("cannot open {}: {e}", self.log_path.display()),
        }
    }

    fn after_step(&mut self, state: &TrainState<f32>) -> motionsel::Result<()> {
        if state.iteration % CHECKPOINT_EVERY == 0 {
            let p = self.dir.join(format!("checkpoint_{:06}.ckpt", state.iteration));
            save_checkpoint(&p, state, &self.train)?;
            log::info!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    cfg.check_paths()?;
    println!("seed: {}", cfg.train.seed);
    let clip: Clip<f32> = load_clip(&cfg.data.clip, cfg.data.train_range)?;
    let shape = clip.shape().unwrap_or_default();
    let want = (cfg.model.color_channels, cfg.model.height, cfg.model.width);
    if shape != want {
        return Err(Error::Argument(format!("clip frames are {shape:?} (C, H, W), the model expects {want:?}")).into());
    }
    let dir = out.unwrap_or_else(|| cfg.data.output_dir.clone());
    create_dir(&dir)?;
    let log_path = dir.join("train_log.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|source| Error::Io {
            path: log_path.clone(),
            source,
        })?;
    }
    let mut state = TrainState::<f32>::init(cfg.model.clone(), cfg.selector.clone(), &cfg.train)?;
    log::info!(
        "variant {}: {} parameters, {} training frames",
        cfg.variant,
        state.model.param_count(),
        clip.len()
    );
    let mut obs = CliObserver {
        dir: dir.clone(),
        log_path,
        train: cfg.train.clone(),
    };
    let log = trainer::train(&mut state, &clip, &cfg.train, &mut obs)?;
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &state, &cfg.train)?;
    let last = log.losses.last().map_or(f64::NAN, |(_, l)| l.total);
    println!(
        "trained {} steps, final loss {last:.6}, checkpoint {}",
        state.iteration,
        final_path.display()
    );
    Ok(())
}

fn cmd_predict(config: &Path, ckpt: &Path, entry: Option<usize>, horizon: usize, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    println!("seed: {}", cfg.train.seed);
    let model = load_model(&cfg, ckpt)?;
    let entry = entry_of(&cfg, entry)?;
    let cond = conditioning(&cfg, entry)?;
    if horizon == 0 {
        println!("horizon 0: nothing to predict");
        return Ok(());
    }
    let dir = out.unwrap_or_else(|| cfg.data.output_dir.join("predict"));
    let (clip, trace) = predict_with_alpha_trace(&model, &cond, horizon)?;
    let first = entry + cfg.model.context;
    for (i, f) in clip.frames.iter().enumerate() {
        write_frame(f, &dir.join(format!("pred_{:04}.png", first + i)))?;
    }
    export_alpha_curves(&AlphaTrace::new(first, trace)?, &dir.join("alpha_trace.csv"))?;
    println!("wrote {horizon} frames to {}", dir.display());
    Ok(())
}

/// Trailing decimal digits of a file stem.
fn frame_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn cmd_evaluate(pred_dir: &Path, gt: &str, out: Option<PathBuf>, variant: Variant, seed: Option<u64>) -> CmdResult {
    if let Some(s) = seed {
        println!("seed: {s}");
    }
    let pattern = FramePattern::parse(gt)?;
    let entries = std::fs::read_dir(pred_dir).map_err(|source| Error::Io {
        path: pred_dir.to_path_buf(),
        source,
    })?;
    let mut preds: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == "jpg" || x == "jpeg"))
        .filter_map(|p| frame_index(&p).map(|i| (i, p)))
        .collect();
    preds.sort();
    if preds.is_empty() {
        return Err(Error::Argument(format!("no indexed frames in {}", pred_dir.display())).into());
    }
    let mut p_frames = Vec::with_capacity(preds.len());
    let mut g_frames = Vec::with_capacity(preds.len());
    for (i, p) in &preds {
        let gp = pattern.path(*i);
        if !gp.exists() {
            return Err(Error::Argument(format!(
                "{} predicted frames but ground truth {} is missing",
                preds.len(),
                gp.display()
            ))
            .into());
        }
        p_frames.push(read_frame::<f32>(p)?);
        g_frames.push(read_frame::<f32>(&gp)?);
    }
    let pred = Clip::new(p_frames)?;
    let truth = Clip::new(g_frames)?;
    let report = evaluate(&pred, &truth, variant)?;
    let out = out.unwrap_or_else(|| pred_dir.join("report.csv"));
    report.write_csv(&out)?;
    println!("{}", report.summary_line());
    let before = preds[0].0.checked_sub(1).map(|i| pattern.path(i)).filter(|p| p.exists());
    match before {
        Some(last) => {
            let b0 = baseline_b0(&read_frame::<f32>(&last)?, &truth)?;
            let b0_path = out.with_file_name(format!(
                "{}_b0.csv",
                out.file_stem().and_then(|s| s.to_str()).unwrap_or("report")
            ));
            b0.write_csv(&b0_path)?;
            println!("{}", b0.summary_line());
        }
        None => log::warn!("no ground-truth frame precedes the predictions; B0 skipped"),
    }
    Ok(())
}

fn cmd_analyze(config: &Path, ckpt: &Path, entry: Option<usize>, horizon: usize, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    println!("seed: {}", cfg.train.seed);
    let model = load_model(&cfg, ckpt)?;
    let entry = entry_of(&cfg, entry)?;
    let cond = conditioning(&cfg, entry)?;
    create_dir(out)?;
    if horizon == 0 {
        return Ok(());
    }
    let paths = render_decomposition(&model, &cond, horizon, &out.join("decomposition"))?;
    let (clip, trace) = predict_with_alpha_trace(&model, &cond, horizon)?;
    let first = entry + cfg.model.context;
    export_alpha_curves(&AlphaTrace::new(first, trace)?, &out.join("alpha_curves.csv"))?;
    write_frame(&temporal_average(&clip)?, &out.join("temporal_average_pred.png"))?;
    match load_clip::<f32>(&cfg.data.clip, Some((first, first + horizon - 1))) {
        Ok(gt) => write_frame(&temporal_average(&gt)?, &out.join("temporal_average_gt.png"))?,
        Err(e) => log::warn!("ground-truth temporal average skipped: {e}"),
    }
    println!("wrote {} decomposition images to {}", paths.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOTIONSEL_LOG", "info")).init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let res = match cli.command {
        Command::Train { config, out } => cmd_train(&config, out, seed),
        Command::Predict {
            config,
            checkpoint,
            entry,
            horizon,
            out,
        } => cmd_predict(&config, &checkpoint, entry, horizon, out, seed),
        Command::Evaluate { pred, gt, out, variant } => cmd_evaluate(&pred, &gt, out, variant, seed),
        Command::Analyze {
            config,
            checkpoint,
            entry,
            horizon,
            out,
        } => cmd_analyze(&config, &checkpoint, entry, horizon, &out, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}
