//! Two-stage curriculum training of the dual network.
//!
//! Stage 1 trains on short random windows, growing the number of recursive
//! predictions `K` from 0 to `context − 1`. Stage 2 rolls out the whole
//! training span from its first `context` frames and stops early once the
//! loss plateaus.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::norm::BnMode;
use crate::losses::{sequence_loss, sequence_loss_grad, LossConfig, LossParts};
use crate::model::{DualGrads, DualNet, StepCache};
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Batch, Frame};
use crate::video_io::{flip_lr, sample_window, window_at, Clip, Window};

/// Scaled modulation weight above which a channel counts as active.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Windows per stage-1 step.
    pub batch_size: usize,
    /// Stage-1 steps at each curriculum phase.
    pub iters_per_k: usize,
    /// Upper bound on stage-2 rollouts.
    pub stage2_max_rollouts: usize,
    pub early_stop_patience: usize,
    /// Relative loss improvement that resets the patience counter.
    pub early_stop_min_improvement: f64,
    pub mu_motion: f64,
    pub seed: u64,
    /// Frames of the clip used for training; `None` uses the whole clip.
    pub t_train: Option<usize>,
    pub flip_prob: f64,
    /// Treat fed-back predictions as constants during backpropagation.
    pub stop_gradient: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            iters_per_k: 1000,
            stage2_max_rollouts: 300,
            early_stop_patience: 20,
            early_stop_min_improvement: 1e-3,
            mu_motion: 10.0,
            seed: 0,
            t_train: None,
            flip_prob: 0.5,
            stop_gradient: false,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            mu_motion: self.mu_motion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::arg(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.batch_size == 0 || self.iters_per_k == 0 || self.log_every == 0 {
            return Err(Error::arg("batch_size, iters_per_k and log_every must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::arg(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        self.adam().validate()?;
        self.loss().validate()
    }

    /// Number of training frames for a clip of `clip_len` frames.
    pub fn train_len(&self, clip_len: usize) -> Result<usize> {
        match self.t_train {
            None => Ok(clip_len),
            Some(t) if t <= clip_len => Ok(t),
            Some(t) => Err(Error::arg(format!("t_train = {t} exceeds the clip length {clip_len}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: DualNet<T>,
    pub adam: Adam<T>,
    /// Global optimizer step count across both stages.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: DualNet<T>, cfg: &TrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(&model, cfg.adam());
        TrainState {
            model,
            adam,
            iteration: 0,
            rng,
        }
    }

    /// Builds a freshly initialized model from `cfg.seed`.
    pub fn init(
        transformer: crate::TransformerConfig,
        selector: crate::SelectorConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DualNet::new(transformer, selector, &mut rng)?;
        Ok(TrainState::new(model, cfg, rng))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub k: usize,
    pub lr: f64,
    pub loss: LossParts,
    /// Mean number of active channels per decoder row over the step's predictions.
    pub active_channels: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Sampled every `log_every` steps and at the end of each stage.
    pub records: Vec<LogRecord>,
    /// Loss of every step, in order.
    pub losses: Vec<(u64, LossParts)>,
    /// Curriculum phases visited in stage 1.
    pub phases: Vec<usize>,
    /// Set when stage 2 ended by early stopping.
    pub early_stopped: bool,
    /// Stage-2 rollout whose starting parameters were kept.
    pub best_rollout: Option<usize>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.losses.extend(other.losses);
        self.phases.extend(other.phases);
        self.early_stopped |= other.early_stopped;
        self.best_rollout = other.best_rollout.or(self.best_rollout);
    }

    pub fn csv_header(rows: usize) -> String {
        let mut s = String::from("iteration,stage,K,lr,l1,motion,total");
        for r in 0..rows {
            let _ = write!(s, ",active_channels_row{r}");
        }
        s
    }

    pub fn csv_line(r: &LogRecord) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.stage.number(),
            r.k,
            r.lr,
            r.loss.l1,
            r.loss.motion,
            r.loss.total
        );
        for a in &r.active_channels {
            let _ = write!(s, ",{a}");
        }
        s
    }

    pub fn to_csv(&self, rows: usize) -> String {
        let mut s = Self::csv_header(rows);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::csv_line(r));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path, rows: usize) -> Result<()> {
        std::fs::write(path, self.to_csv(rows)).map_err(|e| Error::io(path, e))
    }
}

/// Hooks called during training. All methods default to doing nothing.
pub trait Observer<T: Scalar> {
    fn phase(&mut self, _stage: Stage, _k: usize) {}

    /// Called before prediction `step` of a rollout with the number of
    /// generated frames in its conditioning set.
    fn conditioning(&mut self, _stage: Stage, _k: usize, _step: usize, _generated: usize) {}

    fn record(&mut self, _record: &LogRecord) {}

    fn after_step(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T: Scalar> Observer<T> for NoObserver {}

/// The `context` frames that condition prediction `step`: the sequence
/// `conditioning ++ generated` shifted by `step`, so generated frames
/// replace their ground-truth counterparts.
pub fn context_at<'a, T>(conditioning: &'a [Frame<T>], generated: &'a [Frame<T>], step: usize) -> Vec<&'a Frame<T>> {
    let d = conditioning.len();
    (step..step + d)
        .map(|i| if i < d { &conditioning[i] } else { &generated[i - d] })
        .collect()
}

/// Recursive rollout over a batch of conditioning sets. `step_fn` maps the
/// per-sample context sets of one step to the next frame of every sample.
pub fn rollout<T, F>(conditioning: &[Vec<Frame<T>>], steps: usize, mut step_fn: F) -> Result<Vec<Vec<Frame<T>>>>
where
    T: Scalar,
    F: FnMut(usize, &[Vec<&Frame<T>>]) -> Result<Vec<Frame<T>>>,
{
    let mut generated: Vec<Vec<Frame<T>>> = vec![Vec::with_capacity(steps); conditioning.len()];
    for j in 0..steps {
        let ctx: Vec<Vec<&Frame<T>>> = conditioning
            .iter()
            .zip(&generated)
            .map(|(c, g)| context_at(c, g, j))
            .collect();
        let next = step_fn(j, &ctx)?;
        if next.len() != conditioning.len() {
            return Err(Error::arg("rollout step returned the wrong number of frames"));
        }
        for (g, f) in generated.iter_mut().zip(next) {
            g.push(f);
        }
    }
    Ok(generated)
}

/// Result of one differentiated rollout.
#[derive(Clone, Debug)]
pub struct RolloutOutcome<T> {
    pub predictions: Vec<Vec<Frame<T>>>,
    /// Batch-mean sequence loss.
    pub loss: LossParts,
    pub active_channels: Vec<f64>,
}

/// Rolls every window out over all of its targets, then backpropagates the
/// batch-mean sequence loss through the recursion into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_training_window<T: Scalar>(
    model: &mut DualNet<T>,
    windows: &[Window<T>],
    loss_cfg: &LossConfig,
    mode: BnMode,
    stop_gradient: bool,
    grads: &mut DualGrads<T>,
    stage: Stage,
    observer: &mut dyn Observer<T>,
) -> Result<RolloutOutcome<T>> {
    let delta = model.context();
    let steps = windows.first().map_or(0, |w| w.targets.len());
    if windows.is_empty() || steps == 0 {
        return Err(Error::arg("rollout needs at least one window with a target"));
    }
    for w in windows {
        if w.conditioning.len() != delta || w.targets.len() != steps {
            return Err(Error::arg(format!(
                "windows must hold {delta} conditioning frames and {steps} targets"
            )));
        }
    }
    let k = steps - 1;
    let rows = model.arch.rows;
    let mut active = vec![0.0; rows];
    let mut caches: Vec<StepCache<T>> = Vec::with_capacity(steps);
    let cond: Vec<Vec<Frame<T>>> = windows.iter().map(|w| w.conditioning.clone()).collect();
    let preds = rollout(&cond, steps, |j, ctx| {
        observer.conditioning(stage, k, j, j.min(delta));
        let x = Batch::stack_channels(ctx)?;
        let cache = model.step_forward(&x, mode)?;
        for a in cache.alphas() {
            for (r, slot) in active.iter_mut().enumerate() {
                *slot += (0..a.channels())
                    .filter(|&n| a.scaled(r, n).as_f64() > ACTIVE_THRESHOLD)
                    .count() as f64;
            }
        }
        let out = cache.output();
        let frames = (0..out.batch).map(|b| out.frame(b)).collect();
        caches.push(cache);
        Ok(frames)
    })?;
    let denom = (steps * windows.len()) as f64;
    active.iter_mut().for_each(|a| *a /= denom);

    let scale = T::lit(1.0 / windows.len() as f64);
    let mut loss = LossParts::default();
    let mut d_pred: Vec<Vec<Vec<T>>> = Vec::with_capacity(windows.len());
    for (p, w) in preds.iter().zip(windows) {
        loss += sequence_loss(p, &w.targets, loss_cfg)?.scaled(1.0 / windows.len() as f64);
        d_pred.push(sequence_loss_grad(p, &w.targets, loss_cfg, scale));
    }

    let out0 = caches[0].output();
    let (c, h, wd) = (out0.channels, out0.height, out0.width);
    let frame_len = c * h * wd;
    for j in (0..steps).rev() {
        let mut d_out = Batch::zeros(windows.len(), c, h, wd);
        for (b, dp) in d_pred.iter().enumerate() {
            d_out.sample_mut(b).copy_from_slice(&dp[j]);
        }
        let dx = model.step_backward(&caches[j], &d_out, grads);
        if stop_gradient {
            continue;
        }
        for (b, dp) in d_pred.iter_mut().enumerate() {
            let s = dx.sample(b);
            for i in 0..delta {
                let idx = j + i;
                if idx >= delta {
                    let g = &mut dp[idx - delta];
                    for (gv, &dv) in g.iter_mut().zip(&s[i * frame_len..(i + 1) * frame_len]) {
                        *gv += dv;
                    }
                }
            }
        }
    }
    Ok(RolloutOutcome {
        predictions: preds,
        loss,
        active_channels: active,
    })
}

fn check_finite(loss: &LossParts, iteration: u64) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss {} at iteration {iteration}", loss.total)))
    }
}

fn finish_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &DualGrads<T>,
    lr: f64,
    record: LogRecord,
    force_log: bool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    observer: &mut dyn Observer<T>,
) -> Result<()> {
    check_finite(&record.loss, record.iteration)?;
    state.adam.step(&mut state.model, grads, lr)?;
    state.iteration += 1;
    log.losses.push((record.iteration, record.loss));
    if force_log || record.iteration % cfg.log_every as u64 == 0 {
        log::info!(
            "stage {} K={} iter {} lr {:.3e} loss {:.5} (l1 {:.5}, motion {:.5})",
            record.stage.number(),
            record.k,
            record.iteration,
            record.lr,
            record.loss.total,
            record.loss.l1,
            record.loss.motion
        );
        observer.record(&record);
        log.records.push(record);
    }
    observer.after_step(state)
}

/// Stage 1: for each `K` in `0..context`, `iters_per_k` steps on batches of
/// random windows (each flipped left-right with probability `flip_prob`).
pub fn run_stage1<T: Scalar>(
    state: &mut TrainState<T>,
    clip: &Clip<T>,
    cfg: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let delta = state.model.context();
    let train = clip.span(0, cfg.train_len(clip.len())?)?;
    if train.len() < 2 * delta {
        return Err(Error::arg(format!(
            "stage 1 needs at least {} training frames, got {}",
            2 * delta,
            train.len()
        )));
    }
    let loss_cfg = cfg.loss();
    let mut log = TrainLog::default();
    for k in 0..delta {
        log.phases.push(k);
        observer.phase(Stage::One, k);
        for i in 0..cfg.iters_per_k {
            let mut windows = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let w = sample_window(&train, delta, k, &mut state.rng)?;
                let flip = state.rng.random_bool(cfg.flip_prob);
                windows.push(flip_lr(&w, flip));
            }
            let lr = learning_rate(cfg.lr0, state.iteration);
            let mut grads = state.model.zero_grads();
            let out = rollout_training_window(
                &mut state.model,
                &windows,
                &loss_cfg,
                BnMode::Train,
                cfg.stop_gradient,
                &mut grads,
                Stage::One,
                observer,
            )?;
            let record = LogRecord {
                iteration: state.iteration,
                stage: Stage::One,
                k,
                lr,
                loss: out.loss,
                active_channels: out.active_channels,
            };
            finish_step(state, &grads, lr, record, i + 1 == cfg.iters_per_k, cfg, &mut log, observer)?;
        }
    }
    Ok(log)
}

/// Stage 2: full rollouts of the training span from its first `context`
/// frames, one optimizer step per rollout, with early stopping. The
/// selector's batch normalization uses its running statistics here.
///
/// On return the model holds the parameters that scored the lowest rollout
/// loss, which may be the ones stage 2 started from.
pub fn run_stage2<T: Scalar>(
    state: &mut TrainState<T>,
    clip: &Clip<T>,
    cfg: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let delta = state.model.context();
    let train = clip.span(0, cfg.train_len(clip.len())?)?;
    if train.len() <= delta {
        return Err(Error::arg(format!(
            "stage 2 needs more than {delta} training frames, got {}",
            train.len()
        )));
    }
    let window = window_at(&train, delta, train.len() - delta - 1, 0)?;
    let k = window.targets.len() - 1;
    let loss_cfg = cfg.loss();
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut best_model: Option<(usize, DualNet<T>)> = None;
    let mut stale = 0;
    observer.phase(Stage::Two, k);
    for r in 0..cfg.stage2_max_rollouts {
        let lr = learning_rate(cfg.lr0, state.iteration);
        let mut grads = state.model.zero_grads();
        let out = rollout_training_window(
            &mut state.model,
            std::slice::from_ref(&window),
            &loss_cfg,
            BnMode::Eval,
            cfg.stop_gradient,
            &mut grads,
            Stage::Two,
            observer,
        )?;
        let total = out.loss.total;
        if total < best * (1.0 - cfg.early_stop_min_improvement) {
            stale = 0;
        } else {
            stale += 1;
        }
        if total < best {
            best = total;
            best_model = Some((r, state.model.clone()));
        }
        let stop = stale >= cfg.early_stop_patience;
        let record = LogRecord {
            iteration: state.iteration,
            stage: Stage::Two,
            k,
            lr,
            loss: out.loss,
            active_channels: out.active_channels,
        };
        let last = stop || r + 1 == cfg.stage2_max_rollouts;
        finish_step(state, &grads, lr, record, last, cfg, &mut log, observer)?;
        if stop {
            log::info!("stage 2 early stop after {} rollouts (best loss {best:.5})", r + 1);
            log.early_stopped = true;
            break;
        }
    }
    if let Some((r, m)) = best_model {
        log::info!("stage 2 keeps the parameters of rollout {r} (loss {best:.5})");
        state.model = m;
        log.best_rollout = Some(r);
    }
    Ok(log)
}

/// Stage 1 followed by stage 2.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    clip: &Clip<T>,
    cfg: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainLog> {
    let mut log = run_stage1(state, clip, cfg, observer)?;
    log.extend(run_stage2(state, clip, cfg, observer)?);
    Ok(log)
}
