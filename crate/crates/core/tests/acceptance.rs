//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

mod support;

use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use motionsel::analysis::decompose_rollout;
use motionsel::config::RunConfig;
use motionsel::metrics::{baseline_b0, evaluate, mse, psnr, ssim, PredictionReport, Variant};
use motionsel::optim::learning_rate;
use motionsel::predictor::predict;
use motionsel::selector::{self, SelectorParams};
use motionsel::synth::{generate_raw, SynthSpec};
use motionsel::trainer::{self, run_stage1, Observer, Stage, TrainLog};
use motionsel::transformer::{self, TransformerParams};
use motionsel::video_io::{load_clip, write_raw};
use motionsel::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_frame<R: Rng>(c: usize, h: usize, w: usize, rng: &mut R) -> Frame32 {
    Frame::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_batch<R: Rng>(b: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Batch<f32> {
    let mut x = Batch::zeros(b, c, h, w);
    x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    x
}

/// Replaces every weight with a uniform draw in `±spread` so the networks
/// leave the near-linear regime of the default init.
fn spread_weights<P: ParamSet<f32>, R: Rng>(p: &mut P, spread: f32, rng: &mut R) {
    p.visit_mut(&mut |name, v| {
        if name.ends_with("weight") {
            v.iter_mut().for_each(|x| *x = rng.random_range(-spread..spread));
        }
    });
}

// ---------------------------------------------------------------- training runs

const CLIP_LEN: usize = 48;
const PERIOD: usize = 16;
const SIDE: usize = 64;
const T_TRAIN: usize = 32;
/// Initial learning rate of the acceptance runs (the smaller of the two
/// published settings).
const LR0: f64 = 2e-4;

struct Run {
    report: PredictionReport,
    log: TrainLog,
    model: DualNet32,
}

struct Protocol {
    _dir: tempfile::TempDir,
    pattern: String,
    spec: SynthSpec,
    b0: PredictionReport,
    m2: Run,
    b1: Run,
}

fn protocol_config(pattern: &str, variant: &str) -> RunConfig {
    let text = format!(
        r#"variant = "{variant}"

[model]
channels = 16
layers = 8
context = 3
color_channels = 1
height = {SIDE}
width = {SIDE}

[train]
lr0 = {LR0}
iters_per_k = 600
stage2_max_rollouts = 300
seed = 7
t_train = {T_TRAIN}

[data]
clip = "{pattern}"
train_range = [0, {}]
eval_range = [{T_TRAIN}, {}]
"#,
        T_TRAIN - 1,
        CLIP_LEN - 1
    );
    RunConfig::parse(&text).expect("acceptance config parses")
}

fn train_variant(pattern: &str, variant: &str) -> Run {
    let cfg = protocol_config(pattern, variant);
    let clip: Clip32 = load_clip(pattern, cfg.data.train_range).unwrap();
    let mut state = TrainState::init(cfg.model.clone(), cfg.selector.clone(), &cfg.train).unwrap();
    let t0 = Instant::now();
    let log = trainer::train(&mut state, &clip, &cfg.train, &mut trainer::NoObserver).unwrap();
    eprintln!("  trained {variant} in {:.0}s ({} steps)", t0.elapsed().as_secs_f64(), log.losses.len());
    let full: Clip32 = load_clip(pattern, None).unwrap();
    let cond = &full.frames[T_TRAIN - 3..T_TRAIN];
    let gt = full.span(T_TRAIN, CLIP_LEN).unwrap();
    let pred = predict(&state.model, cond, gt.len()).unwrap();
    let label = if variant == "M2" { Variant::M2 } else { Variant::B1 };
    Run {
        report: evaluate(&pred, &gt, label).unwrap(),
        log,
        model: state.model,
    }
}

fn protocol() -> &'static Protocol {
    static P: OnceLock<Protocol> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::oscillating_square(SIDE, SIDE, PERIOD, CLIP_LEN, 7);
        for (i, raw) in generate_raw(&spec).unwrap().iter().enumerate() {
            write_raw(raw, &dir.path().join(format!("frame_{i:03}.png"))).unwrap();
        }
        let pattern = dir.path().join("frame_%03d.png").display().to_string();
        let full: Clip32 = load_clip(&pattern, None).unwrap();
        let gt = full.span(T_TRAIN, CLIP_LEN).unwrap();
        let b0 = baseline_b0(&full.frames[T_TRAIN - 1], &gt).unwrap();
        let m2 = train_variant(&pattern, "M2");
        let b1 = train_variant(&pattern, "B1");
        Protocol {
            _dir: dir,
            pattern,
            spec,
            b0,
            m2,
            b1,
        }
    })
}

fn criterion_1() -> Outcome {
    let p = protocol();
    let (m2, b0) = (p.m2.report.avg_psnr(), p.b0.avg_psnr());
    outcome(
        m2 >= b0 + 2.0,
        format!(
            "M2 {m2:.2} dB / SSIM {:.3} vs B0 {b0:.2} dB / SSIM {:.3} (margin {:+.2} dB, need +2.00)",
            p.m2.report.avg_ssim(),
            p.b0.avg_ssim(),
            m2 - b0
        ),
    )
}

fn criterion_2() -> Outcome {
    let p = protocol();
    let (m2, b1) = (p.m2.report.avg_psnr(), p.b1.report.avg_psnr());
    outcome(m2 >= b1 - 0.25, format!("M2 {m2:.2} dB vs B1 {b1:.2} dB (difference {:+.2} dB, need >= -0.25)", m2 - b1))
}

/// Reported, not asserted: stage-1 loss trend, alpha sparsity and where the
/// foreground render puts its energy.
fn protocol_notes() {
    let p = protocol();
    for (name, run) in [("M2", &p.m2), ("B1", &p.b1)] {
        let smoothed = smoothed_phase_trends(&run.log);
        let rising: Vec<String> = smoothed.iter().filter(|(_, up)| *up).map(|(k, _)| format!("K={k}")).collect();
        if rising.is_empty() {
            println!("note: {name} smoothed stage-1 loss non-increasing in every phase");
        } else {
            println!("warning: {name} smoothed stage-1 loss rises in {}", rising.join(", "));
        }
        println!(
            "note: {name} per-horizon PSNR {}",
            run.report.psnr.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(" ")
        );
    }
    if let Some(last) = p.m2.log.records.last() {
        let n = p.m2.model.arch.columns as f64;
        let sparse: Vec<usize> = (0..last.active_channels.len())
            .filter(|&r| last.active_channels[r] < 0.1 * n)
            .collect();
        println!(
            "note: M2 active channels per row at end of training {:?}; rows below 10%: {:?}",
            last.active_channels.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
            sparse
        );
    }
    println!("note: B0 per-horizon PSNR {}", p.b0.psnr.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(" "));
    let full: Clip32 = load_clip(&p.pattern, None).unwrap();
    let cond = &full.frames[T_TRAIN - 3..T_TRAIN];
    let steps = decompose_rollout(&p.m2.model, cond, 4).unwrap();
    let mut fractions = Vec::new();
    for (j, d) in steps.iter().enumerate() {
        let (y0, x0, y1, x1) = p.spec.object_box(T_TRAIN + j).unwrap();
        let mut sorted = d.foreground.data.clone();
        sorted.sort_by(f32::total_cmp);
        let median = sorted[sorted.len() / 2];
        let (mut inside, mut total) = (0.0f64, 0.0f64);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let dev = (d.foreground.at(0, y, x) - median).abs() as f64;
                total += dev;
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    inside += dev;
                }
            }
        }
        fractions.push(inside / total.max(f64::MIN_POSITIVE));
    }
    println!(
        "note: foreground deviation inside the square's box per step {:?} (reference >= 0.60)",
        fractions.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}

/// For each stage-1 phase, whether the 50-step moving average of the loss
/// ends higher than it starts.
fn smoothed_phase_trends(log: &TrainLog) -> Vec<(usize, bool)> {
    let per_phase = log.losses.len().min(600 * 3) / 3;
    (0..3)
        .map(|k| {
            let l: Vec<f64> = log.losses[k * per_phase..(k + 1) * per_phase].iter().map(|(_, l)| l.total).collect();
            let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let w = 50.min(l.len());
            (k, avg(&l[l.len() - w..]) > avg(&l[..w]))
        })
        .collect()
}

// ---------------------------------------------------------------- structural checks

fn criterion_3() -> Outcome {
    let t = TransformerConfig::new(16, 8, 3, 1, 64, 64);
    let s = SelectorConfig::default();
    let arch = s.arch(&t);
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut rows = 0;
    for set in 0..20 {
        let mut params = SelectorParams::<f32>::init(&arch, &mut r);
        spread_weights(&mut params, 0.05 + set as f32 * 0.05, &mut r);
        let x = random_batch(10, 3, 64, 64, &mut r);
        for a in selector::forward(&x, &mut params, &arch, &t, BnMode::Train).unwrap() {
            for row in 0..a.rows() {
                let sum: f64 = a.unscaled_row(row).iter().map(|&v| v as f64).sum();
                worst = worst.max((sum - 1.0).abs());
                rows += 1;
            }
        }
    }
    outcome(worst <= 1e-5, format!("{rows} rows over 200 inputs, max |row sum - 1| = {worst:.2e}"))
}

fn random_config<R: Rng>(r: &mut R) -> TransformerConfig {
    let half = r.random_range(1..=3);
    TransformerConfig::new(
        r.random_range(2..=8),
        2 * half,
        r.random_range(2..=4),
        if r.random_bool(0.5) { 1 } else { 3 },
        r.random_range(8..=48),
        r.random_range(8..=48),
    )
}

fn random_alpha<R: Rng>(rows: usize, n: usize, r: &mut R) -> Alpha32 {
    let logits: Vec<f32> = (0..rows * n).map(|_| r.random_range(-3.0..3.0)).collect();
    AlphaMatrix::from_logits(rows, n, &logits)
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let (mut worst, mut bitwise) = (0.0f64, true);
    for _ in 0..50 {
        let cfg = random_config(&mut r);
        let mut params = TransformerParams::<f32>::init(&cfg, &mut r);
        spread_weights(&mut params, 0.3, &mut r);
        params.visit_mut(&mut |name, v| {
            if name.ends_with("bias") {
                v.iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
            }
        });
        let batch = 2;
        let x = random_batch(batch, cfg.context * cfg.color_channels, cfg.height, cfg.width, &mut r);
        let alpha: Vec<Alpha32> = (0..batch).map(|_| random_alpha(cfg.depth(), cfg.channels, &mut r)).collect();
        let cache = transformer::forward_cached(&x, Some(&alpha), &params, &cfg).unwrap();
        let split = transformer::output_split(&cache, &params, &cfg);
        let plane = split.full.plane();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (i, &z) in split.full.data.iter().enumerate() {
            let b = split.bias[(i / plane) % split.full.channels];
            diff = diff.max((split.background.data[i] + split.foreground.data[i] + b - z).abs() as f64);
            norm = norm.max(z.abs() as f64);
        }
        worst = worst.max(diff / norm);
        let full = transformer::decompose(&x, &alpha, &params, &cfg, DecomposeMode::Full).unwrap();
        let fwd = transformer::forward(&x, &alpha, &params, &cfg).unwrap();
        bitwise &= full.data.iter().zip(&fwd.data).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(
        worst <= 1e-5 && bitwise,
        format!("50 configs, max relative additivity error {worst:.2e}, full render bitwise equal to forward: {bitwise}"),
    )
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cfg = random_config(&mut r);
        let mut params = TransformerParams::<f32>::init(&cfg, &mut r);
        spread_weights(&mut params, 0.3, &mut r);
        let x = random_batch(1, cfg.context * cfg.color_channels, cfg.height, cfg.width, &mut r);
        let uniform = AlphaMatrix::uniform(cfg.depth(), cfg.channels);
        let a = transformer::forward(&x, &[uniform], &params, &cfg).unwrap();
        let b = transformer::forward_unmodulated(&x, &params, &cfg).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            worst = worst.max((p - q).abs() as f64);
        }
    }
    outcome(worst <= 1e-6, format!("20 instances, max |uniform-alpha - plain U-net| = {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (enabled, mu) in [(true, 0.0), (true, 10.0), (false, 10.0)] {
        let (err, skipped) = support::check(enabled, mu, 3);
        pass &= err <= 1e-2 && skipped <= 0.1;
        lines.push(format!("selector={enabled} mu={mu}: {err:.1e} ({:.1}% kinks skipped)", 100.0 * skipped));
    }
    outcome(pass, format!("worst per-group relative error, {}", lines.join("; ")))
}

// ---------------------------------------------------------------- metric oracles

fn oracle_mse(a: &Frame64, b: &Frame64) -> f64 {
    let (c, h, w) = a.shape();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = a.at(ch, y, x) - b.at(ch, y, x);
                s += d * d;
            }
        }
    }
    s / (c * h * w) as f64
}

/// Direct two-pass SSIM with an explicit 2-D window, independent of the
/// separable moment formulation.
fn oracle_ssim(a: &Frame64, b: &Frame64) -> f64 {
    let (c, h, w) = a.shape();
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = g1[i] * g1[j];
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut acc = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        ma += k * a.at(ch, y + i, x + j);
                        mb += k * b.at(ch, y + i, x + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let (da, db) = (a.at(ch, y + i, x + j) - ma, b.at(ch, y + i, x + j) - mb);
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        acc += sum / ((h - 10) * (w - 10)) as f64;
    }
    acc / c as f64
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let frame = |r: &mut ChaCha8Rng, c: usize| {
        Frame::from_vec(c, 16, 16, (0..c * 256).map(|_| r.random_range(0..=255u8) as f64).collect::<Vec<f64>>()).unwrap()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    let (mut e_mse, mut e_psnr, mut e_ssim) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let c = if i % 4 == 0 { 3 } else { 1 };
        let a = frame(&mut r, c);
        // Correlated partner so SSIM is not pinned near zero.
        let noise: Vec<f64> = (0..a.data.len()).map(|_| r.random_range(-40.0..40.0)).collect();
        let b = Frame::from_vec(c, 16, 16, a.data.iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 255.0)).collect()).unwrap();
        let m = oracle_mse(&a, &b);
        e_mse = e_mse.max(rel(mse(&a, &b).unwrap(), m));
        e_psnr = e_psnr.max(rel(psnr(&a, &b).unwrap(), 20.0 * 255f64.log10() - 10.0 * m.log10()));
        e_ssim = e_ssim.max(rel(ssim(&a, &b).unwrap(), oracle_ssim(&a, &b)));
    }
    let a = Frame::filled(1, 16, 16, 100.0);
    let b = Frame::filled(1, 16, 16, 125.5);
    let p20 = psnr(&a, &b).unwrap();
    let noise = frame(&mut r, 1);
    let s1 = ssim(&noise, &noise).unwrap();
    let pass = e_mse <= 1e-9 && e_psnr <= 1e-9 && e_ssim <= 1e-6 && p20 == 20.0 && s1 == 1.0;
    outcome(
        pass,
        format!("100 frames, max relative error mse {e_mse:.1e}, psnr {e_psnr:.1e}, ssim {e_ssim:.1e}; psnr(25.5) = {p20}, ssim(a,a) = {s1}"),
    )
}

// ---------------------------------------------------------------- training contracts

#[derive(Default)]
struct Curriculum {
    phases: Vec<usize>,
    /// `(K, generated frames in the context)` for every stage-1 prediction.
    contexts: Vec<(usize, usize)>,
}

impl Observer<f32> for Curriculum {
    fn phase(&mut self, stage: Stage, k: usize) {
        if stage == Stage::One {
            self.phases.push(k);
        }
    }

    fn conditioning(&mut self, stage: Stage, k: usize, _step: usize, generated: usize) {
        if stage == Stage::One {
            self.contexts.push((k, generated));
        }
    }
}

fn smoke_clip(len: usize) -> Clip32 {
    motionsel::synth::generate(&SynthSpec::oscillating_square(32, 32, 8, len, 1)).unwrap()
}

fn smoke_state(cfg: &TrainConfig) -> TrainState<f32> {
    let t = TransformerConfig::new(4, 4, 3, 1, 32, 32);
    let s = SelectorConfig {
        ndf: 4,
        ..SelectorConfig::default()
    };
    TrainState::init(t, s, cfg).unwrap()
}

fn criterion_8() -> Outcome {
    let cfg = TrainConfig {
        iters_per_k: 4,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut state = smoke_state(&cfg);
    let mut spy = Curriculum::default();
    run_stage1(&mut state, &smoke_clip(16), &cfg, &mut spy).unwrap();
    let bounded = spy.contexts.iter().all(|&(k, g)| g <= k);
    let reached: Vec<usize> = (0..3)
        .map(|k| spy.contexts.iter().filter(|c| c.0 == k).map(|c| c.1).max().unwrap_or(0))
        .collect();
    outcome(
        spy.phases == [0, 1, 2] && bounded && reached == [0, 1, 2],
        format!("phases {:?}, max generated frames per phase {reached:?}, bound held: {bounded}", spy.phases),
    )
}

fn criterion_9() -> Outcome {
    let lr0 = 1e-3;
    let probes: Vec<(u64, f64)> = [0u64, 1999, 2000, 4000].iter().map(|&i| (i, learning_rate(lr0, i))).collect();
    let expected = [1e-3, 1e-3, 5e-4, 2.5e-4];
    let pass = probes.iter().zip(expected).all(|((_, got), want)| *got == want);
    outcome(pass, format!("lr0 = 1e-3: {}", probes.iter().map(|(i, v)| format!("lr({i}) = {v:e}")).collect::<Vec<_>>().join(", ")))
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let mut shapes = Vec::new();
    let mut pass = true;
    for preset in ["garden", "ocean"] {
        let cfg = RunConfig::preset(preset).unwrap();
        let model = DualNet32::new(cfg.model.clone(), cfg.selector.clone(), &mut r).unwrap();
        let t = &cfg.model;
        let frames: Vec<Frame32> = (0..t.context).map(|_| random_frame(3, t.height, t.width, &mut r)).collect();
        let (out, _) = model.predict_next(&frames).unwrap();
        pass &= out.shape() == (3, t.height, t.width);
        shapes.push(format!("{}x{} L={} -> {:?}", t.height, t.width, t.layers, out.shape()));
    }
    outcome(pass, shapes.join(", "))
}

fn criterion_11() -> Outcome {
    let cfg = TrainConfig {
        iters_per_k: 3,
        batch_size: 2,
        stage2_max_rollouts: 1,
        seed: 42,
        ..TrainConfig::default()
    };
    let clip = smoke_clip(12);
    let run = || {
        let mut st = smoke_state(&cfg);
        let log = trainer::train(&mut st, &clip, &cfg, &mut trainer::NoObserver).unwrap();
        (st, log)
    };
    let ((state, a), (_, b)) = (run(), run());
    let la: Vec<f64> = a.losses.iter().take(10).map(|(_, l)| l.total).collect();
    let lb: Vec<f64> = b.losses.iter().take(10).map(|(_, l)| l.total).collect();
    let gap = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("smoke.ckpt");
    motionsel::checkpoint::save_checkpoint(&path, &state, &cfg).unwrap();
    let loaded = motionsel::checkpoint::load_checkpoint(Path::new(&path)).unwrap();
    let restored: TrainState<f32> = loaded.train_state().unwrap();
    let same_bytes = std::fs::read(&path).unwrap() == loaded.to_bytes().unwrap();
    let same_model = restored.model.transformer == state.model.transformer
        && restored.model.selector == state.model.selector
        && restored.adam.steps == state.adam.steps
        && restored.iteration == state.iteration;
    outcome(
        la.len() == 10 && gap <= 1e-6 && same_bytes && same_model,
        format!("{} logged steps compared, max loss gap {gap:.1e}; checkpoint bytes identical: {same_bytes}, state identical: {same_model}", la.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (3, "alpha rows sum to one", criterion_3),
        (4, "decomposition additivity", criterion_4),
        (5, "uniform alpha is the plain U-net", criterion_5),
        (6, "gradient correctness", criterion_6),
        (7, "metric oracles", criterion_7),
        (8, "curriculum phases", criterion_8),
        (9, "learning-rate schedule", criterion_9),
        (10, "shape preservation", criterion_10),
        (11, "determinism and checkpoint roundtrip", criterion_11),
        (1, "end-to-end gain over copy-last", criterion_1),
        (2, "ladder ordering M2 vs B1", criterion_2),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let t0 = Instant::now();
        let o = match std::panic::catch_unwind(f) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} {name}: {} [{:.1}s]", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    }
    if std::panic::catch_unwind(protocol_notes).is_err() {
        println!("note: protocol diagnostics unavailable");
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
