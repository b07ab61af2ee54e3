//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use motionsel::losses::LossConfig;
use motionsel::trainer::{rollout_training_window, NoObserver, Stage};
use motionsel::video_io::Window;
use motionsel::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPREAD: f64 = 3.0;

fn frame(rng: &mut ChaCha8Rng) -> Frame64 {
    Frame::from_vec(1, 8, 8, (0..64).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap()
}

fn setup(enabled: bool, targets: usize) -> (DualNet64, Vec<Window<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = TransformerConfig::new(2, 4, 2, 1, 8, 8);
    let s = SelectorConfig {
        ndf: 2,
        enabled,
        ..SelectorConfig::default()
    };
    let mut m = DualNet::new(t, s, &mut rng).unwrap();
    // Instance norm divides by the pre-activation spread, so small weights
    // turn a 1e-3 step into a large one; wide weights keep it local.
    m.visit_mut(&mut |name, v| {
        if name.ends_with("weight") {
            v.iter_mut().for_each(|x| *x = rng.random_range(-SPREAD..SPREAD));
        }
    });
    let windows = (0..2)
        .map(|_| Window {
            conditioning: (0..2).map(|_| frame(&mut rng)).collect(),
            targets: (0..targets).map(|_| frame(&mut rng)).collect(),
            start_index: 0,
        })
        .collect();
    (m, windows)
}

fn loss_and_grads(m: &DualNet64, w: &[Window<f64>], cfg: &LossConfig) -> (f64, DualGrads<f64>) {
    let mut m = m.clone();
    let mut g = m.zero_grads();
    let out = rollout_training_window(&mut m, w, cfg, BnMode::Train, false, &mut g, Stage::One, &mut NoObserver).unwrap();
    (out.loss.total, g)
}

fn flat(p: &impl ParamSet<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit(&mut |n, v| out.push((n.to_string(), v.to_vec())));
    out
}

/// Central differences at `h` and `h / 2` agree to O(h²) on smooth
/// stretches; a larger disagreement means the step crossed a ReLU or L1 kink
/// and the difference quotient says nothing about the derivative.
fn is_kink(a: f64, b: f64) -> bool {
    (a - b).abs() > 1e-3 * a.abs().max(b.abs()).max(1e-6)
}

/// Worst per-group relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)` over the
/// elements whose difference quotient is trustworthy, plus the fraction of
/// elements skipped for kinks.
pub fn check(enabled: bool, mu: f64, targets: usize) -> (f64, f64) {
    let (m, w) = setup(enabled, targets);
    let cfg = LossConfig { mu_motion: mu };
    let (_, g) = loss_and_grads(&m, &w, &cfg);
    let h = 1e-3;
    let (mut worst, mut skipped, mut total) = (0.0f64, 0usize, 0usize);
    for (gi, (name, analytic)) in flat(&g).into_iter().enumerate() {
        let (mut a_kept, mut n_kept) = (Vec::new(), Vec::new());
        for (i, &a) in analytic.iter().enumerate() {
            let shifted = |d: f64| {
                let mut p = m.clone();
                let mut k = 0;
                p.visit_mut(&mut |_, v| {
                    if k == gi {
                        v[i] += d;
                    }
                    k += 1;
                });
                loss_and_grads(&p, &w, &cfg).0
            };
            let central = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
            let (n1, n2) = (central(h), central(h / 2.0));
            total += 1;
            if is_kink(n1, n2) {
                skipped += 1;
            } else {
                a_kept.push(a);
                n_kept.push(n1);
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a_kept.iter().zip(&n_kept).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&a_kept).max(norm(&n_kept)).max(1e-6);
        if rel > 1e-2 {
            eprintln!("{name}: relative error {rel:.3e}");
        }
        worst = worst.max(rel);
    }
    (worst, skipped as f64 / total as f64)
}
