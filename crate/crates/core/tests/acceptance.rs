//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output. Exits
//! non-zero when a gating criterion fails. The multi-core runtime budget of
//! the learning run cannot be measured on this machine; its line reports the
//! measured wall time and does not gate.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misr_core::autodiff::Tape;
use misr_core::metrics::{cpsnr, BORDER};
use misr_core::model::{Encoder, FrameBiasMode, Fusion, ModelConfig};
use misr_core::nn::{Ctx, Mode, ParamStore};
use misr_core::verify::experiments::{learning_run, order_setup, order_spread, LearningSetup};
use misr_core::verify::{gradcheck_model_config, gradient_suite, model_gradcheck, oracle_suite, CheckResult};
use misr_core::Tensor;

const GRADIENT_BUDGET: Duration = Duration::from_secs(5 * 60);
const ORACLE_BUDGET: Duration = Duration::from_secs(2 * 60);
const ORACLE_INSTANCES: usize = 20;
const PERMUTATION_TOL: f32 = 1e-5;
const TRANSLATION_TOL: f64 = 1e-9;
const MARGIN_DB: f64 = 0.3;
const LEARNING_BUDGET: Duration = Duration::from_secs(60 * 60);
const EVAL_ORDERS: usize = 10;

struct Line {
    name: &'static str,
    passed: bool,
    gating: bool,
    detail: String,
}

fn worst(results: &[CheckResult]) -> String {
    let w = results.iter().max_by(|a, b| (a.error / a.tol).total_cmp(&(b.error / b.tol))).expect("non-empty suite");
    format!("{} checks, worst {} {:.2e} (tol {:.0e})", results.len(), w.name, w.error, w.tol)
}

fn failing(results: &[CheckResult]) -> Vec<&str> {
    results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect()
}

fn gradient_line() -> Line {
    let t = Instant::now();
    let mut results = gradient_suite(20, 7, None).expect("gradient suite runs");
    let cfg = gradcheck_model_config();
    results.push(model_gradcheck(&cfg, 16, 2, 5, None).expect("model gradcheck runs"));
    let elapsed = t.elapsed();
    let bad = failing(&results);
    Line {
        name: "gradient suite (ops + K=4 crop 16 C=8 one-block model, f64, rel err < 1e-4, < 5 min)",
        passed: bad.is_empty() && elapsed < GRADIENT_BUDGET,
        gating: true,
        detail: format!("{} in {:.1}s; failing {:?}", worst(&results), elapsed.as_secs_f64(), bad),
    }
}

fn oracle_line() -> Line {
    let t = Instant::now();
    let results = oracle_suite(ORACLE_INSTANCES, 11).expect("oracle suite runs");
    let elapsed = t.elapsed();
    let bad = failing(&results);
    let enough = results.iter().all(|r| r.instances >= ORACLE_INSTANCES);
    Line {
        name: "oracle suite (conv2d, mhsa, fft2, message block, FFC; >= 20 instances, < 2 min)",
        passed: bad.is_empty() && enough && elapsed < ORACLE_BUDGET,
        gating: true,
        detail: format!("{} in {:.1}s; failing {:?}", worst(&results), elapsed.as_secs_f64(), bad),
    }
}

/// All orderings of `0..n`, lexicographic.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|v| if v >= first { v + 1 } else { v }));
            out.push(p);
        }
    }
    out
}

fn permute_frames(x: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    Tensor::stack(&order.iter().map(|&i| x.index_first(i)).collect::<Vec<_>>()).expect("same shapes")
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn permutation_line() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ModelConfig { frame_bias_mode: FrameBiasMode::FrameAgnostic, bias_extent: 8, ..ModelConfig::desk() };
    let (k, h, w) = (cfg.frames, 6, 6);

    let fusion = Fusion::new(&cfg);
    let mut store = ParamStore::new();
    fusion.init(&mut store, &mut rng);
    let feats = random(&[k, cfg.feature_dim, h, w], &mut rng);
    let fuse = |x: &Tensor<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        fusion.forward(&ctx, tape.constant(x.clone()), k).expect("fusion runs").value().clone()
    };
    let base = fuse(&feats);
    let perms = permutations(k);
    let max_dev = perms
        .iter()
        .map(|p| {
            let out = fuse(&permute_frames(&feats, p));
            base.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
        })
        .fold(0.0f32, f32::max);

    let encoder = Encoder::new(&cfg);
    let mut store = ParamStore::new();
    encoder.init(&mut store, &mut rng);
    let frames = random(&[k, cfg.in_channels, h, w], &mut rng);
    let encode = |x: &Tensor<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        encoder.forward(&ctx, tape.constant(x.clone())).expect("encoder runs").value().clone()
    };
    let enc = encode(&frames);
    let exact = perms.iter().all(|p| *encode(&permute_frames(&frames, p)) == permute_frames(&enc, p));

    Line {
        name: "permutation invariance (frame-agnostic fusion, 24 orders at K=4 < 1e-5; encoder equivariance exact)",
        passed: perms.len() == 24 && max_dev < PERMUTATION_TOL && exact,
        gating: true,
        detail: format!("max |dev| {max_dev:.2e} over {} orders; encoder exact: {exact}", perms.len()),
    }
}

/// Values on the 1/65536 grid in [0.1, 0.9), so adding small dyadic constants stays exact.
fn textured(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[1, size, size], |_| (rng.gen_range(0.1f32..0.9) * 65536.0).round() / 65536.0)
}

/// `out(y, x) = t(y - du, x - dv)` with clamped borders.
fn translate(t: &Tensor<f32>, du: i64, dv: i64) -> Tensor<f32> {
    let (h, w) = (t.dim(1) as i64, t.dim(2) as i64);
    Tensor::from_fn(t.shape(), |i| {
        let (y, x) = (i as i64 / w, i as i64 % w);
        t.data()[((y - du).clamp(0, h - 1) * w + (x - dv).clamp(0, w - 1)) as usize]
    })
}

fn metric_line() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let size = 30;
    let sm = vec![true; size * size];
    let mut worst_shift: f64 = 0.0;
    let mut worst_bias: f64 = 0.0;
    let mut identity_ok = true;
    let mut checked = 0;
    for _ in 0..10 {
        let hr = textured(size, &mut rng);
        let ident = cpsnr(&hr, &hr, &sm).expect("scored");
        identity_ok &= ident.saturated && ident.shift == (BORDER, BORDER);
        let sr = Tensor::from_fn(hr.shape(), |i| hr.data()[i] + (rng.gen_range(-8i32..=8) as f32) / 1024.0);
        let base = cpsnr(&sr, &hr, &sm).expect("scored");
        if base.shift != (BORDER, BORDER) {
            continue;
        }
        checked += 1;
        for (du, dv) in [(2, 0), (-2, 0), (0, 2), (0, -2), (2, 2)] {
            let moved = cpsnr(&translate(&sr, du, dv), &hr, &sm).expect("scored");
            worst_shift = worst_shift.max((moved.value - base.value).abs());
            let exact = cpsnr(&translate(&hr, du, dv), &hr, &sm).expect("scored");
            worst_shift = worst_shift.max((exact.value - ident.value).abs());
        }
        let offset = cpsnr(&sr.map(|v| v + 0.0625), &hr, &sm).expect("scored");
        worst_bias = worst_bias.max((offset.value - base.value).abs());
    }
    Line {
        name: "metric suite (identity, bias invariance, 2-px translation within 1e-9 dB)",
        passed: checked > 0 && identity_ok && worst_shift <= TRANSLATION_TOL && worst_bias <= TRANSLATION_TOL,
        gating: true,
        detail: format!("{checked} pairs; identity saturates: {identity_ok}; max translation dev {worst_shift:.1e} dB; max bias dev {worst_bias:.1e} dB"),
    }
}

fn learning_lines() -> [Line; 2] {
    let setup = LearningSetup::desk();
    let o = learning_run(&setup).expect("learning run completes");
    let last = o.history.last().map_or(f64::NAN, |r| r.train_loss);
    [
        Line {
            name: "end-to-end learning (50/10 synthetic scenes, crop 32, K=4, 30 epochs, seed 42; >= 0.3 dB over bicubic)",
            passed: o.margin() >= MARGIN_DB,
            gating: true,
            detail: format!(
                "model {:.3} dB vs bicubic {:.3} dB, margin {:+.3} dB; final train loss {last:.5}",
                o.model_cpsnr,
                o.bicubic_cpsnr,
                o.margin()
            ),
        },
        Line {
            name: "end-to-end runtime (< 60 min on 8 cores; measured here on the available cores)",
            passed: o.seconds < LEARNING_BUDGET.as_secs_f64(),
            gating: false,
            detail: format!("{:.1} min on {} core(s)", o.seconds / 60.0, std::thread::available_parallelism().map_or(1, |n| n.get())),
        },
    ]
}

fn shuffle_line() -> Line {
    let spreads = order_spread(&order_setup(), &[6, 0], EVAL_ORDERS, 99).expect("order experiment completes");
    let (shuffled, fixed) = (&spreads[0], &spreads[1]);
    Line {
        name: "shuffle effect (full-sequence bias: eval-order cPSNR std, T=6 below T=0, 10 orders)",
        passed: shuffled.std() < fixed.std(),
        gating: true,
        detail: format!(
            "std T=6 {:.3e} dB vs T=0 {:.3e} dB (ratio {:.2}); mean cPSNR {:.3} / {:.3} dB",
            shuffled.std(),
            fixed.std(),
            shuffled.std() / fixed.std(),
            shuffled.mean(),
            fixed.mean()
        ),
    }
}

fn readme_line() -> Line {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let needed = ["49.25", "51.21", "0.17", "49.42", "51.38"];
    let missing: Vec<&str> = needed.iter().copied().filter(|n| !text.contains(n)).collect();
    Line {
        name: "documentation (README reconciles 49.25/51.21 dB + 0.17 dB = 49.42/51.38 dB)",
        passed: missing.is_empty(),
        gating: true,
        detail: if missing.is_empty() { "all figures present".into() } else { format!("missing {missing:?}") },
    }
}

type Criterion = (&'static str, fn() -> Vec<Line>);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradient", || vec![gradient_line()]),
        ("oracle", || vec![oracle_line()]),
        ("permutation", || vec![permutation_line()]),
        ("metric", || vec![metric_line()]),
        ("readme", || vec![readme_line()]),
        ("shuffle", || vec![shuffle_line()]),
        ("learning", || learning_lines().into()),
    ];
    // Plain arguments select criteria by key; `--list` names them.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        criteria.iter().for_each(|(key, _)| println!("{key}: test"));
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let start = Instant::now();
    let (mut total, mut passed, mut gate) = (0, 0, true);
    for (key, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        for l in run() {
            let tag = match (l.passed, l.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "FAIL (non-gating)",
            };
            println!("{tag} {}: {}", l.name, l.detail);
            total += 1;
            passed += usize::from(l.passed);
            gate &= l.passed || !l.gating;
        }
    }
    println!("acceptance: {passed}/{total} criteria passed in {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    if gate {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
