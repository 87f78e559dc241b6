//! Batteries of gradient and oracle checks over random instances.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck, GradCheckOptions};
use super::{oracles, reference as rf};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::metrics;
use crate::model::{CmtBlock, Ffc, Misab, Model, ModelConfig, SpectralTransform};
use crate::model::config::FrameBiasMode;
use crate::nn::{Ctx, Mhsa, Mode, ParamStore};
use crate::ops::{attention_tensor, conv2d_tensor, fft2_real, BiasLayout, RelativeLayout, TokenPos};
use crate::tensor::Tensor;

/// Worst error of one named check against its tolerance.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tol: f64,
    pub instances: usize,
    /// Where the worst error occurred, when known.
    pub detail: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} max_err={:.3e} tol={:.0e} instances={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tol,
            self.instances
        )?;
        if let Some(d) = &self.detail {
            write!(f, " worst={d}")?;
        }
        Ok(())
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-5;
/// Agreement required between metric implementations (dB or SSIM units).
pub const METRIC_TOL: f64 = 1e-6;

pub fn uniform<R: crate::Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::lit(rng.gen_range(-1.0..1.0)))
}

/// Values bounded away from zero so a ReLU kink is never straddled.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn random_relative(t: usize, kinds: usize, frames: Option<usize>, rng: &mut impl Rng) -> RelativeLayout {
    let extent = (rng.gen_range(1..4), rng.gen_range(1..4));
    let tokens = (0..t)
        .map(|_| TokenPos {
            frame: frames.map_or(0, |f| rng.gen_range(0..f)) as u16,
            kind: rng.gen_range(0..kinds) as u8,
            y: rng.gen_range(0..5),
            x: rng.gen_range(0..5),
        })
        .collect();
    RelativeLayout::new(tokens, kinds, extent, frames).unwrap()
}

type OpFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>,
}

/// Pins a closure to the higher-ranked signature `gradcheck` expects.
fn hr<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..6);
    let mut cases = vec![
        case("add", vec![uniform(&[r, c], rng), uniform(&[r, c], rng)], |_, v| v[0].add(v[1])),
        case("sub", vec![uniform(&[r, c], rng), uniform(&[r, c], rng)], |_, v| v[0].sub(v[1])),
        case("mul", vec![uniform(&[r, c], rng), uniform(&[r, c], rng)], |_, v| v[0].mul(v[1])),
        case("scale", vec![uniform(&[r, c], rng)], |_, v| v[0].scale(-0.7)),
        case("add_scalar", vec![uniform(&[r, c], rng)], |_, v| v[0].add_scalar(1.3)?.mul(v[0])),
        case("relu", vec![off_zero(&[r, c], rng)], |_, v| v[0].relu()),
        case("gelu", vec![uniform(&[r, c], rng).map(|x| 3.0 * x)], |_, v| v[0].gelu()),
        case("sum", vec![uniform(&[r, c], rng)], |_, v| v[0].mul(v[0])?.sum()),
        case("mean", vec![uniform(&[r, c], rng)], |_, v| v[0].mul(v[0])?.mean()),
        case("matmul", vec![uniform(&[r, c], rng), uniform(&[c, r + 1], rng)], |_, v| v[0].matmul(v[1])),
        case("linear", vec![uniform(&[2, r, c], rng), uniform(&[c, 3], rng), uniform(&[3], rng)], |_, v| {
            v[0].linear(v[1], Some(v[2]))
        }),
        case("layer_norm", vec![uniform(&[r, c + 1], rng), uniform(&[c + 1], rng), uniform(&[c + 1], rng)], |_, v| {
            v[0].layer_norm(v[1], v[2], 1e-5)
        }),
        case("batch_norm_train", vec![uniform(&[2, c, 2, r + 1], rng), uniform(&[c], rng), uniform(&[c], rng)], |_, v| {
            Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0)
        }),
        case("batch_norm_eval", vec![uniform(&[2, c, 2, r], rng), uniform(&[c], rng), uniform(&[c], rng)], |_, v| {
            let c = v[1].shape()[0];
            let rm = Tensor::from_fn(&[c], |i| 0.1 * i as f64);
            let rv = Tensor::from_fn(&[c], |i| 0.5 + 0.2 * i as f64);
            v[0].batch_norm_eval(v[1], v[2], &rm, &rv, 1e-5)
        }),
        case("reshape", vec![uniform(&[r, c, 2], rng)], |_, v| {
            let s = v[0].shape();
            v[0].reshape(&[s[0] * s[1], 2])?.mul(v[0].reshape(&[s[0] * s[1], 2])?)
        }),
        case("permute", vec![uniform(&[r, c, 3], rng)], |_, v| v[0].permute(&[2, 0, 1])?.gelu()),
        case("concat", vec![uniform(&[r, c, 2], rng), uniform(&[r, 2, 2], rng)], |_, v| Var::concat(&[v[0], v[1]], 1)?.gelu()),
        case("narrow", vec![uniform(&[r, c + 2, 2], rng)], |_, v| v[0].narrow(1, 1, 2)?.gelu()),
        case("mean_axis", vec![uniform(&[r, c, 3], rng)], |_, v| v[0].gelu()?.mean_axis(1)),
        case("pixel_shuffle", vec![uniform(&[1, 4 * c, 2, r], rng)], |_, v| v[0].gelu()?.pixel_shuffle(2)),
        case("fft2_stacked", vec![uniform(&[1, c, r + 1, 3], rng)], |_, v| v[0].fft2_stacked()),
        case("ifft2_real", vec![uniform(&[1, 2 * c, r + 1, 5], rng)], |_, v| v[0].ifft2_real()),
    ];
    let w = uniform(&[r, c], rng).map(|x: f64| x.abs() + 0.1);
    cases.push(OpCase {
        name: "weighted_sq_err",
        inputs: vec![uniform(&[r, c], rng), uniform(&[r, c], rng)],
        f: Box::new(move |_, v| v[0].weighted_sq_err(v[1], &w)),
    });
    let (ci, co, k) = (rng.gen_range(1..3), rng.gen_range(1..4), [1, 3][rng.gen_range(0..2)]);
    let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let hw = (rng.gen_range(3..7), rng.gen_range(3..7));
    cases.push(OpCase {
        name: "conv2d",
        inputs: vec![uniform(&[2, ci, hw.0, hw.1], rng), uniform(&[co, ci, k, k], rng), uniform(&[co], rng)],
        f: Box::new(move |_, v| v[0].conv2d(v[1], Some(v[2]), stride, pad)),
    });
    let heads = rng.gen_range(1..3);
    let t = rng.gen_range(1..7);
    let d = heads * rng.gen_range(1..3);
    let mut att_inputs: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[2, t, d], rng)).collect();
    cases.push(OpCase {
        name: "attention",
        inputs: att_inputs.clone(),
        f: Box::new(move |_, v| v[0].attention(v[1], v[2], heads, None)),
    });
    let dense = Rc::new(BiasLayout::Dense { tokens: t });
    att_inputs.push(uniform(&[heads, t * t], rng));
    cases.push(OpCase {
        name: "attention_dense_bias",
        inputs: att_inputs.clone(),
        f: Box::new(move |_, v| v[0].attention(v[1], v[2], heads, Some((v[3], dense.clone())))),
    });
    let rel = Rc::new(BiasLayout::Relative(random_relative(t, 2, Some(3), rng)));
    att_inputs[3] = uniform(&[heads, rel.entries()], rng);
    cases.push(OpCase {
        name: "attention_relative_bias",
        inputs: att_inputs,
        f: Box::new(move |_, v| v[0].attention(v[1], v[2], heads, Some((v[3], rel.clone())))),
    });
    cases
}

/// Finite-difference check of every differentiable primitive on
/// `instances` random shapes each, plus a conv -> layer norm -> attention
/// composite.
pub fn gradient_suite(instances: usize, seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { fault, ..GradCheckOptions::default() };
    let mut results: Vec<CheckResult> = Vec::new();
    for _ in 0..instances {
        for c in op_cases(&mut rng) {
            let rep = gradcheck(&c.inputs, &c.f, &opts, &mut rng)?;
            merge(&mut results, &format!("grad/{}", c.name), rep.max_rel_err, GRAD_TOL);
        }
        let (h, w, cin, ch, heads) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(1..3), 4, 2);
        let layout = Rc::new(BiasLayout::Relative(RelativeLayout::grid(h, w, (h, w))?));
        let entries = layout.entries();
        let inputs = vec![
            uniform(&[1, cin, h, w], &mut rng),
            uniform(&[ch, cin, 3, 3], &mut rng),
            uniform(&[ch], &mut rng),
            uniform(&[ch], &mut rng),
            uniform(&[ch, ch], &mut rng),
            uniform(&[ch, ch], &mut rng),
            uniform(&[ch, ch], &mut rng),
            uniform(&[ch, ch], &mut rng),
            uniform(&[heads, entries], &mut rng),
        ];
        let f = hr(move |_, v| {
            let y = v[0].conv2d(v[1], None, 1, 1)?;
            let t = y.permute(&[0, 2, 3, 1])?.reshape(&[1, h * w, ch])?;
            let n = t.layer_norm(v[2], v[3], 1e-5)?;
            let (q, k, vv) = (n.linear(v[4], None)?, n.linear(v[5], None)?, n.linear(v[6], None)?);
            q.attention(k, vv, heads, Some((v[8], layout.clone())))?.linear(v[7], None)?.sum()
        });
        let rep = gradcheck(&inputs, f, &opts, &mut rng)?;
        merge(&mut results, "grad/conv_ln_mhsa_composite", rep.max_rel_err, GRAD_TOL);
    }
    Ok(results)
}

fn merge(results: &mut Vec<CheckResult>, name: &str, err: f64, tol: f64) {
    match results.iter_mut().find(|r| r.name == name) {
        Some(r) => {
            r.error = if err.is_nan() || r.error.is_nan() { f64::NAN } else { r.error.max(err) };
            r.instances += 1;
        }
        None => results.push(CheckResult { name: name.to_string(), error: err, tol, instances: 1, detail: None }),
    }
}

/// Desk configuration of the composed-model gradient check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig { embed_dim: 8, feature_dim: 8, heads: 2, misab_blocks: 1, frames: 4, bias_extent: 16, ..ModelConfig::default() }
}

/// Finite-difference check of the whole network (training mode) w.r.t. the
/// input frames and `coords` sampled entries of every parameter tensor.
pub fn model_gradcheck(cfg: &ModelConfig, crop: usize, coords: usize, seed: u64, fault: Option<&'static str>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg)?;
    let store: ParamStore<f64> = model.init(&mut rng);
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![uniform(&[1, cfg.frames, cfg.in_channels, crop, crop], &mut rng)];
    inputs.extend(store.trainable().map(|(_, t)| t.clone()));
    let f = hr(|tape, v| {
        let ctx = Ctx::with_bindings(tape, &store, Mode::Train, names.iter().cloned().zip(v[1..].iter().copied()));
        model.forward(&ctx, v[0])
    });
    // A small step keeps perturbations from crossing ReLU kinks of the
    // decoder; the floor absorbs rounding noise on vanishing gradients.
    let opts = GradCheckOptions { step: 1e-4, max_coords: Some(coords), floor: 1e-5, fault };
    let rep = gradcheck(&inputs, f, &opts, &mut rng)?;
    let worst = if rep.worst_input == 0 { "input".to_string() } else { names[rep.worst_input - 1].clone() };
    log::info!("model gradcheck: {} coordinates, worst tensor {worst}", rep.coords);
    for (i, e) in rep.per_input.iter().enumerate() {
        let n = if i == 0 { "input" } else { names[i - 1].as_str() };
        log::debug!("model gradcheck {n}: {e:.3e}");
    }
    Ok(CheckResult { name: "grad/model_end_to_end".into(), error: rep.max_rel_err, tol: GRAD_TOL, instances: 1, detail: Some(worst) })
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn block_cfg(rng: &mut impl Rng, mode: FrameBiasMode) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        feature_dim: 8,
        heads: 2,
        frames: 3,
        bias_extent: rng.gen_range(1..4),
        frame_bias_mode: mode,
        patch_pixels: [1, 2, 4][rng.gen_range(0..3)],
        ..ModelConfig::default()
    }
}

/// Perturbs every tensor of a store so zero-initialized entries (biases,
/// norm shifts) are exercised too.
fn jitter(store: &mut ParamStore<f32>, rng: &mut impl Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// f32 kernels against f64 loop oracles on `instances` random instances each.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for _ in 0..instances {
        // conv2d
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let x: Tensor<f32> = uniform(&[1, ci, rng.gen_range(3..9), rng.gen_range(3..9)], &mut rng);
        let k: Tensor<f32> = uniform(&[co, ci, 3, 3], &mut rng);
        let b: Tensor<f32> = uniform(&[co], &mut rng);
        let fast = conv2d_tensor(&x, &k, Some(&b), stride, pad)?;
        let slow = rf::conv2d(&x.cast(), &k.cast(), Some(&b.cast()), stride, pad);
        merge(&mut results, "oracle/conv2d", max_diff(&fast, &slow), ORACLE_TOL);

        // mhsa with a dense per-pair bias
        let (t, heads) = (rng.gen_range(1..9), [1, 2, 4][rng.gen_range(0..3)]);
        let c = 8;
        let mhsa = Mhsa::new("attn", c, heads, t * t, true);
        let mut store = ParamStore::<f32>::new();
        mhsa.init(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let x: Tensor<f32> = uniform(&[1, t, c], &mut rng);
        let layout = Rc::new(BiasLayout::Dense { tokens: t });
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let fast = mhsa.forward(&ctx, tape.constant(x.clone()), &layout)?.value();
        let s64 = store.cast::<f64>();
        let table = s64.get("attn.rel_bias")?;
        let bias: Vec<Tensor<f64>> =
            (0..heads).map(|h| Tensor::new(&[t, t], table.data()[h * t * t..(h + 1) * t * t].to_vec()).unwrap()).collect();
        let w = |n: &str| s64.get(&format!("attn.{n}.weight")).unwrap();
        let bb = |n: &str| s64.get(&format!("attn.{n}.bias")).ok();
        let weights = rf::MhsaWeights { wq: w("q"), bq: bb("q"), wk: w("k"), bk: bb("k"), wv: w("v"), bv: bb("v"), wo: w("o"), bo: bb("o") };
        let slow = rf::mhsa(&x.cast::<f64>().reshape(&[t, c])?, &weights, heads, Some(&bias)).reshape(&[1, t, c])?;
        merge(&mut results, "oracle/mhsa", max_diff(&fast, &slow), ORACLE_TOL);

        // bare attention kernel on several sequences
        let q: Tensor<f32> = uniform(&[2, t, c], &mut rng);
        let kk: Tensor<f32> = uniform(&[2, t, c], &mut rng);
        let v: Tensor<f32> = uniform(&[2, t, c], &mut rng);
        let fast = attention_tensor(&q, &kk, &v, heads, None)?;
        let mut worst = 0.0f64;
        for s in 0..2 {
            let slow = rf::attention(&q.index_first(s).cast(), &kk.index_first(s).cast(), &v.index_first(s).cast(), heads, None);
            worst = worst.max(max_diff(&fast.index_first(s), &slow));
        }
        merge(&mut results, "oracle/attention", worst, ORACLE_TOL);

        // fft2 against the direct DFT
        let (h, w) = (rng.gen_range(1..13), rng.gen_range(1..13));
        let x: Tensor<f32> = uniform(&[1, h, w], &mut rng);
        let z = fft2_real(&x)?;
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let (re, im) = rf::dft2(&x64, &vec![0.0; h * w], h, w, false);
        let err = z.re.iter().zip(&re).chain(z.im.iter().zip(&im)).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        merge(&mut results, "oracle/fft2", err, ORACLE_TOL);

        // pixel shuffle index formula
        let r = rng.gen_range(1..4);
        let x: Tensor<f32> = uniform(&[2, 2 * r * r, 3, 2], &mut rng);
        let fast = crate::ops::pixel_shuffle_tensor(&x, r)?;
        merge(&mut results, "oracle/pixel_shuffle", max_diff(&fast, &rf::pixel_shuffle(&x.cast(), r)), ORACLE_TOL);

        // encoder conv/attention block
        let cfg = block_cfg(&mut rng, FrameBiasMode::FrameAgnostic);
        let blk = CmtBlock::new("cmtb", cfg.embed_dim, &cfg);
        let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let mut store = ParamStore::<f32>::new();
        blk.init(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let x: Tensor<f32> = uniform(&[2, cfg.embed_dim, h, w], &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let fast = blk.forward(&ctx, tape.constant(x.clone()))?.value();
        let slow = oracles::cmt_block(&store.cast(), &blk, &x.cast());
        merge(&mut results, "oracle/cmt_block", max_diff(&fast, &slow), ORACLE_TOL);

        // message-token block in both bias modes
        for mode in [FrameBiasMode::FrameAgnostic, FrameBiasMode::FullSequence] {
            let cfg = block_cfg(&mut rng, mode);
            let k = rng.gen_range(1..=cfg.frames);
            let (h, w) = (2, 2 * rng.gen_range(1..3));
            let blk = Misab::new("misab", &cfg);
            let mut store = ParamStore::<f32>::new();
            blk.init(&mut store, &mut rng);
            jitter(&mut store, &mut rng);
            let x: Tensor<f32> = uniform(&[2 * k, h * w, cfg.feature_dim], &mut rng);
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            let fast = blk.forward(&ctx, tape.constant(x.clone()), k, h, w)?.value();
            let slow = oracles::misab(&store.cast(), &blk, &x.cast(), k, h, w);
            let name = match mode {
                FrameBiasMode::FrameAgnostic => "oracle/misab_frame_agnostic",
                FrameBiasMode::FullSequence => "oracle/misab_full_sequence",
            };
            merge(&mut results, name, max_diff(&fast, &slow), ORACLE_TOL);
        }

        // spectral transform and the full local/global block
        let (cl, cg) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let st = SpectralTransform::new("st", cg);
        let ffc = Ffc::new("ffc", cl, cg);
        let mut store = ParamStore::<f32>::new();
        st.init(&mut store, &mut rng);
        ffc.init(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let fg: Tensor<f32> = uniform(&[2, cg, h, w], &mut rng);
        let x: Tensor<f32> = uniform(&[2, cl + cg, h, w], &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let fast = st.forward(&ctx, tape.constant(fg.clone()))?.value();
        let s64 = store.cast::<f64>();
        merge(&mut results, "oracle/spectral_transform", max_diff(&fast, &oracles::spectral(&s64, &st, &fg.cast())), ORACLE_TOL);
        let fast = ffc.forward(&ctx, tape.constant(x.clone()))?.value();
        merge(&mut results, "oracle/ffc", max_diff(&fast, &oracles::ffc(&s64, &ffc, &x.cast())), ORACLE_TOL);

        // shift/bias-corrected metrics against exhaustive per-window sweeps
        let (h, w) = (rng.gen_range(18..28), rng.gen_range(18..28));
        let hr: Tensor<f32> = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.2..0.8));
        let (dy, dx) = (rng.gen_range(0..3), rng.gen_range(0..3));
        let offset = rng.gen_range(-0.05..0.05);
        let sr = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w).saturating_sub(dy), (i % w).saturating_sub(dx));
            hr.data()[y * w + x] + offset + rng.gen_range(-0.02..0.02)
        });
        let sm: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.85)).collect();
        let fast = metrics::cssim(&sr, &hr, &sm)?;
        let (ch, cw, xw, yw, clear) = metrics::aligned_window(&sr, &hr, &sm, fast.shift.0, fast.shift.1, fast.bias)?;
        let slow = rf::masked_ssim(&xw, &yw, &clear, ch, cw, metrics::SSIM_SIGMA, metrics::SSIM_WINDOW, metrics::SSIM_C1, metrics::SSIM_C2)
            .unwrap_or(f64::NAN);
        merge(&mut results, "oracle/cssim", (fast.value - slow).abs(), METRIC_TOL);
        let fast = metrics::cpsnr(&sr, &hr, &sm)?;
        let f64s = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (db, shift) = rf::cpsnr_sweep(&f64s(&sr), &f64s(&hr), &sm, h, w, metrics::BORDER);
        let err = if shift == fast.shift { (fast.value - db).abs() } else { f64::INFINITY };
        merge(&mut results, "oracle/cpsnr", err, METRIC_TOL);
    }
    Ok(results)
}
