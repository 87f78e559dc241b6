use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misr_core::data::{
    center_crop, load_dataset, load_scene, read_gray16, synthesize_dataset, synthesize_scene, write_gray16, write_scene, Scene, SynthParams,
};
use misr_core::metrics::{evaluate_dataset, BicubicBaseline, ModelPredictor, Predictor};
use misr_core::model::Model;
use misr_core::train::{load_checkpoint, save_checkpoint, Trainer};
use misr_core::verify::{gradcheck_model_config, gradient_suite, model_gradcheck, oracle_suite};
use misr_core::Tensor;

use crate::config::{Resolver, RunConfig};
use crate::{Baseline, CheckArgs, CliError, EvalArgs, InferArgs, SynthArgs, TrainArgs};

/// Crop of the composed-model gradient check, in LR pixels.
const MODEL_CHECK_CROP: usize = 16;
const MODEL_CHECK_COORDS: usize = 2;

fn text(p: &Path) -> String {
    p.display().to_string()
}

fn dataset_root(cfg: &RunConfig) -> Result<&Path, CliError> {
    let root = cfg.data.as_deref().ok_or_else(|| CliError::Usage("no dataset: pass --data or set run.data".into()))?;
    if !root.is_dir() {
        return Err(CliError::Data(format!("dataset root {} does not exist", root.display())));
    }
    Ok(root)
}

fn load_nonempty(root: &Path, cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    let scenes = load_dataset(root, cfg.band)?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!("no {} scenes under {}", cfg.band, root.display())));
    }
    Ok(scenes)
}

pub fn train(mut r: Resolver, a: &TrainArgs) -> Result<(), CliError> {
    r.apply_opt("run.data", a.data.as_deref().map(text))?;
    r.apply_opt("run.val_data", a.val_data.as_deref().map(text))?;
    r.apply_opt("train.epochs", a.epochs)?;
    if let Some(k) = a.k {
        r.apply("train.k", &k.to_string())?;
        r.apply("model.frames", &k.to_string())?;
    }
    if let Some(c) = a.crop {
        r.apply("train.crop", &c.to_string())?;
        r.apply("train.val_crop", &c.to_string())?;
    }
    r.apply_opt("train.shuffle_t", a.shuffle_t)?;
    r.apply_opt("train.batch_size", a.batch_size)?;
    r.apply_opt("train.lr", a.lr)?;
    r.apply_opt("train.patience", a.patience)?;
    let cfg = r.cfg;
    cfg.validate()?;

    let mut scenes = load_nonempty(dataset_root(&cfg)?, &cfg)?;
    let val = match &cfg.val_data {
        Some(root) => load_nonempty(root, &cfg)?,
        None => {
            let n = (scenes.len() as f64 * cfg.val_fraction).floor() as usize;
            scenes.split_off(scenes.len() - n)
        }
    };
    if scenes.is_empty() {
        return Err(CliError::Data("no training scenes left after the validation split".into()));
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_text())?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.model != cfg.model {
                return Err(CliError::Config { key: "model".into(), msg: format!("differs from the model in {}", path.display()) });
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            t.cfg.epochs = cfg.train.epochs;
            t.cfg.patience = cfg.train.patience;
            t
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    log::info!("training on {} scenes, validating on {}", scenes.len(), val.len());
    let fit = trainer.fit(&scenes, &val, Some(&cfg.out))?;
    save_checkpoint(&cfg.out.join("last.ckpt"), &trainer.checkpoint())?;
    match fit.best {
        Some((db, epoch)) => println!("trained {} epochs; best validation cPSNR {db:.4} dB at epoch {epoch}", trainer.epoch),
        None => println!("trained {} epochs; no validation scores", trainer.epoch),
    }
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

pub fn eval(mut r: Resolver, a: &EvalArgs) -> Result<(), CliError> {
    r.apply_opt("run.data", a.data.as_deref().map(text))?;
    let cfg = r.cfg;
    let mut scenes = load_nonempty(dataset_root(&cfg)?, &cfg)?;
    if let Some(c) = a.crop {
        scenes = scenes.iter().map(|s| center_crop(s, c)).collect::<misr_core::Result<_>>()?;
    }
    let report = match (a.baseline, &a.checkpoint) {
        (Some(Baseline::Bicubic), _) => evaluate_dataset(&BicubicBaseline { scale: cfg.model.upscale }, &scenes)?,
        (None, Some(path)) => {
            let ck = load_checkpoint(path)?;
            let model = Model::new(&ck.model)?;
            evaluate_dataset(&ModelPredictor { model: &model, store: &ck.store, k: ck.train.k }, &scenes)?
        }
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --baseline".into())),
    };
    if report.per_scene.is_empty() {
        return Err(CliError::Data(format!("none of {} scenes has an HR target", scenes.len())));
    }
    if report.scored() == 0 {
        return Err(CliError::Data("no scene has clear target pixels".into()));
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("report.jsonl");
    fs::write(&path, report.to_jsonl())?;
    println!(
        "scenes {} scored {} excluded {} mean cPSNR {:.4} dB mean cSSIM {:.5}",
        report.per_scene.len(),
        report.scored(),
        report.excluded.len(),
        report.mean_cpsnr().unwrap_or(f64::NAN),
        report.mean_cssim().unwrap_or(f64::NAN)
    );
    println!("report written to {}", path.display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = Model::new(&ck.model)?;
    let scene = load_scene(&a.scene)?;
    let sr = ModelPredictor { model: &model, store: &ck.store, k: ck.train.k }.predict(&scene)?;
    let (h, w) = (sr.dim(1), sr.dim(2));
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_gray16(&a.output, h, w, sr.data())?;
    println!("wrote {h}x{w} image to {}", a.output.display());
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot read HR directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no PNG rasters in {}", dir.display())));
    }
    Ok(files)
}

pub fn synth(r: Resolver, a: &SynthArgs) -> Result<(), CliError> {
    let cfg = r.cfg;
    let params = SynthParams {
        scale: a.scale,
        max_shift: a.max_shift,
        blur_sigma: a.blur,
        noise_sigma: a.noise,
        coverage: a.coverage,
        frames: a.frames,
        seed: cfg.train.seed,
        quantize: true,
    };
    params.validate()?;
    let scenes = match &a.hr {
        Some(dir) => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            png_files(dir)?
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let g = read_gray16(path)?;
                    // Trim to a multiple of the scale factor.
                    let (h, w) = (g.h - g.h % a.scale, g.w - g.w % a.scale);
                    if h == 0 || w == 0 {
                        return Err(CliError::Data(format!("{} is smaller than the scale factor", path.display())));
                    }
                    let unit = g.to_unit();
                    let hr = Tensor::from_fn(&[1, h, w], |j| unit[(j / w) * g.w + j % w]);
                    let mut scene = synthesize_scene(&hr, &SynthParams { seed: rng.gen(), ..params.clone() })?;
                    scene.scene_id = format!("imgset{i:04}");
                    Ok(scene)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        None => synthesize_dataset(a.count, a.lr_size, &params)?,
    };
    for mut scene in scenes.iter().cloned() {
        scene.band = cfg.band;
        write_scene(&cfg.out, &scene)?;
    }
    println!("wrote {} {} scenes under {}", scenes.len(), cfg.band, cfg.out.display());
    Ok(())
}

pub fn check(a: &CheckArgs) -> Result<(), CliError> {
    let fault: Option<&'static str> = a.fault.clone().map(|s| &*Box::leak(s.into_boxed_str()));
    let mut results = gradient_suite(a.instances, 7, fault)?;
    results.push(model_gradcheck(&gradcheck_model_config(), MODEL_CHECK_CROP, MODEL_CHECK_COORDS, 5, fault)?);
    results.extend(oracle_suite(a.instances, 11)?);
    for res in &results {
        println!("{res}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
