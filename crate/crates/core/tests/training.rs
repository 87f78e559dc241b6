use misr_core::data::{synthesize_dataset, Scene, SynthParams};
use misr_core::metrics::{ModelPredictor, Predictor};
use misr_core::model::{FrameBiasMode, ModelConfig};
use misr_core::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use misr_core::verify::experiments::reorder_scene;

fn tiny_model(frames: usize) -> ModelConfig {
    ModelConfig { embed_dim: 8, feature_dim: 8, misab_blocks: 1, frames, bias_extent: 8, ..ModelConfig::default() }
}

fn tiny_train(k: usize) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 2, k, shuffle_t: 2, lr: 2e-3, seed: 11, crop: Some(6), val_crop: Some(6), ..TrainConfig::default() }
}

fn scenes(n: usize, frames: usize) -> Vec<Scene> {
    synthesize_dataset(n, 8, &SynthParams { frames, seed: 4, ..SynthParams::default() }).unwrap()
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = scenes(3, 5);
    let run = || {
        let mut t = Trainer::new(&tiny_model(4), &tiny_train(4)).unwrap();
        let fit = t.fit(&data[..2], &data[2..], None).unwrap();
        (t, fit)
    };
    let (a, fa) = run();
    let (b, fb) = run();
    assert!(a.store.bit_equal(&b.store));
    assert!(fa.best_store.bit_equal(&fb.best_store));
    let rows = |h: &[misr_core::train::EpochRecord]| h.iter().map(|r| (r.train_loss, r.val_cpsnr)).collect::<Vec<_>>();
    assert_eq!(rows(&fa.history), rows(&fb.history));

    let mut other = Trainer::new(&tiny_model(4), &TrainConfig { seed: 12, ..tiny_train(4) }).unwrap();
    assert!(!other.store.bit_equal(&Trainer::new(&tiny_model(4), &tiny_train(4)).unwrap().store));
    other.train_epoch(&data).unwrap();
}

#[test]
fn each_scene_is_enqueued_max_one_t_times() {
    let data = scenes(3, 5);
    for (t, copies) in [(0, 1), (1, 1), (3, 3)] {
        let mut tr = Trainer::new(&tiny_model(4), &TrainConfig { shuffle_t: t, ..tiny_train(4) }).unwrap();
        let samples = tr.epoch_samples(&data).unwrap();
        assert_eq!(samples.len(), 3 * copies);
        for s in &data {
            assert_eq!(samples.iter().filter(|x| x.scene_id == s.scene_id).count(), copies);
        }
        if t == 0 {
            // Without shuffling, frames keep the clearance-descending selection order.
            for x in &samples {
                assert!(x.stack.clearance.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = scenes(2, 4);
    let mut t = Trainer::new(&tiny_model(4), &TrainConfig { epochs: 8, shuffle_t: 0, lr: 5e-3, ..tiny_train(4) }).unwrap();
    let fit = t.fit(&data, &[], None).unwrap();
    let first = fit.history.first().unwrap().train_loss;
    let last = fit.history.last().unwrap().train_loss;
    assert!(fit.history.iter().all(|r| r.train_loss.is_finite()));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_epochs_leave_initial_weights() {
    let data = scenes(2, 4);
    let mut t = Trainer::new(&tiny_model(4), &TrainConfig { epochs: 0, ..tiny_train(4) }).unwrap();
    let init = t.store.clone();
    let fit = t.fit(&data, &data, None).unwrap();
    assert!(fit.history.is_empty());
    assert!(fit.best_store.bit_equal(&init));
    assert!(t.store.bit_equal(&init));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = scenes(3, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 3, ..tiny_train(4) };

    let mut straight = Trainer::new(&tiny_model(4), &cfg).unwrap();
    let full = straight.fit(&data[..2], &data[2..], None).unwrap();

    let mut first = Trainer::new(&tiny_model(4), &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
    first.fit(&data[..2], &data[2..], Some(dir.path())).unwrap();
    let ck = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ck.epoch, 1);
    let mut resumed = Trainer::from_checkpoint(ck).unwrap();
    resumed.cfg.epochs = 3;
    let rest = resumed.fit(&data[..2], &data[2..], Some(dir.path())).unwrap();

    assert!(resumed.store.bit_equal(&straight.store));
    assert_eq!(resumed.best, straight.best);
    assert_eq!(rest.history.last().unwrap().train_loss, full.history.last().unwrap().train_loss);
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);

    // A checkpoint written and read back resumes identically as well.
    let path = dir.path().join("copy.ckpt");
    save_checkpoint(&path, &resumed.checkpoint()).unwrap();
    let back = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert!(back.store.bit_equal(&resumed.store));
    assert_eq!(back.epoch, 3);
}

#[test]
fn frame_agnostic_predictions_ignore_frame_order() {
    let data = scenes(2, 4);
    let mut model = tiny_model(4);
    model.frame_bias_mode = FrameBiasMode::FrameAgnostic;
    let mut t = Trainer::new(&model, &TrainConfig { epochs: 1, ..tiny_train(4) }).unwrap();
    t.fit(&data, &[], None).unwrap();
    let p = ModelPredictor { model: &t.model, store: &t.store, k: 4 };
    let scene = &data[0];
    let base = p.predict(scene).unwrap();
    for order in [[3, 2, 1, 0], [1, 3, 0, 2]] {
        let out = p.predict(&reorder_scene(scene, &order).unwrap()).unwrap();
        let dev = base.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(dev < 1e-5, "order {order:?}: {dev}");
    }
}
