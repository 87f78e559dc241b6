use std::path::Path;

use image::{ImageBuffer, Luma};
use misr_core::data::{
    batch_scenes, center_crop, load_dataset, load_scene, procedural_hr, synthesize_dataset, synthesize_scene, write_gray16,
    write_scene, Band, SynthParams,
};
use misr_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_params() -> SynthParams {
    SynthParams { frames: 9, coverage: 0.2, ..Default::default() }
}

fn write_const(path: &Path, h: usize, w: usize, v: f32) {
    write_gray16(path, h, w, &vec![v; h * w]).unwrap();
}

#[test]
fn scene_round_trips_through_layout() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synthesize_dataset(2, 12, &small_params()).unwrap();
    for s in &scenes {
        write_scene(dir.path(), s).unwrap();
    }
    let loaded = load_dataset(dir.path(), Band::Nir).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in scenes.iter().zip(&loaded) {
        assert_eq!(a, b);
        assert_eq!(b.frames(), 9);
        assert!(b.hr.is_some());
    }
}

#[test]
fn hr_is_optional_and_max_value_maps_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("NIR").join("imgset0001");
    std::fs::create_dir_all(&scene_dir).unwrap();
    for i in 0..3 {
        write_const(&scene_dir.join(format!("LR{i:03}.png")), 5, 4, 1.0);
        write_const(&scene_dir.join(format!("QM{i:03}.png")), 5, 4, if i == 1 { 0.0 } else { 1.0 });
    }
    let scene = load_scene(&scene_dir).unwrap();
    assert!(scene.hr.is_none() && scene.sm_mask.is_none());
    assert!(scene.lr_frames.data().iter().all(|&v| v == 1.0));
    assert_eq!(scene.clearance, vec![1.0, 0.0, 1.0]);
    assert_eq!(scene.band, Band::Nir);
    assert_eq!(scene.scene_id, "imgset0001");
}

#[test]
fn clearance_file_overrides_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = synthesize_dataset(1, 6, &SynthParams { frames: 3, ..Default::default() }).unwrap().remove(0);
    scene.clearance = vec![0.9, 0.1, 0.5];
    let path = write_scene(dir.path(), &scene).unwrap();
    assert_eq!(load_scene(&path).unwrap().clearance, vec![0.9, 0.1, 0.5]);
    std::fs::remove_file(path.join("clearance.npy")).unwrap();
    let computed = load_scene(&path).unwrap().clearance;
    let expect: Vec<f64> = scene.qm_masks.iter().map(misr_core::data::compute_clearance).collect();
    assert_eq!(computed, expect);
}

#[test]
fn missing_quality_mask_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synthesize_dataset(1, 6, &SynthParams { frames: 2, ..Default::default() }).unwrap().remove(0);
    let path = write_scene(dir.path(), &scene).unwrap();
    std::fs::remove_file(path.join("QM001.png")).unwrap();
    let err = load_scene(&path).unwrap_err();
    assert!(matches!(err, Error::Ingest { .. }), "{err}");
    assert!(err.to_string().contains("QM001"), "{err}");
}

#[test]
fn mismatched_dimensions_are_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synthesize_dataset(1, 6, &SynthParams { frames: 2, ..Default::default() }).unwrap().remove(0);
    let path = write_scene(dir.path(), &scene).unwrap();
    write_const(&path.join("LR001.png"), 7, 6, 0.5);
    assert!(matches!(load_scene(&path), Err(Error::Ingest { .. })));
}

#[test]
fn eight_bit_png_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("RED").join("imgset0002");
    std::fs::create_dir_all(&scene_dir).unwrap();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 2, vec![0, 51, 255, 102]).unwrap();
    img.save(scene_dir.join("LR000.png")).unwrap();
    write_const(&scene_dir.join("QM000.png"), 2, 2, 1.0);
    let scene = load_scene(&scene_dir).unwrap();
    assert_eq!(scene.band, Band::Red);
    assert_eq!(scene.lr_frames.data(), &[0.0, 0.2, 1.0, 0.4]);
}

#[test]
fn padding_to_24_uses_clearest_frame() {
    let hr = procedural_hr(384, 384, &mut ChaCha8Rng::seed_from_u64(4));
    let scene = synthesize_scene(&hr, &SynthParams { frames: 9, coverage: 0.0, ..Default::default() }).unwrap();
    let mut scenes = Vec::new();
    for i in 0..4 {
        let mut s = scene.clone();
        s.clearance[i + 2] = 2.0;
        scenes.push(s);
    }
    let batch = batch_scenes(&scenes, 24, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.lr.shape(), &[4, 24, 1, 128, 128]);
    assert_eq!(batch.hr.as_ref().unwrap().shape(), &[4, 1, 384, 384]);
    for (b, flags) in batch.pad_flags.iter().enumerate() {
        assert_eq!(flags.iter().filter(|&&p| p).count(), 15);
        let clearest = scene.lr_frames.index_first(b + 2);
        let per_scene = batch.lr.index_first(b);
        for slot in 9..24 {
            assert_eq!(per_scene.index_first(slot), clearest);
        }
    }
}

#[test]
fn crops_are_aligned() {
    let scene = synthesize_dataset(1, 128, &SynthParams { frames: 2, ..Default::default() }).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let batch = batch_scenes([&scene], 2, Some(32), &mut rng).unwrap();
        assert_eq!(batch.lr.shape(), &[1, 2, 1, 32, 32]);
        assert_eq!(batch.hr.as_ref().unwrap().shape(), &[1, 1, 96, 96]);
        // Recover the origin from the first LR row and check the HR window.
        let lr0 = batch.lr.data()[..32].to_vec();
        let full = scene.lr_frames.index_first(0);
        let (y, x) = (0..=96)
            .flat_map(|y| (0..=96).map(move |x| (y, x)))
            .find(|&(y, x)| full.data()[y * 128 + x..][..32] == lr0[..])
            .unwrap();
        let hr = scene.hr.as_ref().unwrap();
        assert_eq!(batch.hr.as_ref().unwrap().data()[..96], hr.data()[3 * y * 384 + 3 * x..][..96]);
    }
    let err = batch_scenes([&scene], 2, Some(129), &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let c = center_crop(&scene, 32).unwrap();
    assert_eq!(c.lr_frames.index_first(0).data()[0], scene.lr_frames.data()[48 * 128 + 48]);
}

#[test]
fn mask_channel_input() {
    let scene = synthesize_dataset(1, 8, &SynthParams { frames: 3, coverage: 0.3, ..Default::default() }).unwrap().remove(0);
    let batch = batch_scenes([&scene], 3, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = batch.input(2).unwrap();
    assert_eq!(x.shape(), &[1, 3, 2, 8, 8]);
    assert_eq!(x.at(&[0, 1, 1, 2, 3]), batch.masks.at(&[0, 1, 2, 3]));
    assert_eq!(x.at(&[0, 1, 0, 2, 3]), batch.lr.at(&[0, 1, 0, 2, 3]));
    assert!(batch.input(3).is_err());
}

#[test]
fn clean_frames_beat_noisy_ones() {
    let hr = procedural_hr(48, 48, &mut ChaCha8Rng::seed_from_u64(6));
    let clean = SynthParams { max_shift: 0.0, blur_sigma: 0.0, noise_sigma: 0.0, coverage: 0.0, frames: 1, ..Default::default() };
    let noisy = SynthParams { noise_sigma: 0.05, ..clean.clone() };
    let err = |p: &SynthParams| {
        let s = synthesize_scene(&hr, p).unwrap();
        let lr: Vec<f64> = s.lr_frames.data().iter().map(|&v| v as f64).collect();
        // Nearest-neighbour upsampling is enough to compare the two.
        let up = Tensor::from_fn(&[48 * 48], |i| lr[(i / 48 / 3) * 16 + (i % 48) / 3]);
        up.data().iter().zip(hr.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>()
    };
    assert!(err(&clean) < err(&noisy));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_always_have_k_frames(n in 1usize..12, k in 1usize..16, seed in 0u64..1000) {
        let p = SynthParams { frames: n, seed, ..Default::default() };
        let scene = synthesize_dataset(1, 6, &p).unwrap().remove(0);
        let batch = batch_scenes([&scene, &scene], k, Some(4), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batch.lr.shape(), &[2, k, 1, 4, 4]);
        prop_assert_eq!(batch.masks.shape(), &[2, k, 4, 4]);
        prop_assert!(batch.pad_flags.iter().all(|f| f.len() == k));
    }
}
