//! On-disk scene layout: `<root>/<band>/imgset<id>/{LR000.png.., QM000.png..,
//! HR.png, SM.png, clearance.npy}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::npy;
use super::png::{read_gray16, write_gray16, Gray};
use super::{compute_clearance, Band, Mask, Scene};
use crate::error::{ingest_err, Error, Result};
use crate::tensor::Tensor;

pub fn scene_dir(root: &Path, band: Band, scene_id: &str) -> PathBuf {
    root.join(band.to_string()).join(scene_id)
}

/// Numeric index of `LR007.png`-style names.
fn indexed(name: &str, prefix: &str) -> Option<(u32, String)> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(".png")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((digits.parse().ok()?, digits.to_string()))
}

fn read_image(path: &Path) -> Result<Gray> {
    let g = read_gray16(path)?;
    if g.bits == 8 {
        log::warn!("{}: 8-bit PNG, scaling by 255", path.display());
    }
    Ok(g)
}

fn read_mask(path: &Path) -> Result<Mask> {
    let g = read_gray16(path)?;
    Mask::new(g.h, g.w, g.data.iter().map(|&v| v != 0).collect())
}

fn band_of(dir: &Path) -> Band {
    dir.parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .unwrap_or(Band::Nir)
}

/// Loads one scene directory. The band is taken from the parent directory
/// name (NIR when it is not a band name).
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let entries = fs::read_dir(dir).map_err(|e| ingest_err(dir, e.to_string()))?;
    let mut lr = BTreeMap::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some((idx, digits)) = name.to_str().and_then(|n| indexed(n, "LR")) {
            lr.insert(idx, digits);
        }
    }
    if lr.is_empty() {
        return Err(ingest_err(dir, "no LR*.png frames"));
    }

    let mut frames = Vec::with_capacity(lr.len());
    let mut masks = Vec::with_capacity(lr.len());
    let mut size = None;
    for digits in lr.values() {
        let qm_path = dir.join(format!("QM{digits}.png"));
        if !qm_path.exists() {
            return Err(ingest_err(dir, format!("LR{digits}.png has no QM{digits}.png")));
        }
        let img = read_image(&dir.join(format!("LR{digits}.png")))?;
        let qm = read_mask(&qm_path)?;
        let dims = *size.get_or_insert((img.h, img.w));
        if (img.h, img.w) != dims || (qm.h, qm.w) != dims {
            return Err(ingest_err(
                dir,
                format!("frame {digits} is {}x{} with a {}x{} mask, expected {}x{}", img.h, img.w, qm.h, qm.w, dims.0, dims.1),
            ));
        }
        frames.push(Tensor::new(&[1, img.h, img.w], img.to_unit())?);
        masks.push(qm);
    }

    let hr_path = dir.join("HR.png");
    let sm_path = dir.join("SM.png");
    let (hr, sm_mask) = if hr_path.exists() {
        let img = read_image(&hr_path)?;
        let sm = if sm_path.exists() { read_mask(&sm_path)? } else { Mask::full(img.h, img.w, true) };
        if (sm.h, sm.w) != (img.h, img.w) {
            return Err(ingest_err(dir, format!("SM is {}x{} but HR is {}x{}", sm.h, sm.w, img.h, img.w)));
        }
        (Some(Tensor::new(&[1, img.h, img.w], img.to_unit())?), Some(sm))
    } else {
        (None, None)
    };

    let clearance_path = dir.join("clearance.npy");
    let clearance = if clearance_path.exists() {
        let values = npy::parse_f64_vector(&fs::read(&clearance_path)?).map_err(|m| ingest_err(&clearance_path, m))?;
        if values.len() != frames.len() {
            return Err(ingest_err(&clearance_path, format!("{} scores for {} frames", values.len(), frames.len())));
        }
        values
    } else {
        masks.iter().map(compute_clearance).collect()
    };

    let scene = Scene {
        scene_id: dir.file_name().and_then(|n| n.to_str()).unwrap_or("scene").to_string(),
        band: band_of(dir),
        lr_frames: Tensor::stack(&frames)?,
        qm_masks: masks,
        hr,
        sm_mask,
        clearance,
    };
    scene.validate().map_err(|e| ingest_err(dir, e.to_string()))?;
    Ok(scene)
}

fn mask_values(m: &Mask) -> Vec<f32> {
    m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Writes `scene` under `<root>/<band>/<scene_id>` and returns that directory.
pub fn write_scene(root: &Path, scene: &Scene) -> Result<PathBuf> {
    scene.validate()?;
    let dir = scene_dir(root, scene.band, &scene.scene_id);
    fs::create_dir_all(&dir)?;
    let (h, w) = scene.lr_size();
    for i in 0..scene.frames() {
        write_gray16(&dir.join(format!("LR{i:03}.png")), h, w, scene.lr_frames.index_first(i).data())?;
        write_gray16(&dir.join(format!("QM{i:03}.png")), h, w, &mask_values(&scene.qm_masks[i]))?;
    }
    if let (Some(hr), Some(sm)) = (&scene.hr, &scene.sm_mask) {
        write_gray16(&dir.join("HR.png"), sm.h, sm.w, hr.data())?;
        write_gray16(&dir.join("SM.png"), sm.h, sm.w, &mask_values(sm))?;
    }
    fs::write(dir.join("clearance.npy"), npy::encode_f64_vector(&scene.clearance))?;
    Ok(dir)
}

/// Scene directories (`imgset*`) of one band, sorted by name.
pub fn list_scenes(root: &Path, band: Band) -> Result<Vec<PathBuf>> {
    let band_dir = root.join(band.to_string());
    let entries = fs::read_dir(&band_dir).map_err(|e| ingest_err(&band_dir, e.to_string()))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry?;
        let is_scene = entry.file_name().to_str().is_some_and(|n| n.starts_with("imgset"));
        if is_scene && entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingest { path: band_dir, msg: "no imgset* directories".into() });
    }
    Ok(dirs)
}

/// Loads every scene of one band in parallel.
pub fn load_dataset(root: &Path, band: Band) -> Result<Vec<Scene>> {
    list_scenes(root, band)?.par_iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_parsing() {
        assert_eq!(indexed("LR012.png", "LR"), Some((12, "012".into())));
        assert_eq!(indexed("LR.png", "LR"), None);
        assert_eq!(indexed("QM001.png", "LR"), None);
        assert_eq!(indexed("LR01a.png", "LR"), None);
    }
}
