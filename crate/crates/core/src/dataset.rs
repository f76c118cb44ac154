//! On-disk dataset layout and IO.
//!
//! A dataset split lives in one directory:
//!
//! ```text
//! <split>/
//!   dataset.json    -- class count, image size, generator settings
//!   manifest.csv    -- id, image path, mask path, seed (paths split-relative)
//!   images/<id>.png -- 8-bit RGB
//!   masks/<id>.png  -- 8-bit single channel, IGNORE = 255
//! ```
//!
//! Images quantized to the 8-bit lattice round-trip bit-exactly through the
//! PNG codec; the synthetic generator emits lattice-aligned values only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMask, CHANNELS};
use crate::rngutil::{derive_seed, StreamKind};
use crate::synth::{generate_scene, SceneConfig};

/// Split-wide facts recorded next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub tail_exponent: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub color_noise_sigma: f64,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            classes: self.classes,
            height: self.height,
            width: self.width,
            tail_exponent: self.tail_exponent,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
            color_noise_sigma: self.color_noise_sigma,
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub image: String,
    pub mask: String,
    pub seed: u64,
}

/// A fully loaded split: metadata plus every image/mask pair in memory
/// (desk-scale datasets are a few tens of megabytes).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Image>,
    pub masks: Vec<LabelMask>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pair(&self, index: usize) -> (&Image, &LabelMask) {
        (&self.images[index], &self.masks[index])
    }
}

/// Save an image as 8-bit RGB PNG (values scaled by 255 and rounded).
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

pub fn load_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            data.extend_from_slice(&[
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]);
        }
    }
    Image::new(h as usize, w as usize, data)
}

/// Save a mask as 8-bit single-channel PNG; IGNORE stays 255.
pub fn save_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([mask.label(y as usize, x as usize)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let labels = img.into_raw();
    LabelMask::new(h as usize, w as usize, labels)
}

/// Generate one split: PNG pairs plus manifest and metadata. Per-scene seeds
/// derive from the split seed and the scene index, and are recorded in the
/// manifest.
pub fn generate_split(dir: &Path, cfg: &SceneConfig, count: usize, seed: u64) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let meta = DatasetMeta {
        classes: cfg.classes,
        height: cfg.height,
        width: cfg.width,
        tail_exponent: cfg.tail_exponent,
        shapes_min: cfg.shapes_min,
        shapes_max: cfg.shapes_max,
        color_noise_sigma: cfg.color_noise_sigma,
        seed,
    };
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;

    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))?;
    writer.write_record(["id", "image", "mask", "seed"])?;
    for i in 0..count {
        let scene_seed = derive_seed(&[seed, StreamKind::SceneGen as u64, i as u64]);
        let (img, mask) = generate_scene(cfg, scene_seed);
        let image_rel = format!("images/{i:06}.png");
        let mask_rel = format!("masks/{i:06}.png");
        save_image_png(&img, &dir.join(&image_rel))?;
        save_mask_png(&mask, &dir.join(&mask_rel))?;
        writer.write_record([
            i.to_string(),
            image_rel,
            mask_rel,
            scene_seed.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Generate the standard dataset layout: `<root>/train` and `<root>/val`,
/// the validation split seeded independently of the training one.
pub fn generate_train_val(
    root: &Path,
    cfg: &SceneConfig,
    count: usize,
    val_count: usize,
    seed: u64,
) -> Result<()> {
    generate_split(&root.join("train"), cfg, count, seed)?;
    let val_seed = derive_seed(&[seed, StreamKind::ValSceneGen as u64]);
    generate_split(&root.join("val"), cfg, val_count, val_seed)
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Load one split directory into memory, validating every mask against the
/// declared class count.
pub fn load_split(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|_| {
        data_err(
            &meta_path,
            "missing dataset metadata; generate the dataset first with \
             `ael synthdata generate --out <dir> --count <n> --seed <s>`",
        )
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;

    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest_path)
        .map_err(|_| data_err(&manifest_path, "missing manifest.csv"))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for record in reader.deserialize() {
        entries.push(record?);
    }
    entries.sort_by_key(|e| e.id);

    let mut images = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for entry in &entries {
        let img = load_image_png(&dir.join(&entry.image))?;
        let mask = load_mask_png(&dir.join(&entry.mask))?;
        if img.height() != meta.height || img.width() != meta.width {
            return Err(data_err(
                &dir.join(&entry.image),
                format!(
                    "image is {}x{}, dataset declares {}x{}",
                    img.height(),
                    img.width(),
                    meta.height,
                    meta.width
                ),
            ));
        }
        if mask.height() != meta.height || mask.width() != meta.width {
            return Err(data_err(&dir.join(&entry.mask), "mask dims differ from dataset"));
        }
        mask.validate_classes(meta.classes)?;
        images.push(img);
        masks.push(mask);
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        meta,
        entries,
        images,
        masks,
    })
}

/// Write ids one per line.
pub fn write_id_list(path: &Path, ids: &[u64]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_id_list(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| data_err(path, format!("bad id line '{l}'")))
        })
        .collect()
}
