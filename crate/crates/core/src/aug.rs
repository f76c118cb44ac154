//! Weak augmentation, adaptive CutMix on unlabeled data (backed by a
//! presence dictionary built from pseudo labels), and adaptive Copy-Paste on
//! labeled data, all driven by the bank's category sampling probabilities.
//!
//! Every operation is a pure function of its inputs, a bank/dictionary
//! snapshot, and an RNG; identical seeds give bit-identical outputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::bank::ConfidenceBank;
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMask, ProbMap, CHANNELS, IGNORE};

/// Augmentation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Presence-dictionary ratio threshold: a category is "present" in an
    /// image when its pseudo-label pixel share exceeds this.
    pub r_star: f64,
    /// Number of categories sampled per Copy-Paste application.
    pub copy_paste_k: usize,
    /// Scale-jitter range for Copy-Paste sources.
    pub scale_jitter_min: f64,
    pub scale_jitter_max: f64,
    /// Side length of the CutMix window as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            r_star: 0.005,
            copy_paste_k: 3,
            scale_jitter_min: 0.5,
            scale_jitter_max: 2.0,
            crop_fraction: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r_star) {
            return Err(Error::Config(format!("aug.r_star {} outside (0, 1)", self.r_star)));
        }
        if self.copy_paste_k == 0 {
            return Err(Error::Config("aug.copy_paste_k must be positive".into()));
        }
        if self.scale_jitter_min <= 0.0 || self.scale_jitter_max < self.scale_jitter_min {
            return Err(Error::Config("invalid scale jitter range".into()));
        }
        if !(0.0..=1.0).contains(&self.crop_fraction) || self.crop_fraction == 0.0 {
            return Err(Error::Config(format!(
                "aug.crop_fraction {} outside (0, 1]",
                self.crop_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry helpers (nearest-neighbor everywhere so mask labels and image
// values survive transforms exactly).
// ---------------------------------------------------------------------------

fn resize_indices(src: usize, dst: usize) -> impl Iterator<Item = usize> {
    (0..dst).map(move |i| i * src / dst)
}

/// Nearest-neighbor resize of an image (floor index mapping).
pub fn resize_nearest_image(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let data = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * CHANNELS);
    for sy in resize_indices(h, out_h).collect::<Vec<_>>() {
        for sx in resize_indices(w, out_w) {
            let i = (sy * w + sx) * CHANNELS;
            out.extend_from_slice(&data[i..i + CHANNELS]);
        }
    }
    Image::from_valid_parts(out_h, out_w, out)
}

/// Nearest-neighbor resize of a mask.
pub fn resize_nearest_mask(mask: &LabelMask, out_h: usize, out_w: usize) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    LabelMask::from_fn(out_h, out_w, |y, x| mask.label(y * h / out_h, x * w / out_w))
}

pub fn hflip_image(img: &Image) -> Image {
    let w = img.width();
    Image::from_valid_parts(
        img.height(),
        w,
        {
            let mut out = Vec::with_capacity(img.data().len());
            for y in 0..img.height() {
                for x in 0..w {
                    out.extend_from_slice(&img.pixel(y, w - 1 - x));
                }
            }
            out
        },
    )
}

pub fn hflip_mask(mask: &LabelMask) -> LabelMask {
    let w = mask.width();
    LabelMask::from_fn(mask.height(), w, |y, x| mask.label(y, w - 1 - x))
}

/// Center-crop or center-pad to the target size. Images pad with black,
/// masks with IGNORE.
fn center_fit(
    img: &Image,
    mask: &LabelMask,
    target_h: usize,
    target_w: usize,
) -> (Image, LabelMask) {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; target_h * target_w * CHANNELS];
    let mut labels = vec![IGNORE; target_h * target_w];
    // Source/destination offsets per axis: crop offset when the source is
    // larger, pad offset when smaller.
    let (src_y, dst_y) = if h >= target_h { ((h - target_h) / 2, 0) } else { (0, (target_h - h) / 2) };
    let (src_x, dst_x) = if w >= target_w { ((w - target_w) / 2, 0) } else { (0, (target_w - w) / 2) };
    let copy_h = h.min(target_h);
    let copy_w = w.min(target_w);
    for y in 0..copy_h {
        for x in 0..copy_w {
            let s = ((src_y + y) * w + (src_x + x)) * CHANNELS;
            let d = ((dst_y + y) * target_w + (dst_x + x)) * CHANNELS;
            data[d..d + CHANNELS].copy_from_slice(&img.data()[s..s + CHANNELS]);
            labels[(dst_y + y) * target_w + (dst_x + x)] = mask.label(src_y + y, src_x + x);
        }
    }
    (
        Image::from_valid_parts(target_h, target_w, data),
        LabelMask::new(target_h, target_w, labels).expect("buffer sized to target"),
    )
}

// ---------------------------------------------------------------------------
// Weak augmentation
// ---------------------------------------------------------------------------

/// Scale range of the weak augmentation's random resize.
pub const WEAK_SCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// The random decisions of one weak augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub scale: f64,
    pub flip: bool,
}

/// Draw weak-augmentation parameters: scale first, then the flip coin.
pub fn draw_weak_params(rng: &mut impl Rng) -> WeakParams {
    WeakParams {
        scale: rng.random_range(WEAK_SCALE_RANGE.0..=WEAK_SCALE_RANGE.1),
        flip: rng.random_bool(0.5),
    }
}

/// Apply a random-resize + center-fit + horizontal-flip pipeline with fixed
/// parameters. The identical transform hits image and mask (nearest-neighbor
/// for both); the output keeps the input's size, padding the mask with
/// IGNORE where the shrunken content does not reach.
pub fn apply_weak(img: &Image, mask: &LabelMask, params: &WeakParams) -> Result<(Image, LabelMask)> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::DimMismatch("weak augmentation image vs mask".into()));
    }
    let (h, w) = (img.height(), img.width());
    let sh = ((h as f64 * params.scale).round() as usize).max(1);
    let sw = ((w as f64 * params.scale).round() as usize).max(1);
    let (mut out_img, mut out_mask) = if sh == h && sw == w {
        (img.clone(), mask.clone())
    } else {
        let scaled_img = resize_nearest_image(img, sh, sw);
        let scaled_mask = resize_nearest_mask(mask, sh, sw);
        center_fit(&scaled_img, &scaled_mask, h, w)
    };
    if params.flip {
        out_img = hflip_image(&out_img);
        out_mask = hflip_mask(&out_mask);
    }
    Ok((out_img, out_mask))
}

/// Weak augmentation with freshly drawn parameters.
pub fn weak_augment(img: &Image, mask: &LabelMask, rng: &mut impl Rng) -> Result<(Image, LabelMask)> {
    apply_weak(img, mask, &draw_weak_params(rng))
}

// ---------------------------------------------------------------------------
// Presence dictionary
// ---------------------------------------------------------------------------

/// Image id -> categories whose pseudo-label pixel share exceeds the ratio
/// threshold. Only unlabeled images seen at least once have entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceDictionary {
    entries: BTreeMap<u64, BTreeSet<u8>>,
    ratio_threshold: f64,
}

impl PresenceDictionary {
    pub fn new(ratio_threshold: f64) -> Self {
        Self {
            entries: BTreeMap::new(),
            ratio_threshold,
        }
    }

    pub fn ratio_threshold(&self) -> f64 {
        self.ratio_threshold
    }

    /// Replace the entry for `image_id` with the categories whose pixel
    /// count exceeds `r* * W * H` in the given pseudo mask. IGNORE pixels
    /// count toward the denominator but never form a category.
    pub fn update(&mut self, image_id: u64, pseudo: &LabelMask) {
        let total = (pseudo.height() * pseudo.width()) as f64;
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for &label in pseudo.labels() {
            if label != IGNORE {
                *counts.entry(label).or_insert(0) += 1;
            }
        }
        let present: BTreeSet<u8> = counts
            .into_iter()
            .filter(|&(_, n)| n as f64 / total > self.ratio_threshold)
            .map(|(c, _)| c)
            .collect();
        self.entries.insert(image_id, present);
    }

    pub fn contains(&self, image_id: u64, class: u8) -> bool {
        self.entries.get(&image_id).is_some_and(|s| s.contains(&class))
    }

    pub fn classes_of(&self, image_id: u64) -> Option<&BTreeSet<u8>> {
        self.entries.get(&image_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&u64, &BTreeSet<u8>)> {
        self.entries.iter()
    }

    /// Checkpoint plumbing.
    pub fn insert_entry(&mut self, image_id: u64, classes: BTreeSet<u8>) {
        self.entries.insert(image_id, classes);
    }
}

// ---------------------------------------------------------------------------
// CutMix
// ---------------------------------------------------------------------------

/// A rectangular window, fully inside its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PasteBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Where the cropped image of a CutMix composition came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutMixSource {
    /// Index into the current batch.
    Batch(usize),
    /// An unlabeled image outside the batch, found through the presence
    /// dictionary and materialized on demand.
    Pool(u64),
}

/// An unlabeled image materialized for CutMix: its weak view, the teacher's
/// pseudo mask on that view, and the teacher probabilities (carried so loss
/// re-weighting can be composed under the same box).
#[derive(Debug, Clone)]
pub struct SourceView {
    pub image: Image,
    pub mask: LabelMask,
    pub probs: ProbMap,
}

/// A composed CutMix sample plus the provenance needed to recheck it.
#[derive(Debug, Clone)]
pub struct CutMixOutput {
    pub image: Image,
    pub mask: LabelMask,
    /// Where the crop came from.
    pub source: CutMixSource,
    /// The materialized pool view when `source` is `Pool`.
    pub pool_view: Option<SourceView>,
    /// Index of the background image in the batch.
    pub target_index: usize,
    pub src_box: PasteBox,
    pub dst_box: PasteBox,
    /// The bank-sampled category, when the adaptive path ran.
    pub sampled_class: Option<u8>,
}

/// Overwrite `dst_box` of `dst` with `src_box` of `src` (same dimensions).
pub fn compose_box_image(dst: &Image, src: &Image, src_box: &PasteBox, dst_box: &PasteBox) -> Image {
    debug_assert_eq!((src_box.height, src_box.width), (dst_box.height, dst_box.width));
    let mut data = dst.data().to_vec();
    let w = dst.width();
    for y in 0..src_box.height {
        for x in 0..src_box.width {
            let s = ((src_box.top + y) * src.width() + (src_box.left + x)) * CHANNELS;
            let d = ((dst_box.top + y) * w + (dst_box.left + x)) * CHANNELS;
            data[d..d + CHANNELS].copy_from_slice(&src.data()[s..s + CHANNELS]);
        }
    }
    Image::from_valid_parts(dst.height(), dst.width(), data)
}

/// Mask counterpart of [`compose_box_image`].
pub fn compose_box_mask(dst: &LabelMask, src: &LabelMask, src_box: &PasteBox, dst_box: &PasteBox) -> LabelMask {
    let mut labels = dst.labels().to_vec();
    let w = dst.width();
    for y in 0..src_box.height {
        for x in 0..src_box.width {
            labels[(dst_box.top + y) * w + (dst_box.left + x)] =
                src.label(src_box.top + y, src_box.left + x);
        }
    }
    LabelMask::new(dst.height(), dst.width(), labels).expect("same dims as dst")
}

/// Probability-map counterpart, used to carry teacher probabilities through
/// the same composition as the pseudo masks.
pub fn compose_box_probs(dst: &ProbMap, src: &ProbMap, src_box: &PasteBox, dst_box: &PasteBox) -> ProbMap {
    let classes = dst.classes();
    let mut probs = dst.probs().to_vec();
    let w = dst.width();
    for y in 0..src_box.height {
        for x in 0..src_box.width {
            let s = ((src_box.top + y) * src.width() + (src_box.left + x)) * classes;
            let d = ((dst_box.top + y) * w + (dst_box.left + x)) * classes;
            probs[d..d + classes].copy_from_slice(&src.probs()[s..s + classes]);
        }
    }
    ProbMap::from_valid_parts(dst.height(), dst.width(), classes, probs)
}

fn check_uniform_batch(batch: &[(Image, LabelMask, u64)]) -> Result<(usize, usize)> {
    let (first, mask, _) = batch.first().ok_or(Error::EmptyBatch)?;
    let dims = (first.height(), first.width());
    for (img, m, _) in batch {
        if (img.height(), img.width()) != dims || (m.height(), m.width()) != dims {
            return Err(Error::DimMismatch("cutmix batch images must share dims".into()));
        }
    }
    let _ = mask;
    Ok(dims)
}

fn box_dims(h: usize, w: usize, crop_fraction: f64) -> (usize, usize) {
    let bh = ((h as f64 * crop_fraction).round() as usize).clamp(1, h);
    let bw = ((w as f64 * crop_fraction).round() as usize).clamp(1, w);
    (bh, bw)
}

fn window_around(center_y: usize, center_x: usize, bh: usize, bw: usize, h: usize, w: usize) -> PasteBox {
    let top = (center_y as isize - (bh / 2) as isize).clamp(0, (h - bh) as isize) as usize;
    let left = (center_x as isize - (bw / 2) as isize).clamp(0, (w - bw) as isize) as usize;
    PasteBox { top, left, height: bh, width: bw }
}

fn random_center(mask: &LabelMask, class: Option<u8>, rng: &mut impl Rng) -> (usize, usize) {
    if let Some(class) = class {
        let class_pixels: Vec<(usize, usize)> = (0..mask.height())
            .flat_map(|y| (0..mask.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.label(y, x) == class)
            .collect();
        if !class_pixels.is_empty() {
            return class_pixels[rng.random_range(0..class_pixels.len())];
        }
    }
    let idx = rng.random_range(0..mask.height() * mask.width());
    (idx / mask.width(), idx % mask.width())
}

#[allow(clippy::too_many_arguments)]
fn cutmix_compose(
    batch: &[(Image, LabelMask, u64)],
    source: CutMixSource,
    pool_view: Option<SourceView>,
    target_index: usize,
    center: (usize, usize),
    cfg: &AugConfig,
    rng: &mut impl Rng,
    sampled_class: Option<u8>,
) -> CutMixOutput {
    let (img_src, mask_src): (&Image, &LabelMask) = match (&source, &pool_view) {
        (CutMixSource::Batch(i), _) => (&batch[*i].0, &batch[*i].1),
        (CutMixSource::Pool(_), Some(view)) => (&view.image, &view.mask),
        (CutMixSource::Pool(_), None) => unreachable!("pool source carries its view"),
    };
    let (img_dst, mask_dst, _) = &batch[target_index];
    let (h, w) = (img_dst.height(), img_dst.width());
    let (bh, bw) = box_dims(h, w, cfg.crop_fraction);
    let src_box = window_around(center.0, center.1, bh, bw, h, w);
    let dst_box = PasteBox {
        top: rng.random_range(0..=h - bh),
        left: rng.random_range(0..=w - bw),
        height: bh,
        width: bw,
    };
    CutMixOutput {
        image: compose_box_image(img_dst, img_src, &src_box, &dst_box),
        mask: compose_box_mask(mask_dst, mask_src, &src_box, &dst_box),
        source,
        pool_view,
        target_index,
        src_box,
        dst_box,
        sampled_class,
    }
}

/// Category-guided CutMix. Samples a category from the bank, then picks the
/// crop source uniformly among all presence-dictionary entries containing
/// it: images in the current batch use their fresh views, other pool images
/// are materialized through `pool_lookup` (falling back to a uniform batch
/// member when no entry contains the category or the lookup declines). The
/// crop window centers on a random pixel of the category, lands at a uniform
/// location of a uniformly chosen batch target, and the pseudo masks are
/// composed with the identical box so image and target stay aligned.
pub fn adaptive_cutmix(
    batch: &[(Image, LabelMask, u64)],
    bank: &ConfidenceBank,
    dict: &PresenceDictionary,
    cfg: &AugConfig,
    rng: &mut impl Rng,
    mut pool_lookup: impl FnMut(u64) -> Result<Option<SourceView>>,
) -> Result<CutMixOutput> {
    let (h, w) = check_uniform_batch(batch)?;
    let class = bank.sampling_probabilities().sample(rng) as u8;
    let candidates: Vec<u64> = dict
        .entries()
        .filter(|(_, set)| set.contains(&class))
        .map(|(&id, _)| id)
        .collect();

    let (source, pool_view) = if candidates.is_empty() {
        (CutMixSource::Batch(rng.random_range(0..batch.len())), None)
    } else {
        let id = candidates[rng.random_range(0..candidates.len())];
        match batch.iter().position(|(_, _, bid)| *bid == id) {
            Some(i) => (CutMixSource::Batch(i), None),
            None => match pool_lookup(id)? {
                Some(view) => {
                    if view.image.height() != h || view.image.width() != w {
                        return Err(Error::DimMismatch("pool view dims differ from batch".into()));
                    }
                    (CutMixSource::Pool(id), Some(view))
                }
                None => (CutMixSource::Batch(rng.random_range(0..batch.len())), None),
            },
        }
    };

    let mask_src: &LabelMask = match (&source, &pool_view) {
        (CutMixSource::Batch(i), _) => &batch[*i].1,
        (_, Some(view)) => &view.mask,
        _ => unreachable!(),
    };
    let center = random_center(mask_src, Some(class), rng);
    let target_index = rng.random_range(0..batch.len());
    Ok(cutmix_compose(batch, source, pool_view, target_index, center, cfg, rng, Some(class)))
}

/// The baseline CutMix of the basic framework: source, target, and crop
/// center all uniform over the batch.
pub fn random_cutmix(
    batch: &[(Image, LabelMask, u64)],
    cfg: &AugConfig,
    rng: &mut impl Rng,
) -> Result<CutMixOutput> {
    check_uniform_batch(batch)?;
    let source_index = rng.random_range(0..batch.len());
    let target_index = rng.random_range(0..batch.len());
    let center = random_center(&batch[source_index].1, None, rng);
    Ok(cutmix_compose(
        batch,
        CutMixSource::Batch(source_index),
        None,
        target_index,
        center,
        cfg,
        rng,
        None,
    ))
}

// ---------------------------------------------------------------------------
// Copy-Paste
// ---------------------------------------------------------------------------

/// One applied category paste: enough to replay the transform exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PasteRecord {
    pub category: u8,
    pub scale: f64,
    pub offset_y: isize,
    pub offset_x: isize,
    pub jittered_height: usize,
    pub jittered_width: usize,
}

/// A composed Copy-Paste sample plus per-category provenance.
#[derive(Debug, Clone)]
pub struct CopyPasteOutput {
    pub image: Image,
    pub mask: LabelMask,
    /// Categories drawn from the bank, in draw order (absent ones included).
    pub sampled: Vec<u8>,
    /// The pastes actually applied, in application order.
    pub pastes: Vec<PasteRecord>,
}

/// Deterministic core of one category paste: scale-jitter the whole source
/// pair (nearest-neighbor), then overwrite destination pixels wherever the
/// jittered source mask equals `category`, translated by the given offset.
/// Pixels landing outside the destination are dropped.
pub fn apply_category_paste(
    dst_img: &Image,
    dst_mask: &LabelMask,
    src_img: &Image,
    src_mask: &LabelMask,
    record: &PasteRecord,
) -> (Image, LabelMask) {
    let jimg = resize_nearest_image(src_img, record.jittered_height, record.jittered_width);
    let jmask = resize_nearest_mask(src_mask, record.jittered_height, record.jittered_width);
    let (dh, dw) = (dst_img.height(), dst_img.width());
    let mut data = dst_img.data().to_vec();
    let mut labels = dst_mask.labels().to_vec();
    for jy in 0..record.jittered_height {
        for jx in 0..record.jittered_width {
            if jmask.label(jy, jx) != record.category {
                continue;
            }
            let ty = jy as isize + record.offset_y;
            let tx = jx as isize + record.offset_x;
            if ty < 0 || tx < 0 || ty >= dh as isize || tx >= dw as isize {
                continue;
            }
            let d = (ty as usize * dw + tx as usize) * CHANNELS;
            let s = (jy * record.jittered_width + jx) * CHANNELS;
            data[d..d + CHANNELS].copy_from_slice(&jimg.data()[s..s + CHANNELS]);
            labels[ty as usize * dw + tx as usize] = record.category;
        }
    }
    (
        Image::from_valid_parts(dh, dw, data),
        LabelMask::new(dh, dw, labels).expect("same dims as dst"),
    )
}

/// Uniform offset over the full-overlap placement range: a frame no larger
/// than the destination stays fully inside it, a larger frame always covers
/// it, so translation is "clamped in-bounds" in both regimes.
fn paste_offset(dst: usize, jittered: usize, rng: &mut impl Rng) -> isize {
    let delta = dst as i64 - jittered as i64;
    let (lo, hi) = (delta.min(0), delta.max(0));
    rng.random_range(lo..=hi) as isize
}

/// Category-guided Copy-Paste between two labeled samples. Samples `K`
/// categories without replacement from the bank; each one present in the
/// source mask is scale-jittered and pasted, absent ones are skipped rather
/// than re-drawn.
pub fn adaptive_copy_paste(
    src_img: &Image,
    src_mask: &LabelMask,
    dst_img: &Image,
    dst_mask: &LabelMask,
    bank: &ConfidenceBank,
    cfg: &AugConfig,
    rng: &mut impl Rng,
) -> Result<CopyPasteOutput> {
    if src_img.height() != src_mask.height()
        || src_img.width() != src_mask.width()
        || dst_img.height() != dst_mask.height()
        || dst_img.width() != dst_mask.width()
    {
        return Err(Error::DimMismatch("copy-paste image vs mask".into()));
    }
    let sampled: Vec<u8> = bank
        .sampling_probabilities()
        .sample_distinct(cfg.copy_paste_k, rng)
        .into_iter()
        .map(|c| c as u8)
        .collect();

    let mut out_img = dst_img.clone();
    let mut out_mask = dst_mask.clone();
    let mut pastes = Vec::new();
    for &category in &sampled {
        if !src_mask.labels().contains(&category) {
            continue; // absent in the source: skipped, no RNG consumed
        }
        let scale = rng.random_range(cfg.scale_jitter_min..=cfg.scale_jitter_max);
        let jittered_height = ((src_img.height() as f64 * scale).round() as usize).max(1);
        let jittered_width = ((src_img.width() as f64 * scale).round() as usize).max(1);
        let offset_y = paste_offset(out_img.height(), jittered_height, rng);
        let offset_x = paste_offset(out_img.width(), jittered_width, rng);
        let record = PasteRecord {
            category,
            scale,
            offset_y,
            offset_x,
            jittered_height,
            jittered_width,
        };
        let (img, mask) = apply_category_paste(&out_img, &out_mask, src_img, src_mask, &record);
        out_img = img;
        out_mask = mask;
        pastes.push(record);
    }
    Ok(CopyPasteOutput {
        image: out_img,
        mask: out_mask,
        sampled,
        pastes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::IndicatorKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_with(conf: &[f64]) -> ConfidenceBank {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, conf.len(), 0.999).unwrap();
        for (c, &v) in conf.iter().enumerate() {
            bank.set(c, v, true);
        }
        bank
    }

    fn checkerboard(h: usize, w: usize) -> (Image, LabelMask) {
        let img = Image::from_fn(h, w, |y, x| {
            let v = ((y * w + x) % 256) as f64 / 255.0;
            [v, 1.0 - v, 0.5]
        })
        .unwrap();
        let mask = LabelMask::from_fn(h, w, |y, x| ((y + x) % 3) as u8);
        (img, mask)
    }

    #[test]
    fn flip_is_an_involution() {
        let (img, mask) = checkerboard(16, 12);
        assert_eq!(hflip_image(&hflip_image(&img)), img);
        assert_eq!(hflip_mask(&hflip_mask(&mask)), mask);
    }

    #[test]
    fn identity_weak_params_are_identity() {
        let (img, mask) = checkerboard(16, 16);
        let (oi, om) = apply_weak(&img, &mask, &WeakParams { scale: 1.0, flip: false }).unwrap();
        assert_eq!(oi, img);
        assert_eq!(om, mask);
    }

    #[test]
    fn upscale_then_center_crop_bookkeeping() {
        // Scale 2.0 on 64x64: resize to 128x128, center-crop back to 64x64.
        // Output pixel (y, x) must equal source pixel ((y + 32) / 2, (x + 32) / 2).
        let (img, mask) = checkerboard(64, 64);
        let (oi, om) = apply_weak(&img, &mask, &WeakParams { scale: 2.0, flip: false }).unwrap();
        assert_eq!(oi.height(), 64);
        for y in 0..64 {
            for x in 0..64 {
                let sy = (y + 32) / 2;
                let sx = (x + 32) / 2;
                assert_eq!(oi.pixel(y, x), img.pixel(sy, sx), "image at ({y},{x})");
                assert_eq!(om.label(y, x), mask.label(sy, sx), "mask at ({y},{x})");
            }
        }
    }

    #[test]
    fn downscale_pads_mask_with_ignore() {
        let (img, mask) = checkerboard(32, 32);
        let (oi, om) = apply_weak(&img, &mask, &WeakParams { scale: 0.5, flip: false }).unwrap();
        assert_eq!((oi.height(), oi.width()), (32, 32));
        assert_eq!(om.label(0, 0), IGNORE, "padding carries IGNORE");
        assert_eq!(oi.pixel(0, 0), [0.0, 0.0, 0.0], "image pads black");
        // The 16x16 scaled content sits centered at offset 8.
        assert_ne!(om.label(15, 15), IGNORE);
    }

    #[test]
    fn weak_augment_is_seed_deterministic() {
        let (img, mask) = checkerboard(24, 24);
        let a = weak_augment(&img, &mask, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = weak_augment(&img, &mask, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn presence_threshold_straddles_ratio() {
        let mut dict = PresenceDictionary::new(0.005);
        // 64x64 = 4096 pixels; 25 of class 3 crosses 0.005, 20 does not.
        let present = LabelMask::from_fn(64, 64, |y, x| if y == 0 && x < 25 { 3 } else { 0 });
        dict.update(1, &present);
        assert!(dict.contains(1, 3), "25/4096 > 0.005");

        let absent = LabelMask::from_fn(64, 64, |y, x| if y == 0 && x < 20 { 3 } else { 0 });
        dict.update(2, &absent);
        assert!(!dict.contains(2, 3), "20/4096 < 0.005");
        assert!(dict.contains(2, 0));
    }

    #[test]
    fn presence_single_class_mask() {
        let mut dict = PresenceDictionary::new(0.005);
        dict.update(9, &LabelMask::filled(16, 16, 4));
        assert_eq!(dict.classes_of(9).unwrap().iter().copied().collect::<Vec<_>>(), vec![4]);
    }

    #[test]
    fn presence_update_is_idempotent() {
        let mut dict = PresenceDictionary::new(0.01);
        let mask = LabelMask::from_fn(16, 16, |y, _| (y % 4) as u8);
        dict.update(5, &mask);
        let first = dict.classes_of(5).unwrap().clone();
        dict.update(5, &mask);
        assert_eq!(dict.classes_of(5).unwrap(), &first);
    }

    fn cutmix_batch(n: usize) -> Vec<(Image, LabelMask, u64)> {
        (0..n)
            .map(|i| {
                let shade = i as f64 / n as f64;
                let img = Image::from_fn(16, 16, |y, x| {
                    [shade, y as f64 / 16.0, x as f64 / 16.0]
                })
                .unwrap();
                let mask = LabelMask::filled(16, 16, i as u8);
                (img, mask, i as u64)
            })
            .collect()
    }

    fn no_pool(_: u64) -> crate::error::Result<Option<SourceView>> {
        Ok(None)
    }

    fn batch_index(source: &CutMixSource) -> usize {
        match source {
            CutMixSource::Batch(i) => *i,
            CutMixSource::Pool(id) => panic!("unexpected pool source {id}"),
        }
    }

    #[test]
    fn cutmix_full_box_copies_the_source() {
        let batch = cutmix_batch(3);
        let cfg = AugConfig { crop_fraction: 1.0, ..AugConfig::default() };
        let out = random_cutmix(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let src = batch_index(&out.source);
        assert_eq!(out.image, batch[src].0);
        assert_eq!(out.mask, batch[src].1);
    }

    #[test]
    fn cutmix_partitions_pixels_bit_exactly() {
        let batch = cutmix_batch(4);
        let mut dict = PresenceDictionary::new(0.005);
        for (_, mask, id) in &batch {
            dict.update(*id, mask);
        }
        let bank = bank_with(&[0.9, 0.5, 0.7, 0.3]);
        let cfg = AugConfig::default();
        for seed in 0..50 {
            let out =
                adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), no_pool)
                    .unwrap();
            let src = &batch[batch_index(&out.source)];
            let dst = &batch[out.target_index];
            for y in 0..16 {
                for x in 0..16 {
                    let inside = y >= out.dst_box.top
                        && y < out.dst_box.top + out.dst_box.height
                        && x >= out.dst_box.left
                        && x < out.dst_box.left + out.dst_box.width;
                    if inside {
                        let sy = out.src_box.top + (y - out.dst_box.top);
                        let sx = out.src_box.left + (x - out.dst_box.left);
                        assert_eq!(out.image.pixel(y, x), src.0.pixel(sy, sx));
                        assert_eq!(out.mask.label(y, x), src.1.label(sy, sx));
                    } else {
                        assert_eq!(out.image.pixel(y, x), dst.0.pixel(y, x));
                        assert_eq!(out.mask.label(y, x), dst.1.label(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn cutmix_falls_back_to_uniform_source_when_class_absent() {
        let batch = cutmix_batch(3); // classes 0..2 present
        let mut dict = PresenceDictionary::new(0.005);
        for (_, mask, id) in &batch {
            dict.update(*id, mask);
        }
        // Conf pins badness so category 3 (absent everywhere) dominates draws.
        let bank = bank_with(&[1.0, 1.0, 1.0, 0.0]);
        let cfg = AugConfig::default();
        let mut seen = [false; 3];
        for seed in 0..200 {
            let out =
                adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), no_pool)
                    .unwrap();
            if out.sampled_class == Some(3) {
                seen[batch_index(&out.source)] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "fallback source must range over the whole batch");
    }

    #[test]
    fn cutmix_source_contains_sampled_class() {
        let batch = cutmix_batch(4);
        let mut dict = PresenceDictionary::new(0.005);
        for (_, mask, id) in &batch {
            dict.update(*id, mask);
        }
        let bank = bank_with(&[0.9, 0.9, 0.1, 0.9]);
        let cfg = AugConfig::default();
        for seed in 0..100 {
            let out =
                adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), no_pool)
                    .unwrap();
            let class = out.sampled_class.unwrap();
            // Every batch mask is single-class here, so the dictionary-backed
            // source must be the image of that class.
            assert_eq!(batch_index(&out.source), class as usize);
        }
    }

    #[test]
    fn cutmix_materializes_pool_sources_through_the_dictionary() {
        let batch = cutmix_batch(2); // ids 0, 1 with classes 0, 1
        let mut dict = PresenceDictionary::new(0.005);
        for (_, mask, id) in &batch {
            dict.update(*id, mask);
        }
        // Pool image 50 is the only one containing class 3.
        let pool_img = Image::filled(16, 16, [0.11, 0.22, 0.33]).unwrap();
        let pool_mask = LabelMask::filled(16, 16, 3);
        dict.update(50, &pool_mask);
        let bank = bank_with(&[1.0, 1.0, 1.0, 0.0]); // class 3 dominates draws
        let cfg = AugConfig::default();
        let mut pool_hits = 0;
        for seed in 0..100 {
            let out = adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), |id| {
                assert_eq!(id, 50);
                Ok(Some(SourceView {
                    image: pool_img.clone(),
                    mask: pool_mask.clone(),
                    probs: ProbMap::from_fn(16, 16, 4, |_, _| vec![0.25; 4]).unwrap(),
                }))
            })
            .unwrap();
            if out.sampled_class == Some(3) {
                assert_eq!(out.source, CutMixSource::Pool(50));
                pool_hits += 1;
                // The pasted box carries the pool view's content.
                let y = out.dst_box.top;
                let x = out.dst_box.left;
                assert_eq!(out.image.pixel(y, x), [0.11, 0.22, 0.33]);
                assert_eq!(out.mask.label(y, x), 3);
            }
        }
        assert!(pool_hits > 50, "class 3 should dominate draws, got {pool_hits}");
    }

    #[test]
    fn cutmix_declined_lookup_falls_back_to_batch() {
        let batch = cutmix_batch(2);
        let mut dict = PresenceDictionary::new(0.005);
        dict.update(99, &LabelMask::filled(16, 16, 3)); // only class-3 entry, not in batch
        let bank = bank_with(&[1.0, 1.0, 1.0, 0.0]);
        let out = adaptive_cutmix(
            &batch,
            &bank,
            &dict,
            &AugConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(3),
            no_pool,
        )
        .unwrap();
        assert!(matches!(out.source, CutMixSource::Batch(_)));
    }

    #[test]
    fn cutmix_empty_batch_errors() {
        let bank = bank_with(&[0.5]);
        let dict = PresenceDictionary::new(0.005);
        let err = adaptive_cutmix(
            &[],
            &bank,
            &dict,
            &AugConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
            no_pool,
        );
        assert!(matches!(err, Err(Error::EmptyBatch)));
    }

    #[test]
    fn cutmix_is_seed_deterministic() {
        let batch = cutmix_batch(4);
        let mut dict = PresenceDictionary::new(0.005);
        for (_, mask, id) in &batch {
            dict.update(*id, mask);
        }
        let bank = bank_with(&[0.9, 0.5, 0.7, 0.3]);
        let cfg = AugConfig::default();
        let a = adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(123), no_pool)
            .unwrap();
        let b = adaptive_cutmix(&batch, &bank, &dict, &cfg, &mut ChaCha8Rng::seed_from_u64(123), no_pool)
            .unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!((a.src_box, a.dst_box), (b.src_box, b.dst_box));
    }

    #[test]
    fn copy_paste_block_lands_exactly() {
        // A 10x10 block of class 1, jitter 1.0, offset (0, 0): exactly those
        // 100 destination pixels change and carry the category.
        let (dst_img, _) = checkerboard(32, 32);
        let dst_mask = LabelMask::filled(32, 32, 0);
        let src_img = Image::filled(32, 32, [0.25, 0.5, 0.75]).unwrap();
        let src_mask = LabelMask::from_fn(32, 32, |y, x| {
            if (4..14).contains(&y) && (6..16).contains(&x) { 1 } else { 0 }
        });
        let record = PasteRecord {
            category: 1,
            scale: 1.0,
            offset_y: 0,
            offset_x: 0,
            jittered_height: 32,
            jittered_width: 32,
        };
        let (img, mask) = apply_category_paste(&dst_img, &dst_mask, &src_img, &src_mask, &record);
        let mut replaced = 0;
        for y in 0..32 {
            for x in 0..32 {
                if (4..14).contains(&y) && (6..16).contains(&x) {
                    assert_eq!(mask.label(y, x), 1);
                    assert_eq!(img.pixel(y, x), [0.25, 0.5, 0.75]);
                    replaced += 1;
                } else {
                    assert_eq!(mask.label(y, x), 0);
                    assert_eq!(img.pixel(y, x), dst_img.pixel(y, x));
                }
            }
        }
        assert_eq!(replaced, 100);
    }

    #[test]
    fn copy_paste_vacuous_when_categories_absent() {
        let (dst_img, dst_mask) = checkerboard(16, 16);
        let src_img = Image::filled(16, 16, [0.1, 0.2, 0.3]).unwrap();
        let src_mask = LabelMask::filled(16, 16, 5); // only class 5 present
        let bank = bank_with(&[0.2, 0.3, 0.4]); // classes 0..2 sampled
        let cfg = AugConfig { copy_paste_k: 3, ..AugConfig::default() };
        let out = adaptive_copy_paste(
            &src_img, &src_mask, &dst_img, &dst_mask, &bank, &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.image, dst_img);
        assert_eq!(out.mask, dst_mask);
        assert!(out.pastes.is_empty());
        assert_eq!(out.sampled.len(), 3);
    }

    #[test]
    fn copy_paste_count_matches_in_bounds_source_pixels() {
        let (dst_img, _) = checkerboard(16, 16);
        // Class 1 never occurs in the source, so pasted categories (0 or 2)
        // are countable against a clean background.
        let dst_mask = LabelMask::filled(16, 16, 1);
        let src_img = Image::filled(16, 16, [0.9, 0.1, 0.4]).unwrap();
        let src_mask = LabelMask::from_fn(16, 16, |y, x| if y < 4 && x < 4 { 2 } else { 0 });
        let bank = bank_with(&[1.0, 1.0, 0.0]); // category 2 dominates
        let cfg = AugConfig { copy_paste_k: 1, ..AugConfig::default() };
        for seed in 0..50 {
            let out = adaptive_copy_paste(
                &src_img, &src_mask, &dst_img, &dst_mask, &bank, &cfg,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let Some(rec) = out.pastes.first() else { continue };
            let jmask = resize_nearest_mask(&src_mask, rec.jittered_height, rec.jittered_width);
            let mut expected = 0usize;
            for jy in 0..rec.jittered_height {
                for jx in 0..rec.jittered_width {
                    if jmask.label(jy, jx) != rec.category {
                        continue;
                    }
                    let ty = jy as isize + rec.offset_y;
                    let tx = jx as isize + rec.offset_x;
                    if ty >= 0 && tx >= 0 && ty < 16 && tx < 16 {
                        expected += 1;
                    }
                }
            }
            let pasted = out.mask.labels().iter().filter(|&&l| l == rec.category).count();
            assert_eq!(pasted, expected, "seed {seed}");
        }
    }

    #[test]
    fn copy_paste_is_seed_deterministic() {
        let (dst_img, dst_mask) = checkerboard(16, 16);
        let (src_img, src_mask) = checkerboard(16, 16);
        let bank = bank_with(&[0.9, 0.4, 0.6]);
        let cfg = AugConfig::default();
        let a = adaptive_copy_paste(&src_img, &src_mask, &dst_img, &dst_mask, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let b = adaptive_copy_paste(&src_img, &src_mask, &dst_img, &dst_mask, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.pastes, b.pastes);
    }

    #[test]
    fn category_draw_frequency_follows_badness_softmax() {
        // Conf = (0.9, 0.9, 0.2) -> softmax(0.1, 0.1, 0.8).
        let bank = bank_with(&[0.9, 0.9, 0.2]);
        let r = bank.sampling_probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[r.sample(&mut rng)] += 1;
        }
        for c in 0..3 {
            let p = r.values()[c];
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let expected = n as f64 * p;
            assert!(
                (counts[c] as f64 - expected).abs() <= 3.0 * sigma,
                "class {c}: {} draws vs expected {expected:.0} +/- {:.0}",
                counts[c],
                3.0 * sigma
            );
        }
    }
}
