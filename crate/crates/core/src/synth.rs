//! Procedural long-tailed synthetic segmentation benchmark, plus the
//! labeled/unlabeled partition protocols.
//!
//! Scenes are rectangles and ellipses painted over a background, with shape
//! classes drawn from a power-law so head classes dominate pixel counts the
//! way they do in street-scene datasets. Each class keeps a fixed base color
//! (hues spread around the wheel) with Gaussian noise, so tail classes stay
//! learnable from few examples and the equalization tilt is measurable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMask, CHANNELS};

/// Scene generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Power-law exponent of the class draw, `p(c) ~ (c + 1)^-a`; 0 is uniform.
    pub tail_exponent: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub color_noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            height: 64,
            width: 64,
            tail_exponent: 1.5,
            shapes_min: 3,
            shapes_max: 6,
            color_noise_sigma: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "class count {} outside 2..=255",
                self.classes
            )));
        }
        if self.height < crate::grid::MIN_IMAGE_SIDE || self.width < crate::grid::MIN_IMAGE_SIDE {
            return Err(Error::Config("scene size below minimum image side".into()));
        }
        if self.tail_exponent < 0.0 {
            return Err(Error::Config("tail exponent must be >= 0".into()));
        }
        if self.shapes_min == 0 || self.shapes_max < self.shapes_min {
            return Err(Error::Config("invalid shapes-per-scene range".into()));
        }
        if self.color_noise_sigma < 0.0 {
            return Err(Error::Config("color noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fixed base color of a class: hues spread evenly around the wheel.
pub fn class_color(class: usize, classes: usize) -> [f64; 3] {
    let hue = class as f64 / classes as f64; // in [0, 1)
    hsv_to_rgb(hue, 0.8, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Unnormalized class-draw weights `(c + 1)^-a`.
pub fn class_draw_weights(cfg: &SceneConfig) -> Vec<f64> {
    (0..cfg.classes)
        .map(|c| ((c + 1) as f64).powf(-cfg.tail_exponent))
        .collect()
}

/// Draw one shape class from the power-law distribution.
pub fn sample_shape_class(cfg: &SceneConfig, rng: &mut impl Rng) -> usize {
    let weights = class_draw_weights(cfg);
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return c;
        }
    }
    cfg.classes - 1
}

/// Generate one scene. Identical `(cfg, seed)` pairs produce bit-identical
/// scenes; pixel values are quantized to the 8-bit lattice so the PNG
/// round-trip is exact.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> (Image, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u8; h * w];

    let shape_count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..shape_count {
        let class = sample_shape_class(cfg, &mut rng) as u8;
        let is_ellipse = rng.random_bool(0.5);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let half_h = rng.random_range(h.max(10) / 10..=h / 3).max(1);
        let half_w = rng.random_range(w.max(10) / 10..=w / 3).max(1);
        let y0 = cy.saturating_sub(half_h);
        let y1 = (cy + half_h).min(h - 1);
        let x0 = cx.saturating_sub(half_w);
        let x1 = (cx + half_w).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if is_ellipse {
                    let dy = (y as f64 - cy as f64) / half_h as f64;
                    let dx = (x as f64 - cx as f64) / half_w as f64;
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                labels[y * w + x] = class;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.color_noise_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma validated non-negative");
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for &label in &labels {
        let base = class_color(label as usize, cfg.classes);
        for &b in &base {
            let v: f64 = if cfg.color_noise_sigma > 0.0 {
                b + noise.sample(&mut rng)
            } else {
                b
            };
            // Quantize onto the 8-bit lattice for an exact PNG round-trip.
            let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data.push(q);
        }
    }

    (
        Image::new(h, w, data).expect("generated values are clamped"),
        LabelMask::new(h, w, labels).expect("buffer sized to scene"),
    )
}

/// Labeled fraction of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Half,
    Quarter,
    Eighth,
    Sixteenth,
    ThirtySecond,
}

impl Protocol {
    pub fn denominator(&self) -> usize {
        match self {
            Self::Half => 2,
            Self::Quarter => 4,
            Self::Eighth => 8,
            Self::Sixteenth => 16,
            Self::ThirtySecond => 32,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1/2" => Ok(Self::Half),
            "1/4" => Ok(Self::Quarter),
            "1/8" => Ok(Self::Eighth),
            "1/16" => Ok(Self::Sixteenth),
            "1/32" => Ok(Self::ThirtySecond),
            other => Err(Error::Config(format!(
                "unknown partition protocol '{other}' (expected 1/2|1/4|1/8|1/16|1/32)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Half => "1/2",
            Self::Quarter => "1/4",
            Self::Eighth => "1/8",
            Self::Sixteenth => "1/16",
            Self::ThirtySecond => "1/32",
        }
    }
}

/// A labeled/unlabeled split of dataset ids `0..size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub protocol: Protocol,
    pub fold: usize,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

/// Number of data folds per protocol.
pub const FOLDS: usize = 5;

/// Split `0..dataset_size` into labeled/unlabeled ids. The shuffle depends
/// only on the seed; fold `f` takes the `f`-th block of the shuffled order
/// (wrapping when the protocol is too large for disjoint blocks), so folds
/// of the 1/8 protocol and smaller are pairwise disjoint.
pub fn make_partition(dataset_size: usize, protocol: Protocol, fold: usize, seed: u64) -> Result<Partition> {
    let denominator = protocol.denominator();
    if denominator > dataset_size {
        return Err(Error::PartitionTooSmall { denominator, size: dataset_size });
    }
    if fold >= FOLDS {
        return Err(Error::Config(format!("fold {fold} outside 0..{FOLDS}")));
    }
    let labeled_count = (dataset_size as f64 / denominator as f64).round() as usize;

    let mut ids: Vec<u64> = (0..dataset_size as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rngutil::derive_seed(&[
        seed,
        crate::rngutil::StreamKind::Partition as u64,
    ]));
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }

    let start = fold * labeled_count;
    let mut labeled: Vec<u64> = (0..labeled_count)
        .map(|j| ids[(start + j) % dataset_size])
        .collect();
    labeled.sort_unstable();
    let mut unlabeled: Vec<u64> = (0..dataset_size as u64)
        .filter(|id| labeled.binary_search(id).is_err())
        .collect();
    unlabeled.sort_unstable();
    Ok(Partition {
        protocol,
        fold,
        labeled,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let (i1, m1) = generate_scene(&cfg, 42);
        let (i2, m2) = generate_scene(&cfg, 42);
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
        let (i3, _) = generate_scene(&cfg, 43);
        assert_ne!(i1, i3);
    }

    #[test]
    fn masks_stay_in_class_range_without_ignore() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let (_, mask) = generate_scene(&cfg, seed);
            assert!(mask.labels().iter().all(|&l| (l as usize) < cfg.classes));
        }
    }

    #[test]
    fn zero_exponent_draws_uniformly() {
        // Chi-squared test over 10k class draws; critical value for
        // df = 5 at p = 0.001 is 20.515.
        let cfg = SceneConfig {
            tail_exponent: 0.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut counts = vec![0f64; cfg.classes];
        for _ in 0..n {
            counts[sample_shape_class(&cfg, &mut rng)] += 1.0;
        }
        let expected = n as f64 / cfg.classes as f64;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 20.515, "chi-squared {chi2} rejects uniformity");
    }

    #[test]
    fn pixel_shares_are_long_tailed() {
        let cfg = SceneConfig::default();
        let mut shares = vec![0u64; cfg.classes];
        for seed in 0..1000 {
            let (_, mask) = generate_scene(&cfg, seed);
            for &l in mask.labels() {
                shares[l as usize] += 1;
            }
        }
        for c in 1..cfg.classes {
            assert!(
                shares[c] < shares[c - 1],
                "pixel share must strictly decrease: class {c} has {} vs {}",
                shares[c],
                shares[c - 1]
            );
        }
        assert!(
            (shares[5] as f64) < shares[1] as f64 / 3.0,
            "class 5 share {} should be well under a third of class 1's {}",
            shares[5],
            shares[1]
        );
    }

    #[test]
    fn class_colors_are_distinct() {
        let classes = 6;
        for a in 0..classes {
            for b in (a + 1)..classes {
                let ca = class_color(a, classes);
                let cb = class_color(b, classes);
                let d2: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d2 > 0.1, "colors of classes {a} and {b} too close");
            }
        }
    }

    #[test]
    fn partition_sizes_match_protocol() {
        let p = make_partition(320, Protocol::ThirtySecond, 0, 0).unwrap();
        assert_eq!(p.labeled.len(), 10);
        assert_eq!(p.unlabeled.len(), 310);
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        let p = make_partition(100, Protocol::Quarter, 2, 9).unwrap();
        let labeled: HashSet<u64> = p.labeled.iter().copied().collect();
        let unlabeled: HashSet<u64> = p.unlabeled.iter().copied().collect();
        assert!(labeled.is_disjoint(&unlabeled));
        assert_eq!(labeled.len() + unlabeled.len(), 100);
    }

    #[test]
    fn folds_differ_and_small_protocols_are_disjoint() {
        let a = make_partition(320, Protocol::Eighth, 0, 5).unwrap();
        let b = make_partition(320, Protocol::Eighth, 1, 5).unwrap();
        assert_ne!(a.labeled, b.labeled);

        let sets: Vec<HashSet<u64>> = (0..FOLDS)
            .map(|f| {
                make_partition(320, Protocol::Eighth, f, 5)
                    .unwrap()
                    .labeled
                    .into_iter()
                    .collect()
            })
            .collect();
        for i in 0..FOLDS {
            for j in (i + 1)..FOLDS {
                assert!(
                    sets[i].is_disjoint(&sets[j]),
                    "folds {i} and {j} overlap under 1/8"
                );
            }
        }
    }

    #[test]
    fn partition_rejects_undersized_datasets() {
        let err = make_partition(10, Protocol::Sixteenth, 0, 0).unwrap_err();
        assert!(err.to_string().contains("exceeds dataset size"));
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let a = make_partition(64, Protocol::Eighth, 3, 11).unwrap();
        let b = make_partition(64, Protocol::Eighth, 3, 11).unwrap();
        assert_eq!(a, b);
    }
}
