//! Grid-shaped value types shared by every stage of the pipeline, plus the
//! elementary per-pixel operations built on them.
//!
//! All types are immutable values after construction; the operations here are
//! pure functions and safe to evaluate from multiple workers concurrently.

use crate::error::{Error, Result};

/// Sentinel mask value excluded from all losses, metrics and bank statistics.
/// Matches the 8-bit PNG serialization of masks, where 255 is reserved.
pub const IGNORE: u8 = 255;

/// Number of image channels (RGB).
pub const CHANNELS: usize = 3;

/// Minimum training image side length.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Probabilities are clamped to at least this value before taking logs, so a
/// confident-wrong pseudo label yields a large finite loss instead of -inf.
pub const PROB_CLAMP: f64 = 1e-12;

/// An RGB image with per-channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>, // row-major, (y * width + x) * 3 + channel
}

impl Image {
    /// Build an image from a flat `height * width * 3` buffer.
    ///
    /// Values must be finite and in `[0, 1]`; both sides must be at least
    /// [`MIN_IMAGE_SIDE`] pixels.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidValue(format!(
                "image dimensions {height}x{width} below minimum {MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::DimMismatch(format!(
                "image buffer length {} != {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue(
                "image values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { height, width, data })
    }

    /// Internal constructor for augmentation outputs whose values are copied
    /// from already-validated images.
    pub(crate) fn from_valid_parts(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel category ids with an [`IGNORE`] sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "mask buffer length {} != {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Every non-IGNORE label must be below `classes`.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(&bad) => Err(Error::InvalidValue(format!(
                "mask label {bad} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Number of non-IGNORE pixels.
    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Per-pixel class probability distributions over an `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>, // (y * width + x) * classes + c
}

/// Tolerance for the per-pixel sum-to-one invariant.
pub const PROB_SUM_TOL: f64 = 1e-6;

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes {
            return Err(Error::DimMismatch(format!(
                "probability buffer length {} != {height}x{width}x{classes}",
                probs.len()
            )));
        }
        for pixel in probs.chunks_exact(classes) {
            if pixel.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidValue("probabilities must be finite and >= 0".into()));
            }
            let sum: f64 = pixel.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidValue(format!(
                    "pixel probabilities sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { height, width, classes, probs })
    }

    pub(crate) fn from_valid_parts(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width * classes);
        Self { height, width, classes, probs }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        classes: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(height * width * classes);
        for y in 0..height {
            for x in 0..width {
                let p = f(y, x);
                if p.len() != classes {
                    return Err(Error::DimMismatch(format!(
                        "pixel vector length {} != {classes}",
                        p.len()
                    )));
                }
                probs.extend_from_slice(&p);
            }
        }
        Self::new(height, width, classes, probs)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The length-`classes` probability vector of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.probs[i..i + self.classes]
    }

    pub fn prob(&self, y: usize, x: usize, class: usize) -> f64 {
        self.probs[(y * self.width + x) * self.classes + class]
    }

    pub fn max_prob(&self, y: usize, x: usize) -> f64 {
        self.pixel(y, x).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Unbounded pre-softmax model output.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    logits: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != height * width * classes {
            return Err(Error::DimMismatch(format!(
                "logit buffer length {} != {height}x{width}x{classes}",
                logits.len()
            )));
        }
        Ok(Self { height, width, classes, logits })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut logits = Vec::with_capacity(height * width * classes);
        for y in 0..height {
            for x in 0..width {
                for c in 0..classes {
                    logits.push(f(y, x, c));
                }
            }
        }
        Self { height, width, classes, logits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.logits[i..i + self.classes]
    }
}

/// Per-pixel cross-entropy values plus the inclusion flags separating scored
/// pixels from IGNORE ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
    included: Vec<bool>,
}

impl LossGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn included(&self, y: usize, x: usize) -> bool {
        self.included[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn included_flags(&self) -> &[bool] {
        &self.included
    }

    pub fn included_count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }
}

/// Numerically stabilized per-pixel softmax.
///
/// Errors with "non-finite logits" if any input value is NaN or infinite.
pub fn softmax(logits: &LogitMap) -> Result<ProbMap> {
    let classes = logits.classes;
    let mut probs = Vec::with_capacity(logits.logits.len());
    for pixel in logits.logits.chunks_exact(classes) {
        if pixel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let max = pixel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let start = probs.len();
        for &v in pixel {
            let e = (v - max).exp();
            probs.push(e);
            sum += e;
        }
        for p in &mut probs[start..] {
            *p /= sum;
        }
    }
    Ok(ProbMap::from_valid_parts(logits.height, logits.width, classes, probs))
}

/// Harden probabilities into a label mask; ties break to the lowest class id
/// so runs are reproducible.
pub fn argmax_mask(probs: &ProbMap) -> LabelMask {
    let classes = probs.classes;
    let labels = probs
        .probs
        .chunks_exact(classes)
        .map(|pixel| {
            let mut best = 0usize;
            for (c, &p) in pixel.iter().enumerate().skip(1) {
                if p > pixel[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        height: probs.height,
        width: probs.width,
        labels,
    }
}

/// Per-pixel cross-entropy `-ln p[target]` against a label mask.
///
/// IGNORE pixels yield 0 and are flagged excluded. The true-class probability
/// is clamped to [`PROB_CLAMP`] before the log.
pub fn cross_entropy(probs: &ProbMap, targets: &LabelMask) -> Result<LossGrid> {
    if probs.height != targets.height || probs.width != targets.width {
        return Err(Error::DimMismatch(format!(
            "probabilities {}x{} vs mask {}x{}",
            probs.height, probs.width, targets.height, targets.width
        )));
    }
    targets.validate_classes(probs.classes)?;
    let n = probs.height * probs.width;
    let mut values = Vec::with_capacity(n);
    let mut included = Vec::with_capacity(n);
    for (pixel, &label) in probs.probs.chunks_exact(probs.classes).zip(&targets.labels) {
        if label == IGNORE {
            values.push(0.0);
            included.push(false);
        } else {
            let p = pixel[label as usize].max(PROB_CLAMP);
            values.push(-p.ln());
            included.push(true);
        }
    }
    Ok(LossGrid {
        height: probs.height,
        width: probs.width,
        values,
        included,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_probmap(h: usize, w: usize, c: usize) -> ProbMap {
        ProbMap::from_fn(h, w, c, |_, _| vec![1.0 / c as f64; c]).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let logits = LogitMap::from_fn(2, 2, 3, |_, _, _| 0.0);
        let p = softmax(&logits).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert!((p.prob(y, x, c) - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let logits = LogitMap::new(8, 8, 2, {
            let mut v = Vec::new();
            for _ in 0..64 {
                v.push(1000.0);
                v.push(0.0);
            }
            v
        })
        .unwrap();
        let p = softmax(&logits).unwrap();
        assert!((p.prob(0, 0, 0) - 1.0).abs() < 1e-15);
        assert!(p.prob(0, 0, 1) >= 0.0 && p.prob(0, 0, 1) < 1e-300);
    }

    #[test]
    fn softmax_matches_exp_normalize() {
        let logits = LogitMap::from_fn(1, 1, 2, |_, _, c| if c == 0 { 2.0_f64.ln() } else { 0.0 });
        let p = softmax(&logits).unwrap();
        assert!((p.prob(0, 0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.prob(0, 0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let logits = LogitMap::new(1, 1, 2, vec![f64::NAN, 0.0]).unwrap();
        let err = softmax(&logits).unwrap_err();
        assert_eq!(err.to_string(), "non-finite logits");
    }

    #[test]
    fn argmax_picks_max_and_breaks_ties_low() {
        let p = ProbMap::new(1, 2, 3, vec![0.2, 0.7, 0.1, 0.5, 0.5, 0.0]).unwrap();
        let m = argmax_mask(&p);
        assert_eq!(m.label(0, 0), 1);
        assert_eq!(m.label(0, 1), 0, "ties must break to the lowest class id");
    }

    #[test]
    fn argmax_of_uniform_map_is_all_zero() {
        let m = argmax_mask(&uniform_probmap(3, 3, 4));
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn cross_entropy_zero_for_matching_one_hot() {
        let p = ProbMap::from_fn(2, 2, 3, |_, _| vec![0.0, 1.0, 0.0]).unwrap();
        let y = LabelMask::filled(2, 2, 1);
        let ce = cross_entropy(&p, &y).unwrap();
        assert!(ce.values().iter().all(|&v| v == 0.0));
        assert_eq!(ce.included_count(), 4);
    }

    #[test]
    fn cross_entropy_half_prob_is_ln_two() {
        let p = ProbMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let y = LabelMask::filled(1, 1, 0);
        let ce = cross_entropy(&p, &y).unwrap();
        assert!((ce.value(0, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_ignore_pixels() {
        let p = uniform_probmap(2, 2, 3);
        let y = LabelMask::filled(2, 2, IGNORE);
        let ce = cross_entropy(&p, &y).unwrap();
        assert!(ce.values().iter().all(|&v| v == 0.0));
        assert_eq!(ce.included_count(), 0);
    }

    #[test]
    fn cross_entropy_rejects_mismatched_dims() {
        let p = uniform_probmap(2, 2, 3);
        let y = LabelMask::filled(2, 3, 0);
        assert!(cross_entropy(&p, &y).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = ProbMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let y = LabelMask::filled(1, 1, 1);
        let ce = cross_entropy(&p, &y).unwrap();
        assert!((ce.value(0, 0) - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(8, 8, vec![1.5; 8 * 8 * 3]).is_err());
        assert!(Image::new(8, 8, vec![f64::NAN; 8 * 8 * 3]).is_err());
        assert!(Image::new(4, 8, vec![0.0; 4 * 8 * 3]).is_err(), "sides below 8 rejected");
    }

    #[test]
    fn mask_class_validation() {
        let m = LabelMask::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        assert!(m.validate_classes(3).is_ok());
        assert!(m.validate_classes(2).is_err());
        assert_eq!(m.valid_count(), 3);
    }

    proptest! {
        // >= 1000 random pixels: 40 cases x 25 pixels + the explicit loop below.
        #[test]
        fn softmax_sums_to_one(raw in proptest::collection::vec(-50.0f64..50.0, 25 * 3)) {
            let logits = LogitMap::new(5, 5, 3, raw).unwrap();
            let p = softmax(&logits).unwrap();
            for y in 0..5 {
                for x in 0..5 {
                    let sum: f64 = p.pixel(y, x).iter().sum();
                    prop_assert!((sum - 1.0).abs() < PROB_SUM_TOL);
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(raw in proptest::collection::vec(-30.0f64..30.0, 4), shift in -100.0f64..100.0) {
            let a = LogitMap::new(1, 1, 4, raw.clone()).unwrap();
            let b = LogitMap::new(1, 1, 4, raw.iter().map(|v| v + shift).collect()).unwrap();
            let pa = softmax(&a).unwrap();
            let pb = softmax(&b).unwrap();
            for c in 0..4 {
                prop_assert!((pa.prob(0, 0, c) - pb.prob(0, 0, c)).abs() <= 1e-9);
            }
        }

        #[test]
        fn cross_entropy_non_negative(raw in proptest::collection::vec(-10.0f64..10.0, 6), target in 0u8..3) {
            let logits = LogitMap::new(1, 2, 3, raw).unwrap();
            let p = softmax(&logits).unwrap();
            let y = LabelMask::filled(1, 2, target);
            let ce = cross_entropy(&p, &y).unwrap();
            for &v in ce.values() {
                prop_assert!(v >= 0.0);
            }
        }

        #[test]
        fn argmax_commutes_with_softmax(raw in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let logits = LogitMap::new(2, 2, 3, raw.clone()).unwrap();
            let via_softmax = argmax_mask(&softmax(&logits).unwrap());
            for y in 0..2 {
                for x in 0..2 {
                    let pixel = logits.pixel(y, x);
                    let mut best = 0;
                    for c in 1..3 {
                        if pixel[c] > pixel[best] {
                            best = c;
                        }
                    }
                    prop_assert_eq!(via_softmax.label(y, x), best as u8);
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_bulk() {
        // Deterministic bulk check over more than 1000 pixels.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let raw: Vec<f64> = (0..40 * 40 * 5).map(|_| rng.random_range(-80.0..80.0)).collect();
        let logits = LogitMap::new(40, 40, 5, raw).unwrap();
        let p = softmax(&logits).unwrap();
        for pixel in p.probs().chunks_exact(5) {
            let sum: f64 = pixel.iter().sum();
            assert!((sum - 1.0).abs() < PROB_SUM_TOL);
        }
    }

    #[test]
    fn cross_entropy_zero_iff_prob_one() {
        let p = ProbMap::new(1, 2, 2, vec![1.0, 0.0, 0.9, 0.1]).unwrap();
        let y = LabelMask::filled(1, 2, 0);
        let ce = cross_entropy(&p, &y).unwrap();
        assert_eq!(ce.value(0, 0), 0.0);
        assert!(ce.value(0, 1) > 0.0);
    }
}
