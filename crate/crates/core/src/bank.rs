//! The confidence bank: an EMA-smoothed record of category-wise performance,
//! measured on labeled data only, and its conversion into category sampling
//! probabilities.
//!
//! The bank is a single mutable state owned by the training loop. Exactly one
//! update happens per training step; augmentation and pixel sampling read an
//! immutable snapshot taken at step start.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMask, ProbMap, IGNORE};

/// Which per-category statistic the bank tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndicatorKind {
    /// Mean true-class probability, in `[0, 1]`.
    Confidence,
    /// True-class probability minus the second-largest probability, in `[-1, 1]`.
    Margin,
    /// Full-distribution entropy (natural log) averaged over the category's
    /// pixels, in `[0, ln C]`.
    Entropy,
}

impl IndicatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Self::Confidence),
            "margin" => Ok(Self::Margin),
            "entropy" => Ok(Self::Entropy),
            other => Err(Error::Config(format!(
                "unknown indicator '{other}' (expected confidence|margin|entropy)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Confidence => "confidence",
            Self::Margin => "margin",
            Self::Entropy => "entropy",
        }
    }
}

/// One batch worth of per-category indicator values. `observed[c]` is false
/// when category `c` had no ground-truth pixels anywhere in the batch, in
/// which case `values[c]` is meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchIndicator {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

/// Normalized category sampling probabilities (softmax over badness).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingProbabilities(Vec<f64>);

impl SamplingProbabilities {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Draw one category index.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        weighted_draw(&self.0, rng)
    }

    /// Draw up to `k` distinct categories without replacement, renormalizing
    /// after each draw. Draw order is preserved.
    pub fn sample_distinct(&self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut weights = self.0.clone();
        let k = k.min(weights.len());
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let idx = weighted_draw(&weights, rng);
            out.push(idx);
            weights[idx] = 0.0;
        }
        out
    }
}

fn weighted_draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "weighted draw requires positive mass");
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    // Floating-point slack: fall back to the last positively weighted entry.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// EMA-tracked per-category performance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBank {
    kind: IndicatorKind,
    tau: f64,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl ConfidenceBank {
    pub fn new(kind: IndicatorKind, classes: usize, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1)")));
        }
        if classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(Self {
            kind,
            tau,
            values: vec![0.0; classes],
            observed: vec![false; classes],
        })
    }

    pub fn from_parts(kind: IndicatorKind, tau: f64, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::DimMismatch("bank values vs observed flags".into()));
        }
        let mut bank = Self::new(kind, values.len(), tau)?;
        bank.values = values;
        bank.observed = observed;
        Ok(bank)
    }

    pub fn kind(&self) -> IndicatorKind {
        self.kind
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// Overwrite one category (test and checkpoint plumbing).
    pub fn set(&mut self, class: usize, value: f64, observed: bool) {
        self.values[class] = value;
        self.observed[class] = observed;
    }

    /// EMA update: `v <- tau * v + (1 - tau) * new` for every category
    /// observed in the batch. The first-ever observation of a category sets
    /// the value directly, otherwise tau = 0.999 would pin it near the
    /// initializer for thousands of steps. Unobserved categories are left
    /// untouched.
    pub fn ema_update(&mut self, batch: &BatchIndicator) -> Result<()> {
        if batch.values.len() != self.values.len() || batch.observed.len() != self.values.len() {
            return Err(Error::DimMismatch("bank update class count".into()));
        }
        for c in 0..self.values.len() {
            if !batch.observed[c] {
                continue;
            }
            if self.observed[c] {
                self.values[c] = self.tau * self.values[c] + (1.0 - self.tau) * batch.values[c];
            } else {
                self.values[c] = batch.values[c];
                self.observed[c] = true;
            }
        }
        Ok(())
    }

    /// Per-category "badness": how much a category deserves extra attention.
    /// Confidence and Margin store goodness, so badness is `1 - value`;
    /// Entropy already grows with uncertainty and is used raw. Categories
    /// never observed take the mean badness of the observed ones (uniform
    /// when nothing has been observed), so cold-start neither starves nor
    /// floods never-seen classes.
    pub fn badness(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .values
            .iter()
            .map(|&v| match self.kind {
                IndicatorKind::Confidence | IndicatorKind::Margin => 1.0 - v,
                IndicatorKind::Entropy => v,
            })
            .collect();
        let observed: Vec<f64> = out
            .iter()
            .zip(&self.observed)
            .filter(|(_, &o)| o)
            .map(|(&b, _)| b)
            .collect();
        let fill = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for (b, &o) in out.iter_mut().zip(&self.observed) {
            if !o {
                *b = fill;
            }
        }
        out
    }

    /// Softmax over badness: worse categories are more likely to be sampled.
    pub fn sampling_probabilities(&self) -> SamplingProbabilities {
        let badness = self.badness();
        let max = badness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = badness.iter().map(|b| (b - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        SamplingProbabilities(exps.into_iter().map(|e| e / sum).collect())
    }
}

/// Shared pre-checks and the nested-mean aggregation of per-pixel statistics:
/// inner mean over a category's pixels within an image, outer mean over the
/// images that contain the category.
fn aggregate_indicator(
    preds: &[ProbMap],
    gts: &[LabelMask],
    classes: usize,
    per_pixel: impl Fn(&[f64], usize) -> f64,
) -> Result<BatchIndicator> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != gts.len() {
        return Err(Error::DimMismatch("prediction/mask batch lengths".into()));
    }
    let mut sums = vec![0.0; classes];
    let mut image_counts = vec![0usize; classes];
    for (p, y) in preds.iter().zip(gts) {
        if p.height() != y.height() || p.width() != y.width() {
            return Err(Error::DimMismatch("prediction vs mask dims".into()));
        }
        if p.classes() != classes {
            return Err(Error::DimMismatch("prediction class count".into()));
        }
        y.validate_classes(classes)?;
        let mut pixel_sums = vec![0.0; classes];
        let mut pixel_counts = vec![0usize; classes];
        for (pixel, &label) in p.probs().chunks_exact(classes).zip(y.labels()) {
            if label == IGNORE {
                continue;
            }
            let c = label as usize;
            pixel_sums[c] += per_pixel(pixel, c);
            pixel_counts[c] += 1;
        }
        for c in 0..classes {
            if pixel_counts[c] > 0 {
                sums[c] += pixel_sums[c] / pixel_counts[c] as f64;
                image_counts[c] += 1;
            }
        }
    }
    let observed: Vec<bool> = image_counts.iter().map(|&n| n > 0).collect();
    let values = sums
        .iter()
        .zip(&image_counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(BatchIndicator { values, observed })
}

/// Mean true-class probability per category.
pub fn confidence_indicator(preds: &[ProbMap], gts: &[LabelMask], classes: usize) -> Result<BatchIndicator> {
    aggregate_indicator(preds, gts, classes, |pixel, c| pixel[c])
}

/// True-class probability minus the second-largest probability.
///
/// `exclude_target` switches the subtrahend from the global second-largest
/// value (the default reading) to the largest value over classes other than
/// the target.
pub fn margin_indicator(
    preds: &[ProbMap],
    gts: &[LabelMask],
    classes: usize,
    exclude_target: bool,
) -> Result<BatchIndicator> {
    aggregate_indicator(preds, gts, classes, |pixel, c| {
        let other = if exclude_target {
            pixel
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .map(|(_, &p)| p)
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            second_largest(pixel)
        };
        pixel[c] - other
    })
}

/// Second-largest element in multiset order (equal maxima count twice).
fn second_largest(values: &[f64]) -> f64 {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    second
}

/// Full-distribution entropy (natural log) averaged over each category's
/// pixels. Stored positive: larger means more uncertain.
pub fn entropy_indicator(preds: &[ProbMap], gts: &[LabelMask], classes: usize) -> Result<BatchIndicator> {
    aggregate_indicator(preds, gts, classes, |pixel, _| {
        -pixel
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>()
    })
}

/// Dispatch on the configured indicator kind.
pub fn compute_indicator(
    kind: IndicatorKind,
    preds: &[ProbMap],
    gts: &[LabelMask],
    classes: usize,
    margin_exclude_target: bool,
) -> Result<BatchIndicator> {
    match kind {
        IndicatorKind::Confidence => confidence_indicator(preds, gts, classes),
        IndicatorKind::Margin => margin_indicator(preds, gts, classes, margin_exclude_target),
        IndicatorKind::Entropy => entropy_indicator(preds, gts, classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probmap(h: usize, w: usize, pixel: Vec<f64>) -> ProbMap {
        let c = pixel.len();
        ProbMap::from_fn(h, w, c, |_, _| pixel.clone()).unwrap()
    }

    #[test]
    fn confidence_perfect_single_class() {
        let p = probmap(2, 2, vec![1.0, 0.0, 0.0]);
        let y = LabelMask::filled(2, 2, 0);
        let ind = confidence_indicator(&[p], &[y], 3).unwrap();
        assert_eq!(ind.values[0], 1.0);
        assert!(ind.observed[0]);
        assert!(!ind.observed[1] && !ind.observed[2]);
    }

    #[test]
    fn confidence_nested_means() {
        // Image A: two class-1 pixels with p1 = 0.6 and 0.8; image B: one with 0.5.
        let pa = ProbMap::new(1, 2, 2, vec![0.4, 0.6, 0.2, 0.8]).unwrap();
        let ya = LabelMask::filled(1, 2, 1);
        let pb = ProbMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let yb = LabelMask::filled(1, 1, 1);
        let ind = confidence_indicator(&[pa, pb], &[ya, yb], 2).unwrap();
        assert!((ind.values[1] - 0.6).abs() < 1e-12, "(0.7 + 0.5) / 2 = 0.6");
    }

    #[test]
    fn absent_class_stays_unobserved() {
        let p = probmap(1, 1, vec![0.5, 0.3, 0.2]);
        let y = LabelMask::filled(1, 1, 0);
        let ind = confidence_indicator(&[p], &[y], 3).unwrap();
        assert!(!ind.observed[2]);
        assert_eq!(ind.values[2], 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let err = confidence_indicator(&[], &[], 3).unwrap_err();
        assert_eq!(err.to_string(), "empty batch");
    }

    #[test]
    fn margin_against_global_second() {
        let p = probmap(1, 1, vec![0.7, 0.2, 0.1]);
        let gt0 = margin_indicator(std::slice::from_ref(&p), &[LabelMask::filled(1, 1, 0)], 3, false).unwrap();
        assert!((gt0.values[0] - 0.5).abs() < 1e-12);
        let gt1 = margin_indicator(&[p], &[LabelMask::filled(1, 1, 1)], 3, false).unwrap();
        assert!(gt1.values[1].abs() < 1e-12, "0.2 - 0.2 = 0 under the global reading");
    }

    #[test]
    fn margin_exclude_target_variant() {
        let p = probmap(1, 1, vec![0.7, 0.2, 0.1]);
        let ind = margin_indicator(&[p], &[LabelMask::filled(1, 1, 1)], 3, true).unwrap();
        assert!((ind.values[1] - (0.2 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn margin_one_hot_correct_is_one() {
        let p = probmap(1, 1, vec![0.0, 1.0, 0.0]);
        let ind = margin_indicator(&[p], &[LabelMask::filled(1, 1, 1)], 3, false).unwrap();
        assert_eq!(ind.values[1], 1.0);
    }

    #[test]
    fn entropy_extremes() {
        let uniform = probmap(1, 1, vec![0.25; 4]);
        let ind = entropy_indicator(&[uniform], &[LabelMask::filled(1, 1, 0)], 4).unwrap();
        assert!((ind.values[0] - 4.0_f64.ln()).abs() < 1e-12);

        let onehot = probmap(1, 1, vec![1.0, 0.0, 0.0, 0.0]);
        let ind = entropy_indicator(&[onehot], &[LabelMask::filled(1, 1, 0)], 4).unwrap();
        assert_eq!(ind.values[0], 0.0);

        let half = probmap(1, 1, vec![0.5, 0.5]);
        let ind = entropy_indicator(&[half], &[LabelMask::filled(1, 1, 0)], 2).unwrap();
        assert!((ind.values[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ema_blends_with_momentum() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 1, 0.999).unwrap();
        bank.set(0, 0.5, true);
        bank.ema_update(&BatchIndicator {
            values: vec![0.7],
            observed: vec![true],
        })
        .unwrap();
        assert!((bank.values()[0] - 0.5002).abs() < 1e-12);
    }

    #[test]
    fn zero_tau_tracks_batch_exactly() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 2, 0.0).unwrap();
        bank.set(0, 0.9, true);
        bank.set(1, 0.1, true);
        bank.ema_update(&BatchIndicator {
            values: vec![0.3, 0.4],
            observed: vec![true, true],
        })
        .unwrap();
        assert_eq!(bank.values(), &[0.3, 0.4]);
    }

    #[test]
    fn ema_geometric_convergence() {
        let tau: f64 = 0.9;
        let (v0, v) = (0.2, 0.8);
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 1, tau).unwrap();
        bank.set(0, v0, true);
        let batch = BatchIndicator {
            values: vec![v],
            observed: vec![true],
        };
        let n = 100;
        for _ in 0..n {
            bank.ema_update(&batch).unwrap();
        }
        let expected = v + (v0 - v) * tau.powi(n);
        assert!((bank.values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn first_observation_seeds_directly() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 2, 0.999).unwrap();
        bank.ema_update(&BatchIndicator {
            values: vec![0.7, 0.0],
            observed: vec![true, false],
        })
        .unwrap();
        assert_eq!(bank.values()[0], 0.7, "no EMA blend on first observation");
        assert!(!bank.observed()[1]);
    }

    #[test]
    fn unobserved_update_is_a_noop() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 2, 0.5).unwrap();
        bank.set(0, 0.123456789, true);
        let before = bank.values().to_vec();
        bank.ema_update(&BatchIndicator {
            values: vec![0.0, 0.0],
            observed: vec![false, false],
        })
        .unwrap();
        assert_eq!(bank.values()[0].to_bits(), before[0].to_bits());
        assert_eq!(bank.values()[1].to_bits(), before[1].to_bits());
    }

    #[test]
    fn equal_confidence_gives_uniform_probabilities() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 4, 0.999).unwrap();
        for c in 0..4 {
            bank.set(c, 0.6, true);
        }
        let r = bank.sampling_probabilities();
        for &p in r.values() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_probabilities_match_softmax_of_badness() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 2, 0.999).unwrap();
        bank.set(0, 0.9, true);
        bank.set(1, 0.4, true);
        let r = bank.sampling_probabilities();
        assert!((r.values()[0] - 0.3775).abs() < 1e-4);
        assert!((r.values()[1] - 0.6225).abs() < 1e-4);
        let exact = (0.1f64.exp(), 0.6f64.exp());
        assert!((r.values()[0] - exact.0 / (exact.0 + exact.1)).abs() < 1e-12);
    }

    #[test]
    fn unobserved_fill_uses_mean_observed_badness() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 3, 0.999).unwrap();
        bank.set(0, 0.9, true); // badness 0.1
        bank.set(1, 0.5, true); // badness 0.5
        let badness = bank.badness();
        assert!((badness[2] - 0.3).abs() < 1e-12);

        let empty = ConfidenceBank::new(IndicatorKind::Confidence, 3, 0.999).unwrap();
        let r = empty.sampling_probabilities();
        for &p in r.values() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12, "cold start is uniform");
        }
    }

    #[test]
    fn indicator_agreement_on_perfect_predictions() {
        let preds = vec![probmap(2, 2, vec![0.0, 1.0, 0.0])];
        let gts = vec![LabelMask::filled(2, 2, 1)];
        let conf = confidence_indicator(&preds, &gts, 3).unwrap();
        let margin = margin_indicator(&preds, &gts, 3, false).unwrap();
        let ent = entropy_indicator(&preds, &gts, 3).unwrap();
        assert_eq!(conf.values[1], 1.0);
        assert_eq!(margin.values[1], 1.0);
        assert_eq!(ent.values[1], 0.0);
    }

    #[test]
    fn sample_distinct_returns_unique_categories() {
        let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 5, 0.999).unwrap();
        for c in 0..5 {
            bank.set(c, 0.1 * c as f64, true);
        }
        let r = bank.sampling_probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let picks = r.sample_distinct(3, &mut rng);
            assert_eq!(picks.len(), 3);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3, "draws must be distinct: {picks:?}");
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(values in proptest::collection::vec(0.0f64..1.0, 2..8)) {
            let classes = values.len();
            let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, classes, 0.999).unwrap();
            for (c, &v) in values.iter().enumerate() {
                bank.set(c, v, true);
            }
            let sum: f64 = bank.sampling_probabilities().values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn lower_confidence_gets_strictly_higher_probability(
            a in 0.0f64..1.0, b in 0.0f64..1.0
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 2, 0.999).unwrap();
            bank.set(0, a, true);
            bank.set(1, b, true);
            let r = bank.sampling_probabilities();
            if a < b {
                prop_assert!(r.values()[0] > r.values()[1]);
            } else {
                prop_assert!(r.values()[0] < r.values()[1]);
            }
        }

        #[test]
        fn ema_stays_in_indicator_range(updates in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
            let mut bank = ConfidenceBank::new(IndicatorKind::Confidence, 1, 0.9).unwrap();
            for v in updates {
                bank.ema_update(&BatchIndicator { values: vec![v], observed: vec![true] }).unwrap();
                prop_assert!((0.0..=1.0).contains(&bank.values()[0]));
            }
        }

        #[test]
        fn indicators_are_order_insensitive(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let make = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(0.01..1.0)).collect();
                let probs: Vec<f64> = raw
                    .chunks_exact(3)
                    .flat_map(|p| {
                        let s: f64 = p.iter().sum();
                        p.iter().map(|v| v / s).collect::<Vec<_>>()
                    })
                    .collect();
                let mask = LabelMask::from_fn(2, 2, |y, x| ((y * 2 + x) % 3) as u8);
                (ProbMap::new(2, 2, 3, probs).unwrap(), mask)
            };
            let (p1, m1) = make(&mut rng);
            let (p2, m2) = make(&mut rng);
            let fwd = confidence_indicator(&[p1.clone(), p2.clone()], &[m1.clone(), m2.clone()], 3).unwrap();
            let rev = confidence_indicator(&[p2, p1], &[m2, m1], 3).unwrap();
            for c in 0..3 {
                prop_assert!((fwd.values[c] - rev.values[c]).abs() < 1e-12);
                prop_assert_eq!(fwd.observed[c], rev.observed[c]);
            }
        }
    }
}
