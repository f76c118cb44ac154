//! Loss machinery: supervised loss, the plain unsupervised loss, adaptive
//! equalization sampling of pixels, dynamic re-weighting, and the total
//! objective.
//!
//! All operations are pure; per-image terms are reduced in image order so
//! results are deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::ConfidenceBank;
use crate::error::{Error, Result};
use crate::grid::{cross_entropy, LabelMask, ProbMap, IGNORE};

/// Lower clamp for category badness in the sampling-rate ratio, preventing
/// `0^0` and `0/0` when every category is perfectly confident.
pub const BADNESS_CLAMP: f64 = 1e-6;

/// Where the per-pixel re-weighting probabilities come from. Either way the
/// weights are constants with respect to the student's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// Teacher probabilities on the same views the pseudo labels came from.
    Teacher,
    /// Student probabilities, detached from the gradient.
    StudentDetached,
}

impl WeightSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student-detached" => Ok(Self::StudentDetached),
            other => Err(Error::Config(format!(
                "unknown weight source '{other}' (expected teacher|student-detached)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::StudentDetached => "student-detached",
        }
    }
}

/// Tunable loss parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Contribution of the unsupervised loss in the total objective.
    pub alpha: f64,
    /// Exponent of the sampling-rate ratio; 0 disables equalization sampling.
    pub beta: f64,
    /// Exponent of the max-probability re-weighting factor; 0 disables it.
    pub gamma: f64,
    pub weight_source: WeightSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            weight_source: WeightSource::Teacher,
        }
    }
}

/// Per-category pixel sampling rates. The worst category always has rate 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRates {
    s: Vec<f64>,
    beta: f64,
}

impl SamplingRates {
    /// All-ones rates (sampling disabled).
    pub fn ones(classes: usize) -> Self {
        Self {
            s: vec![1.0; classes],
            beta: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Per-pixel Bernoulli inclusion grid for the unsupervised loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndicator {
    height: usize,
    width: usize,
    included: Vec<bool>,
}

impl SampleIndicator {
    pub fn new(height: usize, width: usize, included: Vec<bool>) -> Result<Self> {
        if included.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "indicator length {} != {height}x{width}",
                included.len()
            )));
        }
        Ok(Self { height, width, included })
    }

    /// Include every non-IGNORE pixel (sampling disabled).
    pub fn all_valid(pseudo: &LabelMask) -> Self {
        Self {
            height: pseudo.height(),
            width: pseudo.width(),
            included: pseudo.labels().iter().map(|&l| l != IGNORE).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn included(&self, y: usize, x: usize) -> bool {
        self.included[y * self.width + x]
    }

    pub fn flags(&self) -> &[bool] {
        &self.included
    }

    pub fn included_count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel loss weights: `(max_c p)^gamma` on sampled pixels, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl PixelWeights {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "weight grid length {} != {height}x{width}",
                weights.len()
            )));
        }
        if !weights.iter().all(|w| (0.0..=1.0).contains(w)) {
            return Err(Error::InvalidValue("pixel weights must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, weights })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weight(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Mean over images of the mean per-pixel cross-entropy over non-IGNORE
/// pixels. Images without a single valid pixel are excluded from the outer
/// mean; if every image is excluded the loss is 0.
pub fn supervised_loss(preds: &[ProbMap], gts: &[LabelMask]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != gts.len() {
        return Err(Error::DimMismatch("prediction/mask batch lengths".into()));
    }
    let mut total = 0.0;
    let mut images = 0usize;
    for (p, y) in preds.iter().zip(gts) {
        let ce = cross_entropy(p, y)?;
        let count = ce.included_count();
        if count == 0 {
            continue;
        }
        let sum: f64 = ce.values().iter().sum();
        total += sum / count as f64;
        images += 1;
    }
    if images == 0 {
        return Ok(0.0);
    }
    Ok(total / images as f64)
}

/// The basic-framework unsupervised loss: identical arithmetic to
/// [`supervised_loss`] but with pseudo labels as targets.
pub fn unsupervised_loss_plain(preds: &[ProbMap], pseudo: &[LabelMask]) -> Result<f64> {
    supervised_loss(preds, pseudo)
}

/// Per-category sampling rates from bank badness:
/// `s_c = (badness_c / max badness)^beta`, with badness clamped to at least
/// [`BADNESS_CLAMP`]. `beta = 0` yields all ones.
pub fn sampling_rates(bank: &ConfidenceBank, beta: f64) -> SamplingRates {
    let badness: Vec<f64> = bank.badness().iter().map(|&b| b.max(BADNESS_CLAMP)).collect();
    let max = badness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = badness.iter().map(|&b| (b / max).powf(beta)).collect();
    SamplingRates { s, beta }
}

/// Independent Bernoulli inclusion of non-IGNORE pixels: a pixel with pseudo
/// class `c` is kept with probability `s_c`. IGNORE pixels are never kept.
pub fn sample_pixels(pseudo: &LabelMask, rates: &SamplingRates, rng: &mut impl Rng) -> SampleIndicator {
    let included = pseudo
        .labels()
        .iter()
        .map(|&label| {
            if label == IGNORE || label as usize >= rates.s.len() {
                return false;
            }
            rng.random::<f64>() < rates.s[label as usize]
        })
        .collect();
    SampleIndicator {
        height: pseudo.height(),
        width: pseudo.width(),
        included,
    }
}

/// Dynamic re-weighting: `w = (max_c p)^gamma` on sampled pixels, 0 on the
/// rest. `gamma = 0` reduces sampled weights to 1.
pub fn pixel_weights(probs: &ProbMap, indicator: &SampleIndicator, gamma: f64) -> Result<PixelWeights> {
    if probs.height() != indicator.height || probs.width() != indicator.width {
        return Err(Error::DimMismatch("probabilities vs indicator dims".into()));
    }
    let classes = probs.classes();
    let weights = probs
        .probs()
        .chunks_exact(classes)
        .zip(&indicator.included)
        .map(|(pixel, &inc)| {
            if !inc {
                return 0.0;
            }
            let max = pixel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max.powf(gamma)
        })
        .collect();
    Ok(PixelWeights {
        height: probs.height(),
        width: probs.width(),
        weights,
    })
}

/// Weighted unsupervised loss: per image, the weighted mean of per-pixel
/// cross-entropies with the given weights; images whose weights sum to zero
/// are excluded from the outer mean. Returns 0 (with a warning) when every
/// image has zero weight.
pub fn unsupervised_loss_ael(
    preds: &[ProbMap],
    pseudo: &[LabelMask],
    weights: &[PixelWeights],
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != pseudo.len() || preds.len() != weights.len() {
        return Err(Error::DimMismatch("unsupervised batch lengths".into()));
    }
    let mut total = 0.0;
    let mut images = 0usize;
    for ((p, y), w) in preds.iter().zip(pseudo).zip(weights) {
        if w.height != p.height() || w.width != p.width() {
            return Err(Error::DimMismatch("weights vs prediction dims".into()));
        }
        let ce = cross_entropy(p, y)?;
        let wsum: f64 = w.weights.iter().sum();
        if wsum <= 0.0 {
            continue;
        }
        let weighted: f64 = ce.values().iter().zip(&w.weights).map(|(&v, &wi)| wi * v).sum();
        total += weighted / wsum;
        images += 1;
    }
    if images == 0 {
        log::warn!("unsupervised loss: every image in the batch has zero weight");
        return Ok(0.0);
    }
    Ok(total / images as f64)
}

/// Total objective `L_s + alpha * L_u`.
pub fn total_loss(supervised: f64, unsupervised: f64, alpha: f64) -> f64 {
    supervised + alpha * unsupervised
}
