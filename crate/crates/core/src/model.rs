//! The per-pixel classifier and the teacher-student training mechanics.
//!
//! The classifier is linear over six handcrafted features per pixel
//! (r, g, b, x/W, y/H, 1), which keeps the cross-entropy objective convex,
//! the gradients exact, and a full training run inside a few seconds while
//! every adaptive-equalization mechanism stays intact. The pipeline itself is
//! model-agnostic.

use crate::error::{Error, Result};
use crate::grid::{argmax_mask, softmax, Image, LabelMask, LogitMap, ProbMap, IGNORE};
use crate::loss::PixelWeights;

/// Feature dimension: r, g, b, x/W, y/H, bias.
pub const FEATURE_DIM: usize = 6;

/// Exponent of the poly learning-rate schedule.
pub const POLY_POWER: f64 = 0.9;

/// The six features of one pixel.
pub fn pixel_features(img: &Image, y: usize, x: usize) -> [f64; FEATURE_DIM] {
    let [r, g, b] = img.pixel(y, x);
    [
        r,
        g,
        b,
        x as f64 / img.width() as f64,
        y as f64 / img.height() as f64,
        1.0,
    ]
}

/// A `classes x FEATURE_DIM` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    classes: usize,
    w: Vec<f64>, // row-major, class-major
}

impl ModelWeights {
    /// Zero initialization: deterministic, and unbiased for a convex loss.
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            w: vec![0.0; classes * FEATURE_DIM],
        }
    }

    pub fn from_values(classes: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != classes * FEATURE_DIM {
            return Err(Error::DimMismatch(format!(
                "weight buffer length {} != {classes}x{FEATURE_DIM}",
                w.len()
            )));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("weights must be finite".into()));
        }
        Ok(Self { classes, w })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, class: usize, feature: usize) -> f64 {
        self.w[class * FEATURE_DIM + feature]
    }

    pub fn set(&mut self, class: usize, feature: usize, value: f64) {
        self.w[class * FEATURE_DIM + feature] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Mutable training state: student, EMA teacher, and the step counter that
/// drives the poly learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelWeights,
    pub teacher: ModelWeights,
    pub step: usize,
    pub max_iter: usize,
    pub base_lr: f64,
    pub teacher_momentum: f64,
}

impl TrainState {
    pub fn new(classes: usize, max_iter: usize, base_lr: f64, teacher_momentum: f64) -> Self {
        Self {
            student: ModelWeights::zeros(classes),
            teacher: ModelWeights::zeros(classes),
            step: 0,
            max_iter,
            base_lr,
            teacher_momentum,
        }
    }
}

/// Per-pixel logits `W . features(pixel)`.
pub fn forward(weights: &ModelWeights, img: &Image) -> LogitMap {
    let classes = weights.classes;
    let mut logits = Vec::with_capacity(img.height() * img.width() * classes);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let f = pixel_features(img, y, x);
            for c in 0..classes {
                let row = &weights.w[c * FEATURE_DIM..(c + 1) * FEATURE_DIM];
                let mut v = 0.0;
                for (wi, fi) in row.iter().zip(&f) {
                    v += wi * fi;
                }
                logits.push(v);
            }
        }
    }
    LogitMap::new(img.height(), img.width(), classes, logits)
        .expect("forward produces a correctly sized buffer")
}

/// Forward pass followed by softmax.
pub fn predict_probs(weights: &ModelWeights, img: &Image) -> Result<ProbMap> {
    softmax(&forward(weights, img))
}

/// Teacher inference on a weak view: hard argmax labels plus the probability
/// map needed for re-weighting and presence ratios. No confidence threshold
/// is applied.
pub fn pseudo_label(teacher: &ModelWeights, img_weak: &Image) -> Result<(LabelMask, ProbMap)> {
    let probs = predict_probs(teacher, img_weak)?;
    Ok((argmax_mask(&probs), probs))
}

/// One labeled term of the objective: a weak view and its ground truth.
pub struct LabeledTerm<'a> {
    pub image: &'a Image,
    pub target: &'a LabelMask,
}

/// One unlabeled term: a strong view, its composed pseudo labels, and the
/// fixed per-pixel weights.
pub struct UnlabeledTerm<'a> {
    pub image: &'a Image,
    pub pseudo: &'a LabelMask,
    pub weights: &'a PixelWeights,
}

/// The three components of the objective at a point in weight space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
}

/// Evaluate the full objective. Pixel weights are constants here: perturbing
/// the weights does not change them, which is exactly the semantics the
/// analytic gradient differentiates.
pub fn evaluate_objective(
    weights: &ModelWeights,
    labeled: &[LabeledTerm],
    unlabeled: &[UnlabeledTerm],
    alpha: f64,
) -> Result<Objective> {
    let supervised = {
        if labeled.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        let mut images = 0usize;
        for term in labeled {
            let probs = predict_probs(weights, term.image)?;
            let ce = crate::grid::cross_entropy(&probs, term.target)?;
            let count = ce.included_count();
            if count == 0 {
                continue;
            }
            total += ce.values().iter().sum::<f64>() / count as f64;
            images += 1;
        }
        if images == 0 {
            0.0
        } else {
            total / images as f64
        }
    };
    let unsupervised = {
        let mut total = 0.0;
        let mut images = 0usize;
        for term in unlabeled {
            let probs = predict_probs(weights, term.image)?;
            let ce = crate::grid::cross_entropy(&probs, term.pseudo)?;
            let wsum = term.weights.sum();
            if wsum <= 0.0 {
                continue;
            }
            let weighted: f64 = ce
                .values()
                .iter()
                .zip(term.weights.values())
                .map(|(&v, &w)| w * v)
                .sum();
            total += weighted / wsum;
            images += 1;
        }
        if images == 0 {
            0.0
        } else {
            total / images as f64
        }
    };
    Ok(Objective {
        total: supervised + alpha * unsupervised,
        supervised,
        unsupervised,
    })
}

/// Analytic gradient of [`evaluate_objective`] with respect to the student
/// weights. Per pixel with target `t` the cross-entropy-through-softmax
/// derivative is `(p_c - [c == t]) * features`, scaled by that pixel's share
/// of its image's normalizer and the image's share of the batch mean.
pub fn loss_gradient(
    weights: &ModelWeights,
    labeled: &[LabeledTerm],
    unlabeled: &[UnlabeledTerm],
    alpha: f64,
) -> Result<ModelWeights> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = weights.classes;
    let mut grad = ModelWeights::zeros(classes);

    let labeled_included = labeled
        .iter()
        .filter(|t| t.target.valid_count() > 0)
        .count();
    if labeled_included > 0 {
        let outer = 1.0 / labeled_included as f64;
        for term in labeled {
            let valid = term.target.valid_count();
            if valid == 0 {
                continue;
            }
            let probs = predict_probs(weights, term.image)?;
            let inner = outer / valid as f64;
            accumulate_ce_gradient(&mut grad, &probs, term.image, term.target, |_, _| inner);
        }
    }

    let unlabeled_included = unlabeled.iter().filter(|t| t.weights.sum() > 0.0).count();
    if unlabeled_included > 0 && alpha != 0.0 {
        let outer = alpha / unlabeled_included as f64;
        for term in unlabeled {
            let wsum = term.weights.sum();
            if wsum <= 0.0 {
                continue;
            }
            let probs = predict_probs(weights, term.image)?;
            let scale = outer / wsum;
            accumulate_ce_gradient(&mut grad, &probs, term.image, term.pseudo, |y, x| {
                scale * term.weights.weight(y, x)
            });
        }
    }
    Ok(grad)
}

fn accumulate_ce_gradient(
    grad: &mut ModelWeights,
    probs: &ProbMap,
    img: &Image,
    targets: &LabelMask,
    coefficient: impl Fn(usize, usize) -> f64,
) {
    let classes = grad.classes;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let label = targets.label(y, x);
            if label == IGNORE {
                continue;
            }
            let coef = coefficient(y, x);
            if coef == 0.0 {
                continue;
            }
            let f = pixel_features(img, y, x);
            let pixel = probs.pixel(y, x);
            for c in 0..classes {
                let delta = coef * (pixel[c] - if c == label as usize { 1.0 } else { 0.0 });
                let row = c * FEATURE_DIM;
                for (k, &fk) in f.iter().enumerate() {
                    grad.w[row + k] += delta * fk;
                }
            }
        }
    }
}

/// Poly learning-rate schedule `base * (1 - k / max_iter)^0.9`.
pub fn poly_lr(base_lr: f64, step: usize, max_iter: usize) -> f64 {
    base_lr * (1.0 - step as f64 / max_iter as f64).powf(POLY_POWER)
}

/// One SGD step on the student with the poly learning rate. Errors once the
/// step counter reaches `max_iter`.
pub fn sgd_step(state: &mut TrainState, gradient: &ModelWeights) -> Result<()> {
    if state.step >= state.max_iter {
        return Err(Error::StepAfterMaxIter);
    }
    if gradient.classes != state.student.classes {
        return Err(Error::DimMismatch("gradient class count".into()));
    }
    let lr = poly_lr(state.base_lr, state.step, state.max_iter);
    for (w, g) in state.student.w.iter_mut().zip(&gradient.w) {
        *w -= lr * g;
    }
    state.step += 1;
    Ok(())
}

/// EMA teacher update `teacher <- m * teacher + (1 - m) * student`.
pub fn teacher_update(state: &mut TrainState) {
    let m = state.teacher_momentum;
    for (t, s) in state.teacher.w.iter_mut().zip(&state.student.w) {
        *t = m * *t + (1.0 - m) * s;
    }
}
