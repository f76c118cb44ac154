//! The training loop, evaluation, and the ablation harness.
//!
//! One step follows the same sequence every time: teacher pseudo-labels the
//! weak unlabeled views, the presence dictionary absorbs them, CutMix builds
//! the strong views (category-guided when enabled), Copy-Paste augments the
//! labeled pairs, the student forward pass feeds the bank update and the
//! losses, pixel sampling and re-weighting shape the unsupervised term, and
//! an SGD step plus the teacher EMA close the step. Augmentation and pixel
//! sampling read the bank snapshot taken at step start; the Eq-update lands
//! mid-step and becomes visible from the next step.
//!
//! Every random decision derives from `(seed, step, purpose, slot)`, so runs
//! are reproducible bit-for-bit and a resumed checkpoint replays the
//! uninterrupted run exactly.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aug::{
    adaptive_copy_paste, adaptive_cutmix, compose_box_probs, random_cutmix, weak_augment,
    CutMixSource, PresenceDictionary, SourceView,
};
use crate::bank::{compute_indicator, ConfidenceBank};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_split, write_id_list, Dataset};
use crate::error::{Error, Result};
use crate::grid::{argmax_mask, Image, LabelMask, ProbMap, IGNORE};
use crate::loss::{
    pixel_weights, sample_pixels, sampling_rates, supervised_loss, total_loss,
    unsupervised_loss_ael, PixelWeights, SampleIndicator, SamplingRates, WeightSource,
};
use crate::metrics::{
    iou_report, ledger_counts, tail_classes_from_counts, ConfusionMatrix, IouReport, SampleLedger,
};
use crate::model::{
    loss_gradient, predict_probs, pseudo_label, sgd_step, teacher_update, LabeledTerm, ModelWeights,
    TrainState, UnlabeledTerm,
};
use crate::rngutil::{stream_rng, StreamKind};
use crate::synth::make_partition;

/// Which components actually fired in one step, plus the step's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub acm: bool,
    pub acp_pastes: usize,
    pub aes: bool,
    pub dr: bool,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_unsupervised: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLoss {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
}

/// The machine-readable summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub classes: usize,
    pub labeled_images: usize,
    pub unlabeled_images: usize,
    pub tail_classes: Vec<usize>,
    pub final_loss: FinalLoss,
    pub eval: IouReport,
    pub ledger_tail_share: f64,
}

/// Everything a finished run hands back to callers.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub metrics: TrainMetrics,
    pub trace: Vec<StepTrace>,
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Dataset split selector for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train|val)"))),
        }
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

struct RunState {
    cfg: RunConfig,
    state: TrainState,
    bank: ConfidenceBank,
    dict: PresenceDictionary,
    ledger: SampleLedger,
    tail_classes: Vec<usize>,
}

/// Train from scratch with the given config, writing all artifacts under
/// `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.out = out_dir.to_string_lossy().into_owned();

    let data_root = PathBuf::from(&cfg.data_dir);
    let train_ds = load_split(&data_root.join("train"))?;
    let classes = train_ds.meta.classes;

    let partition = make_partition(train_ds.len(), cfg.protocol, cfg.fold, cfg.partition_seed)
        .map_err(|e| match e {
            Error::PartitionTooSmall { denominator, size } => Error::Config(format!(
                "partition denominator {denominator} exceeds dataset size {size}; \
                 generate more scenes or pick a larger protocol fraction"
            )),
            other => other,
        })?;

    let mut labeled_pixel_counts = vec![0u64; classes];
    for &id in &partition.labeled {
        let (_, mask) = train_ds.pair(id as usize);
        for &l in mask.labels() {
            if l != IGNORE {
                labeled_pixel_counts[l as usize] += 1;
            }
        }
    }
    let tail_classes = tail_classes_from_counts(&labeled_pixel_counts);

    let run = RunState {
        state: TrainState::new(classes, cfg.max_iter, cfg.base_lr, cfg.teacher_momentum),
        bank: ConfidenceBank::new(cfg.bank_indicator, classes, cfg.bank_tau)?,
        dict: PresenceDictionary::new(cfg.r_star),
        ledger: SampleLedger::new(classes),
        tail_classes,
        cfg,
    };
    execute(run, train_ds, partition.labeled, partition.unlabeled, out_dir)
}

/// Continue a checkpointed run to completion. The embedded config drives
/// everything; artifacts land under `out_dir` (pass the original directory
/// to refresh it in place).
pub fn resume(checkpoint_path: &Path, out_dir: &Path) -> Result<TrainResult> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ckpt.config_text)?;
    cfg.validate()?;
    cfg.out = out_dir.to_string_lossy().into_owned();

    let data_root = PathBuf::from(&cfg.data_dir);
    let train_ds = load_split(&data_root.join("train"))?;
    if train_ds.meta.classes != ckpt.state.student.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but dataset declares {}",
            ckpt.state.student.classes(),
            train_ds.meta.classes
        )));
    }
    let partition = make_partition(train_ds.len(), cfg.protocol, cfg.fold, cfg.partition_seed)?;
    let run = RunState {
        cfg,
        state: ckpt.state,
        bank: ckpt.bank,
        dict: ckpt.dict,
        ledger: ckpt.ledger,
        tail_classes: ckpt.tail_classes,
    };
    execute(run, train_ds, partition.labeled, partition.unlabeled, out_dir)
}

fn execute(
    mut run: RunState,
    train_ds: Dataset,
    labeled_ids: Vec<u64>,
    unlabeled_ids: Vec<u64>,
    out_dir: &Path,
) -> Result<TrainResult> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.resolved"), run.cfg.to_resolved_text())?;
    write_id_list(&out_dir.join("labeled_ids.txt"), &labeled_ids)?;
    write_id_list(&out_dir.join("unlabeled_ids.txt"), &unlabeled_ids)?;

    let checkpoints_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoints_dir)?;

    let classes = run.state.student.classes();
    let seed = run.cfg.seed;
    let use_unlabeled = run.cfg.batch_unlabeled > 0 && !unlabeled_ids.is_empty();
    let id_to_index: std::collections::BTreeMap<u64, usize> = train_ds
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id, i))
        .collect();
    let mut trace = Vec::with_capacity(run.cfg.max_iter - run.state.step);
    let mut last_loss = FinalLoss {
        total: 0.0,
        supervised: 0.0,
        unsupervised: 0.0,
    };

    while run.state.step < run.cfg.max_iter {
        let step = run.state.step as u64;
        let bank_snapshot = run.bank.clone();
        // Supervised warm-up: the unsupervised machinery stays off until the
        // student can produce non-degenerate pseudo labels, standing in for
        // the pretrained backbone of the full-size pipeline.
        let unsup_active = use_unlabeled && run.state.step >= run.cfg.warmup_steps;

        // Batch selection: uniform with replacement from both pools.
        let mut batch_rng = stream_rng(seed, step, StreamKind::BatchSelect, 0);
        let labeled_batch: Vec<usize> = (0..run.cfg.batch_labeled)
            .map(|_| labeled_ids[batch_rng.random_range(0..labeled_ids.len())] as usize)
            .collect();
        let unlabeled_batch: Vec<usize> = if unsup_active {
            (0..run.cfg.batch_unlabeled)
                .map(|_| unlabeled_ids[batch_rng.random_range(0..unlabeled_ids.len())] as usize)
                .collect()
        } else {
            Vec::new()
        };

        // Weak views of the labeled batch.
        let mut labeled_views: Vec<(Image, LabelMask)> = Vec::with_capacity(labeled_batch.len());
        for (slot, &idx) in labeled_batch.iter().enumerate() {
            let (img, mask) = train_ds.pair(idx);
            let mut rng = stream_rng(seed, step, StreamKind::WeakLabeled, slot as u64);
            labeled_views.push(weak_augment(img, mask, &mut rng)?);
        }

        // Weak views of the unlabeled batch, teacher pseudo labels, and the
        // presence-dictionary refresh.
        let mut weak_unlabeled: Vec<(Image, LabelMask, u64)> = Vec::new();
        let mut teacher_probs: Vec<ProbMap> = Vec::new();
        for (slot, &idx) in unlabeled_batch.iter().enumerate() {
            let (img, _) = train_ds.pair(idx);
            let dummy = LabelMask::filled(img.height(), img.width(), IGNORE);
            let mut rng = stream_rng(seed, step, StreamKind::WeakUnlabeled, slot as u64);
            let (weak_img, _) = weak_augment(img, &dummy, &mut rng)?;
            let (pseudo, probs) = pseudo_label(&run.state.teacher, &weak_img)?;
            let image_id = train_ds.entries[idx].id;
            run.dict.update(image_id, &pseudo);
            weak_unlabeled.push((weak_img, pseudo, image_id));
            teacher_probs.push(probs);
        }

        // Strong views: CutMix over the weak views, category-guided when ACM
        // is on. Crop-source candidates come from the presence dictionary;
        // with `aug.cutmix_pool` the whole dictionary qualifies and
        // out-of-batch images are materialized on demand (weak view plus
        // fresh teacher labels), otherwise candidates are the current batch.
        // Teacher probabilities ride along under the identical box so
        // re-weighting stays aligned with the composed pseudo masks.
        let batch_dict = if run.cfg.acm && !run.cfg.cutmix_pool {
            let mut d = PresenceDictionary::new(run.cfg.r_star);
            for (_, mask, id) in &weak_unlabeled {
                d.update(*id, mask);
            }
            Some(d)
        } else {
            None
        };
        let mut strong_imgs: Vec<Image> = Vec::new();
        let mut strong_pseudo: Vec<LabelMask> = Vec::new();
        let mut strong_probs: Vec<ProbMap> = Vec::new();
        for slot in 0..weak_unlabeled.len() {
            let mut rng = stream_rng(seed, step, StreamKind::CutMix, slot as u64);
            let out = if run.cfg.acm {
                let teacher = &run.state.teacher;
                let lookup = |id: u64| -> crate::error::Result<Option<SourceView>> {
                    let Some(&idx) = id_to_index.get(&id) else {
                        return Ok(None);
                    };
                    let (img, _) = train_ds.pair(idx);
                    let dummy = LabelMask::filled(img.height(), img.width(), IGNORE);
                    let mut pool_rng =
                        stream_rng(seed, step, StreamKind::CutMixPool, slot as u64);
                    let (weak_img, _) = weak_augment(img, &dummy, &mut pool_rng)?;
                    let (mask, probs) = pseudo_label(teacher, &weak_img)?;
                    Ok(Some(SourceView {
                        image: weak_img,
                        mask,
                        probs,
                    }))
                };
                let dict = batch_dict.as_ref().unwrap_or(&run.dict);
                adaptive_cutmix(
                    &weak_unlabeled,
                    &bank_snapshot,
                    dict,
                    &run.cfg.aug_config(),
                    &mut rng,
                    lookup,
                )?
            } else {
                random_cutmix(&weak_unlabeled, &run.cfg.aug_config(), &mut rng)?
            };
            let patch_probs = match (&out.source, &out.pool_view) {
                (CutMixSource::Batch(i), _) => &teacher_probs[*i],
                (CutMixSource::Pool(_), Some(view)) => &view.probs,
                (CutMixSource::Pool(_), None) => unreachable!("pool source carries its view"),
            };
            strong_probs.push(compose_box_probs(
                &teacher_probs[out.target_index],
                patch_probs,
                &out.src_box,
                &out.dst_box,
            ));
            strong_imgs.push(out.image);
            strong_pseudo.push(out.mask);
        }

        // Adaptive Copy-Paste across the labeled batch; sources are the
        // pre-paste weak views.
        let mut acp_pastes = 0usize;
        if run.cfg.acp && labeled_views.len() > 1 {
            let originals = labeled_views.clone();
            for (slot, view) in labeled_views.iter_mut().enumerate() {
                let mut rng = stream_rng(seed, step, StreamKind::CopyPaste, slot as u64);
                let src = rng.random_range(0..originals.len());
                let out = adaptive_copy_paste(
                    &originals[src].0,
                    &originals[src].1,
                    &view.0,
                    &view.1,
                    &bank_snapshot,
                    &run.cfg.aug_config(),
                    &mut rng,
                )?;
                acp_pastes += out.pastes.len();
                *view = (out.image, out.mask);
            }
        }

        // Student forward passes.
        let mut student_labeled: Vec<ProbMap> = Vec::with_capacity(labeled_views.len());
        for (img, _) in &labeled_views {
            student_labeled.push(predict_probs(&run.state.student, img)?);
        }
        let mut student_unlabeled: Vec<ProbMap> = Vec::with_capacity(strong_imgs.len());
        for img in &strong_imgs {
            student_unlabeled.push(predict_probs(&run.state.student, img)?);
        }

        // Bank update from the same labeled predictions that feed the
        // supervised loss.
        let gts: Vec<LabelMask> = labeled_views.iter().map(|(_, m)| m.clone()).collect();
        let indicator = compute_indicator(
            run.cfg.bank_indicator,
            &student_labeled,
            &gts,
            classes,
            run.cfg.margin_exclude_target,
        )?;
        run.bank.ema_update(&indicator)?;

        // Pixel sampling and dynamic re-weighting on the strong views.
        let rates = if run.cfg.aes {
            sampling_rates(&bank_snapshot, run.cfg.beta)
        } else {
            SamplingRates::ones(classes)
        };
        let gamma_eff = if run.cfg.dr { run.cfg.gamma } else { 0.0 };
        let mut weights: Vec<PixelWeights> = Vec::with_capacity(strong_imgs.len());
        for slot in 0..strong_imgs.len() {
            let ind = if run.cfg.aes {
                let mut rng = stream_rng(seed, step, StreamKind::PixelSample, slot as u64);
                sample_pixels(&strong_pseudo[slot], &rates, &mut rng)
            } else {
                SampleIndicator::all_valid(&strong_pseudo[slot])
            };
            let probs = match run.cfg.weight_source {
                WeightSource::Teacher => &strong_probs[slot],
                WeightSource::StudentDetached => &student_unlabeled[slot],
            };
            weights.push(pixel_weights(probs, &ind, gamma_eff)?);
        }

        // Losses and the analytic gradient.
        let ls = supervised_loss(&student_labeled, &gts)?;
        let lu = if strong_imgs.is_empty() {
            0.0
        } else {
            unsupervised_loss_ael(&student_unlabeled, &strong_pseudo, &weights)?
        };
        let lt = total_loss(ls, lu, run.cfg.alpha);

        let labeled_terms: Vec<LabeledTerm> = labeled_views
            .iter()
            .map(|(img, mask)| LabeledTerm { image: img, target: mask })
            .collect();
        let unlabeled_terms: Vec<UnlabeledTerm> = (0..strong_imgs.len())
            .map(|i| UnlabeledTerm {
                image: &strong_imgs[i],
                pseudo: &strong_pseudo[i],
                weights: &weights[i],
            })
            .collect();
        let gradient = loss_gradient(&run.state.student, &labeled_terms, &unlabeled_terms, run.cfg.alpha)?;
        sgd_step(&mut run.state, &gradient)?;
        teacher_update(&mut run.state);

        // Ledger: pixels that actually contributed to the unsupervised loss.
        let mut step_counts = vec![0u64; classes];
        for (pseudo, w) in strong_pseudo.iter().zip(&weights) {
            for (c, n) in ledger_counts(pseudo, w, classes).into_iter().enumerate() {
                step_counts[c] += n;
            }
        }
        run.ledger.record_step(step, &step_counts)?;

        last_loss = FinalLoss {
            total: lt,
            supervised: ls,
            unsupervised: lu,
        };
        trace.push(StepTrace {
            step,
            acm: run.cfg.acm && !strong_imgs.is_empty(),
            acp_pastes,
            aes: run.cfg.aes && !strong_imgs.is_empty(),
            dr: run.cfg.dr && !strong_imgs.is_empty(),
            loss_total: lt,
            loss_supervised: ls,
            loss_unsupervised: lu,
        });

        if run.state.step.is_multiple_of(200) {
            log::info!(
                "step {}/{}: loss {:.4} (sup {:.4}, unsup {:.4})",
                run.state.step,
                run.cfg.max_iter,
                lt,
                ls,
                lu
            );
        }
        if run.cfg.checkpoint_every > 0
            && run.state.step.is_multiple_of(run.cfg.checkpoint_every)
            && run.state.step < run.cfg.max_iter
        {
            let path = checkpoints_dir.join(format!("step_{:06}.ckpt", run.state.step));
            make_checkpoint(&run).save(&path)?;
        }
    }

    let final_checkpoint = checkpoints_dir.join("final.ckpt");
    make_checkpoint(&run).save(&final_checkpoint)?;

    // Final single-scale evaluation of the student on the validation split.
    let val_ds = load_split(&PathBuf::from(&run.cfg.data_dir).join("val"))?;
    let eval = evaluate_weights(&run.state.student, &val_ds, &run.tail_classes)?;

    let metrics = TrainMetrics {
        steps: run.state.step,
        classes,
        labeled_images: labeled_ids.len(),
        unlabeled_images: unlabeled_ids.len(),
        tail_classes: run.tail_classes.clone(),
        final_loss: last_loss,
        eval,
        ledger_tail_share: run.ledger.class_share(&run.tail_classes),
    };
    std::fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    run.ledger.write_csv(&out_dir.join("ledger.csv"))?;
    write_trace_csv(&out_dir.join("trace.csv"), &trace)?;

    Ok(TrainResult {
        metrics,
        trace,
        out_dir: out_dir.to_path_buf(),
        final_checkpoint,
    })
}

fn make_checkpoint(run: &RunState) -> Checkpoint {
    Checkpoint {
        config_text: run.cfg.to_resolved_text(),
        rng_seed: run.cfg.seed,
        state: run.state.clone(),
        bank: run.bank.clone(),
        dict: run.dict.clone(),
        tail_classes: run.tail_classes.clone(),
        ledger: run.ledger.clone(),
    }
}

fn write_trace_csv(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "acm",
        "acp_pastes",
        "aes",
        "dr",
        "loss_total",
        "loss_supervised",
        "loss_unsupervised",
    ])?;
    for t in trace {
        w.write_record([
            t.step.to_string(),
            t.acm.to_string(),
            t.acp_pastes.to_string(),
            t.aes.to_string(),
            t.dr.to_string(),
            format!("{}", t.loss_total),
            format!("{}", t.loss_supervised),
            format!("{}", t.loss_unsupervised),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Single-scale evaluation of one weight matrix over a dataset split.
pub fn evaluate_weights(weights: &ModelWeights, ds: &Dataset, tail_classes: &[usize]) -> Result<IouReport> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if ds.meta.classes != weights.classes() {
        return Err(Error::Config(format!(
            "model has {} classes but dataset declares {}",
            weights.classes(),
            ds.meta.classes
        )));
    }
    let mut cm = ConfusionMatrix::new(ds.meta.classes);
    for i in 0..ds.len() {
        let (img, gt) = ds.pair(i);
        let pred = argmax_mask(&predict_probs(weights, img)?);
        cm.accumulate(&pred, gt)?;
    }
    Ok(iou_report(&cm, tail_classes))
}

/// Load a checkpoint and evaluate its student on a split. `data_dir`
/// overrides the checkpoint's `data.dir` when given.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    data_dir: Option<&Path>,
    split: Split,
) -> Result<IouReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ckpt.config_text)?;
    let root = data_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
    let ds = load_split(&root.join(split.dir_name()))?;
    evaluate_weights(&ckpt.state.student, &ds, &ckpt.tail_classes)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// One row of the component grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub dr: bool,
    pub aes: bool,
    pub acm: bool,
    pub acp: bool,
}

impl AblationRow {
    pub const BASELINE: AblationRow = AblationRow {
        dr: false,
        aes: false,
        acm: false,
        acp: false,
    };

    /// Parse a comma-separated flag list such as `dr,aes`; `none` or the
    /// empty string is the baseline.
    pub fn parse(s: &str) -> Result<Self> {
        let mut row = Self::BASELINE;
        let trimmed = s.trim();
        if trimmed.is_empty() || trimmed == "none" {
            return Ok(row);
        }
        for part in trimmed.split(',') {
            match part.trim() {
                "dr" => row.dr = true,
                "aes" => row.aes = true,
                "acm" => row.acm = true,
                "acp" => row.acp = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation flag '{other}' (expected dr|aes|acm|acp)"
                    )))
                }
            }
        }
        Ok(row)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.dr {
            parts.push("dr");
        }
        if self.aes {
            parts.push("aes");
        }
        if self.acm {
            parts.push("acm");
        }
        if self.acp {
            parts.push("acp");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// The full 8-row component grid: baseline, each component alone, then the
/// progressive combinations up to everything on.
pub fn table4_rows() -> Vec<AblationRow> {
    let mk = |dr, aes, acm, acp| AblationRow { dr, aes, acm, acp };
    vec![
        mk(false, false, false, false),
        mk(true, false, false, false),
        mk(false, true, false, false),
        mk(false, false, true, false),
        mk(false, false, false, true),
        mk(true, true, false, false),
        mk(true, true, true, false),
        mk(true, true, true, true),
    ]
}

/// Aggregated result of one grid row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub dr: bool,
    pub aes: bool,
    pub acm: bool,
    pub acp: bool,
    pub seeds: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub miou_tail_mean: f64,
    pub miou_tail_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Run every grid row over `seeds` consecutive seeds starting at the base
/// config's seed; duplicate rows are collapsed. Writes `table4.csv` under
/// `out_dir` and returns the cells in row order.
pub fn run_ablation(
    base: &RunConfig,
    rows: &[AblationRow],
    seeds: usize,
    out_dir: &Path,
) -> Result<Vec<AblationCell>> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut grid: Vec<AblationRow> = Vec::new();
    for row in rows {
        if !grid.contains(row) {
            grid.push(*row);
        }
    }
    if grid.is_empty() {
        grid.push(AblationRow::BASELINE);
    }

    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::with_capacity(grid.len());
    for row in &grid {
        let mut mious = Vec::with_capacity(seeds);
        let mut tails = Vec::with_capacity(seeds);
        for offset in 0..seeds {
            let mut cfg = base.clone();
            cfg.dr = row.dr;
            cfg.aes = row.aes;
            cfg.acm = row.acm;
            cfg.acp = row.acp;
            cfg.seed = base.seed + offset as u64;
            let cell_dir = out_dir.join(format!("cells/{}_seed{}", row.label(), cfg.seed));
            let result = train(&cfg, &cell_dir)?;
            mious.push(result.metrics.eval.miou);
            tails.push(result.metrics.eval.miou_tail);
        }
        let (miou_mean, miou_std) = mean_std(&mious);
        let (miou_tail_mean, miou_tail_std) = mean_std(&tails);
        cells.push(AblationCell {
            dr: row.dr,
            aes: row.aes,
            acm: row.acm,
            acp: row.acp,
            seeds,
            miou_mean,
            miou_std,
            miou_tail_mean,
            miou_tail_std,
        });
    }

    let mut w = csv::Writer::from_path(out_dir.join("table4.csv"))?;
    w.write_record([
        "dr",
        "aes",
        "acm",
        "acp",
        "seeds",
        "miou_mean",
        "miou_std",
        "miou_tail_mean",
        "miou_tail_std",
    ])?;
    for c in &cells {
        w.write_record([
            c.dr.to_string(),
            c.aes.to_string(),
            c.acm.to_string(),
            c.acp.to_string(),
            c.seeds.to_string(),
            format!("{:.6}", c.miou_mean),
            format!("{:.6}", c.miou_std),
            format!("{:.6}", c.miou_tail_mean),
            format!("{:.6}", c.miou_tail_std),
        ])?;
    }
    w.flush()?;
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Human-readable report
// ---------------------------------------------------------------------------

/// Render the aligned-text report of a finished run directory: final metrics
/// and, when present, the ablation table.
pub fn render_report(out_dir: &Path) -> Result<String> {
    use std::fmt::Write as _;
    let mut s = String::new();

    let metrics_path = out_dir.join("metrics.json");
    if metrics_path.exists() {
        let metrics: TrainMetrics = serde_json::from_str(&std::fs::read_to_string(&metrics_path)?)?;
        let _ = writeln!(s, "Run summary ({})", out_dir.display());
        let _ = writeln!(
            s,
            "  steps {}   labeled {}   unlabeled {}",
            metrics.steps, metrics.labeled_images, metrics.unlabeled_images
        );
        let _ = writeln!(
            s,
            "  final loss {:.4} (supervised {:.4}, unsupervised {:.4})",
            metrics.final_loss.total, metrics.final_loss.supervised, metrics.final_loss.unsupervised
        );
        let _ = writeln!(s, "\n  {:<8} {:>10}  tail", "class", "IoU");
        for (c, iou) in metrics.eval.per_class.iter().enumerate() {
            let tail_mark = if metrics.tail_classes.contains(&c) { "*" } else { "" };
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "  {:<8} {:>10.4}  {}", c, v, tail_mark);
                }
                None => {
                    let _ = writeln!(s, "  {:<8} {:>10}  {}", c, "absent", tail_mark);
                }
            }
        }
        let _ = writeln!(
            s,
            "\n  mIoU {:.4}   mIoU_tail {:.4}   ledger tail share {:.4}",
            metrics.eval.miou, metrics.eval.miou_tail, metrics.ledger_tail_share
        );
    }

    let table_path = out_dir.join("table4.csv");
    if table_path.exists() {
        let mut reader = csv::Reader::from_path(&table_path)?;
        let _ = writeln!(
            s,
            "\nComponent grid\n  {:<4} {:<4} {:<4} {:<4} {:>6} {:>18} {:>18}",
            "DR", "AES", "ACM", "ACP", "seeds", "mIoU", "mIoU_tail"
        );
        for record in reader.records() {
            let r = record?;
            let onoff = |v: &str| if v == "true" { "x" } else { "-" };
            let _ = writeln!(
                s,
                "  {:<4} {:<4} {:<4} {:<4} {:>6} {:>9} ± {:>6} {:>9} ± {:>6}",
                onoff(&r[0]),
                onoff(&r[1]),
                onoff(&r[2]),
                onoff(&r[3]),
                &r[4],
                &r[5],
                &r[6],
                &r[7],
                &r[8]
            );
        }
    }

    if s.is_empty() {
        return Err(Error::Data {
            path: out_dir.to_path_buf(),
            message: "no metrics.json or table4.csv found; run train or ablate first".into(),
        });
    }
    Ok(s)
}
