//! Student–teacher self-training: pseudo-label generation, the combined
//! supervised + unsupervised loss, MeanTeacher and FixMatch teacher
//! variants, supervised source pretraining, and the joint and separate
//! adaptation loops.
//!
//! All three loops run through one engine so that the degenerate cases hold
//! structurally: joint training with an empty target set is supervised
//! training, and a pseudo-label whose weights are all zero contributes
//! exactly zero loss and zero gradient.

use crate::augment::{strong_augment, weak_augment};
use crate::config::{Method, MethodSpec, PseudoTarget, RunKind, Strategy, TrainConfig};
use crate::consensus::{consensus_response, filter_weights, masked_fraction};
use crate::data::{PatchSampler, Sample};
use crate::error::{Error, Result};
use crate::image::{ImagePatch, LabelMask, SegmentationOutput};
use crate::losses::{dice_score, punet_loss, punet_loss_grads, LossValue};
use crate::metrics::{EvalReport, StepRecord};
use crate::model::{GaussianGrad, PUNet};
use crate::optim::{Adam, PlateauScheduler};
use crate::rng::{derive_rng, Stream};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Distinguishes the teacher latent stream from the student one within the
/// same iteration.
const TEACHER_WORD: u64 = 1 << 32;

/// How the teacher's weights relate to the student's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TeacherMode {
    /// Separate weights, updated as `w_t = alpha * w_t + (1 - alpha) * w_s`
    /// after every student step.
    EmaTeacher { alpha: f64 },
    /// The teacher is the student; pseudo-labels use the current weights.
    SharedWeights,
}

impl TeacherMode {
    pub fn for_method(method: Method, alpha: f64) -> Result<TeacherMode> {
        match method {
            Method::MeanTeacher => {
                // alpha = 1 freezes the teacher; useful as a fixed point even
                // though configs require alpha < 1.
                if !(0.0 < alpha && alpha <= 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "ema coefficient {alpha} must lie in (0, 1]"
                    )));
                }
                Ok(TeacherMode::EmaTeacher { alpha })
            }
            Method::FixMatch => Ok(TeacherMode::SharedWeights),
        }
    }
}

/// A detached training target for one unlabeled image. Plain data: nothing
/// here participates in any gradient computation.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    /// Soft teacher probabilities, aligned pixel-for-pixel with the input
    /// (augmentations never move pixels).
    pub target: SegmentationOutput,
    /// Per-pixel loss weights from the consensus filter.
    pub weights: Array2<f64>,
    /// The unfiltered consensus response, kept for reporting.
    pub consensus: Array2<f64>,
}

fn adapt_spec(cfg: &TrainConfig) -> Result<MethodSpec> {
    match cfg.run_kind()? {
        RunKind::Adapt(spec) => Ok(spec),
        RunKind::Source => Err(Error::Config(
            "pseudo-labels need an adaptation method, not a source run".into(),
        )),
    }
}

/// Generate a pseudo-label: weak-augment the input, draw `n_samples`
/// prior-based teacher predictions, take the configured target, and weight
/// pixels by the filtered consensus response. The whole computation is
/// detached from gradient tracking.
pub fn make_pseudo_label(
    teacher: &PUNet,
    x_u: &ImagePatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoLabel> {
    let spec = adapt_spec(cfg)?;
    let weak = weak_augment(x_u, rng)?;
    let samples = teacher.predict_samples(&weak, cfg.selftrain.n_samples, rng)?;
    let target = match cfg.selftrain.pseudo_target {
        PseudoTarget::FirstSample => samples[0].clone(),
        PseudoTarget::MeanOfSamples => SegmentationOutput::mean_of(&samples)?,
    };
    let consensus = consensus_response(&samples, cfg.selftrain.theta)?;
    let weights = filter_weights(&consensus, spec.filter);
    Ok(PseudoLabel {
        target,
        weights,
        consensus,
    })
}

/// The student's augmented view of an unlabeled image: strong for FixMatch,
/// weak for MeanTeacher.
fn student_view(x_u: &ImagePatch, method: Method, rng: &mut ChaCha8Rng) -> Result<ImagePatch> {
    match method {
        Method::FixMatch => strong_augment(x_u, rng),
        Method::MeanTeacher => weak_augment(x_u, rng),
    }
}

/// Outcome of the unsupervised loss on one image or one batch.
#[derive(Debug, Clone, Copy)]
pub struct UnsupervisedOutcome {
    pub loss: LossValue,
    /// True when every pixel weight is zero, so the image contributed
    /// nothing.
    pub all_masked: bool,
    /// Fraction of pixels with exactly-zero weight.
    pub masked_fraction: f64,
    pub mean_consensus: f64,
}

impl Default for UnsupervisedOutcome {
    fn default() -> Self {
        Self {
            loss: LossValue {
                total: 0.0,
                reconstruction: 0.0,
                kl: 0.0,
            },
            all_masked: false,
            masked_fraction: 0.0,
            mean_consensus: 0.0,
        }
    }
}

/// Unsupervised loss for one image: the student predicts its own augmented
/// view through a prior latent sample, scored against the frozen
/// pseudo-label with the pseudo-label's pixel weights. No posterior exists
/// without a true label, so the variational term is zero here.
pub fn unsupervised_loss(
    student: &PUNet,
    x_u: &ImagePatch,
    pl: &PseudoLabel,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UnsupervisedOutcome> {
    let spec = adapt_spec(cfg)?;
    let view = student_view(x_u, spec.method, rng)?;
    let (seg, _prior, _cache) = student.forward_prior_cached(&view, rng)?;
    let loss = punet_loss(
        seg.probabilities(),
        pl.target.probabilities(),
        None,
        cfg.optim.kl_weight,
        Some(&pl.weights),
    )?;
    Ok(outcome_for(loss, pl))
}

fn outcome_for(loss: LossValue, pl: &PseudoLabel) -> UnsupervisedOutcome {
    let mf = masked_fraction(&pl.weights);
    UnsupervisedOutcome {
        loss,
        all_masked: mf == 1.0,
        masked_fraction: mf,
        mean_consensus: pl.consensus.mean().unwrap_or(0.0),
    }
}

/// Full supervised loss for one labeled image: posterior-sampled prediction
/// plus the weighted divergence between posterior and prior.
pub fn supervised_loss(
    student: &PUNet,
    x_s: &ImagePatch,
    y_s: &LabelMask,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossValue> {
    let target = y_s.to_target();
    let (seg, prior, posterior) = student.forward_train(x_s, &target, rng)?;
    punet_loss(
        seg.probabilities(),
        &target,
        Some((&posterior, &prior)),
        cfg.optim.kl_weight,
        None,
    )
}

/// `w_t = alpha * w_t + (1 - alpha) * w_s` over every parameter.
pub fn ema_update(teacher: &mut PUNet, student: &PUNet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "ema coefficient {alpha} must lie in [0, 1]"
        )));
    }
    teacher.ema_from(student, alpha)
}

// -- gradient helpers -------------------------------------------------------

fn supervised_item_grads(
    student: &PUNet,
    x: &ImagePatch,
    y: &LabelMask,
    beta: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut PUNet,
) -> Result<LossValue> {
    let target = y.to_target();
    let (seg, prior, posterior, cache) = student.forward_train_cached(x, &target, rng)?;
    let (loss, g_pred, g_gauss) = punet_loss_grads(
        seg.probabilities(),
        &target,
        Some((&posterior, &prior)),
        beta,
        None,
    )?;
    let (g_posterior, g_prior) = g_gauss.expect("variational gradients on the supervised path");
    student.backward_train(&cache, &g_pred, &g_prior, &g_posterior, grads);
    Ok(loss)
}

fn unsupervised_item_grads(
    student: &PUNet,
    view: &ImagePatch,
    pl: &PseudoLabel,
    beta: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut PUNet,
) -> Result<UnsupervisedOutcome> {
    let (seg, prior, cache) = student.forward_prior_cached(view, rng)?;
    let (loss, g_pred, _) = punet_loss_grads(
        seg.probabilities(),
        pl.target.probabilities(),
        None,
        beta,
        Some(&pl.weights),
    )?;
    student.backward_prior(&cache, &g_pred, &GaussianGrad::zeros(prior.dim()), grads);
    Ok(outcome_for(loss, pl))
}

fn scale_loss(v: LossValue, s: f64) -> LossValue {
    LossValue {
        total: v.total * s,
        reconstruction: v.reconstruction * s,
        kl: v.kl * s,
    }
}

/// Per-item work runs in parallel; the reduction is sequential in batch
/// order, so results do not depend on worker scheduling.
fn supervised_batch(
    student: &PUNet,
    batch: &[Sample],
    beta: f64,
    seed: u64,
    iteration: u64,
) -> Result<(LossValue, PUNet)> {
    let parts: Vec<(LossValue, PUNet)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "sample {} of domain {:?} has no label",
                    s.index, s.domain
                ))
            })?;
            let mut rng = derive_rng(seed, Stream::Latent, iteration, i as u64);
            let mut grads = student.zeros_like();
            let loss = supervised_item_grads(student, &s.image, mask, beta, &mut rng, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = LossValue {
        total: 0.0,
        reconstruction: 0.0,
        kl: 0.0,
    };
    let mut grads = student.zeros_like();
    for (loss, g) in &parts {
        total.total += loss.total;
        total.reconstruction += loss.reconstruction;
        total.kl += loss.kl;
        grads.add_scaled(g, 1.0);
    }
    Ok((total, grads))
}

fn unsupervised_batch(
    student: &PUNet,
    teacher: &PUNet,
    batch: &[Sample],
    cfg: &TrainConfig,
    method: Method,
    seed: u64,
    iteration: u64,
) -> Result<(UnsupervisedOutcome, PUNet)> {
    let beta = cfg.optim.kl_weight;
    let parts: Vec<(UnsupervisedOutcome, PUNet)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut t_rng = derive_rng(seed, Stream::TeacherAugment, iteration, i as u64);
            let pl = make_pseudo_label(teacher, &s.image, cfg, &mut t_rng)?;
            let mut a_rng = derive_rng(seed, Stream::StudentAugment, iteration, i as u64);
            let view = student_view(&s.image, method, &mut a_rng)?;
            let mut l_rng = derive_rng(seed, Stream::Latent, iteration, TEACHER_WORD | i as u64);
            let mut grads = student.zeros_like();
            let outcome =
                unsupervised_item_grads(student, &view, &pl, beta, &mut l_rng, &mut grads)?;
            Ok((outcome, grads))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut acc = UnsupervisedOutcome {
        all_masked: true,
        ..UnsupervisedOutcome::default()
    };
    let mut grads = student.zeros_like();
    for (o, g) in &parts {
        acc.loss.total += o.loss.total;
        acc.loss.reconstruction += o.loss.reconstruction;
        acc.loss.kl += o.loss.kl;
        acc.masked_fraction += o.masked_fraction / n;
        acc.mean_consensus += o.mean_consensus / n;
        acc.all_masked &= o.all_masked;
        grads.add_scaled(g, 1.0);
    }
    Ok((acc, grads))
}

// -- evaluation -------------------------------------------------------------

/// Mean per-image dice of the thresholded (>= 0.5 means foreground)
/// mean-of-samples prediction against ground truth. Deterministic: each
/// image's latent draws derive from the seed and the image index only.
pub fn evaluate(model: &PUNet, data: &[Sample], n_samples: usize, seed: u64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation needs at least one labeled image".into(),
        ));
    }
    let per_image_dice: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "sample {} of domain {:?} has no label to evaluate against",
                    s.index, s.domain
                ))
            })?;
            let mut rng = derive_rng(seed, Stream::Evaluation, s.index as u64, 0);
            let samples = model.predict_samples(&s.image, n_samples, &mut rng)?;
            let mean = SegmentationOutput::mean_of(&samples)?;
            let hard = LabelMask::from_probabilities(&mean.class_plane(0));
            dice_score(&hard.to_target(), &mask.to_target(), None)
        })
        .collect::<Result<_>>()?;
    let mean_dice = per_image_dice.iter().sum::<f64>() / per_image_dice.len() as f64;
    Ok(EvalReport {
        domain: data[0].domain.clone(),
        split: "eval".into(),
        n_images: per_image_dice.len(),
        mean_dice,
        per_image_dice,
    })
}

// -- training loops ---------------------------------------------------------

/// Where a finished loop leaves its weights.
#[derive(Debug)]
pub struct TrainOutput {
    /// Weights at the best validation score.
    pub best_weights: PUNet,
    /// Weights after the last iteration.
    pub final_weights: PUNet,
    /// The EMA teacher, when one exists (MeanTeacher runs).
    pub final_teacher: Option<PUNet>,
    /// Best validation dice, when validation data was labeled.
    pub best_val_dice: Option<f64>,
    pub best_iteration: u64,
}

/// Rows are pushed here as they are produced; errors abort training.
pub type RecordSink<'a> = &'a mut dyn FnMut(StepRecord) -> Result<()>;

/// Supervised pretraining on labeled source data. Returns the
/// best-validation checkpoint alongside the final weights; zero iterations
/// returns the freshly initialized weights.
pub fn train_source(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    sink: RecordSink,
) -> Result<TrainOutput> {
    let student = PUNet::new(
        cfg.model.clone(),
        &mut derive_rng(cfg.seed, Stream::WeightInit, 0, 0),
    )?;
    run_loop(cfg, student, None, None, Some(train), None, val, sink)
}

/// Joint adaptation: every iteration takes one labeled source batch and one
/// unlabeled target batch, steps the student on the summed loss, then
/// updates the teacher. An empty target set degenerates to supervised
/// training.
pub fn train_joint(
    cfg: &TrainConfig,
    source_train: &[Sample],
    target_train: &[Sample],
    val: &[Sample],
    sink: RecordSink,
) -> Result<TrainOutput> {
    let spec = adapt_spec(cfg)?;
    if spec.strategy != Strategy::Joint {
        return Err(Error::Config(format!(
            "config run {:?} is not a joint method",
            cfg.run
        )));
    }
    let student = PUNet::new(
        cfg.model.clone(),
        &mut derive_rng(cfg.seed, Stream::WeightInit, 0, 0),
    )?;
    let mode = TeacherMode::for_method(spec.method, cfg.selftrain.alpha)?;
    let target = if target_train.is_empty() {
        None
    } else {
        Some(target_train)
    };
    run_loop(
        cfg,
        student,
        Some(mode),
        Some(spec),
        Some(source_train),
        target,
        val,
        sink,
    )
}

/// Separate adaptation: fine-tune a pretrained model on unlabeled target
/// data only. The teacher starts as a copy of the student; no source data is
/// accepted or touched.
pub fn adapt_separate(
    cfg: &TrainConfig,
    pretrained: PUNet,
    target_train: &[Sample],
    val: &[Sample],
    sink: RecordSink,
) -> Result<TrainOutput> {
    let spec = adapt_spec(cfg)?;
    if spec.strategy != Strategy::Separate {
        return Err(Error::Config(format!(
            "config run {:?} is not a separate method",
            cfg.run
        )));
    }
    if target_train.is_empty() {
        return Err(Error::InvalidInput(
            "separate adaptation needs target data".into(),
        ));
    }
    let mode = TeacherMode::for_method(spec.method, cfg.selftrain.alpha)?;
    run_loop(
        cfg,
        pretrained,
        Some(mode),
        Some(spec),
        None,
        Some(target_train),
        val,
        sink,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    cfg: &TrainConfig,
    mut student: PUNet,
    mode: Option<TeacherMode>,
    spec: Option<MethodSpec>,
    source: Option<&[Sample]>,
    target: Option<&[Sample]>,
    val: &[Sample],
    sink: RecordSink,
) -> Result<TrainOutput> {
    cfg.model.validate()?;
    let seed = cfg.seed;
    let beta = cfg.optim.kl_weight;
    let batch_size = cfg.schedule.batch_size;
    let patch = cfg.schedule.patch_shape;
    let total = cfg.schedule.total_iterations;

    let mut teacher = match mode {
        Some(TeacherMode::EmaTeacher { .. }) if target.is_some() => Some(student.clone()),
        _ => None,
    };

    let mut source_sampler = source
        .map(|s| {
            PatchSampler::new(
                s.to_vec(),
                patch,
                batch_size,
                derive_rng(seed, Stream::SourceBatches, 0, 0),
            )
        })
        .transpose()?;
    let mut target_sampler = target
        .map(|s| {
            PatchSampler::new(
                s.to_vec(),
                patch,
                batch_size,
                derive_rng(seed, Stream::TargetBatches, 0, 0),
            )
        })
        .transpose()?;

    let mut adam = Adam::new(&student, cfg.optim.learning_rate);
    let mut scheduler = PlateauScheduler::new(
        cfg.optim.plateau_factor,
        cfg.optim.plateau_patience,
        cfg.optim.plateau_min_delta,
        cfg.optim.min_learning_rate,
    );
    let mut best_weights = student.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_val_dice = None;
    let mut best_iteration = 0u64;
    // fallback plateau signal when no labeled validation data exists
    let mut window_loss = 0.0;
    let mut window_len = 0u64;

    for it in 0..total {
        let iteration = it + 1;
        let learning_rate = adam.learning_rate;
        let mut grads = student.zeros_like();

        let mut sup = LossValue {
            total: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
        };
        if let Some(sampler) = source_sampler.as_mut() {
            let batch = sampler.next_batch();
            let (loss_sum, grad_sum) = supervised_batch(&student, &batch, beta, seed, iteration)?;
            sup = scale_loss(loss_sum, 1.0 / batch_size as f64);
            grads.add_scaled(&grad_sum, 1.0 / batch_size as f64);
        }

        let mut unsup = UnsupervisedOutcome::default();
        if let Some(sampler) = target_sampler.as_mut() {
            let method = spec
                .expect("target data implies an adaptation method")
                .method;
            let batch = sampler.next_batch();
            let teacher_ref = teacher.as_ref().unwrap_or(&student);
            let (mut outcome, grad_sum) =
                unsupervised_batch(&student, teacher_ref, &batch, cfg, method, seed, iteration)?;
            outcome.loss = scale_loss(outcome.loss, 1.0 / batch_size as f64);
            unsup = outcome;
            grads.add_scaled(&grad_sum, 1.0 / batch_size as f64);
        }

        let loss_total = sup.total + unsup.loss.total;
        if !loss_total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!(
                    "loss became non-finite (supervised {}, unsupervised {})",
                    sup.total, unsup.loss.total
                ),
            });
        }

        adam.step(&mut student, &grads)?;
        if let (Some(t), Some(TeacherMode::EmaTeacher { alpha })) = (teacher.as_mut(), mode) {
            ema_update(t, &student, alpha)?;
        }

        window_loss += loss_total;
        window_len += 1;

        let mut val_dice = None;
        if iteration % cfg.schedule.val_interval == 0 || iteration == total {
            val_dice = labeled_val_dice(&student, val, cfg.selftrain.n_samples, seed)?;
            let score = match val_dice {
                Some(d) => d,
                None => -(window_loss / window_len.max(1) as f64),
            };
            if score > best_score {
                best_score = score;
                best_weights = student.clone();
                best_val_dice = val_dice;
                best_iteration = iteration;
            }
            adam.learning_rate = scheduler.observe(score, adam.learning_rate);
            window_loss = 0.0;
            window_len = 0;
        }

        sink(StepRecord {
            iteration,
            loss_total,
            loss_supervised: sup.total,
            loss_unsupervised: unsup.loss.total,
            kl: sup.kl + unsup.loss.kl,
            masked_fraction: unsup.masked_fraction,
            mean_consensus: unsup.mean_consensus,
            val_dice,
            learning_rate,
        })?;
    }

    Ok(TrainOutput {
        best_weights,
        final_weights: student,
        final_teacher: teacher,
        best_val_dice,
        best_iteration,
    })
}

fn labeled_val_dice(
    model: &PUNet,
    val: &[Sample],
    n_samples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if val.is_empty() || val.iter().any(|s| s.mask.is_none()) {
        return Ok(None);
    }
    Ok(Some(evaluate(model, val, n_samples, seed)?.mean_dice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, OptimConfig, ScheduleConfig, SelfTrainConfig};
    use crate::consensus::FilterMode;
    use crate::data::{generate_domain, DomainSpec};
    use crate::model::PUNetConfig;
    use ndarray::Array3;

    fn tiny_model_config() -> PUNetConfig {
        PUNetConfig {
            ladder: vec![2, 3],
            latent_dim: 2,
            classes: 1,
        }
    }

    fn tiny_config(run: &str, iterations: u64) -> TrainConfig {
        TrainConfig {
            run: run.into(),
            seed: 9,
            model: tiny_model_config(),
            data: DataConfig {
                root: "unused".into(),
                source: Some("source".into()),
                target: Some("target".into()),
            },
            optim: OptimConfig {
                learning_rate: 1e-2,
                ..OptimConfig::default()
            },
            schedule: ScheduleConfig {
                total_iterations: iterations,
                batch_size: 2,
                patch_shape: (8, 8),
                val_interval: 1000,
            },
            selftrain: SelfTrainConfig {
                n_samples: 3,
                ..SelfTrainConfig::default()
            },
        }
    }

    fn tiny_model(seed: u64) -> PUNet {
        PUNet::new(
            tiny_model_config(),
            &mut derive_rng(seed, Stream::WeightInit, 0, 0),
        )
        .unwrap()
    }

    fn tiny_domain(seed: u64, n: usize) -> Vec<Sample> {
        let spec = DomainSpec {
            name: "source".into(),
            image_size: (12, 12),
            blob_count_range: (1, 2),
            blob_radius_range: (2.0, 4.0),
            foreground_intensity: 0.9,
            background_intensity: 0.1,
            texture_noise_sigma: 0.02,
            blur_sigma: 0.0,
            invert: false,
            seed,
        };
        generate_domain(&spec, n).unwrap()
    }

    fn test_patch(seed: u64) -> ImagePatch {
        let mut rng = derive_rng(seed, Stream::Generator, 5, 5);
        let pixels =
            Array2::from_shape_fn((8, 8), |_| rand::Rng::random_range(&mut rng, 0.0..=1.0));
        ImagePatch::new(pixels).unwrap()
    }

    #[test]
    fn nofilter_weights_are_all_ones() {
        let model = tiny_model(1);
        let cfg = tiny_config("mt_j", 1);
        let mut rng = derive_rng(2, Stream::TeacherAugment, 0, 0);
        let pl = make_pseudo_label(&model, &test_patch(3), &cfg, &mut rng).unwrap();
        assert!(pl.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn single_sample_mask_is_a_hard_confidence_gate() {
        let model = tiny_model(4);
        let mut cfg = tiny_config("fm_j_m", 1);
        cfg.selftrain.n_samples = 1;
        cfg.selftrain.theta = 0.5;
        let x = test_patch(6);
        let mut rng = derive_rng(7, Stream::TeacherAugment, 0, 0);
        let pl = make_pseudo_label(&model, &x, &cfg, &mut rng).unwrap();
        // with one sample the consensus is the indicator of confidence >= theta
        for (w, &p) in pl.weights.iter().zip(pl.target.probabilities().iter()) {
            assert_eq!(*w, if p >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn pseudo_label_matches_manual_recomputation() {
        let model = tiny_model(8);
        let cfg = tiny_config("mt_j_w", 1);
        let x = test_patch(9);
        let mut rng = derive_rng(10, Stream::TeacherAugment, 0, 0);
        let mut manual_rng = rng.clone();
        let pl = make_pseudo_label(&model, &x, &cfg, &mut rng).unwrap();

        let weak = weak_augment(&x, &mut manual_rng).unwrap();
        let samples = model
            .predict_samples(&weak, cfg.selftrain.n_samples, &mut manual_rng)
            .unwrap();
        assert_eq!(pl.target.probabilities(), samples[0].probabilities());
        let consensus = consensus_response(&samples, cfg.selftrain.theta).unwrap();
        assert_eq!(pl.consensus, consensus);
        assert_eq!(pl.weights, filter_weights(&consensus, FilterMode::Weight));
    }

    #[test]
    fn mean_target_flag_averages_all_samples() {
        let model = tiny_model(8);
        let mut cfg = tiny_config("mt_j", 1);
        cfg.selftrain.pseudo_target = PseudoTarget::MeanOfSamples;
        let x = test_patch(9);
        let mut rng = derive_rng(10, Stream::TeacherAugment, 0, 0);
        let mut manual_rng = rng.clone();
        let pl = make_pseudo_label(&model, &x, &cfg, &mut rng).unwrap();

        let weak = weak_augment(&x, &mut manual_rng).unwrap();
        let samples = model
            .predict_samples(&weak, cfg.selftrain.n_samples, &mut manual_rng)
            .unwrap();
        let mean = SegmentationOutput::mean_of(&samples).unwrap();
        assert_eq!(pl.target.probabilities(), mean.probabilities());
    }

    /// The pseudo-label is plain data: gradients treat its target and
    /// weights as constants. Identical frozen labels give bitwise identical
    /// gradients regardless of which teacher produced them, and finite
    /// differences on the student parameters (label frozen) match the
    /// analytic gradients.
    #[test]
    fn stop_gradient_double_evaluation() {
        let model = tiny_model(11);
        let cfg = tiny_config("mt_j_w", 1);
        let x = test_patch(12);

        let mut rng_a = derive_rng(13, Stream::TeacherAugment, 0, 0);
        let pl = make_pseudo_label(&model, &x, &cfg, &mut rng_a).unwrap();
        let mut rng_a2 = derive_rng(13, Stream::TeacherAugment, 0, 0);
        let teacher_copy = model.clone();
        let pl2 = make_pseudo_label(&teacher_copy, &x, &cfg, &mut rng_a2).unwrap();

        // a different generation rng changes the target itself
        let mut rng_b = derive_rng(14, Stream::TeacherAugment, 0, 0);
        let pl_other = make_pseudo_label(&model, &x, &cfg, &mut rng_b).unwrap();
        assert_ne!(pl.target.probabilities(), pl_other.target.probabilities());

        let view = x.clone(); // fixed student view isolates the loss gradient
        let grads_of = |label: &PseudoLabel| {
            let mut grads = model.zeros_like();
            let mut rng = derive_rng(15, Stream::Latent, 0, 0);
            let out =
                unsupervised_item_grads(&model, &view, label, 1.0, &mut rng, &mut grads).unwrap();
            (out, grads)
        };
        let (out1, grads1) = grads_of(&pl);
        let (_, grads2) = grads_of(&pl2);
        assert_eq!(grads1.max_abs_param_diff(&grads2), 0.0);

        // finite differences with the label frozen
        let loss_at = |m: &PUNet| {
            let mut rng = derive_rng(15, Stream::Latent, 0, 0);
            let (seg, _, _) = m.forward_prior_cached(&view, &mut rng).unwrap();
            punet_loss(
                seg.probabilities(),
                pl.target.probabilities(),
                None,
                1.0,
                Some(&pl.weights),
            )
            .unwrap()
            .total
        };
        assert!((loss_at(&model) - out1.loss.total).abs() < 1e-12);
        let h = 1e-5;
        let names: Vec<String> = model.param_views().iter().map(|(n, _)| n.clone()).collect();
        for name in names.iter().filter(|n| n.ends_with("bias")).take(4) {
            let flat_grad = {
                let views = grads1.param_views();
                let (_, v) = views.iter().find(|(n, _)| n == name).unwrap();
                v.iter().copied().collect::<Vec<f64>>()
            };
            for idx in 0..flat_grad.len().min(2) {
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    {
                        let mut views = m.param_views_mut();
                        let (_, v) = views.iter_mut().find(|(n, _)| n == name).unwrap();
                        *v.iter_mut().nth(idx).unwrap() += delta;
                    }
                    loss_at(&m)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let analytic = flat_grad[idx];
                let scale = analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-3,
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn ema_gap_follows_the_closed_form() {
        let mut teacher = tiny_model(20);
        teacher.zero_params();
        let mut student = tiny_model(21);
        for (_, mut v) in student.param_views_mut() {
            v.fill(1.0);
        }
        let alpha: f64 = 0.999;
        for k in 1..=100u32 {
            ema_update(&mut teacher, &student, alpha).unwrap();
            let expected = 1.0 - alpha.powi(k as i32);
            for (_, v) in teacher.param_views() {
                for &w in v.iter() {
                    assert!(
                        (w - expected).abs() <= 1e-10,
                        "step {k}: {w} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn ema_fixed_points() {
        let mut teacher = tiny_model(22);
        let student = teacher.clone();
        ema_update(&mut teacher, &student, 0.999).unwrap();
        assert_eq!(teacher.max_abs_param_diff(&student), 0.0);

        let mut frozen = tiny_model(23);
        let reference = frozen.clone();
        let other = tiny_model(24);
        ema_update(&mut frozen, &other, 1.0).unwrap();
        assert_eq!(frozen.max_abs_param_diff(&reference), 0.0);
    }

    #[test]
    fn ema_stays_inside_the_history_envelope() {
        let mut teacher = tiny_model(25);
        let mut lo: Vec<f64> = teacher.param_views().iter().flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>()).collect();
        let mut hi = lo.clone();
        let mut rng = derive_rng(26, Stream::Generator, 0, 0);
        for step in 0..20 {
            let student = tiny_model(100 + step + rand::Rng::random_range(&mut rng, 0..3));
            let s_flat: Vec<f64> = student
                .param_views()
                .iter()
                .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
                .collect();
            for i in 0..lo.len() {
                lo[i] = lo[i].min(s_flat[i]);
                hi[i] = hi[i].max(s_flat[i]);
            }
            ema_update(&mut teacher, &student, 0.9).unwrap();
            let t_flat: Vec<f64> = teacher
                .param_views()
                .iter()
                .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
                .collect();
            for i in 0..lo.len() {
                assert!(
                    t_flat[i] >= lo[i] - 1e-12 && t_flat[i] <= hi[i] + 1e-12,
                    "parameter {i} left its envelope"
                );
                lo[i] = lo[i].min(t_flat[i]);
                hi[i] = hi[i].max(t_flat[i]);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initial_weights() {
        let cfg = tiny_config("source", 0);
        let data = tiny_domain(30, 4);
        let out = train_source(&cfg, &data, &[], &mut |_| Ok(())).unwrap();
        let fresh = PUNet::new(
            cfg.model.clone(),
            &mut derive_rng(cfg.seed, Stream::WeightInit, 0, 0),
        )
        .unwrap();
        assert_eq!(out.best_weights.max_abs_param_diff(&fresh), 0.0);
        assert_eq!(out.final_weights.max_abs_param_diff(&fresh), 0.0);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let cfg = tiny_config("source", 4);
        let data = tiny_domain(31, 4);
        let run = || {
            let mut records = Vec::new();
            let out = train_source(&cfg, &data, &[], &mut |r| {
                records.push(r);
                Ok(())
            })
            .unwrap();
            (out, records)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.final_weights.max_abs_param_diff(&b.final_weights), 0.0);
        assert_eq!(ra, rb);
    }

    /// A joint run whose pseudo-label weights are all zero (theta = 1 makes
    /// the consensus empty, and the mask filter zeroes everything) must take
    /// exactly the supervised trajectory.
    #[test]
    fn joint_with_all_masked_targets_equals_source_training() {
        let data = tiny_domain(32, 4);
        let target = tiny_domain(33, 4);

        let mut joint_cfg = tiny_config("mt_j_m", 3);
        joint_cfg.selftrain.theta = 1.0;
        let mut joint_records = Vec::new();
        let joint = train_joint(&joint_cfg, &data, &target, &[], &mut |r| {
            joint_records.push(r);
            Ok(())
        })
        .unwrap();

        let source_cfg = tiny_config("source", 3);
        let source = train_source(&source_cfg, &data, &[], &mut |_| Ok(())).unwrap();

        assert!(joint_records.iter().all(|r| r.loss_unsupervised == 0.0));
        assert!(joint_records.iter().all(|r| r.masked_fraction == 1.0));
        let gap = joint
            .final_weights
            .max_abs_param_diff(&source.final_weights);
        assert!(gap <= 1e-7, "parameter gap {gap}");
    }

    #[test]
    fn fixmatch_shares_weights_and_meanteacher_keeps_a_teacher() {
        let data = tiny_domain(34, 4);
        let target = tiny_domain(35, 4);
        let fm = train_joint(&tiny_config("fm_j", 2), &data, &target, &[], &mut |_| Ok(()))
            .unwrap();
        assert!(fm.final_teacher.is_none());
        let mt = train_joint(&tiny_config("mt_j", 2), &data, &target, &[], &mut |_| Ok(()))
            .unwrap();
        assert!(mt.final_teacher.is_some());
    }

    /// The in-loop teacher must equal an EMA recomputed offline from the
    /// student weights after each iteration. Prefix determinism gives us
    /// those students: a run of length k reproduces the first k iterations
    /// of a longer run.
    #[test]
    fn mean_teacher_matches_offline_ema_recomputation() {
        let data = tiny_domain(36, 4);
        let target = tiny_domain(37, 4);
        let alpha = 0.9;
        let mut students = Vec::new();
        let mut teachers = Vec::new();
        for k in 0..=4u64 {
            let mut cfg = tiny_config("mt_j", k);
            cfg.selftrain.alpha = alpha;
            let out = train_joint(&cfg, &data, &target, &[], &mut |_| Ok(())).unwrap();
            teachers.push(out.final_teacher.unwrap());
            students.push(out.final_weights);
        }
        let mut offline = students[0].clone(); // teacher starts as the student copy
        assert_eq!(teachers[0].max_abs_param_diff(&offline), 0.0);
        for k in 1..=4usize {
            offline.ema_from(&students[k], alpha).unwrap();
            let gap = teachers[k].max_abs_param_diff(&offline);
            assert!(gap <= 1e-12, "iteration {k}: teacher gap {gap}");
        }
    }

    #[test]
    fn separate_adaptation_with_frozen_teacher_keeps_the_pretrained_model() {
        let target = tiny_domain(38, 4);
        let pretrained = tiny_model(39);
        let mut cfg = tiny_config("mt_s", 2);
        cfg.data.source = None;
        cfg.selftrain.alpha = 1.0;
        let out = adapt_separate(&cfg, pretrained.clone(), &target, &[], &mut |_| Ok(()))
            .unwrap();
        let teacher = out.final_teacher.unwrap();
        assert_eq!(teacher.max_abs_param_diff(&pretrained), 0.0);
        // the student itself moved
        assert!(out.final_weights.max_abs_param_diff(&pretrained) > 0.0);
    }

    #[test]
    fn supervised_training_reduces_the_loss() {
        let mut cfg = tiny_config("source", 300);
        cfg.model.ladder = vec![4, 8];
        cfg.optim.learning_rate = 3e-3;
        cfg.schedule.patch_shape = (12, 12);
        cfg.schedule.val_interval = 50;
        let data = tiny_domain(40, 10);
        let (train, val) = data.split_at(8);
        let mut records = Vec::new();
        train_source(&cfg, train, val, &mut |r| {
            records.push(r);
            Ok(())
        })
        .unwrap();
        for chunk in records.chunks(25) {
            let mean = |f: fn(&StepRecord) -> f64| {
                chunk.iter().map(f).sum::<f64>() / chunk.len() as f64
            };
            eprintln!(
                "it {:3}: total {:.4} kl {:.4} val {:?}",
                chunk[0].iteration,
                mean(|r| r.loss_total),
                mean(|r| r.kl),
                chunk.last().unwrap().val_dice
            );
        }
        let first: f64 = records[..20].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        let n = records.len();
        let last: f64 = records[n - 20..].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "mean loss did not decrease: first 20 = {first}, last 20 = {last}"
        );
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let model = tiny_model(41);
        let data = tiny_domain(42, 3);
        let a = evaluate(&model, &data, 3, 7).unwrap();
        let b = evaluate(&model, &data, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_images, 3);
        assert!(a.per_image_dice.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(
            (a.mean_dice - a.per_image_dice.iter().sum::<f64>() / 3.0).abs() < 1e-15
        );
        assert!(evaluate(&model, &[], 3, 7).is_err());
    }

    /// Pins the tie rule: probability exactly 0.5 counts as foreground, so a
    /// constant-0.5 prediction against a half-foreground mask scores
    /// 2*(S/2) / (S + S/2) = 2/3.
    #[test]
    fn threshold_convention_at_one_half() {
        let probs = Array2::from_elem((4, 4), 0.5);
        let hard = LabelMask::from_probabilities(&probs);
        assert_eq!(hard.foreground_count(), 16);
        let mut target = Array3::zeros((1, 4, 4));
        for y in 0..2 {
            for x in 0..4 {
                target[(0, y, x)] = 1.0;
            }
        }
        let dice = dice_score(&hard.to_target(), &target, None).unwrap();
        let expected = (2.0 * 8.0 + 1e-6) / (16.0 + 8.0 + 1e-6); // = 2/3 up to the smoothing term
        assert!((dice - expected).abs() < 1e-12, "dice {dice}");
    }

    #[test]
    fn unsupervised_loss_flags_fully_masked_images() {
        let model = tiny_model(43);
        let mut cfg = tiny_config("mt_j_m", 1);
        cfg.selftrain.theta = 1.0; // sigmoid outputs never reach 1.0 exactly
        let x = test_patch(44);
        let mut rng = derive_rng(45, Stream::TeacherAugment, 0, 0);
        let pl = make_pseudo_label(&model, &x, &cfg, &mut rng).unwrap();
        assert!(pl.weights.iter().all(|&w| w == 0.0));
        let mut srng = derive_rng(46, Stream::StudentAugment, 0, 0);
        let out = unsupervised_loss(&model, &x, &pl, &cfg, &mut srng).unwrap();
        assert!(out.all_masked);
        assert_eq!(out.masked_fraction, 1.0);
        assert_eq!(out.loss.total, 0.0);

        // and the gradient contribution is exactly zero too
        let mut grads = model.zeros_like();
        let mut lrng = derive_rng(47, Stream::Latent, 0, 0);
        unsupervised_item_grads(&model, &x, &pl, 1.0, &mut lrng, &mut grads).unwrap();
        assert_eq!(grads.max_abs_param_diff(&model.zeros_like()), 0.0);
    }

    #[test]
    fn filter_modes_differ_on_partial_consensus() {
        let model = tiny_model(48);
        let x = test_patch(49);
        // two teacher samples that agree on the left half and disagree on
        // the right half, so consensus is 1.0 there and 0.5 here
        let sample = |right: f64| {
            let mut p = Array3::from_elem((1, 8, 8), 0.9);
            for y in 0..8 {
                for xx in 4..8 {
                    p[(0, y, xx)] = right;
                }
            }
            SegmentationOutput::new(p).unwrap()
        };
        let samples = [sample(0.8), sample(0.2)];
        let consensus = consensus_response(&samples, 0.5).unwrap();
        assert!(consensus.iter().any(|&c| c == 0.5));
        let pl_for = |mode: FilterMode| PseudoLabel {
            target: samples[0].clone(),
            weights: filter_weights(&consensus, mode),
            consensus: consensus.clone(),
        };
        let cfg = tiny_config("mt_j_m", 1);
        let outcome_for = |pl: &PseudoLabel| {
            let mut srng = derive_rng(51, Stream::StudentAugment, 0, 0);
            unsupervised_loss(&model, &x, pl, &cfg, &mut srng).unwrap()
        };
        let masked = outcome_for(&pl_for(FilterMode::Mask));
        let weighted = outcome_for(&pl_for(FilterMode::Weight));
        assert!(masked.mean_consensus > 0.0 && masked.mean_consensus < 1.0);
        assert_ne!(masked.loss.total, weighted.loss.total);
        assert!(masked.masked_fraction > weighted.masked_fraction);
    }
}
