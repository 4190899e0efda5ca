//! Stage-wise training, optimizers, and evaluation.
//!
//! Training is deterministic: parameter updates walk the canonical
//! parameter order, batches are shuffled by the seeded generator, and all
//! accumulation is left to right, so a seed pins the trained model
//! bit-for-bit.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::data::{Dataset, LabeledClip};
use crate::model::{
    predict, traced_loss, LossKind, ModelConfig, StreamMode, TracedStep, TwoStreamModel,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training stages. Stage 1 of the appearance stream trains only the
/// classifier and the ConvLSTM; stage 2 opens up the whole stream. The flow
/// and fusion stages train their own parameter groups exclusively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RgbStage1,
    RgbStage2,
    Flow,
    Fusion,
}

impl Stage {
    pub fn loss_kind(self) -> LossKind {
        match self {
            Stage::RgbStage1 | Stage::RgbStage2 => LossKind::Rgb,
            Stage::Flow => LossKind::Flow,
            Stage::Fusion => LossKind::Fused,
        }
    }

    /// Trainable parameter-name prefixes of this stage; everything else is
    /// frozen.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::RgbStage1 => &["rgb.convlstm.", "rgb.classifier."],
            Stage::RgbStage2 => &["rgb."],
            Stage::Flow => &["flow."],
            Stage::Fusion => &["fusion."],
        }
    }

    pub fn is_trainable(self, name: &str) -> bool {
        self.trainable_prefixes()
            .iter()
            .any(|p| name.starts_with(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Learning-rate schedule, evaluated per epoch index (0-based).
#[derive(Debug, Clone)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every `every` epochs.
    EveryEpochs { every: usize, factor: f64 },
    /// Multiply by `factor` at each milestone epoch.
    Milestones { epochs: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::EveryEpochs { every, factor } => {
                let steps = if *every == 0 { 0 } else { epoch / every };
                base * libm_pow(*factor, steps as i32)
            }
            LrSchedule::Milestones { epochs, factor } => {
                let passed = epochs.iter().filter(|&&m| epoch >= m).count();
                base * libm_pow(*factor, passed as i32)
            }
        }
    }
}

fn libm_pow(base: f64, exp: i32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Parameter-name prefixes frozen in addition to the stage's own mask.
    pub extra_frozen: Vec<String>,
    /// Frames per training clip (longer clips are subsampled evenly).
    pub clip_length: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    /// True iff the named parameter receives updates under this config.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.stage.is_trainable(name) && !self.extra_frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

impl TrainConfig {
    /// Small desk profile: Adam, constant learning rate, batch 8.
    pub fn quick(stage: Stage, epochs: usize, learning_rate: f64, rng_seed: u64) -> Self {
        TrainConfig {
            stage,
            epochs,
            batch_size: 8,
            learning_rate,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            extra_frozen: Vec::new(),
            clip_length: 16,
            rng_seed,
        }
    }
}

/// Reference full-scale training schedule, stored for traceability. The
/// tests and the synthetic experiments use small desk profiles instead —
/// these epoch counts assume a large pretrained backbone and real video
/// datasets. The fusion learning rate of 1.0 with a 0.1 decay per epoch is
/// recorded verbatim, not used by any test. The appearance stream samples
/// 25 frames per video, the flow stream 16; the desk profiles use one
/// shared clip length instead.
pub fn full_scale_profile() -> [TrainConfig; 4] {
    [
        TrainConfig {
            stage: Stage::RgbStage1,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Milestones {
                epochs: alloc::vec![25, 75, 150],
                factor: 0.1,
            },
            optimizer: OptimizerKind::Adam,
            extra_frozen: alloc::vec::Vec::new(),
            clip_length: 25,
            rng_seed: 0,
        },
        TrainConfig {
            stage: Stage::RgbStage2,
            epochs: 150,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Milestones {
                epochs: alloc::vec![25, 75],
                factor: 0.1,
            },
            optimizer: OptimizerKind::Adam,
            extra_frozen: alloc::vec::Vec::new(),
            clip_length: 25,
            rng_seed: 0,
        },
        TrainConfig {
            stage: Stage::Flow,
            epochs: 750,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::EveryEpochs {
                every: 150,
                factor: 0.5,
            },
            optimizer: OptimizerKind::SgdMomentum,
            extra_frozen: alloc::vec::Vec::new(),
            clip_length: 16,
            rng_seed: 0,
        },
        TrainConfig {
            stage: Stage::Fusion,
            epochs: 250,
            batch_size: 32,
            learning_rate: 1.0,
            lr_schedule: LrSchedule::EveryEpochs {
                every: 1,
                factor: 0.1,
            },
            optimizer: OptimizerKind::SgdMomentum,
            extra_frozen: alloc::vec::Vec::new(),
            clip_length: 16,
            rng_seed: 0,
        },
    ]
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Evenly subsamples a clip to at most `len` frames.
pub fn sample_clip(clip: &Tensor, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::invalid("sample_clip", "clip length must be positive"));
    }
    let t = clip.shape()[0];
    if t <= len {
        return Ok(clip.clone());
    }
    let frames: Vec<Tensor> = (0..len)
        .map(|i| clip.index_axis0(i * t / len))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = frames.iter().collect();
    Tensor::stack(&refs)
}

#[derive(Debug, Clone)]
struct OptSlot {
    m: Tensor,
    v: Tensor,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;
/// Positivity floor for the flow step-size parameters after each update.
const FLOW_PARAM_FLOOR: f64 = 1e-4;

fn optimizer_update(
    kind: OptimizerKind,
    lr: f64,
    step: usize,
    param: &mut Tensor,
    grad: &Tensor,
    slot: &mut OptSlot,
) {
    match kind {
        OptimizerKind::Adam => {
            let bc1 = 1.0 - libm_pow(ADAM_BETA1, step as i32);
            let bc2 = 1.0 - libm_pow(ADAM_BETA2, step as i32);
            for i in 0..param.len() {
                let g = grad.data()[i];
                let m = ADAM_BETA1 * slot.m.data()[i] + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * slot.v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                param.data_mut()[i] -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPS);
            }
        }
        OptimizerKind::SgdMomentum => {
            for i in 0..param.len() {
                let vel = SGD_MOMENTUM * slot.m.data()[i] + grad.data()[i];
                slot.m.data_mut()[i] = vel;
                param.data_mut()[i] -= lr * vel;
            }
        }
    }
}

/// Trains one stage in place, minimising the cross-entropy of the stage's
/// prediction path; loss over a batch is the mean of per-sample losses.
/// Returns per-epoch loss and training accuracy.
pub fn train(
    model: &mut TwoStreamModel,
    cfg: &TrainConfig,
    data: &[LabeledClip],
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    if cfg.stage == Stage::Fusion && model.flow_layers.is_empty() {
        return Err(Error::invalid(
            "train",
            "fusion stage needs a model with flow layers",
        ));
    }

    let kind = cfg.stage.loss_kind();
    let trainable = |name: &str| cfg.is_trainable(name);
    let mut rng = Rng::new(cfg.rng_seed);
    let mut slots: BTreeMap<String, OptSlot> = BTreeMap::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_count = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(cfg.learning_rate, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for &idx in batch {
                let item = &data[idx];
                let clip = sample_clip(&item.clip, cfg.clip_length)?;
                let step: TracedStep =
                    traced_loss(model, &clip, item.label, kind, &trainable, false)?;
                let loss = step.tape.value(step.loss).data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "train" });
                }
                loss_sum += loss;
                let pred = crate::attention::winning_class(&step.logits)?;
                if pred == item.label {
                    correct += 1;
                }
                let grads = step.tape.backward(step.loss, Tensor::scalar(1.0))?;
                for (name, var) in step.params.entries() {
                    if let Some(g) = grads.get(*var) {
                        match grad_acc.get_mut(name) {
                            Some(acc) => *acc = acc.add(g)?,
                            None => {
                                grad_acc.insert(name.clone(), g.clone());
                            }
                        }
                    }
                }
            }

            step_count += 1;
            let scale = 1.0 / batch.len() as f64;
            let mut update_err: Option<Error> = None;
            model.for_each_param_mut(&mut |name, param| {
                if update_err.is_some() {
                    return;
                }
                let Some(g) = grad_acc.get(&name) else {
                    return;
                };
                let mean_grad = match g.scale(scale) {
                    Ok(t) => t,
                    Err(e) => {
                        update_err = Some(e);
                        return;
                    }
                };
                let slot = slots.entry(name).or_insert_with(|| OptSlot {
                    m: Tensor::zeros(param.shape()),
                    v: Tensor::zeros(param.shape()),
                });
                optimizer_update(cfg.optimizer, lr, step_count, param, &mean_grad, slot);
            });
            if let Some(e) = update_err {
                return Err(e);
            }
            for layer in &mut model.flow_layers {
                layer.flow_params.clamp_positive(FLOW_PARAM_FLOOR);
            }
        }

        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(metrics)
}

/// Fraction of argmax-correct predictions over `clips`; deterministic.
pub fn evaluate(model: &TwoStreamModel, clips: &[LabeledClip], mode: StreamMode) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation split"));
    }
    let mut correct = 0usize;
    for item in clips {
        if predict(&item.clip, model, mode)? == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// The three-stage desk training schedule.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub rgb: TrainConfig,
    pub flow: TrainConfig,
    pub fusion: TrainConfig,
}

impl TrainSchedule {
    /// Quick desk schedule with shared seed.
    pub fn quick(epochs: usize, seed: u64) -> Self {
        TrainSchedule {
            rgb: TrainConfig::quick(Stage::RgbStage1, epochs, 5e-3, seed),
            flow: TrainConfig::quick(Stage::Flow, epochs, 1e-2, seed ^ 0x9e37),
            fusion: TrainConfig::quick(Stage::Fusion, epochs.div_ceil(2), 5e-2, seed ^ 0x79b9),
        }
    }
}

/// Outcome of the full pipeline: trained model plus held-out accuracies.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: TwoStreamModel,
    pub metrics: Vec<(Stage, Vec<EpochMetrics>)>,
    pub rgb_accuracy: f64,
    pub flow_accuracy: Option<f64>,
    pub fused_accuracy: Option<f64>,
}

impl PipelineOutcome {
    /// Accuracy of the model's final prediction path (fused when the model
    /// has flow layers, appearance-only otherwise).
    pub fn final_accuracy(&self) -> f64 {
        self.fused_accuracy.unwrap_or(self.rgb_accuracy)
    }
}

/// Initialises a model from `seed` and trains the applicable stages
/// (appearance; then motion and fusion when the model has flow layers),
/// evaluating each stream on the test split.
pub fn train_pipeline(
    model_cfg: &ModelConfig,
    schedule: &TrainSchedule,
    data: &Dataset,
    seed: u64,
) -> Result<PipelineOutcome> {
    let mut rng = Rng::new(seed);
    let mut model = TwoStreamModel::new(model_cfg.clone(), &mut rng)?;
    let mut metrics = Vec::new();

    let rgb_metrics = train(&mut model, &schedule.rgb, &data.train)?;
    metrics.push((schedule.rgb.stage, rgb_metrics));
    let rgb_accuracy = evaluate(&model, &data.test, StreamMode::RgbOnly)?;

    let (flow_accuracy, fused_accuracy) = if model.flow_layers.is_empty() {
        (None, None)
    } else {
        let flow_metrics = train(&mut model, &schedule.flow, &data.train)?;
        metrics.push((schedule.flow.stage, flow_metrics));
        let flow_acc = evaluate(&model, &data.test, StreamMode::FlowOnly)?;

        let fusion_metrics = train(&mut model, &schedule.fusion, &data.train)?;
        metrics.push((schedule.fusion.stage, fusion_metrics));
        let fused_acc = evaluate(&model, &data.test, StreamMode::TwoStream)?;
        (Some(flow_acc), Some(fused_acc))
    };

    Ok(PipelineOutcome {
        model,
        metrics,
        rgb_accuracy,
        flow_accuracy,
        fused_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{synth_dataset, SyntheticDatasetConfig};
    use crate::model::DenseHead;

    fn tiny_data(seed: u64) -> Dataset {
        let mut cfg = SyntheticDatasetConfig::desk_default(seed);
        cfg.train_per_class = 2;
        cfg.test_per_class = 2;
        cfg.frames_per_clip = 4;
        synth_dataset(&cfg).unwrap()
    }

    fn tiny_model(seed: u64) -> TwoStreamModel {
        let mut rng = Rng::new(seed);
        let mut cfg = ModelConfig::desk_default(4, 16);
        cfg.flow_iters = 3;
        cfg.convlstm_hidden = 4;
        TwoStreamModel::new(cfg, &mut rng).unwrap()
    }

    fn snapshot(model: &TwoStreamModel) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        model.for_each_param(&mut |n, t| out.push((n, t.clone())));
        out
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let data = tiny_data(1);
        let mut model = tiny_model(2);
        let before = snapshot(&model);
        let cfg = TrainConfig::quick(Stage::Flow, 2, 0.0, 3);
        train(&mut model, &cfg, &data.train).unwrap();
        let after = snapshot(&model);
        assert_eq!(before, after);
    }

    #[test]
    fn freeze_mask_is_honoured() {
        let data = tiny_data(4);
        let mut model = tiny_model(5);
        let before = snapshot(&model);
        let cfg = TrainConfig::quick(Stage::RgbStage1, 1, 1e-2, 6);
        train(&mut model, &cfg, &data.train).unwrap();
        let after = snapshot(&model);
        let mut anything_moved = false;
        for ((name, b), (_, a)) in before.iter().zip(&after) {
            if Stage::RgbStage1.is_trainable(name) {
                if a != b {
                    anything_moved = true;
                }
            } else {
                assert_eq!(a, b, "frozen parameter {name} changed");
            }
        }
        assert!(anything_moved, "no trainable parameter moved");
    }

    #[test]
    fn extra_frozen_prefixes_block_updates() {
        let data = tiny_data(20);
        let mut model = tiny_model(21);
        let before = snapshot(&model);
        let mut cfg = TrainConfig::quick(Stage::Flow, 1, 1e-2, 22);
        cfg.extra_frozen = alloc::vec![alloc::string::String::from("flow.layer0.")];
        train(&mut model, &cfg, &data.train).unwrap();
        let after = snapshot(&model);
        for ((name, b), (_, a)) in before.iter().zip(&after) {
            if name.starts_with("flow.layer0.") {
                assert_eq!(a, b, "extra-frozen {name} changed");
            }
        }
        assert!(
            before.iter().zip(&after).any(|((n, b), (_, a))| a != b && n.starts_with("flow.")),
            "nothing trained at all"
        );
    }

    #[test]
    fn single_sample_loss_decreases_over_first_steps() {
        let data = tiny_data(7);
        let one = alloc::vec![data.train[0].clone()];
        let mut model = tiny_model(8);
        let mut cfg = TrainConfig::quick(Stage::Flow, 10, 1e-3, 9);
        cfg.batch_size = 1;
        let metrics = train(&mut model, &cfg, &one).unwrap();
        for pair in metrics.windows(2) {
            assert!(
                pair[1].loss <= pair[0].loss + 1e-12,
                "loss went up: {} -> {}",
                pair[0].loss,
                pair[1].loss
            );
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let data = tiny_data(10);
        let run = || {
            let mut model = tiny_model(11);
            let cfg = TrainConfig::quick(Stage::Flow, 2, 1e-2, 12);
            let metrics = train(&mut model, &cfg, &data.train).unwrap();
            (model.to_checkpoint(), metrics)
        };
        let (ck1, m1) = run();
        let (ck2, m2) = run();
        assert_eq!(ck1, ck2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn zero_head_model_predicts_class_zero_everywhere() {
        let data = tiny_data(13);
        let mut model = tiny_model(14);
        model.rgb_classifier = DenseHead::zeroed(4, model.config.convlstm_hidden);
        // All logits zero: argmax ties to class 0, so accuracy equals the
        // share of class-0 clips in the balanced split.
        let acc = evaluate(&model, &data.test, StreamMode::RgbOnly).unwrap();
        assert!((acc - 0.25).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn relabelled_split_by_model_prediction_scores_one() {
        let data = tiny_data(15);
        let model = tiny_model(16);
        let relabelled: Vec<LabeledClip> = data
            .test
            .iter()
            .map(|item| LabeledClip {
                clip: item.clip.clone(),
                label: predict(&item.clip, &model, StreamMode::TwoStream).unwrap(),
            })
            .collect();
        let acc = evaluate(&model, &relabelled, StreamMode::TwoStream).unwrap();
        assert_eq!(acc, 1.0);
        // Repeated evaluation is identical.
        let again = evaluate(&model, &relabelled, StreamMode::TwoStream).unwrap();
        assert_eq!(acc, again);
    }

    #[test]
    fn sample_clip_is_even_and_stable() {
        let mut rng = Rng::new(17);
        let clip = Tensor::random_uniform(&[8, 3, 4, 4], 0.0, 1.0, &mut rng);
        let s = sample_clip(&clip, 4).unwrap();
        assert_eq!(s.shape(), &[4, 3, 4, 4]);
        assert_eq!(s.index_axis0(0).unwrap(), clip.index_axis0(0).unwrap());
        assert_eq!(s.index_axis0(3).unwrap(), clip.index_axis0(6).unwrap());
        assert_eq!(sample_clip(&clip, 16).unwrap(), clip);
    }

    #[test]
    fn lr_schedules() {
        let c = LrSchedule::Constant;
        assert_eq!(c.lr_at(0.1, 5), 0.1);
        let e = LrSchedule::EveryEpochs {
            every: 2,
            factor: 0.5,
        };
        assert_eq!(e.lr_at(1.0, 0), 1.0);
        assert_eq!(e.lr_at(1.0, 3), 0.5);
        assert_eq!(e.lr_at(1.0, 4), 0.25);
        let m = LrSchedule::Milestones {
            epochs: alloc::vec![2, 5],
            factor: 0.1,
        };
        assert_eq!(m.lr_at(1.0, 1), 1.0);
        assert!((m.lr_at(1.0, 2) - 0.1).abs() < 1e-15);
        assert!((m.lr_at(1.0, 7) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn full_scale_profile_records_reference_values() {
        let profile = full_scale_profile();
        assert_eq!(profile[0].epochs, 200);
        assert_eq!(profile[1].epochs, 150);
        assert_eq!(profile[2].epochs, 750);
        assert_eq!(profile[3].epochs, 250);
        assert_eq!(profile[0].clip_length, 25);
        assert_eq!(profile[2].clip_length, 16);
        assert_eq!(profile[3].learning_rate, 1.0);
    }
}
