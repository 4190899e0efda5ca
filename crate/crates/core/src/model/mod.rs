//! Desk-scale two-stream action classifier.
//!
//! Both streams consume the same RGB clip. The appearance stream runs a
//! tiny backbone per frame, forms the winning-class activation map, applies
//! spatial softmax attention and aggregates over time with a ConvLSTM. The
//! motion stream runs an optional stem, one to three representation-flow
//! layers (with plain convolutions in between), a small head, and averages
//! per-time-step logits. Decision fusion concatenates the two logit vectors
//! through one learned linear map followed by a softmax; training minimises
//! the cross-entropy of the resulting class probabilities.

pub mod ablate;
pub mod backbone;
pub mod data;
pub mod train;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{
    cam, cam_on_tape, spatial_attention, spatial_attention_on_tape, winning_class, CamWeights,
};
use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::convlstm::{
    convlstm_sequence, convlstm_sequence_on_tape, CellVariant, ConvLstmParams, ConvLstmVars,
    GateVars,
};
use crate::error::{Error, Result};
use crate::flow::{
    flow_layer_on_tape, rep_flow_layer, restore_channels, FlowParamVars, RepFlowLayerConfig,
    RepFlowLayerVars,
};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{conv2d, Kernel2D, Tensor};

pub use backbone::{ConvStage, TinyBackbone};
use backbone::{bias_add, global_avg_pool, mat_vec};

/// Which prediction path to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    RgbOnly,
    FlowOnly,
    TwoStream,
}

/// Architecture knobs of the desk-scale model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub image_size: usize,
    /// Channel widths of the backbone stages (each stage halves H and W).
    pub backbone_channels: Vec<usize>,
    pub convlstm_hidden: usize,
    pub cell_variant: CellVariant,
    /// `None` feeds raw RGB into the flow layers.
    pub stem_channels: Option<usize>,
    /// Representation-flow layer count, 0..=3; 0 is the appearance-only model.
    pub flow_layers: usize,
    pub reduce_channels: usize,
    pub flow_iters: usize,
    pub head_channels: usize,
}

impl ModelConfig {
    pub fn desk_default(n_classes: usize, image_size: usize) -> Self {
        ModelConfig {
            n_classes,
            image_size,
            backbone_channels: alloc::vec![4, 8],
            convlstm_hidden: 6,
            cell_variant: CellVariant::Standard,
            stem_channels: Some(4),
            flow_layers: 1,
            reduce_channels: 2,
            flow_iters: 10,
            head_channels: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::invalid("ModelConfig", "n_classes must be positive"));
        }
        if self.flow_layers > 3 {
            return Err(Error::invalid(
                "ModelConfig",
                format!("flow_layers must be 0..=3, got {}", self.flow_layers),
            ));
        }
        let shrink = 1usize << self.backbone_channels.len();
        if self.backbone_channels.is_empty() || self.image_size % shrink != 0 {
            return Err(Error::invalid(
                "ModelConfig",
                format!(
                    "image size {} must be divisible by the backbone shrink factor {shrink}",
                    self.image_size
                ),
            ));
        }
        Ok(())
    }
}

/// Linear classifier head `logits = weight . x + bias`.
#[derive(Debug, Clone)]
pub struct DenseHead {
    /// `[K, D]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl DenseHead {
    pub fn new(classes: usize, dim: usize, sd: f64, rng: &mut Rng) -> Self {
        DenseHead {
            weight: Tensor::random_normal(&[classes, dim], 0.0, sd, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn zeroed(classes: usize, dim: usize) -> Self {
        DenseHead {
            weight: Tensor::zeros(&[classes, dim]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        mat_vec(&self.weight, x)?.add(&self.bias)
    }
}

/// The full two-stream model.
#[derive(Debug, Clone)]
pub struct TwoStreamModel {
    pub config: ModelConfig,
    pub rgb_backbone: TinyBackbone,
    pub convlstm: ConvLstmParams,
    pub rgb_classifier: DenseHead,
    pub flow_stem: Option<ConvStage>,
    pub flow_layers: Vec<RepFlowLayerConfig>,
    /// One 3x3 convolution between consecutive flow layers.
    pub flow_mid: Vec<Kernel2D>,
    pub flow_head: ConvStage,
    pub flow_classifier: DenseHead,
    /// `[K, 2K]` decision-fusion map over concatenated stream logits.
    pub fusion: DenseHead,
}

impl TwoStreamModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.n_classes;
        let rgb_backbone = TinyBackbone::new(3, &config.backbone_channels, k, rng)?;
        let convlstm = ConvLstmParams::new(rgb_backbone.units(), config.convlstm_hidden, rng)?;
        let rgb_classifier = DenseHead::new(k, config.convlstm_hidden, 0.2, rng);

        let stem_width = config.stem_channels.unwrap_or(3);
        let flow_stem = match config.stem_channels {
            Some(c) => Some(ConvStage::new(3, c, 1.0 / 27.0, rng)?),
            None => None,
        };
        let mut flow_layers = Vec::with_capacity(config.flow_layers);
        let mut flow_mid = Vec::new();
        for i in 0..config.flow_layers {
            let mut layer =
                RepFlowLayerConfig::new(stem_width, config.reduce_channels, stem_width, rng)?;
            layer.flow_params = layer.flow_params.with_n_iters(config.flow_iters);
            flow_layers.push(layer);
            if i + 1 < config.flow_layers {
                flow_mid.push(Kernel2D::random(stem_width, stem_width, 3, 3, 1.0 / 18.0, rng)?);
            }
        }
        let flow_head = ConvStage::new(stem_width, config.head_channels, 1.0 / 18.0, rng)?;
        let flow_classifier = DenseHead::new(k, config.head_channels, 0.2, rng);
        let fusion = DenseHead::new(k, 2 * k, 0.3, rng);

        Ok(TwoStreamModel {
            config,
            rgb_backbone,
            convlstm,
            rgb_classifier,
            flow_stem,
            flow_layers,
            flow_mid,
            flow_head,
            flow_classifier,
            fusion,
        })
    }

    /// The classifier weights that also form the class activation maps.
    pub fn cam_weights(&self) -> &CamWeights {
        &self.rgb_backbone.head
    }

    pub fn stream_mode(&self) -> StreamMode {
        if self.flow_layers.is_empty() {
            StreamMode::RgbOnly
        } else {
            StreamMode::TwoStream
        }
    }

    /// Visits every parameter tensor with its canonical name, in the fixed
    /// canonical order (also the checkpoint group order).
    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.rgb_backbone.for_each_param("rgb.backbone", f);
        self.convlstm.for_each_param("rgb.convlstm", f);
        f("rgb.classifier.weight".into(), &self.rgb_classifier.weight);
        f("rgb.classifier.bias".into(), &self.rgb_classifier.bias);
        if let Some(stem) = &self.flow_stem {
            f("flow.stem.kernel".into(), stem.kernel.weights());
            f("flow.stem.bias".into(), &stem.bias);
        }
        for (i, layer) in self.flow_layers.iter().enumerate() {
            layer.for_each_param(&format!("flow.layer{i}"), f);
        }
        for (i, mid) in self.flow_mid.iter().enumerate() {
            f(format!("flow.mid{i}.kernel"), mid.weights());
        }
        f("flow.head.kernel".into(), self.flow_head.kernel.weights());
        f("flow.head.bias".into(), &self.flow_head.bias);
        f("flow.classifier.weight".into(), &self.flow_classifier.weight);
        f("flow.classifier.bias".into(), &self.flow_classifier.bias);
        f("fusion.weight".into(), &self.fusion.weight);
        f("fusion.bias".into(), &self.fusion.bias);
    }

    /// Mutable twin of [`TwoStreamModel::for_each_param`], identical order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.rgb_backbone.for_each_param_mut("rgb.backbone", f);
        self.convlstm.for_each_param_mut("rgb.convlstm", f);
        f("rgb.classifier.weight".into(), &mut self.rgb_classifier.weight);
        f("rgb.classifier.bias".into(), &mut self.rgb_classifier.bias);
        if let Some(stem) = &mut self.flow_stem {
            f("flow.stem.kernel".into(), stem.kernel.weights_mut());
            f("flow.stem.bias".into(), &mut stem.bias);
        }
        for (i, layer) in self.flow_layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&format!("flow.layer{i}"), f);
        }
        for (i, mid) in self.flow_mid.iter_mut().enumerate() {
            f(format!("flow.mid{i}.kernel"), mid.weights_mut());
        }
        f("flow.head.kernel".into(), self.flow_head.kernel.weights_mut());
        f("flow.head.bias".into(), &mut self.flow_head.bias);
        f(
            "flow.classifier.weight".into(),
            &mut self.flow_classifier.weight,
        );
        f("flow.classifier.bias".into(), &mut self.flow_classifier.bias);
        f("fusion.weight".into(), &mut self.fusion.weight);
        f("fusion.bias".into(), &mut self.fusion.bias);
    }

    /// Serialises all parameters into the binary checkpoint container.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut groups = Vec::new();
        self.for_each_param(&mut |name, t| groups.push((name, t.clone())));
        checkpoint::encode(&groups)
    }

    /// Restores parameters from a checkpoint; names and shapes must match
    /// this model's canonical parameter list exactly.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let groups = checkpoint::decode(bytes)?;
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in groups {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::invalid(
                    "load_checkpoint",
                    format!("duplicate group {name}"),
                ));
            }
        }
        let mut problem: Option<String> = None;
        self.for_each_param_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match map.remove(&name) {
                Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Some(loaded) => {
                    problem = Some(format!(
                        "{name}: shape {:?} does not match model {:?}",
                        loaded.shape(),
                        t.shape()
                    ))
                }
                None => problem = Some(format!("{name}: missing from checkpoint")),
            }
        });
        if let Some(detail) = problem {
            return Err(Error::invalid("load_checkpoint", detail));
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::invalid(
                "load_checkpoint",
                format!("unknown group {extra}"),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plain forward passes
// ---------------------------------------------------------------------------

fn check_clip(clip: &Tensor, op: &'static str) -> Result<usize> {
    if clip.rank() != 4 || clip.shape()[1] != 3 || clip.shape()[0] == 0 {
        return Err(Error::shape(
            op,
            format!("expected [T,3,H,W], got {:?}", clip.shape()),
        ));
    }
    Ok(clip.shape()[0])
}

/// Appearance-stream logits: per-frame backbone + winning-class attention,
/// ConvLSTM over time, pooled hidden state through the classifier.
pub fn rgb_stream_forward(clip: &Tensor, model: &TwoStreamModel) -> Result<Tensor> {
    let t_frames = check_clip(clip, "rgb_stream_forward")?;
    let mut attended = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let frame = clip.index_axis0(t)?;
        let (acts, logits) = model.rgb_backbone.forward(&frame)?;
        let class = winning_class(&logits)?;
        let row = model.rgb_backbone.head.row(class)?;
        let saliency = cam(&row, &acts)?;
        attended.push(spatial_attention(&acts, &saliency)?);
    }
    let refs: Vec<&Tensor> = attended.iter().collect();
    let sequence = Tensor::stack(&refs)?;
    let state = convlstm_sequence(&sequence, &model.convlstm, model.config.cell_variant)?;
    let pooled = global_avg_pool(&state.h)?;
    model.rgb_classifier.apply(&pooled)
}

fn stem_features(clip: &Tensor, model: &TwoStreamModel) -> Result<Tensor> {
    let t_frames = clip.shape()[0];
    let mut frames = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let frame = clip.index_axis0(t)?;
        let feat = match &model.flow_stem {
            Some(stem) => {
                bias_add(&conv2d(&frame, &stem.kernel, stem.kernel.same_pad())?, &stem.bias)?
                    .map(math::tanh)?
            }
            None => frame,
        };
        frames.push(feat);
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    Tensor::stack(&refs)
}

/// Motion-stream logits: stem, flow layers with restores (and mid
/// convolutions between them), per-time-step head, time-averaged logits.
pub fn flow_stream_forward(clip: &Tensor, model: &TwoStreamModel) -> Result<Tensor> {
    let t_frames = check_clip(clip, "flow_stream_forward")?;
    let depth = model.flow_layers.len();
    if depth == 0 {
        return Err(Error::invalid(
            "flow_stream_forward",
            "model has no flow layers",
        ));
    }
    if t_frames < depth + 1 {
        return Err(Error::invalid(
            "flow_stream_forward",
            format!("clip of {t_frames} frames is too short for {depth} flow layers"),
        ));
    }

    let mut feats = stem_features(clip, model)?;
    for (i, layer) in model.flow_layers.iter().enumerate() {
        feats = restore_channels(&rep_flow_layer(&feats, layer)?, layer)?;
        if let Some(mid) = model.flow_mid.get(i) {
            let steps: Vec<Tensor> = (0..feats.shape()[0])
                .map(|t| conv2d(&feats.index_axis0(t)?, mid, mid.same_pad()))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = steps.iter().collect();
            feats = Tensor::stack(&refs)?;
        }
    }

    let t_eff = feats.shape()[0];
    let mut acc: Option<Tensor> = None;
    for t in 0..t_eff {
        let x = feats.index_axis0(t)?;
        let h = bias_add(
            &conv2d(&x, &model.flow_head.kernel, model.flow_head.kernel.same_pad())?,
            &model.flow_head.bias,
        )?
        .map(math::tanh)?;
        let pooled = global_avg_pool(&h)?;
        let logits = model.flow_classifier.apply(&pooled)?;
        acc = Some(match acc {
            Some(a) => a.add(&logits)?,
            None => logits,
        });
    }
    acc.expect("t_eff >= 1").scale(1.0 / t_eff as f64)
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 || logits.is_empty() {
        return Err(Error::shape(
            "softmax",
            format!("expected non-empty [K], got {:?}", logits.shape()),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in logits.data() {
        max = math::max(max, v);
    }
    let e = logits.map(|v| math::exp(v - max))?;
    let s = e.sum();
    e.map(|v| v / s)
}

/// Decision fusion: softmax of a learned linear map over the concatenated
/// stream logits.
pub fn fuse(rgb_logits: &Tensor, flow_logits: &Tensor, fusion_head: &DenseHead) -> Result<Tensor> {
    if rgb_logits.shape() != flow_logits.shape() || rgb_logits.rank() != 1 {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", rgb_logits.shape(), flow_logits.shape()),
        ));
    }
    let mut joint = Vec::with_capacity(2 * rgb_logits.len());
    joint.extend_from_slice(rgb_logits.data());
    joint.extend_from_slice(flow_logits.data());
    let z = fusion_head.apply(&Tensor::new(alloc::vec![joint.len()], joint)?)?;
    softmax(&z)
}

/// Cross-entropy `-log p_c` with the probability clamped below at 1e-12.
pub fn cross_entropy(probs: &Tensor, class: usize) -> Result<f64> {
    if probs.rank() != 1 || class >= probs.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("class {class} out of range for {:?}", probs.shape()),
        ));
    }
    let p = math::max(probs.data()[class], 1e-12);
    Ok(-math::ln(p))
}

/// Class prediction for a clip under the given stream mode; argmax ties
/// break toward the lowest index.
pub fn predict(clip: &Tensor, model: &TwoStreamModel, mode: StreamMode) -> Result<usize> {
    match mode {
        StreamMode::RgbOnly => winning_class(&rgb_stream_forward(clip, model)?),
        StreamMode::FlowOnly => winning_class(&flow_stream_forward(clip, model)?),
        StreamMode::TwoStream => {
            let rgb = rgb_stream_forward(clip, model)?;
            let flow = flow_stream_forward(clip, model)?;
            winning_class(&fuse(&rgb, &flow, &model.fusion)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Taped forward passes
// ---------------------------------------------------------------------------

/// Tape handles for every model parameter, addressable by canonical name.
pub struct ParamVars {
    entries: Vec<(String, Var)>,
    index: BTreeMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].1)
            .ok_or_else(|| Error::invalid("ParamVars::get", format!("unknown parameter {name}")))
    }

    /// `(name, var)` pairs in canonical order.
    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

impl TwoStreamModel {
    /// Registers every parameter as a tape leaf; `trainable` decides, per
    /// canonical name, whether gradients flow into it.
    pub fn register_params(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> ParamVars {
        let mut entries = Vec::new();
        self.for_each_param(&mut |name, t| {
            let var = tape.leaf(t.clone(), trainable(&name));
            entries.push((name, var));
        });
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamVars { entries, index }
    }
}

fn gate_vars(pv: &ParamVars, prefix: &str) -> Result<GateVars> {
    Ok(GateVars {
        w_x: pv.get(&format!("{prefix}.wx"))?,
        w_h: pv.get(&format!("{prefix}.wh"))?,
        bias: pv.get(&format!("{prefix}.bias"))?,
    })
}

fn convlstm_vars(pv: &ParamVars, prefix: &str) -> Result<ConvLstmVars> {
    Ok(ConvLstmVars {
        input: gate_vars(pv, &format!("{prefix}.input"))?,
        forget: gate_vars(pv, &format!("{prefix}.forget"))?,
        cell: gate_vars(pv, &format!("{prefix}.cell"))?,
        output: gate_vars(pv, &format!("{prefix}.output"))?,
    })
}

fn flow_param_vars(pv: &ParamVars, prefix: &str) -> Result<FlowParamVars> {
    Ok(FlowParamVars {
        tau: pv.get(&format!("{prefix}.tau"))?,
        theta: pv.get(&format!("{prefix}.theta"))?,
        lambda: pv.get(&format!("{prefix}.lambda"))?,
        sobel_x: pv.get(&format!("{prefix}.sobel_x"))?,
        sobel_y: pv.get(&format!("{prefix}.sobel_y"))?,
        div_wx: pv.get(&format!("{prefix}.div_wx"))?,
        div_wy: pv.get(&format!("{prefix}.div_wy"))?,
    })
}

fn layer_vars(pv: &ParamVars, prefix: &str) -> Result<RepFlowLayerVars> {
    Ok(RepFlowLayerVars {
        reduce: pv.get(&format!("{prefix}.reduce"))?,
        restore: pv.get(&format!("{prefix}.restore"))?,
        flow: flow_param_vars(pv, prefix)?,
    })
}

/// Taped twin of [`rgb_stream_forward`]; `frames` are `[3,H,W]` nodes.
pub fn rgb_logits_on_tape(
    tape: &mut Tape,
    model: &TwoStreamModel,
    pv: &ParamVars,
    frames: &[Var],
) -> Result<Var> {
    let head_w = pv.get("rgb.backbone.head.weight")?;
    let head_b = pv.get("rgb.backbone.head.bias")?;
    let stage_vars: Vec<(Var, Var)> = (0..model.rgb_backbone.stages.len())
        .map(|i| {
            Ok((
                pv.get(&format!("rgb.backbone.stage{i}.kernel"))?,
                pv.get(&format!("rgb.backbone.stage{i}.bias"))?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut attended = Vec::with_capacity(frames.len());
    for &frame in frames {
        let (acts, logits) = model
            .rgb_backbone
            .on_tape(tape, frame, &stage_vars, head_w, head_b)?;
        let class = winning_class(tape.value(logits))?;
        let row = tape.row(head_w, class)?;
        let saliency = cam_on_tape(tape, row, acts)?;
        attended.push(spatial_attention_on_tape(tape, acts, saliency)?);
    }

    let lstm_vars = convlstm_vars(pv, "rgb.convlstm")?;
    let state = convlstm_sequence_on_tape(
        tape,
        &attended,
        &lstm_vars,
        &model.convlstm,
        model.config.cell_variant,
    )?;
    let pooled = tape.global_avg_pool(state.h)?;
    let wx = tape.mat_vec(pv.get("rgb.classifier.weight")?, pooled)?;
    tape.add(wx, pv.get("rgb.classifier.bias")?)
}

/// Taped twin of [`flow_stream_forward`].
pub fn flow_logits_on_tape(
    tape: &mut Tape,
    model: &TwoStreamModel,
    pv: &ParamVars,
    frames: &[Var],
) -> Result<Var> {
    let depth = model.flow_layers.len();
    if depth == 0 {
        return Err(Error::invalid(
            "flow_logits_on_tape",
            "model has no flow layers",
        ));
    }
    if frames.len() < depth + 1 {
        return Err(Error::invalid(
            "flow_logits_on_tape",
            format!(
                "clip of {} frames is too short for {depth} flow layers",
                frames.len()
            ),
        ));
    }

    let mut feats: Vec<Var> = match &model.flow_stem {
        Some(stem) => {
            let kv = pv.get("flow.stem.kernel")?;
            let bv = pv.get("flow.stem.bias")?;
            frames
                .iter()
                .map(|&f| {
                    let c = tape.conv2d(f, kv, stem.kernel.same_pad())?;
                    let cb = tape.bias_add(c, bv)?;
                    tape.tanh(cb)
                })
                .collect::<Result<_>>()?
        }
        None => frames.to_vec(),
    };

    for (i, layer) in model.flow_layers.iter().enumerate() {
        let lv = layer_vars(pv, &format!("flow.layer{i}"))?;
        feats = flow_layer_on_tape(tape, &feats, &lv, layer)?;
        if let Some(mid) = model.flow_mid.get(i) {
            let mv = pv.get(&format!("flow.mid{i}.kernel"))?;
            feats = feats
                .iter()
                .map(|&f| tape.conv2d(f, mv, mid.same_pad()))
                .collect::<Result<_>>()?;
        }
    }

    let head_k = pv.get("flow.head.kernel")?;
    let head_b = pv.get("flow.head.bias")?;
    let cls_w = pv.get("flow.classifier.weight")?;
    let cls_b = pv.get("flow.classifier.bias")?;
    let mut acc: Option<Var> = None;
    let t_eff = feats.len();
    for &x in &feats {
        let c = tape.conv2d(x, head_k, model.flow_head.kernel.same_pad())?;
        let cb = tape.bias_add(c, head_b)?;
        let h = tape.tanh(cb)?;
        let pooled = tape.global_avg_pool(h)?;
        let wx = tape.mat_vec(cls_w, pooled)?;
        let logits = tape.add(wx, cls_b)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, logits)?,
            None => logits,
        });
    }
    tape.affine(acc.expect("t_eff >= 1"), 1.0 / t_eff as f64, 0.0)
}

/// Taped softmax with the constant max-subtraction.
pub fn softmax_on_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    let mut max = f64::NEG_INFINITY;
    for &v in tape.value(logits).data() {
        max = math::max(max, v);
    }
    let shifted = tape.affine(logits, 1.0, -max)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e)?;
    tape.div(e, s)
}

/// Taped twin of [`fuse`].
pub fn fuse_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    rgb_logits: Var,
    flow_logits: Var,
) -> Result<Var> {
    let joint = tape.concat(rgb_logits, flow_logits)?;
    let wx = tape.mat_vec(pv.get("fusion.weight")?, joint)?;
    let z = tape.add(wx, pv.get("fusion.bias")?)?;
    softmax_on_tape(tape, z)
}

/// Taped cross-entropy `-log max(p_c, 1e-12)` over a probability node.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, class: usize) -> Result<Var> {
    let p = tape.pick(probs, class)?;
    let clamped = tape.clamp_min(p, 1e-12)?;
    let lp = tape.ln(clamped)?;
    tape.affine(lp, -1.0, 0.0)
}

/// Which loss a traced training step minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Cross-entropy of softmaxed appearance-stream logits.
    Rgb,
    /// Cross-entropy of softmaxed motion-stream logits.
    Flow,
    /// Cross-entropy of the fused class probabilities.
    Fused,
}

/// One traced forward + loss for a single labelled clip.
pub struct TracedStep {
    pub tape: Tape,
    pub params: ParamVars,
    pub frames: Vec<Var>,
    pub loss: Var,
    /// Stage-relevant logits (or fused probabilities), for accuracy
    /// bookkeeping.
    pub logits: Tensor,
}

/// Builds the traced loss for one clip. `trainable` gates gradients per
/// canonical parameter name; `input_grad` additionally makes the frames
/// differentiable (used by the gradient checks).
pub fn traced_loss(
    model: &TwoStreamModel,
    clip: &Tensor,
    label: usize,
    kind: LossKind,
    trainable: &dyn Fn(&str) -> bool,
    input_grad: bool,
) -> Result<TracedStep> {
    let t_frames = check_clip(clip, "traced_loss")?;
    if label >= model.config.n_classes {
        return Err(Error::invalid(
            "traced_loss",
            format!("label {label} out of range"),
        ));
    }
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, trainable);
    let frames: Vec<Var> = (0..t_frames)
        .map(|t| Ok(tape.leaf(clip.index_axis0(t)?, input_grad)))
        .collect::<Result<_>>()?;

    let (loss, logits) = match kind {
        LossKind::Rgb => {
            let logits = rgb_logits_on_tape(&mut tape, model, &params, &frames)?;
            let probs = softmax_on_tape(&mut tape, logits)?;
            let loss = cross_entropy_on_tape(&mut tape, probs, label)?;
            (loss, tape.value(logits).clone())
        }
        LossKind::Flow => {
            let logits = flow_logits_on_tape(&mut tape, model, &params, &frames)?;
            let probs = softmax_on_tape(&mut tape, logits)?;
            let loss = cross_entropy_on_tape(&mut tape, probs, label)?;
            (loss, tape.value(logits).clone())
        }
        LossKind::Fused => {
            let rgb = rgb_logits_on_tape(&mut tape, model, &params, &frames)?;
            let flow = flow_logits_on_tape(&mut tape, model, &params, &frames)?;
            let probs = fuse_on_tape(&mut tape, &params, rgb, flow)?;
            let loss = cross_entropy_on_tape(&mut tape, probs, label)?;
            (loss, tape.value(probs).clone())
        }
    };

    Ok(TracedStep {
        tape,
        params,
        frames,
        loss,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{synth_dataset, SyntheticDatasetConfig};

    fn toy_model(seed: u64, flow_layers: usize) -> TwoStreamModel {
        let mut rng = Rng::new(seed);
        let mut cfg = ModelConfig::desk_default(3, 16);
        cfg.flow_layers = flow_layers;
        cfg.flow_iters = 3;
        TwoStreamModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn rgb_zero_clip_with_zero_classifier_gives_zero_logits() {
        let mut model = toy_model(1, 1);
        model.rgb_classifier = DenseHead::zeroed(3, model.config.convlstm_hidden);
        let clip = Tensor::zeros(&[1, 3, 16, 16]);
        let logits = rgb_stream_forward(&clip, &model).unwrap();
        assert_eq!(logits.shape(), &[3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stream_logit_shapes() {
        let model = toy_model(2, 1);
        let mut rng = Rng::new(3);
        let clip = Tensor::random_uniform(&[4, 3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(rgb_stream_forward(&clip, &model).unwrap().shape(), &[3]);
        assert_eq!(flow_stream_forward(&clip, &model).unwrap().shape(), &[3]);
    }

    #[test]
    fn flow_stream_rejects_short_clips() {
        let model = toy_model(4, 2);
        let clip = Tensor::zeros(&[2, 3, 16, 16]);
        assert!(flow_stream_forward(&clip, &model).is_err());
    }

    #[test]
    fn static_clips_of_any_appearance_give_identical_flow_logits() {
        let model = toy_model(5, 1);
        let mut rng = Rng::new(6);
        let frame_a = Tensor::random_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let frame_b = Tensor::random_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let static_a = Tensor::stack(&[&frame_a, &frame_a, &frame_a]).unwrap();
        let static_b = Tensor::stack(&[&frame_b, &frame_b, &frame_b]).unwrap();
        let la = flow_stream_forward(&static_a, &model).unwrap();
        let lb = flow_stream_forward(&static_b, &model).unwrap();
        assert_eq!(la, lb);
    }

    // A brightness offset shared by both frames cancels in the temporal
    // residual, so the recovered flow is unchanged wherever the zero padding
    // of the derivative stencils is out of reach. The padding ring itself
    // does see the offset (the derivative of a constant is nonzero there),
    // and that ring creeps inward one pixel per solver iteration — the flow
    // is bit-identical on the remaining interior, and the pooled logits can
    // differ only by the small boundary contribution.
    #[test]
    fn constant_appearance_offset_cancels_with_identity_stem() {
        let mut rng = Rng::new(7);
        let n_iters = 4usize;
        let mut cfg = ModelConfig::desk_default(3, 16);
        cfg.stem_channels = None;
        cfg.flow_layers = 1;
        cfg.flow_iters = n_iters;
        let model = TwoStreamModel::new(cfg, &mut rng).unwrap();

        let clip = Tensor::random_uniform(&[3, 3, 16, 16], 0.1, 0.9, &mut rng);
        let shifted = clip.map(|v| v + 0.37).unwrap();

        // The residual itself cancels exactly.
        let r_plain = crate::flow::residual(
            &clip.index_axis0(0).unwrap().index_axis0(0).unwrap(),
            &clip.index_axis0(1).unwrap().index_axis0(0).unwrap(),
        )
        .unwrap();
        let r_shift = crate::flow::residual(
            &shifted.index_axis0(0).unwrap().index_axis0(0).unwrap(),
            &shifted.index_axis0(1).unwrap().index_axis0(0).unwrap(),
        )
        .unwrap();
        for (a, b) in r_plain.data().iter().zip(r_shift.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // Per-channel flow agrees to round-off beyond the contaminated
        // margin. The boundary effect creeps inward two pixels per solver
        // iteration (one from the flow derivatives, one from the dual
        // divergence), so the clean interior starts at 2*n_iters + 1.
        let params = crate::flow::FlowParams::defaults().with_n_iters(n_iters);
        let side = 24usize;
        let f1 = Tensor::random_uniform(&[side, side], 0.1, 0.9, &mut rng);
        let f2 = Tensor::random_uniform(&[side, side], 0.1, 0.9, &mut rng);
        let g1 = f1.map(|v| v + 0.37).unwrap();
        let g2 = f2.map(|v| v + 0.37).unwrap();
        let u = crate::flow::rep_flow(&f1, &f2, &params).unwrap();
        let v = crate::flow::rep_flow(&g1, &g2, &params).unwrap();
        let margin = 2 * n_iters + 1;
        for k in 0..2 {
            for r in margin..side - margin {
                for c in margin..side - margin {
                    let (a, b) = (u.at(&[k, r, c]), v.at(&[k, r, c]));
                    assert!((a - b).abs() < 1e-9, "at [{k},{r},{c}]: {a} vs {b}");
                }
            }
        }

        // Whole-stream logits differ only by the pooled boundary effect.
        let a = flow_stream_forward(&clip, &model).unwrap();
        let b = flow_stream_forward(&shifted, &model).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn fuse_examples() {
        // Averaging matrix over identical logits reproduces their softmax.
        let mut fusion = DenseHead::zeroed(3, 6);
        for k in 0..3 {
            fusion.weight.set(&[k, k], 0.5).unwrap();
            fusion.weight.set(&[k, k + 3], 0.5).unwrap();
        }
        let logits = Tensor::new(alloc::vec![3], alloc::vec![0.3, -0.1, 0.7]).unwrap();
        let probs = fuse(&logits, &logits, &fusion).unwrap();
        let direct = softmax(&logits).unwrap();
        for (a, b) in probs.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Zero fusion head: uniform distribution.
        let zero = DenseHead::zeroed(3, 6);
        let probs = fuse(&logits, &logits, &zero).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        // Probabilities sum to one for random inputs.
        let mut rng = Rng::new(8);
        let head = DenseHead::new(3, 6, 0.5, &mut rng);
        for _ in 0..100 {
            let a = Tensor::random_uniform(&[3], -4.0, 4.0, &mut rng);
            let b = Tensor::random_uniform(&[3], -4.0, 4.0, &mut rng);
            let p = fuse(&a, &b, &head).unwrap();
            assert!((p.sum() - 1.0).abs() < 1e-9);
            assert!(p.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let half = Tensor::new(alloc::vec![2], alloc::vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, 0).unwrap() - 0.6931).abs() < 1e-4);
        let hot = Tensor::new(alloc::vec![2], alloc::vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&hot, 0).unwrap(), 0.0);
        let q = Tensor::new(alloc::vec![2], alloc::vec![0.25, 0.75]).unwrap();
        assert!((cross_entropy(&q, 1).unwrap() - 0.2877).abs() < 1e-4);
        assert!(cross_entropy(&q, 2).is_err());
    }

    #[test]
    fn traced_streams_match_plain_bitwise() {
        let model = toy_model(9, 2);
        let cfg = SyntheticDatasetConfig::desk_default(10);
        let data = synth_dataset(&cfg).unwrap();
        let clip = &data.train[0].clip;

        let plain_rgb = rgb_stream_forward(clip, &model).unwrap();
        let plain_flow = flow_stream_forward(clip, &model).unwrap();
        let plain_probs = fuse(&plain_rgb, &plain_flow, &model.fusion).unwrap();

        let step = traced_loss(&model, clip, 0, LossKind::Fused, &|_| true, false).unwrap();
        assert_eq!(step.logits, plain_probs);

        let plain_loss = cross_entropy(&plain_probs, 0).unwrap();
        assert_eq!(step.tape.value(step.loss).data()[0], plain_loss);
    }

    #[test]
    fn checkpoint_round_trip_restores_every_parameter() {
        let model = toy_model(11, 1);
        let bytes = model.to_checkpoint();
        let mut other = toy_model(12, 1);
        let mut lhs = Vec::new();
        model.for_each_param(&mut |_, t| lhs.push(t.clone()));

        // Sanity: differently seeded models disagree somewhere.
        let mut differs = false;
        let mut i = 0;
        other.for_each_param(&mut |_, t| {
            if *t != lhs[i] {
                differs = true;
            }
            i += 1;
        });
        assert!(differs);

        other.load_checkpoint(&bytes).unwrap();
        let mut j = 0;
        other.for_each_param(&mut |_, t| {
            assert_eq!(*t, lhs[j]);
            j += 1;
        });
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let model = toy_model(13, 1);
        let bytes = model.to_checkpoint();
        let mut bigger = toy_model(14, 2);
        assert!(bigger.load_checkpoint(&bytes).is_err());
    }
}
