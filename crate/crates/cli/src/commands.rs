//! Implementations behind the CLI subcommands. Each takes its parsed
//! configuration and writes CSV to the supplied sink, so the integration
//! tests can drive them without a subprocess.

use std::io::Write;
use std::path::{Path, PathBuf};

use repflow_core::flow::{rep_flow, DualDenominator, FlowParams};
use repflow_core::model::ablate::{ablate, AblationDimension};
use repflow_core::model::data::{synth_dataset, SyntheticDatasetConfig};
use repflow_core::model::train::{
    evaluate, train, LrSchedule, OptimizerKind, Stage, TrainConfig, TrainSchedule,
};
use repflow_core::model::{ModelConfig, TwoStreamModel};
use repflow_core::rng::Rng;
use repflow_core::tensor::Tensor;

use crate::bench::{run_grid, BenchConfig, Precision};
use crate::config::Config;
use crate::flo::{write_flo, FloFile};
use crate::pgm::read_pgm;
use crate::viz::flow_to_ppm;
use crate::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rfk";

// ---------------------------------------------------------------------------
// Config schemas
// ---------------------------------------------------------------------------

const FLOW_KEYS: &[&str] = &[
    "seed",
    "flow.tau",
    "flow.theta",
    "flow.lambda",
    "flow.n_iters",
    "flow.eps",
    "flow.dual_denominator",
    "flow.write_ppm",
    "flow.max_magnitude",
];

const BENCH_KEYS: &[&str] = &[
    "seed",
    "bench.resolutions",
    "bench.channels",
    "bench.iters",
    "bench.runs",
    "bench.warmup",
    "bench.precision",
];

const DATA_KEYS: &[&str] = &[
    "data.classes",
    "data.frames",
    "data.image_size",
    "data.train_per_class",
    "data.test_per_class",
    "data.radius",
    "data.speed",
    "data.noise",
];

const MODEL_KEYS: &[&str] = &[
    "model.backbone_channels",
    "model.convlstm_hidden",
    "model.cell_variant",
    "model.stem_channels",
    "model.flow_layers",
    "model.reduce_channels",
    "model.flow_iters",
    "model.head_channels",
];

const TRAIN_KEYS: &[&str] = &[
    "train.stage",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_decay_every",
    "train.lr_decay_factor",
    "train.optimizer",
    "train.clip_length",
];

fn keys_for_train() -> Vec<&'static str> {
    let mut keys = vec!["seed"];
    keys.extend_from_slice(DATA_KEYS);
    keys.extend_from_slice(MODEL_KEYS);
    keys.extend_from_slice(TRAIN_KEYS);
    keys
}

fn keys_for_eval() -> Vec<&'static str> {
    let mut keys = vec!["seed", "eval.split"];
    keys.extend_from_slice(DATA_KEYS);
    keys.extend_from_slice(MODEL_KEYS);
    keys
}

fn keys_for_ablate() -> Vec<&'static str> {
    let mut keys = vec!["seed", "ablate.dimension", "train.epochs"];
    keys.extend_from_slice(DATA_KEYS);
    keys.extend_from_slice(MODEL_KEYS);
    keys
}

// ---------------------------------------------------------------------------
// Shared builders
// ---------------------------------------------------------------------------

fn flow_params_from(cfg: &Config) -> Result<FlowParams> {
    let tau = cfg.get_f64("flow.tau", 0.25)?;
    let theta = cfg.get_f64("flow.theta", 0.3)?;
    let lambda = cfg.get_f64("flow.lambda", 0.15)?;
    let n_iters = cfg.get_usize("flow.n_iters", 20)?;
    let mut params = FlowParams::new(tau, theta, lambda, n_iters)?;
    params.eps = cfg.get_f64("flow.eps", 1e-12)?;
    params.dual_denominator = match cfg.get("flow.dual_denominator") {
        None | Some("grad_u") => DualDenominator::GradU,
        Some("u") => DualDenominator::U,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "flow.dual_denominator: expected grad_u or u, got {other:?}"
            )))
        }
    };
    Ok(params)
}

fn dataset_config_from(cfg: &Config, seed: u64) -> Result<SyntheticDatasetConfig> {
    Ok(SyntheticDatasetConfig {
        n_classes: cfg.get_usize("data.classes", 4)?,
        frames_per_clip: cfg.get_usize("data.frames", 8)?,
        image_size: cfg.get_usize("data.image_size", 16)?,
        train_per_class: cfg.get_usize("data.train_per_class", 12)?,
        test_per_class: cfg.get_usize("data.test_per_class", 6)?,
        shape_radius: cfg.get_f64("data.radius", 2.0)?,
        speed: cfg.get_f64("data.speed", 1.0)?,
        noise_std: cfg.get_f64("data.noise", 0.02)?,
        rng_seed: seed,
    })
}

fn model_config_from(cfg: &Config) -> Result<ModelConfig> {
    let n_classes = cfg.get_usize("data.classes", 4)?;
    let image_size = cfg.get_usize("data.image_size", 16)?;
    let mut model = ModelConfig::desk_default(n_classes, image_size);
    model.backbone_channels = cfg.get_usize_list("model.backbone_channels", &[4, 8])?;
    model.convlstm_hidden = cfg.get_usize("model.convlstm_hidden", 6)?;
    model.cell_variant = match cfg.get("model.cell_variant") {
        None | Some("standard") => repflow_core::convlstm::CellVariant::Standard,
        Some("raw_input") => repflow_core::convlstm::CellVariant::RawInput,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "model.cell_variant: expected standard or raw_input, got {other:?}"
            )))
        }
    };
    let stem = cfg.get_usize("model.stem_channels", 4)?;
    model.stem_channels = if stem == 0 { None } else { Some(stem) };
    model.flow_layers = cfg.get_usize("model.flow_layers", 1)?;
    model.reduce_channels = cfg.get_usize("model.reduce_channels", 2)?;
    model.flow_iters = cfg.get_usize("model.flow_iters", 10)?;
    model.head_channels = cfg.get_usize("model.head_channels", 8)?;
    Ok(model)
}

fn train_config_from(cfg: &Config, seed: u64) -> Result<TrainConfig> {
    let stage = match cfg.require("train.stage")? {
        "rgb_stage1" => Stage::RgbStage1,
        "rgb_stage2" => Stage::RgbStage2,
        "flow" => Stage::Flow,
        "fusion" => Stage::Fusion,
        other => {
            return Err(CliError::Usage(format!(
                "train.stage: expected rgb_stage1|rgb_stage2|flow|fusion, got {other:?}"
            )))
        }
    };
    let optimizer = match cfg.get("train.optimizer") {
        None | Some("adam") => OptimizerKind::Adam,
        Some("sgd_momentum") => OptimizerKind::SgdMomentum,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "train.optimizer: expected adam or sgd_momentum, got {other:?}"
            )))
        }
    };
    let every = cfg.get_usize("train.lr_decay_every", 0)?;
    let factor = cfg.get_f64("train.lr_decay_factor", 1.0)?;
    let lr_schedule = if every == 0 || factor == 1.0 {
        LrSchedule::Constant
    } else {
        LrSchedule::EveryEpochs { every, factor }
    };
    Ok(TrainConfig {
        stage,
        epochs: cfg.require_usize("train.epochs")?,
        batch_size: cfg.get_usize("train.batch_size", 8)?,
        learning_rate: cfg.get_f64("train.lr", 1e-2)?,
        lr_schedule,
        optimizer,
        extra_frozen: Vec::new(),
        clip_length: cfg.get_usize("train.clip_length", 16)?,
        rng_seed: seed,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

/// `repflow flow`: one `.flo` (and optionally one `.ppm`) per consecutive
/// frame pair, named `flow_%04d`.
pub fn cmd_flow(config_path: &Path, out_dir: &Path, frames: &[PathBuf]) -> Result<()> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(FLOW_KEYS)?;
    let params = flow_params_from(&cfg)?;
    let write_ppm = cfg.get_bool("flow.write_ppm", false)?;
    let max_magnitude = match cfg.get("flow.max_magnitude") {
        Some(raw) => Some(raw.parse::<f64>().map_err(|_| {
            CliError::Usage(format!("flow.max_magnitude: cannot parse {raw:?}"))
        })?),
        None => None,
    };

    if frames.len() < 2 {
        return Err(CliError::Usage(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let images: Vec<Tensor> = frames
        .iter()
        .map(|p| read_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    for (i, img) in images.iter().enumerate().skip(1) {
        if img.shape() != images[0].shape() {
            return Err(CliError::Usage(format!(
                "frame {} has shape {:?}, expected {:?} ({})",
                i,
                img.shape(),
                images[0].shape(),
                frames[i].display()
            )));
        }
    }

    create_dir(out_dir)?;
    for i in 0..images.len() - 1 {
        let u = rep_flow(&images[i], &images[i + 1], &params)?;
        let flo = FloFile::from_flow(&u)?;
        write_flo(&out_dir.join(format!("flow_{i:04}.flo")), &flo)?;
        if write_ppm {
            let ppm = flow_to_ppm(&u, max_magnitude)?;
            let path = out_dir.join(format!("flow_{i:04}.ppm"));
            std::fs::write(&path, ppm).map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(())
}

/// `repflow bench`: runs the grid and prints one CSV row per grid point.
pub fn cmd_bench(config_path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(BENCH_KEYS)?;
    let bench = BenchConfig {
        resolutions: cfg.get_usize_list("bench.resolutions", &[28, 56, 112])?,
        channels: cfg.get_usize_list("bench.channels", &[32])?,
        iters: cfg.get_usize_list("bench.iters", &[10, 20, 30, 50])?,
        runs: cfg.get_usize("bench.runs", 5)?,
        warmup: cfg.get_usize("bench.warmup", 1)?,
        precision: match cfg.get("bench.precision") {
            None | Some("f64") => Precision::F64,
            Some("f32") => Precision::F32,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "bench.precision: expected f64 or f32, got {other:?}"
                )))
            }
        },
    };
    let rows = run_grid(&bench, cfg.seed()?)?;
    let mut w = |line: String| -> Result<()> {
        writeln!(out, "{line}").map_err(|e| CliError::Io(format!("stdout: {e}")))
    };
    w("resolution,channels,iters,median_s,iqr_s".into())?;
    for row in rows {
        w(format!(
            "{},{},{},{:.6},{:.6}",
            row.resolution, row.channels, row.iters, row.median_s, row.iqr_s
        ))?;
    }
    Ok(())
}

/// `repflow train`: trains one stage on the synthetic dataset, writing
/// `metrics.csv` and `checkpoint.rfk` into the output directory.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(&keys_for_train())?;
    let seed = cfg.seed()?;
    let data = synth_dataset(&dataset_config_from(&cfg, seed)?)?;
    let model_cfg = model_config_from(&cfg)?;
    let train_cfg = train_config_from(&cfg, seed ^ 0x7261_696e)?;

    let mut rng = Rng::new(seed);
    let mut model = TwoStreamModel::new(model_cfg, &mut rng)?;
    let metrics = train(&mut model, &train_cfg, &data.train)?;

    create_dir(out_dir)?;
    let mut csv = String::from("stage,epoch,loss,accuracy\n");
    let stage_name = match train_cfg.stage {
        Stage::RgbStage1 => "rgb_stage1",
        Stage::RgbStage2 => "rgb_stage2",
        Stage::Flow => "flow",
        Stage::Fusion => "fusion",
    };
    for m in &metrics {
        csv.push_str(&format!("{stage_name},{},{},{}\n", m.epoch, m.loss, m.accuracy));
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    std::fs::write(&metrics_path, csv).map_err(|e| CliError::io(&metrics_path, e))?;

    let ck_path = out_dir.join(CHECKPOINT_FILE);
    std::fs::write(&ck_path, model.to_checkpoint()).map_err(|e| CliError::io(&ck_path, e))?;
    Ok(())
}

/// `repflow eval`: rebuilds the model from config, loads a checkpoint, and
/// prints `split,accuracy`.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    split: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(&keys_for_eval())?;
    let seed = cfg.seed()?;
    let data = synth_dataset(&dataset_config_from(&cfg, seed)?)?;
    let model_cfg = model_config_from(&cfg)?;

    let mut rng = Rng::new(seed);
    let mut model = TwoStreamModel::new(model_cfg, &mut rng)?;
    let bytes = std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    model.load_checkpoint(&bytes)?;

    let split_name = match cfg.get("eval.split") {
        Some(s) => s.to_string(),
        None => split.to_string(),
    };
    let clips = match split_name.as_str() {
        "train" => &data.train,
        "test" => &data.test,
        other => {
            return Err(CliError::Usage(format!(
                "eval split: expected train or test, got {other:?}"
            )))
        }
    };
    let mode = model.stream_mode();
    let accuracy = evaluate(&model, clips, mode)?;
    writeln!(out, "split,accuracy").map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    writeln!(out, "{split_name},{accuracy}").map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    Ok(())
}

/// `repflow ablate`: sweeps flow-layer count or iteration count and prints
/// `setting,accuracy` rows.
pub fn cmd_ablate(config_path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(&keys_for_ablate())?;
    let seed = cfg.seed()?;
    let dimension = match cfg.require("ablate.dimension")? {
        "flow_layers" => AblationDimension::FlowLayers,
        "iterations" => AblationDimension::Iterations,
        other => {
            return Err(CliError::Usage(format!(
                "ablate.dimension: expected flow_layers or iterations, got {other:?}"
            )))
        }
    };
    let data = synth_dataset(&dataset_config_from(&cfg, seed)?)?;
    let model_cfg = model_config_from(&cfg)?;
    let epochs = cfg.get_usize("train.epochs", 4)?;
    let schedule = TrainSchedule::quick(epochs, seed);

    let rows = ablate(&model_cfg, &schedule, dimension, &data, seed)?;
    writeln!(out, "setting,accuracy").map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    for row in rows {
        writeln!(out, "{},{}", row.setting, row.accuracy)
            .map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    }
    Ok(())
}

/// Trains the full three-stage pipeline; used by the acceptance suite.
pub fn run_pipeline_from_config(
    config_path: &Path,
) -> Result<repflow_core::model::train::PipelineOutcome> {
    let cfg = Config::load(config_path)?;
    cfg.restrict(&keys_for_ablate())?;
    let seed = cfg.seed()?;
    let data = synth_dataset(&dataset_config_from(&cfg, seed)?)?;
    let model_cfg = model_config_from(&cfg)?;
    let epochs = cfg.get_usize("train.epochs", 4)?;
    let schedule = TrainSchedule::quick(epochs, seed);
    Ok(repflow_core::model::train::train_pipeline(
        &model_cfg, &schedule, &data, seed,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_params_defaults_and_overrides() {
        let cfg = Config::parse("flow.n_iters = 50\nflow.dual_denominator = u\n").unwrap();
        let p = flow_params_from(&cfg).unwrap();
        assert_eq!(p.n_iters, 50);
        assert_eq!(p.tau(), 0.25);
        assert_eq!(p.dual_denominator, DualDenominator::U);
    }

    #[test]
    fn stage_names_parse() {
        for (name, want) in [
            ("rgb_stage1", Stage::RgbStage1),
            ("rgb_stage2", Stage::RgbStage2),
            ("flow", Stage::Flow),
            ("fusion", Stage::Fusion),
        ] {
            let cfg =
                Config::parse(&format!("train.stage = {name}\ntrain.epochs = 1\n")).unwrap();
            assert_eq!(train_config_from(&cfg, 0).unwrap().stage, want);
        }
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let cfg = Config::parse("train.stage = warmup\ntrain.epochs = 1\n").unwrap();
        assert!(train_config_from(&cfg, 0).is_err());
    }

    #[test]
    fn stem_channels_zero_means_identity() {
        let cfg = Config::parse("model.stem_channels = 0\n").unwrap();
        assert_eq!(model_config_from(&cfg).unwrap().stem_channels, None);
    }
}
