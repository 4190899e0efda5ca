//! Ablation harness: sweeps one architecture dimension, trains one model per
//! setting with a shared seed, and reports `(setting, accuracy)` rows.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::data::Dataset;
use crate::model::train::{train_pipeline, TrainSchedule};
use crate::model::ModelConfig;

/// Sweep dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationDimension {
    /// Representation-flow layer count; 0 is the appearance-only model.
    FlowLayers,
    /// Solver iterations inside every flow layer.
    Iterations,
}

/// Flow-layer sweep settings.
pub const FLOW_LAYER_GRID: [usize; 4] = [0, 1, 2, 3];
/// Iteration-count sweep settings.
pub const ITERATION_GRID: [usize; 4] = [10, 20, 30, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: usize,
    pub accuracy: f64,
}

/// Runs the sweep: per setting, a fresh model is initialised from `seed`,
/// trained through the applicable stages, and evaluated on the test split.
pub fn ablate(
    template: &ModelConfig,
    schedule: &TrainSchedule,
    dimension: AblationDimension,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if dimension == AblationDimension::Iterations && template.flow_layers == 0 {
        return Err(Error::invalid(
            "ablate",
            "iteration sweep needs a template with at least one flow layer",
        ));
    }
    let grid: &[usize] = match dimension {
        AblationDimension::FlowLayers => &FLOW_LAYER_GRID,
        AblationDimension::Iterations => &ITERATION_GRID,
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &setting in grid {
        let mut cfg = template.clone();
        match dimension {
            AblationDimension::FlowLayers => cfg.flow_layers = setting,
            AblationDimension::Iterations => cfg.flow_iters = setting,
        }
        let outcome = train_pipeline(&cfg, schedule, data, seed)?;
        rows.push(AblationRow {
            setting,
            accuracy: outcome.final_accuracy(),
        });
    }
    Ok(rows)
}
