use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Prepared;
use crate::error::Result;
use crate::eval::{const_vel_yaw, physics_oracle, single_mode, EvalConfig, KinematicState, MetricsReport};
use crate::geometry::{RasterMap, Vec2};
use crate::model::{forward, Batch, ModelConfig, PredictionSet};
use crate::nn::ParamStore;
use crate::synth::Episode;

/// Model output for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub set: PredictionSet,
    /// Per attention block, `L` weight grids of length `M·N`.
    pub attention: Vec<(String, Vec<Vec<f64>>)>,
}

/// Runs the model over `data` in parallel batches, keeping input order.
pub fn predict(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    data: &[Prepared],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let chunks: Vec<Vec<Prediction>> = data
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<Vec<Prediction>> {
            let eps: Vec<&Episode> = chunk.iter().map(|p| &p.episode).collect();
            let rasters: Vec<&RasterMap> = chunk.iter().map(|p| &p.raster).collect();
            let batch = Batch::new(model, &eps, &rasters)?;
            let out = forward(model, params, &batch)?;
            Ok(out
                .prediction_sets(model)
                .into_iter()
                .enumerate()
                .map(|(b, set)| Prediction {
                    set,
                    attention: out.attention_maps(model, b),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Metric rows keyed by method name, in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvaluationTable {
    pub rows: IndexMap<String, MetricsReport>,
}

impl EvaluationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Model metrics next to the constant-velocity and physics-oracle
/// baselines on the same episodes.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    data: &[Prepared],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<(EvaluationTable, Vec<Prediction>)> {
    let preds = predict(model, params, data, batch_size)?;
    let sets: Vec<PredictionSet> = preds.iter().map(|p| p.set.clone()).collect();
    let gts: Vec<Vec<Vec2>> = data.iter().map(|p| p.episode.ground_truth_future.clone()).collect();
    let maps: Vec<RasterMap> = data.iter().map(|p| p.raster.clone()).collect();
    let mut rows = IndexMap::new();
    rows.insert(
        format!("model_{}", model.variant.name()),
        MetricsReport::compute(&sets, &gts, &maps, cfg)?,
    );
    let states: Vec<KinematicState> = data
        .iter()
        .map(|p| KinematicState::target(p.episode.target_history.current()))
        .collect();
    let cv: Vec<PredictionSet> = states.iter().map(|s| single_mode(&const_vel_yaw(s))).collect();
    rows.insert("const_vel_yaw".into(), MetricsReport::compute(&cv, &gts, &maps, cfg)?);
    let oracle: Vec<PredictionSet> = states
        .iter()
        .zip(&gts)
        .map(|(s, g)| single_mode(&physics_oracle(s, g).1))
        .collect();
    rows.insert("physics_oracle".into(), MetricsReport::compute(&oracle, &gts, &maps, cfg)?);
    Ok((EvaluationTable { rows }, preds))
}
