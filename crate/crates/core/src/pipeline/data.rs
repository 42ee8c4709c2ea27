use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{distance_field, rasterize, DistanceField, RasterMap};
use crate::model::ModelConfig;
use crate::synth::Episode;

/// An episode with its target-frame raster and drivable-distance field.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub episode: Episode,
    pub raster: RasterMap,
    pub field: DistanceField,
}

impl Prepared {
    pub fn new(episode: Episode, config: &ModelConfig) -> Result<Self> {
        let (raster, warnings) = rasterize(
            &episode.scene,
            &episode.target_pose,
            &config.raster.space,
            config.raster.resolution,
        )?;
        for w in warnings {
            log::warn!("episode seed {}: {w:?}", episode.meta.seed);
        }
        let field = distance_field(&raster)?;
        Ok(Self {
            episode,
            raster,
            field,
        })
    }
}

/// Rasterizes every episode in parallel, keeping input order.
pub fn prepare(episodes: Vec<Episode>, config: &ModelConfig) -> Result<Vec<Prepared>> {
    episodes
        .into_par_iter()
        .map(|e| Prepared::new(e, config))
        .collect()
}
