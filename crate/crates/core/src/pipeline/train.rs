use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Prepared;
use crate::error::{Error, Result};
use crate::geometry::RasterMap;
use crate::losses::{total_loss, total_loss_with_grad, LossBreakdown, LossConfig};
use crate::model::{forward, Batch, ForwardOutput, ModelConfig};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{AdamConfig, AdamState, ParamStore, Real};
use crate::synth::{episode_seed, Episode};

pub const CHECKPOINT_KIND: &str = "mhajam-checkpoint";

fn make_batch(model: &ModelConfig, items: &[&Prepared]) -> Result<Batch> {
    let eps: Vec<&Episode> = items.iter().map(|p| &p.episode).collect();
    let rasters: Vec<&RasterMap> = items.iter().map(|p| &p.raster).collect();
    Batch::new(model, &eps, &rasters)
}

fn run_batch<T: Real>(
    model: &ModelConfig,
    loss: &LossConfig,
    params: &ParamStore<T>,
    items: &[&Prepared],
    with_grad: bool,
) -> Result<(ForwardOutput<T>, Vec<LossBreakdown>, Vec<T>, Vec<T>)> {
    let batch = make_batch(model, items)?;
    let out = forward(model, params, &batch)?;
    let finite = |v: crate::nn::Var| out.graph.tape.value(v).iter().all(|x| x.is_finite());
    if !finite(out.trajectories) || !finite(out.probs) {
        return Err(Error::NonFinite("model output".into()));
    }
    let sets = out.prediction_sets(model);
    let n = items.len() as f64;
    let mut d_traj = Vec::new();
    let mut d_probs = Vec::new();
    let mut breakdowns = Vec::with_capacity(sets.len());
    for (set, item) in sets.iter().zip(items) {
        let gt = &item.episode.ground_truth_future;
        if with_grad {
            let (b, g) = total_loss_with_grad(set, gt, &item.field, loss)?;
            d_traj.extend(g.trajectories.iter().map(|v| T::of(v / n)));
            d_probs.extend(g.probs.iter().map(|v| T::of(v / n)));
            breakdowns.push(b);
        } else {
            breakdowns.push(total_loss(set, gt, &item.field, loss)?);
        }
    }
    Ok((out, breakdowns, d_traj, d_probs))
}

/// Per-episode losses of one batch.
pub fn batch_loss_value<T: Real>(
    model: &ModelConfig,
    loss: &LossConfig,
    params: &ParamStore<T>,
    items: &[&Prepared],
) -> Result<Vec<LossBreakdown>> {
    Ok(run_batch(model, loss, params, items, false)?.1)
}

/// Per-episode losses of one batch; the gradient of the batch-mean total
/// loss is added to `params`.
pub fn batch_loss<T: Real>(
    model: &ModelConfig,
    loss: &LossConfig,
    params: &mut ParamStore<T>,
    items: &[&Prepared],
) -> Result<Vec<LossBreakdown>> {
    let (out, breakdowns, d_traj, d_probs) = run_batch(model, loss, params, items, true)?;
    out.backward(params, d_traj, d_probs)?;
    Ok(breakdowns)
}

/// Mean of the per-episode total losses.
pub fn mean_total(b: &[LossBreakdown]) -> f64 {
    b.iter().map(|x| x.total).sum::<f64>() / b.len().max(1) as f64
}

/// Batch-mean loss components of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub reg: f64,
    pub cl: f64,
    pub offroad: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    fn mean(step: u64, epoch: usize, b: &[LossBreakdown]) -> Self {
        let n = b.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| b.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            epoch,
            reg: avg(|x| x.reg),
            cl: avg(|x| x.cl),
            offroad: avg(|x| x.offroad),
            total: avg(|x| x.total),
            grad_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: RunConfig,
    epoch: usize,
    step: u64,
    adam_step: u64,
}

/// Mini-batch Adam training state in 32-bit floats.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = config.model.init_params(config.train.seed)?;
        let adam = AdamState::new(Self::adam_config(&config), &params);
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    fn adam_config(config: &RunConfig) -> AdamConfig {
        AdamConfig {
            lr: config.train.lr,
            ..AdamConfig::default()
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        ck.add_params(&self.params);
        ck.add_adam(&self.params, &self.adam);
        Ok(ck)
    }

    /// Restores the exact training state saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = checkpoint_meta(ck)?;
        let params = ck.params()?;
        meta.config.model.check_params(&params)?;
        let mut adam = AdamState::new(Self::adam_config(&meta.config), &params);
        ck.restore_adam(&params, &mut adam)?;
        adam.step = meta.adam_step;
        Ok(Self {
            config: meta.config,
            params,
            adam,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    /// Visiting order for `epoch`, a function of the run seed and the epoch
    /// only, so resumed runs shuffle identically.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(self.config.train.seed ^ 0x7368_7566, epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Learning rate used during `epoch` (zero-based).
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let t = &self.config.train;
        if t.epochs <= 1 {
            return t.lr;
        }
        let progress = epoch.min(t.epochs - 1) as f64 / (t.epochs - 1) as f64;
        t.lr * (1.0 - (1.0 - t.final_lr_fraction) * progress)
    }

    /// One pass over `data`; `sink` receives every step record.
    pub fn train_epoch<F>(&mut self, data: &[Prepared], mut sink: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::config("data.train", "training set is empty"));
        }
        self.adam.config.lr = self.epoch_lr(self.epoch);
        let order = self.epoch_order(self.epoch, data.len());
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let b = batch_loss(&self.config.model, &self.config.loss, &mut self.params, &items).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {} (epoch {})", self.step, self.epoch)),
                other => other,
            })?;
            let mut rec = StepRecord::mean(self.step, self.epoch, &b);
            rec.grad_norm = grad_norm(&self.params);
            if !rec.total.is_finite() || !rec.grad_norm.is_finite() {
                sink(&rec)?;
                return Err(Error::NonFinite(format!(
                    "loss at step {} (epoch {})",
                    self.step, self.epoch
                )));
            }
            if let Some(max) = self.config.train.grad_clip {
                if rec.grad_norm > max {
                    let scale = (max / rec.grad_norm) as f32;
                    for (_, t) in self.params.iter_mut() {
                        t.grad.iter_mut().for_each(|g| *g *= scale);
                    }
                }
            }
            self.adam.step(&mut self.params)?;
            if !self.params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
            }
            sink(&rec)?;
            records.push(rec);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Mean total loss over `data` without updating anything.
    pub fn mean_loss(&self, data: &[Prepared]) -> Result<LossBreakdown> {
        mean_loss(&self.config.model, &self.config.loss, &self.params, data, self.config.train.batch_size)
    }
}

/// Global L2 norm of the accumulated gradients.
fn grad_norm(p: &ParamStore<f32>) -> f64 {
    p.iter()
        .flat_map(|(_, t)| t.grad.iter())
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt()
}

fn checkpoint_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("unexpected kind `{}`", meta.kind)));
    }
    Ok(meta)
}

/// Run configuration and parameters stored in a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(RunConfig, ParamStore<f32>)> {
    let meta = checkpoint_meta(ck)?;
    let params = ck.params()?;
    meta.config.model.check_params(&params)?;
    Ok((meta.config, params))
}

/// Average of each loss component over `data`; `best_mode` is meaningless
/// in the result and set to zero.
pub fn mean_loss<T: Real>(
    model: &ModelConfig,
    loss: &LossConfig,
    params: &ParamStore<T>,
    data: &[Prepared],
    batch_size: usize,
) -> Result<LossBreakdown> {
    let mut all = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&Prepared> = chunk.iter().collect();
        all.extend(batch_loss_value(model, loss, params, &items)?);
    }
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| all.iter().map(f).sum::<f64>() / n;
    Ok(LossBreakdown {
        reg: avg(|x| x.reg),
        cl: avg(|x| x.cl),
        offroad: avg(|x| x.offroad),
        total: avg(|x| x.total),
        best_mode: 0,
    })
}
