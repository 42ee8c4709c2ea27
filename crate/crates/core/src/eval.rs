//! Constant-kinematics baselines and displacement, miss and off-road metrics.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RasterMap, Vec2};
use crate::model::PredictionSet;
use crate::synth::{AgentState, DT, FUTURE_LEN};

/// A sequence of predicted positions, one per future step.
pub type PointTrajectory = Vec<Vec2>;

/// Default miss threshold in meters.
pub const DEFAULT_MISS_DISTANCE: f64 = 2.0;

/// Kinematic state for extrapolation; `heading` is measured from +y toward +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub position: Vec2,
    pub heading: f64,
    pub v: f64,
    pub a: f64,
    pub yaw_rate: f64,
}

impl KinematicState {
    /// The target's own state in its frame: at the origin, facing +y.
    pub fn target(s: &AgentState) -> Self {
        Self {
            position: Vec2::new(0.0, 0.0),
            heading: 0.0,
            v: s.v,
            a: s.a,
            yaw_rate: s.yaw_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsModel {
    ConstVelYaw,
    ConstVelYawRate,
    ConstAccYaw,
    ConstAccYawRate,
}

impl PhysicsModel {
    pub const ALL: [PhysicsModel; 4] = [
        PhysicsModel::ConstVelYaw,
        PhysicsModel::ConstVelYawRate,
        PhysicsModel::ConstAccYaw,
        PhysicsModel::ConstAccYawRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhysicsModel::ConstVelYaw => "const_vel_yaw",
            PhysicsModel::ConstVelYawRate => "const_vel_yaw_rate",
            PhysicsModel::ConstAccYaw => "const_acc_yaw",
            PhysicsModel::ConstAccYawRate => "const_acc_yaw_rate",
        }
    }
}

#[derive(Clone, Copy)]
struct Complex(f64, f64);

impl Complex {
    fn mul(self, o: Complex) -> Complex {
        Complex(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn scale(self, s: f64) -> Complex {
        Complex(self.0 * s, self.1 * s)
    }
    fn add(self, o: Complex) -> Complex {
        Complex(self.0 + o.0, self.1 + o.1)
    }
    fn cis(a: f64) -> Complex {
        Complex(a.cos(), a.sin())
    }
    /// Division by `iω`.
    fn div_i(self, w: f64) -> Complex {
        Complex(self.1 / w, -self.0 / w)
    }
}

/// `(∫₀ᵗ e^{iωτ} dτ, ∫₀ᵗ τ e^{iωτ} dτ)`, by power series when `|ωt| < 1`
/// to avoid cancellation.
fn rotation_integrals(w: f64, t: f64) -> (Complex, Complex) {
    if (w * t).abs() < 1.0 {
        let mut i0 = Complex(0.0, 0.0);
        let mut i1 = Complex(0.0, 0.0);
        // term_n = (iωt)^n / n!
        let mut term = Complex(1.0, 0.0);
        for n in 0..30 {
            let nf = n as f64;
            i0 = i0.add(term.scale(t / (nf + 1.0)));
            i1 = i1.add(term.scale(t * t / (nf + 2.0)));
            term = term.mul(Complex(0.0, w * t)).scale(1.0 / (nf + 1.0));
        }
        (i0, i1)
    } else {
        let e = Complex::cis(w * t);
        let i0 = e.add(Complex(-1.0, 0.0)).div_i(w);
        let i1 = e.scale(t).div_i(w).add(i0.div_i(w).scale(-1.0));
        (i0, i1)
    }
}

/// Position after `t` seconds with speed `v + a·τ` (held at zero once it
/// reaches zero) and heading `ψ + ω·τ`.
fn integrate(s: &KinematicState, a: f64, w: f64, t: f64) -> Vec2 {
    let t_eff = if a < 0.0 && s.v + a * t < 0.0 {
        (-s.v / a).max(0.0)
    } else {
        t
    };
    let (i0, i1) = rotation_integrals(w, t_eff);
    // direction (sin ψ, cos ψ) is (Im, Re) of e^{iψ}
    let z = Complex::cis(s.heading).mul(i0.scale(s.v).add(i1.scale(a)));
    Vec2::new(s.position.x + z.1, s.position.y + z.0)
}

/// Extrapolation under one constant-kinematics model, sampled every `DT`.
pub fn physics_model(model: PhysicsModel, s: &KinematicState, steps: usize) -> PointTrajectory {
    let (a, w) = match model {
        PhysicsModel::ConstVelYaw => (0.0, 0.0),
        PhysicsModel::ConstVelYawRate => (0.0, s.yaw_rate),
        PhysicsModel::ConstAccYaw => (s.a, 0.0),
        PhysicsModel::ConstAccYawRate => (s.a, s.yaw_rate),
    };
    (1..=steps)
        .map(|k| integrate(s, a, w, k as f64 * DT))
        .collect()
}

pub fn const_vel_yaw(s: &KinematicState) -> PointTrajectory {
    physics_model(PhysicsModel::ConstVelYaw, s, FUTURE_LEN)
}

/// All four models, in [`PhysicsModel::ALL`] order.
pub fn physics_models(s: &KinematicState) -> [PointTrajectory; 4] {
    PhysicsModel::ALL.map(|m| physics_model(m, s, FUTURE_LEN))
}

/// The model with the lowest ADE against `gt` (ties: first in order).
pub fn physics_oracle(s: &KinematicState, gt: &[Vec2]) -> (PhysicsModel, PointTrajectory) {
    let mut best: Option<(PhysicsModel, PointTrajectory, f64)> = None;
    for m in PhysicsModel::ALL {
        let traj = physics_model(m, s, gt.len());
        let e = ade(&traj, gt);
        if best.as_ref().is_none_or(|b| e < b.2) {
            best = Some((m, traj, e));
        }
    }
    let (m, t, _) = best.expect("four models");
    (m, t)
}

/// Mean point-wise distance.
pub fn ade(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    let sum: f64 = traj.iter().zip(gt).map(|(p, q)| p.dist(*q)).sum();
    sum / gt.len() as f64
}

/// Distance at the last step.
pub fn fde(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj[gt.len() - 1].dist(gt[gt.len() - 1])
}

/// Largest point-wise distance.
pub fn max_displacement(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj.iter().zip(gt).map(|(p, q)| p.dist(*q)).fold(0.0, f64::max)
}

/// Indices of the `k` most probable modes (probability descending, then
/// index ascending).
pub fn top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::KOutOfRange {
            k,
            modes: probs.len(),
        });
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn min_over_top_k<F: Fn(&[Vec2]) -> f64>(pred: &PredictionSet, k: usize, f: F) -> Result<f64> {
    Ok(top_k(&pred.probs, k)?
        .into_iter()
        .map(|l| f(&pred.mean_trajectory(l)))
        .fold(f64::INFINITY, f64::min))
}

pub fn min_ade_k(pred: &PredictionSet, gt: &[Vec2], k: usize) -> Result<f64> {
    min_over_top_k(pred, k, |t| ade(t, gt))
}

pub fn min_fde_k(pred: &PredictionSet, gt: &[Vec2], k: usize) -> Result<f64> {
    min_over_top_k(pred, k, |t| fde(t, gt))
}

/// Whether every top-`k` mode strays at least `d` from the truth at some step.
pub fn is_miss(pred: &PredictionSet, gt: &[Vec2], k: usize, d: f64) -> Result<bool> {
    Ok(min_over_top_k(pred, k, |t| max_displacement(t, gt))? >= d)
}

pub fn miss_rate(preds: &[PredictionSet], gts: &[Vec<Vec2>], k: usize, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::config("d", "must be positive"));
    }
    let mut misses = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        misses += is_miss(p, g, k, d)? as usize;
    }
    Ok(misses as f64 / preds.len().max(1) as f64)
}

/// Point-wise drivability lookup.
pub trait DrivableArea {
    fn is_drivable(&self, p: Vec2) -> bool;
}

impl DrivableArea for RasterMap {
    fn is_drivable(&self, p: Vec2) -> bool {
        self.is_drivable_at(p)
    }
}

impl<F: Fn(Vec2) -> bool> DrivableArea for F {
    fn is_drivable(&self, p: Vec2) -> bool {
        self(p)
    }
}

/// Which points decide whether a trajectory is off-road.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffroadRule {
    #[default]
    AnyPoint,
    FinalPoint,
}

pub fn is_offroad<D: DrivableArea + ?Sized>(traj: &[Vec2], map: &D, rule: OffroadRule) -> bool {
    match rule {
        OffroadRule::AnyPoint => traj.iter().any(|p| !map.is_drivable(*p)),
        OffroadRule::FinalPoint => traj.last().is_some_and(|p| !map.is_drivable(*p)),
    }
}

/// Off-road trajectories among the top-`k` modes of each episode, as a
/// fraction of `k · episodes`.
pub fn offroad_rate<D: DrivableArea>(preds: &[PredictionSet], maps: &[D], k: usize, rule: OffroadRule) -> Result<f64> {
    let mut off = 0usize;
    for (p, m) in preds.iter().zip(maps) {
        for l in top_k(&p.probs, k)? {
            off += is_offroad(&p.mean_trajectory(l), m, rule) as usize;
        }
    }
    Ok(off as f64 / (k * preds.len()).max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub miss_distances: Vec<f64>,
    /// Modes considered by the off-road rate; `None` means all modes.
    pub offroad_k: Option<usize>,
    pub offroad_rule: OffroadRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 15],
            miss_distances: vec![DEFAULT_MISS_DISTANCE],
            offroad_k: None,
            offroad_rule: OffroadRule::AnyPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("ks", "need at least one k, all ≥ 1"));
        }
        if self.miss_distances.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config("miss_distances", "must be positive"));
        }
        if self.offroad_k == Some(0) {
            return Err(Error::config("offroad_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Metric table with explicit `k` and `k,d` keys. A requested `k` larger
/// than the number of modes is evaluated with all modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub minade: IndexMap<String, f64>,
    pub minfde: IndexMap<String, f64>,
    pub missrate: IndexMap<String, f64>,
    pub offroad_rate: f64,
    pub n_episodes: usize,
}

struct EpisodeMetrics {
    ade: Vec<f64>,
    fde: Vec<f64>,
    miss: Vec<bool>,
    offroad: usize,
}

fn miss_key(k: usize, d: f64) -> String {
    format!("{k},{d}")
}

impl MetricsReport {
    pub fn compute<D: DrivableArea + Sync>(
        preds: &[PredictionSet],
        gts: &[Vec<Vec2>],
        maps: &[D],
        cfg: &EvalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if preds.len() != gts.len() || preds.len() != maps.len() {
            return Err(Error::shape("metrics", &[preds.len()], &[gts.len(), maps.len()]));
        }
        let per: Vec<EpisodeMetrics> = preds
            .par_iter()
            .zip(gts.par_iter())
            .zip(maps.par_iter())
            .map(|((p, g), m)| -> Result<EpisodeMetrics> {
                let l = p.num_modes();
                let mut out = EpisodeMetrics {
                    ade: Vec::new(),
                    fde: Vec::new(),
                    miss: Vec::new(),
                    offroad: 0,
                };
                for &k in &cfg.ks {
                    let k = k.min(l);
                    out.ade.push(min_ade_k(p, g, k)?);
                    out.fde.push(min_fde_k(p, g, k)?);
                    for &d in &cfg.miss_distances {
                        out.miss.push(is_miss(p, g, k, d)?);
                    }
                }
                let k = cfg.offroad_k.unwrap_or(l).min(l);
                for mode in top_k(&p.probs, k)? {
                    out.offroad += is_offroad(&p.mean_trajectory(mode), m, cfg.offroad_rule) as usize;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let n = preds.len();
        let denom = n.max(1) as f64;
        let mut minade = IndexMap::new();
        let mut minfde = IndexMap::new();
        let mut missrate = IndexMap::new();
        let nd = cfg.miss_distances.len();
        for (i, &k) in cfg.ks.iter().enumerate() {
            minade.insert(k.to_string(), per.iter().map(|e| e.ade[i]).sum::<f64>() / denom);
            minfde.insert(k.to_string(), per.iter().map(|e| e.fde[i]).sum::<f64>() / denom);
            for (j, &d) in cfg.miss_distances.iter().enumerate() {
                let misses = per.iter().filter(|e| e.miss[i * nd + j]).count();
                missrate.insert(miss_key(k, d), misses as f64 / denom);
            }
        }
        let considered: usize = preds
            .iter()
            .map(|p| cfg.offroad_k.unwrap_or(p.num_modes()).min(p.num_modes()))
            .sum();
        let offroad = per.iter().map(|e| e.offroad).sum::<usize>();
        Ok(Self {
            minade,
            minfde,
            missrate,
            offroad_rate: offroad as f64 / considered.max(1) as f64,
            n_episodes: n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A single-mode prediction set with unit probability.
pub fn single_mode(traj: &[Vec2]) -> PredictionSet {
    use crate::model::Gaussian5;
    PredictionSet {
        modes: vec![traj
            .iter()
            .map(|p| Gaussian5 {
                mu_x: p.x,
                mu_y: p.y,
                sigma_x: 1.0,
                sigma_y: 1.0,
                rho: 0.0,
            })
            .collect()],
        probs: vec![1.0],
    }
}
