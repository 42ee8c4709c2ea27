//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Positional arguments select
//! criteria by number, e.g. `cargo test --test acceptance -- 2 3`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mhajam::eval::{
    physics_model, physics_oracle, EvalConfig, KinematicState, MetricsReport, OffroadRule, PhysicsModel,
};
use mhajam::geometry::{distance_field, squared_edt, GridSpec, InteractionSpace, RasterMap, SemanticClass, Vec2};
use mhajam::losses::regression_loss;
use mhajam::model::{Gaussian5, ModelConfig, PredictionSet, Variant};
use mhajam::pipeline::gradcheck::{end_to_end, GradCheckConfig};
use mhajam::pipeline::plot::{attention_export, render_svg, AttentionExport, PlotOptions};
use mhajam::pipeline::{evaluate, prepare, Prediction, Prepared, RunConfig, Trainer};
use mhajam::synth::{generate_dataset, read_dataset_from, write_dataset_to, Layout, ScenarioSpec, FUTURE_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let check = match end_to_end(&cfg) {
        Ok(c) => c,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let params = cfg.model.init_params::<f64>(cfg.seed).unwrap();
    let checked: BTreeSet<&str> = check.report.entries.iter().map(|e| e.name.as_str()).collect();
    let missing: Vec<&str> = params.iter().map(|(n, _)| n).filter(|n| !checked.contains(n)).collect();
    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let err = check.report.max_rel_error;
    let pass = err < 1e-4 && missing.is_empty() && check.report.coordinates == total && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "L={} grid {}x{} f64: max rel error {err:.2e} over {} coordinates in {} tensors, {:.1}s{}",
            cfg.model.modes,
            cfg.model.grid.0,
            cfg.model.grid.1,
            check.report.coordinates,
            checked.len(),
            elapsed.as_secs_f64(),
            if missing.is_empty() { String::new() } else { format!(", unchecked {missing:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn brute_force_sq_edt(feature: &[bool], w: usize, h: usize) -> Vec<i64> {
    let sites: Vec<(i64, i64)> = (0..w * h)
        .filter(|&i| feature[i])
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    (0..w * h)
        .map(|i| {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            sites
                .iter()
                .map(|&(sr, sc)| (sr - r) * (sr - r) + (sc - c) * (sc - c))
                .min()
                .unwrap()
        })
        .collect()
}

fn random_raster(rng: &mut ChaCha8Rng, w: usize, h: usize, res: f64) -> RasterMap {
    let space = InteractionSpace {
        lateral_extent: w as f64 * res / 2.0,
        ahead_extent: h as f64 * res / 2.0,
        behind_extent: h as f64 * res / 2.0,
    };
    let mut r = RasterMap::empty(GridSpec::new(space, res).unwrap());
    let density = rng.gen_range(0.002..0.6);
    for row in 0..h {
        for col in 0..w {
            if rng.gen_bool(density) {
                r.set(SemanticClass::Drivable, row, col);
            }
        }
    }
    r.set(SemanticClass::Drivable, rng.gen_range(0..h), rng.gen_range(0..w));
    r
}

fn check_edt(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for case in 0..200 {
        let (w, h) = match case {
            0 => (64, 64),
            1 => (1, 1),
            2 => (64, 1),
            3 => (1, 64),
            _ => (rng.gen_range(1..=64), rng.gen_range(1..=64)),
        };
        let res = [0.1, 0.5, 1.0, 2.5][case % 4];
        let raster = random_raster(rng, w, h, res);
        let feature: Vec<bool> = raster.plane(SemanticClass::Drivable).iter().map(|&v| v != 0).collect();
        let expected = brute_force_sq_edt(&feature, w, h);
        if squared_edt(&feature, w, h) != expected {
            return Err(format!("squared EDT differs on case {case} ({w}x{h})"));
        }
        let field = distance_field(&raster).map_err(|e| e.to_string())?;
        for (i, d2) in expected.iter().enumerate() {
            if field.values[i] != (*d2 as f64).sqrt() * res {
                return Err(format!("distance field differs on case {case} at pixel {i}"));
            }
        }
    }
    Ok(())
}

/// Independent bivariate normal negative log density.
fn nll(p: Vec2, g: &Gaussian5) -> f64 {
    let (dx, dy) = ((p.x - g.mu_x) / g.sigma_x, (p.y - g.mu_y) / g.sigma_y);
    let one_minus = 1.0 - g.rho * g.rho;
    (2.0 * PI * g.sigma_x * g.sigma_y * one_minus.sqrt()).ln() + (dx * dx + dy * dy - 2.0 * g.rho * dx * dy) / (2.0 * one_minus)
}

fn random_set(rng: &mut ChaCha8Rng, l: usize, t: usize, spread: f64) -> PredictionSet {
    let modes = (0..l)
        .map(|_| {
            let (mut x, mut y) = (0.0, 0.0);
            let (vx, vy) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.0..6.0));
            (0..t)
                .map(|_| {
                    x += vx + rng.gen_range(-spread..spread);
                    y += vy + rng.gen_range(-spread..spread);
                    Gaussian5 {
                        mu_x: x,
                        mu_y: y,
                        sigma_x: rng.gen_range(0.05..5.0),
                        sigma_y: rng.gen_range(0.05..5.0),
                        rho: rng.gen_range(-0.95..0.95),
                    }
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..l)
        .map(|_| if rng.gen_bool(0.2) { 0.25 } else { rng.gen_range(0.01..1.0) })
        .collect();
    let sum: f64 = raw.iter().sum();
    PredictionSet {
        modes,
        probs: raw.iter().map(|p| p / sum).collect(),
    }
}

fn random_truth(rng: &mut ChaCha8Rng, t: usize) -> Vec<Vec2> {
    let (mut x, mut y) = (0.0, 0.0);
    let (vx, vy) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.0..6.0));
    (0..t)
        .map(|_| {
            x += vx + rng.gen_range(-0.5..0.5);
            y += vy + rng.gen_range(-0.5..0.5);
            Vec2::new(x, y)
        })
        .collect()
}

fn check_regression(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for case in 0..1000 {
        let l = rng.gen_range(1..=8);
        let t = rng.gen_range(1..=FUTURE_LEN);
        let set = random_set(rng, l, t, 0.8);
        let gt = random_truth(rng, t);
        let sums: Vec<f64> = set.modes.iter().map(|m| m.iter().zip(&gt).map(|(g, p)| nll(*p, g)).sum()).collect();
        let (min, arg) = regression_loss(&set, &gt).map_err(|e| e.to_string())?;
        let best = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = (0..l).filter(|&i| (sums[i] - best).abs() <= 1e-9 * (1.0 + best.abs())).collect();
        if (min - best).abs() > 1e-9 * (1.0 + best.abs()) || !tied.contains(&arg) {
            return Err(format!("case {case}: got ({min}, {arg}), enumeration ({best}, {tied:?})"));
        }
    }
    Ok(())
}

/// RK4 on `(x, y, v, ψ)` with speed held at zero once it reaches zero.
fn fine_step(s: &KinematicState, a: f64, w: f64, until: f64, dt: f64) -> Vec<Vec2> {
    let deriv = |st: [f64; 4]| {
        let acc = if st[2] <= 0.0 && a < 0.0 { 0.0 } else { a };
        [st[2].max(0.0) * st[3].sin(), st[2].max(0.0) * st[3].cos(), acc, w]
    };
    let mut st = [s.position.x, s.position.y, s.v, s.heading];
    let steps = (until / dt).round() as usize;
    let per_sample = (0.5 / dt).round() as usize;
    let mut out = Vec::new();
    for i in 1..=steps {
        let k1 = deriv(st);
        let k2 = deriv(std::array::from_fn(|j| st[j] + 0.5 * dt * k1[j]));
        let k3 = deriv(std::array::from_fn(|j| st[j] + 0.5 * dt * k2[j]));
        let k4 = deriv(std::array::from_fn(|j| st[j] + dt * k3[j]));
        st = std::array::from_fn(|j| st[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
        if st[2] < 0.0 {
            st[2] = 0.0;
        }
        if i % per_sample == 0 {
            out.push(Vec2::new(st[0], st[1]));
        }
    }
    out
}

fn plain_ade(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        s += ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
    }
    s / b.len() as f64
}

fn check_physics(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let s = KinematicState {
            position: Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            heading: rng.gen_range(-PI..PI),
            v: rng.gen_range(0.0..20.0),
            a: rng.gen_range(-4.0..3.0),
            yaw_rate: if case % 10 == 0 { 0.0 } else { rng.gen_range(-0.6..0.6) },
        };
        let trajs: Vec<Vec<Vec2>> = PhysicsModel::ALL.iter().map(|m| physics_model(*m, &s, FUTURE_LEN)).collect();
        for (m, traj) in PhysicsModel::ALL.iter().zip(&trajs) {
            let (a, w) = match m {
                PhysicsModel::ConstVelYaw => (0.0, 0.0),
                PhysicsModel::ConstVelYawRate => (0.0, s.yaw_rate),
                PhysicsModel::ConstAccYaw => (s.a, 0.0),
                PhysicsModel::ConstAccYawRate => (s.a, s.yaw_rate),
            };
            let fine = fine_step(&s, a, w, FUTURE_LEN as f64 * 0.5, 1e-3);
            for (p, q) in traj.iter().zip(&fine) {
                let e = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                worst = worst.max(e);
                if e > 1e-3 {
                    return Err(format!("case {case} {}: {e:.2e} m from fine-step integration", m.name()));
                }
            }
        }
        let truth_from = rng.gen_range(0..4);
        let gt: Vec<Vec2> = trajs[truth_from]
            .iter()
            .map(|p| Vec2::new(p.x + rng.gen_range(-1.0..1.0), p.y + rng.gen_range(-1.0..1.0)))
            .collect();
        let mut best = 0;
        for i in 1..4 {
            if plain_ade(&trajs[i], &gt) < plain_ade(&trajs[best], &gt) {
                best = i;
            }
        }
        let (model, traj) = physics_oracle(&s, &gt);
        if model != PhysicsModel::ALL[best] || traj != trajs[best] {
            return Err(format!("case {case}: oracle chose {}, enumeration {}", model.name(), PhysicsModel::ALL[best].name()));
        }
    }
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let edt = check_edt(&mut rng);
    let reg = check_regression(&mut rng);
    let phys = check_physics(&mut rng);
    let pass = edt.is_ok() && reg.is_ok() && phys.is_ok();
    let show = |r: &Result<(), String>| match r {
        Ok(()) => "ok".to_string(),
        Err(e) => e.clone(),
    };
    let phys_msg = match &phys {
        Ok(w) => format!("ok, worst {w:.1e} m"),
        Err(e) => e.clone(),
    };
    Outcome::new(
        pass,
        format!(
            "EDT 200 rasters: {}; regression 1000 instances: {}; physics oracle 1000 states: {phys_msg}",
            show(&edt),
            show(&reg)
        ),
    )
}

// ---------------------------------------------------------------- 3

fn brute_force_report(
    sets: &[PredictionSet],
    gts: &[Vec<Vec2>],
    maps: &[RasterMap],
    ks: &[usize],
    ds: &[f64],
    rule: OffroadRule,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let n = sets.len() as f64;
    let ranked: Vec<Vec<usize>> = sets
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.probs.len()).collect();
            // stable sort keeps the lower index first among equal probabilities
            idx.sort_by(|a, b| s.probs[*b].partial_cmp(&s.probs[*a]).unwrap());
            idx
        })
        .collect();
    let means = |s: &PredictionSet, l: usize| -> Vec<Vec2> { s.modes[l].iter().map(|g| Vec2::new(g.mu_x, g.mu_y)).collect() };
    let dist = |p: Vec2, q: Vec2| ((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y)).sqrt();
    let (mut minade, mut minfde, mut miss) = (Vec::new(), Vec::new(), Vec::new());
    for &k in ks {
        let (mut ade_sum, mut fde_sum) = (0.0, 0.0);
        let mut misses = vec![0usize; ds.len()];
        for ((s, gt), order) in sets.iter().zip(gts).zip(&ranked) {
            let k = k.min(s.probs.len());
            let (mut best_ade, mut best_fde, mut best_max) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
            for &l in &order[..k] {
                let traj = means(s, l);
                let mut sum = 0.0;
                let mut worst = 0.0f64;
                for (p, q) in traj.iter().zip(gt) {
                    sum += dist(*p, *q);
                    worst = worst.max(dist(*p, *q));
                }
                best_ade = best_ade.min(sum / gt.len() as f64);
                best_fde = best_fde.min(dist(traj[gt.len() - 1], gt[gt.len() - 1]));
                best_max = best_max.min(worst);
            }
            ade_sum += best_ade;
            fde_sum += best_fde;
            for (j, d) in ds.iter().enumerate() {
                if best_max >= *d {
                    misses[j] += 1;
                }
            }
        }
        minade.push(ade_sum / n);
        minfde.push(fde_sum / n);
        miss.extend(misses.iter().map(|m| *m as f64 / n));
    }
    let (mut off, mut considered) = (0usize, 0usize);
    for ((s, map), order) in sets.iter().zip(maps).zip(&ranked) {
        let g = map.grid;
        for &l in order.iter() {
            considered += 1;
            let traj = means(s, l);
            let on = |p: &Vec2| {
                let c = ((p.x + g.space.lateral_extent) / g.resolution).floor().clamp(0.0, (g.width - 1) as f64) as usize;
                let r = ((g.space.ahead_extent - p.y) / g.resolution).floor().clamp(0.0, (g.height - 1) as f64) as usize;
                map.planes[SemanticClass::Drivable.channel()][r * g.width + c] != 0
            };
            let off_road = match rule {
                OffroadRule::AnyPoint => traj.iter().any(|p| !on(p)),
                OffroadRule::FinalPoint => !on(traj.last().unwrap()),
            };
            off += off_road as usize;
        }
    }
    (minade, minfde, miss, off as f64 / considered as f64)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let space = InteractionSpace::default();
    let mut failures = Vec::new();
    let mut monotone_violations = 0;
    for trial in 0..500 {
        let n = rng.gen_range(1..=12);
        let l = rng.gen_range(1..=8);
        let sets: Vec<PredictionSet> = (0..n).map(|_| random_set(&mut rng, l, FUTURE_LEN, 1.5)).collect();
        let gts: Vec<Vec<Vec2>> = (0..n).map(|_| random_truth(&mut rng, FUTURE_LEN)).collect();
        let res = [0.5, 1.0, 2.0][trial % 3];
        let maps: Vec<RasterMap> = (0..n)
            .map(|_| {
                let mut m = RasterMap::empty(GridSpec::new(space, res).unwrap());
                let (lo, hi) = (rng.gen_range(0..m.width() / 2), rng.gen_range(m.width() / 2..m.width()));
                for r in 0..m.height() {
                    for c in lo..=hi {
                        if rng.gen_bool(0.97) {
                            m.set(SemanticClass::Drivable, r, c);
                        }
                    }
                }
                m
            })
            .collect();
        let mut ks: Vec<usize> = (1..=l + 2).filter(|_| rng.gen_bool(0.6)).collect();
        if ks.is_empty() {
            ks.push(1);
        }
        let mut ds: Vec<f64> = vec![2.0];
        for _ in 0..rng.gen_range(0..3) {
            ds.push((rng.gen_range(0.5..12.0f64) * 4.0).round() / 4.0);
        }
        ds.sort_by(f64::total_cmp);
        ds.dedup();
        let rule = if trial % 5 == 4 { OffroadRule::FinalPoint } else { OffroadRule::AnyPoint };
        let cfg = EvalConfig {
            ks: ks.clone(),
            miss_distances: ds.clone(),
            offroad_k: None,
            offroad_rule: rule,
        };
        let report = match MetricsReport::compute(&sets, &gts, &maps, &cfg) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let (minade, minfde, miss, off) = brute_force_report(&sets, &gts, &maps, &ks, &ds, rule);
        let got_ade: Vec<f64> = ks.iter().map(|k| report.minade[&k.to_string()]).collect();
        let got_fde: Vec<f64> = ks.iter().map(|k| report.minfde[&k.to_string()]).collect();
        let got_miss: Vec<f64> = ks
            .iter()
            .flat_map(|k| ds.iter().map(move |d| (*k, *d)))
            .map(|(k, d)| report.missrate[&format!("{k},{d}")])
            .collect();
        if got_ade != minade || got_fde != minfde || got_miss != miss || report.offroad_rate != off {
            failures.push(format!("trial {trial}: report differs from brute force"));
        }
        for i in 1..ks.len() {
            if got_ade[i] > got_ade[i - 1] {
                monotone_violations += 1;
            }
            for j in 0..ds.len() {
                if got_miss[i * ds.len() + j] > got_miss[(i - 1) * ds.len() + j] {
                    monotone_violations += 1;
                }
            }
        }
        for i in 0..ks.len() {
            for j in 1..ds.len() {
                if got_miss[i * ds.len() + j] > got_miss[i * ds.len() + j - 1] {
                    monotone_violations += 1;
                }
            }
        }
    }
    let pass = failures.is_empty() && monotone_violations == 0;
    Outcome::new(
        pass,
        format!(
            "500 random sets: {} mismatches, {} monotonicity violations{}",
            failures.len(),
            monotone_violations,
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 4 to 7, 9

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_EPISODES: usize = 2000;
const TEST_EPISODES: usize = 500;
const EPOCHS: usize = 12;
const LR: f64 = 2e-3;
const FINAL_LR_FRACTION: f64 = 0.05;
const GRAD_CLIP: f64 = 100.0;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Run {
    L1,
    L4,
    L16,
    L16NoOffroad,
    MapOnly,
    AgentsOnly,
}

impl Run {
    const ALL: [Run; 6] = [Run::L1, Run::L4, Run::L16, Run::L16NoOffroad, Run::MapOnly, Run::AgentsOnly];

    fn config(self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::compact();
        cfg.model.modes = match self {
            Run::L1 => 1,
            Run::L4 => 4,
            _ => 16,
        };
        cfg.model.variant = match self {
            Run::MapOnly => Variant::MapOnly,
            Run::AgentsOnly => Variant::AgentsOnly,
            _ => Variant::Jam,
        };
        cfg.loss.lambda_or = if self == Run::L16NoOffroad { 0.0 } else { 0.5 };
        cfg.train.epochs = EPOCHS;
        cfg.train.lr = LR;
        cfg.train.final_lr_fraction = FINAL_LR_FRACTION;
        cfg.train.grad_clip = Some(GRAD_CLIP);
        cfg.train.seed = seed;
        cfg.eval.ks = vec![cfg.model.modes];
        cfg
    }
}

struct RunResult {
    report: MetricsReport,
    cv_ade: f64,
    elapsed: Duration,
    alpha_worst: f64,
    alpha_heads: usize,
}

impl RunResult {
    fn minade(&self) -> f64 {
        *self.report.minade.values().next().unwrap()
    }
}

fn alpha_deviation(preds: &[Prediction]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut heads = 0;
    for p in preds {
        for (_, hs) in &p.attention {
            for alpha in hs {
                worst = worst.max((alpha.iter().sum::<f64>() - 1.0).abs());
                heads += 1;
            }
        }
    }
    (worst, heads)
}

fn train_and_evaluate(run: Run, seed: u64, train: &[Prepared], test: &[Prepared]) -> Result<(RunResult, Vec<Prediction>), String> {
    let start = Instant::now();
    let cfg = run.config(seed);
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    for _ in 0..cfg.train.epochs {
        trainer.train_epoch(train, |_| Ok(())).map_err(|e| e.to_string())?;
    }
    let (table, preds) = evaluate(&cfg.model, &trainer.params, test, &cfg.eval, 64).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (alpha_worst, alpha_heads) = alpha_deviation(&preds);
    let mut rows = table.rows.into_values();
    let report = rows.next().unwrap();
    let cv_ade = rows.next().unwrap().minade.values().next().copied().unwrap();
    Ok((
        RunResult {
            report,
            cv_ade,
            elapsed,
            alpha_worst,
            alpha_heads,
        },
        preds,
    ))
}

struct SeedRuns {
    seed: u64,
    runs: Vec<(Run, RunResult)>,
}

impl SeedRuns {
    fn get(&self, run: Run) -> &RunResult {
        &self.runs.iter().find(|(r, _)| *r == run).unwrap().1
    }
}

struct Trained {
    seeds: Vec<SeedRuns>,
    /// Test split and JAM L = 16 predictions of the first seed.
    showcase: (Vec<Prepared>, Vec<Prediction>),
}

fn train_all() -> Result<Trained, String> {
    let spec = ScenarioSpec::for_layout(Layout::FourWay);
    let model = ModelConfig::compact();
    let mut seeds = Vec::new();
    let mut showcase = None;
    for seed in SEEDS {
        let train = generate_dataset(&spec, TRAIN_EPISODES, 1000 + seed).map_err(|e| e.to_string())?;
        let test = generate_dataset(&spec, TEST_EPISODES, 5000 + seed).map_err(|e| e.to_string())?;
        let train = prepare(train, &model).map_err(|e| e.to_string())?;
        let test = prepare(test, &model).map_err(|e| e.to_string())?;
        let mut runs = Vec::new();
        for run in Run::ALL {
            let (result, preds) = train_and_evaluate(run, seed, &train, &test)?;
            eprintln!(
                "  seed {seed} {run:?}: MinADE_{} {:.3}, off-road {:.3}, const-vel ADE {:.3}, {:.0}s",
                run.config(seed).model.modes,
                result.minade(),
                result.report.offroad_rate,
                result.cv_ade,
                result.elapsed.as_secs_f64()
            );
            if showcase.is_none() && run == Run::L16 {
                showcase = Some((test.clone(), preds));
            }
            runs.push((run, result));
        }
        seeds.push(SeedRuns { seed, runs });
    }
    Ok(Trained {
        seeds,
        showcase: showcase.ok_or("no JAM run")?,
    })
}

fn majority(passes: &[bool]) -> bool {
    passes.iter().filter(|p| **p).count() * 2 > passes.len()
}

fn seed_summary(passes: &[bool]) -> String {
    format!("{}/{} seeds", passes.iter().filter(|p| **p).count(), passes.len())
}

fn criterion_4(t: &Trained) -> Outcome {
    let mut passes = Vec::new();
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for s in &t.seeds {
        let (a, b, c) = (s.get(Run::L1).minade(), s.get(Run::L4).minade(), s.get(Run::L16).minade());
        passes.push(a > b && b > c);
        parts.push(format!("seed {}: {a:.3} > {b:.3} > {c:.3}", s.seed));
        for run in [Run::L1, Run::L4, Run::L16] {
            slowest = slowest.max(s.get(run).elapsed);
        }
    }
    let in_time = slowest < Duration::from_secs(30 * 60);
    Outcome::new(
        majority(&passes) && in_time,
        format!(
            "MinADE_L for L = 1, 4, 16 strictly decreasing on {} ({}); slowest run {:.0}s",
            seed_summary(&passes),
            parts.join("; "),
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_5(t: &Trained) -> Outcome {
    let mut passes = Vec::new();
    let mut parts = Vec::new();
    for s in &t.seeds {
        let r = s.get(Run::L16);
        let ratio = r.minade() / r.cv_ade;
        passes.push(ratio < 0.6);
        parts.push(format!("seed {}: {:.3} / {:.3} = {ratio:.3}", s.seed, r.minade(), r.cv_ade));
    }
    let ok = passes.iter().filter(|p| **p).count() >= 2;
    Outcome::new(
        ok,
        format!("MinADE_16 below 60% of const-vel-yaw ADE on {} ({})", seed_summary(&passes), parts.join("; ")),
    )
}

fn criterion_6(t: &Trained) -> Outcome {
    let mut passes = Vec::new();
    let mut parts = Vec::new();
    for s in &t.seeds {
        let (with, without) = (s.get(Run::L16), s.get(Run::L16NoOffroad));
        let degradation = with.minade() / without.minade() - 1.0;
        passes.push(with.report.offroad_rate < without.report.offroad_rate && degradation < 0.10);
        parts.push(format!(
            "seed {}: off-road {:.3} vs {:.3}, MinADE_16 {:.3} vs {:.3} ({:+.1}%)",
            s.seed,
            with.report.offroad_rate,
            without.report.offroad_rate,
            with.minade(),
            without.minade(),
            100.0 * degradation
        ));
    }
    let ok = passes.iter().filter(|p| **p).count() >= 2;
    Outcome::new(
        ok,
        format!("lambda_or 0.5 vs 0 lowers off-road rate within 10% MinADE_16 on {} ({})", seed_summary(&passes), parts.join("; ")),
    )
}

fn criterion_7(t: &Trained) -> Outcome {
    let mut passes = Vec::new();
    let mut parts = Vec::new();
    for s in &t.seeds {
        let (jam, agents, map) = (s.get(Run::L16), s.get(Run::AgentsOnly), s.get(Run::MapOnly));
        let agents_worse = agents.report.offroad_rate > jam.report.offroad_rate;
        let map_worse = map.minade() > jam.minade();
        passes.push(agents_worse && map_worse);
        parts.push(format!(
            "seed {}: off-road agents_only {:.3} vs jam {:.3}, MinADE_16 map_only {:.3} vs jam {:.3}",
            s.seed,
            agents.report.offroad_rate,
            jam.report.offroad_rate,
            map.minade(),
            jam.minade()
        ));
    }
    let ok = passes.iter().filter(|p| **p).count() >= 2;
    Outcome::new(ok, format!("ablations worse than JAM on {} ({})", seed_summary(&passes), parts.join("; ")))
}

fn criterion_9(t: &Trained) -> Outcome {
    let mut worst = 0.0f64;
    let mut heads = 0;
    for s in &t.seeds {
        for (_, r) in &s.runs {
            worst = worst.max(r.alpha_worst);
            heads += r.alpha_heads;
        }
    }
    let (test, preds) = &t.showcase;
    let model = Run::L16.config(SEEDS[0]).model;
    let mut mismatches = 0;
    let mut rendered = 0;
    for i in (0..test.len()).step_by(25) {
        let export = attention_export(&model, &preds[i], i);
        let json = serde_json::to_string(&export).unwrap();
        let back: AttentionExport = serde_json::from_str(&json).unwrap();
        let restored = Prediction {
            set: preds[i].set.clone(),
            attention: back.blocks.iter().map(|b| (b.name.clone(), b.heads.clone())).collect(),
        };
        for head in 0..model.modes {
            let opts = PlotOptions {
                attention: Some((0, head)),
                ..PlotOptions::default()
            };
            let svg = render_svg(&model, &test[i], &restored, &opts).unwrap();
            rendered += 1;
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let alpha = &export.blocks[0].heads[head];
            let max = alpha.iter().cloned().fold(0.0, f64::max);
            let mut cells = 0;
            for node in doc.descendants().filter(|n| n.attribute("class") == Some("attn-cell")) {
                cells += 1;
                let m: usize = node.attribute("data-m").unwrap().parse().unwrap();
                let n: usize = node.attribute("data-n").unwrap().parse().unwrap();
                let a: f64 = node.attribute("data-alpha").unwrap().parse().unwrap();
                let o: f64 = node.attribute("opacity").unwrap().parse().unwrap();
                let expected = alpha[m * model.grid.1 + n];
                if a != expected || o != expected / max {
                    mismatches += 1;
                }
            }
            if cells != alpha.len() {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        worst <= 1e-6 && mismatches == 0 && heads > 0,
        format!("{heads} heads, worst |sum alpha - 1| {worst:.1e}; {rendered} JSON-to-SVG overlays, {mismatches} cell mismatches"),
    )
}

// ---------------------------------------------------------------- 8

fn pipeline_once() -> mhajam::error::Result<(Vec<u8>, String)> {
    let spec = ScenarioSpec::for_layout(Layout::FourWay);
    let mut dataset = Vec::new();
    write_dataset_to(&mut dataset, &generate_dataset(&spec, 60, 77)?)?;
    let episodes = read_dataset_from(dataset.as_slice())?;
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::compact();
    cfg.model.modes = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.seed = 8;
    cfg.eval.ks = vec![1, 4];
    let (train, test) = episodes.split_at(40);
    let train = prepare(train.to_vec(), &cfg.model)?;
    let test = prepare(test.to_vec(), &cfg.model)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    for _ in 0..cfg.train.epochs {
        trainer.train_epoch(&train, |_| Ok(()))?;
    }
    let (table, _) = evaluate(&cfg.model, &trainer.params, &test, &cfg.eval, 8)?;
    Ok((dataset, table.to_json()?))
}

fn criterion_8() -> Outcome {
    match (pipeline_once(), pipeline_once()) {
        (Ok(a), Ok(b)) => Outcome::new(
            a == b,
            format!(
                "dataset {} bytes, metrics report {} bytes, {}",
                a.0.len(),
                a.1.len(),
                if a == b { "identical" } else { "different" }
            ),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, format!("error: {e}")),
    }
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, o));
    };
    if wanted(1) {
        report(1, criterion_1());
    }
    if wanted(2) {
        report(2, criterion_2());
    }
    if wanted(3) {
        report(3, criterion_3());
    }
    if [4, 5, 6, 7, 9].into_iter().any(wanted) {
        let start = Instant::now();
        eprintln!("training {} runs per seed on {} seeds", Run::ALL.len(), SEEDS.len());
        match train_all() {
            Ok(t) => {
                eprintln!("training finished in {:.0}s", start.elapsed().as_secs_f64());
                let checks: [(usize, fn(&Trained) -> Outcome); 5] =
                    [(4, criterion_4), (5, criterion_5), (6, criterion_6), (7, criterion_7), (9, criterion_9)];
                for (n, f) in checks {
                    if wanted(n) {
                        report(n, f(&t));
                    }
                }
            }
            Err(e) => {
                for n in [4, 5, 6, 7, 9].into_iter().filter(|n| wanted(*n)) {
                    report(n, Outcome::new(false, format!("training failed: {e}")));
                }
            }
        }
    }
    if wanted(8) {
        report(8, criterion_8());
    }
    let failed: Vec<usize> = outcomes.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
