//! Synthetic multimodal driving episodes and the JSONL episode format.
//!
//! Scenes are built in a canonical frame where the target approaches from the
//! south heading north in the right-hand lane (`x = +3`). Intersection arms are
//! indexed counter-clockwise `S = 0, E = 1, N = 2, W = 3`; a vehicle entering
//! from arm `a` exits at `a + 1` (right), `a + 2` (straight) or `a + 3` (left).
//! Every episode is finally moved by a random rigid transform so the models
//! only ever see the layout through target-frame quantities.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};
use std::path::Path as FsPath;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    heading_of, normalize_angle, to_target_frame, InteractionSpace, MapElement, Pose2,
    SemanticClass, Vec2, VectorScene,
};

/// Sampling period in seconds (2 Hz).
pub const DT: f64 = 0.5;
/// History samples including the current one (2 s).
pub const HISTORY_LEN: usize = 5;
/// Future samples (6 s).
pub const FUTURE_LEN: usize = 12;

pub const DATASET_FORMAT: &str = "mhajam-episodes";
pub const DATASET_VERSION: u32 = 1;

const ROAD_HALF_WIDTH: f64 = 6.0;
const LANE_OFFSET: f64 = 3.0;
const PLAZA_HALF: f64 = 12.0;
const SIDEWALK_WIDTH: f64 = 3.0;
const ARM_LENGTH: f64 = 200.0;
const CURVE_RADIUS: f64 = 40.0;
const MAX_YIELD_DECEL: f64 = 6.0;
const QUEUE_GAP: f64 = 7.0;
const SPAWN_RADIUS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub yaw_rate: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, a: f64, yaw_rate: f64) -> Self {
        Self { x, y, v, a, yaw_rate }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.v, self.a, self.yaw_rate]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub agent_id: u32,
    pub agent_class: AgentClass,
    /// Seconds relative to the prediction time; the last entry is `0`.
    pub times: Vec<f64>,
    pub states: Vec<AgentState>,
}

impl AgentHistory {
    pub fn current(&self) -> &AgentState {
        self.states.last().expect("history is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    TIntersection,
    FourWay,
    Curve,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::Straight,
        Layout::TIntersection,
        Layout::FourWay,
        Layout::Curve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Straight => "straight",
            Layout::TIntersection => "t_intersection",
            Layout::FourWay => "four_way",
            Layout::Curve => "curve",
        }
    }

    pub fn parse(s: &str) -> Option<Layout> {
        Layout::ALL.into_iter().find(|l| l.name() == s)
    }

    /// Target maneuvers available in this layout, in the order used by
    /// [`ScenarioSpec::branch_probabilities`].
    pub fn exits(self) -> &'static [Maneuver] {
        match self {
            Layout::Straight | Layout::Curve => &[Maneuver::Straight],
            Layout::TIntersection => &[Maneuver::Right, Maneuver::Left],
            Layout::FourWay => &[Maneuver::Right, Maneuver::Straight, Maneuver::Left],
        }
    }

    fn arms(self) -> &'static [usize] {
        match self {
            Layout::Straight | Layout::Curve => &[0, 2],
            Layout::TIntersection => &[0, 1, 3],
            Layout::FourWay => &[0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Right,
    Straight,
    Left,
}

impl Maneuver {
    fn exit_arm(self, entry: usize) -> usize {
        match self {
            Maneuver::Right => (entry + 1) % 4,
            Maneuver::Straight => (entry + 2) % 4,
            Maneuver::Left => (entry + 3) % 4,
        }
    }
}

fn default_space() -> InteractionSpace {
    InteractionSpace::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub layout: Layout,
    /// Inclusive range of neighbor vehicles spawned before filtering.
    pub n_vehicles: (usize, usize),
    pub n_pedestrians: (usize, usize),
    /// Vehicle speed range in m/s.
    pub speed: (f64, f64),
    /// One weight per entry of [`Layout::exits`].
    pub branch_probabilities: Vec<f64>,
    /// Amplitude in meters of the bounded uniform lateral offset per agent;
    /// per-sample jitter is a quarter of it.
    #[serde(default)]
    pub noise: f64,
    /// Probability that a yield cue (stopped lead vehicle or crossing
    /// pedestrian) is placed in front of the target.
    #[serde(default)]
    pub yield_probability: f64,
    #[serde(default = "default_space")]
    pub space: InteractionSpace,
}

impl ScenarioSpec {
    pub fn for_layout(layout: Layout) -> Self {
        let n = layout.exits().len();
        Self {
            layout,
            n_vehicles: (0, 4),
            n_pedestrians: (0, 3),
            speed: (6.0, 10.0),
            branch_probabilities: vec![1.0 / n as f64; n],
            noise: 0.1,
            yield_probability: 0.15,
            space: InteractionSpace::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.n_vehicles.0 > self.n_vehicles.1 {
            return Err(Error::config("n_vehicles", "min exceeds max"));
        }
        if self.n_pedestrians.0 > self.n_pedestrians.1 {
            return Err(Error::config("n_pedestrians", "min exceeds max"));
        }
        let (lo, hi) = self.speed;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::config("speed", "need 0 < min <= max"));
        }
        let exits = self.layout.exits().len();
        if self.branch_probabilities.len() != exits {
            return Err(Error::config(
                "branch_probabilities",
                format!(
                    "layout {} has {exits} exits, got {} probabilities",
                    self.layout.name(),
                    self.branch_probabilities.len()
                ),
            ));
        }
        if self
            .branch_probabilities
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(Error::config("branch_probabilities", "must be nonnegative"));
        }
        let sum: f64 = self.branch_probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "branch_probabilities",
                format!("must sum to 1, got {sum}"),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be a nonnegative amplitude"));
        }
        if !(0.0..=1.0).contains(&self.yield_probability) {
            return Err(Error::config("yield_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub layout: Layout,
    pub maneuver: Maneuver,
    pub yields: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Map in the global frame.
    pub scene: VectorScene,
    pub target_pose: Pose2,
    /// Target-frame history of the target (ends at the origin).
    pub target_history: AgentHistory,
    pub neighbor_histories: Vec<AgentHistory>,
    /// Target-frame future positions at `DT, 2·DT, ...`.
    pub ground_truth_future: Vec<Vec2>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn validate(&self, space: &InteractionSpace) -> Result<()> {
        if self.ground_truth_future.is_empty() {
            return Err(Error::config("ground_truth_future", "empty"));
        }
        if self.target_history.states.is_empty() {
            return Err(Error::config("target_history", "empty"));
        }
        for (i, n) in self.neighbor_histories.iter().enumerate() {
            if n.states.is_empty() {
                return Err(Error::config(format!("neighbor_histories[{i}]"), "empty"));
            }
            if !space.contains(n.current().position()) {
                return Err(Error::config(
                    format!("neighbor_histories[{i}]"),
                    "current position outside the interaction space",
                ));
            }
        }
        Ok(())
    }
}

/// Per-sample kinematics from positions spaced `dt` apart.
///
/// Velocity is the central difference of position (second-order one-sided at
/// the ends); `v` is its norm, `a` the same difference of `v`, and `yaw_rate`
/// the difference of the unwrapped heading of travel.
pub fn derive_kinematics(positions: &[Vec2], dt: f64) -> Result<Vec<AgentState>> {
    let n = positions.len();
    if n < 3 {
        return Err(Error::TooFewPositions(n));
    }
    let vel_x = difference(&positions.iter().map(|p| p.x).collect::<Vec<_>>(), dt);
    let vel_y = difference(&positions.iter().map(|p| p.y).collect::<Vec<_>>(), dt);
    let speed: Vec<f64> = vel_x
        .iter()
        .zip(&vel_y)
        .map(|(x, y)| (x * x + y * y).sqrt())
        .collect();
    let accel = difference(&speed, dt);

    // Headings are taken from the chords between consecutive samples, which
    // sit at half steps; differencing neighboring chords gives the rate at
    // the shared sample (central) and the end rates reuse the nearest pair
    // (one-sided). Zero-length chords inherit the previous heading.
    let mut chords = Vec::with_capacity(n - 1);
    let mut prev: Option<f64> = None;
    for w in positions.windows(2) {
        let d = w[1].sub(w[0]);
        let h = if d.norm() > 1e-12 {
            let raw = heading_of(d);
            match prev {
                Some(p) => p + normalize_angle(raw - p),
                None => raw,
            }
        } else {
            prev.unwrap_or(0.0)
        };
        chords.push(h);
        prev = Some(h);
    }
    // leading standstill takes the first defined heading
    if let Some(first) = positions
        .windows(2)
        .position(|w| w[1].sub(w[0]).norm() > 1e-12)
    {
        for i in 0..first {
            chords[i] = chords[first];
        }
    }
    let mut yaw_rate = vec![0.0; n];
    for i in 1..n - 1 {
        yaw_rate[i] = (chords[i] - chords[i - 1]) / dt;
    }
    yaw_rate[0] = yaw_rate[1];
    yaw_rate[n - 1] = yaw_rate[n - 2];

    Ok((0..n)
        .map(|i| AgentState::new(positions[i].x, positions[i].y, speed[i], accel[i], yaw_rate[i]))
        .collect())
}

fn difference(v: &[f64], dt: f64) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dt);
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (2.0 * dt);
    }
    out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dt);
    out
}

/// Drops neighbors whose current position lies outside `space`.
pub fn filter_to_interaction_space(mut episode: Episode, space: &InteractionSpace) -> Episode {
    episode
        .neighbor_histories
        .retain(|h| space.contains(h.current().position()));
    episode
}

/// Arc-length parametrized polyline.
#[derive(Debug, Clone)]
struct Track {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Track {
    fn new(pts: Vec<Vec2>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let i = self.cum.partition_point(|&c| c <= s);
        i.clamp(1, self.pts.len() - 1) - 1
    }

    /// Position and unit tangent at arc length `s`; linear extrapolation past
    /// either end.
    fn at(&self, s: f64) -> (Vec2, Vec2) {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let dir = b.sub(a).scale(1.0 / len);
        (a.add(dir.scale(s - self.cum[i])), dir)
    }

    /// Arc length of the vertex closest to `p`.
    fn project(&self, p: Vec2) -> f64 {
        let mut best = (f64::MAX, 0.0);
        for (q, s) in self.pts.iter().zip(&self.cum) {
            let d = q.dist(p);
            if d < best.0 {
                best = (d, *s);
            }
        }
        best.1
    }
}

fn right_of(dir: Vec2) -> Vec2 {
    Vec2::new(dir.y, -dir.x)
}

fn rotate_quarter(p: Vec2, k: usize) -> Vec2 {
    let mut p = p;
    for _ in 0..k % 4 {
        p = Vec2::new(-p.y, p.x);
    }
    p
}

/// Points on a circle from angle `a0` to `a1` (standard math angles), about
/// one per degree, both ends included.
fn arc(center: Vec2, radius: f64, a0: f64, a1: f64) -> Vec<Vec2> {
    let n = ((a1 - a0).abs().to_degrees().ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            center.add(Vec2::new(a.cos(), a.sin()).scale(radius))
        })
        .collect()
}

fn push_unique(out: &mut Vec<Vec2>, pts: impl IntoIterator<Item = Vec2>) {
    for p in pts {
        if out.last().is_none_or(|l| l.dist(p) > 1e-9) {
            out.push(p);
        }
    }
}

/// Offsets a smooth polyline sideways (positive = right of travel).
fn offset_polyline(line: &[Vec2], offset: f64) -> Vec<Vec2> {
    let n = line.len();
    (0..n)
        .map(|i| {
            let a = line[i.saturating_sub(1)];
            let b = line[(i + 1).min(n - 1)];
            let d = b.sub(a);
            let dir = d.scale(1.0 / d.norm());
            line[i].add(right_of(dir).scale(offset))
        })
        .collect()
}

fn strip(line: &[Vec2], o1: f64, o2: f64) -> Vec<Vec2> {
    let mut ring = offset_polyline(line, o1);
    let mut other = offset_polyline(line, o2);
    other.reverse();
    ring.extend(other);
    ring
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Vec2> {
    vec![
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x1, y1),
        Vec2::new(x0, y1),
    ]
}

/// Canonical-frame road network of one layout.
struct World {
    layout: Layout,
    scene: VectorScene,
    /// Arc length along the target's approach lane where the conflict zone
    /// (plaza, curve or mid-block crossing) begins.
    entry_s: f64,
    /// Crosswalk span along the target's approach, as canonical `y` values.
    crosswalk_y: (f64, f64),
}

impl World {
    fn build(layout: Layout) -> Self {
        let mut elements = Vec::new();
        let cw = (-PLAZA_HALF - 4.0, -PLAZA_HALF - 1.0);
        match layout {
            Layout::Curve => {
                let center = curve_centerline();
                elements.push(MapElement::polygon(
                    SemanticClass::Drivable,
                    strip(&center, -ROAD_HALF_WIDTH, ROAD_HALF_WIDTH),
                ));
                for (o1, o2) in [
                    (ROAD_HALF_WIDTH, ROAD_HALF_WIDTH + SIDEWALK_WIDTH),
                    (-ROAD_HALF_WIDTH - SIDEWALK_WIDTH, -ROAD_HALF_WIDTH),
                ] {
                    elements.push(MapElement::polygon(
                        SemanticClass::Sidewalk,
                        strip(&center, o1, o2),
                    ));
                }
                elements.push(MapElement::polyline(
                    SemanticClass::LaneDivider,
                    center,
                    None,
                ));
                elements.push(MapElement::polygon(
                    SemanticClass::Crosswalk,
                    rect(-ROAD_HALF_WIDTH, -4.0, ROAD_HALF_WIDTH, -1.0),
                ));
                Self {
                    layout,
                    scene: VectorScene { elements },
                    entry_s: ARM_LENGTH,
                    crosswalk_y: (-4.0, -1.0),
                }
            }
            Layout::Straight => {
                let w = ROAD_HALF_WIDTH;
                elements.push(MapElement::polygon(
                    SemanticClass::Drivable,
                    rect(-w, -ARM_LENGTH, w, ARM_LENGTH),
                ));
                for x0 in [w, -w - SIDEWALK_WIDTH] {
                    elements.push(MapElement::polygon(
                        SemanticClass::Sidewalk,
                        rect(x0, -ARM_LENGTH, x0 + SIDEWALK_WIDTH, ARM_LENGTH),
                    ));
                }
                elements.push(MapElement::polygon(
                    SemanticClass::Crosswalk,
                    rect(-w, cw.0, w, cw.1),
                ));
                for (y0, y1) in [(-ARM_LENGTH, cw.0), (cw.1, ARM_LENGTH)] {
                    elements.push(MapElement::polyline(
                        SemanticClass::LaneDivider,
                        vec![Vec2::new(0.0, y0), Vec2::new(0.0, y1)],
                        Some(0.0),
                    ));
                }
                Self {
                    layout,
                    scene: VectorScene { elements },
                    entry_s: ARM_LENGTH - PLAZA_HALF,
                    crosswalk_y: cw,
                }
            }
            Layout::TIntersection | Layout::FourWay => {
                let w = ROAD_HALF_WIDTH;
                elements.push(MapElement::polygon(
                    SemanticClass::Drivable,
                    rect(-PLAZA_HALF, -PLAZA_HALF, PLAZA_HALF, PLAZA_HALF),
                ));
                for &arm in layout.arms() {
                    let rot = |ring: Vec<Vec2>| -> Vec<Vec2> {
                        ring.into_iter().map(|p| rotate_quarter(p, arm)).collect()
                    };
                    elements.push(MapElement::polygon(
                        SemanticClass::Drivable,
                        rot(rect(-w, -ARM_LENGTH, w, -PLAZA_HALF)),
                    ));
                    for x0 in [w, -w - SIDEWALK_WIDTH] {
                        elements.push(MapElement::polygon(
                            SemanticClass::Sidewalk,
                            rot(rect(x0, -ARM_LENGTH, x0 + SIDEWALK_WIDTH, -PLAZA_HALF)),
                        ));
                    }
                    elements.push(MapElement::polygon(
                        SemanticClass::Crosswalk,
                        rot(rect(-w, cw.0, w, cw.1)),
                    ));
                    let dir = normalize_angle(arm as f64 * -FRAC_PI_2);
                    elements.push(MapElement::polyline(
                        SemanticClass::LaneDivider,
                        rot(vec![Vec2::new(0.0, -ARM_LENGTH), Vec2::new(0.0, cw.0)]),
                        Some(dir),
                    ));
                }
                Self {
                    layout,
                    scene: VectorScene { elements },
                    entry_s: ARM_LENGTH - PLAZA_HALF,
                    crosswalk_y: cw,
                }
            }
        }
    }

    /// Lane a vehicle follows when entering from `arm` and leaving with
    /// `maneuver`.
    fn lane(&self, arm: usize, maneuver: Maneuver) -> Track {
        if self.layout == Layout::Curve {
            let center = curve_centerline();
            let pts = if arm == 0 {
                offset_polyline(&center, LANE_OFFSET)
            } else {
                let mut rev = center;
                rev.reverse();
                offset_polyline(&rev, LANE_OFFSET)
            };
            return Track::new(pts);
        }
        let x = LANE_OFFSET;
        let h = PLAZA_HALF;
        let mut pts = vec![Vec2::new(x, -ARM_LENGTH), Vec2::new(x, -h)];
        match maneuver {
            Maneuver::Straight => push_unique(&mut pts, [Vec2::new(x, ARM_LENGTH)]),
            Maneuver::Right => {
                let r = h - x;
                push_unique(&mut pts, arc(Vec2::new(h, -h), r, PI, FRAC_PI_2));
                push_unique(&mut pts, [Vec2::new(ARM_LENGTH, -x)]);
            }
            Maneuver::Left => {
                let r = h + x;
                push_unique(&mut pts, arc(Vec2::new(-h, -h), r, 0.0, FRAC_PI_2));
                push_unique(&mut pts, [Vec2::new(-ARM_LENGTH, x)]);
            }
        }
        Track::new(pts.into_iter().map(|p| rotate_quarter(p, arm)).collect())
    }

    fn maneuvers_from(&self, arm: usize) -> Vec<Maneuver> {
        let arms = self.layout.arms();
        [Maneuver::Right, Maneuver::Straight, Maneuver::Left]
            .into_iter()
            .filter(|m| arms.contains(&m.exit_arm(arm)))
            .collect()
    }

    /// Pedestrian walkways: sidewalk centerlines in both directions and the
    /// crosswalks of every arm (`true` marks the target's own crosswalk).
    fn walkways(&self) -> Vec<(Track, bool)> {
        let side = ROAD_HALF_WIDTH + SIDEWALK_WIDTH / 2.0;
        let mut out = Vec::new();
        if self.layout == Layout::Curve {
            let center = curve_centerline();
            for o in [side, -side] {
                let line = offset_polyline(&center, o);
                let mut rev = line.clone();
                rev.reverse();
                out.push((Track::new(line), false));
                out.push((Track::new(rev), false));
            }
            let y = (self.crosswalk_y.0 + self.crosswalk_y.1) / 2.0;
            out.push((
                Track::new(vec![Vec2::new(-side, y), Vec2::new(side, y)]),
                true,
            ));
            out.push((
                Track::new(vec![Vec2::new(side, y), Vec2::new(-side, y)]),
                true,
            ));
            return out;
        }
        let y_end = if self.layout == Layout::Straight {
            ARM_LENGTH
        } else {
            -PLAZA_HALF
        };
        let arms: &[usize] = if self.layout == Layout::Straight {
            &[0]
        } else {
            self.layout.arms()
        };
        let y = (self.crosswalk_y.0 + self.crosswalk_y.1) / 2.0;
        for &arm in arms {
            let rot = |v: Vec<Vec2>| -> Track {
                Track::new(v.into_iter().map(|p| rotate_quarter(p, arm)).collect())
            };
            for x in [side, -side] {
                out.push((rot(vec![Vec2::new(x, -ARM_LENGTH), Vec2::new(x, y_end)]), false));
                out.push((rot(vec![Vec2::new(x, y_end), Vec2::new(x, -ARM_LENGTH)]), false));
            }
            let own = arm == 0;
            out.push((rot(vec![Vec2::new(-side, y), Vec2::new(side, y)]), own));
            out.push((rot(vec![Vec2::new(side, y), Vec2::new(-side, y)]), own));
        }
        out
    }
}

fn curve_centerline() -> Vec<Vec2> {
    let mut pts = vec![Vec2::new(0.0, -ARM_LENGTH), Vec2::new(0.0, 0.0)];
    push_unique(
        &mut pts,
        arc(Vec2::new(CURVE_RADIUS, 0.0), CURVE_RADIUS, PI, FRAC_PI_2),
    );
    push_unique(&mut pts, [Vec2::new(CURVE_RADIUS + ARM_LENGTH, CURVE_RADIUS)]);
    pts
}

/// Longitudinal motion along a track.
#[derive(Debug, Clone, Copy)]
enum Motion {
    Cruise { s0: f64, v: f64 },
    /// Constant speed before `t = 0`, constant deceleration to a stop after.
    Brake { s0: f64, v: f64, decel: f64 },
    Parked { s0: f64 },
}

impl Motion {
    fn s(&self, t: f64) -> f64 {
        match *self {
            Motion::Cruise { s0, v } => s0 + v * t,
            Motion::Brake { s0, v, decel } => {
                if t <= 0.0 {
                    s0 + v * t
                } else {
                    let tt = t.min(v / decel);
                    s0 + v * tt - 0.5 * decel * tt * tt
                }
            }
            Motion::Parked { s0 } => s0,
        }
    }
}

struct Agent {
    class: AgentClass,
    track: Track,
    motion: Motion,
    lateral: f64,
}

impl Agent {
    fn canonical_positions(&self, times: &[f64], jitter: &[Vec2]) -> Vec<Vec2> {
        times
            .iter()
            .zip(jitter)
            .map(|(&t, j)| {
                let (p, dir) = self.track.at(self.motion.s(t));
                p.add(right_of(dir).scale(self.lateral)).add(*j)
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_jitter(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<Vec2> {
    (0..n)
        .map(|_| Vec2::new(uniform(rng, -amp, amp), uniform(rng, -amp, amp)))
        .collect()
}

fn history_times() -> Vec<f64> {
    (0..HISTORY_LEN)
        .map(|i| -((HISTORY_LEN - 1 - i) as f64) * DT)
        .collect()
}

fn future_times() -> Vec<f64> {
    (1..=FUTURE_LEN).map(|i| i as f64 * DT).collect()
}

/// Generates one episode; deterministic in `(spec, seed)`.
pub fn generate_episode(spec: &ScenarioSpec, seed: u64) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::build(spec.layout);

    let exits = spec.layout.exits();
    let branch = WeightedIndex::new(&spec.branch_probabilities)
        .map_err(|e| Error::config("branch_probabilities", e.to_string()))?
        .sample(&mut rng);
    let maneuver = exits[branch];
    let target_track = world.lane(0, maneuver);
    let v_target = uniform(&mut rng, spec.speed.0, spec.speed.1);
    let d_entry = uniform(&mut rng, 0.0, 30.0);
    let s_target = world.entry_s - d_entry;
    let noise = spec.noise;
    let target_lateral = uniform(&mut rng, -noise, noise);

    let mut neighbors: Vec<Agent> = Vec::new();
    let mut target_motion = Motion::Cruise {
        s0: s_target,
        v: v_target,
    };
    let mut yields = false;

    let cue_roll: f64 = rng.gen();
    let cue_is_pedestrian: bool = rng.gen();
    if cue_roll < spec.yield_probability {
        // stop line two meters before the crosswalk on the target's approach
        // lanes start at canonical y = -ARM_LENGTH and run north until the
        // conflict zone, so arc length there is y + ARM_LENGTH
        let s_cross = world.crosswalk_y.0 + ARM_LENGTH;
        let (stop_s, lead) = if cue_is_pedestrian {
            (s_cross - 2.0, None)
        } else {
            let lead_s = s_cross - 2.0;
            (lead_s - QUEUE_GAP, Some(lead_s))
        };
        let dist = stop_s - s_target;
        if dist > 0.5 {
            let decel = v_target * v_target / (2.0 * dist);
            if decel <= MAX_YIELD_DECEL {
                yields = true;
                target_motion = Motion::Brake {
                    s0: s_target,
                    v: v_target,
                    decel,
                };
                match lead {
                    Some(lead_s) => neighbors.push(Agent {
                        class: AgentClass::Vehicle,
                        track: world.lane(0, maneuver),
                        motion: Motion::Parked { s0: lead_s },
                        lateral: uniform(&mut rng, -noise, noise),
                    }),
                    None => {
                        let walks = world.walkways();
                        let own: Vec<&Track> =
                            walks.iter().filter(|w| w.1).map(|w| &w.0).collect();
                        let track = own[rng.gen_range(0..own.len())].clone();
                        let v = uniform(&mut rng, 1.0, 1.6);
                        let s0 = uniform(&mut rng, 1.0, track.length() * 0.7);
                        neighbors.push(Agent {
                            class: AgentClass::Pedestrian,
                            track,
                            motion: Motion::Cruise { s0, v },
                            lateral: 0.0,
                        });
                    }
                }
            }
        }
    }

    let (p_target, _) = target_track.at(s_target);
    let near = |track: &Track, s: f64| track.at(s).0.dist(p_target) <= SPAWN_RADIUS;

    let n_veh = rng.gen_range(spec.n_vehicles.0..=spec.n_vehicles.1);
    let arms = spec.layout.arms();
    for _ in 0..n_veh {
        let arm = arms[rng.gen_range(0..arms.len())];
        let options = world.maneuvers_from(arm);
        let m = options[rng.gen_range(0..options.len())];
        let track = world.lane(arm, m);
        let v = uniform(&mut rng, spec.speed.0, spec.speed.1);
        let center = track.project(p_target);
        let (lo, hi) = if arm == 0 {
            // same approach lane: only followers, well behind the target
            (s_target - 40.0, s_target - 10.0)
        } else {
            (center - 45.0, center + 45.0)
        };
        let s0 = uniform(&mut rng, lo, hi);
        let lateral = uniform(&mut rng, -noise, noise);
        if near(&track, s0) {
            neighbors.push(Agent {
                class: AgentClass::Vehicle,
                track,
                motion: Motion::Cruise { s0, v },
                lateral,
            });
        }
    }

    let walks: Vec<Track> = world
        .walkways()
        .into_iter()
        .filter(|w| !w.1)
        .map(|w| w.0)
        .collect();
    let n_ped = rng.gen_range(spec.n_pedestrians.0..=spec.n_pedestrians.1);
    for _ in 0..n_ped {
        let track = walks[rng.gen_range(0..walks.len())].clone();
        let v = uniform(&mut rng, 1.0, 1.6);
        let center = track.project(p_target);
        let s0 = uniform(
            &mut rng,
            (center - 40.0).max(0.0),
            (center + 40.0).min(track.length()),
        );
        if near(&track, s0) {
            neighbors.push(Agent {
                class: AgentClass::Pedestrian,
                track,
                motion: Motion::Cruise { s0, v },
                lateral: 0.0,
            });
        }
    }

    // random placement of the whole scene in the world
    let theta = uniform(&mut rng, -PI, PI);
    let shift = Vec2::new(uniform(&mut rng, -500.0, 500.0), uniform(&mut rng, -500.0, 500.0));
    let (st, ct) = theta.sin_cos();
    let place = |p: Vec2| Vec2::new(ct * p.x - st * p.y + shift.x, st * p.x + ct * p.y + shift.y);

    let jitter_amp = noise / 4.0;
    let hist_t = history_times();
    let fut_t = future_times();

    let target = Agent {
        class: AgentClass::Vehicle,
        track: target_track,
        motion: target_motion,
        lateral: target_lateral,
    };
    let mut all_t = hist_t.clone();
    all_t.extend(&fut_t);
    let jitter = sample_jitter(&mut rng, all_t.len(), jitter_amp);
    let target_global: Vec<Vec2> = target
        .canonical_positions(&all_t, &jitter)
        .into_iter()
        .map(place)
        .collect();
    let (_, tangent) = target.track.at(s_target);
    let tangent_global = Vec2::new(ct * tangent.x - st * tangent.y, st * tangent.x + ct * tangent.y);
    let now = target_global[HISTORY_LEN - 1];
    let target_pose = Pose2::new(now.x, now.y, heading_of(tangent_global));

    let local = |p: Vec2| to_target_frame(p, &target_pose);
    let target_hist_local: Vec<Vec2> = target_global[..HISTORY_LEN].iter().map(|p| local(*p)).collect();
    let target_history = AgentHistory {
        agent_id: 0,
        agent_class: AgentClass::Vehicle,
        times: hist_t.clone(),
        states: derive_kinematics(&target_hist_local, DT)?,
    };
    let ground_truth_future = target_global[HISTORY_LEN..].iter().map(|p| local(*p)).collect();

    let mut neighbor_histories = Vec::with_capacity(neighbors.len());
    for (i, agent) in neighbors.iter().enumerate() {
        let jitter = sample_jitter(&mut rng, hist_t.len(), jitter_amp);
        let pts: Vec<Vec2> = agent
            .canonical_positions(&hist_t, &jitter)
            .into_iter()
            .map(|p| local(place(p)))
            .collect();
        neighbor_histories.push(AgentHistory {
            agent_id: i as u32 + 1,
            agent_class: agent.class,
            times: hist_t.clone(),
            states: derive_kinematics(&pts, DT)?,
        });
    }

    let scene = VectorScene {
        elements: world
            .scene
            .elements
            .iter()
            .map(|e| MapElement {
                class: e.class,
                points: e.points.iter().map(|p| place(*p)).collect(),
                lane_direction: e.lane_direction.map(|h| normalize_angle(h - theta)),
            })
            .collect(),
    };

    let episode = Episode {
        scene,
        target_pose,
        target_history,
        neighbor_histories,
        ground_truth_future,
        meta: EpisodeMeta {
            layout: spec.layout,
            maneuver,
            yields,
            seed,
        },
    };
    Ok(filter_to_interaction_space(episode, &spec.space))
}

/// Seed of the `index`-th episode of a dataset generated from `base_seed`.
pub fn episode_seed(base_seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps neighboring datasets' seeds apart
    let mut z = base_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n` episodes in parallel; the result order is by index.
pub fn generate_dataset(spec: &ScenarioSpec, n: usize, base_seed: u64) -> Result<Vec<Episode>> {
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_episode(spec, episode_seed(base_seed, i)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_dataset_to<W: Write>(mut w: W, episodes: &[Episode]) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &FsPath, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset_to(std::io::BufWriter::new(file), episodes)
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Vec<Episode>> {
    let mut lines = r.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            None => return Err(Error::MissingHeader),
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Dataset {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Dataset {
            line: 1,
            reason: format!("unknown format `{}`", header.format),
        });
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn read_dataset(path: &FsPath) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path)?;
    read_dataset_from(std::io::BufReader::new(file))
}
