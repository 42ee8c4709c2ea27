use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{prepare, Prepared};
use super::train::{batch_loss, batch_loss_value, mean_total};
use crate::error::Result;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nn::gradcheck::{finite_difference_check, grad_check, GradCheckReport, DEFAULT_DELTA};
use crate::nn::{numel, Padding, Tape, Var};
use crate::geometry::{MapElement, Pose2, SemanticClass, Vec2, VectorScene};
use crate::synth::{
    derive_kinematics, AgentClass, AgentHistory, Episode, EpisodeMeta, Layout, Maneuver, DT, FUTURE_LEN,
    HISTORY_LEN,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub delta: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            delta: DEFAULT_DELTA,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSuite {
    pub tolerance: f64,
    pub checks: Vec<NamedCheck>,
}

impl GradCheckSuite {
    /// `check/tensor` names whose error reaches the tolerance.
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .flat_map(|c| {
                c.report
                    .failures(self.tolerance)
                    .into_iter()
                    .map(move |t| format!("{}/{}", c.name, t))
            })
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&GradCheckReport> {
        self.checks.iter().find(|c| c.name == name).map(|c| &c.report)
    }
}

pub type PrimitiveOp = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Every tape primitive with the shapes it is checked at.
pub fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, PrimitiveOp)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("tanh", vec![vec![2, 5]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", vec![vec![2, 5]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("exp", vec![vec![2, 5]], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("softplus", vec![vec![2, 5]], Box::new(|t, v| Ok(t.softplus(v[0])))),
        ("sum_all", vec![vec![3, 2]], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        ("linear", vec![vec![4, 3], vec![3, 5], vec![5]], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("linear_batched", vec![vec![2, 4, 3], vec![3, 5]], Box::new(|t, v| t.linear(v[0], v[1], None))),
        ("matmul", vec![vec![4, 3], vec![3, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|t, v| t.bmm(v[0], v[1], false))),
        ("bmm_trans_b", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|t, v| t.bmm(v[0], v[1], true))),
        (
            "head_linear",
            vec![vec![3, 4], vec![2, 4, 5], vec![2, 5]],
            Box::new(|t, v| t.head_linear(v[0], v[1], Some(v[2]), false)),
        ),
        (
            "head_linear_per_head_input",
            vec![vec![3, 2, 4], vec![2, 4, 5]],
            Box::new(|t, v| t.head_linear(v[0], v[1], None, false)),
        ),
        (
            "head_linear_trans_w",
            vec![vec![3, 2, 5], vec![2, 4, 5]],
            Box::new(|t, v| t.head_linear(v[0], v[1], None, true)),
        ),
        (
            "conv2d_same_stride2",
            vec![vec![2, 5, 6, 3], vec![3, 3, 3, 4], vec![4]],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same)),
        ),
        (
            "conv2d_valid",
            vec![vec![1, 6, 5, 2], vec![3, 3, 2, 3]],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, Padding::Valid)),
        ),
        (
            "lstm_step",
            vec![vec![3, 8], vec![3, 2]],
            Box::new(|t, v| {
                let (h, c) = t.lstm_step(v[0], Some(v[1]))?;
                t.concat(&[h, c])
            }),
        ),
        (
            "lstm_step_zero_state",
            vec![vec![3, 8]],
            Box::new(|t, v| {
                let (h, c) = t.lstm_step(v[0], None)?;
                t.concat(&[h, c])
            }),
        ),
        ("softmax", vec![vec![3, 6]], Box::new(|t, v| t.softmax(v[0]))),
        ("concat", vec![vec![2, 3], vec![2, 4]], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        (
            "scatter_rows",
            vec![vec![4, 3]],
            Box::new(|t, v| t.scatter_rows(v[0], vec![Some(5), None, Some(0), Some(2)], vec![2, 3, 3])),
        ),
        ("select_rows", vec![vec![4, 3]], Box::new(|t, v| t.select_rows(v[0], vec![3, 0, 3, 1]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], vec![3, 4]))),
        (
            "trajectory_head",
            vec![vec![2, 15]],
            Box::new(|t, v| t.trajectory_head(v[0], 3, 2.0)),
        ),
    ]
}

/// Checks one op on seeded random inputs.
pub fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    seed: u64,
    delta: f64,
) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes.iter().map(|s| random_input(&mut rng, s)).collect();
    Ok(NamedCheck {
        name: format!("primitive/{name}"),
        report: grad_check(op, &inputs, delta)?,
    })
}

/// A single slow target with no neighbors at the rear end of a drivable
/// strip, so predicted means that drift backward leave the road and the
/// off-road term contributes gradient.
pub fn toy_episode() -> Result<Episode> {
    let rect = |x0: f64, x1: f64, y0: f64, y1: f64| {
        vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)]
    };
    let scene = VectorScene {
        elements: vec![
            MapElement::polygon(SemanticClass::Drivable, rect(-10.0, 3.0, 1.0, 42.0)),
            MapElement::polygon(SemanticClass::Sidewalk, rect(3.0, 6.0, -12.0, 42.0)),
            MapElement::polygon(SemanticClass::Crosswalk, rect(-10.0, 3.0, 20.0, 23.0)),
            MapElement::polyline(
                SemanticClass::LaneDivider,
                vec![Vec2::new(-3.5, -12.0), Vec2::new(-3.5, 42.0)],
                Some(0.0),
            ),
        ],
    };
    let path = |y: f64| Vec2::new(0.05 * y * y.abs(), y);
    let past: Vec<Vec2> = (0..HISTORY_LEN).map(|i| path((i as f64 - (HISTORY_LEN - 1) as f64) * 0.25)).collect();
    let times = (0..HISTORY_LEN).map(|i| (i as f64 - (HISTORY_LEN - 1) as f64) * DT).collect();
    Ok(Episode {
        scene,
        target_pose: Pose2::new(0.0, 0.0, 0.0),
        target_history: AgentHistory {
            agent_id: 0,
            agent_class: AgentClass::Vehicle,
            times,
            states: derive_kinematics(&past, DT)?,
        },
        neighbor_histories: Vec::new(),
        ground_truth_future: (1..=FUTURE_LEN).map(|k| path(0.25 * k as f64)).collect(),
        meta: EpisodeMeta {
            layout: Layout::Straight,
            maneuver: Maneuver::Straight,
            yields: false,
            seed: 0,
        },
    })
}

/// Finite differences of the batch-mean total loss over every parameter.
pub fn end_to_end(cfg: &GradCheckConfig) -> Result<NamedCheck> {
    let data = prepare(vec![toy_episode()?], &cfg.model)?;
    let items: Vec<&Prepared> = data.iter().collect();
    let mut params = cfg.model.init_params::<f64>(cfg.seed)?;
    batch_loss(&cfg.model, &cfg.loss, &mut params, &items)?;
    let report = finite_difference_check(&params, cfg.delta, |p| {
        Ok(mean_total(&batch_loss_value(&cfg.model, &cfg.loss, p, &items)?))
    })?;
    Ok(NamedCheck {
        name: "end_to_end".into(),
        report,
    })
}

/// Every primitive, then the full model and loss.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckSuite> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    let mut checks = Vec::new();
    for (i, (name, shapes, op)) in primitives().into_iter().enumerate() {
        checks.push(check_op(name, &shapes, op, cfg.seed.wrapping_add(i as u64), cfg.delta)?);
    }
    checks.push(end_to_end(cfg)?);
    Ok(GradCheckSuite {
        tolerance: cfg.tolerance,
        checks,
    })
}

/// An op whose backward pass is deliberately wrong (it reports `2x²` as the
/// derivative of `x³`), used to confirm failures are caught and named.
pub fn corrupted_cube_check(seed: u64, delta: f64) -> Result<NamedCheck> {
    let mut c = check_op(
        "corrupted_cube",
        &[vec![6]],
        |t, v| {
            let x = v[0];
            let value: Vec<f64> = t.value(x).iter().map(|a| a * a * a).collect();
            let shape = t.shape(x).to_vec();
            t.custom(&[x], shape, value, |ins, _, g| {
                vec![ins[0].iter().zip(g).map(|(a, gi)| 2.0 * a * a * gi).collect()]
            })
        },
        seed,
        delta,
    )?;
    c.name = "fixture/corrupted_cube".into();
    Ok(c)
}
