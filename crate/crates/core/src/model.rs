//! The attention-based multimodal predictor: shared trajectory encoder, map
//! CNN, social tensor, per-mode attention heads over the joint agent-map
//! features, weight-shared LSTM decoders and the mode-probability head.
//!
//! Everything is batched over episodes. Parameter names:
//!
//! | name | shape |
//! |---|---|
//! | `enc.embed.{w,b}` | `[5, E]`, `[E]` |
//! | `enc.lstm.{w_ih,w_hh,b}` | `[E, 4C_h]`, `[C_h, 4C_h]`, `[4C_h]` |
//! | `map.conv{i}.{w,b}` | `[k, k, C_in, C_out]`, `[C_out]` |
//! | `{attn}.query.{w,b}` | `[L, C_h, d]`, `[L, d]` |
//! | `{attn}.key.w` | `[L, C, d]` |
//! | `{attn}.value.{w,b}` | `[L, C, d]`, `[L, d]` |
//! | `attn.mix.{w,b}` (JAH) | `[L·d, L·d]`, `[L·d]` |
//! | `dec.lstm.{w_ih,w_hh,b}` | `[Z, 4H_d]`, `[H_d, 4H_d]`, `[4H_d]` |
//! | `dec.out.{w,b}` | `[H_d, 5]`, `[5]` |
//! | `prob.fc1.{w,b}`, `prob.fc2.{w,b}` | `[L·Z, P]`, `[P]`, `[P, L]`, `[L]` |
//!
//! Keys carry no bias: a bias on the keys adds the same `Q·b` to every cell's
//! score, which the softmax removes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, InteractionSpace, RasterMap, Vec2};
use crate::nn::tape::Grads;
use crate::nn::{ConvGeometry, Graph, Padding, ParamStore, Real, Var};
use crate::synth::{AgentState, Episode, FUTURE_LEN};

/// Number of per-step input features of an agent state.
pub const STATE_FEATURES: usize = 5;
const FEATURE_SCALE: [f64; STATE_FEATURES] = [0.1, 0.1, 0.1, 0.25, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Joint agent-map attention.
    Jam,
    /// Separate attention over agents and over the map.
    Sam,
    AgentsOnly,
    MapOnly,
    /// Joint attention with a learned mix of all heads per decoder.
    Jah,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Jam,
        Variant::Sam,
        Variant::AgentsOnly,
        Variant::MapOnly,
        Variant::Jah,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Jam => "jam",
            Variant::Sam => "sam",
            Variant::AgentsOnly => "agents_only",
            Variant::MapOnly => "map_only",
            Variant::Jah => "jah",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_map(self) -> bool {
        self != Variant::AgentsOnly
    }

    pub fn uses_agents(self) -> bool {
        self != Variant::MapOnly
    }

    /// Attention blocks as `(parameter prefix, feature source)`.
    fn blocks(self) -> &'static [(&'static str, Features)] {
        match self {
            Variant::Jam | Variant::Jah => &[("attn", Features::Joint)],
            Variant::Sam => &[("attn_agents", Features::Social), ("attn_map", Features::Map)],
            Variant::AgentsOnly => &[("attn", Features::Social)],
            Variant::MapOnly => &[("attn", Features::Map)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Features {
    Social,
    Map,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub space: InteractionSpace,
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of modes and attention heads `L`.
    pub modes: usize,
    /// Query/key/value width `d`.
    pub attn_dim: usize,
    pub embed_dim: usize,
    /// Trajectory-encoder hidden size `C_h`.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prob_hidden: usize,
    /// Spatial grid `(M, N)`; must equal the CNN output size.
    pub grid: (usize, usize),
    /// Map feature channels `C_m`; must equal the last conv's outputs.
    pub map_channels: usize,
    pub cnn: Vec<ConvSpec>,
    pub raster: RasterConfig,
    pub variant: Variant,
    /// Predicted steps `t_f`.
    pub horizon: usize,
    /// Meters per unit of raw decoder displacement.
    pub step_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 100×100 raster at 0.5 m/px, three stride-2 convs to a 13×13 grid.
    pub fn desk() -> Self {
        Self {
            modes: 16,
            attn_dim: 64,
            embed_dim: 32,
            enc_hidden: 64,
            dec_hidden: 128,
            prob_hidden: 64,
            grid: (13, 13),
            map_channels: 32,
            cnn: vec![
                ConvSpec::new(16, 3, 2, Padding::Same),
                ConvSpec::new(32, 3, 2, Padding::Same),
                ConvSpec::new(32, 3, 2, Padding::Same),
            ],
            raster: RasterConfig {
                space: InteractionSpace::default(),
                resolution: 0.5,
            },
            variant: Variant::Jam,
            horizon: FUTURE_LEN,
            step_scale: 4.0,
        }
    }

    /// 500×500 raster at 0.1 m/px reduced to a 28×28×512 map feature grid.
    pub fn paper_scale() -> Self {
        Self {
            grid: (28, 28),
            map_channels: 512,
            cnn: vec![
                ConvSpec::new(32, 5, 2, Padding::Valid),
                ConvSpec::new(64, 3, 2, Padding::Valid),
                ConvSpec::new(128, 3, 2, Padding::Valid),
                ConvSpec::new(256, 3, 2, Padding::Valid),
                ConvSpec::new(512, 3, 1, Padding::Valid),
            ],
            raster: RasterConfig {
                space: InteractionSpace::default(),
                resolution: 0.1,
            },
            ..Self::desk()
        }
    }

    /// Small network on a 50×50 raster at 1 m/px (13×13 grid) that trains in
    /// a few minutes on one core.
    pub fn compact() -> Self {
        Self {
            modes: 16,
            attn_dim: 16,
            embed_dim: 16,
            enc_hidden: 32,
            dec_hidden: 48,
            prob_hidden: 32,
            grid: (13, 13),
            map_channels: 16,
            cnn: vec![
                ConvSpec::new(8, 3, 2, Padding::Same),
                ConvSpec::new(16, 3, 2, Padding::Same),
            ],
            raster: RasterConfig {
                space: InteractionSpace::default(),
                resolution: 1.0,
            },
            variant: Variant::Jam,
            horizon: FUTURE_LEN,
            step_scale: 4.0,
        }
    }

    /// Two modes on a 3×3 grid, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            modes: 2,
            attn_dim: 3,
            embed_dim: 3,
            enc_hidden: 4,
            dec_hidden: 4,
            prob_hidden: 3,
            grid: (3, 3),
            map_channels: 3,
            cnn: vec![
                ConvSpec::new(2, 3, 2, Padding::Same),
                ConvSpec::new(3, 3, 2, Padding::Same),
            ],
            raster: RasterConfig {
                space: InteractionSpace::default(),
                resolution: 5.0,
            },
            variant: Variant::Jam,
            horizon: FUTURE_LEN,
            step_scale: 1.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper_scale" => Some(Self::paper_scale()),
            "compact" => Some(Self::compact()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn raster_grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.raster.space, self.raster.resolution)
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Channels of the attention key/value source for a feature kind.
    fn feature_channels(&self, f: Features) -> usize {
        match f {
            Features::Social => self.enc_hidden,
            Features::Map => self.map_channels,
            Features::Joint => self.enc_hidden + self.map_channels,
        }
    }

    /// Width of each context vector `z_l`.
    pub fn context_dim(&self) -> usize {
        self.enc_hidden + self.attn_dim * self.variant.blocks().len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("modes", self.modes),
            ("attn_dim", self.attn_dim),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("prob_hidden", self.prob_hidden),
            ("grid", self.grid.0.min(self.grid.1)),
            ("map_channels", self.map_channels),
            ("horizon", self.horizon),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::config("step_scale", "must be positive"));
        }
        let raster = self.raster_grid()?;
        if self.cnn.is_empty() {
            return Err(Error::config("cnn", "needs at least one layer"));
        }
        let (mut h, mut w) = (raster.height, raster.width);
        for (i, c) in self.cnn.iter().enumerate() {
            if c.out_channels == 0 {
                return Err(Error::config(format!("cnn[{i}].out_channels"), "must be at least 1"));
            }
            let geo = ConvGeometry::new(h, w, c.kernel, c.stride, c.padding)
                .map_err(|e| Error::config(format!("cnn[{i}]"), e.to_string()))?;
            h = geo.out_h;
            w = geo.out_w;
        }
        if (h, w) != self.grid {
            return Err(Error::config(
                "grid",
                format!("CNN produces {h}×{w} but grid is {}×{}", self.grid.0, self.grid.1),
            ));
        }
        if self.cnn.last().unwrap().out_channels != self.map_channels {
            return Err(Error::config(
                "map_channels",
                "must equal the last conv layer's out_channels",
            ));
        }
        Ok(())
    }

    /// Randomly initialized parameters (uniform `±1/√fan_in`).
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (e, ch, l, d) = (self.embed_dim, self.enc_hidden, self.modes, self.attn_dim);
        p.init_uniform(&mut rng, "enc.embed.w", vec![STATE_FEATURES, e], STATE_FEATURES)?;
        p.init_uniform(&mut rng, "enc.embed.b", vec![e], STATE_FEATURES)?;
        p.init_uniform(&mut rng, "enc.lstm.w_ih", vec![e, 4 * ch], e)?;
        p.init_uniform(&mut rng, "enc.lstm.w_hh", vec![ch, 4 * ch], ch)?;
        p.init_uniform(&mut rng, "enc.lstm.b", vec![4 * ch], ch)?;
        if self.variant.uses_map() {
            let mut cin = 4;
            for (i, c) in self.cnn.iter().enumerate() {
                let fan = c.kernel * c.kernel * cin;
                p.init_uniform(
                    &mut rng,
                    &format!("map.conv{i}.w"),
                    vec![c.kernel, c.kernel, cin, c.out_channels],
                    fan,
                )?;
                p.init_uniform(&mut rng, &format!("map.conv{i}.b"), vec![c.out_channels], fan)?;
                cin = c.out_channels;
            }
        }
        for (prefix, feat) in self.variant.blocks() {
            let c = self.feature_channels(*feat);
            p.init_uniform(&mut rng, &format!("{prefix}.query.w"), vec![l, ch, d], ch)?;
            p.init_uniform(&mut rng, &format!("{prefix}.query.b"), vec![l, d], ch)?;
            p.init_uniform(&mut rng, &format!("{prefix}.key.w"), vec![l, c, d], c)?;
            p.init_uniform(&mut rng, &format!("{prefix}.value.w"), vec![l, c, d], c)?;
            p.init_uniform(&mut rng, &format!("{prefix}.value.b"), vec![l, d], c)?;
        }
        if self.variant == Variant::Jah {
            p.init_uniform(&mut rng, "attn.mix.w", vec![l * d, l * d], l * d)?;
            p.init_uniform(&mut rng, "attn.mix.b", vec![l * d], l * d)?;
        }
        let z = self.context_dim();
        let hd = self.dec_hidden;
        p.init_uniform(&mut rng, "dec.lstm.w_ih", vec![z, 4 * hd], z)?;
        p.init_uniform(&mut rng, "dec.lstm.w_hh", vec![hd, 4 * hd], hd)?;
        p.init_uniform(&mut rng, "dec.lstm.b", vec![4 * hd], hd)?;
        p.init_uniform(&mut rng, "dec.out.w", vec![hd, 5], hd)?;
        p.init_uniform(&mut rng, "dec.out.b", vec![5], hd)?;
        p.init_uniform(&mut rng, "prob.fc1.w", vec![l * z, self.prob_hidden], l * z)?;
        p.init_uniform(&mut rng, "prob.fc1.b", vec![self.prob_hidden], l * z)?;
        p.init_uniform(&mut rng, "prob.fc2.w", vec![self.prob_hidden, l], self.prob_hidden)?;
        p.init_uniform(&mut rng, "prob.fc2.b", vec![l], self.prob_hidden)?;
        Ok(p)
    }

    /// Checks that `params` has exactly the tensors this config expects.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let expected = self.init_params::<T>(0)?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape, t.shape
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Bivariate Gaussian `(μx, μy, σx, σy, ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian5 {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl Gaussian5 {
    pub fn mean(&self) -> Vec2 {
        Vec2::new(self.mu_x, self.mu_y)
    }
}

/// `L` Gaussian sequences with mode probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub modes: Vec<Vec<Gaussian5>>,
    pub probs: Vec<f64>,
}

impl PredictionSet {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, |m| m.len())
    }

    pub fn mean_trajectory(&self, l: usize) -> Vec<Vec2> {
        self.modes[l].iter().map(|g| g.mean()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != self.probs.len() || self.modes.is_empty() {
            return Err(Error::config("probs", "need one probability per mode"));
        }
        let t = self.horizon();
        for m in &self.modes {
            if m.len() != t {
                return Err(Error::config("modes", "modes differ in length"));
            }
            for g in m {
                if !(g.sigma_x > 0.0 && g.sigma_y > 0.0 && g.rho.abs() < 1.0) {
                    return Err(Error::InvalidGaussian(format!("{g:?}")));
                }
            }
        }
        let sum: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config("probs", format!("not a distribution (sum {sum})")));
        }
        Ok(())
    }
}

/// Scaled per-step network input for one agent state.
pub fn state_features(s: &AgentState) -> [f64; STATE_FEATURES] {
    let raw = [s.x, s.y, s.v, s.a, s.yaw_rate];
    let mut out = [0.0; STATE_FEATURES];
    for i in 0..STATE_FEATURES {
        out[i] = raw[i] * FEATURE_SCALE[i];
    }
    out
}

/// Grid cell `(m, n)` of a target-frame position. Row `m = 0` is the far-ahead
/// edge and column `n = 0` the left edge; positions on the outer boundary
/// fall into the last cell.
pub fn social_cell(space: &InteractionSpace, grid: (usize, usize), p: Vec2) -> Option<(usize, usize)> {
    if !space.contains(p) {
        return None;
    }
    let cell_long = space.longitudinal_span() / grid.0 as f64;
    let cell_lat = space.lateral_span() / grid.1 as f64;
    let m = ((space.ahead_extent - p.y) / cell_long).floor() as usize;
    let n = ((p.x + space.lateral_extent) / cell_lat).floor() as usize;
    Some((m.min(grid.0 - 1), n.min(grid.1 - 1)))
}

/// Social-tensor cell of every neighbor; when several neighbors share a
/// cell only the one nearest the target keeps it (ties: lower index).
pub fn assign_cells(space: &InteractionSpace, grid: (usize, usize), positions: &[Vec2]) -> Vec<Option<usize>> {
    let cells: Vec<Option<usize>> = positions
        .iter()
        .map(|p| social_cell(space, grid, *p).map(|(m, n)| m * grid.1 + n))
        .collect();
    let mut out = cells.clone();
    for i in 0..positions.len() {
        let Some(c) = cells[i] else { continue };
        for j in 0..positions.len() {
            if j == i || cells[j] != Some(c) {
                continue;
            }
            let (di, dj) = (positions[i].norm(), positions[j].norm());
            if dj < di || (dj == di && j < i) {
                out[i] = None;
                break;
            }
        }
    }
    out
}

/// Network inputs for a batch of episodes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub history_len: usize,
    /// Per time step, `[agents, 5]` features; agents of all episodes are
    /// stacked.
    pub features: Vec<Vec<f64>>,
    pub agents: usize,
    /// Row of each episode's target among the stacked agents.
    pub target_rows: Vec<usize>,
    /// Destination row in the `[B·M·N]` social grid for each agent.
    pub social_targets: Vec<Option<usize>>,
    /// `[B, H, W, 4]` map planes (empty when the variant ignores the map).
    pub raster: Vec<f64>,
    pub raster_hw: (usize, usize),
}

impl Batch {
    pub fn new(config: &ModelConfig, episodes: &[&Episode], rasters: &[&RasterMap]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::config("batch", "no episodes"));
        }
        if rasters.len() != episodes.len() {
            return Err(Error::config("batch", "one raster per episode required"));
        }
        let history_len = episodes[0].target_history.states.len();
        let cells = config.cells();
        let mut per_agent: Vec<&[AgentState]> = Vec::new();
        let mut target_rows = Vec::new();
        let mut social_targets = Vec::new();
        for (b, ep) in episodes.iter().enumerate() {
            target_rows.push(per_agent.len());
            per_agent.push(&ep.target_history.states);
            social_targets.push(None);
            if !config.variant.uses_agents() {
                continue;
            }
            let positions: Vec<Vec2> = ep
                .neighbor_histories
                .iter()
                .map(|h| h.current().position())
                .collect();
            let assigned = assign_cells(&config.raster.space, config.grid, &positions);
            for (h, cell) in ep.neighbor_histories.iter().zip(assigned) {
                per_agent.push(&h.states);
                social_targets.push(cell.map(|c| b * cells + c));
            }
        }
        if per_agent.iter().any(|s| s.len() != history_len || s.is_empty()) {
            return Err(Error::config(
                "history",
                "all histories in a batch need the same nonzero length",
            ));
        }
        let agents = per_agent.len();
        let features = (0..history_len)
            .map(|t| {
                per_agent
                    .iter()
                    .flat_map(|s| state_features(&s[t]))
                    .collect()
            })
            .collect();

        let grid = config.raster_grid()?;
        let mut raster = Vec::new();
        if config.variant.uses_map() {
            raster.reserve(episodes.len() * grid.len() * 4);
            for r in rasters {
                if r.grid.width != grid.width || r.grid.height != grid.height {
                    return Err(Error::shape(
                        "raster",
                        &[r.grid.height, r.grid.width],
                        &[grid.height, grid.width],
                    ));
                }
                for i in 0..grid.len() {
                    for plane in &r.planes {
                        raster.push(plane[i] as f64);
                    }
                }
            }
        }
        Ok(Self {
            size: episodes.len(),
            history_len,
            features,
            agents,
            target_rows,
            social_targets,
            raster,
            raster_hw: (grid.height, grid.width),
        })
    }
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::of(*x)).collect()
}

/// Shared-weight LSTM encoder over stacked agents; returns `[agents, C_h]`.
pub fn encode_history<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    features: &[Vec<f64>],
    agents: usize,
) -> Result<Var> {
    let w_e = g.param(params, "enc.embed.w")?;
    let b_e = g.param(params, "enc.embed.b")?;
    let w_ih = g.param(params, "enc.lstm.w_ih")?;
    let w_hh = g.param(params, "enc.lstm.w_hh")?;
    let b = g.param(params, "enc.lstm.b")?;
    let mut state: Option<(Var, Var)> = None;
    for step in features {
        let x = g.tape.leaf(vec![agents, STATE_FEATURES], cast(step))?;
        let e = g.tape.linear(x, w_e, Some(b_e))?;
        let mut gates = g.tape.linear(e, w_ih, Some(b))?;
        if let Some((h, _)) = state {
            let rec = g.tape.matmul(h, w_hh)?;
            gates = g.tape.add(gates, rec)?;
        }
        state = Some(g.tape.lstm_step(gates, state.map(|s| s.1))?);
    }
    state
        .map(|s| s.0)
        .ok_or_else(|| Error::config("history", "empty history"))
}

/// Map CNN: `[B, H, W, 4]` raster to `[B, M·N, C_m]` features.
pub fn encode_map<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    raster: &[f64],
    batch: usize,
) -> Result<Var> {
    let grid = config.raster_grid()?;
    let mut x = g
        .tape
        .leaf(vec![batch, grid.height, grid.width, 4], cast(raster))?;
    for (i, c) in config.cnn.iter().enumerate() {
        let w = g.param(params, &format!("map.conv{i}.w"))?;
        let b = g.param(params, &format!("map.conv{i}.b"))?;
        let y = g.tape.conv2d(x, w, Some(b), c.stride, c.padding)?;
        x = g.tape.tanh(y);
    }
    let s = g.tape.shape(x).to_vec();
    if (s[1], s[2]) != config.grid {
        return Err(Error::shape("encode_map", &s, &[batch, config.grid.0, config.grid.1]));
    }
    g.tape.reshape(x, vec![batch, config.cells(), config.map_channels])
}

/// Places neighbor hiddens into a zero `[B, M·N, C_h]` grid.
pub fn build_social_tensor<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    hiddens: Var,
    targets: &[Option<usize>],
    batch: usize,
) -> Result<Var> {
    g.tape.scatter_rows(
        hiddens,
        targets.to_vec(),
        vec![batch, config.cells(), config.enc_hidden],
    )
}

/// All `L` heads of one attention block over `features [B, M·N, C]`.
/// Returns the attended values `[B, L, d]` and weights `[B, L, M·N]`.
///
/// Scores use `Q_l · (F W_k,l)ᵀ = (Q_l W_k,lᵀ) · Fᵀ`, and since the weights
/// sum to one, `Σ α (F W_v,l + b) = (Σ α F) W_v,l + b`; both identities let
/// the per-cell key/value projections be skipped.
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    prefix: &str,
    target_hidden: Var,
    features: Var,
) -> Result<(Var, Var)> {
    let wq = g.param(params, &format!("{prefix}.query.w"))?;
    let bq = g.param(params, &format!("{prefix}.query.b"))?;
    let wk = g.param(params, &format!("{prefix}.key.w"))?;
    let wv = g.param(params, &format!("{prefix}.value.w"))?;
    let bv = g.param(params, &format!("{prefix}.value.b"))?;
    let q = g.tape.head_linear(target_hidden, wq, Some(bq), false)?;
    let qk = g.tape.head_linear(q, wk, None, true)?;
    let scores = g.tape.bmm(qk, features, true)?;
    let scaled = g
        .tape
        .scale(scores, T::of(1.0 / (config.attn_dim as f64).sqrt()));
    let alpha = g.tape.softmax(scaled)?;
    let pooled = g.tape.bmm(alpha, features, false)?;
    let values = g.tape.head_linear(pooled, wv, Some(bv), false)?;
    Ok((values, alpha))
}

fn head_slice<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, name: &str, l: usize) -> Result<Var> {
    let p = g.param(params, name)?;
    let shape = g.tape.shape(p).to_vec();
    let flat = g.tape.reshape(p, vec![shape[0], shape[1..].iter().product()])?;
    let row = g.tape.select_rows(flat, vec![l])?;
    g.tape.reshape(row, shape[1..].to_vec())
}

/// Head `l` computed literally: query by a fully connected layer on `h_T`,
/// keys and values by 1×1 convolutions (per-cell linear maps) of the joint
/// features, scaled dot-product softmax over all cells, weighted sum of
/// values. Returns `z_l = [h_T, A_l]` as `[B, C_h + d]` and `α_l` as
/// `[B, M·N]`.
pub fn attention_head<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    prefix: &str,
    l: usize,
    target_hidden: Var,
    features: Var,
) -> Result<(Var, Var)> {
    let batch = g.tape.shape(target_hidden)[0];
    let cells = g.tape.shape(features)[1];
    let d = config.attn_dim;
    let wq = head_slice(g, params, &format!("{prefix}.query.w"), l)?;
    let bq = head_slice(g, params, &format!("{prefix}.query.b"), l)?;
    let wk = head_slice(g, params, &format!("{prefix}.key.w"), l)?;
    let wv = head_slice(g, params, &format!("{prefix}.value.w"), l)?;
    let bv = head_slice(g, params, &format!("{prefix}.value.b"), l)?;
    let q = g.tape.linear(target_hidden, wq, Some(bq))?;
    let k = g.tape.linear(features, wk, None)?;
    let v = g.tape.linear(features, wv, Some(bv))?;
    let q3 = g.tape.reshape(q, vec![batch, 1, d])?;
    let scores = g.tape.bmm(q3, k, true)?;
    let scaled = g.tape.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let alpha = g.tape.softmax(scaled)?;
    let a = g.tape.bmm(alpha, v, false)?;
    let a = g.tape.reshape(a, vec![batch, d])?;
    let z = g.tape.concat(&[target_hidden, a])?;
    let alpha = g.tape.reshape(alpha, vec![batch, cells])?;
    Ok((z, alpha))
}

/// Shared decoder over stacked contexts `[R, Z]`: the context is the input
/// at every step, the state starts at zero, and `Λ` maps each hidden state
/// to raw Gaussian parameters. Returns `[R, t_f, 5]`.
pub fn decode_modes<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    contexts: Var,
) -> Result<Var> {
    let rows = g.tape.shape(contexts)[0];
    let hd = config.dec_hidden;
    let w_ih = g.param(params, "dec.lstm.w_ih")?;
    let w_hh = g.param(params, "dec.lstm.w_hh")?;
    let b = g.param(params, "dec.lstm.b")?;
    let w_out = g.param(params, "dec.out.w")?;
    let b_out = g.param(params, "dec.out.b")?;
    let input_gates = g.tape.linear(contexts, w_ih, Some(b))?;
    let mut hs = Vec::with_capacity(config.horizon);
    let mut state: Option<(Var, Var)> = None;
    for _ in 0..config.horizon {
        let gates = match state {
            None => input_gates,
            Some((h, _)) => {
                let rec = g.tape.matmul(h, w_hh)?;
                g.tape.add(input_gates, rec)?
            }
        };
        let next = g.tape.lstm_step(gates, state.map(|s| s.1))?;
        hs.push(next.0);
        state = Some(next);
    }
    let stacked = g.tape.concat(&hs)?;
    let per_step = g.tape.reshape(stacked, vec![rows * config.horizon, hd])?;
    let raw = g.tape.linear(per_step, w_out, Some(b_out))?;
    let raw = g.tape.reshape(raw, vec![rows, config.horizon * 5])?;
    g.tape
        .trajectory_head(raw, config.horizon, T::of(config.step_scale))
}

/// Concatenated contexts `[B, L, Z]` to mode probabilities `[B, L]`.
pub fn mode_probabilities<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    contexts: Var,
) -> Result<Var> {
    let batch = g.tape.shape(contexts)[0];
    let flat = g
        .tape
        .reshape(contexts, vec![batch, config.modes * config.context_dim()])?;
    let w1 = g.param(params, "prob.fc1.w")?;
    let b1 = g.param(params, "prob.fc1.b")?;
    let w2 = g.param(params, "prob.fc2.w")?;
    let b2 = g.param(params, "prob.fc2.b")?;
    let h = g.tape.linear(flat, w1, Some(b1))?;
    let h = g.tape.tanh(h);
    let logits = g.tape.linear(h, w2, Some(b2))?;
    g.tape.softmax(logits)
}

/// Graph and handles produced by [`forward`].
pub struct ForwardOutput<T> {
    pub graph: Graph<T>,
    /// `[B·L, t_f, 5]` Gaussian parameters, episode-major.
    pub trajectories: Var,
    /// `[B, L]`
    pub probs: Var,
    /// Per attention block: prefix and weights `[B, L, M·N]`.
    pub attention: Vec<(String, Var)>,
    /// `[B, M·N, C]` key/value source of each block.
    pub features: Vec<Var>,
    pub target_hidden: Var,
}

impl<T: Real> ForwardOutput<T> {
    pub fn prediction_sets(&self, config: &ModelConfig) -> Vec<PredictionSet> {
        let tape = &self.graph.tape;
        let traj = tape.value(self.trajectories);
        let probs = tape.value(self.probs);
        let (l, t) = (config.modes, config.horizon);
        let batch = probs.len() / l;
        (0..batch)
            .map(|b| PredictionSet {
                modes: (0..l)
                    .map(|m| {
                        (0..t)
                            .map(|s| {
                                let i = ((b * l + m) * t + s) * 5;
                                Gaussian5 {
                                    mu_x: Real::to_f64(traj[i]),
                                    mu_y: Real::to_f64(traj[i + 1]),
                                    sigma_x: Real::to_f64(traj[i + 2]),
                                    sigma_y: Real::to_f64(traj[i + 3]),
                                    rho: Real::to_f64(traj[i + 4]),
                                }
                            })
                            .collect()
                    })
                    .collect(),
                probs: probs[b * l..(b + 1) * l].iter().map(|p| Real::to_f64(*p)).collect(),
            })
            .collect()
    }

    /// Attention weights of episode `b`: per block, `L` grids of `M·N`.
    pub fn attention_maps(&self, config: &ModelConfig, b: usize) -> Vec<(String, Vec<Vec<f64>>)> {
        let (l, cells) = (config.modes, config.cells());
        self.attention
            .iter()
            .map(|(name, v)| {
                let vals = self.graph.tape.value(*v);
                let heads = (0..l)
                    .map(|h| {
                        let start = (b * l + h) * cells;
                        vals[start..start + cells].iter().map(|a| Real::to_f64(*a)).collect()
                    })
                    .collect();
                (name.clone(), heads)
            })
            .collect()
    }

    /// Reverse sweep from cotangents of the trajectories and probabilities,
    /// accumulating parameter gradients into `params`.
    pub fn backward(&self, params: &mut ParamStore<T>, d_traj: Vec<T>, d_probs: Vec<T>) -> Result<Grads<T>> {
        let grads = self
            .graph
            .tape
            .backward(&[(self.trajectories, d_traj), (self.probs, d_probs)])?;
        self.graph.accumulate(&grads, params)?;
        Ok(grads)
    }
}

/// Full batched forward pass for the configured variant.
pub fn forward<T: Real>(config: &ModelConfig, params: &ParamStore<T>, batch: &Batch) -> Result<ForwardOutput<T>> {
    let mut g = Graph::new();
    let bsz = batch.size;
    let (l, ch) = (config.modes, config.enc_hidden);
    let hidden = encode_history(&mut g, params, &batch.features, batch.agents)?;
    let target_hidden = g.tape.select_rows(hidden, batch.target_rows.clone())?;

    let social = if config.variant.uses_agents() {
        Some(build_social_tensor(&mut g, config, hidden, &batch.social_targets, bsz)?)
    } else {
        None
    };
    let map = if config.variant.uses_map() {
        Some(encode_map(&mut g, params, config, &batch.raster, bsz)?)
    } else {
        None
    };
    let missing = || Error::config("variant", "feature source unavailable");

    let mut attended = Vec::new();
    let mut attention = Vec::new();
    let mut sources = Vec::new();
    let mut joint = None;
    for (prefix, feat) in config.variant.blocks() {
        let f = match feat {
            Features::Social => social.ok_or_else(missing)?,
            Features::Map => map.ok_or_else(missing)?,
            Features::Joint => match joint {
                Some(j) => j,
                None => {
                    let j = g
                        .tape
                        .concat(&[social.ok_or_else(missing)?, map.ok_or_else(missing)?])?;
                    joint = Some(j);
                    j
                }
            },
        };
        let (values, alpha) = attention_block(&mut g, params, config, prefix, target_hidden, f)?;
        attended.push(values);
        attention.push((prefix.to_string(), alpha));
        sources.push(f);
    }
    if config.variant == Variant::Jah {
        let d = config.attn_dim;
        let flat = g.tape.reshape(attended[0], vec![bsz, l * d])?;
        let w = g.param(params, "attn.mix.w")?;
        let b = g.param(params, "attn.mix.b")?;
        let mixed = g.tape.linear(flat, w, Some(b))?;
        attended[0] = g.tape.reshape(mixed, vec![bsz, l, d])?;
    }

    let repeat: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, l)).collect();
    let rep = g.tape.select_rows(target_hidden, repeat)?;
    let rep = g.tape.reshape(rep, vec![bsz, l, ch])?;
    let mut parts = vec![rep];
    parts.extend(attended);
    let contexts = g.tape.concat(&parts)?;

    let z = config.context_dim();
    let stacked = g.tape.reshape(contexts, vec![bsz * l, z])?;
    let trajectories = decode_modes(&mut g, params, config, stacked)?;
    let probs = mode_probabilities(&mut g, params, config, contexts)?;
    Ok(ForwardOutput {
        graph: g,
        trajectories,
        probs,
        attention,
        features: sources,
        target_hidden,
    })
}
