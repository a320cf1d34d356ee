//! Partially observable pursuit on a torus.
//!
//! Two agent types share one team reward: scouts see far, captors see only
//! their immediate neighbourhood. A prey is captured once two or more agents
//! stand within Chebyshev distance one of it, so a lone agent can never score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

pub const N_ACTIONS: usize = 5;
const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Stay = 0,
    North = 1,
    South = 2,
    East = 3,
    West = 4,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Stay,
        Action::North,
        Action::South,
        Action::East,
        Action::West,
    ];

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Stay => (0, 0),
            Action::North => (0, -1),
            Action::South => (0, 1),
            Action::East => (1, 0),
            Action::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentType {
    Scout,
    Captor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub n_agents: usize,
    /// The first `n_scouts` agents are scouts, the rest captors.
    pub n_scouts: usize,
    pub n_prey: usize,
    pub scout_radius: usize,
    pub captor_radius: usize,
    pub episode_limit: usize,
    pub step_penalty: f64,
    pub capture_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 10,
            n_agents: 6,
            n_scouts: 3,
            n_prey: 2,
            scout_radius: 3,
            captor_radius: 1,
            episode_limit: 60,
            step_penalty: -0.01,
            capture_reward: 10.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("env.{key}"),
                reason: reason.to_string(),
            })
        };
        if self.grid_size < 5 {
            return bad("grid_size", "must be at least 5");
        }
        if self.n_agents < 2 {
            return bad("n_agents", "must be at least 2");
        }
        if self.n_scouts > self.n_agents {
            return bad("n_scouts", "exceeds n_agents");
        }
        for (key, r) in [
            ("scout_radius", self.scout_radius),
            ("captor_radius", self.captor_radius),
        ] {
            if r < 1 || 2 * r > self.grid_size {
                return bad(key, "must lie in [1, grid_size/2]");
            }
        }
        if self.episode_limit < 1 {
            return bad("episode_limit", "must be at least 1");
        }
        Ok(())
    }

    pub fn agent_type(&self, agent: usize) -> AgentType {
        if agent < self.n_scouts {
            AgentType::Scout
        } else {
            AgentType::Captor
        }
    }

    pub fn radius(&self, kind: AgentType) -> usize {
        match kind {
            AgentType::Scout => self.scout_radius,
            AgentType::Captor => self.captor_radius,
        }
    }

    fn max_radius(&self) -> usize {
        self.scout_radius.max(self.captor_radius)
    }

    fn patch_side(&self) -> usize {
        2 * self.max_radius() + 1
    }

    /// Uniform observation width shared by every agent.
    pub fn obs_dim(&self) -> usize {
        let side = self.patch_side();
        side * side * CHANNELS + 4
    }

    /// Width of [`EnvState::global_features`].
    pub fn state_dim(&self) -> usize {
        3 * self.n_agents + 3 * self.n_prey + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub agents: Vec<(usize, usize)>,
    pub types: Vec<AgentType>,
    pub prey: Vec<(usize, usize)>,
    pub alive: Vec<bool>,
    pub t: usize,
}

pub type Observation = Vec<f64>;

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    pub captured: usize,
}

fn wrap(v: i64, w: usize) -> usize {
    v.rem_euclid(w as i64) as usize
}

/// Signed shortest offset from `a` to `b` on a ring of size `w`.
fn torus_offset(a: usize, b: usize, w: usize) -> i64 {
    let w = w as i64;
    let mut d = (b as i64 - a as i64).rem_euclid(w);
    if d > w / 2 {
        d -= w;
    }
    d
}

fn chebyshev(a: (usize, usize), b: (usize, usize), w: usize) -> i64 {
    torus_offset(a.0, b.0, w)
        .abs()
        .max(torus_offset(a.1, b.1, w).abs())
}

fn manhattan(a: (usize, usize), b: (usize, usize), w: usize) -> i64 {
    torus_offset(a.0, b.0, w).abs() + torus_offset(a.1, b.1, w).abs()
}

fn shift(p: (usize, usize), a: Action, w: usize) -> (usize, usize) {
    let (dx, dy) = a.delta();
    (wrap(p.0 as i64 + dx, w), wrap(p.1 as i64 + dy, w))
}

pub fn reset(config: &EnvConfig, rng: &mut RngStream) -> Result<(EnvState, Vec<Observation>)> {
    config.validate()?;
    let w = config.grid_size;
    let cells = w * w;
    if config.n_prey > cells {
        return Err(Error::Parameter(format!(
            "cannot place {} prey on {} cells",
            config.n_prey, cells
        )));
    }
    let agents = (0..config.n_agents)
        .map(|_| (rng.below(w), rng.below(w)))
        .collect();
    let types = (0..config.n_agents).map(|i| config.agent_type(i)).collect();
    let mut prey: Vec<(usize, usize)> = Vec::with_capacity(config.n_prey);
    while prey.len() < config.n_prey {
        let c = rng.below(cells);
        let p = (c % w, c / w);
        if !prey.contains(&p) {
            prey.push(p);
        }
    }
    let state = EnvState {
        agents,
        types,
        alive: vec![true; config.n_prey],
        prey,
        t: 0,
    };
    let obs = observe_all(config, &state);
    Ok((state, obs))
}

impl EnvState {
    pub fn is_done(&self, config: &EnvConfig) -> bool {
        self.t >= config.episode_limit || self.alive.iter().all(|a| !a)
    }

    pub fn prey_captured(&self) -> usize {
        self.alive.iter().filter(|a| !**a).count()
    }

    /// Full-state features for the mixer: positions, types, prey, time.
    pub fn global_features(&self, config: &EnvConfig) -> Vec<f64> {
        let w = config.grid_size as f64;
        let mut out = Vec::with_capacity(config.state_dim());
        for &(x, y) in &self.agents {
            out.push(x as f64 / w);
            out.push(y as f64 / w);
        }
        for kind in &self.types {
            out.push(if *kind == AgentType::Scout { 1.0 } else { 0.0 });
        }
        for (&(x, y), &alive) in self.prey.iter().zip(&self.alive) {
            if alive {
                out.extend([x as f64 / w, y as f64 / w, 1.0]);
            } else {
                out.extend([0.0, 0.0, 0.0]);
            }
        }
        out.push(self.t as f64 / config.episode_limit as f64);
        out
    }
}

pub fn step(
    config: &EnvConfig,
    state: &EnvState,
    actions: &[Action],
    _rng: &mut RngStream,
) -> Result<StepOutcome> {
    if state.is_done(config) {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    if actions.len() != config.n_agents {
        return Err(Error::Contract(format!(
            "expected {} actions, got {}",
            config.n_agents,
            actions.len()
        )));
    }
    let w = config.grid_size;
    let mut next = state.clone();
    for (pos, &a) in next.agents.iter_mut().zip(actions) {
        *pos = shift(*pos, a, w);
    }

    let mut captured = 0;
    for p in 0..next.prey.len() {
        if !next.alive[p] {
            continue;
        }
        let near = next
            .agents
            .iter()
            .filter(|&&a| chebyshev(a, next.prey[p], w) <= 1)
            .count();
        if near >= 2 {
            next.alive[p] = false;
            captured += 1;
        }
    }

    for p in 0..next.prey.len() {
        if !next.alive[p] {
            continue;
        }
        let here = next.prey[p];
        let mut best = (i64::MIN, here);
        for a in Action::ALL {
            let cand = shift(here, a, w);
            let blocked = next
                .prey
                .iter()
                .enumerate()
                .any(|(q, &pos)| q != p && next.alive[q] && pos == cand);
            if blocked {
                continue;
            }
            let nearest = next
                .agents
                .iter()
                .map(|&ag| manhattan(ag, cand, w))
                .min()
                .unwrap_or(i64::MAX);
            if nearest > best.0 {
                best = (nearest, cand);
            }
        }
        next.prey[p] = best.1;
    }

    next.t += 1;
    let reward = captured as f64 * config.capture_reward + config.step_penalty;
    let done = next.is_done(config);
    let observations = observe_all(config, &next);
    Ok(StepOutcome {
        state: next,
        observations,
        reward,
        done,
        captured,
    })
}

pub fn observe_all(config: &EnvConfig, state: &EnvState) -> Vec<Observation> {
    (0..state.agents.len())
        .map(|i| observe(config, state, i))
        .collect()
}

/// Egocentric view for one agent. The patch is laid out cell-major
/// (row, column, channel) on the largest radius grid; cells beyond the
/// agent's own radius stay zero. Channels: other agents, living prey,
/// other agents of the observer's own type.
pub fn observe(config: &EnvConfig, state: &EnvState, agent: usize) -> Observation {
    let w = config.grid_size;
    let big = config.max_radius() as i64;
    let side = config.patch_side();
    let me = state.agents[agent];
    let my_type = state.types[agent];
    let r = config.radius(my_type) as i64;
    let mut obs = vec![0.0; config.obs_dim()];
    let cell = |dx: i64, dy: i64| ((dy + big) as usize * side + (dx + big) as usize) * CHANNELS;

    for (j, &pos) in state.agents.iter().enumerate() {
        if j == agent {
            continue;
        }
        let dx = torus_offset(me.0, pos.0, w);
        let dy = torus_offset(me.1, pos.1, w);
        if dx.abs() <= r && dy.abs() <= r {
            let c = cell(dx, dy);
            obs[c] = 1.0;
            if state.types[j] == my_type {
                obs[c + 2] = 1.0;
            }
        }
    }
    for (&pos, &alive) in state.prey.iter().zip(&state.alive) {
        if !alive {
            continue;
        }
        let dx = torus_offset(me.0, pos.0, w);
        let dy = torus_offset(me.1, pos.1, w);
        if dx.abs() <= r && dy.abs() <= r {
            obs[cell(dx, dy) + 1] = 1.0;
        }
    }
    let tail = side * side * CHANNELS;
    match my_type {
        AgentType::Scout => obs[tail] = 1.0,
        AgentType::Captor => obs[tail + 1] = 1.0,
    }
    obs[tail + 2] = me.0 as f64 / w as f64;
    obs[tail + 3] = me.1 as f64 / w as f64;
    obs
}

pub fn render_ascii(config: &EnvConfig, state: &EnvState) -> String {
    let w = config.grid_size;
    let mut grid = vec![vec!['.'; w]; w];
    for (&(x, y), &alive) in state.prey.iter().zip(&state.alive) {
        if alive {
            grid[y][x] = 'P';
        }
    }
    // Co-located agents collapse into one glyph; the tally below is per cell.
    for (&(x, y), kind) in state.agents.iter().zip(&state.types) {
        grid[y][x] = match kind {
            AgentType::Scout => 'S',
            AgentType::Captor => 'C',
        };
    }
    grid.into_iter()
        .map(|row| row.into_iter().collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}
