//! Group distance loss, TD loss and their combination.

use crate::config::RunConfig;
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::graph::GroupPartition;
use crate::numerics::{Bindings, Graph, ParameterSet, Var};
use crate::policy::{self, StepBatch};
use crate::training::episode::{append_steps, EpisodeRecord};

/// Floor applied to both ratio denominators.
pub const DENOM_EPS: f64 = 1e-8;

/// Per-timestep group terms, each `[batch]`.
#[derive(Debug, Clone, Copy)]
pub struct GroupTerms {
    /// Inter-group over intra-group distance.
    pub raw: Var,
    /// Intra-group over inter-group distance; the trained quantity.
    pub reg: Var,
}

/// Pair weights turning summed L2 distances into the mean inter-group
/// distance summed over ordered group pairs, scaled by `1/(m-1)²`
/// (numerator), and the mean within-group distance averaged over groups
/// (denominator). Self-pairs count towards the within-group means.
fn pair_weights(p: &GroupPartition, pairs: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let sizes = p.sizes();
    let m = p.m as f64;
    let mut num = vec![0.0; pairs.len()];
    let mut den = vec![0.0; pairs.len()];
    if p.m < 2 {
        return (num, den);
    }
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let (a, b) = (p.labels[i], p.labels[j]);
        if a == b {
            den[idx] = 1.0 / (m * (sizes[a] * sizes[a]) as f64);
        } else {
            num[idx] = 1.0 / ((m - 1.0) * (m - 1.0) * (sizes[a] * sizes[b]) as f64);
        }
    }
    (num, den)
}

/// Both group ratios for a batch of timesteps. `pi` is `[batch·n, u]`, one
/// partition per timestep.
pub fn group_terms(
    g: &mut Graph<'_>,
    pi: Var,
    partitions: &[&GroupPartition],
) -> Result<GroupTerms> {
    let batch = partitions.len();
    let shape = g.shape(pi).to_vec();
    if batch == 0 || shape.len() != 2 || shape[0] % batch != 0 {
        return Err(Error::dim("group_terms", &shape, &[batch]));
    }
    let (n, u) = (shape[0] / batch, shape[1]);
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let per = pairs.len().max(1);
    let mut left = Vec::with_capacity(batch * per * u);
    let mut right = Vec::with_capacity(batch * per * u);
    let mut w_num = Vec::with_capacity(batch * per);
    let mut w_den = Vec::with_capacity(batch * per);
    for (t, p) in partitions.iter().enumerate() {
        if p.n() != n {
            return Err(Error::dim("group_terms", &[p.n()], &[n]));
        }
        p.validate()?;
        for &(i, j) in &pairs {
            let (ri, rj) = ((t * n + i) * u, (t * n + j) * u);
            left.extend(ri..ri + u);
            right.extend(rj..rj + u);
        }
        let (num, den) = pair_weights(p, &pairs);
        w_num.extend(num);
        w_den.extend(den);
        if pairs.is_empty() {
            w_num.push(0.0);
            w_den.push(0.0);
        }
    }
    let dist = if pairs.is_empty() {
        g.input(&[batch, 1], vec![0.0; batch])?
    } else {
        let a = g.gather(pi, left, &[batch * per, u])?;
        let b = g.gather(pi, right, &[batch * per, u])?;
        let diff = g.sub(a, b)?;
        let d = g.l2_norm(diff);
        g.reshape(d, &[batch, per])?
    };
    let w_num = g.input(&[batch, per], w_num)?;
    let w_den = g.input(&[batch, per], w_den)?;
    let num = g.mul(dist, w_num)?;
    let num = g.sum_last(num);
    let den = g.mul(dist, w_den)?;
    let den = g.sum_last(den);
    let num_floor = g.floor_at(num, DENOM_EPS);
    let den_floor = g.floor_at(den, DENOM_EPS);
    let raw = g.div(num, den_floor)?;
    let reg = g.div(den, num_floor)?;
    Ok(GroupTerms { raw, reg })
}

fn single_step(pi: &[Vec<f64>], p: &GroupPartition, pick: fn(GroupTerms) -> Var) -> Result<f64> {
    let u = pi.first().map_or(0, Vec::len);
    if pi.iter().any(|r| r.len() != u) {
        return Err(Error::dim("group_distance_loss", &[pi.len(), u], &[]));
    }
    let mut g = Graph::new();
    let v = g.input(&[pi.len(), u], pi.concat())?;
    let terms = group_terms(&mut g, v, &[p])?;
    Ok(g.scalar(pick(terms)))
}

/// Mean inter-group over mean intra-group behavioural distance for one
/// timestep. Zero when there is a single group.
pub fn group_distance_loss(pi: &[Vec<f64>], p: &GroupPartition) -> Result<f64> {
    single_step(pi, p, |t| t.raw)
}

/// Reciprocal of [`group_distance_loss`]: small when groups behave alike
/// internally and differently from each other.
pub fn group_regularizer(pi: &[Vec<f64>], p: &GroupPartition) -> Result<f64> {
    single_step(pi, p, |t| t.reg)
}

/// Transitions of a replay batch laid out for one batched forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub online: StepBatch,
    /// Chosen action per agent, `[batch·n]`.
    pub actions: Vec<usize>,
    /// `[batch, state_dim]`.
    pub states: Vec<f64>,
    pub state_dim: usize,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub partitions: Vec<GroupPartition>,
    /// Successor inputs of the non-terminal transitions.
    pub next: StepBatch,
    pub next_states: Vec<f64>,
    /// Row of each transition's successor in `next`.
    pub next_of: Vec<Option<usize>>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

pub fn prepare_batch(episodes: &[&EpisodeRecord], run: &RunConfig) -> Result<PreparedBatch> {
    if episodes.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let n = run.env.n_agents;
    let empty = StepBatch {
        n,
        ..StepBatch::default()
    };
    let mut b = PreparedBatch {
        online: empty.clone(),
        actions: Vec::new(),
        states: Vec::new(),
        state_dim: run.env.state_dim(),
        rewards: Vec::new(),
        dones: Vec::new(),
        partitions: Vec::new(),
        next: empty,
        next_states: Vec::new(),
        next_of: Vec::new(),
    };
    for ep in episodes {
        ep.validate()?;
        let history = ep.observations(&run.env);
        let steps: Vec<_> = ep.steps.iter().collect();
        let times: Vec<usize> = (0..steps.len()).collect();
        append_steps(&mut b.online, run, &history, &steps, &times);
        append_steps(&mut b.next, run, &history, &steps[1..], &times[1..]);
        for (t, s) in ep.steps.iter().enumerate() {
            b.actions.extend(&s.actions);
            b.states.extend(s.state.global_features(&run.env));
            b.rewards.push(s.reward);
            b.dones.push(s.done);
            b.partitions.push(s.partition.clone());
            if s.done {
                b.next_of.push(None);
            } else {
                b.next_of.push(Some(b.next_states.len() / b.state_dim));
                b.next_states.extend(ep.steps[t + 1].state.global_features(&run.env));
            }
        }
    }
    Ok(b)
}

/// `r + γ·Q_tot'(s')` with per-agent greedy actions under `target`;
/// terminal transitions bootstrap zero.
pub fn td_targets(batch: &PreparedBatch, target: &ParameterSet, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let next_values = if batch.next.batch == 0 {
        Vec::new()
    } else {
        let mut g = Graph::new();
        let b = g.bind(target, false);
        let fwd = policy::joint_forward(&mut g, &b, &batch.next)?;
        let rows = batch.next.batch;
        let n = batch.next.n;
        let best: Vec<f64> = g
            .value(fwd.q)
            .chunks(N_ACTIONS)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let q = g.input(&[rows, n], best)?;
        let s = g.input(&[rows, batch.state_dim], batch.next_states.clone())?;
        let out = policy::mix(&mut g, &b, q, s)?;
        g.value(out.q_tot).to_vec()
    };
    Ok(batch
        .rewards
        .iter()
        .zip(&batch.next_of)
        .map(|(r, next)| match next {
            Some(i) => r + gamma * next_values[*i],
            None => *r,
        })
        .collect())
}

/// Graph handles of every loss component.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub td: Var,
    pub group_raw: Var,
    pub group_reg: Var,
    pub q_tot: Var,
}

/// Online forward pass and the combined loss against fixed `targets`.
pub fn loss_graph(
    g: &mut Graph<'_>,
    b: &Bindings,
    batch: &PreparedBatch,
    targets: &[f64],
    lambda: f64,
) -> Result<LossVars> {
    let rows = batch.len();
    if targets.len() != rows {
        return Err(Error::dim("loss_graph", &[targets.len()], &[rows]));
    }
    let n = batch.online.n;
    let fwd = policy::joint_forward(g, b, &batch.online)?;
    let picks = batch
        .actions
        .iter()
        .enumerate()
        .map(|(r, &a)| r * N_ACTIONS + a)
        .collect();
    let chosen = g.gather(fwd.q, picks, &[rows, n])?;
    let states = g.input(&[rows, batch.state_dim], batch.states.clone())?;
    let mixed = policy::mix(g, b, chosen, states)?;
    let y = g.input(&[rows], targets.to_vec())?;
    let err = g.sub(mixed.q_tot, y)?;
    let sq = g.mul(err, err)?;
    let td = g.mean(sq);

    let parts: Vec<&GroupPartition> = batch.partitions.iter().collect();
    let terms = group_terms(g, fwd.pi, &parts)?;
    let group_raw = g.mean(terms.raw);
    let group_reg = g.mean(terms.reg);
    let weighted = g.scale(group_reg, lambda);
    let total = g.add(td, weighted)?;
    Ok(LossVars {
        total,
        td,
        group_raw,
        group_reg,
        q_tot: mixed.q_tot,
    })
}
