//! Replay, losses and the optimizer step.

pub mod episode;
pub mod loss;
pub mod optim;
pub mod replay;

use serde::{Deserialize, Serialize};

use crate::config::{GroupLossScope, RunConfig};
use crate::error::{Error, Result};
use crate::graph;
use crate::numerics::{Graph, ParameterSet, RngStream};
use crate::policy::{self, Dims};

pub use episode::{EpisodeRecord, EpisodeRngs, StepRecord};
pub use loss::{group_distance_loss, group_regularizer, PreparedBatch};
pub use optim::Adam;
pub use replay::ReplayBuffer;

/// Scalar summary of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub td: f64,
    /// Inter/intra distance ratio, logged only.
    pub group_raw: f64,
    /// Its reciprocal, the term that is trained.
    pub group_reg: f64,
    pub lambda: f64,
}

/// `total = td + λ·group_reg`.
pub fn total_loss(td: f64, group_raw: f64, group_reg: f64, lambda: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda {lambda} must be non-negative")));
    }
    Ok(LossReport {
        total: td + lambda * group_reg,
        td,
        group_raw,
        group_reg,
        lambda,
    })
}

pub fn model_dims(run: &RunConfig) -> Dims {
    Dims {
        n_agents: run.env.n_agents,
        d_obs: run.env.obs_dim(),
        k: run.group.k,
        state_dim: run.env.state_dim(),
    }
}

/// Freshly initialized graph-inference and policy parameters.
pub fn init_model(run: &RunConfig, rng: &mut RngStream) -> Result<ParameterSet> {
    let dims = model_dims(run);
    let mut params = ParameterSet::new();
    graph::init_params(&mut params, dims.d_obs, &run.model, rng)?;
    policy::init_params(&mut params, dims, &run.model, rng)?;
    Ok(params)
}

/// Online and target networks plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub online: ParameterSet,
    pub target: ParameterSet,
    pub optimizer: Adam,
    pub train_steps: u64,
}

impl Learner {
    pub fn new(online: ParameterSet, run: &RunConfig) -> Self {
        let optimizer = Adam::new(&online, run.train.lr, run.train.grad_clip);
        Self {
            target: online.clone(),
            online,
            optimizer,
            train_steps: 0,
        }
    }

    /// Sample, rebuild the stored graphs, compute the loss, update, and
    /// sync the target every `target_period` steps.
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        run: &RunConfig,
        rng: &mut RngStream,
    ) -> Result<LossReport> {
        let episodes = buffer.sample(run.train.batch_episodes, rng)?;
        let batch = loss::prepare_batch(&episodes, run)?;
        let report = self.update(&batch, run)?;
        self.train_steps += 1;
        if self.train_steps % run.train.target_period as u64 == 0 {
            policy::target_sync(&self.online, &mut self.target)?;
        }
        Ok(report)
    }

    /// One optimizer step on a prepared batch.
    pub fn update(&mut self, batch: &PreparedBatch, run: &RunConfig) -> Result<LossReport> {
        let (report, grads) = self.gradients(batch, run)?;
        for ((_, t), g) in self.online.iter_mut().zip(grads) {
            t.grad = Some(g);
        }
        self.optimizer.step(&mut self.online)?;
        self.online.zero_grads();
        Ok(report)
    }

    /// Loss report and per-parameter gradients of the online network, in
    /// parameter order.
    pub fn gradients(
        &self,
        batch: &PreparedBatch,
        run: &RunConfig,
    ) -> Result<(LossReport, Vec<Vec<f64>>)> {
        let lambda = run.effective_lambda();
        let targets = loss::td_targets(batch, &self.target, run.train.gamma)?;
        let (report, grads) = {
            let mut g = Graph::new();
            let b = g.bind(&self.online, true);
            let vars = loss::loss_graph(&mut g, &b, batch, &targets, lambda)?;
            let report = total_loss(
                g.scalar(vars.td),
                g.scalar(vars.group_raw),
                g.scalar(vars.group_reg),
                lambda,
            )?;
            if !report.total.is_finite() {
                return Err(Error::Numerical {
                    param: "loss".into(),
                    detail: format!("non-finite loss at train step {}", self.train_steps + 1),
                });
            }
            let grads = match run.train.group_loss_scope {
                GroupLossScope::All => {
                    let gr = g.backward(vars.total)?;
                    collect(&gr, &b, &self.online, |_| 1.0)?
                }
                GroupLossScope::PolicyOnly => {
                    let td = g.backward(vars.td)?;
                    let reg = g.backward(vars.group_reg)?;
                    let mut out = collect(&td, &b, &self.online, |_| 1.0)?;
                    let extra = collect(&reg, &b, &self.online, |name| {
                        if name.starts_with("agent.") {
                            lambda
                        } else {
                            0.0
                        }
                    })?;
                    for (o, e) in out.iter_mut().zip(extra) {
                        for (x, y) in o.iter_mut().zip(e) {
                            *x += y;
                        }
                    }
                    out
                }
            };
            (report, grads)
        };
        Ok((report, grads))
    }
}

/// Gradients in parameter order, each scaled by `weight(name)`.
fn collect(
    grads: &crate::numerics::Gradients,
    bindings: &crate::numerics::Bindings,
    params: &ParameterSet,
    weight: impl Fn(&str) -> f64,
) -> Result<Vec<Vec<f64>>> {
    params
        .iter()
        .map(|(name, t)| {
            let w = weight(name);
            Ok(match grads.get(bindings.get(name)?) {
                Some(g) if w != 0.0 => g.iter().map(|x| x * w).collect(),
                _ => vec![0.0; t.len()],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::N_ACTIONS;
    use crate::training::episode::run_episode;

    #[test]
    fn total_is_td_plus_weighted_regularizer() {
        let r = total_loss(1.0, 2.0, 0.5, 0.1).unwrap();
        assert_eq!(r.total, 1.05);
        assert_eq!(r.total, r.td + r.lambda * r.group_reg);
        assert_eq!(total_loss(0.3, 9.0, 7.0, 0.0).unwrap().total, 0.3);
        assert!(matches!(total_loss(1.0, 1.0, 1.0, -0.1), Err(Error::Parameter(_))));
    }

    pub(crate) fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.env.grid_size = 5;
        run.env.n_agents = 3;
        run.env.n_scouts = 1;
        run.env.n_prey = 1;
        run.env.scout_radius = 2;
        run.env.episode_limit = 6;
        run.model.encoder_hidden = 6;
        run.model.d_h = 8;
        run.model.d_k = 3;
        run.model.agent_hidden = 6;
        run.model.mixer_embed = 3;
        run.group.k = 2;
        run.train.batch_episodes = 2;
        run.train.target_period = 3;
        run
    }

    fn filled_buffer(run: &RunConfig, params: &ParameterSet, episodes: u64) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(run.train.buffer_capacity).unwrap();
        for e in 0..episodes {
            let mut rngs = EpisodeRngs::training(run.seed, e);
            buf.push(run_episode(run, params, &mut rngs, &|_| 1.0).unwrap());
        }
        buf
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let run = tiny_run();
        let go = || {
            let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
            let buf = filled_buffer(&run, &params, 4);
            let mut learner = Learner::new(params, &run);
            let mut rng = RngStream::new(0, 2);
            (0..5)
                .map(|_| learner.train_step(&buf, &run, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn target_moves_only_on_sync() {
        let run = tiny_run();
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let buf = filled_buffer(&run, &params, 3);
        let mut learner = Learner::new(params.clone(), &run);
        let mut rng = RngStream::new(0, 2);
        for _ in 0..2 {
            learner.train_step(&buf, &run, &mut rng).unwrap();
            assert_eq!(learner.target, params);
        }
        learner.train_step(&buf, &run, &mut rng).unwrap();
        assert_eq!(learner.target.max_abs_diff(&learner.online).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambda_matches_pure_td_update() {
        let mut run = tiny_run();
        run.train.lambda = 0.0;
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let buf = filled_buffer(&run, &params, 2);
        let episodes: Vec<&EpisodeRecord> = buf.iter().collect();
        let batch = loss::prepare_batch(&episodes, &run).unwrap();

        let mut learner = Learner::new(params.clone(), &run);
        let report = learner.update(&batch, &run).unwrap();
        assert!(report.group_reg > 0.0);
        assert_eq!(report.total, report.td);

        // Same step driven by the TD term alone.
        let targets = loss::td_targets(&batch, &params, run.train.gamma).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&params, true);
        let vars = loss::loss_graph(&mut g, &b, &batch, &targets, 0.0).unwrap();
        let gr = g.backward(vars.td).unwrap();
        let grads = collect(&gr, &b, &params, |_| 1.0).unwrap();
        let mut manual = params.clone();
        for ((_, t), gv) in manual.iter_mut().zip(grads) {
            t.grad = Some(gv);
        }
        let mut adam = Adam::new(&params, run.train.lr, run.train.grad_clip);
        adam.step(&mut manual).unwrap();
        manual.zero_grads();
        assert_eq!(learner.online, manual);
    }

    #[test]
    fn policy_only_scope_keeps_group_term_out_of_the_graph_networks() {
        let run = tiny_run();
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let buf = filled_buffer(&run, &params, 2);
        let episodes: Vec<&EpisodeRecord> = buf.iter().collect();
        let batch = loss::prepare_batch(&episodes, &run).unwrap();
        let learner = Learner::new(params.clone(), &run);
        let grads = |scope, lambda: f64| {
            let mut r = run.clone();
            r.train.group_loss_scope = scope;
            r.train.lambda = lambda;
            learner.gradients(&batch, &r).unwrap().1
        };
        let scoped = grads(GroupLossScope::PolicyOnly, 5.0);
        let td_only = grads(GroupLossScope::All, 0.0);
        let full = grads(GroupLossScope::All, 5.0);
        for (i, name) in params.names().enumerate() {
            let graph_side = name.starts_with("encoder.") || name.starts_with("attention.");
            if graph_side {
                assert_eq!(scoped[i], td_only[i], "{name}");
                assert_ne!(scoped[i], full[i], "{name}");
            }
            if name == "agent.fc2.w" {
                assert_ne!(scoped[i], td_only[i]);
            }
        }
    }

    #[test]
    fn replayed_graphs_match_acting_time() {
        let run = tiny_run();
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let episodes: Vec<EpisodeRecord> = (0..2)
            .map(|e| {
                let mut rngs = EpisodeRngs::training(9, e);
                run_episode(&run, &params, &mut rngs, &|_| 0.0).unwrap()
            })
            .collect();
        let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
        let batch = loss::prepare_batch(&refs, &run).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&params, false);
        let replay = policy::joint_forward(&mut g, &b, &batch.online).unwrap();
        let (q_all, c_all) = (g.value(replay.q).to_vec(), g.value(replay.c_hat).to_vec());

        let n = run.env.n_agents;
        let mut row = 0;
        for ep in &episodes {
            let history = ep.observations(&run.env);
            for (t, step) in ep.steps.iter().enumerate() {
                let single = episode::step_batch(&run, &history, &[step], &[t]);
                let mut g1 = Graph::new();
                let b1 = g1.bind(&params, false);
                let f = policy::joint_forward(&mut g1, &b1, &single).unwrap();
                assert_eq!(g1.value(f.c_hat), &c_all[row * n * n..(row + 1) * n * n]);
                let q = &q_all[row * n * N_ACTIONS..(row + 1) * n * N_ACTIONS];
                assert_eq!(g1.value(f.q), q);
                let greedy: Vec<usize> = q.chunks(N_ACTIONS).map(policy::argmax).collect();
                assert_eq!(greedy, step.actions);
                row += 1;
            }
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let run = tiny_run();
        for seed in 0..3 {
            let params = init_model(&run, &mut RngStream::new(seed, 1)).unwrap();
            let buf = filled_buffer(&run, &params, 2);
            let episodes: Vec<&EpisodeRecord> = buf.iter().collect();
            let batch = loss::prepare_batch(&episodes, &run).unwrap();
            let targets = loss::td_targets(&batch, &params, run.train.gamma).unwrap();
            let f = |g: &mut Graph<'_>, b: &crate::numerics::Bindings| {
                Ok(loss::loss_graph(g, b, &batch, &targets, 0.1)?.total)
            };
            let probes = crate::numerics::gradcheck::probe_coordinates(f, &params, 1e-5).unwrap();
            // Coordinates far below the difference quotient's resolution only
            // need to agree to within rounding noise.
            let floor = 16.0 * probes.resolution();
            for c in &probes.coordinates {
                let gap = (c.finite_difference - c.autodiff).abs();
                assert!(c.relative_error() <= 1e-5 || gap <= floor, "seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn overfits_a_fixed_pair_of_episodes() {
        let mut run = tiny_run();
        run.train.lr = 1e-3;
        run.train.target_period = 10_000;
        let params = init_model(&run, &mut RngStream::new(0, 1)).unwrap();
        let buf = filled_buffer(&run, &params, 2);
        let episodes: Vec<&EpisodeRecord> = buf.iter().collect();
        let batch = loss::prepare_batch(&episodes, &run).unwrap();
        let mut learner = Learner::new(params, &run);
        let first = learner.update(&batch, &run).unwrap().total;
        let mut last = first;
        for _ in 0..499 {
            last = learner.update(&batch, &run).unwrap().total;
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }
}
