//! Message passing over the coordination graph, per-agent Q heads, action
//! selection and the monotonic mixer.

use crate::config::ModelConfig;
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::graph::{self, EdgeNoise};
use crate::numerics::{Bindings, Graph, ParameterSet, RngStream, Tensor, Var};

/// Sizes fixed by the environment and the window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_agents: usize,
    pub d_obs: usize,
    pub k: usize,
    pub state_dim: usize,
}

/// Policy parameters: GNN layers, the shared agent head and the mixer.
pub fn init_params(
    params: &mut ParameterSet,
    dims: Dims,
    model: &ModelConfig,
    rng: &mut RngStream,
) -> Result<()> {
    let d_h = model.d_h;
    for l in 0..model.gnn_layers {
        params.insert(format!("gnn.layer{l}.w"), Tensor::uniform_init(&[d_h, d_h], d_h, rng))?;
    }
    let d_win = dims.k * dims.d_obs;
    let fan_in = d_win + d_h;
    let h = model.agent_hidden;
    params.insert("agent.fc1_window.w", Tensor::uniform_init(&[d_win, h], fan_in, rng))?;
    params.insert("agent.fc1_msg.w", Tensor::uniform_init(&[d_h, h], fan_in, rng))?;
    params.insert("agent.fc1.b", Tensor::uniform_init(&[h], fan_in, rng))?;
    params.insert("agent.fc2.w", Tensor::uniform_init(&[h, N_ACTIONS], h, rng))?;
    params.insert("agent.fc2.b", Tensor::uniform_init(&[N_ACTIONS], h, rng))?;

    let (s, e, n) = (dims.state_dim, model.mixer_embed, dims.n_agents);
    let mut linear = |name: &str, rows: usize, cols: usize| -> Result<()> {
        params.insert(format!("{name}.w"), Tensor::uniform_init(&[rows, cols], rows, rng))?;
        params.insert(format!("{name}.b"), Tensor::uniform_init(&[cols], rows, rng))
    };
    linear("mixer.hyper_w1", s, n * e)?;
    linear("mixer.hyper_b1", s, e)?;
    linear("mixer.hyper_wf", s, e)?;
    linear("mixer.v1", s, e)?;
    linear("mixer.v2", e, 1)?;
    Ok(())
}

fn linear(g: &mut Graph<'_>, b: &Bindings, x: Var, name: &str) -> Result<Var> {
    let y = g.matmul(x, b.get(&format!("{name}.w"))?)?;
    g.add_row(y, b.get(&format!("{name}.b"))?)
}

/// Hidden states of every GNN layer, each `[batch·n, d_h]`.
#[derive(Debug, Clone)]
pub struct MessageBatch {
    pub layers: Vec<Var>,
}

impl MessageBatch {
    /// Final-layer messages `m_i`.
    pub fn messages(&self) -> Var {
        *self.layers.last().expect("at least the input layer")
    }
}

/// `H_l = ReLU(Ĉ H_{l-1} W_{l-1})` for every `gnn.layer*.w` parameter.
/// `c_hat` is `[batch, n, n]`, `h0` is `[batch·n, d_h]`.
pub fn gnn_forward(g: &mut Graph<'_>, b: &Bindings, c_hat: Var, h0: Var) -> Result<MessageBatch> {
    let (batch, n) = match g.shape(c_hat)[..] {
        [bs, r, c] if r == c => (bs, r),
        _ => return Err(Error::dim("gnn_forward", g.shape(c_hat), &[])),
    };
    let hs = g.shape(h0).to_vec();
    if hs.len() != 2 || hs[0] != batch * n {
        return Err(Error::dim("gnn_forward", &hs, &[batch * n, 0]));
    }
    let mut layers = vec![h0];
    let mut h = h0;
    for l in 0.. {
        let w = match b.get(&format!("gnn.layer{l}.w")) {
            Ok(w) => w,
            Err(_) => break,
        };
        let d = g.shape(h)[1];
        if g.shape(w)[0] != d {
            return Err(Error::dim("gnn_forward", &[batch * n, d], g.shape(w)));
        }
        let h3 = g.reshape(h, &[batch, n, d])?;
        let agg = g.bmm(c_hat, h3)?;
        let agg = g.reshape(agg, &[batch * n, d])?;
        let z = g.matmul(agg, w)?;
        h = g.relu(z);
        layers.push(h);
    }
    Ok(MessageBatch { layers })
}

/// Per-agent action values and their softmax behaviour distribution.
#[derive(Debug, Clone, Copy)]
pub struct AgentQOutput {
    pub q: Var,
    pub pi: Var,
}

/// Shared head over `[window, message]`. `windows` is `[rows, k·d_obs]`,
/// `messages` is `[rows, d_h]`.
pub fn agent_q_values(
    g: &mut Graph<'_>,
    b: &Bindings,
    windows: Var,
    messages: Var,
) -> Result<AgentQOutput> {
    let w_win = b.get("agent.fc1_window.w")?;
    let w_msg = b.get("agent.fc1_msg.w")?;
    let (ws, ms) = (g.shape(windows).to_vec(), g.shape(messages).to_vec());
    if ws.len() != 2 || ws[1] != g.shape(w_win)[0] {
        return Err(Error::dim("agent_q_values", &ws, g.shape(w_win)));
    }
    if ms.len() != 2 || ms[0] != ws[0] || ms[1] != g.shape(w_msg)[0] {
        return Err(Error::dim("agent_q_values", &ms, g.shape(w_msg)));
    }
    let a = g.matmul(windows, w_win)?;
    let m = g.matmul(messages, w_msg)?;
    let h = g.add(a, m)?;
    let h = g.add_row(h, b.get("agent.fc1.b")?)?;
    let h = g.relu(h);
    let q = linear(g, b, h, "agent.fc2")?;
    let pi = g.softmax_rows(q);
    Ok(AgentQOutput { q, pi })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy joint action from row-major `[n, n_actions]` values.
pub fn select_actions(
    q: &[f64],
    n_actions: usize,
    epsilon: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if n_actions == 0 || q.len() % n_actions != 0 {
        return Err(Error::dim("select_actions", &[q.len()], &[n_actions]));
    }
    Ok(q
        .chunks(n_actions)
        .map(|row| {
            if rng.uniform() < epsilon {
                rng.below(n_actions)
            } else {
                argmax(row)
            }
        })
        .collect())
}

/// Mixer output `[batch]` plus the state-conditioned weights.
#[derive(Debug, Clone, Copy)]
pub struct MixerOutput {
    pub q_tot: Var,
    /// `|W1|`, `[batch, n, embed]`.
    pub w1: Var,
    /// `|W_f|`, `[batch, embed, 1]`.
    pub wf: Var,
    /// State value `V(s)`, `[batch, 1]`.
    pub v: Var,
}

/// Monotonic QMIX mixing of `q_chosen [batch, n]` conditioned on
/// `state [batch, state_dim]`.
pub fn mix(g: &mut Graph<'_>, b: &Bindings, q_chosen: Var, state: Var) -> Result<MixerOutput> {
    let (batch, n) = match g.shape(q_chosen)[..] {
        [bs, n] => (bs, n),
        _ => return Err(Error::dim("mix", g.shape(q_chosen), &[])),
    };
    let ss = g.shape(state).to_vec();
    if ss.len() != 2 || ss[0] != batch {
        return Err(Error::dim("mix", &ss, &[batch, 0]));
    }
    let embed = g.shape(b.get("mixer.hyper_b1.b")?)[0];

    let w1 = linear(g, b, state, "mixer.hyper_w1")?;
    let w1 = g.abs(w1);
    let w1 = g.reshape(w1, &[batch, n, embed])?;
    let b1 = linear(g, b, state, "mixer.hyper_b1")?;
    let b1 = g.reshape(b1, &[batch, 1, embed])?;
    let q = g.reshape(q_chosen, &[batch, 1, n])?;
    let hidden = g.bmm(q, w1)?;
    let hidden = g.add(hidden, b1)?;
    let hidden = g.elu(hidden);

    let wf = linear(g, b, state, "mixer.hyper_wf")?;
    let wf = g.abs(wf);
    let wf = g.reshape(wf, &[batch, embed, 1])?;
    let y = g.bmm(hidden, wf)?;
    let y = g.reshape(y, &[batch, 1])?;

    let v = linear(g, b, state, "mixer.v1")?;
    let v = g.relu(v);
    let v = linear(g, b, v, "mixer.v2")?;
    let q_tot = g.add(y, v)?;
    let q_tot = g.reshape(q_tot, &[batch])?;
    Ok(MixerOutput { q_tot, w1, wf, v })
}

/// Hard copy of the online parameters into the target network.
pub fn target_sync(online: &ParameterSet, target: &mut ParameterSet) -> Result<()> {
    target.copy_from(online)
}

/// Inputs for `batch` timesteps of `n` agents each.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub batch: usize,
    pub n: usize,
    /// `[batch·n, d_obs]`.
    pub obs: Vec<f64>,
    /// `[batch·n, k·d_obs]`.
    pub windows: Vec<f64>,
    /// Stored edge noise, one entry per timestep.
    pub noise: Vec<EdgeNoise>,
    /// Covariance factors of each timestep's partition.
    pub factors: Vec<Vec<Vec<f64>>>,
}

/// Every intermediate of one joint forward pass.
#[derive(Debug, Clone, Copy)]
pub struct JointForward {
    pub encoded: Var,
    /// Edge means `[batch, n, n]`.
    pub mu: Var,
    pub edges: Var,
    pub c_hat: Var,
    pub messages: Var,
    /// `[batch·n, n_actions]`.
    pub q: Var,
    pub pi: Var,
}

/// Observations to per-agent values: encode, edge means, edges from stored
/// noise, normalized adjacency, message passing, Q heads.
pub fn joint_forward(g: &mut Graph<'_>, b: &Bindings, inputs: &StepBatch) -> Result<JointForward> {
    let (batch, n) = (inputs.batch, inputs.n);
    let rows = batch * n;
    if rows == 0 || inputs.noise.len() != batch || inputs.factors.len() != batch {
        return Err(Error::Contract(format!(
            "step batch of {batch} needs {batch} noise draws and factor sets, got {} and {}",
            inputs.noise.len(),
            inputs.factors.len()
        )));
    }
    let d_obs = inputs.obs.len() / rows;
    let d_win = inputs.windows.len() / rows;
    let obs = g.input(&[rows, d_obs], inputs.obs.clone())?;
    let windows = g.input(&[rows, d_win], inputs.windows.clone())?;

    let encoded = graph::encode_observations(g, b, obs)?;
    let mu = graph::agent_pair_means(g, b, encoded, batch, n)?;
    let mut offsets = Vec::with_capacity(batch * n * n);
    let mut any = false;
    {
        let mu_v = g.value(mu);
        for t in 0..batch {
            let mean = &mu_v[t * n * n..(t + 1) * n * n];
            let r = graph::residual(&inputs.noise[t], mean, &inputs.factors[t])?;
            any |= r.iter().any(|x| *x != 0.0);
            offsets.extend(r);
        }
    }
    let edges = if any {
        let r = g.input(&[batch, n, n], offsets)?;
        g.add(mu, r)?
    } else {
        mu
    };
    let (_, c_hat) = graph::build_adjacency_var(g, edges)?;
    let messages = gnn_forward(g, b, c_hat, encoded)?.messages();
    let out = agent_q_values(g, b, windows, messages)?;
    Ok(JointForward {
        encoded,
        mu,
        edges,
        c_hat,
        messages,
        q: out.q,
        pi: out.pi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;

    fn bind_one<'a>(g: &mut Graph<'a>, p: &'a ParameterSet) -> Bindings {
        g.bind(p, true)
    }

    fn eye_gnn(d: usize, layers: usize) -> ParameterSet {
        let mut p = ParameterSet::new();
        for l in 0..layers {
            p.insert(format!("gnn.layer{l}.w"), Tensor::identity(d)).unwrap();
        }
        p
    }

    #[test]
    fn identity_graph_and_weights_propagate_unchanged() {
        let p = eye_gnn(3, 2);
        let mut g = Graph::new();
        let b = bind_one(&mut g, &p);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let c = g.input(&[1, 3, 3], eye).unwrap();
        let h0 = vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0, 0.0, 0.0, 7.0];
        let h = g.input(&[3, 3], h0.clone()).unwrap();
        let out = gnn_forward(&mut g, &b, c, h).unwrap();
        assert_eq!(out.layers.len(), 3);
        assert_eq!(g.value(out.messages()), &h0[..]);
    }

    #[test]
    fn half_ones_graph_averages_identity_input() {
        let p = eye_gnn(2, 1);
        let mut g = Graph::new();
        let b = bind_one(&mut g, &p);
        let c = g.input(&[1, 2, 2], vec![0.5; 4]).unwrap();
        let h = g.input(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = gnn_forward(&mut g, &b, c, h).unwrap();
        assert_eq!(g.value(out.layers[1]), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_input_gives_zero_messages_and_widths_are_checked() {
        let mut rng = RngStream::new(1, 0);
        let mut p = ParameterSet::new();
        p.insert("gnn.layer0.w", Tensor::uniform_init(&[4, 4], 4, &mut rng)).unwrap();
        let mut g = Graph::new();
        let b = bind_one(&mut g, &p);
        let c = g.input(&[1, 2, 2], vec![0.5; 4]).unwrap();
        let h = g.input(&[2, 4], vec![0.0; 8]).unwrap();
        let out = gnn_forward(&mut g, &b, c, h).unwrap();
        assert!(g.value(out.messages()).iter().all(|v| *v == 0.0));
        let bad = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        match gnn_forward(&mut g, &b, c, bad) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "gnn_forward"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_diagonal_graph_isolates_components() {
        let mut rng = RngStream::new(4, 0);
        let mut p = ParameterSet::new();
        for l in 0..2 {
            p.insert(format!("gnn.layer{l}.w"), Tensor::uniform_init(&[3, 3], 3, &mut rng))
                .unwrap();
        }
        // Components {0, 1} and {2, 3}.
        let mut c = vec![0.0; 16];
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)] {
            c[i * 4 + j] = 0.5;
        }
        let h0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let run = |h: Vec<f64>| {
            let mut g = Graph::new();
            let b = g.bind(&p, false);
            let cv = g.input(&[1, 4, 4], c.clone()).unwrap();
            let hv = g.input(&[4, 3], h).unwrap();
            let m = gnn_forward(&mut g, &b, cv, hv).unwrap().messages();
            g.value(m).to_vec()
        };
        let base = run(h0.clone());
        let mut bumped = h0;
        for v in &mut bumped[6..9] {
            *v += 3.0;
        }
        let after = run(bumped);
        assert_eq!(&base[..6], &after[..6]);
        assert_ne!(&base[6..], &after[6..]);
    }

    fn head_params(d_win: usize, d_h: usize, rng: &mut RngStream) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("agent.fc1_window.w", Tensor::uniform_init(&[d_win, 5], d_win + d_h, rng))
            .unwrap();
        p.insert("agent.fc1_msg.w", Tensor::uniform_init(&[d_h, 5], d_win + d_h, rng)).unwrap();
        p.insert("agent.fc1.b", Tensor::uniform_init(&[5], d_win + d_h, rng)).unwrap();
        p.insert("agent.fc2.w", Tensor::uniform_init(&[5, N_ACTIONS], 5, rng)).unwrap();
        p.insert("agent.fc2.b", Tensor::uniform_init(&[N_ACTIONS], 5, rng)).unwrap();
        p
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let mut p = head_params(4, 2, &mut RngStream::new(0, 0));
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = g.bind(&p, false);
        let w = g.input(&[3, 4], vec![1.0; 12]).unwrap();
        let m = g.input(&[3, 2], vec![-2.0; 6]).unwrap();
        let out = agent_q_values(&mut g, &b, w, m).unwrap();
        assert!(g.value(out.pi).iter().all(|v| *v == 0.2));
    }

    #[test]
    fn policy_rows_are_distributions_and_shift_invariant() {
        let mut rng = RngStream::new(3, 0);
        let p = head_params(4, 2, &mut rng);
        let mut shifted = p.clone();
        for v in shifted.get_mut("agent.fc2.b").unwrap().data_mut() {
            *v += 7.5;
        }
        let pis: Vec<Vec<f64>> = [&p, &shifted]
            .iter()
            .map(|params| {
                let mut g = Graph::new();
                let b = g.bind(params, false);
                let w = g.input(&[3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
                let m = g.input(&[3, 2], vec![0.3, -0.4, 0.1, 0.9, -1.0, 0.2]).unwrap();
                let out = agent_q_values(&mut g, &b, w, m).unwrap();
                g.value(out.pi).to_vec()
            })
            .collect();
        for row in pis[0].chunks(N_ACTIONS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (a, b) in pis[0].iter().zip(&pis[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn q_head_gradients_through_window_and_message() {
        let mut rng = RngStream::new(8, 0);
        let mut p = head_params(4, 3, &mut rng);
        p.insert("in.window", Tensor::uniform_init(&[2, 4], 1, &mut rng)).unwrap();
        p.insert("in.message", Tensor::uniform_init(&[2, 3], 1, &mut rng)).unwrap();
        let f = |g: &mut Graph<'_>, b: &Bindings| {
            let out = agent_q_values(g, b, b.get("in.window")?, b.get("in.message")?)?;
            let sq = g.mul(out.q, out.pi)?;
            Ok(g.sum(sq))
        };
        let err = grad_check(f, &p, 1e-6).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn greedy_selection_breaks_ties_low() {
        let mut rng = RngStream::new(0, 0);
        let q = [1.0, 1.0, 0.0, 0.0, 0.0, 0.3, 0.2, 0.9, 0.9, -1.0];
        assert_eq!(select_actions(&q, 5, 0.0, &mut rng).unwrap(), vec![0, 2]);
        assert_eq!(select_actions(&[1.0, 1.0], 2, 0.0, &mut rng).unwrap(), vec![0]);
        assert!(matches!(select_actions(&q, 5, 1.5, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = RngStream::new(11, 0);
        let q = [0.0, 5.0, 0.0, 0.0, 0.0];
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[select_actions(&q, 5, 1.0, &mut rng).unwrap()[0]] += 1;
        }
        let p = 0.2;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    fn mixer_params(n: usize, s: usize, rng: &mut RngStream) -> ParameterSet {
        let mut p = ParameterSet::new();
        let dims = Dims {
            n_agents: n,
            d_obs: 2,
            k: 1,
            state_dim: s,
        };
        let model = ModelConfig {
            mixer_embed: 4,
            ..ModelConfig::default()
        };
        init_params(&mut p, dims, &model, rng).unwrap();
        p
    }

    fn q_tot(p: &ParameterSet, q: &[f64], s: &[f64]) -> f64 {
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let qv = g.input(&[1, q.len()], q.to_vec()).unwrap();
        let sv = g.input(&[1, s.len()], s.to_vec()).unwrap();
        let out = mix(&mut g, &b, qv, sv).unwrap();
        g.scalar(out.q_tot)
    }

    #[test]
    fn zero_hypernetworks_leave_state_value() {
        let mut rng = RngStream::new(2, 0);
        let mut p = mixer_params(3, 4, &mut rng);
        for name in ["hyper_w1", "hyper_b1", "hyper_wf"] {
            for part in ["w", "b"] {
                p.get_mut(&format!("mixer.{name}.{part}")).unwrap().data_mut().fill(0.0);
            }
        }
        let s = [0.1, 0.5, -0.3, 0.9];
        let mut g = Graph::new();
        let b = g.bind(&p, false);
        let qv = g.input(&[1, 3], vec![4.0, -2.0, 9.0]).unwrap();
        let sv = g.input(&[1, 4], s.to_vec()).unwrap();
        let out = mix(&mut g, &b, qv, sv).unwrap();
        assert_eq!(g.scalar(out.q_tot), g.scalar(out.v));
    }

    #[test]
    fn mixer_is_monotone_in_every_agent_value() {
        let mut rng = RngStream::new(6, 0);
        let (n, s_dim) = (4, 5);
        let eps = 1e-6;
        for probe in 0..200 {
            let p = mixer_params(n, s_dim, &mut rng);
            let q: Vec<f64> = (0..n).map(|_| 4.0 * rng.normal()).collect();
            let s: Vec<f64> = (0..s_dim).map(|_| rng.normal()).collect();
            for i in 0..n {
                let mut up = q.clone();
                up[i] += eps;
                let mut down = q.clone();
                down[i] -= eps;
                let fd = (q_tot(&p, &up, &s) - q_tot(&p, &down, &s)) / (2.0 * eps);
                assert!(fd >= -1e-9, "probe {probe} agent {i}: {fd}");
                let mut coarse = q.clone();
                coarse[i] += 1.0;
                assert!(q_tot(&p, &coarse, &s) >= q_tot(&p, &q, &s));
            }
        }
    }

    #[test]
    fn sync_copies_and_isolates() {
        let mut rng = RngStream::new(9, 0);
        let mut online = mixer_params(2, 3, &mut rng);
        let mut target = online.zeros_like();
        target_sync(&online, &mut target).unwrap();
        assert_eq!(online.max_abs_diff(&target).unwrap(), 0.0);
        online.get_mut("mixer.v2.b").unwrap().data_mut()[0] += 1.0;
        assert_eq!(
            target.get("mixer.v2.b").unwrap().data()[0] + 1.0,
            online.get("mixer.v2.b").unwrap().data()[0]
        );
        let mut other = ParameterSet::new();
        other.insert("x", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(target_sync(&online, &mut other), Err(Error::Contract(_))));
    }
}
