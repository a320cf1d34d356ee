//! Coordination-graph inference.
//!
//! Observations are encoded by a shared MLP, pairwise attention turns the
//! encodings into edge means, k-means over observation windows splits the
//! agents into groups, and the resulting agent-group matrix supplies the
//! covariance of a Gaussian over all `n²` edges. The covariance
//! `vec(M) vec(M)ᵀ` has rank one, so a sample is `μ + z·vec(M)` for a single
//! scalar `z ~ N(0, 1)`; the `n² × n²` matrix is only ever materialized in
//! tests.

use serde::{Deserialize, Serialize};

use crate::config::{Covariance, EdgeMode, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::kmeans::kmeans;
use crate::numerics::{Bindings, Graph, ParameterSet, RngStream, Tensor, Var};

pub fn init_params(
    params: &mut ParameterSet,
    d_obs: usize,
    model: &ModelConfig,
    rng: &mut RngStream,
) -> Result<()> {
    let (h, d_h, d_k) = (model.encoder_hidden, model.d_h, model.d_k);
    params.insert("encoder.fc1.w", Tensor::uniform_init(&[d_obs, h], d_obs, rng))?;
    params.insert("encoder.fc1.b", Tensor::uniform_init(&[h], d_obs, rng))?;
    params.insert("encoder.fc2.w", Tensor::uniform_init(&[h, d_h], h, rng))?;
    params.insert("encoder.fc2.b", Tensor::uniform_init(&[d_h], h, rng))?;
    params.insert("attention.w_q", Tensor::uniform_init(&[d_h, d_k], d_h, rng))?;
    params.insert("attention.w_k", Tensor::uniform_init(&[d_h, d_k], d_h, rng))?;
    Ok(())
}

/// Shared two-layer ReLU MLP, `[rows, d_obs] -> [rows, d_h]`.
pub fn encode_observations(g: &mut Graph<'_>, b: &Bindings, obs: Var) -> Result<Var> {
    let w1 = b.get("encoder.fc1.w")?;
    if g.shape(obs).len() != 2 || g.shape(obs)[1] != g.shape(w1)[0] {
        return Err(Error::dim("encode_observations", g.shape(obs), g.shape(w1)));
    }
    let h = g.matmul(obs, w1)?;
    let h = g.add_row(h, b.get("encoder.fc1.b")?)?;
    let h = g.relu(h);
    let h = g.matmul(h, b.get("encoder.fc2.w")?)?;
    let h = g.add_row(h, b.get("encoder.fc2.b")?)?;
    Ok(g.relu(h))
}

/// Scaled dot-product attention scores squashed by a sigmoid and
/// symmetrized: `[batch·n, d_h] -> [batch, n, n]`, entries in (0, 1).
pub fn agent_pair_means(
    g: &mut Graph<'_>,
    b: &Bindings,
    encoded: Var,
    batch: usize,
    n: usize,
) -> Result<Var> {
    let wq = b.get("attention.w_q")?;
    let wk = b.get("attention.w_k")?;
    let d_k = g.shape(wq)[1];
    let q = g.matmul(encoded, wq)?;
    let k = g.matmul(encoded, wk)?;
    let q = g.reshape(q, &[batch, n, d_k])?;
    let k = g.reshape(k, &[batch, n, d_k])?;
    let kt = g.transpose(k)?;
    let s = g.bmm(q, kt)?;
    let s = g.scale(s, 1.0 / (d_k as f64).sqrt());
    let mu = g.sigmoid(s);
    let mut_ = g.transpose(mu)?;
    let sum = g.add(mu, mut_)?;
    Ok(g.scale(sum, 0.5))
}

/// Disjoint cover of the agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub labels: Vec<usize>,
    pub m: usize,
    pub k: usize,
}

impl GroupPartition {
    /// Every agent in one group.
    pub fn single(n: usize, k: usize) -> Self {
        Self {
            labels: vec![0; n],
            m: 1,
            k,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.m];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let sizes_ok = self.labels.iter().all(|&l| l < self.m);
        if self.m == 0 || !sizes_ok || self.sizes().iter().any(|&s| s == 0) {
            return Err(Error::Contract(format!(
                "labels {:?} are not a partition into {} groups",
                self.labels, self.m
            )));
        }
        Ok(())
    }
}

/// Clusters agents by their flattened observation windows.
pub fn divide_groups(
    windows: &[Vec<f64>],
    m: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<GroupPartition> {
    let n = windows.len();
    if m < 1 || m > n {
        return Err(Error::Parameter(format!("group count {m} outside [1, {n}]")));
    }
    let labels = kmeans(windows, m, rng)?;
    Ok(GroupPartition { labels, m, k })
}

/// `M_ij = 1` iff agents `i` and `j` share a group; row-major `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGroupMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

pub fn agent_group_matrix(p: &GroupPartition) -> AgentGroupMatrix {
    let n = p.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if p.labels[i] == p.labels[j] {
                data[i * n + j] = 1.0;
            }
        }
    }
    AgentGroupMatrix { n, data }
}

/// `vec(M) vec(M)ᵀ`, kept as its factor `v = vec(M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGroupMatrix {
    pub v: Vec<f64>,
}

impl EdgeGroupMatrix {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.v[i] * self.v[j]
    }

    /// Dense `n² × n²` matrix. Quartic in the agent count.
    pub fn materialize(&self) -> Vec<f64> {
        let len = self.v.len();
        let mut out = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                out[i * len + j] = self.v[i] * self.v[j];
            }
        }
        out
    }
}

pub fn edge_group_matrix(m: &AgentGroupMatrix) -> EdgeGroupMatrix {
    EdgeGroupMatrix { v: m.data.clone() }
}

/// Covariance factors `Σ = Σ_f v_f v_fᵀ` for the chosen covariance form.
pub fn covariance_factors(p: &GroupPartition, form: Covariance) -> Vec<Vec<f64>> {
    match form {
        Covariance::Rank1 => vec![edge_group_matrix(&agent_group_matrix(p)).v],
        Covariance::Block => {
            let n = p.n();
            (0..p.m)
                .map(|grp| {
                    let mut v = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            if p.labels[i] == grp && p.labels[j] == grp {
                                v[i * n + j] = 1.0;
                            }
                        }
                    }
                    v
                })
                .collect()
        }
    }
}

/// Mean edge vector and low-rank covariance factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistribution {
    pub mean: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
}

impl EdgeDistribution {
    pub fn rank1(mean: Vec<f64>, v: Vec<f64>) -> Self {
        Self {
            mean,
            factors: vec![v],
        }
    }

    /// Dense covariance entry `Σ_ij`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        self.factors.iter().map(|v| v[i] * v[j]).sum()
    }
}

/// Random draws behind one sampled graph. Stored per timestep so training
/// rebuilds exactly the graph that was acted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EdgeNoise {
    /// Deterministic edges.
    None,
    /// One standard normal per covariance factor.
    Shared(Vec<f64>),
    /// One standard normal per edge, scaled by `std`.
    Independent { z: Vec<f64>, std: f64 },
    /// One uniform per edge for Bernoulli edges.
    Uniform(Vec<f64>),
}

pub fn draw_noise(
    mode: EdgeMode,
    n_edges: usize,
    n_factors: usize,
    variance: f64,
    rng: &mut RngStream,
) -> EdgeNoise {
    match mode {
        EdgeMode::Gacg => EdgeNoise::Shared(rng.standard_normal(n_factors)),
        EdgeMode::Attention => EdgeNoise::None,
        EdgeMode::Bernoulli => EdgeNoise::Uniform((0..n_edges).map(|_| rng.uniform()).collect()),
        EdgeMode::IndeGaussian => EdgeNoise::Independent {
            z: rng.standard_normal(n_edges),
            std: variance.sqrt(),
        },
    }
}

/// `e - μ` for a given noise draw. Gradients treat this as a constant, so
/// `∂e/∂μ = I` in every mode (straight-through for Bernoulli edges).
pub fn residual(noise: &EdgeNoise, mean: &[f64], factors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = mean.len();
    let mut out = vec![0.0; len];
    match noise {
        EdgeNoise::None => {}
        EdgeNoise::Shared(z) => {
            if z.len() != factors.len() {
                return Err(Error::dim("residual", &[z.len()], &[factors.len()]));
            }
            for (zf, v) in z.iter().zip(factors) {
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += zf * vi;
                }
            }
        }
        EdgeNoise::Independent { z, std } => {
            if z.len() != len {
                return Err(Error::dim("residual", &[z.len()], &[len]));
            }
            for (o, zi) in out.iter_mut().zip(z) {
                *o = std * zi;
            }
        }
        EdgeNoise::Uniform(u) => {
            if u.len() != len {
                return Err(Error::dim("residual", &[u.len()], &[len]));
            }
            for ((o, ui), mi) in out.iter_mut().zip(u).zip(mean) {
                let bit = if ui < mi { 1.0 } else { 0.0 };
                *o = bit - mi;
            }
        }
    }
    Ok(out)
}

/// One draw of the edge vector together with its residual `e - μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSample {
    pub edges: Vec<f64>,
    pub residual: Vec<f64>,
    pub noise: EdgeNoise,
}

/// Exact draw from `N(μ, Σ_f v_f v_fᵀ)` as `μ + Σ_f z_f v_f`.
pub fn sample_edges(dist: &EdgeDistribution, rng: &mut RngStream) -> Result<EdgeSample> {
    let noise = EdgeNoise::Shared(rng.standard_normal(dist.factors.len()));
    let residual = residual(&noise, &dist.mean, &dist.factors)?;
    let edges = dist.mean.iter().zip(&residual).map(|(m, d)| m + d).collect();
    Ok(EdgeSample {
        edges,
        residual,
        noise,
    })
}

/// Edge vector under one of the edge-source variants.
pub fn ablation_edge_source(
    mode: EdgeMode,
    mean: &[f64],
    v: &[f64],
    sigma2: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if mode == EdgeMode::Gacg {
        let dist = EdgeDistribution::rank1(mean.to_vec(), v.to_vec());
        return Ok(sample_edges(&dist, rng)?.edges);
    }
    let noise = draw_noise(mode, mean.len(), 1, sigma2, rng);
    let r = residual(&noise, mean, &[v.to_vec()])?;
    Ok(mean.iter().zip(&r).map(|(m, d)| m + d).collect())
}

/// Adjacency `C` and its normalized form `Ĉ = D̃^{-1/2} C D̃^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationGraph {
    pub n: usize,
    pub c: Vec<f64>,
    pub c_hat: Vec<f64>,
}

/// Differentiable adjacency construction over a batch of edge tensors
/// `[batch, n, n]`: clamp to [0, 1], symmetrize, unit diagonal, normalize.
pub fn build_adjacency_var(g: &mut Graph<'_>, edges: Var) -> Result<(Var, Var)> {
    let shape = g.shape(edges).to_vec();
    let (batch, n) = match shape[..] {
        [b, r, c] if r == c => (b, r),
        _ => return Err(Error::dim("build_adjacency", &shape, &[])),
    };
    let c = g.clamp01(edges);
    let ct = g.transpose(c)?;
    let c = g.add(c, ct)?;
    let c = g.scale(c, 0.5);
    let mut off = vec![1.0; batch * n * n];
    let mut eye = vec![0.0; batch * n * n];
    for b in 0..batch {
        for i in 0..n {
            off[b * n * n + i * n + i] = 0.0;
            eye[b * n * n + i * n + i] = 1.0;
        }
    }
    let off = g.input(&shape, off)?;
    let eye = g.input(&shape, eye)?;
    let c = g.mul(c, off)?;
    let c = g.add(c, eye)?;
    let degree = g.sum_last(c);
    let inv_sqrt = g.powf(degree, -0.5);
    let col = g.reshape(inv_sqrt, &[batch, n, 1])?;
    let row = g.reshape(inv_sqrt, &[batch, 1, n])?;
    let scale = g.bmm(col, row)?;
    let c_hat = g.mul(c, scale)?;
    Ok((c, c_hat))
}

/// Value-level form of [`build_adjacency_var`] for one edge vector.
pub fn build_adjacency(edges: &[f64], n: usize) -> Result<CoordinationGraph> {
    if edges.len() != n * n {
        return Err(Error::dim("build_adjacency", &[edges.len()], &[n, n]));
    }
    let mut g = Graph::new();
    let e = g.input(&[1, n, n], edges.to_vec())?;
    let (c, c_hat) = build_adjacency_var(&mut g, e)?;
    Ok(CoordinationGraph {
        n,
        c: g.value(c).to_vec(),
        c_hat: g.value(c_hat).to_vec(),
    })
}
