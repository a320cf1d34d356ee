//! Ablation suites over one configuration axis.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{EdgeMode, GroupLossScope, RunConfig};
use crate::error::{Error, Result};
use crate::harness::metrics::{self, MetricsRow};
use crate::harness::train::{run_training, METRICS_FILE};

/// Evaluation rows averaged into a run's final score.
pub const FINAL_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Distribution,
    GroupLoss,
    GroupCount,
    WindowLength,
}

impl Axis {
    pub const ALL: [Axis; 4] = [
        Axis::Distribution,
        Axis::GroupLoss,
        Axis::GroupCount,
        Axis::WindowLength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Distribution => "distribution",
            Axis::GroupLoss => "group_loss",
            Axis::GroupCount => "group_count",
            Axis::WindowLength => "window_length",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config {
                key: "axis".into(),
                reason: format!(
                    "unknown axis `{s}`, expected one of distribution, group_loss, group_count, window_length"
                ),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

fn variant(base: &RunConfig, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant {
        name: name.into(),
        config,
    }
}

/// Configs for every variant on `axis`, derived from `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Vec<Variant> {
    match axis {
        Axis::Distribution => {
            let mut out: Vec<Variant> = [
                ("gacg", EdgeMode::Gacg),
                ("attention", EdgeMode::Attention),
                ("bernoulli", EdgeMode::Bernoulli),
                ("inde_gaussian", EdgeMode::IndeGaussian),
            ]
            .into_iter()
            .map(|(name, mode)| variant(base, name, |c| c.graph.mode = mode))
            .collect();
            out.push(variant(base, "gacg_no_lg", |c| {
                c.graph.mode = EdgeMode::Gacg;
                c.train.lambda = 0.0;
            }));
            out
        }
        Axis::GroupLoss => vec![
            variant(base, "all", |c| c.train.group_loss_scope = GroupLossScope::All),
            variant(base, "policy_only", |c| {
                c.train.group_loss_scope = GroupLossScope::PolicyOnly
            }),
            variant(base, "no_lg", |c| c.train.lambda = 0.0),
        ],
        Axis::GroupCount => [0, 2, 4, 8]
            .into_iter()
            .map(|m| variant(base, &format!("m{m}"), |c| c.group.m = m))
            .collect(),
        Axis::WindowLength => [1, 5, 10, 20]
            .into_iter()
            .map(|k| variant(base, &format!("k{k}"), |c| c.group.k = k))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub axis: String,
    pub variant: String,
    pub seed: u64,
    /// Group count after capping at the number of agents; 0 when off.
    pub effective_m: usize,
    pub env_steps: u64,
    /// Mean over the last [`FINAL_WINDOW`] evaluation rows.
    pub final_capture_rate: f64,
    pub final_mean_return: f64,
}

/// Mean capture rate and return over the last [`FINAL_WINDOW`] rows.
pub fn final_scores(rows: &[MetricsRow]) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(Error::Contract("run produced no evaluation rows".into()));
    }
    let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
    let n = tail.len() as f64;
    Ok((
        tail.iter().map(|r| r.capture_rate).sum::<f64>() / n,
        tail.iter().map(|r| r.mean_return).sum::<f64>() / n,
    ))
}

/// Runs every variant of `axis` for every seed under `out/<axis>/`, then
/// writes `out/<axis>/comparison.csv`. With `resume`, finished runs are
/// picked up from their checkpoints instead of being retrained.
pub fn run_ablation_suite(
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    out: &Path,
    resume: bool,
) -> Result<Vec<ComparisonRow>> {
    if seeds.is_empty() {
        return Err(Error::Parameter("at least one seed is required".into()));
    }
    let root = out.join(axis.name());
    fs::create_dir_all(&root)?;
    let mut rows = Vec::new();
    for v in variants(base, axis) {
        for &seed in seeds {
            let mut run = v.config.clone();
            run.seed = seed;
            run.run_id = format!("{axis}-{}-s{seed}", v.name);
            run.validate()?;
            let dir = root.join(&v.name).join(format!("seed_{seed}"));
            info!("ablation {axis}: variant {} seed {seed}", v.name);
            let summary = run_training(&run, &dir, resume)?;
            let history: Vec<MetricsRow> = metrics::read_rows(&dir.join(METRICS_FILE))?;
            let (capture, ret) = final_scores(&history)?;
            rows.push(ComparisonRow {
                axis: axis.name().into(),
                variant: v.name.clone(),
                seed,
                effective_m: run.effective_groups().unwrap_or(0),
                env_steps: summary.env_steps,
                final_capture_rate: capture,
                final_mean_return: ret,
            });
        }
    }
    let mut w = csv::Writer::from_path(root.join("comparison.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
