//! Run configuration. Every section rejects unknown keys and materializes
//! its defaults, so the persisted effective config fully determines a run.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub agent_hidden: usize,
    pub gnn_layers: usize,
    pub mixer_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            d_h: 32,
            d_k: 32,
            agent_hidden: 64,
            gnn_layers: 2,
            mixer_embed: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    Gacg,
    Attention,
    Bernoulli,
    IndeGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// `vec(M) vec(M)ᵀ`: every intra-group edge shares one noise draw.
    Rank1,
    /// One factor per group: edges of different groups are independent.
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub mode: EdgeMode,
    pub sigma2: f64,
    pub covariance: Covariance,
    /// Extra per-edge variance, applied in `inde_gaussian` mode only.
    pub jitter: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mode: EdgeMode::Gacg,
            sigma2: 0.25,
            covariance: Covariance::Rank1,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    /// Number of groups; 0 disables grouping altogether.
    pub m: usize,
    /// Observation window length.
    pub k: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self { m: 2, k: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLossScope {
    All,
    PolicyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_episodes: usize,
    pub buffer_capacity: usize,
    pub target_period: usize,
    pub total_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_interval: usize,
    pub group_loss_scope: GroupLossScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.95,
            lr: 5e-4,
            grad_clip: 10.0,
            batch_episodes: 8,
            buffer_capacity: 500,
            target_period: 200,
            total_steps: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 10_000,
            eval_interval: 500,
            eval_episodes: 20,
            checkpoint_interval: 10_000,
            group_loss_scope: GroupLossScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub group: GroupConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub run_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            group: GroupConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            run_id: "run".into(),
        }
    }
}

fn config_err(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Pulls the offending key out of serde's "unknown field `x`" message.
fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Walks `value` to find where deserialization fails so the error names the
/// full dotted key.
fn locate_error(value: &Value, prefix: &str) -> Option<Error> {
    let sections: [(&str, fn(&Value) -> std::result::Result<(), serde_json::Error>); 5] = [
        ("env", |v| serde_json::from_value::<EnvConfig>(v.clone()).map(|_| ())),
        ("model", |v| serde_json::from_value::<ModelConfig>(v.clone()).map(|_| ())),
        ("graph", |v| serde_json::from_value::<GraphConfig>(v.clone()).map(|_| ())),
        ("group", |v| serde_json::from_value::<GroupConfig>(v.clone()).map(|_| ())),
        ("train", |v| serde_json::from_value::<TrainConfig>(v.clone()).map(|_| ())),
    ];
    let obj = value.as_object()?;
    for (name, check) in sections {
        if let Some(section) = obj.get(name) {
            if let Err(e) = check(section) {
                let msg = e.to_string();
                let key = match unknown_key(&msg) {
                    Some(k) => format!("{prefix}{name}.{k}"),
                    None => format!("{prefix}{name}"),
                };
                return Some(config_err(key, msg));
            }
        }
    }
    None
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        match serde_json::from_value::<RunConfig>(value.clone()) {
            Ok(c) => {
                c.validate()?;
                Ok(c)
            }
            Err(e) => {
                if let Some(err) = locate_error(&value, "") {
                    return Err(err);
                }
                let msg = e.to_string();
                let key = unknown_key(&msg).unwrap_or_else(|| "<root>".into());
                Err(config_err(key, msg))
            }
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| config_err("<file>", e.to_string()))?;
        Self::from_value(value)
    }

    /// Parses `text`, then applies `key=value` overrides (dotted keys, JSON
    /// or bare-string values) before validation.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| config_err("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let t = &self.train;
        if !(0.0..1.0).contains(&t.gamma) {
            return Err(config_err("train.gamma", "must lie in [0, 1)"));
        }
        if t.lambda < 0.0 {
            return Err(config_err("train.lambda", "must be non-negative"));
        }
        if !(t.lr > 0.0) {
            return Err(config_err("train.lr", "must be positive"));
        }
        for (key, v) in [("train.epsilon_start", t.epsilon_start), ("train.epsilon_end", t.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(key, "must lie in [0, 1]"));
            }
        }
        for (key, v) in [
            ("train.batch_episodes", t.batch_episodes),
            ("train.buffer_capacity", t.buffer_capacity),
            ("train.target_period", t.target_period),
            ("train.eval_interval", t.eval_interval),
            ("train.checkpoint_interval", t.checkpoint_interval),
            ("group.k", self.group.k),
            ("model.d_h", self.model.d_h),
            ("model.d_k", self.model.d_k),
            ("model.encoder_hidden", self.model.encoder_hidden),
            ("model.agent_hidden", self.model.agent_hidden),
            ("model.mixer_embed", self.model.mixer_embed),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        if t.batch_episodes > t.buffer_capacity {
            return Err(config_err("train.batch_episodes", "exceeds buffer_capacity"));
        }
        if !(0.0..=1.0).contains(&self.graph.sigma2) {
            return Err(config_err("graph.sigma2", "must lie in [0, 1]"));
        }
        if self.graph.jitter < 0.0 {
            return Err(config_err("graph.jitter", "must be non-negative"));
        }
        Ok(())
    }

    /// Group count actually used for clustering: `m` capped at the number
    /// of agents, or `None` when grouping is disabled.
    pub fn effective_groups(&self) -> Option<usize> {
        match self.group.m {
            0 => None,
            m => Some(m.min(self.env.n_agents)),
        }
    }

    /// Edge source after the `m = 0` override.
    pub fn effective_mode(&self) -> EdgeMode {
        if self.group.m == 0 {
            EdgeMode::Attention
        } else {
            self.graph.mode
        }
    }

    /// Group-loss weight after the `m = 0` override.
    pub fn effective_lambda(&self) -> f64 {
        if self.group.m == 0 {
            0.0
        } else {
            self.train.lambda
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Sets `a.b.c=value` inside a JSON object tree, creating sections as needed.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like key=value"))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(key, "path crosses a non-object value"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
