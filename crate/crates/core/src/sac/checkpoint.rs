//! Agent checkpoints: a JSON manifest plus one network file per parameter vector.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SacAgent, SacConfig, SacError};
use crate::nn::{load_checkpoint, save_checkpoint, Adam};
use crate::scalar::Scalar;

pub const MANIFEST_SCHEMA: &str = "startsel.agent-manifest";
pub const MANIFEST_VERSION: u32 = 1;

const NETWORKS: [&str; 5] = ["policy", "q1", "q2", "q1_target", "q2_target"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentManifest {
    pub schema: String,
    pub version: u32,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_scale: Vec<f64>,
    pub log_alpha: f64,
    pub config: SacConfig,
    /// Network name -> file name relative to the manifest.
    pub networks: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Write `<dir>/<stem>.ckpt` and its network files; returns the manifest path.
pub fn save_agent<T: Scalar>(
    agent: &SacAgent<T>,
    dir: &Path,
    stem: &str,
    meta: BTreeMap<String, String>,
) -> Result<PathBuf, SacError> {
    fs::create_dir_all(dir)?;
    let mut networks = BTreeMap::new();
    for name in NETWORKS {
        let file = format!("{stem}.{name}.net");
        let (spec, params) = match name {
            "policy" => (&agent.policy_spec, &agent.policy),
            "q1" => (&agent.critic_spec, &agent.q1),
            "q2" => (&agent.critic_spec, &agent.q2),
            "q1_target" => (&agent.critic_spec, &agent.q1_target),
            _ => (&agent.critic_spec, &agent.q2_target),
        };
        save_checkpoint(&dir.join(&file), spec, params)?;
        networks.insert(name.to_string(), file);
    }
    let manifest = AgentManifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        obs_dim: agent.obs_dim,
        action_dim: agent.action_dim,
        action_scale: agent.action_scale.iter().map(|v| v.as_f64()).collect(),
        log_alpha: agent.log_alpha.as_f64(),
        config: agent.config.clone(),
        networks,
        meta,
    };
    let path = dir.join(format!("{stem}.ckpt"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SacError::Checkpoint(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<AgentManifest, SacError> {
    let text = fs::read_to_string(path)?;
    let m: AgentManifest =
        serde_json::from_str(&text).map_err(|e| SacError::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
        return Err(SacError::Checkpoint(format!(
            "unsupported manifest {} v{} (expected {MANIFEST_SCHEMA} v{MANIFEST_VERSION})",
            m.schema, m.version
        )));
    }
    Ok(m)
}

/// Load an agent from a manifest. Optimizer moments are not persisted and start fresh.
pub fn load_agent<T: Scalar>(path: &Path) -> Result<(SacAgent<T>, AgentManifest), SacError> {
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let scale: Vec<T> = m.action_scale.iter().map(|&v| T::lit(v)).collect();
    let mut agent = SacAgent::<T>::new(m.obs_dim, scale, m.config.clone(), &mut crate::rng::rng_from(0))?;
    for name in NETWORKS {
        let file = m
            .networks
            .get(name)
            .ok_or_else(|| SacError::Checkpoint(format!("manifest lacks network `{name}`")))?;
        let (spec, params) = load_checkpoint::<T>(&dir.join(file))?;
        let (want, slot) = match name {
            "policy" => (&agent.policy_spec, &mut agent.policy),
            "q1" => (&agent.critic_spec, &mut agent.q1),
            "q2" => (&agent.critic_spec, &mut agent.q2),
            "q1_target" => (&agent.critic_spec, &mut agent.q1_target),
            _ => (&agent.critic_spec, &mut agent.q2_target),
        };
        if &spec != want {
            return Err(SacError::Checkpoint(format!(
                "network `{name}` has shape {spec:?}, manifest config implies {want:?}"
            )));
        }
        *slot = params;
    }
    agent.log_alpha = T::lit(m.log_alpha);
    agent.reset_optimizers();
    Ok((agent, m))
}

impl<T: Scalar> SacAgent<T> {
    pub fn reset_optimizers(&mut self) {
        self.policy_opt = Adam::new(self.policy.len());
        self.q1_opt = Adam::new(self.q1.len());
        self.q2_opt = Adam::new(self.q2.len());
        self.alpha_opt = Adam::new(1);
    }
}
