//! Per-environment computational overhead of gp-condition runs relative to
//! the default baseline.

use std::collections::{BTreeMap, BTreeSet};

use crate::records::{fmt_real, RunRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadRow {
    pub env_id: String,
    pub baseline_episode_ms: f64,
    pub selection_ms: f64,
    pub gp_episode_ms: f64,
    /// `(selection + episode wall) / baseline episode wall`, episode means.
    pub ratio: f64,
    pub baseline_episodes: usize,
    pub gp_episodes: usize,
}

pub const OVERHEAD_COLUMNS: [&str; 7] = [
    "env_id",
    "baseline_episode_ms",
    "selection_ms",
    "gp_episode_ms",
    "ratio",
    "baseline_episodes",
    "gp_episodes",
];

impl OverheadRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.env_id.clone(),
            fmt_real(self.baseline_episode_ms),
            fmt_real(self.selection_ms),
            fmt_real(self.gp_episode_ms),
            fmt_real(self.ratio),
            self.baseline_episodes.to_string(),
            self.gp_episodes.to_string(),
        ]
    }
}

fn counts(row: &RunRow) -> bool {
    row.selection_branch != "warmup" && row.selection_branch != "abort"
}

/// Warmup and aborted episodes are excluded.
pub fn report_overhead(rows: &[RunRow]) -> Result<Vec<OverheadRow>, HarnessError> {
    let mut by_env: BTreeMap<&str, (Vec<f64>, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| counts(r)) {
        let entry = by_env.entry(&r.env_id).or_default();
        match r.strategy.as_str() {
            "default" => entry.0.push(r.wall_ms),
            "gp-condition" => entry.1.push((r.selection_overhead_ms, r.wall_ms)),
            _ => {}
        }
    }
    let mut missing = BTreeSet::new();
    if by_env.values().all(|(b, _)| b.is_empty()) {
        missing.insert("missing default runs".to_string());
    }
    if by_env.values().all(|(_, g)| g.is_empty()) {
        missing.insert("missing gp-condition runs".to_string());
    }
    for (env, (b, g)) in &by_env {
        if b.is_empty() != g.is_empty() {
            let which = if b.is_empty() { "default" } else { "gp-condition" };
            missing.insert(format!("missing {which} runs for {env}"));
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::Coverage(missing.into_iter().collect::<Vec<_>>().join("; ")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(by_env
        .into_iter()
        .filter(|(_, (b, g))| !b.is_empty() && !g.is_empty())
        .map(|(env, (b, g))| {
            let baseline = mean(&b);
            let sel: Vec<f64> = g.iter().map(|p| p.0).collect();
            let wall: Vec<f64> = g.iter().map(|p| p.1).collect();
            let (s, w) = (mean(&sel), mean(&wall));
            OverheadRow {
                env_id: env.to_string(),
                baseline_episode_ms: baseline,
                selection_ms: s,
                gp_episode_ms: w,
                ratio: (s + w) / baseline,
                baseline_episodes: b.len(),
                gp_episodes: g.len(),
            }
        })
        .collect())
}
