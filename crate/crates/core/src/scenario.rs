//! Simulation configuration.
//!
//! Scenarios are TOML documents. Unknown keys are rejected, every section
//! except `participants` has defaults, and `schema_version` must match
//! [`SCHEMA_VERSION`].

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversaryKind, AdversarySpec};
use crate::node::ParticipantId;
use crate::primitives::PrimitiveConfig;
use crate::superblock::DEFAULT_MERGE_WAIT;
use crate::tee::Millis;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "LUCKCHAIN_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    #[default]
    ProofOfLuck,
    Superblock,
    ProofOfWork,
    ProofOfTime,
    ProofOfOwnership,
}

impl Consensus {
    /// Modes that build a chain; the others only exercise their primitive.
    pub fn builds_chain(self) -> bool {
        matches!(self, Consensus::ProofOfLuck | Consensus::Superblock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Participants {
    pub count: usize,
    /// Trusted-clock offsets per participant, in ms; missing entries are 0.
    #[serde(default)]
    pub clock_offsets: Vec<i64>,
    /// Simulated time at which each participant joins; missing entries are 0.
    #[serde(default)]
    pub start_times: Vec<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeLatency {
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub base: Millis,
    pub jitter_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub base: Millis,
    /// Mean of the exponential jitter added to `base`, in ms.
    pub jitter_mean: f64,
    pub overrides: Vec<EdgeLatency>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            base: 100,
            jitter_mean: 150.0,
            overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub groups: Vec<Vec<ParticipantId>>,
    #[serde(default)]
    pub start: Millis,
    /// Heal at this simulated time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<Millis>,
    /// Heal once every group has a chain of at least this height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heal_height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    /// Inject one transaction at a random participant every this many ms; 0 disables.
    pub tx_interval: Millis,
    pub payload_bytes: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            tx_interval: 5_000,
            payload_bytes: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Every chain message carries the full chain.
    #[default]
    Full,
    /// Chains are announced by header; bodies go only to peers that ask.
    HeaderFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    /// Directory for trace, summary and chain snapshots.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Keep every event in memory and write it as JSON lines.
    pub events: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub consensus: Consensus,
    /// Super-block size, required with `consensus = "superblock"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Wait after the longest release delay before merging, in ms.
    #[serde(default = "default_merge_wait")]
    pub merge_wait: Millis,
    /// Number of rounds (blocks) to run.
    pub horizon: usize,
    /// Stop the run at this simulated time even if the horizon is not reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time: Option<Millis>,
    #[serde(default)]
    pub propagation: Propagation,
    pub participants: Participants,
    #[serde(default)]
    pub protocol: PrimitiveConfig,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub partitions: Vec<PartitionConfig>,
    #[serde(default)]
    pub adversaries: Vec<AdversarySpec>,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_merge_wait() -> Millis {
    DEFAULT_MERGE_WAIT
}

impl Scenario {
    /// An honest proof-of-luck scenario with all defaults.
    pub fn honest(count: usize, horizon: usize, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            consensus: Consensus::ProofOfLuck,
            m: None,
            merge_wait: DEFAULT_MERGE_WAIT,
            horizon,
            max_time: None,
            propagation: Propagation::Full,
            participants: Participants {
                count,
                clock_offsets: Vec::new(),
                start_times: Vec::new(),
            },
            protocol: PrimitiveConfig::default(),
            latency: LatencyConfig::default(),
            workload: Workload::default(),
            partitions: Vec::new(),
            adversaries: Vec::new(),
            outputs: Outputs::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// The effective configuration, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    pub fn clock_offset(&self, id: ParticipantId) -> i64 {
        self.participants.clock_offsets.get(id).copied().unwrap_or(0)
    }

    pub fn start_time(&self, id: ParticipantId) -> Millis {
        self.participants.start_times.get(id).copied().unwrap_or(0)
    }

    /// Default cap on simulated time: generous for the horizon.
    pub fn effective_max_time(&self) -> Millis {
        self.max_time.unwrap_or_else(|| {
            let per_round = self.protocol.round_time + self.protocol.max_mine_delay + self.merge_wait;
            let start = self.participants.start_times.iter().copied().max().unwrap_or(0);
            start + (self.horizon as u64 + 2) * per_round * 3 + 60_000
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let n = self.participants.count;
        if n == 0 {
            return invalid("participants.count must be positive");
        }
        if self.horizon == 0 {
            return invalid("horizon must be positive");
        }
        if self.participants.clock_offsets.len() > n || self.participants.start_times.len() > n {
            return invalid("more clock_offsets or start_times than participants");
        }
        self.protocol.validate().map_err(ConfigError::Invalid)?;
        if self.protocol.pot_duration == 0 {
            return invalid("protocol.pot_duration must be positive");
        }
        if !(self.latency.jitter_mean >= 0.0 && self.latency.jitter_mean.is_finite()) {
            return invalid("latency.jitter_mean must be a non-negative number");
        }
        for e in &self.latency.overrides {
            if e.from >= n || e.to >= n {
                return invalid(format!("latency override {}->{} names an unknown participant", e.from, e.to));
            }
            if !(e.jitter_mean >= 0.0 && e.jitter_mean.is_finite()) {
                return invalid("latency override jitter_mean must be a non-negative number");
            }
        }
        match (self.consensus, self.m) {
            (Consensus::Superblock, None) => return invalid("consensus = \"superblock\" requires m"),
            (Consensus::Superblock, Some(0)) => return invalid("m must be positive"),
            (Consensus::Superblock, Some(m)) if m > n => {
                return invalid(format!("m = {m} exceeds the {n} participants; no super-block could form"))
            }
            (Consensus::Superblock, _) => {}
            (_, Some(_)) => return invalid("m is only meaningful with consensus = \"superblock\""),
            _ => {}
        }
        self.validate_partitions()?;
        self.validate_adversaries()
    }

    fn validate_partitions(&self) -> Result<(), ConfigError> {
        let n = self.participants.count;
        let mut previous_end: Option<Millis> = None;
        let mut open_ended = false;
        let mut sorted: Vec<&PartitionConfig> = self.partitions.iter().collect();
        sorted.sort_by_key(|p| p.start);
        for (i, p) in sorted.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for g in &p.groups {
                if g.is_empty() {
                    return invalid(format!("partition at {} has an empty group", p.start));
                }
                for &id in g {
                    if id >= n {
                        return invalid(format!("partition names unknown participant {id}"));
                    }
                    if !seen.insert(id) {
                        return invalid(format!("participant {id} is in two groups of one partition"));
                    }
                }
            }
            if seen.len() != n {
                return invalid(format!("partition at {} does not cover all participants", p.start));
            }
            if p.groups.len() < 2 {
                return invalid("a partition needs at least two groups");
            }
            match (p.end, p.heal_height) {
                (Some(_), Some(_)) | (None, None) => {
                    return invalid("each partition needs exactly one of end or heal_height")
                }
                (Some(end), None) if end <= p.start => return invalid("partition end must follow its start"),
                (None, Some(0)) => return invalid("heal_height must be positive"),
                _ => {}
            }
            if open_ended {
                return invalid("a partition healed by height must be the last one");
            }
            if previous_end.is_some_and(|e| p.start < e) {
                return invalid(format!("partitions overlap in time at {}", p.start));
            }
            previous_end = p.end;
            open_ended = p.heal_height.is_some();
            debug_assert!(i < sorted.len());
        }
        Ok(())
    }

    fn validate_adversaries(&self) -> Result<(), ConfigError> {
        let n = self.participants.count;
        let mut controlled = BTreeSet::new();
        for spec in &self.adversaries {
            if spec.controlled.is_empty() {
                return invalid(format!("{} adversary controls nobody", spec.kind.as_str()));
            }
            for &id in &spec.controlled {
                if id >= n {
                    return invalid(format!("adversary controls unknown participant {id}"));
                }
                if !controlled.insert(id) {
                    return invalid(format!("participant {id} is controlled by two adversaries"));
                }
            }
            spec.validate(self.consensus).map_err(ConfigError::Invalid)?;
        }
        if 2 * controlled.len() >= n && !self.adversaries.iter().any(|a| a.allow_majority) {
            return invalid(format!(
                "adversaries control {} of {n} participants; set allow_majority = true to run this anyway",
                controlled.len()
            ));
        }
        if self.adversaries.iter().any(|a| a.kind == AdversaryKind::MinorityFork) && !self.partitions.is_empty() {
            return invalid("minority_fork cannot be combined with partitions");
        }
        Ok(())
    }
}
