//! Attacker models.
//!
//! Adversaries act through the same participants and network as honest
//! nodes. The simulator consults the state kept here to decide where a
//! controlled node's messages go and what it hears; controlled nodes never
//! get a way to alter other nodes' messages in flight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::ledger::{Block, Chain, Linked, Transaction};
use crate::node::{Body, Message, ParticipantId};
use crate::primitives::LuckProof;
use crate::scenario::Consensus;
use crate::tee::{Attestation, Cpu, Measurement, Millis, TeeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    /// A coalition mines a private fork and reveals it after `depth` blocks.
    MinorityFork,
    /// Follows honest chains but keeps its own blocks back until `reveal_height`.
    WithholdReveal,
    /// Sends replayed, tampered and re-attributed messages under false sender ids.
    Spoofer,
    /// Has extracted signing access from its CPU and claims luck `forge_l`.
    CompromisedTee,
}

impl AdversaryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdversaryKind::MinorityFork => "minority_fork",
            AdversaryKind::WithholdReveal => "withhold_reveal",
            AdversaryKind::Spoofer => "spoofer",
            AdversaryKind::CompromisedTee => "compromised_tee",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub controlled: Vec<ParticipantId>,
    /// Height of the shared block the private fork branches from.
    #[serde(default)]
    pub fork_height: usize,
    /// Private blocks mined before the fork is revealed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reveal_height: Option<usize>,
    #[serde(default = "default_forge_l")]
    pub forge_l: f64,
    #[serde(default = "default_spoof_interval")]
    pub spoof_interval: Millis,
    /// Permit controlling half or more of the participants.
    #[serde(default)]
    pub allow_majority: bool,
}

fn default_forge_l() -> f64 {
    0.999999
}

fn default_spoof_interval() -> Millis {
    5_000
}

impl AdversarySpec {
    pub fn new(kind: AdversaryKind, controlled: Vec<ParticipantId>) -> Self {
        Self {
            kind,
            controlled,
            fork_height: 0,
            depth: None,
            reveal_height: None,
            forge_l: default_forge_l(),
            spoof_interval: default_spoof_interval(),
            allow_majority: false,
        }
    }

    pub fn validate(&self, consensus: Consensus) -> Result<(), String> {
        let name = self.kind.as_str();
        match self.kind {
            AdversaryKind::CompromisedTee => {
                if !consensus.builds_chain() {
                    return Err(format!("{name} needs a chain-building consensus"));
                }
                if !(0.0..1.0).contains(&self.forge_l) {
                    return Err("forge_l must be in [0, 1)".into());
                }
            }
            _ if consensus != Consensus::ProofOfLuck => {
                return Err(format!("{name} is only modeled for consensus = \"proof_of_luck\""));
            }
            AdversaryKind::MinorityFork => {
                if self.depth.is_none_or(|d| d == 0) {
                    return Err(format!("{name} needs depth >= 1"));
                }
            }
            AdversaryKind::WithholdReveal => {
                if self.reveal_height.is_none_or(|h| h == 0) {
                    return Err(format!("{name} needs reveal_height >= 1"));
                }
            }
            AdversaryKind::Spoofer => {
                if self.spoof_interval == 0 {
                    return Err("spoof_interval must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Sign an arbitrary payload with a compromised CPU's key. Refused unless
/// the CPU has been marked compromised.
pub fn forge_attestation(
    cpu: &Cpu,
    measurement: Measurement,
    payload: &[u8],
    basename: Option<&[u8]>,
) -> Result<Attestation, TeeError> {
    Ok(cpu.signing_oracle()?.attest(measurement, payload, basename))
}

/// A luck proof over `nonce` claiming `l`, signed by a compromised CPU.
pub fn forge_luck_proof(
    cpu: &Cpu,
    measurement: Measurement,
    nonce: &Digest,
    l: f64,
    basename: Option<&[u8]>,
) -> Result<LuckProof, TeeError> {
    let att = forge_attestation(cpu, measurement, &LuckProof::payload(nonce, l), basename)?;
    Ok(LuckProof::from_attestation(att).expect("payload built from a valid l"))
}

/// Re-attribute a message to someone else.
pub fn spoof(msg: Message, claimed: ParticipantId) -> Message {
    Message::new(msg.body, Some(claimed))
}

/// A chain claiming more luck than it has: the tip proof's payload is
/// replaced while its signature is kept. Honest validation must reject it.
pub fn tamper_luck(chain: &Chain, l: f64) -> Option<Chain> {
    let tip = chain.latest()?;
    let att = tip
        .proof()
        .attestation()
        .with_spliced_payload(LuckProof::payload(&tip.proof().nonce(), l));
    let proof = LuckProof::from_attestation(att).ok()?;
    let block = Block::new(tip.parent(), tip.transactions().to_vec(), proof);
    Some(chain.prefix(chain.len() - 1).push(block))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkPhase {
    /// Following the public chain until the branch point.
    Public,
    /// Mining and gossiping only inside the coalition.
    Private,
    Revealed,
}

/// What happened when a private fork was revealed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevealRecord {
    pub at: Millis,
    pub fork_height: usize,
    pub private_height: usize,
    pub private_tip: Digest,
    pub private_luck: f64,
    pub honest_height: usize,
    pub honest_luck: f64,
    /// Whether honest nodes ended on the private fork; filled in at the end.
    pub succeeded: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ForkState {
    pub members: Vec<ParticipantId>,
    pub fork_height: usize,
    pub depth: usize,
    pub phase: ForkPhase,
    /// Luckiest honest chain heard while private.
    pub observed: Option<Chain>,
    pub reveal: Option<RevealRecord>,
}

#[derive(Debug, Clone)]
pub struct WithholdState {
    pub members: Vec<ParticipantId>,
    pub reveal_height: usize,
    pub revealed: bool,
}

#[derive(Debug, Clone)]
pub struct SpoofState {
    pub members: Vec<ParticipantId>,
    pub interval: Millis,
    /// Transactions heard so far, replayed later.
    pub heard: Vec<Transaction>,
}

/// Role of one participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Honest,
    Fork(usize),
    Withhold(usize),
    Spoofer(usize),
    Forger,
}

/// Where a message from a controlled node may go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    Everyone,
    Only(Vec<ParticipantId>),
    /// Not sent at all.
    Held,
}

/// Counters for adversarial traffic.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AdversaryReport {
    pub spoofed: u64,
    pub withheld: u64,
    pub reveals: Vec<RevealRecord>,
}

/// Runtime state of all adversaries in a scenario.
#[derive(Debug, Clone)]
pub struct Adversaries {
    roles: Vec<Role>,
    pub forks: Vec<ForkState>,
    pub withholders: Vec<WithholdState>,
    pub spoofers: Vec<SpoofState>,
    pub report: AdversaryReport,
    /// Blocks each participant mined, for the withholding rule.
    pub mined_by: BTreeMap<Digest, ParticipantId>,
}

impl Adversaries {
    pub fn new(count: usize, specs: &[AdversarySpec]) -> Self {
        let mut a = Self {
            roles: vec![Role::Honest; count],
            forks: Vec::new(),
            withholders: Vec::new(),
            spoofers: Vec::new(),
            report: AdversaryReport::default(),
            mined_by: BTreeMap::new(),
        };
        for spec in specs {
            let members = spec.controlled.clone();
            let role = match spec.kind {
                AdversaryKind::MinorityFork => {
                    a.forks.push(ForkState {
                        members: members.clone(),
                        fork_height: spec.fork_height,
                        depth: spec.depth.unwrap_or(1),
                        phase: ForkPhase::Public,
                        observed: None,
                        reveal: None,
                    });
                    Role::Fork(a.forks.len() - 1)
                }
                AdversaryKind::WithholdReveal => {
                    a.withholders.push(WithholdState {
                        members: members.clone(),
                        reveal_height: spec.reveal_height.unwrap_or(1),
                        revealed: false,
                    });
                    Role::Withhold(a.withholders.len() - 1)
                }
                AdversaryKind::Spoofer => {
                    a.spoofers.push(SpoofState {
                        members: members.clone(),
                        interval: spec.spoof_interval,
                        heard: Vec::new(),
                    });
                    Role::Spoofer(a.spoofers.len() - 1)
                }
                AdversaryKind::CompromisedTee => Role::Forger,
            };
            for id in members {
                a.roles[id] = role;
            }
        }
        a
    }

    pub fn role(&self, id: ParticipantId) -> Role {
        self.roles[id]
    }

    pub fn is_honest(&self, id: ParticipantId) -> bool {
        self.roles[id] == Role::Honest
    }

    pub fn honest_ids(&self) -> impl Iterator<Item = ParticipantId> + '_ {
        (0..self.roles.len()).filter(|&i| self.is_honest(i))
    }

    pub fn needs_steps(&self) -> bool {
        !self.forks.is_empty() || !self.withholders.is_empty() || !self.spoofers.is_empty()
    }

    /// Recipients allowed for a broadcast by `from`.
    pub fn outgoing_scope(&mut self, from: ParticipantId, msg: &Message) -> Scope {
        match self.roles[from] {
            Role::Fork(i) if self.forks[i].phase == ForkPhase::Private => Scope::Only(self.forks[i].members.clone()),
            Role::Withhold(i) if !self.withholders[i].revealed => match &msg.body {
                Body::Chain(c) if c.iter_rev().any(|b| self.mined_by.get(&b.digest()).is_some_and(|m| self.withholders[i].members.contains(m))) => {
                    self.report.withheld += 1;
                    Scope::Held
                }
                _ => Scope::Everyone,
            },
            _ => Scope::Everyone,
        }
    }

    /// Whether `to` processes a message from `from`. A private coalition
    /// only listens to itself, but keeps the luckiest outside chain.
    pub fn accepts(&mut self, to: ParticipantId, from: ParticipantId, msg: &Message) -> bool {
        match self.roles[to] {
            Role::Fork(i) if self.forks[i].phase == ForkPhase::Private => {
                let fork = &mut self.forks[i];
                if fork.members.contains(&from) {
                    return true;
                }
                if let Body::Chain(c) = &msg.body {
                    if fork.observed.as_ref().is_none_or(|o| c.luck() > o.luck()) {
                        fork.observed = Some(c.clone());
                    }
                    return false;
                }
                true
            }
            Role::Spoofer(i) => {
                if let Body::Transaction(tx) = &msg.body {
                    self.spoofers[i].heard.push(tx.clone());
                }
                true
            }
            _ => true,
        }
    }
}
