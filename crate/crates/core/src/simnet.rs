//! Deterministic discrete-event network simulator.
//!
//! Events run in `(due, seq)` order on integer milliseconds. The network is
//! a complete graph with sampled per-edge latency; partitions drop traffic
//! between groups while active. Every run records a trace whose digest is a
//! pure function of the scenario.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::adversary::{tamper_luck, Adversaries, ForkPhase, RevealRecord, Scope};
use crate::digest::{Digest, RunningDigest};
use crate::ledger::{BlockHeader, Chain, ChainValidator, Linked, Transaction};
use crate::node::{Body, Message, MessageKind, MiningMode, NetworkPort, Note, Participant, ParticipantId, ProtocolContext, Wake};
use crate::primitives::{
    finish_proof_of_time, luck_measurement, ownership_measurement, proof_of_ownership, proof_of_time, tee_pow,
    time_measurement, work_measurement, LuckEnclave,
};
use crate::scenario::{ConfigError, Consensus, LatencyConfig, PartitionConfig, Propagation, Scenario};
use crate::superblock::{SuperBlock, SuperParticipant};
use crate::tee::{Cpu, Millis, SimClock, VendorRegistry};

/// Interval of adversary bookkeeping steps.
const ADVERSARY_STEP: Millis = 250;

#[derive(Debug, Clone)]
struct Jitter(Option<Exp<f64>>);

impl Jitter {
    fn new(mean: f64) -> Self {
        Jitter((mean > 0.0).then(|| Exp::new(1.0 / mean).expect("positive rate")))
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> Millis {
        self.0.as_ref().map_or(0, |e| e.sample(rng).round() as Millis)
    }
}

/// Base delay plus exponential jitter, with per-edge overrides.
#[derive(Debug, Clone)]
pub struct LatencyModel {
    base: Millis,
    jitter: Jitter,
    overrides: BTreeMap<(ParticipantId, ParticipantId), (Millis, Jitter)>,
}

impl LatencyModel {
    pub fn new(cfg: &LatencyConfig) -> Self {
        Self {
            base: cfg.base,
            jitter: Jitter::new(cfg.jitter_mean),
            overrides: cfg
                .overrides
                .iter()
                .map(|e| ((e.from, e.to), (e.base, Jitter::new(e.jitter_mean))))
                .collect(),
        }
    }

    pub fn sample(&self, from: ParticipantId, to: ParticipantId, rng: &mut ChaCha20Rng) -> Millis {
        match self.overrides.get(&(from, to)) {
            Some((base, jitter)) => base + jitter.sample(rng),
            None => self.base + self.jitter.sample(rng),
        }
    }
}

/// A participant of either protocol variant.
#[derive(Debug)]
pub enum Node {
    Base(Participant),
    Super(SuperParticipant),
}

impl Node {
    pub fn height(&self) -> usize {
        match self {
            Node::Base(p) => p.chain().len(),
            Node::Super(p) => p.chain().len(),
        }
    }

    pub fn tip(&self) -> Digest {
        match self {
            Node::Base(p) => p.chain().tip_digest(),
            Node::Super(p) => p.chain().tip_digest(),
        }
    }

    pub fn luck(&self) -> f64 {
        match self {
            Node::Base(p) => p.chain().luck(),
            Node::Super(p) => p.chain().luck(),
        }
    }

    pub fn contains(&self, block: &Digest) -> bool {
        match self {
            Node::Base(p) => p.chain().contains(block),
            Node::Super(p) => p.chain().contains(block),
        }
    }

    pub fn callback_due(&self) -> Option<Millis> {
        match self {
            Node::Base(p) => p.callback_due(),
            Node::Super(p) => p.callback_due(),
        }
    }

    pub fn base_chain(&self) -> Option<&Chain> {
        match self {
            Node::Base(p) => Some(p.chain()),
            Node::Super(_) => None,
        }
    }

    pub fn super_chain(&self) -> Option<&Chain<SuperBlock>> {
        match self {
            Node::Super(p) => Some(p.chain()),
            Node::Base(_) => None,
        }
    }

    /// Canonical snapshot of the current chain.
    pub fn snapshot(&self) -> Vec<u8> {
        match self {
            Node::Base(p) => p.chain().encode(),
            Node::Super(p) => p.chain().encode(),
        }
    }

    pub fn chain_message(&self, claimed: ParticipantId) -> Message {
        let body = match self {
            Node::Base(p) => Body::Chain(p.chain().clone()),
            Node::Super(p) => Body::SuperChain(p.chain().clone()),
        };
        Message::new(body, Some(claimed))
    }

    fn set_max_height(&mut self, h: Option<usize>) {
        match self {
            Node::Base(p) => p.set_max_height(h),
            Node::Super(p) => p.set_max_height(h),
        }
    }

    fn start(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        match self {
            Node::Base(p) => p.start(port, ctx),
            Node::Super(p) => p.start(port, ctx),
        }
    }

    fn resume(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        match self {
            Node::Base(p) => p.resume(port, ctx),
            Node::Super(p) => p.resume(port, ctx),
        }
    }

    fn wake(&mut self, wake: Wake, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        match self {
            Node::Base(p) => p.handle_wake(wake, port, ctx),
            Node::Super(p) => p.handle_wake(wake, port, ctx),
        }
    }

    fn deliver(&mut self, msg: &Message, port: &mut dyn NetworkPort, ctx: &ProtocolContext) -> bool {
        match (self, &msg.body) {
            (Node::Base(p), Body::Transaction(tx)) => p.handle_transaction(tx.clone(), port),
            (Node::Super(p), Body::Transaction(tx)) => p.handle_transaction(tx.clone(), port),
            (Node::Base(p), Body::Chain(c)) => p.handle_chain(c.clone(), port, ctx),
            (Node::Super(p), Body::SuperChain(c)) => p.handle_chain(c.clone(), port, ctx),
            (Node::Super(p), Body::Candidate(b)) => p.handle_candidate(b.clone(), port, ctx),
            _ => false,
        }
    }

    /// Bytes a receiver pulls after a header announcement of `msg`: a request
    /// plus the blocks it lacks, or nothing if the chain is not luckier.
    fn pull_bytes(&self, msg: &Message) -> u64 {
        fn suffix<B: Linked>(mine: &Chain<B>, theirs: &Chain<B>) -> u64 {
            if theirs.luck() <= mine.luck() {
                return 0;
            }
            let fork = mine.common_prefix_len(theirs);
            let body: usize = theirs.suffix_after(fork).iter().map(|b| b.encoded_len()).sum();
            (REQUEST_BYTES + 1 + body) as u64
        }
        match (self, &msg.body) {
            (Node::Base(p), Body::Chain(c)) => suffix(p.chain(), c),
            (Node::Super(p), Body::SuperChain(c)) => suffix(p.chain(), c),
            _ => 0,
        }
    }
}

/// Size of a body request in header-first mode (the wanted tip digest).
pub const REQUEST_BYTES: usize = 32;

/// Announcement size of a chain message in header-first mode: kind tag,
/// height, total luck, tip header and tip proof.
pub fn announce_bytes(msg: &Message) -> u64 {
    fn of<B: Linked>(c: &Chain<B>, proof_len: usize) -> u64 {
        let _ = c;
        (1 + 4 + 8 + BlockHeader::ENCODED_LEN + proof_len) as u64
    }
    match &msg.body {
        Body::Chain(c) => of(c, c.latest().map_or(0, |b| b.proof().encoded_len())),
        Body::SuperChain(c) => of(
            c,
            c.latest().map_or(0, |b| b.proofs().map(|p| p.encoded_len() + 4).sum()),
        ),
        _ => msg.wire_len() as u64,
    }
}

#[derive(Debug, Clone)]
enum Action {
    Start(ParticipantId),
    Wake(ParticipantId, Wake),
    Deliver {
        to: ParticipantId,
        from: ParticipantId,
        msg: Arc<Message>,
    },
    PartitionStart(usize),
    PartitionEnd(usize),
    InjectTx,
    AdversaryStep,
    Spoof(usize),
}

#[derive(Debug)]
struct Event {
    due: Millis,
    seq: u64,
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

/// Effects collected while a participant handles one input.
struct Outbox {
    now: Millis,
    broadcasts: Vec<(ParticipantId, Message)>,
    wakes: Vec<(ParticipantId, Millis, Wake)>,
    notes: Vec<(ParticipantId, Note)>,
}

impl NetworkPort for Outbox {
    fn now(&self) -> Millis {
        self.now
    }
    fn broadcast(&mut self, from: ParticipantId, msg: Message) {
        self.broadcasts.push((from, msg));
    }
    fn schedule(&mut self, who: ParticipantId, due: Millis, wake: Wake) {
        self.wakes.push((who, due, wake));
    }
    fn note(&mut self, who: ParticipantId, note: Note) {
        self.notes.push((who, note));
    }
}

/// One line of the JSON-lines trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub t: Millis,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceKind {
    Start { node: ParticipantId },
    Send { from: ParticipantId, claimed: Option<ParticipantId>, kind: &'static str, recipients: usize, bytes: u64 },
    Deliver { from: ParticipantId, to: ParticipantId, kind: &'static str, accepted: bool, bytes: u64 },
    Drop { from: ParticipantId, to: ParticipantId, kind: &'static str },
    Withhold { from: ParticipantId, kind: &'static str },
    RoundStarted { node: ParticipantId, height: usize, callback_due: Option<Millis> },
    Mined { node: ParticipantId, l: f64, release_at: Millis },
    Released { node: ParticipantId, block: Digest, l: f64 },
    MineFailed { node: ParticipantId, reason: String },
    Adopted { node: ParticipantId, height: usize, tip: Digest, luck: f64 },
    Rejected { node: ParticipantId, invalid: bool },
    DuplicatePseudonym { node: ParticipantId },
    MergeVoid { node: ParticipantId, distinct: usize },
    PartitionStart { index: usize },
    PartitionEnd { index: usize },
    HealKick { index: usize, from: ParticipantId, tip: Digest, luck: f64 },
    InjectTx { to: ParticipantId, tx: Digest },
    ForkPrivate { coalition: usize },
    Reveal { coalition: usize, from: ParticipantId, tip: Digest, luck: f64 },
    WithholdReveal { group: usize, from: ParticipantId },
    Spoof { from: ParticipantId, claimed: ParticipantId, kind: &'static str },
}

/// Message and byte counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Accounting {
    /// Broadcast calls.
    pub broadcasts: u64,
    /// Per-recipient copies attempted.
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Copies discarded because the recipient was listening to a private coalition only.
    pub ignored: u64,
    pub withheld: u64,
    pub bytes: u64,
    pub by_kind: BTreeMap<&'static str, u64>,
}

/// Per-height summary of the reference chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSummary {
    pub height: usize,
    pub winner: Option<ParticipantId>,
    pub winner_l: f64,
    pub chain_luck: f64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealRecord {
    pub index: usize,
    pub at: Millis,
    pub group_heights: Vec<usize>,
    pub group_lucks: Vec<f64>,
    pub group_tips: Vec<Digest>,
    /// First time all honest participants shared one tip after the heal.
    pub converged_at: Option<Millis>,
    /// Group whose pre-heal tip is on the final reference chain.
    pub winning_group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalState {
    pub node: ParticipantId,
    pub honest: bool,
    pub height: usize,
    pub tip: Digest,
    pub luck: f64,
}

/// One round of a primitive-only consensus mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveRound {
    pub round: usize,
    pub attestations: usize,
    pub verified: usize,
    /// Proof of work: total hash evaluations. Proof of time: elapsed ms.
    /// Proof of ownership: distinct pseudonyms.
    pub measure: u64,
    pub winner: Option<ParticipantId>,
}

/// Everything recorded about a run.
#[derive(Debug, Clone, Serialize)]
pub struct EventTrace {
    pub seed: u64,
    pub digest: Digest,
    pub end_time: Millis,
    pub events_processed: u64,
    pub accounting: Accounting,
    pub rounds: Vec<RoundSummary>,
    pub primitive_rounds: Vec<PrimitiveRound>,
    pub finals: Vec<FinalState>,
    pub heals: Vec<HealRecord>,
    /// Spread of honest callback times per height (max - min, ms).
    pub callback_spread: Vec<(usize, Millis)>,
    /// Which participant released each block (base mode) or candidate.
    pub block_miner: BTreeMap<Digest, ParticipantId>,
    /// Which participant produced each proof, by (nonce, l bits).
    #[serde(skip)]
    pub proof_miner: BTreeMap<(Digest, u64), ParticipantId>,
    pub note_counts: BTreeMap<String, u64>,
    pub spoofed: u64,
    pub reveals: Vec<RevealRecord>,
    /// Serialized events, present when `outputs.events` is set.
    #[serde(skip)]
    pub events: Vec<String>,
}

impl EventTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.events {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("height,winner,winner_l,chain_luck,messages,bytes\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.height,
                r.winner.map_or(String::new(), |w| w.to_string()),
                r.winner_l,
                r.chain_luck,
                r.messages,
                r.bytes
            ));
        }
        out
    }

    pub fn primitive_csv(&self) -> String {
        let mut out = String::from("round,attestations,verified,measure,winner\n");
        for r in &self.primitive_rounds {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round,
                r.attestations,
                r.verified,
                r.measure,
                r.winner.map_or(String::new(), |w| w.to_string())
            ));
        }
        out
    }

    /// Whether every honest participant ended on the same tip.
    pub fn honest_converged(&self) -> bool {
        let mut tips = self.finals.iter().filter(|f| f.honest).map(|f| f.tip);
        match tips.next() {
            Some(first) => tips.all(|t| t == first),
            None => true,
        }
    }
}

/// Result of [`run`]: the trace plus the final participants.
#[derive(Debug)]
pub struct SimOutcome {
    pub trace: EventTrace,
    pub nodes: Vec<Node>,
    pub cpus: Vec<Cpu>,
    pub registry: Arc<VendorRegistry>,
}

#[derive(Debug)]
struct ActivePartition {
    index: usize,
    group_of: Vec<usize>,
    heal_height: Option<usize>,
}

struct Simulation {
    scenario: Scenario,
    cpus: Vec<Cpu>,
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: Vec<Node>,
    ctx: ProtocolContext,
    clock: SimClock,
    rng: ChaCha20Rng,
    latency: LatencyModel,
    partition: Option<ActivePartition>,
    adversaries: Adversaries,
    digest: RunningDigest,
    trace: EventTrace,
    round_counters: BTreeMap<usize, (u64, u64)>,
    callbacks: BTreeMap<usize, BTreeMap<ParticipantId, Millis>>,
    pending_heals: Vec<usize>,
    tx_counter: u64,
}

/// Run a validated scenario to its horizon.
pub fn run(scenario: &Scenario) -> Result<SimOutcome, ConfigError> {
    scenario.validate()?;
    if !scenario.consensus.builds_chain() {
        return Ok(run_primitive_rounds(scenario));
    }
    let mut sim = Simulation::new(scenario);
    sim.execute();
    Ok(sim.finish())
}

fn stream_seed(seed: u64, label: &[u8]) -> [u8; 32] {
    Digest::tagged(b"luckchain/sim-stream", &[&seed.to_be_bytes(), label]).0
}

fn manufacture(scenario: &Scenario) -> (Vec<Cpu>, VendorRegistry, SimClock) {
    let mut registry = VendorRegistry::new();
    let clock = SimClock::new();
    let cpus = (0..scenario.participants.count)
        .map(|i| {
            Cpu::create_with_offset(scenario.seed, i as u64, &mut registry, &clock, scenario.clock_offset(i))
                .expect("indices are unique")
        })
        .collect();
    (cpus, registry, clock)
}

impl Simulation {
    fn new(scenario: &Scenario) -> Self {
        let (cpus, registry, clock) = manufacture(scenario);
        let adversaries = Adversaries::new(scenario.participants.count, &scenario.adversaries);
        let forge_l: BTreeMap<ParticipantId, f64> = scenario
            .adversaries
            .iter()
            .filter(|a| a.kind == crate::adversary::AdversaryKind::CompromisedTee)
            .flat_map(|a| a.controlled.iter().map(move |&id| (id, a.forge_l)))
            .collect();
        let superblock_size = (scenario.consensus == Consensus::Superblock).then(|| scenario.m.unwrap_or(1));
        let nodes: Vec<Node> = cpus
            .iter()
            .enumerate()
            .map(|(id, cpu)| {
                let mining = match forge_l.get(&id) {
                    Some(&l) => {
                        cpu.mark_compromised();
                        MiningMode::Forged {
                            l,
                            oracle: cpu.signing_oracle().expect("just compromised"),
                        }
                    }
                    None => MiningMode::Honest,
                };
                let enclave = LuckEnclave::new(cpu.start_enclave(luck_measurement()));
                let mut node = match superblock_size {
                    Some(m) => Node::Super(SuperParticipant::new(id, m, scenario.merge_wait, enclave, mining)),
                    None => Node::Base(Participant::with_mode(id, enclave, mining)),
                };
                node.set_max_height(Some(scenario.horizon));
                node
            })
            .collect();
        let registry = Arc::new(registry);
        let trace = EventTrace {
            seed: scenario.seed,
            digest: Digest::ZERO,
            end_time: 0,
            events_processed: 0,
            accounting: Accounting::default(),
            rounds: Vec::new(),
            primitive_rounds: Vec::new(),
            finals: Vec::new(),
            heals: Vec::new(),
            callback_spread: Vec::new(),
            block_miner: BTreeMap::new(),
            proof_miner: BTreeMap::new(),
            note_counts: BTreeMap::new(),
            spoofed: 0,
            reveals: Vec::new(),
            events: Vec::new(),
        };
        let mut sim = Simulation {
            scenario: scenario.clone(),
            cpus,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            ctx: ProtocolContext {
                cfg: scenario.protocol,
                validator: ChainValidator::new(registry, luck_measurement(), superblock_size),
            },
            clock,
            rng: ChaCha20Rng::from_seed(stream_seed(scenario.seed, b"network")),
            latency: LatencyModel::new(&scenario.latency),
            partition: None,
            adversaries,
            digest: RunningDigest::new(),
            trace,
            round_counters: BTreeMap::new(),
            callbacks: BTreeMap::new(),
            pending_heals: Vec::new(),
            tx_counter: 0,
        };
        for id in 0..scenario.participants.count {
            sim.push(scenario.start_time(id), Action::Start(id));
        }
        for (i, p) in scenario.partitions.iter().enumerate() {
            sim.push(p.start, Action::PartitionStart(i));
            if let Some(end) = p.end {
                sim.push(end, Action::PartitionEnd(i));
            }
        }
        if scenario.workload.tx_interval > 0 {
            sim.push(scenario.workload.tx_interval, Action::InjectTx);
        }
        if !sim.adversaries.forks.is_empty() || !sim.adversaries.withholders.is_empty() {
            sim.push(0, Action::AdversaryStep);
        }
        for i in 0..sim.adversaries.spoofers.len() {
            let interval = sim.adversaries.spoofers[i].interval;
            sim.push(interval, Action::Spoof(i));
        }
        sim
    }

    fn push(&mut self, due: Millis, action: Action) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Event { due, seq, action }));
    }

    fn record(&mut self, kind: TraceKind) {
        let line = serde_json::to_string(&TraceEvent { t: self.now, kind }).expect("trace events serialize");
        self.digest.update(line.as_bytes());
        if self.scenario.outputs.events {
            self.trace.events.push(line);
        }
    }

    fn max_height(&self) -> usize {
        self.nodes.iter().map(Node::height).max().unwrap_or(0)
    }

    /// Recurring events stop once every participant reached the horizon.
    fn winding_down(&self) -> bool {
        self.nodes.iter().all(|n| n.height() >= self.scenario.horizon)
    }

    fn execute(&mut self) {
        let cap = self.scenario.effective_max_time();
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.due > cap {
                break;
            }
            debug_assert!(ev.due >= self.now, "event scheduled in the past");
            self.now = ev.due;
            self.clock.advance_to(self.now);
            self.trace.events_processed += 1;
            self.dispatch(ev.action);
            self.after_event();
        }
        self.trace.end_time = self.now;
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Start(id) => {
                self.record(TraceKind::Start { node: id });
                self.with_node(id, |n, port, ctx| n.start(port, ctx));
            }
            Action::Wake(id, wake) => self.with_node(id, |n, port, ctx| n.wake(wake, port, ctx)),
            Action::Deliver { to, from, msg } => self.deliver(to, from, &msg),
            Action::PartitionStart(i) => self.start_partition(i),
            Action::PartitionEnd(i) => {
                if self.partition.as_ref().is_some_and(|p| p.index == i) {
                    self.heal();
                }
            }
            Action::InjectTx => self.inject_tx(),
            Action::AdversaryStep => self.adversary_step(),
            Action::Spoof(i) => self.spoof_step(i),
        }
    }

    fn with_node(&mut self, id: ParticipantId, f: impl FnOnce(&mut Node, &mut Outbox, &ProtocolContext)) {
        let mut out = Outbox {
            now: self.now,
            broadcasts: Vec::new(),
            wakes: Vec::new(),
            notes: Vec::new(),
        };
        f(&mut self.nodes[id], &mut out, &self.ctx);
        self.flush(&mut out);
    }

    fn flush(&mut self, out: &mut Outbox) {
        for (who, note) in std::mem::take(&mut out.notes) {
            self.on_note(who, note);
        }
        for (who, due, wake) in std::mem::take(&mut out.wakes) {
            self.push(due, Action::Wake(who, wake));
        }
        for (from, msg) in std::mem::take(&mut out.broadcasts) {
            self.fan_out(from, msg, None);
        }
    }

    fn on_note(&mut self, who: ParticipantId, note: Note) {
        let honest = self.adversaries.is_honest(who);
        let key = match &note {
            Note::RoundStarted { .. } => "round_started",
            Note::Mined { .. } => "mined",
            Note::Released { .. } => "released",
            Note::MineFailed { .. } => "mine_failed",
            Note::Adopted { .. } => "adopted",
            Note::Rejected { invalid: true } => "rejected_invalid",
            Note::Rejected { invalid: false } => "rejected_unlucky",
            Note::DuplicatePseudonym => "duplicate_pseudonym",
            Note::MergeVoid { .. } => "merge_void",
        };
        let prefix = if honest { "honest." } else { "adversary." };
        *self.trace.note_counts.entry(format!("{prefix}{key}")).or_default() += 1;
        let kind = match note {
            Note::RoundStarted { height, callback_due } => {
                if let (Some(due), true) = (callback_due, honest) {
                    self.callbacks.entry(height).or_default().insert(who, due);
                }
                TraceKind::RoundStarted { node: who, height, callback_due }
            }
            Note::Mined { l, release_at } => TraceKind::Mined { node: who, l, release_at },
            Note::Released { block, nonce, l } => {
                self.trace.block_miner.insert(block, who);
                self.trace.proof_miner.insert((nonce, l.to_bits()), who);
                self.adversaries.mined_by.insert(block, who);
                TraceKind::Released { node: who, block, l }
            }
            Note::MineFailed { reason } => TraceKind::MineFailed { node: who, reason },
            Note::Adopted { height, tip, luck } => TraceKind::Adopted { node: who, height, tip, luck },
            Note::Rejected { invalid } => TraceKind::Rejected { node: who, invalid },
            Note::DuplicatePseudonym => TraceKind::DuplicatePseudonym { node: who },
            Note::MergeVoid { distinct } => TraceKind::MergeVoid { node: who, distinct },
        };
        self.record(kind);
    }

    fn separated(&self, a: ParticipantId, b: ParticipantId) -> bool {
        self.partition.as_ref().is_some_and(|p| p.group_of[a] != p.group_of[b])
    }

    /// Send `msg` from `from` to everyone it may reach. `only` restricts the
    /// recipients further (used by adversaries).
    fn fan_out(&mut self, from: ParticipantId, msg: Message, only: Option<Vec<ParticipantId>>) {
        let kind = msg.kind().as_str();
        let recipients: Vec<ParticipantId> = match self.adversaries.outgoing_scope(from, &msg) {
            Scope::Held => {
                self.trace.accounting.withheld += 1;
                self.record(TraceKind::Withhold { from, kind });
                return;
            }
            Scope::Only(ids) => ids,
            Scope::Everyone => (0..self.nodes.len()).collect(),
        };
        let recipients: Vec<ParticipantId> = recipients
            .into_iter()
            .filter(|&r| r != from && only.as_ref().is_none_or(|o| o.contains(&r)))
            .collect();
        let per_copy = match (self.scenario.propagation, msg.kind()) {
            (Propagation::HeaderFirst, MessageKind::Chain | MessageKind::SuperChain) => announce_bytes(&msg),
            _ => msg.wire_len() as u64,
        };
        let total = per_copy * recipients.len() as u64;
        let acc = &mut self.trace.accounting;
        acc.broadcasts += 1;
        acc.bytes += total;
        *acc.by_kind.entry(kind).or_default() += recipients.len() as u64;
        let round = self.max_height() + 1;
        let counter = self.round_counters.entry(round).or_default();
        counter.0 += recipients.len() as u64;
        counter.1 += total;
        self.record(TraceKind::Send {
            from,
            claimed: msg.claimed_sender,
            kind,
            recipients: recipients.len(),
            bytes: total,
        });
        let msg = Arc::new(msg);
        for to in recipients {
            self.trace.accounting.sent += 1;
            if self.separated(from, to) {
                self.trace.accounting.dropped += 1;
                self.record(TraceKind::Drop { from, to, kind });
                continue;
            }
            let delay = self.latency.sample(from, to, &mut self.rng);
            self.push(self.now + delay, Action::Deliver { to, from, msg: msg.clone() });
        }
    }

    fn deliver(&mut self, to: ParticipantId, from: ParticipantId, msg: &Message) {
        let kind = msg.kind().as_str();
        if self.separated(from, to) {
            self.trace.accounting.dropped += 1;
            self.record(TraceKind::Drop { from, to, kind });
            return;
        }
        if !self.adversaries.accepts(to, from, msg) {
            self.trace.accounting.ignored += 1;
            return;
        }
        self.trace.accounting.delivered += 1;
        let pulled = match self.scenario.propagation {
            Propagation::HeaderFirst => self.nodes[to].pull_bytes(msg),
            Propagation::Full => 0,
        };
        if pulled > 0 {
            self.trace.accounting.bytes += pulled;
            let round = self.max_height() + 1;
            self.round_counters.entry(round).or_default().1 += pulled;
        }
        let mut accepted = false;
        self.with_node(to, |n, port, ctx| accepted = n.deliver(msg, port, ctx));
        self.record(TraceKind::Deliver {
            from,
            to,
            kind,
            accepted,
            bytes: pulled,
        });
    }

    fn start_partition(&mut self, index: usize) {
        let cfg: &PartitionConfig = &self.scenario.partitions[index];
        let mut group_of = vec![0; self.nodes.len()];
        for (g, members) in cfg.groups.iter().enumerate() {
            for &id in members {
                group_of[id] = g;
            }
        }
        self.partition = Some(ActivePartition {
            index,
            group_of,
            heal_height: cfg.heal_height,
        });
        self.record(TraceKind::PartitionStart { index });
    }

    /// Lift the active partition and have each group's luckiest member
    /// re-announce its chain.
    fn heal(&mut self) {
        let Some(p) = self.partition.take() else {
            return;
        };
        let groups = &self.scenario.partitions[p.index].groups;
        let mut heights = Vec::new();
        let mut lucks = Vec::new();
        let mut tips = Vec::new();
        let mut kickers = Vec::new();
        for members in groups {
            let best = *members
                .iter()
                .max_by(|&&a, &&b| self.nodes[a].luck().total_cmp(&self.nodes[b].luck()).then(b.cmp(&a)))
                .expect("groups are non-empty");
            heights.push(members.iter().map(|&i| self.nodes[i].height()).max().unwrap_or(0));
            lucks.push(self.nodes[best].luck());
            tips.push(self.nodes[best].tip());
            kickers.push(best);
        }
        self.record(TraceKind::PartitionEnd { index: p.index });
        self.trace.heals.push(HealRecord {
            index: p.index,
            at: self.now,
            group_heights: heights,
            group_lucks: lucks.clone(),
            group_tips: tips.clone(),
            converged_at: None,
            winning_group: None,
        });
        self.pending_heals.push(self.trace.heals.len() - 1);
        for (g, from) in kickers.into_iter().enumerate() {
            self.record(TraceKind::HealKick {
                index: p.index,
                from,
                tip: tips[g],
                luck: lucks[g],
            });
            let msg = self.nodes[from].chain_message(from);
            self.fan_out(from, msg, None);
        }
    }

    fn after_event(&mut self) {
        if let Some(h) = self.partition.as_ref().and_then(|p| p.heal_height) {
            let p = self.partition.as_ref().expect("checked");
            let groups = &self.scenario.partitions[p.index].groups;
            if groups
                .iter()
                .all(|g| g.iter().map(|&i| self.nodes[i].height()).max().unwrap_or(0) >= h)
            {
                self.heal();
            }
        }
        if !self.pending_heals.is_empty() && self.honest_tips_equal() {
            for i in std::mem::take(&mut self.pending_heals) {
                self.trace.heals[i].converged_at = Some(self.now);
            }
        }
    }

    fn honest_tips_equal(&self) -> bool {
        let mut tips = self.adversaries.honest_ids().map(|i| self.nodes[i].tip());
        match tips.next() {
            Some(first) => tips.all(|t| t == first),
            None => true,
        }
    }

    fn inject_tx(&mut self) {
        if self.winding_down() {
            return;
        }
        let honest: Vec<ParticipantId> = self.adversaries.honest_ids().collect();
        let pool = if honest.is_empty() { (0..self.nodes.len()).collect() } else { honest };
        let to = pool[self.rng.random_range(0..pool.len())];
        let mut payload = format!("tx-{}-", self.tx_counter).into_bytes();
        self.tx_counter += 1;
        while payload.len() < self.scenario.workload.payload_bytes {
            payload.push(self.rng.random());
        }
        let tx = Transaction::new(payload);
        self.record(TraceKind::InjectTx { to, tx: tx.id() });
        self.with_node(to, |n, port, ctx| {
            n.deliver(&Message::new(Body::Transaction(tx), None), port, ctx);
        });
        self.push(self.now + self.scenario.workload.tx_interval, Action::InjectTx);
    }

    fn adversary_step(&mut self) {
        for i in 0..self.adversaries.forks.len() {
            self.fork_step(i);
        }
        for i in 0..self.adversaries.withholders.len() {
            let w = &self.adversaries.withholders[i];
            if w.revealed {
                continue;
            }
            let reached = w.members.iter().any(|&m| self.nodes[m].height() >= w.reveal_height);
            if reached {
                let from = *w
                    .members
                    .iter()
                    .max_by(|&&a, &&b| self.nodes[a].luck().total_cmp(&self.nodes[b].luck()))
                    .expect("non-empty");
                self.adversaries.withholders[i].revealed = true;
                self.record(TraceKind::WithholdReveal { group: i, from });
                let msg = self.nodes[from].chain_message(from);
                self.fan_out(from, msg, None);
            }
        }
        let active = self.adversaries.forks.iter().any(|f| f.phase != ForkPhase::Revealed)
            || self.adversaries.withholders.iter().any(|w| !w.revealed);
        if active && !self.winding_down() {
            self.push(self.now + ADVERSARY_STEP, Action::AdversaryStep);
        }
    }

    fn fork_step(&mut self, i: usize) {
        let fork = &self.adversaries.forks[i];
        let members = fork.members.clone();
        let target = fork.fork_height + fork.depth;
        match fork.phase {
            ForkPhase::Public => {
                if members.iter().all(|&m| self.nodes[m].height() >= fork.fork_height) {
                    self.adversaries.forks[i].phase = ForkPhase::Private;
                    for &m in &members {
                        self.nodes[m].set_max_height(Some(target));
                    }
                    self.record(TraceKind::ForkPrivate { coalition: i });
                }
            }
            ForkPhase::Private => {
                let private = members
                    .iter()
                    .copied()
                    .max_by(|&a, &b| self.nodes[a].luck().total_cmp(&self.nodes[b].luck()).then(b.cmp(&a)))
                    .expect("non-empty");
                let honest_best = self
                    .adversaries
                    .honest_ids()
                    .max_by(|&a, &b| self.nodes[a].luck().total_cmp(&self.nodes[b].luck()).then(b.cmp(&a)));
                let honest_height = self.adversaries.honest_ids().map(|h| self.nodes[h].height()).max().unwrap_or(0);
                let private_height = members.iter().map(|&m| self.nodes[m].height()).max().unwrap_or(0);
                // Reveal once both sides are `depth` blocks past the branch
                // point and no private block is still waiting for release.
                let settled = members.iter().all(|&m| match &self.nodes[m] {
                    Node::Base(p) => !p.is_mining(),
                    Node::Super(_) => true,
                });
                if private_height >= target && honest_height >= target && settled {
                    let node = &self.nodes[private];
                    let record = RevealRecord {
                        at: self.now,
                        fork_height: self.adversaries.forks[i].fork_height,
                        private_height: node.height(),
                        private_tip: node.tip(),
                        private_luck: node.luck(),
                        honest_height,
                        honest_luck: honest_best.map_or(0.0, |h| self.nodes[h].luck()),
                        succeeded: None,
                    };
                    self.adversaries.forks[i].phase = ForkPhase::Revealed;
                    self.adversaries.forks[i].reveal = Some(record);
                    self.record(TraceKind::Reveal {
                        coalition: i,
                        from: private,
                        tip: node.tip(),
                        luck: node.luck(),
                    });
                    let msg = self.nodes[private].chain_message(private);
                    self.fan_out(private, msg, None);
                    // Back to honest behavior, starting from what was heard meanwhile.
                    let observed = self.adversaries.forks[i].observed.take();
                    let horizon = self.scenario.horizon;
                    for &m in &members {
                        self.nodes[m].set_max_height(Some(horizon));
                        if let Some(chain) = observed.clone() {
                            let msg = Message::new(Body::Chain(chain), None);
                            self.with_node(m, |n, port, ctx| {
                                n.deliver(&msg, port, ctx);
                            });
                        }
                        self.with_node(m, |n, port, ctx| n.resume(port, ctx));
                    }
                }
            }
            ForkPhase::Revealed => {}
        }
    }

    fn spoof_step(&mut self, i: usize) {
        if self.winding_down() {
            return;
        }
        let members = self.adversaries.spoofers[i].members.clone();
        let n = self.nodes.len();
        for &from in &members {
            let mut claimed = self.rng.random_range(0..n);
            if claimed == from {
                claimed = (claimed + 1) % n;
            }
            let mut msgs: Vec<Message> = Vec::new();
            let heard = &self.adversaries.spoofers[i].heard;
            if !heard.is_empty() {
                let tx = heard[self.rng.random_range(0..heard.len())].clone();
                msgs.push(Message::new(Body::Transaction(tx), Some(claimed)));
            }
            if let Some(chain) = self.nodes[from].base_chain() {
                if let Some(bad) = tamper_luck(chain, 0.999_999_9) {
                    msgs.push(Message::new(Body::Chain(bad), Some(claimed)));
                }
                if !chain.is_empty() {
                    msgs.push(Message::new(Body::Chain(chain.clone()), Some(claimed)));
                }
            }
            for msg in msgs {
                self.trace.spoofed += 1;
                self.record(TraceKind::Spoof {
                    from,
                    claimed,
                    kind: msg.kind().as_str(),
                });
                self.fan_out(from, msg, None);
            }
        }
        let interval = self.adversaries.spoofers[i].interval;
        self.push(self.now + interval, Action::Spoof(i));
    }

    fn finish(mut self) -> SimOutcome {
        // Reveal outcomes: did honest nodes end on the private fork?
        let honest: Vec<ParticipantId> = self.adversaries.honest_ids().collect();
        for fork in &mut self.adversaries.forks {
            if let Some(mut r) = fork.reveal.take() {
                r.succeeded = Some(honest.iter().all(|&h| self.nodes[h].contains(&r.private_tip)));
                self.trace.reveals.push(r);
            }
        }
        let honest: Vec<bool> = (0..self.nodes.len()).map(|i| self.adversaries.is_honest(i)).collect();
        self.trace.finals = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| FinalState {
                node: i,
                honest: honest[i],
                height: n.height(),
                tip: n.tip(),
                luck: n.luck(),
            })
            .collect();
        let reference = honest.iter().position(|&h| h).unwrap_or(0);
        self.trace.rounds = self.summarize(reference);
        for h in self.trace.heals.iter_mut() {
            h.winning_group = h.group_tips.iter().position(|t| self.nodes[reference].contains(t));
        }
        self.trace.callback_spread = self
            .callbacks
            .iter()
            .filter(|(_, by_node)| by_node.len() > 1)
            .map(|(&height, by_node)| {
                let max = by_node.values().max().copied().unwrap_or(0);
                let min = by_node.values().min().copied().unwrap_or(0);
                (height, max - min)
            })
            .collect();
        self.trace.spoofed = self.adversaries.report.spoofed.max(self.trace.spoofed);
        // Close the digest over the summary so it covers the outcome too.
        let summary = serde_json::to_string(&(&self.trace.finals, &self.trace.rounds, &self.trace.accounting))
            .expect("summary serializes");
        self.digest.update(summary.as_bytes());
        self.trace.digest = self.digest.clone().finish();
        SimOutcome {
            trace: self.trace,
            nodes: self.nodes,
            cpus: self.cpus,
            registry: Arc::new(self.ctx.validator.registry().clone()),
        }
    }

    fn summarize(&self, reference: ParticipantId) -> Vec<RoundSummary> {
        let counters = |h: usize| self.round_counters.get(&h).copied().unwrap_or((0, 0));
        let mut rows = Vec::new();
        let mut luck = 0.0;
        match &self.nodes[reference] {
            Node::Base(p) => {
                for (i, b) in p.chain().blocks().into_iter().enumerate() {
                    luck += b.luck();
                    let (messages, bytes) = counters(i + 1);
                    rows.push(RoundSummary {
                        height: i + 1,
                        winner: self.trace.block_miner.get(&b.digest()).copied(),
                        winner_l: b.luck(),
                        chain_luck: luck,
                        messages,
                        bytes,
                    });
                }
            }
            Node::Super(p) => {
                for (i, b) in p.chain().blocks().into_iter().enumerate() {
                    luck += b.luck();
                    let (messages, bytes) = counters(i + 1);
                    let deciding = b.members().last().map(|m| (m.proof.nonce(), m.proof.l().to_bits()));
                    rows.push(RoundSummary {
                        height: i + 1,
                        winner: deciding.and_then(|k| self.trace.proof_miner.get(&k).copied()),
                        winner_l: b.luck(),
                        chain_luck: luck,
                        messages,
                        bytes,
                    });
                }
            }
        }
        rows
    }
}

/// Primitive-only consensus modes: each round every participant runs the
/// primitive on a shared round nonce and the attestations are verified.
/// No chain is built.
pub fn run_primitive_rounds(scenario: &Scenario) -> SimOutcome {
    let (cpus, registry, clock) = manufacture(scenario);
    let cfg = scenario.protocol;
    let mut digest = RunningDigest::new();
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let measurement = match scenario.consensus {
        Consensus::ProofOfWork => work_measurement(),
        Consensus::ProofOfTime => time_measurement(),
        _ => ownership_measurement(),
    };
    for round in 1..=scenario.horizon {
        let nonce = Digest::tagged(b"luckchain/round-nonce", &[&scenario.seed.to_be_bytes(), &(round as u64).to_be_bytes()]);
        let mut attestations = Vec::new();
        let mut measure = 0u64;
        let mut winner: Option<(u64, ParticipantId)> = None;
        match scenario.consensus {
            Consensus::ProofOfWork => {
                for (id, cpu) in cpus.iter().enumerate() {
                    let enclave = cpu.start_enclave(measurement);
                    // Each part searches from its own starting point.
                    let own = Digest::tagged(b"luckchain/pow-start", &[&nonce.0, &cpu.id().0]);
                    if let Ok(out) = tee_pow(&enclave, &own.0, cfg.pow_difficulty, cfg.pow_max_iterations) {
                        measure += out.evaluations;
                        if winner.is_none_or(|(e, _)| out.evaluations < e) {
                            winner = Some((out.evaluations, id));
                        }
                        attestations.push(out.attestation);
                    }
                }
            }
            Consensus::ProofOfTime => {
                let started = clock.now();
                let enclaves: Vec<_> = cpus.iter().map(|c| c.start_enclave(measurement)).collect();
                let locks: Vec<_> = enclaves.iter().map(|e| proof_of_time(e, &nonce.0, cfg.pot_duration)).collect();
                let ready = locks.iter().map(|l| l.ready_at()).max().unwrap_or(0);
                clock.advance_to(ready.max(started + cfg.pot_duration));
                for (e, lock) in enclaves.iter().zip(locks) {
                    if let Ok(att) = finish_proof_of_time(e, lock) {
                        attestations.push(att);
                    }
                }
                measure = clock.now() - started;
            }
            _ => {
                let mut pseudonyms = std::collections::BTreeSet::new();
                for cpu in &cpus {
                    let enclave = cpu.start_enclave(measurement);
                    let att = proof_of_ownership(&enclave, &nonce.0);
                    pseudonyms.extend(att.pseudonym());
                    attestations.push(att);
                }
                measure = pseudonyms.len() as u64;
            }
        }
        let verified = attestations
            .iter()
            .filter(|a| registry.verify_attestation(a, &measurement).is_some())
            .count();
        let row = PrimitiveRound {
            round,
            attestations: attestations.len(),
            verified,
            measure,
            winner: winner.map(|(_, id)| id),
        };
        let line = serde_json::to_string(&row).expect("row serializes");
        digest.update(line.as_bytes());
        if scenario.outputs.events {
            events.push(line);
        }
        rows.push(row);
    }
    let trace = EventTrace {
        seed: scenario.seed,
        digest: digest.finish(),
        end_time: clock.now(),
        events_processed: rows.len() as u64,
        accounting: Accounting::default(),
        rounds: Vec::new(),
        primitive_rounds: rows,
        finals: Vec::new(),
        heals: Vec::new(),
        callback_spread: Vec::new(),
        block_miner: BTreeMap::new(),
        proof_miner: BTreeMap::new(),
        note_counts: BTreeMap::new(),
        spoofed: 0,
        reveals: Vec::new(),
        events,
    };
    SimOutcome {
        trace,
        nodes: Vec::new(),
        cpus,
        registry: Arc::new(registry),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AdversaryKind, AdversarySpec};
    use crate::ledger::valid;

    fn run_ok(s: &Scenario) -> SimOutcome {
        run(s).expect("valid scenario")
    }

    #[test]
    fn single_node_mines_each_round() {
        let s = Scenario::honest(1, 3, 7);
        let out = run_ok(&s);
        let chain = out.nodes[0].base_chain().unwrap();
        assert_eq!(chain.len(), 3);
        assert!(valid(chain, &out.registry, &luck_measurement()));
        assert_eq!(out.trace.rounds.len(), 3);
        assert!(out.trace.rounds.iter().all(|r| r.winner == Some(0)));
    }

    #[test]
    fn same_seed_same_digest() {
        let s = Scenario::honest(6, 5, 42);
        let a = run_ok(&s);
        let b = run_ok(&s);
        assert_eq!(a.trace.digest, b.trace.digest);
        assert_eq!(a.trace.finals, b.trace.finals);
        let mut other = s.clone();
        other.seed = 43;
        assert_ne!(run_ok(&other).trace.digest, a.trace.digest);
    }

    #[test]
    fn honest_network_converges() {
        let s = Scenario::honest(20, 8, 3);
        let out = run_ok(&s);
        assert!(out.trace.honest_converged());
        for n in &out.nodes {
            assert_eq!(n.height(), 8);
            assert!(valid(n.base_chain().unwrap(), &out.registry, &luck_measurement()));
        }
        let a = &out.trace.accounting;
        assert_eq!(a.sent, a.delivered + a.dropped + a.ignored);
    }

    #[test]
    fn partition_isolates_groups_until_heal() {
        let mut s = Scenario::honest(6, 8, 11);
        s.partitions.push(PartitionConfig {
            groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
            start: 0,
            end: None,
            heal_height: Some(4),
        });
        let out = run_ok(&s);
        let heal = &out.trace.heals[0];
        assert!(heal.group_heights.iter().all(|&h| h >= 4));
        assert_ne!(heal.group_tips[0], heal.group_tips[1]);
        assert!(out.trace.accounting.dropped > 0);
        assert!(heal.converged_at.is_some());
        assert!(heal.winning_group.is_some());
        assert!(out.trace.honest_converged());
    }

    #[test]
    fn header_first_counts_fewer_bytes() {
        let full = Scenario::honest(8, 4, 5);
        let mut hf = full.clone();
        hf.propagation = Propagation::HeaderFirst;
        let a = run_ok(&full);
        let b = run_ok(&hf);
        assert!(b.trace.accounting.bytes < a.trace.accounting.bytes);
        assert!(b.trace.honest_converged());
    }

    #[test]
    fn superblock_network_converges() {
        let mut s = Scenario::honest(5, 4, 9);
        s.consensus = Consensus::Superblock;
        s.m = Some(3);
        let out = run_ok(&s);
        assert!(out.trace.honest_converged());
        let chain = out.nodes[0].super_chain().unwrap();
        assert!(!chain.is_empty());
        assert!(out.trace.rounds.iter().all(|r| r.winner.is_some()));
    }

    #[test]
    fn primitive_modes_verify() {
        for consensus in [Consensus::ProofOfWork, Consensus::ProofOfTime, Consensus::ProofOfOwnership] {
            let mut s = Scenario::honest(3, 2, 1);
            s.consensus = consensus;
            s.protocol.pow_difficulty = 6;
            let out = run_ok(&s);
            assert_eq!(out.trace.primitive_rounds.len(), 2);
            for r in &out.trace.primitive_rounds {
                assert_eq!(r.attestations, 3, "{consensus:?}");
                assert_eq!(r.verified, 3, "{consensus:?}");
            }
        }
    }

    #[test]
    fn minority_fork_reveals() {
        let mut s = Scenario::honest(3, 6, 21);
        let mut spec = AdversarySpec::new(AdversaryKind::MinorityFork, vec![2]);
        spec.fork_height = 1;
        spec.depth = Some(2);
        s.adversaries.push(spec);
        let out = run_ok(&s);
        assert_eq!(out.trace.reveals.len(), 1);
        assert!(out.trace.reveals[0].succeeded.is_some());
        assert!(out.trace.honest_converged());
    }

    #[test]
    fn lone_minority_fork_wins_about_a_third() {
        // One private node against two honest ones over a single block:
        // the private block wins iff its draw beats the better of two.
        let trials = 300;
        let mut won = 0;
        for seed in 0..trials {
            let mut s = Scenario::honest(3, 3, seed);
            let mut spec = AdversarySpec::new(AdversaryKind::MinorityFork, vec![2]);
            spec.fork_height = 1;
            spec.depth = Some(1);
            s.adversaries.push(spec);
            let out = run_ok(&s);
            if out.trace.reveals[0].succeeded == Some(true) {
                won += 1;
            }
        }
        let p = won as f64 / trials as f64;
        let sigma3 = 3.0 * (1.0f64 / 3.0 * 2.0 / 3.0 / trials as f64).sqrt();
        assert!((p - 1.0 / 3.0).abs() <= sigma3, "private fork won {p}");
    }

    #[test]
    fn withholding_and_spoofing_do_not_break_honest_nodes() {
        let mut s = Scenario::honest(6, 6, 8);
        let mut withhold = AdversarySpec::new(AdversaryKind::WithholdReveal, vec![4]);
        withhold.reveal_height = Some(4);
        let mut spoofer = AdversarySpec::new(AdversaryKind::Spoofer, vec![5]);
        spoofer.spoof_interval = 3000;
        s.adversaries.extend([withhold, spoofer]);
        let out = run_ok(&s);
        assert!(out.trace.spoofed > 0);
        assert!(out.trace.accounting.withheld > 0);
        assert!(out.trace.note_counts.get("honest.rejected_invalid").copied().unwrap_or(0) > 0);
        assert!(out.trace.honest_converged());
        for f in out.trace.finals.iter().filter(|f| f.honest) {
            assert!(valid(out.nodes[f.node].base_chain().unwrap(), &out.registry, &luck_measurement()));
        }
    }

    #[test]
    fn events_written_when_requested() {
        let mut s = Scenario::honest(3, 2, 2);
        s.outputs.events = true;
        let out = run_ok(&s);
        let text = out.trace.to_jsonl();
        assert!(text.lines().count() > 10);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("event").is_some() && v.get("t").is_some());
        }
    }
}
