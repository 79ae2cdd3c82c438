//! Per-participant protocol state machine.
//!
//! A [`Participant`] reacts to three inputs: transactions and chains from
//! the network, and its own timers. All side effects (broadcasts, timers,
//! trace notes) go through a [`NetworkPort`], which the simulator implements.
//! A participant's own mined chain re-enters through [`Participant::handle_chain`]
//! exactly like a chain from a peer, so it is only broadcast when it beats
//! everything already seen.

use std::collections::HashSet;

use indexmap::IndexMap;
use log::warn;

use crate::digest::Digest;
use crate::ledger::{block_digest, commit, Block, BlockHeader, Chain, ChainValidator, Linked, PendingCommit, Transaction};
use crate::primitives::{anchor_parent, mine_delay, AnchorParent, LuckEnclave, LuckProof, PrimitiveConfig};
use crate::superblock::SuperBlock;
use crate::tee::{Millis, SigningOracle};

pub type ParticipantId = usize;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Transaction(Transaction),
    Chain(Chain),
    /// An individual block offered for super-block merging.
    Candidate(Block),
    SuperChain(Chain<SuperBlock>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Transaction,
    Chain,
    Candidate,
    SuperChain,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Transaction => "transaction",
            MessageKind::Chain => "chain",
            MessageKind::Candidate => "candidate",
            MessageKind::SuperChain => "super_chain",
        }
    }
}

/// A network message. Senders are not authenticated; `claimed_sender` is
/// whatever the sender chose to write.
#[derive(Debug, Clone)]
pub struct Message {
    pub body: Body,
    pub claimed_sender: Option<ParticipantId>,
}

impl Message {
    pub fn new(body: Body, claimed_sender: Option<ParticipantId>) -> Self {
        Self { body, claimed_sender }
    }

    pub fn kind(&self) -> MessageKind {
        match self.body {
            Body::Transaction(_) => MessageKind::Transaction,
            Body::Chain(_) => MessageKind::Chain,
            Body::Candidate(_) => MessageKind::Candidate,
            Body::SuperChain(_) => MessageKind::SuperChain,
        }
    }

    /// Size on the wire: a one-byte kind tag plus the canonical encoding.
    pub fn wire_len(&self) -> usize {
        1 + match &self.body {
            Body::Transaction(tx) => tx.encoded_len(),
            Body::Chain(c) => c.encoded_len(),
            Body::Candidate(b) => b.encoded_len(),
            Body::SuperChain(c) => c.encoded_len(),
        }
    }

    /// Luck and tip of a chain-carrying message.
    pub fn chain_summary(&self) -> Option<(usize, Digest, f64)> {
        match &self.body {
            Body::Chain(c) => Some((c.len(), c.tip_digest(), c.luck())),
            Body::SuperChain(c) => Some((c.len(), c.tip_digest(), c.luck())),
            _ => None,
        }
    }
}

/// Timer kinds a participant can set on itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wake {
    MineCallback { generation: u64 },
    ProofRelease { seq: u64 },
    Merge { generation: u64 },
}

/// Observable protocol events, recorded by the simulator's trace.
#[derive(Debug, Clone, PartialEq)]
pub enum Note {
    RoundStarted { height: usize, callback_due: Option<Millis> },
    Mined { l: f64, release_at: Millis },
    Released { block: Digest, nonce: Digest, l: f64 },
    MineFailed { reason: String },
    Adopted { height: usize, tip: Digest, luck: f64 },
    Rejected { invalid: bool },
    /// A second candidate from the same CPU for the same parent was refused
    /// or displaced the first one.
    DuplicatePseudonym,
    MergeVoid { distinct: usize },
}

pub trait NetworkPort {
    fn now(&self) -> Millis;
    fn broadcast(&mut self, from: ParticipantId, msg: Message);
    fn schedule(&mut self, who: ParticipantId, due: Millis, wake: Wake);
    fn note(&mut self, who: ParticipantId, note: Note);
}

/// Shared, read-only protocol parameters.
#[derive(Debug)]
pub struct ProtocolContext {
    pub cfg: PrimitiveConfig,
    pub validator: ChainValidator,
}

/// Pending transactions plus gossip bookkeeping.
#[derive(Debug, Default, Clone)]
pub struct Mempool {
    pending: IndexMap<Digest, Transaction>,
    seen: HashSet<Digest>,
    in_flight: Vec<Transaction>,
}

impl Mempool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a fresh, well-formed transaction. Returns false for duplicates
    /// and malformed ones.
    pub fn insert(&mut self, tx: Transaction) -> bool {
        if !tx.is_well_formed() || !self.seen.insert(tx.id()) {
            return false;
        }
        self.pending.insert(tx.id(), tx);
        true
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, id: &Digest) -> bool {
        self.pending.contains_key(id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &Transaction> {
        self.pending.values()
    }

    /// Take everything pending for a new block. The batch is remembered until
    /// the next chain switch, which puts back whatever did not make it in.
    pub fn drain(&mut self) -> Vec<Transaction> {
        let batch: Vec<Transaction> = self.pending.drain(..).map(|(_, tx)| tx).collect();
        self.in_flight.extend(batch.iter().cloned());
        batch
    }

    /// Put back transactions from a failed mining attempt.
    pub fn restore(&mut self, txs: &[Transaction]) {
        for tx in txs {
            self.pending.entry(tx.id()).or_insert_with(|| tx.clone());
        }
        self.in_flight.retain(|t| !txs.iter().any(|x| x.id() == t.id()));
    }

    /// Update after switching from `old` to `new`: transactions of abandoned
    /// blocks and of the in-flight batch return to the pool, those confirmed
    /// by the new blocks leave it.
    pub fn reconcile<B: Linked>(&mut self, old: &Chain<B>, new: &Chain<B>) {
        let fork = old.common_prefix_len(new);
        let mut returning: Vec<Transaction> = self.in_flight.drain(..).collect();
        for block in old.suffix_after(fork) {
            returning.extend(block.transactions().iter().cloned());
        }
        let confirmed: HashSet<Digest> = new
            .suffix_after(fork)
            .into_iter()
            .flat_map(|b| b.transactions().iter().map(Transaction::id))
            .collect();
        for tx in returning {
            if !confirmed.contains(&tx.id()) {
                self.pending.entry(tx.id()).or_insert(tx);
            }
        }
        self.pending.retain(|id, _| !confirmed.contains(id));
    }
}

/// The block a round was bound to, as far as the protocol needs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBlock {
    pub digest: Digest,
    pub parent: AnchorParent,
}

impl RoundBlock {
    pub fn of<B: Linked>(block: Option<&B>) -> Self {
        Self {
            digest: block_digest(block),
            parent: anchor_parent(block),
        }
    }
}

/// How a participant produces proofs.
#[derive(Debug, Clone, Default)]
pub enum MiningMode {
    #[default]
    Honest,
    /// A compromised part signing arbitrary luck values.
    Forged { l: f64, oracle: SigningOracle },
}

#[derive(Debug, Clone)]
enum PendingRelease {
    Honest(PendingCommit),
    Forged(Chain),
}

/// Protocol state of one participant in the base protocol.
#[derive(Debug)]
pub struct Participant {
    id: ParticipantId,
    enclave: LuckEnclave,
    chain: Chain,
    mempool: Mempool,
    round_block: Option<RoundBlock>,
    callback_due: Option<Millis>,
    generation: u64,
    release_seq: u64,
    pending: Option<PendingRelease>,
    max_height: Option<usize>,
    mining: MiningMode,
}

impl Participant {
    pub fn new(id: ParticipantId, enclave: LuckEnclave) -> Self {
        Self::with_mode(id, enclave, MiningMode::Honest)
    }

    pub fn with_mode(id: ParticipantId, enclave: LuckEnclave, mining: MiningMode) -> Self {
        Self {
            id,
            enclave,
            chain: Chain::new(),
            mempool: Mempool::new(),
            round_block: None,
            callback_due: None,
            generation: 0,
            release_seq: 0,
            pending: None,
            max_height: None,
            mining,
        }
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    pub fn round_block(&self) -> Option<RoundBlock> {
        self.round_block
    }

    pub fn callback_due(&self) -> Option<Millis> {
        self.callback_due
    }

    pub fn enclave(&self) -> &LuckEnclave {
        &self.enclave
    }

    pub fn is_mining(&self) -> bool {
        self.pending.is_some()
    }

    /// Stop scheduling mining callbacks once the chain reaches `height`.
    pub fn set_max_height(&mut self, height: Option<usize>) {
        self.max_height = height;
    }

    fn below_max_height(&self) -> bool {
        self.max_height.is_none_or(|h| self.chain.len() < h)
    }

    /// Enter the protocol with the empty chain.
    pub fn start(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        self.new_round(port, ctx);
    }

    /// Restart mining on the current chain if idle (no timer and no proof in flight).
    pub fn resume(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        if self.callback_due.is_none() && self.pending.is_none() {
            self.new_round(port, ctx);
        }
    }

    /// Bind the enclave to the latest block and (re)arm the mining callback.
    pub fn new_round(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        let latest = self.chain.latest();
        self.round_block = Some(RoundBlock::of(latest));
        self.enclave.pol_round(latest);
        self.generation += 1;
        self.callback_due = None;
        if self.below_max_height() {
            let due = port.now() + ctx.cfg.round_time;
            self.callback_due = Some(due);
            port.schedule(self.id, due, Wake::MineCallback { generation: self.generation });
        }
        port.note(
            self.id,
            Note::RoundStarted {
                height: self.chain.len() + 1,
                callback_due: self.callback_due,
            },
        );
    }

    /// Gossip: store and re-broadcast unseen, well-formed transactions.
    pub fn handle_transaction(&mut self, tx: Transaction, port: &mut dyn NetworkPort) -> bool {
        if self.mempool.insert(tx.clone()) {
            port.broadcast(self.id, Message::new(Body::Transaction(tx), Some(self.id)));
            true
        } else {
            false
        }
    }

    /// Fork choice: adopt strictly luckier valid chains and pass them on.
    pub fn handle_chain(&mut self, chain: Chain, port: &mut dyn NetworkPort, ctx: &ProtocolContext) -> bool {
        if chain.luck() <= self.chain.luck() {
            port.note(self.id, Note::Rejected { invalid: false });
            return false;
        }
        if !ctx.validator.valid(&chain) {
            port.note(self.id, Note::Rejected { invalid: true });
            return false;
        }
        let old = std::mem::replace(&mut self.chain, chain);
        self.mempool.reconcile(&old, &self.chain);
        port.note(
            self.id,
            Note::Adopted {
                height: self.chain.len(),
                tip: self.chain.tip_digest(),
                luck: self.chain.luck(),
            },
        );
        let restart = match self.round_block {
            None => true,
            Some(round) => anchor_parent(self.chain.latest()) != round.parent,
        };
        if restart {
            self.new_round(port, ctx);
        }
        port.broadcast(self.id, Message::new(Body::Chain(self.chain.clone()), Some(self.id)));
        true
    }

    pub fn handle_wake(&mut self, wake: Wake, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        match wake {
            Wake::MineCallback { generation } if generation == self.generation => {
                self.handle_mine_callback(port, ctx)
            }
            Wake::ProofRelease { seq } if seq == self.release_seq => self.handle_proof_release(port, ctx),
            _ => {}
        }
    }

    /// Round timer fired: commit pending transactions and wait out `f(l)`.
    pub fn handle_mine_callback(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        self.callback_due = None;
        let txs = self.mempool.drain();
        let (pending, release_delay, l) = match &self.mining {
            MiningMode::Honest => match commit(txs.clone(), &self.chain, &mut self.enclave, &ctx.cfg) {
                Ok(p) => {
                    let (d, l) = (p.release_delay(), p.l());
                    (PendingRelease::Honest(p), d, l)
                }
                Err(e) => {
                    warn!("participant {} skipped a round: {e}", self.id);
                    port.note(self.id, Note::MineFailed { reason: e.to_string() });
                    self.mempool.restore(&txs);
                    self.new_round(port, ctx);
                    return;
                }
            },
            MiningMode::Forged { l, oracle } => {
                let parent = self.chain.tip_digest();
                let header = BlockHeader::new(parent, &txs);
                let att = oracle.attest(
                    ctx.validator.measurement(),
                    &LuckProof::payload(&header.digest(), *l),
                    None,
                );
                let proof = LuckProof::from_attestation(att).expect("forged payload is well formed");
                let chain = self.chain.push(Block::new(parent, txs, proof));
                (PendingRelease::Forged(chain), mine_delay(*l, &ctx.cfg), *l)
            }
        };
        let release_at = port.now() + release_delay;
        self.pending = Some(pending);
        self.release_seq += 1;
        port.note(self.id, Note::Mined { l, release_at });
        port.schedule(self.id, release_at, Wake::ProofRelease { seq: self.release_seq });
    }

    /// Release delay over: deliver the mined chain to ourselves.
    pub fn handle_proof_release(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        let Some(pending) = self.pending.take() else {
            return;
        };
        let mined = match pending {
            PendingRelease::Honest(p) => match p.finish(&self.enclave) {
                Ok(chain) => chain,
                Err(e) => {
                    warn!("participant {} lost its proof: {e}", self.id);
                    port.note(self.id, Note::MineFailed { reason: e.to_string() });
                    self.mempool.restore(p.transactions());
                    self.resume(port, ctx);
                    return;
                }
            },
            PendingRelease::Forged(chain) => chain,
        };
        let block = mined.latest().expect("mined chain is non-empty");
        port.note(
            self.id,
            Note::Released {
                block: block.digest(),
                nonce: block.proof().nonce(),
                l: block.luck(),
            },
        );
        self.handle_chain(mined, port, ctx);
        // A losing block leaves us without a timer if no round restarted.
        self.resume(port, ctx);
    }
}
