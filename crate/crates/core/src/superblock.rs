//! Luckiest-m super-blocks.
//!
//! Each round every participant mines an ordinary block with a linkable proof
//! whose basename is the parent digest. The m luckiest blocks from distinct
//! CPUs are merged into one super-block whose luck is the smallest of the m
//! values, so a few compromised CPUs cannot choose it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use log::warn;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::digest::Digest;
use crate::ledger::{
    tx_root, valid_transactions, Block, BlockHeader, Chain, FaultKind, Linked, Transaction, ValidationContext,
    MAX_TXS_PER_BLOCK,
};
use crate::node::{Body, Mempool, Message, MiningMode, NetworkPort, Note, ParticipantId, ProtocolContext, RoundBlock, Wake};
use crate::primitives::{anchor_parent, mine_delay, LuckEnclave, LuckProof, PendingLuck, ProofMode};
use crate::tee::Millis;

/// Upper bound on m accepted when decoding.
pub const MAX_MEMBERS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SuperBlockError {
    #[error("only {distinct} distinct CPUs among candidates, need {needed}")]
    InsufficientProofs { distinct: usize, needed: usize },
    #[error("candidates extend different parents")]
    MixedParents,
    #[error("candidate proof is not linkable")]
    NotLinkable,
    #[error("super-block size must be at least 1")]
    ZeroSize,
}

/// One merged block: its transaction ids (in the order its nonce covered)
/// and its proof.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub tx_ids: Vec<Digest>,
    pub proof: LuckProof,
}

impl Member {
    fn header(&self, parent: Digest) -> BlockHeader {
        BlockHeader {
            parent,
            tx_root: tx_root(&self.tx_ids),
        }
    }
}

#[derive(Clone)]
pub struct SuperBlock {
    parent: Digest,
    transactions: Vec<Transaction>,
    members: Vec<Member>,
    digest: Digest,
    encoded_len: usize,
}

impl fmt::Debug for SuperBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SuperBlock")
            .field("digest", &self.digest)
            .field("parent", &self.parent)
            .field("txs", &self.transactions.len())
            .field("l", &self.members.iter().map(|m| m.proof.l()).collect::<Vec<_>>())
            .finish()
    }
}

impl PartialEq for SuperBlock {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl SuperBlock {
    /// Assemble without any checks. Use [`merge_luckiest`] for honest merging.
    pub fn from_parts(parent: Digest, transactions: Vec<Transaction>, members: Vec<Member>) -> Self {
        let mut w = Writer::new();
        Self::write(&mut w, &parent, &transactions, &members);
        let bytes = w.into_bytes();
        Self {
            digest: Digest::tagged(b"luckchain/superblock", &[&bytes]),
            encoded_len: bytes.len(),
            parent,
            transactions,
            members,
        }
    }

    fn write(w: &mut Writer, parent: &Digest, txs: &[Transaction], members: &[Member]) {
        w.digest(parent).u32(txs.len() as u32);
        for tx in txs {
            tx.encode_into(w);
        }
        w.u32(members.len() as u32);
        for m in members {
            w.u32(m.tx_ids.len() as u32);
            for id in &m.tx_ids {
                w.digest(id);
            }
            m.proof.encode_into(w);
        }
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn proofs(&self) -> impl Iterator<Item = &LuckProof> {
        self.members.iter().map(|m| &m.proof)
    }

    /// Size of the member blocks if they were sent separately, for comparison
    /// with the merged encoding.
    pub fn raw_member_bytes(&self) -> usize {
        let size_of = |id: &Digest| {
            self.transactions
                .iter()
                .find(|t| t.id() == *id)
                .map_or(0, Transaction::encoded_len)
        };
        self.members
            .iter()
            .map(|m| 32 + 4 + m.tx_ids.iter().map(size_of).sum::<usize>() + m.proof.encoded_len())
            .sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }

    fn structural_check(&self, ctx: &ValidationContext<'_>) -> Result<(), &'static str> {
        if self.members.is_empty() {
            return Err("no proofs");
        }
        if let Some(m) = ctx.superblock_size {
            if self.members.len() != m {
                return Err("wrong number of proofs");
            }
        }
        if !valid_transactions(&self.transactions) || !self.transactions.windows(2).all(|w| w[0].id() < w[1].id()) {
            return Err("merged transactions malformed or unsorted");
        }
        let merged: BTreeSet<Digest> = self.transactions.iter().map(Transaction::id).collect();
        let mut covered = BTreeSet::new();
        for m in &self.members {
            let ids: BTreeSet<Digest> = m.tx_ids.iter().copied().collect();
            if ids.len() != m.tx_ids.len() {
                return Err("member lists a transaction twice");
            }
            covered.extend(ids);
        }
        if covered != merged {
            return Err("merged transactions differ from member union");
        }
        let mut pseudonyms = BTreeSet::new();
        for (i, m) in self.members.iter().enumerate() {
            let att = m.proof.attestation();
            if att.basename() != Some(&self.parent.0[..]) {
                return Err("basename is not the parent digest");
            }
            if !m.proof.verify(ctx.registry, &ctx.measurement) {
                return Err("attestation");
            }
            if m.proof.nonce() != m.header(self.parent).digest() {
                return Err("nonce binding");
            }
            let p = att.pseudonym().ok_or("missing pseudonym")?;
            if !pseudonyms.insert(p) {
                return Err("two proofs from one CPU");
            }
            if i > 0 && self.members[i - 1].proof.l() <= m.proof.l() {
                return Err("proofs not in strictly descending luck order");
            }
        }
        Ok(())
    }
}

impl Linked for SuperBlock {
    const SNAPSHOT_MAGIC: [u8; 8] = *b"LUCKSBC1";

    fn parent(&self) -> Digest {
        self.parent
    }

    fn digest(&self) -> Digest {
        self.digest
    }

    fn luck(&self) -> f64 {
        superblock_luck(self)
    }

    fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    fn encoded_len(&self) -> usize {
        self.encoded_len
    }

    fn encode_into(&self, w: &mut Writer) {
        Self::write(w, &self.parent, &self.transactions, &self.members);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let parent = r.digest()?;
        let count = r.u32()? as usize;
        if count > MAX_TXS_PER_BLOCK * MAX_MEMBERS {
            return Err(DecodeError::TooLong { len: count, max: MAX_TXS_PER_BLOCK * MAX_MEMBERS });
        }
        let transactions = (0..count)
            .map(|_| Transaction::decode_from(r))
            .collect::<Result<Vec<_>, _>>()?;
        let m = r.u32()? as usize;
        if m > MAX_MEMBERS {
            return Err(DecodeError::TooLong { len: m, max: MAX_MEMBERS });
        }
        let mut members = Vec::with_capacity(m);
        for _ in 0..m {
            let n = r.u32()? as usize;
            if n > MAX_TXS_PER_BLOCK {
                return Err(DecodeError::TooLong { len: n, max: MAX_TXS_PER_BLOCK });
            }
            let tx_ids = (0..n).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
            members.push(Member {
                tx_ids,
                proof: LuckProof::decode_from(r)?,
            });
        }
        Ok(SuperBlock::from_parts(parent, transactions, members))
    }

    fn check(&self, ctx: &ValidationContext<'_>) -> Result<(), FaultKind> {
        self.structural_check(ctx).map_err(FaultKind::SuperBlock)
    }
}

/// Luck of a super-block: the smallest of its member values.
pub fn superblock_luck(sb: &SuperBlock) -> f64 {
    sb.members.last().map_or(0.0, |m| m.proof.l())
}

/// Structural and cryptographic checks, without pinning the member count.
pub fn validate_superblock(sb: &SuperBlock, ctx: &ValidationContext<'_>) -> bool {
    sb.structural_check(ctx).is_ok()
}

/// Same as [`validate_superblock`] but naming the failed rule.
pub fn diagnose_superblock(sb: &SuperBlock, ctx: &ValidationContext<'_>) -> Result<(), &'static str> {
    sb.structural_check(ctx)
}

/// Order in which candidates compete: luck, then digest for exact ties.
fn better(a: &Block, b: &Block) -> bool {
    (a.proof().l(), a.digest()) > (b.proof().l(), b.digest())
}

/// Keep the luckiest candidate per pseudonym, then the m luckiest overall.
/// The result does not depend on candidate order.
pub fn merge_luckiest(candidates: &[Block], m: usize) -> Result<SuperBlock, SuperBlockError> {
    if m == 0 {
        return Err(SuperBlockError::ZeroSize);
    }
    let parent = match candidates.first() {
        Some(b) => b.parent(),
        None => return Err(SuperBlockError::InsufficientProofs { distinct: 0, needed: m }),
    };
    let mut best: BTreeMap<[u8; 32], &Block> = BTreeMap::new();
    for b in candidates {
        if b.parent() != parent {
            return Err(SuperBlockError::MixedParents);
        }
        let p = b.proof().pseudonym().ok_or(SuperBlockError::NotLinkable)?;
        match best.get(&p) {
            Some(kept) if !better(b, kept) => {}
            _ => {
                best.insert(p, b);
            }
        }
    }
    if best.len() < m {
        return Err(SuperBlockError::InsufficientProofs {
            distinct: best.len(),
            needed: m,
        });
    }
    let mut chosen: Vec<&Block> = best.into_values().collect();
    chosen.sort_by(|a, b| b.proof().l().total_cmp(&a.proof().l()).then(b.digest().cmp(&a.digest())));
    chosen.truncate(m);

    let mut merged: BTreeMap<Digest, Transaction> = BTreeMap::new();
    for b in &chosen {
        for tx in b.transactions() {
            merged.entry(tx.id()).or_insert_with(|| tx.clone());
        }
    }
    let members = chosen
        .iter()
        .map(|b| Member {
            tx_ids: b.transactions().iter().map(Transaction::id).collect(),
            proof: b.proof().clone(),
        })
        .collect();
    Ok(SuperBlock::from_parts(parent, merged.into_values().collect(), members))
}

/// Quick admission checks for a candidate block offered for merging.
pub fn candidate_ok(block: &Block, ctx: &ValidationContext<'_>) -> bool {
    block.proof().attestation().basename() == Some(&block.parent().0[..])
        && block.proof().pseudonym().is_some()
        && block.check(ctx).is_ok()
}

/// Pool of admitted candidates per parent, one per pseudonym.
#[derive(Debug, Default, Clone)]
pub struct CandidatePool {
    by_parent: BTreeMap<Digest, BTreeMap<[u8; 32], Block>>,
}

/// Outcome of offering a candidate to the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Added,
    /// Replaced a less lucky candidate from the same CPU.
    Replaced,
    /// Same CPU already supplied a candidate at least as lucky.
    DuplicatePseudonym,
    /// Exact block already held.
    Known,
}

impl CandidatePool {
    pub fn offer(&mut self, block: Block) -> Admission {
        let pseudonym = block.proof().pseudonym().expect("admitted candidates are linkable");
        let slot = self.by_parent.entry(block.parent()).or_default();
        match slot.get(&pseudonym) {
            Some(kept) if kept.digest() == block.digest() => Admission::Known,
            Some(kept) if !better(&block, kept) => Admission::DuplicatePseudonym,
            Some(_) => {
                slot.insert(pseudonym, block);
                Admission::Replaced
            }
            None => {
                slot.insert(pseudonym, block);
                Admission::Added
            }
        }
    }

    pub fn candidates(&self, parent: &Digest) -> Vec<Block> {
        self.by_parent
            .get(parent)
            .map(|s| s.values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn distinct(&self, parent: &Digest) -> usize {
        self.by_parent.get(parent).map_or(0, BTreeMap::len)
    }

    /// Forget candidates for parents other than `keep`.
    pub fn retain_parent(&mut self, keep: &Digest) {
        self.by_parent.retain(|p, _| p == keep);
    }
}

#[derive(Debug, Clone)]
enum PendingCandidate {
    Honest {
        parent: Digest,
        txs: Vec<Transaction>,
        luck: PendingLuck,
    },
    Forged(Vec<Block>),
}

/// Extra time after the longest release delay before merging, so candidates
/// released at the end of the window can still arrive.
pub const DEFAULT_MERGE_WAIT: Millis = 2_000;

/// Participant running the super-block variant of the protocol.
#[derive(Debug)]
pub struct SuperParticipant {
    id: ParticipantId,
    m: usize,
    merge_wait: Millis,
    enclave: LuckEnclave,
    chain: Chain<SuperBlock>,
    mempool: Mempool,
    pool: CandidatePool,
    round_block: Option<RoundBlock>,
    callback_due: Option<Millis>,
    generation: u64,
    release_seq: u64,
    pending: Option<PendingCandidate>,
    max_height: Option<usize>,
    mining: MiningMode,
    /// Tx ids of our own candidate for the current parent, for mempool recovery.
    in_candidate: Vec<Transaction>,
    /// Forged candidates released this round.
    forged: Vec<Block>,
}

impl SuperParticipant {
    pub fn new(id: ParticipantId, m: usize, merge_wait: Millis, enclave: LuckEnclave, mining: MiningMode) -> Self {
        Self {
            id,
            m,
            merge_wait,
            enclave,
            chain: Chain::new(),
            mempool: Mempool::new(),
            pool: CandidatePool::default(),
            round_block: None,
            callback_due: None,
            generation: 0,
            release_seq: 0,
            pending: None,
            max_height: None,
            mining,
            in_candidate: Vec::new(),
            forged: Vec::new(),
        }
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn chain(&self) -> &Chain<SuperBlock> {
        &self.chain
    }

    pub fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    pub fn pool(&self) -> &CandidatePool {
        &self.pool
    }

    pub fn callback_due(&self) -> Option<Millis> {
        self.callback_due
    }

    pub fn set_max_height(&mut self, height: Option<usize>) {
        self.max_height = height;
    }

    pub fn start(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        self.new_round(port, ctx);
    }

    pub fn resume(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        if self.callback_due.is_none() && self.pending.is_none() {
            self.new_round(port, ctx);
        }
    }

    pub fn new_round(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        let latest = self.chain.latest();
        self.round_block = Some(RoundBlock::of(latest));
        self.enclave.pol_round(latest);
        self.generation += 1;
        self.callback_due = None;
        self.pending = None;
        self.forged.clear();
        if self.max_height.is_none_or(|h| self.chain.len() < h) {
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

    pub fn handle_transaction(&mut self, tx: Transaction, port: &mut dyn NetworkPort) -> bool {
        if self.mempool.insert(tx.clone()) {
            port.broadcast(self.id, Message::new(Body::Transaction(tx), Some(self.id)));
            true
        } else {
            false
        }
    }

    /// Admit a candidate for the current tip. Candidates for other parents
    /// are dropped; they cannot be merged onto our chain.
    pub fn handle_candidate(&mut self, block: Block, port: &mut dyn NetworkPort, ctx: &ProtocolContext) -> bool {
        if block.parent() != self.chain.tip_digest() || !candidate_ok(&block, &ctx.validator.context()) {
            return false;
        }
        match self.pool.offer(block.clone()) {
            Admission::Added => {
                port.broadcast(self.id, Message::new(Body::Candidate(block), Some(self.id)));
                true
            }
            Admission::Replaced => {
                port.note(self.id, Note::DuplicatePseudonym);
                port.broadcast(self.id, Message::new(Body::Candidate(block), Some(self.id)));
                true
            }
            Admission::DuplicatePseudonym => {
                port.note(self.id, Note::DuplicatePseudonym);
                false
            }
            Admission::Known => false,
        }
    }

    pub fn handle_chain(&mut self, chain: Chain<SuperBlock>, port: &mut dyn NetworkPort, ctx: &ProtocolContext) -> bool {
        if chain.luck() <= self.chain.luck() {
            port.note(self.id, Note::Rejected { invalid: false });
            return false;
        }
        if !ctx.validator.valid(&chain) {
            port.note(self.id, Note::Rejected { invalid: true });
            return false;
        }
        let old = std::mem::replace(&mut self.chain, chain);
        let in_candidate = std::mem::take(&mut self.in_candidate);
        self.mempool.restore(&in_candidate);
        self.mempool.reconcile(&old, &self.chain);
        self.pool.retain_parent(&self.chain.tip_digest());
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
        port.broadcast(self.id, Message::new(Body::SuperChain(self.chain.clone()), Some(self.id)));
        true
    }

    pub fn handle_wake(&mut self, wake: Wake, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        match wake {
            Wake::MineCallback { generation } if generation == self.generation => self.handle_mine_callback(port, ctx),
            Wake::ProofRelease { seq } if seq == self.release_seq => self.handle_proof_release(port, ctx),
            Wake::Merge { generation } if generation == self.generation => self.handle_merge(port, ctx),
            _ => {}
        }
    }

    fn handle_mine_callback(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        self.callback_due = None;
        let parent = self.chain.tip_digest();
        let txs = self.mempool.drain();
        let header = BlockHeader::new(parent, &txs);
        let now = port.now();
        let (pending, delay, l) = match &self.mining {
            MiningMode::Honest => {
                match self
                    .enclave
                    .pol_mine(&header, self.chain.latest(), &ctx.cfg, ProofMode::Linkable)
                {
                    Ok(luck) => {
                        let (d, l) = (luck.release_delay(), luck.l());
                        (PendingCandidate::Honest { parent, txs: txs.clone(), luck }, d, l)
                    }
                    Err(e) => {
                        warn!("participant {} skipped a round: {e}", self.id);
                        port.note(self.id, Note::MineFailed { reason: e.to_string() });
                        self.mempool.restore(&txs);
                        self.new_round(port, ctx);
                        return;
                    }
                }
            }
            MiningMode::Forged { l, oracle } => {
                // Two proofs under one basename: the second one differs only
                // in content and is slightly less lucky.
                let forge = |txs: Vec<Transaction>, l: f64| {
                    let header = BlockHeader::new(parent, &txs);
                    let att = oracle.attest(
                        ctx.validator.measurement(),
                        &LuckProof::payload(&header.digest(), l),
                        Some(&parent.0),
                    );
                    Block::new(parent, txs, LuckProof::from_attestation(att).expect("well-formed payload"))
                };
                let first = forge(txs.clone(), *l);
                let second = forge(
                    vec![Transaction::new(format!("forged by {} at {now}", self.id).into_bytes())],
                    (*l - 1e-6).max(0.0),
                );
                (PendingCandidate::Forged(vec![first, second]), mine_delay(*l, &ctx.cfg), *l)
            }
        };
        self.in_candidate = txs;
        self.pending = Some(pending);
        self.release_seq += 1;
        port.note(self.id, Note::Mined { l, release_at: now + delay });
        port.schedule(self.id, now + delay, Wake::ProofRelease { seq: self.release_seq });
        port.schedule(
            self.id,
            now + ctx.cfg.max_mine_delay + self.merge_wait,
            Wake::Merge { generation: self.generation },
        );
    }

    fn handle_proof_release(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        let Some(pending) = self.pending.take() else {
            return;
        };
        let blocks = match pending {
            PendingCandidate::Honest { parent, txs, luck } => match self.enclave.release(luck) {
                Ok(proof) => vec![Block::new(parent, txs, proof)],
                Err(e) => {
                    warn!("participant {} lost its proof: {e}", self.id);
                    port.note(self.id, Note::MineFailed { reason: e.to_string() });
                    return;
                }
            },
            PendingCandidate::Forged(blocks) => blocks,
        };
        for block in blocks {
            port.note(
                self.id,
                Note::Released {
                    block: block.digest(),
                    nonce: block.proof().nonce(),
                    l: block.proof().l(),
                },
            );
            if block.parent() != self.chain.tip_digest() {
                continue;
            }
            // Forged duplicates are pushed to peers directly so that their
            // rejection happens at honest nodes, not only in our own pool.
            if matches!(self.mining, MiningMode::Forged { .. }) {
                self.forged.push(block.clone());
                self.pool.offer(block.clone());
                port.broadcast(self.id, Message::new(Body::Candidate(block), Some(self.id)));
            } else {
                self.handle_candidate(block, port, ctx);
            }
        }
    }

    fn handle_merge(&mut self, port: &mut dyn NetworkPort, ctx: &ProtocolContext) {
        let parent = self.chain.tip_digest();
        let candidates = self.pool.candidates(&parent);
        if matches!(self.mining, MiningMode::Forged { .. }) {
            self.broadcast_stuffed(&candidates, parent, port);
        }
        match merge_luckiest(&candidates, self.m) {
            Ok(sb) => {
                let extended = self.chain.push(sb);
                if !self.handle_chain(extended, port, ctx) {
                    self.resume(port, ctx);
                }
            }
            Err(e) => {
                port.note(
                    self.id,
                    Note::MergeVoid {
                        distinct: self.pool.distinct(&parent),
                    },
                );
                log::debug!("participant {} void round: {e}", self.id);
                let in_candidate = std::mem::take(&mut self.in_candidate);
                self.mempool.restore(&in_candidate);
                self.new_round(port, ctx);
            }
        }
    }

    /// A compromised participant also tries a super-block carrying both of
    /// its proofs; honest validation must refuse it.
    fn broadcast_stuffed(&self, pool: &[Block], parent: Digest, port: &mut dyn NetworkPort) {
        let MiningMode::Forged { .. } = self.mining else {
            return;
        };
        let mut chosen: Vec<Block> = pool.to_vec();
        chosen.extend(self.forged.iter().cloned());
        let mut seen = HashMap::new();
        chosen.retain(|b| seen.insert(b.digest(), ()).is_none());
        if chosen.len() < self.m {
            return;
        }
        chosen.sort_by(|a, b| b.proof().l().total_cmp(&a.proof().l()));
        chosen.truncate(self.m);
        let mut merged: BTreeMap<Digest, Transaction> = BTreeMap::new();
        for b in &chosen {
            for tx in b.transactions() {
                merged.entry(tx.id()).or_insert_with(|| tx.clone());
            }
        }
        let members = chosen
            .iter()
            .map(|b| Member {
                tx_ids: b.transactions().iter().map(Transaction::id).collect(),
                proof: b.proof().clone(),
            })
            .collect();
        let sb = SuperBlock::from_parts(parent, merged.into_values().collect(), members);
        port.broadcast(self.id, Message::new(Body::SuperChain(self.chain.push(sb)), Some(self.id)));
    }
}
