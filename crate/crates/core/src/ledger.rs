//! Blocks, chains, and the three chain algorithms: commit, luck, and valid.
//!
//! [`Chain`] is a persistent list: appending shares the existing prefix, so
//! chains are cheap to clone and broadcast, and `commit` never mutates its
//! input. Each link caches the running luck total, summed in block order.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::digest::Digest;
use crate::primitives::{LuckEnclave, LuckProof, PendingLuck, PrimitiveConfig, PrimitiveError, ProofMode};
use crate::tee::{Measurement, Millis, VendorRegistry};

pub const MAX_TX_PAYLOAD: usize = 64 * 1024;
pub const MAX_TXS_PER_BLOCK: usize = 1 << 16;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Transaction {
    id: Digest,
    payload: Vec<u8>,
}

impl fmt::Debug for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Transaction({:?}, {} bytes)", self.id, self.payload.len())
    }
}

impl Transaction {
    pub fn new(payload: Vec<u8>) -> Self {
        Self {
            id: Self::id_of(&payload),
            payload,
        }
    }

    /// Build a transaction with an arbitrary id, e.g. as decoded off the wire.
    pub fn from_parts(id: Digest, payload: Vec<u8>) -> Self {
        Self { id, payload }
    }

    pub fn id_of(payload: &[u8]) -> Digest {
        Digest::tagged(b"luckchain/tx", &[payload])
    }

    pub fn id(&self) -> Digest {
        self.id
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn is_well_formed(&self) -> bool {
        self.payload.len() <= MAX_TX_PAYLOAD && self.id == Self::id_of(&self.payload)
    }

    pub fn encoded_len(&self) -> usize {
        32 + 4 + self.payload.len()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.digest(&self.id).bytes(&self.payload);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let id = r.digest()?;
        let payload = r.bytes(MAX_TX_PAYLOAD)?.to_vec();
        Ok(Self { id, payload })
    }
}

/// Structural validity: ids match payloads, sizes within bound, no duplicates.
pub fn valid_transactions(txs: &[Transaction]) -> bool {
    let mut seen = HashSet::with_capacity(txs.len());
    txs.iter().all(|tx| tx.is_well_formed() && seen.insert(tx.id))
}

/// Commitment to an ordered list of transaction ids.
pub fn tx_root<'a>(ids: impl IntoIterator<Item = &'a Digest>) -> Digest {
    let mut w = Writer::new();
    for id in ids {
        w.digest(id);
    }
    Digest::tagged(b"luckchain/tx-root", &[&w.into_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub parent: Digest,
    pub tx_root: Digest,
}

impl BlockHeader {
    pub fn new(parent: Digest, txs: &[Transaction]) -> Self {
        Self {
            parent,
            tx_root: tx_root(txs.iter().map(|t| &t.id)),
        }
    }

    /// The nonce a proof of luck commits to.
    pub fn digest(&self) -> Digest {
        Digest::tagged(b"luckchain/header", &[&self.parent.0, &self.tx_root.0])
    }

    pub const ENCODED_LEN: usize = 64;
}

/// What failed when a block was checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    ParentLink,
    Transactions,
    Attestation,
    NonceBinding,
    SuperBlock(&'static str),
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::ParentLink => f.write_str("parent link"),
            FaultKind::Transactions => f.write_str("transactions"),
            FaultKind::Attestation => f.write_str("attestation"),
            FaultKind::NonceBinding => f.write_str("nonce binding"),
            FaultKind::SuperBlock(what) => write!(f, "super-block: {what}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("block {index}: {kind} check failed")]
pub struct ChainFault {
    pub index: usize,
    pub kind: FaultKind,
}

/// Everything needed to check a block besides its predecessor.
#[derive(Debug, Clone, Copy)]
pub struct ValidationContext<'a> {
    pub registry: &'a VendorRegistry,
    pub measurement: Measurement,
    /// Required proof count per super-block, when validating super-chains.
    pub superblock_size: Option<usize>,
}

impl<'a> ValidationContext<'a> {
    pub fn new(registry: &'a VendorRegistry, measurement: Measurement) -> Self {
        Self {
            registry,
            measurement,
            superblock_size: None,
        }
    }
}

/// A chain element.
pub trait Linked: Clone + Send + Sync + 'static {
    const SNAPSHOT_MAGIC: [u8; 8];

    fn parent(&self) -> Digest;
    fn digest(&self) -> Digest;
    fn luck(&self) -> f64;
    fn transactions(&self) -> &[Transaction];
    fn encoded_len(&self) -> usize;
    fn encode_into(&self, w: &mut Writer);
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError>;
    /// Content checks; the parent link is checked by the caller.
    fn check(&self, ctx: &ValidationContext<'_>) -> Result<(), FaultKind>;
}

#[derive(Clone)]
pub struct Block {
    parent: Digest,
    transactions: Vec<Transaction>,
    proof: LuckProof,
    digest: Digest,
    encoded_len: usize,
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Block")
            .field("digest", &self.digest)
            .field("parent", &self.parent)
            .field("txs", &self.transactions.len())
            .field("l", &self.proof.l())
            .finish()
    }
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl Block {
    pub fn new(parent: Digest, transactions: Vec<Transaction>, proof: LuckProof) -> Self {
        let mut w = Writer::new();
        Self::write(&mut w, &parent, &transactions, &proof);
        let bytes = w.into_bytes();
        Self {
            digest: Digest::tagged(b"luckchain/block", &[&bytes]),
            encoded_len: bytes.len(),
            parent,
            transactions,
            proof,
        }
    }

    fn write(w: &mut Writer, parent: &Digest, txs: &[Transaction], proof: &LuckProof) {
        w.digest(parent).u32(txs.len() as u32);
        for tx in txs {
            tx.encode_into(w);
        }
        proof.encode_into(w);
    }

    pub fn proof(&self) -> &LuckProof {
        &self.proof
    }

    pub fn header(&self) -> BlockHeader {
        BlockHeader::new(self.parent, &self.transactions)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }
}

impl Linked for Block {
    const SNAPSHOT_MAGIC: [u8; 8] = *b"LUCKCHN1";

    fn parent(&self) -> Digest {
        self.parent
    }

    fn digest(&self) -> Digest {
        self.digest
    }

    fn luck(&self) -> f64 {
        self.proof.l()
    }

    fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    fn encoded_len(&self) -> usize {
        self.encoded_len
    }

    fn encode_into(&self, w: &mut Writer) {
        Self::write(w, &self.parent, &self.transactions, &self.proof);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let parent = r.digest()?;
        let count = r.u32()? as usize;
        if count > MAX_TXS_PER_BLOCK {
            return Err(DecodeError::TooLong { len: count, max: MAX_TXS_PER_BLOCK });
        }
        let transactions = (0..count)
            .map(|_| Transaction::decode_from(r))
            .collect::<Result<Vec<_>, _>>()?;
        let proof = LuckProof::decode_from(r)?;
        Ok(Block::new(parent, transactions, proof))
    }

    fn check(&self, ctx: &ValidationContext<'_>) -> Result<(), FaultKind> {
        if !valid_transactions(&self.transactions) {
            return Err(FaultKind::Transactions);
        }
        if !self.proof.verify(ctx.registry, &ctx.measurement) {
            return Err(FaultKind::Attestation);
        }
        if self.proof.nonce() != self.header().digest() {
            return Err(FaultKind::NonceBinding);
        }
        Ok(())
    }
}

/// Digest of an optional block; the genesis sentinel hashes to zero.
pub fn block_digest<B: Linked>(block: Option<&B>) -> Digest {
    block.map_or(Digest::ZERO, Linked::digest)
}

struct Link<B> {
    block: B,
    prev: Option<Arc<Link<B>>>,
    len: usize,
    luck: f64,
    bytes: usize,
    /// Id of the last validator that accepted the chain ending here.
    checked_by: AtomicU64,
}

/// An immutable chain of blocks, earliest first.
pub struct Chain<B: Linked = Block> {
    tip: Option<Arc<Link<B>>>,
}

impl<B: Linked> Clone for Chain<B> {
    fn clone(&self) -> Self {
        Self { tip: self.tip.clone() }
    }
}

impl<B: Linked> Default for Chain<B> {
    fn default() -> Self {
        Self { tip: None }
    }
}

impl<B: Linked> Drop for Chain<B> {
    fn drop(&mut self) {
        // Unlink iteratively so long chains do not recurse on drop.
        let mut next = self.tip.take();
        while let Some(link) = next {
            match Arc::try_unwrap(link) {
                Ok(mut owned) => next = owned.prev.take(),
                Err(_) => break,
            }
        }
    }
}

impl<B: Linked> PartialEq for Chain<B> {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.tip_digest() == other.tip_digest()
    }
}

impl<B: Linked> fmt::Debug for Chain<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Chain")
            .field("len", &self.len())
            .field("tip", &self.tip_digest())
            .field("luck", &self.luck())
            .finish()
    }
}

impl<B: Linked> Chain<B> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_blocks(blocks: impl IntoIterator<Item = B>) -> Self {
        blocks.into_iter().fold(Self::new(), |chain, b| chain.push(b))
    }

    pub fn len(&self) -> usize {
        self.tip.as_ref().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.tip.is_none()
    }

    pub fn latest(&self) -> Option<&B> {
        self.tip.as_ref().map(|l| &l.block)
    }

    /// Digest of the latest block, or zero for the empty chain.
    pub fn tip_digest(&self) -> Digest {
        block_digest(self.latest())
    }

    /// Total luck, summed in block order.
    pub fn luck(&self) -> f64 {
        self.tip.as_ref().map_or(0.0, |l| l.luck)
    }

    /// Sum of the encoded sizes of all blocks.
    pub fn block_bytes(&self) -> usize {
        self.tip.as_ref().map_or(0, |l| l.bytes)
    }

    /// A new chain with `block` appended; `self` is unchanged.
    #[must_use]
    pub fn push(&self, block: B) -> Self {
        let (len, luck, bytes) = self
            .tip
            .as_ref()
            .map_or((0, 0.0, 0), |l| (l.len, l.luck, l.bytes));
        Self {
            tip: Some(Arc::new(Link {
                len: len + 1,
                luck: luck + block.luck(),
                bytes: bytes + block.encoded_len(),
                block,
                prev: self.tip.clone(),
                checked_by: AtomicU64::new(0),
            })),
        }
    }

    fn links_rev(&self) -> impl Iterator<Item = &Link<B>> {
        let mut cursor = self.tip.as_deref();
        std::iter::from_fn(move || {
            let link = cursor?;
            cursor = link.prev.as_deref();
            Some(link)
        })
    }

    /// Blocks from latest to earliest.
    pub fn iter_rev(&self) -> impl Iterator<Item = &B> {
        self.links_rev().map(|l| &l.block)
    }

    /// Blocks from earliest to latest.
    pub fn blocks(&self) -> Vec<&B> {
        let mut v: Vec<&B> = self.iter_rev().collect();
        v.reverse();
        v
    }

    /// Chain truncated to its first `len` blocks.
    pub fn prefix(&self, len: usize) -> Self {
        let mut cursor = self.tip.clone();
        while let Some(link) = cursor.as_ref() {
            if link.len <= len {
                break;
            }
            cursor = link.prev.clone();
        }
        Self { tip: cursor }
    }

    /// Block at 1-based height.
    pub fn at_height(&self, height: usize) -> Option<&B> {
        if height == 0 || height > self.len() {
            return None;
        }
        self.iter_rev().nth(self.len() - height)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.iter_rev().any(|b| b.digest() == *digest)
    }

    /// Number of leading blocks shared with `other`.
    pub fn common_prefix_len(&self, other: &Self) -> usize {
        let n = self.len().min(other.len());
        let mut a = self.prefix(n);
        let mut b = other.prefix(n);
        let mut len = n;
        loop {
            match (&a.tip, &b.tip) {
                (Some(x), Some(y)) if x.block.digest() != y.block.digest() => {
                    let (pa, pb) = (x.prev.clone(), y.prev.clone());
                    a = Self { tip: pa };
                    b = Self { tip: pb };
                    len -= 1;
                }
                _ => return len,
            }
        }
    }

    /// Blocks after the first `len`, earliest first.
    pub fn suffix_after(&self, len: usize) -> Vec<&B> {
        let mut v: Vec<&B> = self.iter_rev().take(self.len().saturating_sub(len)).collect();
        v.reverse();
        v
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 + self.block_bytes()
    }

    /// Snapshot encoding: magic, block count, blocks in order.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&B::SNAPSHOT_MAGIC).u32(self.len() as u32);
        for block in self.blocks() {
            block.encode_into(&mut w);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.array::<8>()? != B::SNAPSHOT_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let count = r.u32()?;
        let mut chain = Self::new();
        for _ in 0..count {
            chain = chain.push(B::decode_from(&mut r)?);
        }
        r.finish()?;
        Ok(chain)
    }
}

/// Chain luck recomputed by walking the blocks in order.
pub fn luck<B: Linked>(chain: &Chain<B>) -> f64 {
    chain.blocks().into_iter().fold(0.0, |acc, b| acc + b.luck())
}

/// Walk the chain from genesis and report the first failing check.
pub fn diagnose<B: Linked>(chain: &Chain<B>, ctx: &ValidationContext<'_>) -> Result<(), ChainFault> {
    let mut previous = Digest::ZERO;
    for (index, block) in chain.blocks().into_iter().enumerate() {
        if block.parent() != previous {
            return Err(ChainFault { index, kind: FaultKind::ParentLink });
        }
        block.check(ctx).map_err(|kind| ChainFault { index, kind })?;
        previous = block.digest();
    }
    Ok(())
}

pub fn valid<B: Linked>(chain: &Chain<B>, registry: &VendorRegistry, measurement: &Measurement) -> bool {
    diagnose(chain, &ValidationContext::new(registry, *measurement)).is_ok()
}

static NEXT_VALIDATOR_ID: AtomicU64 = AtomicU64::new(1);

/// Validator that marks the shared chain links it has accepted, so
/// revalidating an extended chain only checks the new suffix. Chains are
/// immutable, so a link's verdict never changes for a fixed registry.
pub struct ChainValidator {
    id: u64,
    registry: Arc<VendorRegistry>,
    measurement: Measurement,
    superblock_size: Option<usize>,
}

impl fmt::Debug for ChainValidator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainValidator")
            .field("measurement", &self.measurement)
            .field("superblock_size", &self.superblock_size)
            .finish_non_exhaustive()
    }
}

impl ChainValidator {
    pub fn new(registry: Arc<VendorRegistry>, measurement: Measurement, superblock_size: Option<usize>) -> Self {
        Self {
            id: NEXT_VALIDATOR_ID.fetch_add(1, Ordering::Relaxed),
            registry,
            measurement,
            superblock_size,
        }
    }

    pub fn registry(&self) -> &VendorRegistry {
        &self.registry
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn context(&self) -> ValidationContext<'_> {
        ValidationContext {
            registry: &self.registry,
            measurement: self.measurement,
            superblock_size: self.superblock_size,
        }
    }

    pub fn valid<B: Linked>(&self, chain: &Chain<B>) -> bool {
        let mut fresh = Vec::new();
        let mut previous = Digest::ZERO;
        for link in chain.links_rev() {
            if link.checked_by.load(Ordering::Relaxed) == self.id {
                previous = link.block.digest();
                break;
            }
            fresh.push(link);
        }
        let ctx = self.context();
        for link in fresh.iter().rev() {
            if link.block.parent() != previous || link.block.check(&ctx).is_err() {
                return false;
            }
            previous = link.block.digest();
        }
        for link in fresh {
            link.checked_by.store(self.id, Ordering::Relaxed);
        }
        true
    }
}

/// A block waiting for its proof's release delay.
#[derive(Debug, Clone)]
pub struct PendingCommit {
    base: Chain,
    parent: Digest,
    transactions: Vec<Transaction>,
    luck: PendingLuck,
}

impl PendingCommit {
    pub fn release_at(&self) -> Millis {
        self.luck.release_at()
    }

    pub fn release_delay(&self) -> Millis {
        self.luck.release_delay()
    }

    pub fn l(&self) -> f64 {
        self.luck.l()
    }

    pub fn base(&self) -> &Chain {
        &self.base
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    /// Release the proof and return the extended chain.
    pub fn finish(&self, enclave: &LuckEnclave) -> Result<Chain, PrimitiveError> {
        let proof = enclave.release(self.luck.clone())?;
        Ok(self
            .base
            .push(Block::new(self.parent, self.transactions.clone(), proof)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitError {
    #[error("invalid transactions")]
    InvalidTransactions,
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
}

/// Extend `chain` with a block of `new_transactions`. Mining happens now;
/// the returned ticket yields the new chain once the proof is released.
pub fn commit(
    new_transactions: Vec<Transaction>,
    chain: &Chain,
    enclave: &mut LuckEnclave,
    cfg: &PrimitiveConfig,
) -> Result<PendingCommit, CommitError> {
    if !valid_transactions(&new_transactions) {
        return Err(CommitError::InvalidTransactions);
    }
    let previous = chain.latest();
    let parent = block_digest(previous);
    let header = BlockHeader::new(parent, &new_transactions);
    let luck = enclave.pol_mine(&header, previous, cfg, ProofMode::Anonymous)?;
    Ok(PendingCommit {
        base: chain.clone(),
        parent,
        transactions: new_transactions,
        luck,
    })
}
