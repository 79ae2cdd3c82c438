//! TEE-resident consensus primitives: wrapped proof of work, proof of time,
//! proof of ownership, and the proof-of-luck round/mine pair.
//!
//! Sleeping inside an enclave is modeled as a two-step call: the first step
//! returns a ticket with the release time, the second step (run by the host
//! once that time has come) re-checks the monotonic counter and attests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::digest::Digest;
use crate::ledger::{BlockHeader, Linked};
use crate::tee::{measurement_of, Attestation, Enclave, Measurement, Millis, VendorRegistry};

pub const PROOF_OF_LUCK_CODE: &[u8] = b"luckchain/enclave/proof-of-luck/v1";
pub const PROOF_OF_WORK_CODE: &[u8] = b"luckchain/enclave/proof-of-work/v1";
pub const PROOF_OF_TIME_CODE: &[u8] = b"luckchain/enclave/proof-of-time/v1";
pub const PROOF_OF_OWNERSHIP_CODE: &[u8] = b"luckchain/enclave/proof-of-ownership/v1";

pub fn luck_measurement() -> Measurement {
    measurement_of(PROOF_OF_LUCK_CODE)
}

pub fn work_measurement() -> Measurement {
    measurement_of(PROOF_OF_WORK_CODE)
}

pub fn time_measurement() -> Measurement {
    measurement_of(PROOF_OF_TIME_CODE)
}

pub fn ownership_measurement() -> Measurement {
    measurement_of(PROOF_OF_OWNERSHIP_CODE)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrimitiveError {
    #[error("no round in progress")]
    NoRound,
    #[error("header does not link to the previous block")]
    BadLink,
    #[error("previous block does not share the round block's parent")]
    WrongParent,
    #[error("too early: now {now} ms, ready at {ready_at} ms")]
    TooEarly { now: Millis, ready_at: Millis },
    #[error("another enclave instance was started on this cpu")]
    ConcurrentInvocation,
    #[error("proof of work exhausted {iterations} iterations")]
    PowExhausted { iterations: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimitiveConfig {
    pub round_time: Millis,
    pub max_mine_delay: Millis,
    pub pot_duration: Millis,
    /// Required leading zero bits of the inner proof-of-work hash.
    pub pow_difficulty: u32,
    pub pow_max_iterations: u64,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        Self {
            round_time: 15_000,
            max_mine_delay: 10_000,
            pot_duration: 1_000,
            pow_difficulty: 8,
            pow_max_iterations: 1 << 24,
        }
    }
}

impl PrimitiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.round_time == 0 || self.max_mine_delay == 0 || self.pot_duration == 0 {
            return Err("durations must be positive".into());
        }
        if self.max_mine_delay >= self.round_time {
            return Err(format!(
                "max_mine_delay ({}) must be below round_time ({})",
                self.max_mine_delay, self.round_time
            ));
        }
        if self.pow_difficulty > 256 {
            return Err("pow_difficulty must be at most 256 bits".into());
        }
        Ok(())
    }
}

/// Release delay for a draw `l`: `round((1 - l) * max_mine_delay)`.
/// Luckier draws release sooner.
pub fn mine_delay(l: f64, cfg: &PrimitiveConfig) -> Millis {
    debug_assert!((0.0..1.0).contains(&l));
    ((1.0 - l) * cfg.max_mine_delay as f64).round() as Millis
}

/// Attested ⟨nonce, l⟩ pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LuckProof {
    nonce: Digest,
    l: f64,
    attestation: Attestation,
}

impl LuckProof {
    pub fn payload(nonce: &Digest, l: f64) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&nonce.0).bytes(&l.to_bits().to_be_bytes());
        w.into_bytes()
    }

    pub fn parse_payload(payload: &[u8]) -> Result<(Digest, f64), DecodeError> {
        let mut r = Reader::new(payload);
        let nonce = Digest(r.sized::<32>()?);
        let l = f64::from_bits(u64::from_be_bytes(r.sized::<8>()?));
        r.finish()?;
        if !(0.0..1.0).contains(&l) {
            return Err(DecodeError::Invalid("luck value outside [0, 1)"));
        }
        Ok((nonce, l))
    }

    pub fn from_attestation(attestation: Attestation) -> Result<LuckProof, DecodeError> {
        let (nonce, l) = Self::parse_payload(attestation.payload())?;
        Ok(LuckProof { nonce, l, attestation })
    }

    pub fn nonce(&self) -> Digest {
        self.nonce
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn attestation(&self) -> &Attestation {
        &self.attestation
    }

    pub fn pseudonym(&self) -> Option<[u8; 32]> {
        self.attestation.pseudonym()
    }

    pub fn verify(&self, registry: &VendorRegistry, measurement: &Measurement) -> bool {
        registry.verify_attestation(&self.attestation, measurement).is_some()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.attestation.encode_into(w);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<LuckProof, DecodeError> {
        Self::from_attestation(Attestation::decode_from(r)?)
    }

    pub fn encoded_len(&self) -> usize {
        self.attestation.encoded_len()
    }
}

#[derive(Debug, Clone)]
pub struct PowOutcome {
    pub attestation: Attestation,
    /// Hash evaluations spent, for energy accounting.
    pub evaluations: u64,
}

fn leading_zero_bits(d: &Digest) -> u32 {
    let mut bits = 0;
    for byte in d.0 {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

/// Hash-preimage search used as the wrapped proof of work.
pub fn pow_search(nonce: &[u8], difficulty: u32, max_iterations: u64) -> Option<(u64, u64)> {
    (0..max_iterations).find_map(|counter| {
        let h = Digest::tagged(b"luckchain/pow", &[nonce, &counter.to_be_bytes()]);
        (leading_zero_bits(&h) >= difficulty).then_some((counter, counter + 1))
    })
}

pub fn work_payload(nonce: &[u8], difficulty: u32) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(nonce).bytes(&difficulty.to_be_bytes());
    w.into_bytes()
}

/// TEE-wrapped proof of work: run the inner search, insist it succeeded,
/// and attest ⟨nonce, difficulty⟩ anonymously.
pub fn tee_pow(
    enclave: &Enclave,
    nonce: &[u8],
    difficulty: u32,
    max_iterations: u64,
) -> Result<PowOutcome, PrimitiveError> {
    let (_, evaluations) = pow_search(nonce, difficulty, max_iterations)
        .ok_or(PrimitiveError::PowExhausted { iterations: max_iterations })?;
    Ok(PowOutcome {
        attestation: enclave.attest(&work_payload(nonce, difficulty), None),
        evaluations,
    })
}

pub fn time_payload(nonce: &[u8], duration: Millis) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(nonce).bytes(&duration.to_be_bytes());
    w.into_bytes()
}

/// An in-progress proof of time.
#[derive(Debug, Clone)]
pub struct TimeLock {
    nonce: Vec<u8>,
    duration: Millis,
    ready_at: Millis,
}

impl TimeLock {
    pub fn ready_at(&self) -> Millis {
        self.ready_at
    }
}

/// Begin a proof of time: the enclave yields for `duration`.
pub fn proof_of_time(enclave: &Enclave, nonce: &[u8], duration: Millis) -> TimeLock {
    TimeLock {
        nonce: nonce.to_vec(),
        duration,
        ready_at: enclave.trusted_time() + duration,
    }
}

/// Resume after the yield; fails if time has not passed or another instance
/// was started meanwhile.
pub fn finish_proof_of_time(enclave: &Enclave, lock: TimeLock) -> Result<Attestation, PrimitiveError> {
    let now = enclave.trusted_time();
    if now < lock.ready_at {
        return Err(PrimitiveError::TooEarly { now, ready_at: lock.ready_at });
    }
    if enclave.is_stale() {
        return Err(PrimitiveError::ConcurrentInvocation);
    }
    Ok(enclave.attest(&time_payload(&lock.nonce, lock.duration), None))
}

pub fn ownership_payload(nonce: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(nonce);
    w.into_bytes()
}

/// Proof of ownership: a linkable attestation with the nonce as basename.
pub fn proof_of_ownership(enclave: &Enclave, nonce: &[u8]) -> Attestation {
    enclave.attest(&ownership_payload(nonce), Some(nonce))
}

/// Parent of the block a round is anchored on. `None` is the parent of the
/// genesis sentinel, distinct from the zero digest that the first real
/// block carries.
pub type AnchorParent = Option<Digest>;

pub fn anchor_parent<B: Linked>(block: Option<&B>) -> AnchorParent {
    block.map(Linked::parent)
}

/// Whether proofs are anonymous or linkable under the parent digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofMode {
    #[default]
    Anonymous,
    Linkable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RoundState {
    anchor: AnchorParent,
    started: Millis,
}

/// A draw waiting out its release delay.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingLuck {
    nonce: Digest,
    l: f64,
    release_at: Millis,
    release_delay: Millis,
    basename: Option<Vec<u8>>,
}

impl PendingLuck {
    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn nonce(&self) -> Digest {
        self.nonce
    }

    pub fn release_at(&self) -> Millis {
        self.release_at
    }

    pub fn release_delay(&self) -> Millis {
        self.release_delay
    }
}

/// The proof-of-luck enclave program.
#[derive(Debug, Clone)]
pub struct LuckEnclave {
    enclave: Enclave,
    round: Option<RoundState>,
}

impl LuckEnclave {
    /// Start the program on `enclave`'s CPU (the start already bumped the counter).
    pub fn new(enclave: Enclave) -> Self {
        Self { enclave, round: None }
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn round_started(&self) -> Option<Millis> {
        self.round.map(|r| r.started)
    }

    pub fn round_anchor(&self) -> Option<AnchorParent> {
        self.round.map(|r| r.anchor)
    }

    /// Bind mining to `block` (`None` for the genesis sentinel) and stamp the round start.
    pub fn pol_round<B: Linked>(&mut self, block: Option<&B>) {
        self.round = Some(RoundState {
            anchor: anchor_parent(block),
            started: self.enclave.trusted_time(),
        });
    }

    /// Validate the request, draw `l`, and return the ticket to release after `f(l)`.
    pub fn pol_mine<B: Linked>(
        &mut self,
        header: &BlockHeader,
        previous: Option<&B>,
        cfg: &PrimitiveConfig,
        mode: ProofMode,
    ) -> Result<PendingLuck, PrimitiveError> {
        let round = self.round.ok_or(PrimitiveError::NoRound)?;
        let previous_digest = previous.map_or(Digest::ZERO, Linked::digest);
        if header.parent != previous_digest {
            return Err(PrimitiveError::BadLink);
        }
        if anchor_parent(previous) != round.anchor {
            return Err(PrimitiveError::WrongParent);
        }
        let now = self.enclave.trusted_time();
        let ready_at = round.started + cfg.round_time;
        if now < ready_at {
            return Err(PrimitiveError::TooEarly { now, ready_at });
        }

        self.round = None;
        let l = self.enclave.random_draw();
        let release_delay = mine_delay(l, cfg);
        Ok(PendingLuck {
            nonce: header.digest(),
            l,
            release_at: now + release_delay,
            release_delay,
            basename: match mode {
                ProofMode::Anonymous => None,
                ProofMode::Linkable => Some(header.parent.0.to_vec()),
            },
        })
    }

    /// Wake from the release delay, check no other instance ran, and attest.
    pub fn release(&self, pending: PendingLuck) -> Result<LuckProof, PrimitiveError> {
        let now = self.enclave.trusted_time();
        if now < pending.release_at {
            return Err(PrimitiveError::TooEarly { now, ready_at: pending.release_at });
        }
        if self.enclave.is_stale() {
            return Err(PrimitiveError::ConcurrentInvocation);
        }
        let attestation = self.enclave.attest(
            &LuckProof::payload(&pending.nonce, pending.l),
            pending.basename.as_deref(),
        );
        Ok(LuckProof {
            nonce: pending.nonce,
            l: pending.l,
            attestation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Block, Transaction};
    use crate::tee::{Cpu, SimClock};
    use std::collections::HashSet;

    struct Fixture {
        registry: VendorRegistry,
        clock: SimClock,
        cpus: Vec<Cpu>,
    }

    fn fixture(n: u64) -> Fixture {
        let mut registry = VendorRegistry::new();
        let clock = SimClock::new();
        let cpus = (0..n)
            .map(|i| Cpu::create(11, i, &mut registry, &clock).unwrap())
            .collect();
        Fixture { registry, clock, cpus }
    }

    fn cfg() -> PrimitiveConfig {
        PrimitiveConfig::default()
    }

    #[test]
    fn mine_delay_values() {
        let c = cfg();
        assert_eq!(mine_delay(0.0, &c), 10_000);
        assert_eq!(mine_delay(0.75, &c), 2_500);
        assert_eq!(mine_delay(1.0 - f64::EPSILON, &c), 0);
        assert!(mine_delay(0.3, &c) > mine_delay(0.31, &c));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = PrimitiveConfig { max_mine_delay: 15_000, ..cfg() };
        assert!(bad.validate().is_err());
        let zero = PrimitiveConfig { round_time: 0, ..cfg() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn pow_zero_difficulty_verifies() {
        let f = fixture(1);
        let e = f.cpus[0].start_enclave(work_measurement());
        let out = tee_pow(&e, b"header", 0, 10).unwrap();
        assert_eq!(out.evaluations, 1);
        assert_eq!(
            f.registry.verify_attestation(&out.attestation, &work_measurement()),
            Some(&work_payload(b"header", 0)[..])
        );
        let tampered = out.attestation.with_spliced_payload(work_payload(b"header", 1));
        assert!(f.registry.verify_attestation(&tampered, &work_measurement()).is_none());
    }

    #[test]
    fn pow_exhaustion() {
        let f = fixture(1);
        let e = f.cpus[0].start_enclave(work_measurement());
        assert_eq!(
            tee_pow(&e, b"n", 64, 100).unwrap_err(),
            PrimitiveError::PowExhausted { iterations: 100 }
        );
    }

    #[test]
    fn pow_mean_evaluations_is_geometric() {
        // Geometric with success probability 2^-8: mean 256, sd ~255.5.
        let trials = 400u64;
        let total: u64 = (0..trials)
            .map(|i| pow_search(&i.to_be_bytes(), 8, 1 << 20).unwrap().1)
            .sum();
        let mean = total as f64 / trials as f64;
        let se = 255.5 / (trials as f64).sqrt();
        assert!((mean - 256.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn proof_of_time_paths() {
        let f = fixture(2);
        let e = f.cpus[0].start_enclave(time_measurement());
        let lock = proof_of_time(&e, b"n", 1000);
        assert_eq!(lock.ready_at(), 1000);
        f.clock.advance_to(999);
        assert!(matches!(
            finish_proof_of_time(&e, lock.clone()),
            Err(PrimitiveError::TooEarly { .. })
        ));
        f.clock.advance_to(1000);
        let att = finish_proof_of_time(&e, lock).unwrap();
        assert!(f.registry.verify_attestation(&att, &time_measurement()).is_some());

        // Interference: another start on the same CPU halfway through.
        let e = f.cpus[0].start_enclave(time_measurement());
        let other_cpu = f.cpus[1].start_enclave(time_measurement());
        let lock = proof_of_time(&e, b"n", 1000);
        let lock_other = proof_of_time(&other_cpu, b"n", 1000);
        f.clock.advance_by(500);
        let _rogue = f.cpus[0].start_enclave(time_measurement());
        f.clock.advance_by(500);
        assert_eq!(
            finish_proof_of_time(&e, lock).unwrap_err(),
            PrimitiveError::ConcurrentInvocation
        );
        assert!(finish_proof_of_time(&other_cpu, lock_other).is_ok());
    }

    #[test]
    fn ownership_pseudonyms_count_cpus() {
        let f = fixture(5);
        let nonce = b"block header";
        let mut pseudonyms = HashSet::new();
        for cpu in &f.cpus {
            for _ in 0..4 {
                let att = proof_of_ownership(&cpu.start_enclave(ownership_measurement()), nonce);
                assert!(f.registry.verify_attestation(&att, &ownership_measurement()).is_some());
                pseudonyms.insert(att.pseudonym().unwrap());
            }
        }
        assert_eq!(pseudonyms.len(), 5);

        let e = f.cpus[0].start_enclave(ownership_measurement());
        assert_ne!(
            proof_of_ownership(&e, b"a").pseudonym(),
            proof_of_ownership(&e, b"b").pseudonym()
        );
    }

    fn genesis_header() -> BlockHeader {
        BlockHeader::new(Digest::ZERO, &[])
    }

    #[test]
    fn pol_round_records_time_and_overwrites() {
        let f = fixture(1);
        let mut pol = LuckEnclave::new(f.cpus[0].start_enclave(luck_measurement()));
        pol.pol_round::<Block>(None);
        assert_eq!(pol.round_started(), Some(0));
        f.clock.advance_to(700);
        pol.pol_round::<Block>(None);
        assert_eq!(pol.round_started(), Some(700));
    }

    #[test]
    fn pol_mine_round_time_boundary() {
        let f = fixture(1);
        let mut pol = LuckEnclave::new(f.cpus[0].start_enclave(luck_measurement()));
        assert_eq!(
            pol.pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::NoRound)
        );
        pol.pol_round::<Block>(None);
        f.clock.advance_to(14_999);
        assert!(matches!(
            pol.pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::TooEarly { now: 14_999, ready_at: 15_000 })
        ));
        f.clock.advance_to(15_000);
        let pending = pol
            .pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous)
            .unwrap();
        assert_eq!(pending.release_delay(), mine_delay(pending.l(), &cfg()));
        // round state cleared
        assert_eq!(
            pol.pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::NoRound)
        );
        assert!(matches!(pol.release(pending.clone()), Err(PrimitiveError::TooEarly { .. })));
        f.clock.advance_by(pending.release_delay());
        let proof = pol.release(pending.clone()).unwrap();
        assert_eq!(proof.l(), pending.l());
        assert_eq!(proof.nonce(), genesis_header().digest());
        assert!(proof.verify(&f.registry, &luck_measurement()));
        let reparsed = LuckProof::from_attestation(proof.attestation().clone()).unwrap();
        assert_eq!(reparsed, proof);
    }

    #[test]
    fn pol_mine_draw_matches_rng_stream() {
        let f = fixture(1);
        let g = fixture(1);
        let mut pol = LuckEnclave::new(f.cpus[0].start_enclave(luck_measurement()));
        pol.pol_round::<Block>(None);
        f.clock.advance_to(15_000);
        let pending = pol
            .pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous)
            .unwrap();
        let expected = g.cpus[0].start_enclave(luck_measurement()).random_draw();
        assert_eq!(pending.l().to_bits(), expected.to_bits());
    }

    fn sealed_block(f: &Fixture, parent: Digest, payload: &[u8]) -> Block {
        let txs = vec![Transaction::new(payload.to_vec())];
        let header = BlockHeader::new(parent, &txs);
        let e = f.cpus[0].start_enclave(luck_measurement());
        let att = e.attest(&LuckProof::payload(&header.digest(), 0.5), None);
        Block::new(parent, txs, LuckProof::from_attestation(att).unwrap())
    }

    #[test]
    fn pol_mine_link_checks_and_sibling_switch() {
        let f = fixture(2);
        let b1 = sealed_block(&f, Digest::ZERO, b"x");
        let sibling = sealed_block(&f, Digest::ZERO, b"y");
        let mut pol = LuckEnclave::new(f.cpus[1].start_enclave(luck_measurement()));
        pol.pol_round(Some(&b1));
        f.clock.advance_to(15_000);

        let bad_link = BlockHeader::new(Digest::ZERO, &[]);
        assert_eq!(
            pol.pol_mine(&bad_link, Some(&b1), &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::BadLink)
        );
        // Previous block with a different parent than the round block.
        let child = sealed_block(&f, b1.digest(), b"z");
        let header = BlockHeader::new(child.digest(), &[]);
        assert_eq!(
            pol.pol_mine(&header, Some(&child), &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::WrongParent)
        );
        // Genesis sentinel's parent differs from the first block's parent.
        assert_eq!(
            pol.pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous),
            Err(PrimitiveError::WrongParent)
        );
        // A luckier sibling of the round block is acceptable.
        let header = BlockHeader::new(sibling.digest(), &[]);
        assert!(pol.pol_mine(&header, Some(&sibling), &cfg(), ProofMode::Anonymous).is_ok());
    }

    #[test]
    fn restart_during_release_delay_is_detected() {
        let f = fixture(1);
        let mut pol = LuckEnclave::new(f.cpus[0].start_enclave(luck_measurement()));
        pol.pol_round::<Block>(None);
        f.clock.advance_to(15_000);
        let pending = pol
            .pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Anonymous)
            .unwrap();
        let _second = f.cpus[0].start_enclave(luck_measurement());
        f.clock.advance_by(pending.release_delay());
        assert_eq!(pol.release(pending), Err(PrimitiveError::ConcurrentInvocation));
    }

    #[test]
    fn linkable_mode_uses_parent_basename() {
        let f = fixture(1);
        let mut pol = LuckEnclave::new(f.cpus[0].start_enclave(luck_measurement()));
        pol.pol_round::<Block>(None);
        f.clock.advance_to(15_000);
        let pending = pol
            .pol_mine::<Block>(&genesis_header(), None, &cfg(), ProofMode::Linkable)
            .unwrap();
        f.clock.advance_by(pending.release_delay());
        let proof = pol.release(pending).unwrap();
        assert_eq!(proof.attestation().basename(), Some(&Digest::ZERO.0[..]));
        assert_eq!(proof.pseudonym(), Some(f.cpus[0].pseudonym(&Digest::ZERO.0)));
    }

    #[test]
    fn payload_parse_rejects_out_of_range() {
        let p = LuckProof::payload(&Digest::ZERO, 0.25);
        assert_eq!(LuckProof::parse_payload(&p).unwrap(), (Digest::ZERO, 0.25));
        for bad in [1.0, -0.5, f64::NAN] {
            let mut w = Writer::new();
            w.bytes(&[0u8; 32]).bytes(&f64::to_bits(bad).to_be_bytes());
            assert!(LuckProof::parse_payload(&w.into_bytes()).is_err());
        }
    }
}
