//! Software stand-in for an SGX-class trusted execution environment.
//!
//! Isolation is modeled by API discipline: a [`Cpu`]'s key material never
//! leaves this module except through an explicitly granted
//! [`SigningOracle`], which models a compromised part. Each emulated CPU
//! provides the four services the consensus primitives rely on:
//!
//! - remote attestation, as ed25519 signatures checked against a
//!   [`VendorRegistry`] of genuine parts,
//! - linkable "name base" attestations whose pseudonym is an HMAC of the
//!   basename under a per-CPU key,
//! - monotonic counters per (CPU, measurement), bumped on every enclave start,
//! - trusted relative time and an unbiased, seeded random stream.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::digest::Digest;

/// Simulated time in integer milliseconds.
pub type Millis = u64;

/// Digest identifying enclave code.
pub type Measurement = Digest;

/// Measurement of a piece of enclave code.
pub fn measurement_of(code: &[u8]) -> Measurement {
    Digest::tagged(b"luckchain/measurement", &[code])
}

const MAX_PAYLOAD: usize = 1 << 16;
const MAX_BASENAME: usize = 1 << 10;
const ATTEST_DOMAIN: &[u8] = b"luckchain/attestation/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("cpu index {0} already registered")]
    DuplicateIndex(u64),
    #[error("cpu {0} is not marked compromised")]
    NotCompromised(CpuId),
}

/// Shared simulation clock. Time never goes backwards.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }

    /// Move the clock to `t`; earlier values are ignored.
    pub fn advance_to(&self, t: Millis) {
        self.0.fetch_max(t, Ordering::SeqCst);
    }

    pub fn advance_by(&self, dt: Millis) {
        self.0.fetch_add(dt, Ordering::SeqCst);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct CpuId(pub [u8; 16]);

impl fmt::Display for CpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for CpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CpuId({self})")
    }
}

impl From<CpuId> for String {
    fn from(id: CpuId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for CpuId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let bytes = hex::decode(&s).map_err(|e| e.to_string())?;
        Ok(CpuId(bytes.try_into().map_err(|_| "cpu id must be 16 bytes".to_string())?))
    }
}

struct CpuState {
    rng: ChaCha20Rng,
    draws: u64,
    counters: BTreeMap<Measurement, u64>,
}

struct CpuInner {
    id: CpuId,
    index: u64,
    signing: SigningKey,
    prf_key: [u8; 32],
    clock: SimClock,
    clock_offset: i64,
    compromised: AtomicBool,
    state: Mutex<CpuState>,
}

/// An emulated TEE-capable processor. Cloning yields another reference to
/// the same physical part.
#[derive(Clone)]
pub struct Cpu {
    inner: Arc<CpuInner>,
}

impl fmt::Debug for Cpu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cpu")
            .field("id", &self.inner.id)
            .field("index", &self.inner.index)
            .finish_non_exhaustive()
    }
}

impl Cpu {
    /// Manufacture CPU `index` of the scenario seeded by `master_seed` and
    /// register it with the vendor.
    pub fn create(
        master_seed: u64,
        index: u64,
        registry: &mut VendorRegistry,
        clock: &SimClock,
    ) -> Result<Cpu, TeeError> {
        Self::create_with_offset(master_seed, index, registry, clock, 0)
    }

    /// Like [`Cpu::create`], with a fixed offset between this part's trusted
    /// clock and simulation time.
    pub fn create_with_offset(
        master_seed: u64,
        index: u64,
        registry: &mut VendorRegistry,
        clock: &SimClock,
        clock_offset: i64,
    ) -> Result<Cpu, TeeError> {
        if registry.has_index(index) {
            return Err(TeeError::DuplicateIndex(index));
        }
        let seed = master_seed.to_be_bytes();
        let idx = index.to_be_bytes();
        let id_digest = Digest::tagged(b"luckchain/cpu-id", &[&seed, &idx]);
        let mut id = [0u8; 16];
        id.copy_from_slice(&id_digest.0[..16]);
        let secret = Digest::tagged(b"luckchain/cpu-secret", &[&seed, &idx]);
        let prf_key = Digest::tagged(b"luckchain/cpu-prf", &[&secret.0]).0;
        let rng_seed = Digest::tagged(b"luckchain/cpu-rng", &[&seed, &id]).0;
        let signing = SigningKey::from_bytes(&secret.0);

        let cpu = Cpu {
            inner: Arc::new(CpuInner {
                id: CpuId(id),
                index,
                signing,
                prf_key,
                clock: clock.clone(),
                clock_offset,
                compromised: AtomicBool::new(false),
                state: Mutex::new(CpuState {
                    rng: ChaCha20Rng::from_seed(rng_seed),
                    draws: 0,
                    counters: BTreeMap::new(),
                }),
            }),
        };
        registry.register(cpu.id(), index, cpu.inner.signing.verifying_key());
        Ok(cpu)
    }

    pub fn id(&self) -> CpuId {
        self.inner.id
    }

    pub fn index(&self) -> u64 {
        self.inner.index
    }

    pub fn clock_offset(&self) -> i64 {
        self.inner.clock_offset
    }

    /// Number of random draws taken so far.
    pub fn draws(&self) -> u64 {
        self.lock().draws
    }

    /// Launch an enclave with code `measurement`, bumping its monotonic counter.
    pub fn start_enclave(&self, measurement: Measurement) -> Enclave {
        let counter_at_start = {
            let mut state = self.lock();
            let counter = state.counters.entry(measurement).or_insert(0);
            *counter += 1;
            *counter
        };
        Enclave {
            cpu: self.clone(),
            measurement,
            counter_at_start,
        }
    }

    /// Mark the part as compromised (its key is under attacker control).
    pub fn mark_compromised(&self) {
        self.inner.compromised.store(true, Ordering::SeqCst);
    }

    pub fn is_compromised(&self) -> bool {
        self.inner.compromised.load(Ordering::SeqCst)
    }

    /// Signing access for an attacker who has broken this part.
    pub fn signing_oracle(&self) -> Result<SigningOracle, TeeError> {
        if self.is_compromised() {
            Ok(SigningOracle { cpu: self.clone() })
        } else {
            Err(TeeError::NotCompromised(self.id()))
        }
    }

    /// Pseudonym this CPU produces for `basename`.
    pub fn pseudonym(&self, basename: &[u8]) -> [u8; 32] {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.inner.prf_key)
            .expect("hmac accepts any key length");
        mac.update(basename);
        mac.finalize().into_bytes().into()
    }

    fn counter(&self, measurement: &Measurement) -> u64 {
        self.lock().counters.get(measurement).copied().unwrap_or(0)
    }

    fn trusted_time(&self) -> Millis {
        let now = self.inner.clock.now() as i128 + self.inner.clock_offset as i128;
        now.clamp(0, u64::MAX as i128) as Millis
    }

    fn draw(&self) -> f64 {
        let mut state = self.lock();
        state.draws += 1;
        unit_interval(state.rng.next_u64())
    }

    fn sign(&self, measurement: Measurement, payload: &[u8], basename: Option<&[u8]>) -> Attestation {
        let mode = match basename {
            None => AttestationMode::RandomBase,
            Some(b) => AttestationMode::NameBase {
                basename: b.to_vec(),
                pseudonym: self.pseudonym(b),
            },
        };
        let mut att = Attestation {
            measurement,
            payload: payload.to_vec(),
            mode,
            signature: [0u8; 64],
        };
        att.signature = self.inner.signing.sign(&att.signed_message()).to_bytes();
        att
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CpuState> {
        self.inner.state.lock().expect("cpu state poisoned")
    }
}

/// Map 64 random bits to a double in [0, 1) with 53 bits of precision.
pub fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A running enclave instance.
#[derive(Debug, Clone)]
pub struct Enclave {
    cpu: Cpu,
    measurement: Measurement,
    counter_at_start: u64,
}

impl Enclave {
    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn counter_at_start(&self) -> u64 {
        self.counter_at_start
    }

    pub fn cpu(&self) -> &Cpu {
        &self.cpu
    }

    pub fn read_counter(&self) -> u64 {
        self.cpu.counter(&self.measurement)
    }

    /// True once another instance of the same code was started on this CPU.
    pub fn is_stale(&self) -> bool {
        self.read_counter() != self.counter_at_start
    }

    pub fn trusted_time(&self) -> Millis {
        self.cpu.trusted_time()
    }

    /// Uniform draw in [0, 1).
    pub fn random_draw(&self) -> f64 {
        self.cpu.draw()
    }

    /// Attest `payload` as produced by this enclave. With a basename the
    /// attestation is linkable (name base mode).
    pub fn attest(&self, payload: &[u8], basename: Option<&[u8]>) -> Attestation {
        self.cpu.sign(self.measurement, payload, basename)
    }
}

/// Attestation signing access for a compromised CPU. Produces attestations
/// over arbitrary payloads and measurements that still carry the part's
/// genuine pseudonym.
#[derive(Debug, Clone)]
pub struct SigningOracle {
    cpu: Cpu,
}

impl SigningOracle {
    pub fn cpu_id(&self) -> CpuId {
        self.cpu.id()
    }

    pub fn attest(&self, measurement: Measurement, payload: &[u8], basename: Option<&[u8]>) -> Attestation {
        self.cpu.sign(measurement, payload, basename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttestationMode {
    RandomBase,
    NameBase { basename: Vec<u8>, pseudonym: [u8; 32] },
}

/// Signed statement that `payload` was produced by code `measurement` on a
/// genuine part.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attestation {
    measurement: Measurement,
    payload: Vec<u8>,
    mode: AttestationMode,
    signature: [u8; 64],
}

impl Attestation {
    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn mode(&self) -> &AttestationMode {
        &self.mode
    }

    pub fn basename(&self) -> Option<&[u8]> {
        match &self.mode {
            AttestationMode::NameBase { basename, .. } => Some(basename),
            AttestationMode::RandomBase => None,
        }
    }

    pub fn pseudonym(&self) -> Option<[u8; 32]> {
        match &self.mode {
            AttestationMode::NameBase { pseudonym, .. } => Some(*pseudonym),
            AttestationMode::RandomBase => None,
        }
    }

    pub fn signature(&self) -> &[u8; 64] {
        &self.signature
    }

    /// Same attestation with a different payload and the original signature.
    /// Never verifies; used to model splicing attacks.
    pub fn with_spliced_payload(&self, payload: Vec<u8>) -> Attestation {
        Attestation {
            payload,
            ..self.clone()
        }
    }

    fn write_body(&self, w: &mut Writer) {
        w.digest(&self.measurement).bytes(&self.payload);
        match &self.mode {
            AttestationMode::RandomBase => {
                w.u8(0);
            }
            AttestationMode::NameBase { basename, pseudonym } => {
                w.u8(1).bytes(basename).raw(pseudonym);
            }
        }
    }

    fn signed_message(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ATTEST_DOMAIN);
        self.write_body(&mut w);
        w.into_bytes()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.write_body(w);
        w.raw(&self.signature);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }

    pub fn encoded_len(&self) -> usize {
        let mode = match &self.mode {
            AttestationMode::RandomBase => 1,
            AttestationMode::NameBase { basename, .. } => 1 + 4 + basename.len() + 32,
        };
        32 + 4 + self.payload.len() + mode + 64
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Attestation, DecodeError> {
        let measurement = r.digest()?;
        let payload = r.bytes(MAX_PAYLOAD)?.to_vec();
        let mode = match r.u8()? {
            0 => AttestationMode::RandomBase,
            1 => AttestationMode::NameBase {
                basename: r.bytes(MAX_BASENAME)?.to_vec(),
                pseudonym: r.array()?,
            },
            tag => return Err(DecodeError::BadTag(tag)),
        };
        let signature = r.array()?;
        Ok(Attestation {
            measurement,
            payload,
            mode,
            signature,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Attestation, DecodeError> {
        let mut r = Reader::new(bytes);
        let att = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(att)
    }

    fn cache_key(&self) -> Digest {
        Digest::tagged(b"luckchain/attestation-cache", &[&self.encode()])
    }
}

#[derive(Debug, Clone)]
struct RegisteredCpu {
    id: CpuId,
    index: u64,
    key: VerifyingKey,
}

/// The platform vendor's list of genuine parts and revocations.
///
/// Attestations are anonymous, so verification tries every registered key;
/// results are memoized per attestation encoding.
#[derive(Default)]
pub struct VendorRegistry {
    entries: Vec<RegisteredCpu>,
    by_id: HashMap<CpuId, usize>,
    indices: BTreeSet<u64>,
    revoked: BTreeSet<CpuId>,
    cache: Mutex<HashMap<Digest, Option<usize>>>,
}

impl fmt::Debug for VendorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VendorRegistry")
            .field("registered", &self.entries.len())
            .field("revoked", &self.revoked)
            .finish()
    }
}

impl Clone for VendorRegistry {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            by_id: self.by_id.clone(),
            indices: self.indices.clone(),
            revoked: self.revoked.clone(),
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl VendorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_index(&self, index: u64) -> bool {
        self.indices.contains(&index)
    }

    pub fn is_registered(&self, id: &CpuId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn is_revoked(&self, id: &CpuId) -> bool {
        self.revoked.contains(id)
    }

    fn register(&mut self, id: CpuId, index: u64, key: VerifyingKey) {
        self.by_id.insert(id, self.entries.len());
        self.indices.insert(index);
        self.entries.push(RegisteredCpu { id, index, key });
        // A new key may validate attestations previously rejected.
        self.cache.get_mut().expect("cache poisoned").clear();
    }

    pub fn revoke(&mut self, id: CpuId) {
        self.revoked.insert(id);
    }

    /// Check `att` against the registry. Returns the attested payload when
    /// the signature verifies under a registered, unrevoked key and the
    /// measurement is the expected one.
    pub fn verify_attestation<'a>(&self, att: &'a Attestation, expected: &Measurement) -> Option<&'a [u8]> {
        if att.measurement != *expected {
            return None;
        }
        let signer = self.signer_of(att)?;
        if self.revoked.contains(&self.entries[signer].id) {
            return None;
        }
        Some(&att.payload)
    }

    /// Decode and verify in one step; malformed encodings are simply invalid.
    pub fn verify_encoded(&self, encoded: &[u8], expected: &Measurement) -> Option<Vec<u8>> {
        let att = Attestation::decode(encoded).ok()?;
        self.verify_attestation(&att, expected).map(<[u8]>::to_vec)
    }

    fn signer_of(&self, att: &Attestation) -> Option<usize> {
        let key = att.cache_key();
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return *hit;
        }
        let message = att.signed_message();
        let signature = Signature::from_bytes(&att.signature);
        let found = self
            .entries
            .iter()
            .position(|e| e.key.verify_strict(&message, &signature).is_ok());
        self.cache.lock().expect("cache poisoned").insert(key, found);
        found
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            keys: self
                .entries
                .iter()
                .map(|e| RegistryEntry {
                    cpu_id: e.id,
                    index: e.index,
                    verifying_key: hex::encode(e.key.as_bytes()),
                })
                .collect(),
            revoked: self.revoked.iter().copied().collect(),
        }
    }

    pub fn from_snapshot(snapshot: &RegistrySnapshot) -> Result<VendorRegistry, String> {
        let mut registry = VendorRegistry::new();
        for entry in &snapshot.keys {
            let bytes: [u8; 32] = hex::decode(&entry.verifying_key)
                .map_err(|e| e.to_string())?
                .try_into()
                .map_err(|_| format!("key for cpu {} is not 32 bytes", entry.cpu_id))?;
            let key = VerifyingKey::from_bytes(&bytes).map_err(|e| e.to_string())?;
            if registry.has_index(entry.index) {
                return Err(format!("duplicate cpu index {}", entry.index));
            }
            registry.register(entry.cpu_id, entry.index, key);
        }
        for id in &snapshot.revoked {
            registry.revoke(*id);
        }
        Ok(registry)
    }
}

/// Public part of a registry, as written next to chain snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub keys: Vec<RegistryEntry>,
    pub revoked: Vec<CpuId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub cpu_id: CpuId,
    pub index: u64,
    pub verifying_key: String,
}
