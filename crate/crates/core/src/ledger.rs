//! Hash-chained ledger of global training rounds.
//!
//! Block `k` records the digest of block `k-1`, logical generation and
//! expiry times, the digest of the round's global update, the participant
//! ASNs, the winner ASN and the winner's signature. Update payloads live in a
//! content-addressed store keyed by their SHA-256 digest.
//!
//! Canonical block layout (all integers big-endian):
//!
//! ```text
//! "RLDB" | version u16 | index u64 | prev_hash [32] | t_s u64 | t_exp u64
//! | kind u8 | payload_digest [32] | payload_len u64
//! | n_participants u32 | participant u32 * n | winner u32
//! | memo_len u32 | memo                      <- signed prefix ends here
//! | sig_len u32 | signature
//! ```
//!
//! The block digest covers the whole serialization, signature included.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::neuralnet::{apply_update, sha256, Digest, ModelParams, ModelUpdate, NnError};
use crate::topology::Asn;

pub const ZERO_DIGEST: Digest = [0u8; 32];
const BLOCK_MAGIC: &[u8; 4] = b"RLDB";
const CHAIN_MAGIC: &[u8; 4] = b"RLDC";
const FORMAT_VERSION: u16 = 1;

/// Key id of the task publisher that signs the genesis block.
pub const AUTHORITY: Asn = Asn(0);

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("no verification key registered for {0}")]
    UnknownKey(Asn),
    #[error("signer {signer} is not the round winner {winner}")]
    SignerMismatch { signer: Asn, winner: Asn },
    #[error("winner {winner} is not the consensus choice {expected} for round {round}")]
    WrongWinner { round: u64, winner: Asn, expected: Asn },
    #[error("participant set changed after genesis")]
    MembershipChanged,
    #[error("empty participant set")]
    NoParticipants,
    #[error("ledger has no genesis block")]
    NotStarted,
    #[error("ledger already started")]
    AlreadyStarted,
    #[error("payload {0} missing from the content store")]
    MissingPayload(String),
    #[error("malformed block or chain encoding: {0}")]
    Format(String),
    #[error("chain fails verification at block {0}")]
    Invalid(usize),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Produces signatures on behalf of one ASN.
pub trait Signer: Send + Sync {
    fn key_id(&self) -> Asn;
    fn sign(&self, message: &[u8]) -> Vec<u8>;
}

/// Checks signatures made by one ASN.
pub trait VerifyingKey: Send + Sync {
    fn verify(&self, message: &[u8], signature: &[u8]) -> bool;
}

/// Keyed-digest (HMAC-SHA256) test scheme. The same secret signs and
/// verifies, so it only stands in for a real public-key scheme inside the
/// simulation.
#[derive(Clone)]
pub struct KeyedDigestKey {
    asn: Asn,
    secret: [u8; 32],
}

impl fmt::Debug for KeyedDigestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyedDigestKey").field("asn", &self.asn).finish_non_exhaustive()
    }
}

impl KeyedDigestKey {
    pub fn new(asn: Asn, secret: [u8; 32]) -> Self {
        Self { asn, secret }
    }

    /// Deterministic per-ASN key derived from a master seed.
    pub fn derive(master_seed: u64, asn: Asn) -> Self {
        let mut material = Vec::with_capacity(20);
        material.extend_from_slice(b"key:");
        material.extend_from_slice(&master_seed.to_be_bytes());
        material.extend_from_slice(&asn.0.to_be_bytes());
        Self { asn, secret: sha256(&material) }
    }

    fn mac(&self, message: &[u8]) -> Hmac<Sha256> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.secret).expect("HMAC accepts any key length");
        mac.update(message);
        mac
    }
}

impl Signer for KeyedDigestKey {
    fn key_id(&self) -> Asn {
        self.asn
    }

    fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.mac(message).finalize().into_bytes().to_vec()
    }
}

impl VerifyingKey for KeyedDigestKey {
    fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        self.mac(message).verify_slice(signature).is_ok()
    }
}

/// ASN to verification key.
#[derive(Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<Asn, Arc<dyn VerifyingKey>>,
}

impl fmt::Debug for KeyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.keys.keys()).finish()
    }
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, asn: Asn, key: Arc<dyn VerifyingKey>) {
        self.keys.insert(asn, key);
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.keys.contains_key(&asn)
    }

    pub fn verify_signature(&self, asn: Asn, message: &[u8], signature: &[u8]) -> Result<bool, LedgerError> {
        let key = self.keys.get(&asn).ok_or(LedgerError::UnknownKey(asn))?;
        Ok(key.verify(message, signature))
    }
}

/// Simulation key material: one derived key per participant plus the task
/// authority, with a matching verification registry.
#[derive(Debug, Clone)]
pub struct KeyRing {
    keys: BTreeMap<Asn, KeyedDigestKey>,
}

impl KeyRing {
    pub fn derive(master_seed: u64, participants: &[Asn]) -> Self {
        let keys = std::iter::once(AUTHORITY)
            .chain(participants.iter().copied())
            .map(|a| (a, KeyedDigestKey::derive(master_seed, a)))
            .collect();
        Self { keys }
    }

    pub fn signer(&self, asn: Asn) -> Result<&KeyedDigestKey, LedgerError> {
        self.keys.get(&asn).ok_or(LedgerError::UnknownKey(asn))
    }

    pub fn registry(&self) -> KeyRegistry {
        let mut r = KeyRegistry::new();
        for (&asn, key) in &self.keys {
            r.register(asn, Arc::new(key.clone()));
        }
        r
    }
}

/// Maps block indices to logical timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalClock {
    pub origin: u64,
    pub step: u64,
    pub ttl: u64,
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self { origin: 0, step: 60, ttl: 3600 }
    }
}

impl LogicalClock {
    pub fn time_of(&self, index: u64) -> u64 {
        self.origin + index * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    InitialModel = 0,
    GlobalUpdate = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub t_s: u64,
    pub t_exp: u64,
    pub kind: PayloadKind,
    pub payload_digest: Digest,
    pub payload_len: u64,
    pub participants: Vec<Asn>,
    pub winner: Asn,
    /// Task description on the genesis block; empty elsewhere.
    pub memo: Vec<u8>,
    pub signature: Vec<u8>,
}

impl Block {
    /// The signed prefix of the canonical serialization.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(160 + 4 * self.participants.len() + self.memo.len());
        out.extend_from_slice(BLOCK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.t_s.to_be_bytes());
        out.extend_from_slice(&self.t_exp.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload_digest);
        out.extend_from_slice(&self.payload_len.to_be_bytes());
        out.extend_from_slice(&(self.participants.len() as u32).to_be_bytes());
        for p in &self.participants {
            out.extend_from_slice(&p.0.to_be_bytes());
        }
        out.extend_from_slice(&self.winner.0.to_be_bytes());
        out.extend_from_slice(&(self.memo.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.memo);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signing_bytes();
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BLOCK_MAGIC {
            return Err(LedgerError::Format("bad block magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(LedgerError::Format(format!("unsupported block version {version}")));
        }
        let index = r.u64()?;
        let prev_hash = r.digest()?;
        let t_s = r.u64()?;
        let t_exp = r.u64()?;
        let kind = match r.take(1)?[0] {
            0 => PayloadKind::InitialModel,
            1 => PayloadKind::GlobalUpdate,
            k => return Err(LedgerError::Format(format!("unknown payload kind {k}"))),
        };
        let payload_digest = r.digest()?;
        let payload_len = r.u64()?;
        let n = r.u32()? as usize;
        let mut participants = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            participants.push(Asn(r.u32()?));
        }
        let winner = Asn(r.u32()?);
        let memo_len = r.u32()? as usize;
        let memo = r.take(memo_len)?.to_vec();
        let sig_len = r.u32()? as usize;
        let signature = r.take(sig_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(LedgerError::Format("trailing bytes after block".into()));
        }
        Ok(Self {
            index,
            prev_hash,
            t_s,
            t_exp,
            kind,
            payload_digest,
            payload_len,
            participants,
            winner,
            memo,
            signature,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LedgerError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, LedgerError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<Digest, LedgerError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
}

/// Digest-addressed blob store for model payloads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContentStore {
    blobs: BTreeMap<Digest, Vec<u8>>,
}

impl ContentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, bytes: Vec<u8>) -> Digest {
        let d = sha256(&bytes);
        self.blobs.insert(d, bytes);
        d
    }

    pub fn get(&self, digest: &Digest) -> Option<&[u8]> {
        self.blobs.get(digest).map(Vec::as_slice)
    }

    /// Direct access for audit tests that corrupt stored payloads.
    pub fn get_mut(&mut self, digest: &Digest) -> Option<&mut Vec<u8>> {
        self.blobs.get_mut(digest)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    /// Total stored bytes.
    pub fn size_bytes(&self) -> usize {
        self.blobs.values().map(Vec::len).sum()
    }

    /// Writes one `<hex digest>.bin` file per blob.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (d, bytes) in &self.blobs {
            fs::write(dir.join(format!("{}.bin", hex::encode(d))), bytes)?;
        }
        Ok(())
    }

    /// Loads every `*.bin` blob; the file name is not trusted, blobs are
    /// re-addressed by their content.
    pub fn load_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let mut store = Self::new();
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if e.path().extension().and_then(|x| x.to_str()) == Some("bin") {
                store.put(fs::read(e.path())?);
            }
        }
        Ok(store)
    }
}

/// Consensus stand-in: `participants[H(round || prev_hash) mod n]` over the
/// sorted participant list.
pub fn select_winner(round: u64, participants: &[Asn], prev_hash: &Digest) -> Result<Asn, LedgerError> {
    if participants.is_empty() {
        return Err(LedgerError::NoParticipants);
    }
    let mut sorted = participants.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut msg = Vec::with_capacity(40);
    msg.extend_from_slice(&round.to_be_bytes());
    msg.extend_from_slice(prev_hash);
    let h = sha256(&msg);
    let x = u64::from_be_bytes(h[..8].try_into().unwrap());
    Ok(sorted[(x % sorted.len() as u64) as usize])
}

/// Task published in the genesis block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInfo {
    pub initial_model: Digest,
    pub initial_model_len: u64,
    pub participants: Vec<Asn>,
    pub description: Vec<u8>,
}

pub fn genesis(task: &TaskInfo, authority: &dyn Signer, clock: &LogicalClock) -> Block {
    let mut participants = task.participants.clone();
    participants.sort_unstable();
    participants.dedup();
    let t_s = clock.time_of(0);
    let mut block = Block {
        index: 0,
        prev_hash: ZERO_DIGEST,
        t_s,
        t_exp: t_s + clock.ttl,
        kind: PayloadKind::InitialModel,
        payload_digest: task.initial_model,
        payload_len: task.initial_model_len,
        participants,
        winner: authority.key_id(),
        memo: task.description.clone(),
        signature: Vec::new(),
    };
    block.signature = authority.sign(&block.signing_bytes());
    block
}

/// What a finished round contributes to the ledger.
#[derive(Debug, Clone, Copy)]
pub struct RoundSubmission<'a> {
    pub update: &'a ModelUpdate,
    pub participants: &'a [Asn],
    pub winner: Asn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    IndexMismatch,
    /// Genesis does not point at the zero digest, or a block does not point
    /// at its predecessor's digest.
    PrevHashMismatch,
    UnknownSigner,
    BadSignature,
    WrongWinner,
    MembershipChanged,
    MissingPayload,
    /// The stored payload no longer hashes to the recorded digest.
    PayloadDigestMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub index: usize,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub valid: bool,
    pub first_failure: Option<ChainFailure>,
    /// Blocks after the first failure; they no longer hang off a trusted
    /// prefix.
    pub stale: Vec<usize>,
    /// Every violation found, in block order.
    pub failures: Vec<ChainFailure>,
}

/// Append-only chain plus the verification registry and payload store.
#[derive(Debug, Clone)]
pub struct Ledger {
    blocks: Vec<Block>,
    registry: KeyRegistry,
    clock: LogicalClock,
    store: ContentStore,
}

impl Ledger {
    pub fn new(registry: KeyRegistry, clock: LogicalClock) -> Self {
        Self { blocks: Vec::new(), registry, clock, store: ContentStore::new() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Raw block access for tamper tests.
    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ContentStore {
        &mut self.store
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn tip_digest(&self) -> Digest {
        self.blocks.last().map(Block::digest).unwrap_or(ZERO_DIGEST)
    }

    pub fn participants(&self) -> Option<&[Asn]> {
        self.blocks.first().map(|b| b.participants.as_slice())
    }

    /// Stores the initial model and appends the genesis block.
    pub fn start(
        &mut self,
        initial: &ModelParams,
        participants: &[Asn],
        description: Vec<u8>,
        authority: &dyn Signer,
    ) -> Result<&Block, LedgerError> {
        if !self.blocks.is_empty() {
            return Err(LedgerError::AlreadyStarted);
        }
        if participants.is_empty() {
            return Err(LedgerError::NoParticipants);
        }
        if !self.registry.contains(authority.key_id()) {
            return Err(LedgerError::UnknownKey(authority.key_id()));
        }
        let bytes = initial.to_bytes();
        let len = bytes.len() as u64;
        let digest = self.store.put(bytes);
        let task = TaskInfo {
            initial_model: digest,
            initial_model_len: len,
            participants: participants.to_vec(),
            description,
        };
        self.blocks.push(genesis(&task, authority, &self.clock));
        Ok(self.blocks.last().unwrap())
    }

    /// The consensus winner for the next block.
    pub fn next_winner(&self) -> Result<Asn, LedgerError> {
        let participants = self.participants().ok_or(LedgerError::NotStarted)?;
        select_winner(self.blocks.len() as u64, participants, &self.tip_digest())
    }

    /// Chains a new round block signed by the round winner.
    pub fn append_round(&mut self, round: RoundSubmission<'_>, signer: &dyn Signer) -> Result<&Block, LedgerError> {
        let genesis_participants = self.participants().ok_or(LedgerError::NotStarted)?;
        let mut participants = round.participants.to_vec();
        participants.sort_unstable();
        participants.dedup();
        if participants != genesis_participants {
            return Err(LedgerError::MembershipChanged);
        }
        if signer.key_id() != round.winner {
            return Err(LedgerError::SignerMismatch { signer: signer.key_id(), winner: round.winner });
        }
        if !self.registry.contains(round.winner) {
            return Err(LedgerError::UnknownKey(round.winner));
        }
        let index = self.blocks.len() as u64;
        let expected = self.next_winner()?;
        if expected != round.winner {
            return Err(LedgerError::WrongWinner { round: index, winner: round.winner, expected });
        }
        let bytes = round.update.to_bytes();
        let len = bytes.len() as u64;
        let digest = self.store.put(bytes);
        let t_s = self.clock.time_of(index);
        let mut block = Block {
            index,
            prev_hash: self.tip_digest(),
            t_s,
            t_exp: t_s + self.clock.ttl,
            kind: PayloadKind::GlobalUpdate,
            payload_digest: digest,
            payload_len: len,
            participants,
            winner: round.winner,
            memo: Vec::new(),
            signature: Vec::new(),
        };
        block.signature = signer.sign(&block.signing_bytes());
        self.blocks.push(block);
        Ok(self.blocks.last().unwrap())
    }

    /// Checks indices, hash links, signatures, winner selection, fixed
    /// membership and stored payload digests.
    pub fn verify_chain(&self) -> ChainReport {
        let mut failures = Vec::new();
        let genesis_participants = self.participants().map(<[Asn]>::to_vec).unwrap_or_default();
        let mut prev = ZERO_DIGEST;
        for (i, b) in self.blocks.iter().enumerate() {
            let mut fail = |kind| failures.push(ChainFailure { index: i, kind });
            if b.index != i as u64 {
                fail(FailureKind::IndexMismatch);
            }
            if b.prev_hash != prev {
                fail(FailureKind::PrevHashMismatch);
            }
            match self.registry.verify_signature(b.winner, &b.signing_bytes(), &b.signature) {
                Ok(true) => {}
                Ok(false) => fail(FailureKind::BadSignature),
                Err(_) => fail(FailureKind::UnknownSigner),
            }
            if i > 0 {
                if b.participants != genesis_participants {
                    fail(FailureKind::MembershipChanged);
                } else if select_winner(i as u64, &b.participants, &b.prev_hash).ok() != Some(b.winner) {
                    fail(FailureKind::WrongWinner);
                }
                if b.kind != PayloadKind::GlobalUpdate {
                    fail(FailureKind::IndexMismatch);
                }
            }
            match self.store.get(&b.payload_digest) {
                None => fail(FailureKind::MissingPayload),
                Some(bytes) if sha256(bytes) != b.payload_digest || bytes.len() as u64 != b.payload_len => {
                    fail(FailureKind::PayloadDigestMismatch)
                }
                Some(_) => {}
            }
            prev = b.digest();
        }
        let first_failure = failures.first().cloned();
        let stale = match &first_failure {
            Some(f) => (f.index + 1..self.blocks.len()).collect(),
            None => Vec::new(),
        };
        ChainReport { valid: first_failure.is_none(), first_failure, stale, failures }
    }

    /// Rebuilds the final global model from the genesis payload and every
    /// stored global update. Refuses to replay a chain that fails
    /// verification.
    pub fn replay(&self) -> Result<ModelParams, LedgerError> {
        let report = self.verify_chain();
        if let Some(f) = report.first_failure {
            return Err(LedgerError::Invalid(f.index));
        }
        let genesis = self.blocks.first().ok_or(LedgerError::NotStarted)?;
        let load = |d: &Digest| {
            self.store
                .get(d)
                .ok_or_else(|| LedgerError::MissingPayload(hex::encode(d)))
        };
        let mut params = ModelParams::from_bytes(load(&genesis.payload_digest)?)?;
        for b in &self.blocks[1..] {
            let update = ModelUpdate::from_bytes(load(&b.payload_digest)?)?;
            params = apply_update(&params, &update)?;
        }
        Ok(params)
    }

    /// Chain export: `"RLDC" | version u16 | n u32 | { len u32 | block }*`.
    pub fn write_chain<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHAIN_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_be_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_be_bytes())?;
        for b in &self.blocks {
            let bytes = b.to_bytes();
            w.write_all(&(bytes.len() as u32).to_be_bytes())?;
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn chain_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_chain(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Imports an exported chain. The result is not verified.
    pub fn read_chain<R: Read>(
        mut r: R,
        registry: KeyRegistry,
        clock: LogicalClock,
        store: ContentStore,
    ) -> Result<Self, LedgerError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut rd = Reader { bytes: &buf, pos: 0 };
        if rd.take(4)? != CHAIN_MAGIC {
            return Err(LedgerError::Format("bad chain magic".into()));
        }
        let version = rd.u16()?;
        if version != FORMAT_VERSION {
            return Err(LedgerError::Format(format!("unsupported chain version {version}")));
        }
        let n = rd.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = rd.u32()? as usize;
            blocks.push(Block::from_bytes(rd.take(len)?)?);
        }
        if rd.pos != buf.len() {
            return Err(LedgerError::Format("trailing bytes after chain".into()));
        }
        Ok(Self { blocks, registry, clock, store })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{init_model, ModelConfig};

    fn participants() -> Vec<Asn> {
        vec![Asn(10), Asn(20), Asn(30), Asn(40), Asn(50)]
    }

    fn tiny_model() -> ModelParams {
        init_model(&ModelConfig { hidden1: 2, hidden2: 2, ..Default::default() }).unwrap()
    }

    fn chain(rounds: usize) -> (Ledger, KeyRing) {
        let ring = KeyRing::derive(1, &participants());
        let mut ledger = Ledger::new(ring.registry(), LogicalClock::default());
        let init = tiny_model();
        ledger.start(&init, &participants(), b"task".to_vec(), ring.signer(AUTHORITY).unwrap()).unwrap();
        for r in 0..rounds {
            let mut delta = vec![0.0; init.len()];
            delta[r] = 0.25 * (r + 1) as f64;
            let u = ModelUpdate::from_parts(init.shapes().to_vec(), delta, 0).unwrap();
            let winner = ledger.next_winner().unwrap();
            ledger
                .append_round(
                    RoundSubmission { update: &u, participants: &participants(), winner },
                    ring.signer(winner).unwrap(),
                )
                .unwrap();
        }
        (ledger, ring)
    }

    #[test]
    fn sign_and_verify() {
        let k = KeyedDigestKey::derive(5, Asn(7));
        let other = KeyedDigestKey::derive(5, Asn(8));
        let sig = k.sign(b"hello");
        assert!(k.verify(b"hello", &sig));
        assert!(!k.verify(b"hellp", &sig));
        assert!(!other.verify(b"hello", &sig));
        let mut reg = KeyRegistry::new();
        reg.register(Asn(7), Arc::new(k));
        assert!(matches!(reg.verify_signature(Asn(9), b"x", &sig), Err(LedgerError::UnknownKey(_))));
    }

    #[test]
    fn genesis_is_deterministic() {
        let ring = KeyRing::derive(1, &participants());
        let init = tiny_model();
        let bytes = init.to_bytes();
        let task = TaskInfo {
            initial_model: sha256(&bytes),
            initial_model_len: bytes.len() as u64,
            participants: participants(),
            description: b"fl".to_vec(),
        };
        let a = genesis(&task, ring.signer(AUTHORITY).unwrap(), &LogicalClock::default());
        let b = genesis(&task, ring.signer(AUTHORITY).unwrap(), &LogicalClock::default());
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.prev_hash, ZERO_DIGEST);
        assert_eq!(a.payload_digest, init.digest());
    }

    #[test]
    fn winner_selection() {
        assert_eq!(select_winner(3, &[Asn(9)], &ZERO_DIGEST).unwrap(), Asn(9));
        assert!(matches!(select_winner(0, &[], &ZERO_DIGEST), Err(LedgerError::NoParticipants)));
        let p = participants();
        let mut rev = p.clone();
        rev.reverse();
        for r in 0..50 {
            let h = sha256(&[r as u8]);
            assert_eq!(select_winner(r, &p, &h).unwrap(), select_winner(r, &rev, &h).unwrap());
        }
    }

    #[test]
    fn append_and_verify() {
        let (ledger, _) = chain(6);
        assert_eq!(ledger.len(), 7);
        let report = ledger.verify_chain();
        assert!(report.valid, "{report:?}");
        for w in ledger.blocks().windows(2) {
            assert_eq!(w[1].prev_hash, w[0].digest());
            assert_eq!(w[1].t_exp - w[1].t_s, LogicalClock::default().ttl);
        }
    }

    #[test]
    fn wrong_signer_rejected() {
        let (mut ledger, ring) = chain(1);
        let init = tiny_model();
        let u = ModelUpdate::zeros_like(&init);
        let winner = ledger.next_winner().unwrap();
        let imposter = participants().into_iter().find(|&a| a != winner).unwrap();
        let err = ledger
            .append_round(
                RoundSubmission { update: &u, participants: &participants(), winner },
                ring.signer(imposter).unwrap(),
            )
            .unwrap_err();
        assert!(matches!(err, LedgerError::SignerMismatch { .. }));
        let err = ledger
            .append_round(
                RoundSubmission { update: &u, participants: &participants(), winner: imposter },
                ring.signer(imposter).unwrap(),
            )
            .unwrap_err();
        assert!(matches!(err, LedgerError::WrongWinner { .. }));
        let err = ledger
            .append_round(
                RoundSubmission { update: &u, participants: &participants()[..3], winner },
                ring.signer(winner).unwrap(),
            )
            .unwrap_err();
        assert!(matches!(err, LedgerError::MembershipChanged));
    }

    #[test]
    fn payload_tamper_detected_with_stale_suffix() {
        let (mut ledger, _) = chain(6);
        ledger.blocks_mut()[3].payload_digest[0] ^= 1;
        let report = ledger.verify_chain();
        assert!(!report.valid);
        assert_eq!(report.first_failure.as_ref().unwrap().index, 3);
        assert_eq!(report.stale, vec![4, 5, 6]);
        assert!(report.failures.contains(&ChainFailure { index: 4, kind: FailureKind::PrevHashMismatch }));
    }

    #[test]
    fn stored_payload_tamper_detected() {
        let (mut ledger, _) = chain(4);
        let d = ledger.blocks()[3].payload_digest;
        ledger.store_mut().get_mut(&d).unwrap()[40] ^= 0x10;
        let report = ledger.verify_chain();
        assert_eq!(
            report.first_failure,
            Some(ChainFailure { index: 3, kind: FailureKind::PayloadDigestMismatch })
        );
        assert!(ledger.replay().is_err());
    }

    #[test]
    fn resigned_by_non_winner_detected() {
        let (mut ledger, ring) = chain(5);
        let winner = ledger.blocks()[3].winner;
        let other = participants().into_iter().find(|&a| a != winner).unwrap();
        let sig = ring.signer(other).unwrap().sign(&ledger.blocks()[3].signing_bytes());
        ledger.blocks_mut()[3].signature = sig;
        let report = ledger.verify_chain();
        assert_eq!(report.first_failure, Some(ChainFailure { index: 3, kind: FailureKind::BadSignature }));
    }

    #[test]
    fn chain_export_round_trip() {
        let (ledger, ring) = chain(3);
        let bytes = ledger.chain_bytes();
        let back = Ledger::read_chain(bytes.as_slice(), ring.registry(), LogicalClock::default(), ledger.store().clone())
            .unwrap();
        assert_eq!(back.blocks(), ledger.blocks());
        assert!(back.verify_chain().valid);
        let dir = tempfile::tempdir().unwrap();
        ledger.store().save_dir(dir.path()).unwrap();
        assert_eq!(&ContentStore::load_dir(dir.path()).unwrap(), ledger.store());
    }

    #[test]
    fn replay_reproduces_sum_of_updates() {
        let (ledger, _) = chain(4);
        let p = ledger.replay().unwrap();
        let init = tiny_model();
        for (k, (a, b)) in p.values().iter().zip(init.values()).enumerate() {
            let expected = if k < 4 { b + 0.25 * (k + 1) as f64 } else { *b };
            assert_eq!(*a, expected);
        }
    }
}
