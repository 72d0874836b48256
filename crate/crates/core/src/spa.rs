//! Single packet authorization.
//!
//! A client that wants anything from the perimeter first sends exactly one
//! UDP-style datagram. The packet authenticates the client and names the
//! service it wants; until it is verified, nothing answers the client at
//! all. The format is fixed size so a sniffer learns nothing from length:
//!
//! ```text
//! offset  len  field
//!      0    1  version (0x01)
//!      1   16  client_id
//!     17    8  timestamp_ms, big endian
//!     25   16  nonce
//!     41   16  requested_service_id
//!     57   32  HMAC-SHA-256 over bytes 0..57
//! ```
//!
//! Verification is keyed lookup, MAC check, freshness check, then a
//! one-time-nonce check, in that order. The order matters: a replayed
//! packet with a bad MAC must report `BadMac`, not `Replay`, so that an
//! attacker cannot distinguish "key right, nonce burned" from "key wrong"
//! by tampering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;

use crate::addr::HostId;

pub const SPA_PACKET_LEN: usize = 89;
/// Bytes covered by the MAC (everything before it).
pub const SPA_SIGNED_LEN: usize = 57;
pub const SPA_VERSION: u8 = 0x01;
/// Default +/- window around the receiver clock inside which a packet
/// timestamp counts as fresh.
pub const DEFAULT_FRESHNESS_HORIZON_MS: u64 = 5_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaError {
    #[error("host {0} already has an active credential")]
    DuplicateCredential(HostId),
    #[error("no credential for host {0}")]
    UnknownHost(HostId),
}

/// Shared secret provisioned out of band between a host and the controller.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential {
    pub host_id: HostId,
    pub hmac_key: [u8; 32],
    pub created_at_ms: u64,
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // never print key material
        f.debug_struct("Credential")
            .field("host_id", &self.host_id)
            .field("created_at_ms", &self.created_at_ms)
            .finish_non_exhaustive()
    }
}

/// At most one active credential per host. Rotation goes through
/// revoke-then-generate so there is never an ambiguous key.
#[derive(Debug, Default, Clone)]
pub struct CredentialStore {
    active: BTreeMap<HostId, Credential>,
}

impl CredentialStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws a fresh random key for `host_id`.
    pub fn generate(
        &mut self,
        host_id: HostId,
        now_ms: u64,
        rng: &mut impl RngCore,
    ) -> Result<Credential, SpaError> {
        if self.active.contains_key(&host_id) {
            return Err(SpaError::DuplicateCredential(host_id));
        }
        let mut hmac_key = [0u8; 32];
        rng.fill_bytes(&mut hmac_key);
        let cred = Credential {
            host_id,
            hmac_key,
            created_at_ms: now_ms,
        };
        self.active.insert(host_id, cred.clone());
        Ok(cred)
    }

    /// Installs a key provisioned elsewhere (scenario files, tests).
    pub fn install(&mut self, cred: Credential) -> Result<(), SpaError> {
        if self.active.contains_key(&cred.host_id) {
            return Err(SpaError::DuplicateCredential(cred.host_id));
        }
        self.active.insert(cred.host_id, cred);
        Ok(())
    }

    pub fn revoke(&mut self, host_id: HostId) -> Result<Credential, SpaError> {
        self.active
            .remove(&host_id)
            .ok_or(SpaError::UnknownHost(host_id))
    }

    pub fn lookup(&self, host_id: HostId) -> Option<&Credential> {
        self.active.get(&host_id)
    }

    pub fn key_of(&self, host_id: HostId) -> Option<[u8; 32]> {
        self.active.get(&host_id).map(|c| c.hmac_key)
    }

    /// Snapshot of all `(host, key)` pairs, e.g. to seed a gateway's local
    /// key directory.
    pub fn export_keys(&self) -> BTreeMap<HostId, [u8; 32]> {
        self.active
            .iter()
            .map(|(id, c)| (*id, c.hmac_key))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// Parsed SPA packet. `deserialize` only checks the length; every other
/// field, including the version byte, is protected by the MAC, so tampering
/// with any signed byte surfaces as `BadMac` rather than a parse error.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SpaPacket {
    pub version: u8,
    pub client_id: HostId,
    pub timestamp_ms: u64,
    pub nonce: [u8; 16],
    pub requested_service_id: HostId,
    pub mac: [u8; 32],
}

impl fmt::Debug for SpaPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpaPacket")
            .field("version", &self.version)
            .field("client_id", &self.client_id)
            .field("timestamp_ms", &self.timestamp_ms)
            .field("nonce", &hex::encode(self.nonce))
            .field("requested_service_id", &self.requested_service_id)
            .field("mac", &hex::encode(self.mac))
            .finish()
    }
}

impl SpaPacket {
    pub fn serialize(&self) -> [u8; SPA_PACKET_LEN] {
        let mut out = [0u8; SPA_PACKET_LEN];
        out[0] = self.version;
        out[1..17].copy_from_slice(&self.client_id.0);
        out[17..25].copy_from_slice(&self.timestamp_ms.to_be_bytes());
        out[25..41].copy_from_slice(&self.nonce);
        out[41..57].copy_from_slice(&self.requested_service_id.0);
        out[57..89].copy_from_slice(&self.mac);
        out
    }

    /// Length check only; see the type-level note.
    pub fn deserialize(bytes: &[u8]) -> Option<SpaPacket> {
        if bytes.len() != SPA_PACKET_LEN {
            return None;
        }
        let mut client_id = [0u8; 16];
        client_id.copy_from_slice(&bytes[1..17]);
        let mut ts = [0u8; 8];
        ts.copy_from_slice(&bytes[17..25]);
        let mut nonce = [0u8; 16];
        nonce.copy_from_slice(&bytes[25..41]);
        let mut service = [0u8; 16];
        service.copy_from_slice(&bytes[41..57]);
        let mut mac = [0u8; 32];
        mac.copy_from_slice(&bytes[57..89]);
        Some(SpaPacket {
            version: bytes[0],
            client_id: HostId(client_id),
            timestamp_ms: u64::from_be_bytes(ts),
            nonce,
            requested_service_id: HostId(service),
            mac,
        })
    }
}

pub fn compute_mac(key: &[u8; 32], signed: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key)
        .expect("hmac accepts any key length");
    mac.update(signed);
    mac.finalize().into_bytes().into()
}

/// Builds and signs a packet for `credential`, drawing a fresh nonce from
/// `rng`. The caller's clock goes in as the timestamp.
pub fn build_spa(
    credential: &Credential,
    requested_service_id: HostId,
    now_ms: u64,
    rng: &mut impl RngCore,
) -> SpaPacket {
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let mut pkt = SpaPacket {
        version: SPA_VERSION,
        client_id: credential.host_id,
        timestamp_ms: now_ms,
        nonce,
        requested_service_id,
        mac: [0u8; 32],
    };
    let bytes = pkt.serialize();
    pkt.mac = compute_mac(&credential.hmac_key, &bytes[..SPA_SIGNED_LEN]);
    pkt
}

/// Why a packet was refused. The variant order mirrors the check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    /// Wrong length on the wire.
    Malformed,
    /// `client_id` has no key here.
    UnknownClient,
    /// MAC mismatch under the client's key.
    BadMac,
    /// Timestamp outside the freshness horizon.
    Stale,
    /// `(client_id, nonce)` was already accepted once.
    Replay,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::UnknownClient => "unknown_client",
            RejectReason::BadMac => "bad_mac",
            RejectReason::Stale => "stale",
            RejectReason::Replay => "replay",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyResult {
    Accept,
    Reject(RejectReason),
}

impl VerifyResult {
    pub fn is_accept(self) -> bool {
        matches!(self, VerifyResult::Accept)
    }
}

/// Record of every `(client_id, nonce)` pair that has ever been *accepted*.
///
/// Rejected packets never burn a nonce: an attacker must not be able to
/// invalidate a client's in-flight packet by spraying garbage with the same
/// nonce. Entries are kept for twice the freshness horizon after insertion;
/// a packet timestamp can sit up to one horizon in the future of the clock
/// that accepted it, so one horizon of retention is not enough, and two
/// guarantees eviction never re-enables a nonce that could still verify as
/// fresh.
#[derive(Debug, Clone)]
pub struct ReplayWindow {
    seen: HashMap<(HostId, [u8; 16]), u64>,
    horizon_ms: u64,
}

impl ReplayWindow {
    pub fn new(horizon_ms: u64) -> Self {
        ReplayWindow {
            seen: HashMap::new(),
            horizon_ms,
        }
    }

    pub fn horizon_ms(&self) -> u64 {
        self.horizon_ms
    }

    pub fn contains(&self, client_id: HostId, nonce: [u8; 16]) -> bool {
        self.seen.contains_key(&(client_id, nonce))
    }

    fn record(&mut self, client_id: HostId, nonce: [u8; 16], now_ms: u64) {
        self.seen.insert((client_id, nonce), now_ms);
    }

    /// Drops entries recorded more than `2 * horizon` ago. Safe to call at
    /// any time; see the type-level note for why the factor of two.
    pub fn evict_expired(&mut self, now_ms: u64) -> usize {
        let keep_from = now_ms.saturating_sub(2 * self.horizon_ms);
        let before = self.seen.len();
        self.seen.retain(|_, &mut at| at >= keep_from);
        before - self.seen.len()
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Full verification pipeline against one clock reading.
///
/// `credential_lookup` maps a client id to its HMAC key; returning `None`
/// means the client is unknown *here* (a gateway may know fewer keys than
/// the controller). The nonce is recorded if and only if the result is
/// `Accept` — the check and the record are one atomic step, so two copies
/// of the same packet presented back to back yield exactly one `Accept`
/// no matter how they interleave with other traffic.
pub fn verify_spa(
    bytes: &[u8],
    credential_lookup: impl Fn(HostId) -> Option<[u8; 32]>,
    replay: &mut ReplayWindow,
    now_ms: u64,
) -> VerifyResult {
    let Some(pkt) = SpaPacket::deserialize(bytes) else {
        return VerifyResult::Reject(RejectReason::Malformed);
    };
    let Some(key) = credential_lookup(pkt.client_id) else {
        return VerifyResult::Reject(RejectReason::UnknownClient);
    };
    let expected = compute_mac(&key, &bytes[..SPA_SIGNED_LEN]);
    if expected != pkt.mac {
        return VerifyResult::Reject(RejectReason::BadMac);
    }
    if now_ms.abs_diff(pkt.timestamp_ms) > replay.horizon_ms {
        return VerifyResult::Reject(RejectReason::Stale);
    }
    if replay.contains(pkt.client_id, pkt.nonce) {
        return VerifyResult::Reject(RejectReason::Replay);
    }
    replay.record(pkt.client_id, pkt.nonce, now_ms);
    VerifyResult::Accept
}
