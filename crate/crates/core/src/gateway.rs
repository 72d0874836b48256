//! Gateway enforcement: default drop, TTL'd allow rules, SPA escalation.
//!
//! A gateway is deliberately dumb. Its entire packet policy is:
//!
//! 1. A well-formed SPA packet from a client whose key it knows, with a
//!    good MAC and a fresh timestamp, is escalated to the controller.
//!    (Replay is *not* checked here — that state lives in one place,
//!    at the controller.)
//! 2. Anything matching a live firewall rule is forwarded.
//! 3. A packet matching only an expired rule removes the corpse and is
//!    discarded.
//! 4. Everything else is discarded.
//!
//! Discard means discard: no reset, no ICMP, no log line visible to the
//! sender. To a scanner, a port with a rule for someone else and a port
//! with nothing behind it look identical.
//!
//! Rules are keyed on (client address, listen port), not the flow 5-tuple.
//! Authorization attaches to the client host — its source ports may vary
//! freely across flows — and to the service-side port the controller chose
//! to expose. Rules expire on a closed boundary: a rule of TTL `t` is dead
//! at exactly age `t`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::addr::{HostId, Ip, NetAddress};
use crate::control::AuthorizationDirective;
use crate::spa::{compute_mac, RejectReason, SpaPacket, SPA_SIGNED_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("directive for {0} contains no services")]
    EmptyDirective(HostId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FirewallRule {
    pub id: u64,
    pub client_address: NetAddress,
    pub listen_port: u16,
    pub forward_to: NetAddress,
    pub installed_at_ms: u64,
    pub ttl_ms: u64,
}

impl FirewallRule {
    /// Closed expiry boundary: dead the instant age reaches the TTL.
    pub fn is_live(&self, now_ms: u64) -> bool {
        now_ms.saturating_sub(self.installed_at_ms) < self.ttl_ms
    }

    fn matches(&self, src: NetAddress, dst_port: u16) -> bool {
        self.client_address.ip == src.ip && self.listen_port == dst_port
    }
}

/// The rule set. Default action is not represented — there is nothing to
/// represent; absence of a match *is* the drop.
#[derive(Debug, Default, Clone)]
pub struct RuleTable {
    rules: Vec<FirewallRule>,
    next_id: u64,
}

impl RuleTable {
    /// Installs or refreshes the rule for `(client ip, port)`. Refreshing
    /// keeps the rule id stable so audit trails stay joinable.
    pub fn upsert(
        &mut self,
        client_address: NetAddress,
        listen_port: u16,
        forward_to: NetAddress,
        ttl_ms: u64,
        now_ms: u64,
    ) -> u64 {
        if let Some(r) = self
            .rules
            .iter_mut()
            .find(|r| r.client_address.ip == client_address.ip && r.listen_port == listen_port)
        {
            r.forward_to = forward_to;
            r.installed_at_ms = now_ms;
            r.ttl_ms = ttl_ms;
            r.client_address = client_address;
            return r.id;
        }
        self.next_id += 1;
        let id = self.next_id;
        self.rules.push(FirewallRule {
            id,
            client_address,
            listen_port,
            forward_to,
            installed_at_ms: now_ms,
            ttl_ms,
        });
        id
    }

    fn position(&self, src: NetAddress, dst_port: u16) -> Option<usize> {
        self.rules.iter().position(|r| r.matches(src, dst_port))
    }

    fn remove_index(&mut self, idx: usize) -> FirewallRule {
        self.rules.remove(idx)
    }

    /// Sweeps every rule whose age has reached its TTL; returns the ids.
    pub fn expire(&mut self, now_ms: u64) -> Vec<u64> {
        let mut dead = Vec::new();
        self.rules.retain(|r| {
            if r.is_live(now_ms) {
                true
            } else {
                dead.push(r.id);
                false
            }
        });
        dead
    }

    pub fn live(&self, now_ms: u64) -> impl Iterator<Item = &FirewallRule> {
        self.rules.iter().filter(move |r| r.is_live(now_ms))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// What the gateway decided to do with one inbound packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayAction {
    ForwardTo(NetAddress),
    EscalateSpaToController,
    Drop(DropCause),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropCause {
    /// No rule matched. The common case for everything unsolicited.
    NoRule,
    /// A rule matched but its TTL had run out; it has been removed.
    RuleExpired,
    /// The packet claimed to be SPA and failed local validation.
    SpaRejected(RejectReason),
}

/// Inbound packet as the enforcement path sees it: either an SPA datagram
/// or opaque flow traffic. The gateway has no reason to distinguish SYNs
/// from data — rules either match or they don't.
#[derive(Debug, Clone, Copy)]
pub enum InboundKind<'a> {
    Spa(&'a [u8]),
    Flow,
}

pub struct Gateway {
    id: HostId,
    address: Ip,
    /// Local copy of client keys for pre-escalation filtering. May lag the
    /// controller (e.g. a revoked client still present here) — that is
    /// fine, because the controller re-validates everything.
    keys: BTreeMap<HostId, [u8; 32]>,
    freshness_horizon_ms: u64,
    rules: RuleTable,
    audit: Vec<String>,
}

impl Gateway {
    pub fn new(
        id: HostId,
        address: Ip,
        keys: BTreeMap<HostId, [u8; 32]>,
        freshness_horizon_ms: u64,
    ) -> Self {
        Gateway {
            id,
            address,
            keys,
            freshness_horizon_ms,
            rules: RuleTable::default(),
            audit: Vec::new(),
        }
    }

    pub fn id(&self) -> HostId {
        self.id
    }

    pub fn address(&self) -> Ip {
        self.address
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    pub fn remove_key(&mut self, host: HostId) {
        self.keys.remove(&host);
    }

    /// The whole enforcement decision for one inbound packet.
    pub fn process_packet(
        &mut self,
        src: NetAddress,
        dst: NetAddress,
        kind: InboundKind<'_>,
        now_ms: u64,
    ) -> GatewayAction {
        let action = match kind {
            InboundKind::Spa(bytes) => match self.validate_spa_locally(bytes, now_ms) {
                Ok(()) => GatewayAction::EscalateSpaToController,
                Err(reason) => GatewayAction::Drop(DropCause::SpaRejected(reason)),
            },
            InboundKind::Flow => match self.rules.position(src, dst.port) {
                None => GatewayAction::Drop(DropCause::NoRule),
                Some(idx) => {
                    let rule = self.rules.rules[idx];
                    if rule.is_live(now_ms) {
                        GatewayAction::ForwardTo(rule.forward_to)
                    } else {
                        self.rules.remove_index(idx);
                        GatewayAction::Drop(DropCause::RuleExpired)
                    }
                }
            },
        };
        self.audit_line(&action, src, dst, now_ms);
        action
    }

    /// Cheap pre-filter, in check order: parse, key known here, MAC,
    /// freshness. Replay is deliberately absent.
    fn validate_spa_locally(&self, bytes: &[u8], now_ms: u64) -> Result<(), RejectReason> {
        let pkt = SpaPacket::deserialize(bytes).ok_or(RejectReason::Malformed)?;
        let key = self
            .keys
            .get(&pkt.client_id)
            .ok_or(RejectReason::UnknownClient)?;
        if compute_mac(key, &bytes[..SPA_SIGNED_LEN]) != pkt.mac {
            return Err(RejectReason::BadMac);
        }
        if now_ms.abs_diff(pkt.timestamp_ms) > self.freshness_horizon_ms {
            return Err(RejectReason::Stale);
        }
        Ok(())
    }

    /// Applies a controller directive: one rule per allowed service.
    /// Returns the rule ids in directive order.
    pub fn install_rules(
        &mut self,
        directive: &AuthorizationDirective,
        now_ms: u64,
    ) -> Result<Vec<u64>, GatewayError> {
        if directive.allowed_services.is_empty() {
            return Err(GatewayError::EmptyDirective(directive.client_id));
        }
        let ids = directive
            .allowed_services
            .iter()
            .map(|route| {
                self.rules.upsert(
                    directive.client_address,
                    route.gateway_listen_port,
                    route.forward_to,
                    directive.ttl_ms,
                    now_ms,
                )
            })
            .collect();
        Ok(ids)
    }

    /// Timer-driven sweep; the lazy path in `process_packet` catches
    /// anything that slips between sweeps.
    pub fn expire_rules(&mut self, now_ms: u64) -> Vec<u64> {
        self.rules.expire(now_ms)
    }

    /// Audit log, one line per processed packet:
    /// `ts_ms,action,src,dst_port,rule_id` with `action` one of
    /// `forward|escalate|drop` and `rule_id` `-` unless a rule was touched.
    pub fn audit_log(&self) -> &[String] {
        &self.audit
    }

    fn audit_line(&mut self, action: &GatewayAction, src: NetAddress, dst: NetAddress, now_ms: u64) {
        let (verb, rule_id) = match action {
            GatewayAction::ForwardTo(_) => {
                let id = self
                    .rules
                    .position(src, dst.port)
                    .map(|i| self.rules.rules[i].id);
                ("forward", id)
            }
            GatewayAction::EscalateSpaToController => ("escalate", None),
            GatewayAction::Drop(_) => ("drop", None),
        };
        let rule = rule_id.map_or_else(|| "-".to_string(), |i| i.to_string());
        self.audit
            .push(format!("{now_ms},{verb},{src},{},{rule}", dst.port));
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("id", &self.id)
            .field("address", &self.address)
            .field("rules", &self.rules.len())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{HostId, Ip};
    use crate::control::ServiceRoute;
    use crate::spa::{build_spa, Credential};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn id(label: &str) -> HostId {
        HostId::from_label(label).unwrap()
    }

    fn addr(s: &str) -> NetAddress {
        s.parse().unwrap()
    }

    fn test_gateway() -> Gateway {
        let mut keys = BTreeMap::new();
        keys.insert(id("ue_gnb"), [0x11; 32]);
        Gateway::new(id("gateway1"), Ip::new(10, 0, 1, 1), keys, 5_000)
    }

    fn directive(ttl_ms: u64, issued_at_ms: u64) -> AuthorizationDirective {
        AuthorizationDirective {
            client_id: id("ue_gnb"),
            client_address: addr("10.0.0.10:40000"),
            allowed_services: vec![
                ServiceRoute {
                    service_id: id("amf_smf"),
                    gateway_listen_port: 44,
                    forward_to: addr("10.0.4.1:7777"),
                },
                ServiceRoute {
                    service_id: id("upf"),
                    gateway_listen_port: 45,
                    forward_to: addr("10.0.4.2:8888"),
                },
            ],
            ttl_ms,
            issued_at_ms,
        }
    }

    #[test]
    fn default_drop_with_no_rules() {
        let mut gw = test_gateway();
        let a = gw.process_packet(addr("10.0.0.66:4444"), addr("10.0.1.1:80"), InboundKind::Flow, 0);
        assert_eq!(a, GatewayAction::Drop(DropCause::NoRule));
        assert_eq!(gw.audit_log(), ["0,drop,10.0.0.66:4444,80,-"]);
    }

    #[test]
    fn rule_lifecycle_forward_then_expire() {
        let mut gw = test_gateway();
        let ids = gw.install_rules(&directive(1_000, 100), 100).unwrap();
        assert_eq!(ids.len(), 2);
        let client = addr("10.0.0.10:40000");

        // live inside the window, from any source port of that client
        let a = gw.process_packet(addr("10.0.0.10:51515"), addr("10.0.1.1:44"), InboundKind::Flow, 500);
        assert_eq!(a, GatewayAction::ForwardTo(addr("10.0.4.1:7777")));

        // age == ttl: dead, removed, dropped
        let a = gw.process_packet(client, addr("10.0.1.1:44"), InboundKind::Flow, 1_100);
        assert_eq!(a, GatewayAction::Drop(DropCause::RuleExpired));
        assert_eq!(gw.rules().len(), 1); // port 45 rule still present

        // and gone for good
        let a = gw.process_packet(client, addr("10.0.1.1:44"), InboundKind::Flow, 1_100);
        assert_eq!(a, GatewayAction::Drop(DropCause::NoRule));
    }

    #[test]
    fn rule_matches_client_and_port_only() {
        let mut gw = test_gateway();
        gw.install_rules(&directive(10_000, 0), 0).unwrap();

        // other source, same port: drop
        let a = gw.process_packet(addr("10.0.0.66:40000"), addr("10.0.1.1:44"), InboundKind::Flow, 1);
        assert_eq!(a, GatewayAction::Drop(DropCause::NoRule));

        // right client, port with no rule: drop
        let a = gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:46"), InboundKind::Flow, 1);
        assert_eq!(a, GatewayAction::Drop(DropCause::NoRule));
    }

    #[test]
    fn reinstall_refreshes_instead_of_duplicating() {
        let mut gw = test_gateway();
        let first = gw.install_rules(&directive(1_000, 0), 0).unwrap();
        let second = gw.install_rules(&directive(1_000, 900), 900).unwrap();
        assert_eq!(first, second, "rule ids stay stable across refresh");
        assert_eq!(gw.rules().len(), 2);
        // refreshed clock: still alive at 1500 (900 + 1000 > 1500)
        let a = gw.process_packet(
            addr("10.0.0.10:40000"),
            addr("10.0.1.1:44"),
            InboundKind::Flow,
            1_500,
        );
        assert!(matches!(a, GatewayAction::ForwardTo(_)));
    }

    #[test]
    fn spa_local_checks() {
        let mut gw = test_gateway();
        let cred = Credential {
            host_id: id("ue_gnb"),
            hmac_key: [0x11; 32],
            created_at_ms: 0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let good = build_spa(&cred, id("amf_smf"), 1_000, &mut rng).serialize();

        let a = gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:62201"), InboundKind::Spa(&good), 1_001);
        assert_eq!(a, GatewayAction::EscalateSpaToController);

        // stale
        let a = gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:62201"), InboundKind::Spa(&good), 7_000);
        assert_eq!(a, GatewayAction::Drop(DropCause::SpaRejected(RejectReason::Stale)));

        // tampered
        let mut bad = good;
        bad[20] ^= 0xff;
        let a = gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:62201"), InboundKind::Spa(&bad), 1_001);
        assert_eq!(a, GatewayAction::Drop(DropCause::SpaRejected(RejectReason::BadMac)));

        // unknown signer
        let stranger = Credential {
            host_id: id("stranger"),
            hmac_key: [0x22; 32],
            created_at_ms: 0,
        };
        let alien = build_spa(&stranger, id("amf_smf"), 1_000, &mut rng).serialize();
        let a = gw.process_packet(addr("10.0.0.66:4000"), addr("10.0.1.1:62201"), InboundKind::Spa(&alien), 1_001);
        assert_eq!(a, GatewayAction::Drop(DropCause::SpaRejected(RejectReason::UnknownClient)));

        // replays pass local checks; only the controller can tell
        let a = gw.process_packet(addr("10.0.0.66:4000"), addr("10.0.1.1:62201"), InboundKind::Spa(&good), 1_002);
        assert_eq!(a, GatewayAction::EscalateSpaToController);
    }

    #[test]
    fn audit_log_format() {
        let mut gw = test_gateway();
        gw.install_rules(&directive(10_000, 0), 0).unwrap();
        gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:44"), InboundKind::Flow, 5);
        let cred = Credential {
            host_id: id("ue_gnb"),
            hmac_key: [0x11; 32],
            created_at_ms: 0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let spa = build_spa(&cred, id("amf_smf"), 6, &mut rng).serialize();
        gw.process_packet(addr("10.0.0.10:40000"), addr("10.0.1.1:62201"), InboundKind::Spa(&spa), 6);
        gw.process_packet(addr("10.0.0.66:1:".len() as u16 + 1000, ), addr("10.0.1.1:7"), InboundKind::Flow, 7);
        assert_eq!(
            gw.audit_log(),
            [
                "5,forward,10.0.0.10:40000,44,1",
                "6,escalate,10.0.0.10:40000,62201,-",
                "7,drop,10.0.0.66:1004,7,-",
            ]
        );
    }

    #[test]
    fn sweep_removes_only_dead_rules() {
        let mut gw = test_gateway();
        gw.install_rules(&directive(1_000, 0), 0).unwrap();
        assert!(gw.expire_rules(999).is_empty());
        let dead = gw.expire_rules(1_000);
        assert_eq!(dead, vec![1, 2]);
        assert!(gw.rules().is_empty());
    }
}
