//! The controller: registry, policy, SPA adjudication, grant issuance.
//!
//! Gateways never decide anything on their own. They forward SPA packets
//! here, and the controller answers with either a grant — an
//! [`AuthorizationDirective`] naming exactly which (client address, listen
//! port) pairs may pass and for how long — or a deny, which the gateway
//! expresses by doing nothing at all.
//!
//! The controller holds the only replay window that matters. A gateway's
//! local checks (key known, MAC good, timestamp fresh) are a cheap filter;
//! the one-time-nonce property is enforced in exactly one place so that two
//! gateways cannot both accept the same packet.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::addr::{HostId, HostIdentity, NetAddress, Role};
use crate::spa::{
    verify_spa, Credential, CredentialStore, RejectReason, ReplayWindow, SpaPacket, VerifyResult,
};

pub const DEFAULT_GRANT_TTL_MS: u64 = 30_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("host {0} is already registered")]
    DuplicateHost(HostId),
    #[error("host {0} is not registered")]
    UnknownHost(HostId),
    #[error("{0} is not a registered gateway")]
    NotAGateway(HostId),
    #[error("{0} is not a registered service")]
    NotAService(HostId),
    #[error("service {0} has no gateway route; call set_service_route first")]
    ServiceNotExposed(HostId),
    #[error(transparent)]
    Credential(#[from] crate::spa::SpaError),
}

/// Who may request which services. Empty entry and missing entry are
/// equivalent: no access.
#[derive(Debug, Default, Clone)]
pub struct PolicyTable {
    entries: BTreeMap<HostId, Vec<HostId>>,
}

impl PolicyTable {
    pub fn allows(&self, client: HostId, service: HostId) -> bool {
        self.entries
            .get(&client)
            .is_some_and(|svcs| svcs.contains(&service))
    }

    pub fn services_for(&self, client: HostId) -> &[HostId] {
        self.entries.get(&client).map_or(&[], Vec::as_slice)
    }
}

/// One exposed service inside a grant: where the gateway listens for the
/// client and where matching packets are forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceRoute {
    pub service_id: HostId,
    pub gateway_listen_port: u16,
    pub forward_to: NetAddress,
}

/// What the controller tells a gateway after a successful SPA. The
/// directive is the *only* thing that ever causes a firewall rule to exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorizationDirective {
    pub client_id: HostId,
    pub client_address: NetAddress,
    /// Sorted by `gateway_listen_port`; a grant covers the client's whole
    /// entitlement, not just the service named in the packet.
    pub allowed_services: Vec<ServiceRoute>,
    pub ttl_ms: u64,
    pub issued_at_ms: u64,
}

/// Mutual-TLS-style channel record. The simulator treats these as
/// unforgeable; what matters for the model is *when* they exist and between
/// whom, not the handshake bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecureChannel {
    pub channel_id: u64,
    pub peer_a: HostId,
    pub peer_b: HostId,
    pub established_at_ms: u64,
}

/// Fresh session material pushed to the client alongside a grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CredentialUpdate {
    pub client_id: HostId,
    pub session_token: [u8; 32],
    pub issued_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantOutcome {
    pub directive: AuthorizationDirective,
    pub credential_update: CredentialUpdate,
    /// controller <-> client
    pub client_channel: SecureChannel,
    /// controller <-> escalating gateway
    pub gateway_channel: SecureChannel,
}

/// Denials extend the SPA reject reasons with the policy miss, which can
/// only be decided here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    Spa(RejectReason),
    NotAuthorized,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Spa(r) => r.as_str(),
            DenyReason::NotAuthorized => "not_authorized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerDecision {
    Grant(Box<GrantOutcome>),
    Deny(DenyReason),
}

impl ControllerDecision {
    pub fn is_grant(&self) -> bool {
        matches!(self, ControllerDecision::Grant(_))
    }
}

pub struct Controller {
    registry: BTreeMap<HostId, HostIdentity>,
    credentials: CredentialStore,
    policy: PolicyTable,
    /// service id -> listen port on the fronting gateway
    exposures: BTreeMap<HostId, u16>,
    replay: ReplayWindow,
    grant_ttl_ms: u64,
    rng: ChaCha20Rng,
    next_channel_id: u64,
    log: Vec<String>,
}

impl Controller {
    pub fn new(grant_ttl_ms: u64, freshness_horizon_ms: u64, rng: ChaCha20Rng) -> Self {
        Controller {
            registry: BTreeMap::new(),
            credentials: CredentialStore::new(),
            policy: PolicyTable::default(),
            exposures: BTreeMap::new(),
            replay: ReplayWindow::new(freshness_horizon_ms),
            grant_ttl_ms,
            rng,
            next_channel_id: 1,
            log: Vec::new(),
        }
    }

    pub fn grant_ttl_ms(&self) -> u64 {
        self.grant_ttl_ms
    }

    pub fn freshness_horizon_ms(&self) -> u64 {
        self.replay.horizon_ms()
    }

    /// Registers a host and, if it will ever authenticate, its credential.
    pub fn register_host(
        &mut self,
        identity: HostIdentity,
        credential: Option<Credential>,
    ) -> Result<(), ControlError> {
        if self.registry.contains_key(&identity.host_id) {
            return Err(ControlError::DuplicateHost(identity.host_id));
        }
        if let Some(cred) = credential {
            debug_assert_eq!(cred.host_id, identity.host_id);
            self.credentials.install(cred)?;
        }
        self.registry.insert(identity.host_id, identity);
        Ok(())
    }

    pub fn host(&self, id: HostId) -> Option<&HostIdentity> {
        self.registry.get(&id)
    }

    pub fn is_gateway(&self, id: HostId) -> bool {
        self.registry
            .get(&id)
            .is_some_and(|h| h.role == Role::AcceptingHost)
    }

    /// Publishes a service behind a gateway listen port. Must precede any
    /// policy entry naming the service.
    pub fn set_service_route(
        &mut self,
        service: HostId,
        gateway_listen_port: u16,
    ) -> Result<(), ControlError> {
        let host = self
            .registry
            .get(&service)
            .ok_or(ControlError::UnknownHost(service))?;
        if host.role != Role::Service {
            return Err(ControlError::NotAService(service));
        }
        self.exposures.insert(service, gateway_listen_port);
        Ok(())
    }

    pub fn set_policy(
        &mut self,
        client: HostId,
        services: impl IntoIterator<Item = HostId>,
    ) -> Result<(), ControlError> {
        if !self.registry.contains_key(&client) {
            return Err(ControlError::UnknownHost(client));
        }
        let mut list = Vec::new();
        for svc in services {
            if !self.exposures.contains_key(&svc) {
                return Err(ControlError::ServiceNotExposed(svc));
            }
            if !list.contains(&svc) {
                list.push(svc);
            }
        }
        self.policy.entries.insert(client, list);
        Ok(())
    }

    /// Kills a client's standing instantly: its credential is gone, so its
    /// next SPA is indistinguishable from a stranger's. Already-installed
    /// firewall rules are *not* recalled — they die by TTL. That asymmetry
    /// is deliberate: revocation must not require a round trip to every
    /// gateway to be effective against new connections.
    pub fn revoke_host(&mut self, host: HostId) -> Result<(), ControlError> {
        self.credentials.revoke(host)?;
        Ok(())
    }

    pub fn export_keys(&self) -> BTreeMap<HostId, [u8; 32]> {
        self.credentials.export_keys()
    }

    pub fn credential_of(&self, host: HostId) -> Option<&Credential> {
        self.credentials.lookup(host)
    }

    /// Adjudicates an SPA packet escalated by `gateway`. This is the single
    /// choke point: the replay nonce is burned here on accept, policy is
    /// consulted here, and the grant names `gateway` as the enforcement
    /// point for every route.
    ///
    /// Note the one sharp edge: a packet that passes MAC, freshness and
    /// replay but asks for a service outside policy consumes its nonce
    /// *before* the `NotAuthorized` deny. Re-sending the same packet after
    /// a policy change reports `Replay`, not a grant; the client must sign
    /// a fresh packet. Anything else would let an observer probe policy by
    /// replaying captured packets.
    pub fn handle_forwarded_spa(
        &mut self,
        spa_bytes: &[u8],
        gateway: HostId,
        now_ms: u64,
    ) -> Result<ControllerDecision, ControlError> {
        if !self.is_gateway(gateway) {
            return Err(ControlError::NotAGateway(gateway));
        }
        let parsed = SpaPacket::deserialize(spa_bytes);
        let creds = &self.credentials;
        let verdict = verify_spa(
            spa_bytes,
            |id| creds.key_of(id),
            &mut self.replay,
            now_ms,
        );
        let decision = match verdict {
            VerifyResult::Reject(reason) => ControllerDecision::Deny(DenyReason::Spa(reason)),
            VerifyResult::Accept => {
                // deserialize cannot fail if verify accepted
                let pkt = parsed.expect("accepted packet parses");
                if !self.policy.allows(pkt.client_id, pkt.requested_service_id) {
                    ControllerDecision::Deny(DenyReason::NotAuthorized)
                } else {
                    ControllerDecision::Grant(Box::new(self.issue_grant(
                        pkt.client_id,
                        gateway,
                        now_ms,
                    )?))
                }
            }
        };
        self.log_decision(&decision, parsed.as_ref(), now_ms);
        Ok(decision)
    }

    fn issue_grant(
        &mut self,
        client: HostId,
        gateway: HostId,
        now_ms: u64,
    ) -> Result<GrantOutcome, ControlError> {
        let client_address = self
            .registry
            .get(&client)
            .ok_or(ControlError::UnknownHost(client))?
            .real_address;

        let mut allowed_services = Vec::new();
        for &svc in self.policy.services_for(client) {
            let port = *self
                .exposures
                .get(&svc)
                .ok_or(ControlError::ServiceNotExposed(svc))?;
            let forward_to = self
                .registry
                .get(&svc)
                .ok_or(ControlError::UnknownHost(svc))?
                .real_address;
            allowed_services.push(ServiceRoute {
                service_id: svc,
                gateway_listen_port: port,
                forward_to,
            });
        }
        allowed_services.sort_by_key(|r| r.gateway_listen_port);

        let mut session_token = [0u8; 32];
        self.rng.fill_bytes(&mut session_token);

        let mut channel = |peer: HostId| {
            let id = self.next_channel_id;
            self.next_channel_id += 1;
            SecureChannel {
                channel_id: id,
                peer_a: self.controller_id(),
                peer_b: peer,
                established_at_ms: now_ms,
            }
        };
        let client_channel = channel(client);
        let gateway_channel = channel(gateway);

        Ok(GrantOutcome {
            directive: AuthorizationDirective {
                client_id: client,
                client_address,
                allowed_services,
                ttl_ms: self.grant_ttl_ms,
                issued_at_ms: now_ms,
            },
            credential_update: CredentialUpdate {
                client_id: client,
                session_token,
                issued_at_ms: now_ms,
            },
            client_channel,
            gateway_channel,
        })
    }

    fn controller_id(&self) -> HostId {
        self.registry
            .values()
            .find(|h| h.role == Role::Controller)
            .map(|h| h.host_id)
            .unwrap_or(HostId([0; 16]))
    }

    /// Decision log, one line per adjudicated packet:
    /// `ts_ms,event,client_id_hex,reason,services` where `event` is `grant`
    /// or `deny`, absent fields are `-`, and `services` is a
    /// semicolon-joined list of granted service ids in directive order.
    pub fn decision_log(&self) -> &[String] {
        &self.log
    }

    fn log_decision(&mut self, decision: &ControllerDecision, pkt: Option<&SpaPacket>, now_ms: u64) {
        let client_hex = pkt.map_or_else(|| "-".to_string(), |p| p.client_id.to_hex());
        let line = match decision {
            ControllerDecision::Grant(g) => {
                let services = g
                    .directive
                    .allowed_services
                    .iter()
                    .map(|r| r.service_id.to_hex())
                    .collect::<Vec<_>>()
                    .join(";");
                format!("{now_ms},grant,{client_hex},-,{services}")
            }
            ControllerDecision::Deny(reason) => {
                format!("{now_ms},deny,{client_hex},{},-", reason.as_str())
            }
        };
        self.log.push(line);
    }
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("hosts", &self.registry.len())
            .field("credentials", &self.credentials.len())
            .field("grant_ttl_ms", &self.grant_ttl_ms)
            .field("decisions", &self.log.len())
            .finish_non_exhaustive()
    }
}
