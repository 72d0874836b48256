//! Simulation-scoped addressing: IPv4-style addresses, host identities, roles.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddrError {
    #[error("invalid address `{0}`")]
    InvalidIp(String),
    #[error("invalid address:port `{0}`")]
    InvalidNetAddress(String),
    #[error("host label `{0}` longer than 16 bytes")]
    LabelTooLong(String),
}

/// 32-bit address in dotted-quad form. These live entirely inside the
/// simulator; they are never bound to real sockets.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ip(pub u32);

impl Ip {
    pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
        Ip(u32::from_be_bytes([a, b, c, d]))
    }

    pub fn octets(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for Ip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.octets();
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

impl fmt::Debug for Ip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ip({self})")
    }
}

impl FromStr for Ip {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddrError::InvalidIp(s.to_string());
        let mut parts = s.split('.');
        let mut octets = [0u8; 4];
        for o in &mut octets {
            *o = parts
                .next()
                .and_then(|p| p.parse::<u8>().ok())
                .ok_or_else(err)?;
        }
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(Ip(u32::from_be_bytes(octets)))
    }
}

/// Address plus 16-bit port, printed as `a.b.c.d:port`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetAddress {
    pub ip: Ip,
    pub port: u16,
}

impl NetAddress {
    pub const fn new(ip: Ip, port: u16) -> Self {
        NetAddress { ip, port }
    }
}

impl fmt::Display for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl fmt::Debug for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NetAddress({self})")
    }
}

impl FromStr for NetAddress {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddrError::InvalidNetAddress(s.to_string());
        let (ip, port) = s.rsplit_once(':').ok_or_else(err)?;
        Ok(NetAddress {
            ip: ip.parse().map_err(|_| err())?,
            port: port.parse().map_err(|_| err())?,
        })
    }
}

/// Opaque 16-byte host identifier. Human-readable labels are zero-padded;
/// anything that goes on the wire or into a log uses the full 16 bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(pub [u8; 16]);

impl HostId {
    /// Builds an id from a short ASCII label, zero-padded to 16 bytes.
    /// Labels over 16 bytes are a configuration error.
    pub fn from_label(label: &str) -> Result<Self, AddrError> {
        let bytes = label.as_bytes();
        if bytes.len() > 16 {
            return Err(AddrError::LabelTooLong(label.to_string()));
        }
        let mut id = [0u8; 16];
        id[..bytes.len()].copy_from_slice(bytes);
        Ok(HostId(id))
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    /// Label form if the id is padded printable ASCII, else hex.
    pub fn display_label(self) -> String {
        let end = self.0.iter().position(|&b| b == 0).unwrap_or(16);
        if end > 0
            && self.0[..end].iter().all(|b| b.is_ascii_graphic())
            && self.0[end..].iter().all(|&b| b == 0)
        {
            String::from_utf8_lossy(&self.0[..end]).into_owned()
        } else {
            self.to_hex()
        }
    }
}

impl fmt::Debug for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostId({})", self.display_label())
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_label())
    }
}

/// What a node does in the perimeter model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Client that must authenticate before anything answers it.
    InitiatingHost,
    /// Gateway enforcing default-drop in front of services.
    AcceptingHost,
    /// The policy decision point. Never directly reachable.
    Controller,
    /// Protected application endpoint.
    Service,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::InitiatingHost => "initiating_host",
            Role::AcceptingHost => "accepting_host",
            Role::Controller => "controller",
            Role::Service => "service",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initiating_host" | "client" => Ok(Role::InitiatingHost),
            "accepting_host" | "gateway" => Ok(Role::AcceptingHost),
            "controller" => Ok(Role::Controller),
            "service" => Ok(Role::Service),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// A node as the controller sees it: identity, role, and the address it
/// actually lives at (as opposed to whatever virtual address is currently
/// fronting it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostIdentity {
    pub host_id: HostId,
    pub role: Role,
    pub real_address: NetAddress,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ip_roundtrip() {
        let ip: Ip = "10.0.1.254".parse().unwrap();
        assert_eq!(ip, Ip::new(10, 0, 1, 254));
        assert_eq!(ip.to_string(), "10.0.1.254");
    }

    #[test]
    fn ip_rejects_garbage() {
        for bad in ["", "10.0.1", "10.0.1.2.3", "256.0.0.1", "a.b.c.d", "1..2.3"] {
            assert!(bad.parse::<Ip>().is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn net_address_roundtrip() {
        let a: NetAddress = "192.168.7.1:4433".parse().unwrap();
        assert_eq!(a.ip, Ip::new(192, 168, 7, 1));
        assert_eq!(a.port, 4433);
        assert_eq!(a.to_string(), "192.168.7.1:4433");
        assert!("10.0.0.1".parse::<NetAddress>().is_err());
        assert!("10.0.0.1:70000".parse::<NetAddress>().is_err());
    }

    #[test]
    fn host_id_label_padding() {
        let id = HostId::from_label("ue_gnb").unwrap();
        assert_eq!(&id.0[..6], b"ue_gnb");
        assert!(id.0[6..].iter().all(|&b| b == 0));
        assert_eq!(id.display_label(), "ue_gnb");
        assert_eq!(id.to_hex(), "75655f676e6200000000000000000000");
    }

    #[test]
    fn host_id_label_too_long() {
        assert!(HostId::from_label("a-very-long-host-label").is_err());
        // 16 bytes exactly is fine
        assert!(HostId::from_label("0123456789abcdef").is_ok());
    }

    #[test]
    fn binary_id_displays_as_hex() {
        let id = HostId([0xff; 16]);
        assert_eq!(id.display_label(), "ff".repeat(16));
    }

    #[test]
    fn ordering_is_stable_for_map_keys() {
        let a = HostId::from_label("amf_smf").unwrap();
        let b = HostId::from_label("upf").unwrap();
        assert!(a < b); // byte order of padded labels
    }
}
