//! Frame data model and wire format.
//!
//! Every simulated packet is an [`EthernetFrame`]. Frames serialize to the
//! standard on-wire layouts (Ethernet II, 802.1Q, IPv4, ARP, UDP/VXLAN) with
//! two simplifications: checksums are always zero and short frames are not
//! padded to the 60-byte Ethernet minimum.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;

pub const IPPROTO_UDP: u8 = 17;

pub const VXLAN_PORT: u16 = 4789;
/// UDP source port used for every encapsulated frame. Real VTEPs hash the
/// inner flow into this field; the model keeps it fixed.
pub const VXLAN_SOURCE_PORT: u16 = 49152;

pub const ETH_HEADER_LEN: usize = 14;
pub const VLAN_TAG_LEN: usize = 4;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const VXLAN_HEADER_LEN: usize = 8;
pub const ARP_LEN: usize = 28;

/// Bytes added by [`vxlan_encap`] around the inner frame.
pub const VXLAN_OVERHEAD: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN + VXLAN_HEADER_LEN;

const IPV4_DEFAULT_TTL: u8 = 64;
const VXLAN_FLAG_VNI_VALID: u8 = 0x08;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("vlan id {0} out of range 0..=4094")]
    InvalidVlan(u16),
    #[error("vni {0} does not fit in 24 bits")]
    VniOutOfRange(u32),
    #[error("frame does not carry a VXLAN envelope")]
    NotVxlan,
    #[error("invalid mac address {0:?}")]
    InvalidMac(String),
    #[error("invalid hex dump: {0}")]
    InvalidHex(String),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddress(pub [u8; 6]);

impl MacAddress {
    pub const BROADCAST: MacAddress = MacAddress([0xff; 6]);
    pub const ZERO: MacAddress = MacAddress([0; 6]);

    pub const fn new(octets: [u8; 6]) -> Self {
        MacAddress(octets)
    }

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }

    pub fn is_broadcast(&self) -> bool {
        *self == Self::BROADCAST
    }

    /// Locally administered unicast address built from a 3-byte prefix and a
    /// 24-bit counter.
    pub fn from_prefix(prefix: [u8; 3], counter: u32) -> Self {
        let c = counter.to_be_bytes();
        MacAddress([prefix[0], prefix[1], prefix[2], c[1], c[2], c[3]])
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MacAddress {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| FrameError::InvalidMac(s.to_owned()))?;
            if part.len() != 2 {
                return Err(FrameError::InvalidMac(s.to_owned()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| FrameError::InvalidMac(s.to_owned()))?;
        }
        if parts.next().is_some() {
            return Err(FrameError::InvalidMac(s.to_owned()));
        }
        Ok(MacAddress(out))
    }
}

impl Serialize for MacAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 802.1Q VLAN id. `0` means untagged / no tenant VLAN.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct VlanId(u16);

impl VlanId {
    pub const UNTAGGED: VlanId = VlanId(0);
    pub const MAX: u16 = 4094;

    pub fn new(id: u16) -> Result<Self, FrameError> {
        if id > Self::MAX {
            return Err(FrameError::InvalidVlan(id));
        }
        Ok(VlanId(id))
    }

    pub fn get(self) -> u16 {
        self.0
    }

    pub fn is_untagged(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for VlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for VlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vlan{}", self.0)
    }
}

impl<'de> Deserialize<'de> for VlanId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        VlanId::new(u16::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// 24-bit VXLAN network identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
#[serde(transparent)]
pub struct Vni(u32);

impl Vni {
    pub const LIMIT: u32 = 1 << 24;

    pub fn new(vni: u32) -> Result<Self, FrameError> {
        if vni >= Self::LIMIT {
            return Err(FrameError::VniOutOfRange(vni));
        }
        Ok(Vni(vni))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Vni {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for Vni {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vni::new(u32::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArpOp {
    Request,
    Reply,
}

impl ArpOp {
    fn code(self) -> u16 {
        match self {
            ArpOp::Request => 1,
            ArpOp::Reply => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArpMessage {
    pub op: ArpOp,
    pub sender_mac: MacAddress,
    pub sender_ip: Ipv4Addr,
    pub target_mac: MacAddress,
    pub target_ip: Ipv4Addr,
}

impl ArpMessage {
    pub fn request(sender_mac: MacAddress, sender_ip: Ipv4Addr, target_ip: Ipv4Addr) -> Self {
        ArpMessage {
            op: ArpOp::Request,
            sender_mac,
            sender_ip,
            target_mac: MacAddress::ZERO,
            target_ip,
        }
    }

    /// Reply to `request` announcing that `target_ip` lives at `answer_mac`.
    pub fn reply_to(request: &ArpMessage, answer_mac: MacAddress) -> Self {
        ArpMessage {
            op: ArpOp::Reply,
            sender_mac: answer_mac,
            sender_ip: request.target_ip,
            target_mac: request.sender_mac,
            target_ip: request.sender_ip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VxlanEnvelope {
    pub vni: Vni,
    pub inner: Box<EthernetFrame>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Ipv4Body {
    Vxlan(VxlanEnvelope),
    Opaque(Vec<u8>),
}

/// IPv4 packet.
///
/// A `Vxlan` body always serializes with protocol 17. An `Opaque` body under
/// protocol 17 whose first bytes form a UDP header to port 4789 followed by a
/// valid VXLAN header is not canonical: it parses back as `Vxlan`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ipv4Packet {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: u8,
    pub body: Ipv4Body,
}

impl Ipv4Packet {
    pub fn body_len(&self) -> usize {
        match &self.body {
            Ipv4Body::Vxlan(env) => UDP_HEADER_LEN + VXLAN_HEADER_LEN + env.inner.wire_len(),
            Ipv4Body::Opaque(bytes) => bytes.len(),
        }
    }

    pub fn total_len(&self) -> usize {
        IPV4_HEADER_LEN + self.body_len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    Ipv4(Ipv4Packet),
    Arp(ArpMessage),
    /// Anything else, kept as raw bytes after the ethertype.
    Opaque { ethertype: u16, bytes: Vec<u8> },
}

impl Payload {
    pub fn ethertype(&self) -> u16 {
        match self {
            Payload::Ipv4(_) => ETHERTYPE_IPV4,
            Payload::Arp(_) => ETHERTYPE_ARP,
            Payload::Opaque { ethertype, .. } => *ethertype,
        }
    }

    fn wire_len(&self) -> usize {
        match self {
            Payload::Ipv4(p) => p.total_len(),
            Payload::Arp(_) => ARP_LEN,
            Payload::Opaque { bytes, .. } => bytes.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EthernetFrame {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub vlan: Option<VlanId>,
    pub payload: Payload,
}

impl EthernetFrame {
    pub fn ethertype(&self) -> u16 {
        self.payload.ethertype()
    }

    pub fn ipv4(&self) -> Option<&Ipv4Packet> {
        match &self.payload {
            Payload::Ipv4(p) => Some(p),
            _ => None,
        }
    }

    pub fn ipv4_mut(&mut self) -> Option<&mut Ipv4Packet> {
        match &mut self.payload {
            Payload::Ipv4(p) => Some(p),
            _ => None,
        }
    }

    pub fn arp(&self) -> Option<&ArpMessage> {
        match &self.payload {
            Payload::Arp(a) => Some(a),
            _ => None,
        }
    }

    pub fn vxlan(&self) -> Option<&VxlanEnvelope> {
        match &self.ipv4()?.body {
            Ipv4Body::Vxlan(env) => Some(env),
            Ipv4Body::Opaque(_) => None,
        }
    }

    pub fn dst_ip(&self) -> Option<Ipv4Addr> {
        self.ipv4().map(|p| p.dst)
    }

    pub fn wire_len(&self) -> usize {
        let tag = if self.vlan.is_some() { VLAN_TAG_LEN } else { 0 };
        ETH_HEADER_LEN + tag + self.payload.wire_len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.dst.0);
        out.extend_from_slice(&self.src.0);
        if let Some(vlan) = self.vlan {
            out.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
            out.extend_from_slice(&vlan.get().to_be_bytes());
        }
        out.extend_from_slice(&self.ethertype().to_be_bytes());
        match &self.payload {
            Payload::Ipv4(p) => write_ipv4(p, out),
            Payload::Arp(a) => write_arp(a, out),
            Payload::Opaque { bytes, .. } => out.extend_from_slice(bytes),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        need(bytes, ETH_HEADER_LEN)?;
        let dst = mac_at(bytes, 0);
        let src = mac_at(bytes, 6);
        let mut ethertype = be16(bytes, 12);
        let mut offset = ETH_HEADER_LEN;
        let mut vlan = None;
        if ethertype == ETHERTYPE_VLAN {
            need(bytes, ETH_HEADER_LEN + VLAN_TAG_LEN)?;
            let tci = be16(bytes, 14);
            vlan = Some(VlanId::new(tci & 0x0fff)?);
            ethertype = be16(bytes, 16);
            offset += VLAN_TAG_LEN;
        }
        let rest = &bytes[offset..];
        let payload = match ethertype {
            ETHERTYPE_IPV4 => parse_ipv4(rest).map(Payload::Ipv4),
            ETHERTYPE_ARP => parse_arp(rest).map(Payload::Arp),
            _ => None,
        }
        .unwrap_or_else(|| Payload::Opaque {
            ethertype,
            bytes: rest.to_vec(),
        });
        Ok(EthernetFrame { dst, src, vlan, payload })
    }

    /// One-line lowercase hex dump, no separators.
    pub fn to_hex(&self) -> String {
        hex::encode(self.serialize())
    }

    pub fn from_hex(line: &str) -> Result<Self, FrameError> {
        let bytes = hex::decode(line.trim()).map_err(|e| FrameError::InvalidHex(e.to_string()))?;
        Self::parse(&bytes)
    }
}

fn need(bytes: &[u8], n: usize) -> Result<(), FrameError> {
    if bytes.len() < n {
        return Err(FrameError::Truncated {
            needed: n,
            got: bytes.len(),
        });
    }
    Ok(())
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn mac_at(b: &[u8], at: usize) -> MacAddress {
    let mut m = [0u8; 6];
    m.copy_from_slice(&b[at..at + 6]);
    MacAddress(m)
}

fn ip_at(b: &[u8], at: usize) -> Ipv4Addr {
    Ipv4Addr::new(b[at], b[at + 1], b[at + 2], b[at + 3])
}

fn write_ipv4(p: &Ipv4Packet, out: &mut Vec<u8>) {
    let protocol = match p.body {
        Ipv4Body::Vxlan(_) => IPPROTO_UDP,
        Ipv4Body::Opaque(_) => p.protocol,
    };
    let total = p.total_len() as u16;
    out.extend_from_slice(&[0x45, 0x00]);
    out.extend_from_slice(&total.to_be_bytes());
    // id, flags/fragment offset
    out.extend_from_slice(&[0, 0, 0, 0]);
    out.push(IPV4_DEFAULT_TTL);
    out.push(protocol);
    // checksum placeholder
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&p.src.octets());
    out.extend_from_slice(&p.dst.octets());
    match &p.body {
        Ipv4Body::Opaque(bytes) => out.extend_from_slice(bytes),
        Ipv4Body::Vxlan(env) => {
            let udp_len = (UDP_HEADER_LEN + VXLAN_HEADER_LEN + env.inner.wire_len()) as u16;
            out.extend_from_slice(&VXLAN_SOURCE_PORT.to_be_bytes());
            out.extend_from_slice(&VXLAN_PORT.to_be_bytes());
            out.extend_from_slice(&udp_len.to_be_bytes());
            out.extend_from_slice(&[0, 0]);
            let vni = env.vni.get().to_be_bytes();
            out.extend_from_slice(&[VXLAN_FLAG_VNI_VALID, 0, 0, 0, vni[1], vni[2], vni[3], 0]);
            env.inner.write_to(out);
        }
    }
}

/// `None` means "not a well-formed IPv4 packet"; the caller keeps the bytes
/// opaque.
fn parse_ipv4(b: &[u8]) -> Option<Ipv4Packet> {
    if b.len() < IPV4_HEADER_LEN || b[0] >> 4 != 4 {
        return None;
    }
    let header_len = usize::from(b[0] & 0x0f) * 4;
    let total = usize::from(be16(b, 2));
    if header_len < IPV4_HEADER_LEN || total < header_len || total > b.len() {
        return None;
    }
    let protocol = b[9];
    let src = ip_at(b, 12);
    let dst = ip_at(b, 16);
    let body_bytes = &b[header_len..total];
    let body = if protocol == IPPROTO_UDP {
        parse_vxlan(body_bytes).map(Ipv4Body::Vxlan)
    } else {
        None
    }
    .unwrap_or_else(|| Ipv4Body::Opaque(body_bytes.to_vec()));
    Some(Ipv4Packet {
        src,
        dst,
        protocol,
        body,
    })
}

fn parse_vxlan(udp: &[u8]) -> Option<VxlanEnvelope> {
    if udp.len() < UDP_HEADER_LEN + VXLAN_HEADER_LEN {
        return None;
    }
    if be16(udp, 2) != VXLAN_PORT || usize::from(be16(udp, 4)) != udp.len() {
        return None;
    }
    let vx = &udp[UDP_HEADER_LEN..];
    if vx[0] != VXLAN_FLAG_VNI_VALID {
        return None;
    }
    let vni = u32::from_be_bytes([0, vx[4], vx[5], vx[6]]);
    let inner = EthernetFrame::parse(&vx[VXLAN_HEADER_LEN..]).ok()?;
    Some(VxlanEnvelope {
        vni: Vni(vni),
        inner: Box::new(inner),
    })
}

fn write_arp(a: &ArpMessage, out: &mut Vec<u8>) {
    out.extend_from_slice(&[0x00, 0x01]);
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    out.extend_from_slice(&[6, 4]);
    out.extend_from_slice(&a.op.code().to_be_bytes());
    out.extend_from_slice(&a.sender_mac.0);
    out.extend_from_slice(&a.sender_ip.octets());
    out.extend_from_slice(&a.target_mac.0);
    out.extend_from_slice(&a.target_ip.octets());
}

fn parse_arp(b: &[u8]) -> Option<ArpMessage> {
    if b.len() != ARP_LEN {
        return None;
    }
    if be16(b, 0) != 1 || be16(b, 2) != ETHERTYPE_IPV4 || b[4] != 6 || b[5] != 4 {
        return None;
    }
    let op = match be16(b, 6) {
        1 => ArpOp::Request,
        2 => ArpOp::Reply,
        _ => return None,
    };
    Some(ArpMessage {
        op,
        sender_mac: mac_at(b, 8),
        sender_ip: ip_at(b, 14),
        target_mac: mac_at(b, 18),
        target_ip: ip_at(b, 24),
    })
}

/// Outer addressing for an encapsulated frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Underlay {
    pub src_mac: MacAddress,
    pub dst_mac: MacAddress,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
}

pub fn vxlan_encap(inner: &EthernetFrame, vni: u32, underlay: &Underlay) -> Result<EthernetFrame, FrameError> {
    let vni = Vni::new(vni)?;
    Ok(EthernetFrame {
        dst: underlay.dst_mac,
        src: underlay.src_mac,
        vlan: None,
        payload: Payload::Ipv4(Ipv4Packet {
            src: underlay.src_ip,
            dst: underlay.dst_ip,
            protocol: IPPROTO_UDP,
            body: Ipv4Body::Vxlan(VxlanEnvelope {
                vni,
                inner: Box::new(inner.clone()),
            }),
        }),
    })
}

pub fn vxlan_decap(frame: &EthernetFrame) -> Result<(Vni, EthernetFrame), FrameError> {
    let env = frame.vxlan().ok_or(FrameError::NotVxlan)?;
    Ok((env.vni, (*env.inner).clone()))
}
