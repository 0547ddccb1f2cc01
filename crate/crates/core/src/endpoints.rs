//! Tenant VM behavior: traffic sources and sinks, echo responders and the
//! MAC-rewriting forwarder used for service chains.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{
    ArpMessage, ArpOp, EthernetFrame, Ipv4Body, Ipv4Packet, MacAddress, Payload, ETH_HEADER_LEN, IPV4_HEADER_LEN,
};
use crate::ids::PortId;

/// IP protocol number used for generated test payloads (reserved for
/// experimentation).
pub const TEST_PROTOCOL: u8 = 253;

/// Smallest frame `make_packet` can build: Ethernet plus IPv4 header.
pub const MIN_PACKET_SIZE: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("no way to resolve next hop {0}")]
    UnresolvableNextHop(Ipv4Addr),
    #[error("frame size {0} below the minimum of {MIN_PACKET_SIZE}")]
    FrameTooSmall(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDescriptor {
    pub dst_ip: Ipv4Addr,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppBehavior {
    /// Originates `FlowDescriptor` traffic; absorbs anything it receives.
    Source(FlowDescriptor),
    Sink,
    Echo,
    L2Fwd { next_hop_mac: MacAddress },
}

/// What `make_packet` put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Emission {
    Data(EthernetFrame),
    /// An ARP request for the gateway; the data frame is queued until the
    /// reply arrives.
    ArpFirst(EthernetFrame),
}

impl Emission {
    pub fn frame(&self) -> &EthernetFrame {
        match self {
            Emission::Data(f) | Emission::ArpFirst(f) => f,
        }
    }
}

/// A tenant VM with a single VF and a host route: every destination other
/// than itself is reached through the virtual gateway.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantVm {
    pub id: u32,
    pub tenant: String,
    pub vf: PortId,
    pub mac: MacAddress,
    pub ip: Ipv4Addr,
    pub gateway_ip: Ipv4Addr,
    pub static_arp: BTreeMap<Ipv4Addr, MacAddress>,
    pub app: AppBehavior,
    #[serde(skip)]
    sent: u64,
    #[serde(skip)]
    pending: Vec<EthernetFrame>,
}

impl TenantVm {
    pub fn new(id: u32, tenant: impl Into<String>, vf: PortId, mac: MacAddress, ip: Ipv4Addr, gateway_ip: Ipv4Addr) -> Self {
        TenantVm {
            id,
            tenant: tenant.into(),
            vf,
            mac,
            ip,
            gateway_ip,
            static_arp: BTreeMap::new(),
            app: AppBehavior::Sink,
            sent: 0,
            pending: Vec::new(),
        }
    }

    pub fn with_app(mut self, app: AppBehavior) -> Self {
        self.app = app;
        self
    }

    pub fn with_arp(mut self, ip: Ipv4Addr, mac: MacAddress) -> Self {
        self.static_arp.insert(ip, mac);
        self
    }

    pub fn pending(&self) -> &[EthernetFrame] {
        &self.pending
    }

    pub fn packets_sent(&self) -> u64 {
        self.sent
    }

    fn next_body(&mut self, len: usize) -> Vec<u8> {
        // 8-byte big-endian sequence number then a vm-keyed counter pattern
        let seq = self.sent.to_be_bytes();
        self.sent += 1;
        (0..len)
            .map(|i| if i < 8 { seq[i] } else { (self.id as u8).wrapping_add(i as u8) })
            .collect()
    }

    /// Builds an IPv4 frame of `size` bytes on the wire toward `dst_ip`.
    /// Without a gateway ARP entry the frame is queued behind an ARP request
    /// if `responder` is set.
    pub fn make_packet(&mut self, dst_ip: Ipv4Addr, size: usize, responder: bool) -> Result<Emission, EndpointError> {
        if size < MIN_PACKET_SIZE {
            return Err(EndpointError::FrameTooSmall(size));
        }
        let gw_mac = self.static_arp.get(&self.gateway_ip).copied();
        if gw_mac.is_none() && !responder {
            return Err(EndpointError::UnresolvableNextHop(self.gateway_ip));
        }
        let body = self.next_body(size - MIN_PACKET_SIZE);
        let data = EthernetFrame {
            dst: gw_mac.unwrap_or(MacAddress::ZERO),
            src: self.mac,
            vlan: None,
            payload: Payload::Ipv4(Ipv4Packet {
                src: self.ip,
                dst: dst_ip,
                protocol: TEST_PROTOCOL,
                body: Ipv4Body::Opaque(body),
            }),
        };
        if gw_mac.is_some() {
            return Ok(Emission::Data(data));
        }
        self.pending.push(data);
        Ok(Emission::ArpFirst(EthernetFrame {
            dst: MacAddress::BROADCAST,
            src: self.mac,
            vlan: None,
            payload: Payload::Arp(ArpMessage::request(self.mac, self.ip, self.gateway_ip)),
        }))
    }

    /// Reacts to a frame delivered to this VM's VF.
    pub fn tenant_handle(&mut self, frame: &EthernetFrame) -> Vec<EthernetFrame> {
        if let Some(arp) = frame.arp() {
            return self.handle_arp(arp);
        }
        if frame.dst != self.mac {
            return Vec::new();
        }
        match self.app {
            AppBehavior::Source(_) | AppBehavior::Sink => Vec::new(),
            AppBehavior::Echo => vec![echo(frame)],
            AppBehavior::L2Fwd { next_hop_mac } => {
                let mut out = frame.clone();
                out.dst = next_hop_mac;
                out.src = self.mac;
                vec![out]
            }
        }
    }

    fn handle_arp(&mut self, arp: &ArpMessage) -> Vec<EthernetFrame> {
        match arp.op {
            ArpOp::Reply if arp.target_ip == self.ip && arp.target_mac == self.mac => {
                self.static_arp.insert(arp.sender_ip, arp.sender_mac);
                if arp.sender_ip != self.gateway_ip {
                    return Vec::new();
                }
                let mut out = std::mem::take(&mut self.pending);
                for f in &mut out {
                    f.dst = arp.sender_mac;
                }
                out
            }
            ArpOp::Request if arp.target_ip == self.ip => vec![EthernetFrame {
                dst: arp.sender_mac,
                src: self.mac,
                vlan: None,
                payload: Payload::Arp(ArpMessage::reply_to(arp, self.mac)),
            }],
            _ => Vec::new(),
        }
    }
}

/// Swaps L2 and L3 endpoints; the payload is untouched.
pub fn echo(frame: &EthernetFrame) -> EthernetFrame {
    let mut out = frame.clone();
    std::mem::swap(&mut out.dst, &mut out.src);
    if let Some(ip) = out.ipv4_mut() {
        std::mem::swap(&mut ip.src, &mut ip.dst);
    }
    out
}
