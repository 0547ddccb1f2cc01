//! Per-packet forwarding trace records.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::frames::{EthernetFrame, MacAddress, VlanId, Vni};
use crate::ids::PortId;
use crate::nic::{DropReason, DropRecord};

/// Simulation node. The derived order is the engine's drain order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    Fabric,
    Nic,
    Host,
    Vswitch(u32),
    Tenant(u32),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Fabric => f.write_str("fabric"),
            Location::Nic => f.write_str("nic"),
            Location::Host => f.write_str("host"),
            Location::Vswitch(i) => write!(f, "vswitch:{i}"),
            Location::Tenant(i) => write!(f, "vm:{i}"),
        }
    }
}

impl fmt::Debug for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Location {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |n: &str| n.parse::<u32>().map_err(|_| format!("bad location {s:?}"));
        match s {
            "fabric" => Ok(Location::Fabric),
            "nic" => Ok(Location::Nic),
            "host" => Ok(Location::Host),
            _ => match s.split_once(':') {
                Some(("vswitch", n)) => Ok(Location::Vswitch(num(n)?)),
                Some(("vm", n)) => Ok(Location::Tenant(num(n)?)),
                _ => Err(format!("bad location {s:?}")),
            },
        }
    }
}

impl Serialize for Location {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Location {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rx,
    Tx,
    /// A pass through the NIC switch.
    Switch,
}

/// Header fields recorded at each hop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub vlan: Option<VlanId>,
    pub dst_ip: Option<Ipv4Addr>,
    pub vni: Option<Vni>,
}

impl Snapshot {
    pub fn of(frame: &EthernetFrame) -> Self {
        Snapshot {
            dst: frame.dst,
            src: frame.src,
            vlan: frame.vlan,
            dst_ip: frame.dst_ip(),
            vni: frame.vxlan().map(|e| e.vni),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub packet: u64,
    /// Strictly increasing per packet.
    pub step: u32,
    pub tick: u64,
    pub location: Location,
    pub direction: Direction,
    pub port: PortId,
    /// Ports the NIC delivered to; empty for other locations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub out_ports: Vec<PortId>,
    pub snapshot: Snapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<DropReason>,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Delivered(Location),
    Dropped(DropReason),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub flow: Option<usize>,
    pub origin: Location,
    pub steps: u32,
    pub nic_traversals: u32,
    /// Nodes visited: every trace event counts as one hop.
    pub hops: u32,
    /// Places a copy of the packet came to rest.
    pub delivered: Vec<Location>,
    pub drops: Vec<DropRecord>,
}

impl PacketRecord {
    pub fn new(flow: Option<usize>, origin: Location) -> Self {
        PacketRecord {
            flow,
            origin,
            steps: 0,
            nic_traversals: 0,
            hops: 0,
            delivered: Vec::new(),
            drops: Vec::new(),
        }
    }

    /// Delivered if any copy came to rest, otherwise dropped with the first
    /// recorded reason. `None` only while the packet is still in flight.
    pub fn fate(&self) -> Option<Fate> {
        if let Some(&loc) = self.delivered.first() {
            Some(Fate::Delivered(loc))
        } else {
            self.drops.first().map(|d| Fate::Dropped(d.reason))
        }
    }
}
