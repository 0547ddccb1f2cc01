//! Vswitch compartment dataplane: a prioritized match-action table plus the
//! generators that produce the per-tenant forwarding rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::frames::{
    vxlan_decap, vxlan_encap, ArpMessage, ArpOp, EthernetFrame, MacAddress, Payload, Underlay, Vni,
};
use crate::ids::PortId;
use crate::nic::{DropReason, DropRecord};

pub const PRIO_CHAIN: u32 = 400;
pub const PRIO_ARP: u32 = 300;
pub const PRIO_VXLAN_INGRESS: u32 = 250;
pub const PRIO_INGRESS: u32 = 200;
pub const PRIO_VXLAN_EGRESS: u32 = 150;
pub const PRIO_EGRESS: u32 = 100;
pub const PRIO_TRANSIT: u32 = 50;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataplaneError {
    #[error("incomplete addressing for tenant {tenant}: {missing}")]
    IncompleteAddressing { tenant: String, missing: String },
    #[error("vni {0} assigned to more than one tenant on this vswitch")]
    DuplicateVni(Vni),
    #[error("flow match must set at least one field")]
    EmptyMatch,
    #[error("invalid action list: {0}")]
    InvalidActions(&'static str),
    #[error("port {port} does not belong to vswitch {vswitch}")]
    ForeignPort { port: PortId, vswitch: u32 },
    #[error("invalid prefix {0:?}")]
    InvalidPrefix(String),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Prefix {
    addr: Ipv4Addr,
    len: u8,
}

impl Ipv4Prefix {
    pub const ANY: Ipv4Prefix = Ipv4Prefix {
        addr: Ipv4Addr::UNSPECIFIED,
        len: 0,
    };

    /// Host bits of `addr` are cleared.
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, DataplaneError> {
        if len > 32 {
            return Err(DataplaneError::InvalidPrefix(format!("{addr}/{len}")));
        }
        let addr = Ipv4Addr::from(u32::from(addr) & Self::mask(len));
        Ok(Ipv4Prefix { addr, len })
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        Ipv4Prefix { addr, len: 32 }
    }

    fn mask(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix_len(&self) -> u8 {
        self.len
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.len) == u32::from(self.addr)
    }

    /// Number of addresses in the block.
    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.len))
    }

    /// `n`-th address of the block, if it exists.
    pub fn nth(&self, n: u64) -> Option<Ipv4Addr> {
        (n < self.size()).then(|| Ipv4Addr::from(u32::from(self.addr) + n as u32))
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

impl fmt::Debug for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Ipv4Prefix {
    type Err = DataplaneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DataplaneError::InvalidPrefix(s.to_owned());
        let (a, l) = s.split_once('/').ok_or_else(err)?;
        let addr: Ipv4Addr = a.parse().map_err(|_| err())?;
        let len: u8 = l.parse().map_err(|_| err())?;
        Ipv4Prefix::new(addr, len)
    }
}

impl Serialize for Ipv4Prefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Prefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A frame matches when every set field matches. With `vni` set, the L3
/// fields (`dst_ip_prefix`, `is_arp_request_for`) apply to the inner frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_port: Option<PortId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip_prefix: Option<Ipv4Prefix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vni: Option<Vni>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_mac: Option<MacAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_arp_request_for: Option<Ipv4Addr>,
}

impl FlowMatch {
    pub fn is_empty(&self) -> bool {
        self.in_port.is_none()
            && self.dst_ip_prefix.is_none()
            && self.vni.is_none()
            && self.dst_mac.is_none()
            && self.is_arp_request_for.is_none()
    }

    pub fn matches(&self, in_port: PortId, frame: &EthernetFrame) -> bool {
        if self.in_port.is_some_and(|p| p != in_port) || self.dst_mac.is_some_and(|m| m != frame.dst) {
            return false;
        }
        let l3 = match self.vni {
            None => frame,
            Some(vni) => match frame.vxlan() {
                Some(env) if env.vni == vni => &env.inner,
                _ => return false,
            },
        };
        if let Some(prefix) = self.dst_ip_prefix {
            if !l3.dst_ip().is_some_and(|ip| prefix.contains(ip)) {
                return false;
            }
        }
        if let Some(ip) = self.is_arp_request_for {
            if !l3.arp().is_some_and(|a| a.op == ArpOp::Request && a.target_ip == ip) {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for FlowMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(p) = self.in_port {
            parts.push(format!("in_port={p}"));
        }
        if let Some(m) = self.dst_mac {
            parts.push(format!("dst_mac={m}"));
        }
        if let Some(v) = self.vni {
            parts.push(format!("vni={v}"));
        }
        if let Some(p) = self.dst_ip_prefix {
            parts.push(format!("dst_ip={p}"));
        }
        if let Some(ip) = self.is_arp_request_for {
            parts.push(format!("arp_tpa={ip}"));
        }
        write!(f, "match{{{}}}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SetDstMac(MacAddress),
    SetSrcMac(MacAddress),
    PushVxlan { vni: Vni, underlay: Underlay },
    PopVxlan,
    Output(PortId),
    /// Answer an ARP request on the ingress port with this MAC.
    ArpReply(MacAddress),
}

impl Action {
    fn is_terminal(&self) -> bool {
        matches!(self, Action::Output(_) | Action::ArpReply(_))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SetDstMac(m) => write!(f, "set_dst_mac={m}"),
            Action::SetSrcMac(m) => write!(f, "set_src_mac={m}"),
            Action::PushVxlan { vni, underlay } => write!(
                f,
                "push_vxlan=vni:{vni}/{}>{}/{}>{}",
                underlay.src_mac, underlay.dst_mac, underlay.src_ip, underlay.dst_ip
            ),
            Action::PopVxlan => f.write_str("pop_vxlan"),
            Action::Output(p) => write!(f, "output={p}"),
            Action::ArpReply(m) => write!(f, "arp_reply={m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: u32,
    #[serde(rename = "match")]
    pub matcher: FlowMatch,
    pub actions: Vec<Action>,
    pub seq: u64,
}

impl FlowRule {
    pub fn new(priority: u32, matcher: FlowMatch, actions: Vec<Action>) -> Self {
        FlowRule {
            priority,
            matcher,
            actions,
            seq: 0,
        }
    }

    fn validate(&self) -> Result<(), DataplaneError> {
        if self.matcher.is_empty() {
            return Err(DataplaneError::EmptyMatch);
        }
        let terminals = self.actions.iter().filter(|a| a.is_terminal()).count();
        if terminals > 1 {
            return Err(DataplaneError::InvalidActions("more than one output"));
        }
        if terminals == 1 && !self.actions.last().is_some_and(Action::is_terminal) {
            return Err(DataplaneError::InvalidActions("output must be the last action"));
        }
        for a in &self.actions {
            match a {
                Action::PopVxlan if self.matcher.vni.is_none() => {
                    return Err(DataplaneError::InvalidActions("pop_vxlan needs a vni match"));
                }
                Action::ArpReply(_) if self.matcher.is_arp_request_for.is_none() || self.matcher.vni.is_some() => {
                    return Err(DataplaneError::InvalidActions("arp_reply needs a plain arp request match"));
                }
                _ => {}
            }
        }
        if self.actions.iter().filter(|a| matches!(a, Action::PopVxlan)).count() > 1 {
            return Err(DataplaneError::InvalidActions("pop_vxlan at most once"));
        }
        Ok(())
    }
}

impl fmt::Display for FlowRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actions: Vec<String> = self.actions.iter().map(ToString::to_string).collect();
        write!(
            f,
            "prio={} seq={} {} actions[{}]",
            self.priority,
            self.seq,
            self.matcher,
            actions.join(",")
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
    next_seq: u64,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and appends `rule`, assigning the next sequence number.
    pub fn install(&mut self, mut rule: FlowRule) -> Result<u64, DataplaneError> {
        rule.validate()?;
        rule.seq = self.next_seq;
        self.next_seq += 1;
        let seq = rule.seq;
        self.rules.push(rule);
        Ok(seq)
    }

    pub fn install_all(&mut self, rules: impl IntoIterator<Item = FlowRule>) -> Result<(), DataplaneError> {
        for r in rules {
            self.install(r)?;
        }
        Ok(())
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Highest priority match; equal priorities resolve to the lowest seq.
    pub fn lookup(&self, in_port: PortId, frame: &EthernetFrame) -> Option<&FlowRule> {
        self.rules
            .iter()
            .filter(|r| r.matcher.matches(in_port, frame))
            .min_by_key(|r| (std::cmp::Reverse(r.priority), r.seq))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecContext {
    HostKernel,
    HostUser,
    VmKernel,
    VmUser,
}

impl ExecContext {
    pub fn on_host(self) -> bool {
        matches!(self, ExecContext::HostKernel | ExecContext::HostUser)
    }

    pub fn user_space(self) -> bool {
        matches!(self, ExecContext::HostUser | ExecContext::VmUser)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProcessOutcome {
    pub emitted: Vec<(PortId, EthernetFrame)>,
    pub drops: Vec<DropRecord>,
    /// Sequence number of the rule that fired.
    pub rule: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VswitchInstance {
    pub id: u32,
    pub exec_ctx: ExecContext,
    /// Fabric-facing ports (In/Out VFs, or PFs for a host vswitch).
    pub inout_ports: Vec<PortId>,
    /// Tenant-facing port per tenant.
    pub gw_ports: BTreeMap<String, PortId>,
    pub table: FlowTable,
}

impl VswitchInstance {
    pub fn new(id: u32, exec_ctx: ExecContext) -> Self {
        VswitchInstance {
            id,
            exec_ctx,
            inout_ports: Vec::new(),
            gw_ports: BTreeMap::new(),
            table: FlowTable::new(),
        }
    }

    pub fn owns_port(&self, port: PortId) -> bool {
        self.inout_ports.contains(&port) || self.gw_ports.values().any(|&p| p == port)
    }

    pub fn ports(&self) -> BTreeSet<PortId> {
        self.inout_ports.iter().chain(self.gw_ports.values()).copied().collect()
    }

    /// Runs one frame through the table. Pure: the table is not modified.
    pub fn process_frame(&self, in_port: PortId, frame: &EthernetFrame) -> Result<ProcessOutcome, DataplaneError> {
        if !self.owns_port(in_port) {
            return Err(DataplaneError::ForeignPort {
                port: in_port,
                vswitch: self.id,
            });
        }
        Ok(apply_table(&self.table, in_port, frame))
    }
}

/// Executes the first matching rule's actions on a copy of `frame`.
pub fn apply_table(table: &FlowTable, in_port: PortId, frame: &EthernetFrame) -> ProcessOutcome {
    let Some(rule) = table.lookup(in_port, frame) else {
        return ProcessOutcome {
            drops: vec![DropRecord {
                port: in_port,
                reason: DropReason::TableMiss,
            }],
            ..Default::default()
        };
    };
    let mut out = ProcessOutcome {
        rule: Some(rule.seq),
        ..Default::default()
    };
    let mut cur = frame.clone();
    for action in &rule.actions {
        match action {
            Action::SetDstMac(m) => cur.dst = *m,
            Action::SetSrcMac(m) => cur.src = *m,
            Action::PushVxlan { vni, underlay } => {
                cur = vxlan_encap(&cur, vni.get(), underlay).expect("vni is range-checked by its type");
            }
            Action::PopVxlan => {
                cur = vxlan_decap(&cur).expect("rule matched on vni").1;
            }
            Action::Output(p) => out.emitted.push((*p, cur.clone())),
            Action::ArpReply(mac) => {
                let req = cur.arp().expect("rule matched an arp request");
                out.emitted.push((
                    in_port,
                    EthernetFrame {
                        dst: req.sender_mac,
                        src: *mac,
                        vlan: None,
                        payload: Payload::Arp(ArpMessage::reply_to(req, *mac)),
                    },
                ));
            }
        }
    }
    if out.emitted.is_empty() {
        out.drops.push(DropRecord {
            port: in_port,
            reason: DropReason::NoRoute,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmAddressing {
    pub mac: Option<MacAddress>,
    pub ip: Option<Ipv4Addr>,
}

/// Everything the rule generators need to know about one tenant on one
/// vswitch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantAddressing {
    pub tenant: String,
    pub gateway_ip: Option<Ipv4Addr>,
    pub gw_port: PortId,
    pub gw_mac: Option<MacAddress>,
    /// Port egress traffic leaves through.
    pub uplink_port: PortId,
    pub uplink_mac: Option<MacAddress>,
    pub external_gw_mac: MacAddress,
    pub vms: Vec<VmAddressing>,
}

struct Resolved {
    gateway_ip: Ipv4Addr,
    gw_mac: MacAddress,
    uplink_mac: MacAddress,
    vms: Vec<(MacAddress, Ipv4Addr)>,
}

impl TenantAddressing {
    fn resolve(&self) -> Result<Resolved, DataplaneError> {
        let missing = |what: String| DataplaneError::IncompleteAddressing {
            tenant: self.tenant.clone(),
            missing: what,
        };
        let gateway_ip = self.gateway_ip.ok_or_else(|| missing("gateway ip".into()))?;
        let gw_mac = self.gw_mac.ok_or_else(|| missing("gateway VF mac".into()))?;
        let uplink_mac = self.uplink_mac.ok_or_else(|| missing("uplink mac".into()))?;
        if self.vms.is_empty() {
            return Err(missing("tenant VMs".into()));
        }
        let vms = self
            .vms
            .iter()
            .enumerate()
            .map(|(i, vm)| {
                let mac = vm.mac.ok_or_else(|| missing(format!("mac of vm {i}")))?;
                let ip = vm.ip.ok_or_else(|| missing(format!("ip of vm {i}")))?;
                Ok((mac, ip))
            })
            .collect::<Result<_, DataplaneError>>()?;
        Ok(Resolved {
            gateway_ip,
            gw_mac,
            uplink_mac,
            vms,
        })
    }
}

/// Per VM one ingress rule; per tenant one egress rule and one ARP
/// responder rule for the virtual gateway.
///
/// Crossing the vswitch is an L3 hop: both directions rewrite the source MAC
/// to the outgoing port as well as the destination MAC.
pub fn build_tenant_rules(t: &TenantAddressing) -> Result<Vec<FlowRule>, DataplaneError> {
    let r = t.resolve()?;
    let mut rules: Vec<FlowRule> = r
        .vms
        .iter()
        .map(|&(mac, ip)| {
            FlowRule::new(
                PRIO_INGRESS,
                FlowMatch {
                    dst_ip_prefix: Some(Ipv4Prefix::host(ip)),
                    ..Default::default()
                },
                vec![Action::SetDstMac(mac), Action::SetSrcMac(r.gw_mac), Action::Output(t.gw_port)],
            )
        })
        .collect();
    rules.push(FlowRule::new(
        PRIO_EGRESS,
        FlowMatch {
            in_port: Some(t.gw_port),
            dst_ip_prefix: Some(Ipv4Prefix::ANY),
            ..Default::default()
        },
        vec![
            Action::SetDstMac(t.external_gw_mac),
            Action::SetSrcMac(r.uplink_mac),
            Action::Output(t.uplink_port),
        ],
    ));
    rules.push(FlowRule::new(
        PRIO_ARP,
        FlowMatch {
            in_port: Some(t.gw_port),
            is_arp_request_for: Some(r.gateway_ip),
            ..Default::default()
        },
        vec![Action::ArpReply(r.gw_mac)],
    ));
    Ok(rules)
}

/// Underlay endpoints shared by all tunnels of one vswitch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VtepAddressing {
    pub local_ip: Ipv4Addr,
    pub remote_ip: Ipv4Addr,
}

/// Overlay rules for the tenants of one vswitch: decapsulated ingress keyed
/// on `(vni, inner dst ip)` and encapsulating egress.
pub fn build_vxlan_rules(
    tenants: &[(TenantAddressing, Vni)],
    vtep: &VtepAddressing,
) -> Result<Vec<FlowRule>, DataplaneError> {
    let mut seen = BTreeSet::new();
    for (_, vni) in tenants {
        if !seen.insert(*vni) {
            return Err(DataplaneError::DuplicateVni(*vni));
        }
    }
    let mut rules = Vec::new();
    for (t, vni) in tenants {
        let r = t.resolve()?;
        for &(mac, ip) in &r.vms {
            rules.push(FlowRule::new(
                PRIO_VXLAN_INGRESS,
                FlowMatch {
                    vni: Some(*vni),
                    dst_ip_prefix: Some(Ipv4Prefix::host(ip)),
                    ..Default::default()
                },
                vec![
                    Action::PopVxlan,
                    Action::SetDstMac(mac),
                    Action::SetSrcMac(r.gw_mac),
                    Action::Output(t.gw_port),
                ],
            ));
        }
        rules.push(FlowRule::new(
            PRIO_VXLAN_EGRESS,
            FlowMatch {
                in_port: Some(t.gw_port),
                dst_ip_prefix: Some(Ipv4Prefix::ANY),
                ..Default::default()
            },
            vec![
                Action::PushVxlan {
                    vni: *vni,
                    underlay: Underlay {
                        src_mac: r.uplink_mac,
                        dst_mac: t.external_gw_mac,
                        src_ip: vtep.local_ip,
                        dst_ip: vtep.remote_ip,
                    },
                },
                Action::Output(t.uplink_port),
            ],
        ));
    }
    Ok(rules)
}

/// Physical-to-physical transit: anything arriving on `from` that no tenant
/// rule claims is routed out of `to`.
pub fn build_transit_rule(from: PortId, to: PortId, to_mac: MacAddress, external_gw_mac: MacAddress) -> FlowRule {
    FlowRule::new(
        PRIO_TRANSIT,
        FlowMatch {
            in_port: Some(from),
            dst_ip_prefix: Some(Ipv4Prefix::ANY),
            ..Default::default()
        },
        vec![Action::SetDstMac(external_gw_mac), Action::SetSrcMac(to_mac), Action::Output(to)],
    )
}

/// Service-chain steering: frames arriving on `in_port` for `ip` are sent to
/// `next_dst` through `out_port` instead of the normal route.
pub fn build_chain_rule(
    in_port: PortId,
    ip: Ipv4Addr,
    out_port: PortId,
    out_src: MacAddress,
    next_dst: MacAddress,
) -> FlowRule {
    FlowRule::new(
        PRIO_CHAIN,
        FlowMatch {
            in_port: Some(in_port),
            dst_ip_prefix: Some(Ipv4Prefix::host(ip)),
            ..Default::default()
        },
        vec![Action::SetDstMac(next_dst), Action::SetSrcMac(out_src), Action::Output(out_port)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{Ipv4Body, Ipv4Packet, IPPROTO_UDP};

    fn mac(last: u8) -> MacAddress {
        MacAddress([0x02, 0, 0, 0, 0, last])
    }

    const EXT_GW: MacAddress = MacAddress([0x02, 0xee, 0, 0, 0, 1]);

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn ipv4_frame(src: MacAddress, dst: MacAddress, dst_ip: &str) -> EthernetFrame {
        EthernetFrame {
            dst,
            src,
            vlan: None,
            payload: Payload::Ipv4(Ipv4Packet {
                src: ip("198.51.100.1"),
                dst: ip(dst_ip),
                protocol: 253,
                body: Ipv4Body::Opaque(vec![7; 16]),
            }),
        }
    }

    fn red(vms: usize) -> TenantAddressing {
        TenantAddressing {
            tenant: "red".into(),
            gateway_ip: Some(ip("10.1.0.1")),
            gw_port: PortId::Vf(1),
            gw_mac: Some(mac(2)),
            uplink_port: PortId::Vf(0),
            uplink_mac: Some(mac(1)),
            external_gw_mac: EXT_GW,
            vms: (0..vms)
                .map(|i| VmAddressing {
                    mac: Some(mac(10 + i as u8)),
                    ip: Some(Ipv4Addr::new(10, 1, 0, 2 + i as u8)),
                })
                .collect(),
        }
    }

    fn vswitch(rules: Vec<FlowRule>) -> VswitchInstance {
        let mut vs = VswitchInstance::new(0, ExecContext::VmKernel);
        vs.inout_ports.push(PortId::Vf(0));
        vs.gw_ports.insert("red".into(), PortId::Vf(1));
        vs.table.install_all(rules).unwrap();
        vs
    }

    #[test]
    fn prefix_parsing_and_containment() {
        let p: Ipv4Prefix = "10.1.0.77/24".parse().unwrap();
        assert_eq!(p.to_string(), "10.1.0.0/24");
        assert!(p.contains(ip("10.1.0.200")));
        assert!(!p.contains(ip("10.1.1.0")));
        assert!(Ipv4Prefix::ANY.contains(ip("203.0.113.9")));
        assert_eq!(p.nth(2), Some(ip("10.1.0.2")));
        assert_eq!(p.nth(256), None);
        assert!("10.0.0.0/33".parse::<Ipv4Prefix>().is_err());
        assert!("10.0.0.0".parse::<Ipv4Prefix>().is_err());
    }

    #[test]
    fn rule_counts_per_tenant() {
        assert_eq!(build_tenant_rules(&red(1)).unwrap().len(), 3);
        let rules = build_tenant_rules(&red(2)).unwrap();
        assert_eq!(rules.len(), 4);
        let ingress = rules.iter().filter(|r| r.priority == PRIO_INGRESS).count();
        assert_eq!(ingress, 2);
    }

    #[test]
    fn incomplete_addressing_is_rejected() {
        let mut t = red(2);
        t.vms[1].ip = None;
        assert!(matches!(
            build_tenant_rules(&t),
            Err(DataplaneError::IncompleteAddressing { .. })
        ));
        let mut t = red(1);
        t.gw_mac = None;
        assert!(matches!(
            build_tenant_rules(&t),
            Err(DataplaneError::IncompleteAddressing { .. })
        ));
    }

    #[test]
    fn ingress_rewrites_destination_toward_gateway_vf() {
        let rule = FlowRule::new(
            PRIO_INGRESS,
            FlowMatch {
                dst_ip_prefix: Some(Ipv4Prefix::host(ip("10.1.0.2"))),
                ..Default::default()
            },
            vec![Action::SetDstMac(mac(10)), Action::Output(PortId::Vf(1))],
        );
        let vs = vswitch(vec![rule]);
        let f = ipv4_frame(mac(0xaa), mac(1), "10.1.0.2");
        let out = vs.process_frame(PortId::Vf(0), &f).unwrap();
        assert_eq!(out.emitted.len(), 1);
        let (port, g) = &out.emitted[0];
        assert_eq!(*port, PortId::Vf(1));
        assert_eq!(g.dst, mac(10));
        assert_eq!(g.src, f.src);
        assert_eq!(g.payload, f.payload);
    }

    #[test]
    fn egress_goes_to_external_gateway() {
        let vs = vswitch(build_tenant_rules(&red(1)).unwrap());
        let f = ipv4_frame(mac(10), mac(2), "203.0.113.5");
        let out = vs.process_frame(PortId::Vf(1), &f).unwrap();
        let (port, g) = &out.emitted[0];
        assert_eq!(*port, PortId::Vf(0));
        assert_eq!(g.dst, EXT_GW);
        assert_eq!(g.src, mac(1));
    }

    #[test]
    fn table_miss_drops() {
        let vs = vswitch(vec![]);
        let out = vs.process_frame(PortId::Vf(0), &ipv4_frame(mac(9), mac(1), "10.1.0.2")).unwrap();
        assert!(out.emitted.is_empty());
        assert_eq!(out.drops[0].reason, DropReason::TableMiss);
        assert_eq!(out.rule, None);
    }

    #[test]
    fn foreign_port_is_an_error() {
        let vs = vswitch(vec![]);
        assert!(matches!(
            vs.process_frame(PortId::Vf(5), &ipv4_frame(mac(9), mac(1), "10.1.0.2")),
            Err(DataplaneError::ForeignPort { .. })
        ));
    }

    #[test]
    fn arp_responder_answers_for_gateway() {
        let vs = vswitch(build_tenant_rules(&red(1)).unwrap());
        let req = ArpMessage::request(mac(10), ip("10.1.0.2"), ip("10.1.0.1"));
        let f = EthernetFrame {
            dst: MacAddress::BROADCAST,
            src: mac(10),
            vlan: None,
            payload: Payload::Arp(req),
        };
        let out = vs.process_frame(PortId::Vf(1), &f).unwrap();
        let (port, reply) = &out.emitted[0];
        assert_eq!(*port, PortId::Vf(1));
        assert_eq!(reply.dst, mac(10));
        let a = reply.arp().unwrap();
        assert_eq!(a.op, ArpOp::Reply);
        assert_eq!(a.sender_mac, mac(2));
        assert_eq!(a.sender_ip, ip("10.1.0.1"));
        assert_eq!(a.target_ip, ip("10.1.0.2"));
        // requests for other addresses fall through to nothing
        let other = EthernetFrame {
            payload: Payload::Arp(ArpMessage::request(mac(10), ip("10.1.0.2"), ip("10.1.0.9"))),
            ..f
        };
        let out = vs.process_frame(PortId::Vf(1), &other).unwrap();
        assert_eq!(out.drops[0].reason, DropReason::TableMiss);
    }

    #[test]
    fn priority_then_seq() {
        let m = FlowMatch {
            in_port: Some(PortId::Vf(0)),
            ..Default::default()
        };
        let mut t = FlowTable::new();
        t.install(FlowRule::new(5, m.clone(), vec![Action::Output(PortId::Vf(1))])).unwrap();
        t.install(FlowRule::new(5, m.clone(), vec![Action::Output(PortId::Vf(2))])).unwrap();
        let f = ipv4_frame(mac(1), mac(2), "1.2.3.4");
        assert_eq!(t.lookup(PortId::Vf(0), &f).unwrap().seq, 0);
        t.install(FlowRule::new(6, m, vec![Action::Output(PortId::Vf(3))])).unwrap();
        assert_eq!(t.lookup(PortId::Vf(0), &f).unwrap().seq, 2);
    }

    #[test]
    fn action_list_invariants() {
        let m = FlowMatch {
            in_port: Some(PortId::Vf(0)),
            ..Default::default()
        };
        let mut t = FlowTable::new();
        assert_eq!(
            t.install(FlowRule::new(1, FlowMatch::default(), vec![])),
            Err(DataplaneError::EmptyMatch)
        );
        assert!(t
            .install(FlowRule::new(1, m.clone(), vec![Action::Output(PortId::Vf(1)), Action::SetDstMac(mac(1))]))
            .is_err());
        assert!(t
            .install(FlowRule::new(1, m.clone(), vec![Action::Output(PortId::Vf(1)), Action::Output(PortId::Vf(2))]))
            .is_err());
        assert!(t.install(FlowRule::new(1, m.clone(), vec![Action::PopVxlan])).is_err());
        assert!(t.install(FlowRule::new(1, m, vec![Action::ArpReply(mac(1))])).is_err());
        assert!(t.is_empty());
    }

    #[test]
    fn rule_text_form() {
        let rules = build_tenant_rules(&red(1)).unwrap();
        let mut t = FlowTable::new();
        t.install_all(rules).unwrap();
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "prio=200 seq=0 match{dst_ip=10.1.0.2/32} actions[set_dst_mac=02:00:00:00:00:0a,set_src_mac=02:00:00:00:00:02,output=vf1]"
        );
        assert_eq!(
            lines[1],
            "prio=100 seq=1 match{in_port=vf1,dst_ip=0.0.0.0/0} actions[set_dst_mac=02:ee:00:00:00:01,set_src_mac=02:00:00:00:00:01,output=vf0]"
        );
        assert_eq!(lines[2], "prio=300 seq=2 match{in_port=vf1,arp_tpa=10.1.0.1} actions[arp_reply=02:00:00:00:00:02]");
    }

    fn vtep() -> VtepAddressing {
        VtepAddressing {
            local_ip: ip("192.0.2.10"),
            remote_ip: ip("192.0.2.20"),
        }
    }

    #[test]
    fn vxlan_ingress_decaps_to_tenant() {
        let t = red(1);
        let vni = Vni::new(7).unwrap();
        let mut rules = build_tenant_rules(&t).unwrap();
        rules.extend(build_vxlan_rules(&[(t, vni)], &vtep()).unwrap());
        let vs = vswitch(rules);
        // routed overlay frame: already addressed from the gateway to the VM
        let inner = ipv4_frame(mac(2), mac(10), "10.1.0.2");
        let under = Underlay {
            src_mac: EXT_GW,
            dst_mac: mac(1),
            src_ip: ip("192.0.2.20"),
            dst_ip: ip("192.0.2.10"),
        };
        let outer = vxlan_encap(&inner, 7, &under).unwrap();
        let out = vs.process_frame(PortId::Vf(0), &outer).unwrap();
        let (port, delivered) = &out.emitted[0];
        assert_eq!(*port, PortId::Vf(1));
        assert_eq!(delivered.serialize(), inner.serialize());
        // wrong vni does not match the overlay rule and the outer address is
        // no tenant's
        let wrong = vxlan_encap(&inner, 8, &under).unwrap();
        let out = vs.process_frame(PortId::Vf(0), &wrong).unwrap();
        assert_eq!(out.drops[0].reason, DropReason::TableMiss);
    }

    #[test]
    fn vxlan_egress_encapsulates() {
        let t = red(1);
        let vni = Vni::new(7).unwrap();
        let mut rules = build_tenant_rules(&t).unwrap();
        rules.extend(build_vxlan_rules(&[(t, vni)], &vtep()).unwrap());
        let vs = vswitch(rules);
        let f = ipv4_frame(mac(10), mac(2), "203.0.113.5");
        let out = vs.process_frame(PortId::Vf(1), &f).unwrap();
        let (port, g) = &out.emitted[0];
        assert_eq!(*port, PortId::Vf(0));
        let expected = vxlan_encap(
            &f,
            7,
            &Underlay {
                src_mac: mac(1),
                dst_mac: EXT_GW,
                src_ip: ip("192.0.2.10"),
                dst_ip: ip("192.0.2.20"),
            },
        )
        .unwrap();
        assert_eq!(g, &expected);
        assert_eq!(g.ipv4().unwrap().protocol, IPPROTO_UDP);
    }

    #[test]
    fn duplicate_vni_rejected() {
        let mut blue = red(1);
        blue.tenant = "blue".into();
        let vni = Vni::new(7).unwrap();
        assert_eq!(
            build_vxlan_rules(&[(red(1), vni), (blue, vni)], &vtep()),
            Err(DataplaneError::DuplicateVni(vni))
        );
    }

    #[test]
    fn process_is_pure() {
        let vs = vswitch(build_tenant_rules(&red(2)).unwrap());
        let f = ipv4_frame(mac(0xaa), mac(1), "10.1.0.3");
        let a = vs.process_frame(PortId::Vf(0), &f).unwrap();
        let b = vs.process_frame(PortId::Vf(0), &f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.emitted[0].1.dst, mac(11));
    }

    #[test]
    fn generated_rules_are_unambiguous() {
        // canonical frames: every VM ip and an external ip, from every port
        let t = red(3);
        let rules = build_tenant_rules(&t).unwrap();
        let vs = vswitch(rules);
        let mut targets: Vec<Ipv4Addr> = t.vms.iter().map(|v| v.ip.unwrap()).collect();
        targets.push(ip("203.0.113.5"));
        for port in [PortId::Vf(0), PortId::Vf(1)] {
            for dst in &targets {
                let f = ipv4_frame(mac(0xaa), mac(1), &dst.to_string());
                let hits: Vec<&FlowRule> =
                    vs.table.rules().iter().filter(|r| r.matcher.matches(port, &f)).collect();
                if let Some(top) = hits.iter().map(|r| r.priority).max() {
                    assert_eq!(hits.iter().filter(|r| r.priority == top).count(), 1);
                }
            }
        }
        // one ingress rule per VM ip
        for dst in &targets[..3] {
            let n = vs
                .table
                .rules()
                .iter()
                .filter(|r| r.priority == PRIO_INGRESS && r.matcher.dst_ip_prefix == Some(Ipv4Prefix::host(*dst)))
                .count();
            assert_eq!(n, 1);
        }
    }
}
