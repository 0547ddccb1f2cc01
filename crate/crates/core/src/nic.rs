//! SR-IOV NIC embedded switch.
//!
//! The switch bridges fabric ports, physical functions and virtual functions
//! by destination MAC within a VLAN. Every VF carries a port VLAN (`pvid`);
//! a VF with `pvid > 0` is an access port of that VLAN and never sees the
//! tag. Ports with `pvid == 0` (fabric, PFs, In/Out VFs) form the untagged
//! network. A frame is only ever delivered to ports that are members of the
//! VLAN it was classified into, so tenant VLANs never reach the fabric.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{EthernetFrame, MacAddress, VlanId};
use crate::ids::{ComponentId, PortId};

pub const DEFAULT_MAX_VFS_PER_PF: u16 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NicError {
    #[error("{0} may not configure NIC functions; only the host can")]
    Privilege(ComponentId),
    #[error("mac {mac} already assigned to {owner}")]
    DuplicateMac { mac: MacAddress, owner: PortId },
    #[error("no such port {0}")]
    UnknownPort(PortId),
    #[error("{0} is not a virtual function")]
    NotAVf(PortId),
    #[error("pf{pf} already has the maximum of {max} VFs")]
    VfExhaustion { pf: u16, max: u16 },
    #[error("invalid VF configuration: {0}")]
    InvalidVfConfig(&'static str),
}

/// Stable drop reason codes. The string forms are part of the report format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropReason {
    SpoofBlocked,
    FilterDrop,
    UnknownUnicastIsolated,
    NoRoute,
    TableMiss,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::SpoofBlocked => "SpoofBlocked",
            DropReason::FilterDrop => "FilterDrop",
            DropReason::UnknownUnicastIsolated => "UnknownUnicastIsolated",
            DropReason::NoRoute => "NoRoute",
            DropReason::TableMiss => "TableMiss",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub port: PortId,
    pub reason: DropReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VfRole {
    InOut,
    Gateway,
    Tenant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VfConfig {
    pub mac: MacAddress,
    pub pvid: VlanId,
    pub spoof_check: bool,
    pub attached_to: ComponentId,
    pub role: VfRole,
}

impl VfConfig {
    fn validate(&self) -> Result<(), NicError> {
        match self.role {
            VfRole::Gateway | VfRole::Tenant if self.pvid.is_untagged() => {
                Err(NicError::InvalidVfConfig("gateway and tenant VFs need a tenant VLAN"))
            }
            VfRole::InOut if !self.pvid.is_untagged() => {
                Err(NicError::InvalidVfConfig("in/out VFs must be untagged"))
            }
            _ if self.mac.is_broadcast() || self.mac.0[0] & 1 == 1 => {
                Err(NicError::InvalidVfConfig("VF mac must be unicast"))
            }
            _ => Ok(()),
        }
    }
}

/// Physical function `i` is wired to fabric port `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PfConfig {
    pub mac: MacAddress,
    pub attached_to: ComponentId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VfSlot {
    pub pf: u16,
    pub config: VfConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterAction {
    Allow,
    Drop,
}

/// Wildcard match; unset fields match anything. `vlan` is compared against
/// the VLAN the frame is classified into at the ingress port.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_port: Option<PortId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_mac: Option<MacAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_mac: Option<MacAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlan: Option<VlanId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethertype: Option<u16>,
}

impl FilterMatch {
    fn matches(&self, in_port: PortId, vlan: VlanId, frame: &EthernetFrame) -> bool {
        self.in_port.is_none_or(|p| p == in_port)
            && self.src_mac.is_none_or(|m| m == frame.src)
            && self.dst_mac.is_none_or(|m| m == frame.dst)
            && self.vlan.is_none_or(|v| v == vlan)
            && self.ethertype.is_none_or(|e| e == frame.ethertype())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WildcardFilter {
    pub priority: i32,
    #[serde(rename = "match")]
    pub matcher: FilterMatch,
    pub action: FilterAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningEntry {
    pub vlan: VlanId,
    pub mac: MacAddress,
    pub port: PortId,
}

/// Dynamically learned `(vlan, mac) -> port` entries. Configured VF and PF
/// addresses are not stored here; they are resolved from configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LearningTable {
    entries: BTreeMap<(VlanId, MacAddress), PortId>,
}

impl LearningTable {
    pub fn get(&self, vlan: VlanId, mac: MacAddress) -> Option<PortId> {
        self.entries.get(&(vlan, mac)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = LearningEntry> + '_ {
        self.entries.iter().map(|(&(vlan, mac), &port)| LearningEntry { vlan, mac, port })
    }

    fn learn(&mut self, vlan: VlanId, mac: MacAddress, port: PortId) {
        self.entries.insert((vlan, mac), port);
    }

    fn purge_mac(&mut self, mac: MacAddress) {
        self.entries.retain(|&(_, m), _| m != mac);
    }
}

impl Serialize for LearningTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.entries())
    }
}

impl<'de> Deserialize<'de> for LearningTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let list = Vec::<LearningEntry>::deserialize(d)?;
        let entries = list.into_iter().map(|e| ((e.vlan, e.mac), e.port)).collect();
        Ok(LearningTable { entries })
    }
}

/// Result of pushing one frame through the switch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchOutcome {
    /// VLAN the frame was classified into; `None` when it was dropped before
    /// classification mattered (spoof check).
    pub vlan: Option<VlanId>,
    pub deliveries: Vec<(PortId, EthernetFrame)>,
    pub drops: Vec<DropRecord>,
}

impl SwitchOutcome {
    fn dropped(vlan: Option<VlanId>, port: PortId, reason: DropReason) -> Self {
        SwitchOutcome {
            vlan,
            deliveries: Vec::new(),
            drops: vec![DropRecord { port, reason }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NicSwitch {
    pfs: Vec<PfConfig>,
    vfs: BTreeMap<u16, VfSlot>,
    learning: LearningTable,
    filters: Vec<WildcardFilter>,
    max_vfs_per_pf: u16,
}

impl NicSwitch {
    /// One fabric port per physical function.
    pub fn new(pfs: Vec<PfConfig>, max_vfs_per_pf: u16) -> Self {
        NicSwitch {
            pfs,
            vfs: BTreeMap::new(),
            learning: LearningTable::default(),
            filters: Vec::new(),
            max_vfs_per_pf,
        }
    }

    pub fn fabric_ports(&self) -> u16 {
        self.pfs.len() as u16
    }

    pub fn max_vfs_per_pf(&self) -> u16 {
        self.max_vfs_per_pf
    }

    pub fn vf_count(&self) -> usize {
        self.vfs.len()
    }

    pub fn vfs_on_pf(&self, pf: u16) -> usize {
        self.vfs.values().filter(|s| s.pf == pf).count()
    }

    pub fn learning(&self) -> &LearningTable {
        &self.learning
    }

    pub fn filters(&self) -> &[WildcardFilter] {
        &self.filters
    }

    pub fn pf(&self, idx: u16) -> Option<&PfConfig> {
        self.pfs.get(usize::from(idx))
    }

    pub fn vf(&self, port: PortId) -> Option<&VfSlot> {
        match port {
            PortId::Vf(i) => self.vfs.get(&i),
            _ => None,
        }
    }

    pub fn vf_config(&self, port: PortId) -> Option<&VfConfig> {
        self.vf(port).map(|s| &s.config)
    }

    pub fn vfs(&self) -> impl Iterator<Item = (PortId, &VfSlot)> + '_ {
        self.vfs.iter().map(|(&i, slot)| (PortId::Vf(i), slot))
    }

    /// All NIC ports in ascending order.
    pub fn ports(&self) -> Vec<PortId> {
        let n = self.fabric_ports();
        let mut out: Vec<PortId> = (0..n).map(PortId::Fabric).collect();
        out.extend((0..n).map(PortId::Pf));
        out.extend(self.vfs.keys().map(|&i| PortId::Vf(i)));
        out
    }

    pub fn has_port(&self, port: PortId) -> bool {
        match port {
            PortId::Fabric(i) | PortId::Pf(i) => i < self.fabric_ports(),
            PortId::Vf(i) => self.vfs.contains_key(&i),
            PortId::Vif(_) => false,
        }
    }

    pub fn pvid(&self, port: PortId) -> VlanId {
        self.vf_config(port).map_or(VlanId::UNTAGGED, |c| c.pvid)
    }

    pub fn port_mac(&self, port: PortId) -> Option<MacAddress> {
        match port {
            PortId::Pf(i) => self.pf(i).map(|p| p.mac),
            PortId::Vf(_) => self.vf_config(port).map(|c| c.mac),
            _ => None,
        }
    }

    /// Component on the host side of a PF or VF.
    pub fn attached_to(&self, port: PortId) -> Option<ComponentId> {
        match port {
            PortId::Pf(i) => self.pf(i).map(|p| p.attached_to),
            PortId::Vf(_) => self.vf_config(port).map(|c| c.attached_to),
            _ => None,
        }
    }

    /// Fabric port that unknown unicast from `port` leaves through.
    pub fn uplink(&self, port: PortId) -> Option<PortId> {
        match port {
            PortId::Pf(i) if i < self.fabric_ports() => Some(PortId::Fabric(i)),
            PortId::Vf(_) => self.vf(port).map(|s| PortId::Fabric(s.pf)),
            _ => None,
        }
    }

    fn require_host(ctx: ComponentId) -> Result<(), NicError> {
        if ctx != ComponentId::Host {
            return Err(NicError::Privilege(ctx));
        }
        Ok(())
    }

    fn mac_owner(&self, mac: MacAddress) -> Option<PortId> {
        self.pfs
            .iter()
            .position(|p| p.mac == mac)
            .map(|i| PortId::Pf(i as u16))
            .or_else(|| self.vfs.iter().find(|(_, s)| s.config.mac == mac).map(|(&i, _)| PortId::Vf(i)))
    }

    /// Creates a VF on `pf` with the given configuration.
    pub fn allocate_vf(&mut self, ctx: ComponentId, pf: u16, cfg: VfConfig) -> Result<PortId, NicError> {
        Self::require_host(ctx)?;
        if pf >= self.fabric_ports() {
            return Err(NicError::UnknownPort(PortId::Pf(pf)));
        }
        if self.vfs_on_pf(pf) >= usize::from(self.max_vfs_per_pf) {
            return Err(NicError::VfExhaustion {
                pf,
                max: self.max_vfs_per_pf,
            });
        }
        cfg.validate()?;
        if let Some(owner) = self.mac_owner(cfg.mac) {
            return Err(NicError::DuplicateMac { mac: cfg.mac, owner });
        }
        let idx = self.vfs.keys().next_back().map_or(0, |&i| i + 1);
        self.vfs.insert(idx, VfSlot { pf, config: cfg });
        Ok(PortId::Vf(idx))
    }

    /// Replaces a VF's configuration. Learned entries for its previous MAC
    /// are purged.
    pub fn configure_vf(&mut self, ctx: ComponentId, vf: PortId, cfg: VfConfig) -> Result<(), NicError> {
        Self::require_host(ctx)?;
        let PortId::Vf(idx) = vf else {
            return Err(NicError::NotAVf(vf));
        };
        if !self.vfs.contains_key(&idx) {
            return Err(NicError::UnknownPort(vf));
        }
        cfg.validate()?;
        if let Some(owner) = self.mac_owner(cfg.mac).filter(|&o| o != vf) {
            return Err(NicError::DuplicateMac { mac: cfg.mac, owner });
        }
        let slot = self.vfs.get_mut(&idx).expect("checked above");
        let old_mac = slot.config.mac;
        slot.config = cfg;
        self.learning.purge_mac(old_mac);
        Ok(())
    }

    pub fn install_filter(&mut self, ctx: ComponentId, filter: WildcardFilter) -> Result<(), NicError> {
        Self::require_host(ctx)?;
        self.filters.push(filter);
        Ok(())
    }

    pub fn clear_filters(&mut self, ctx: ComponentId) -> Result<(), NicError> {
        Self::require_host(ctx)?;
        self.filters.clear();
        Ok(())
    }

    fn is_member(&self, port: PortId, vlan: VlanId) -> bool {
        match port {
            PortId::Vif(_) => false,
            _ => self.pvid(port) == vlan,
        }
    }

    /// Configured address on `vlan`: VF MACs live on their pvid, PF MACs on
    /// the untagged network.
    fn static_lookup(&self, vlan: VlanId, mac: MacAddress) -> Option<PortId> {
        if vlan.is_untagged() {
            if let Some(i) = self.pfs.iter().position(|p| p.mac == mac) {
                return Some(PortId::Pf(i as u16));
            }
        }
        self.vfs
            .iter()
            .find(|(_, s)| s.config.pvid == vlan && s.config.mac == mac)
            .map(|(&i, _)| PortId::Vf(i))
    }

    fn first_matching_filter(&self, in_port: PortId, vlan: VlanId, frame: &EthernetFrame) -> Option<FilterAction> {
        // Highest priority first; the earliest installed wins a tie.
        let mut best: Option<&WildcardFilter> = None;
        for f in &self.filters {
            if f.matcher.matches(in_port, vlan, frame) && best.is_none_or(|b| f.priority > b.priority) {
                best = Some(f);
            }
        }
        best.map(|f| f.action)
    }

    /// Forwards one frame entering at `in_port`.
    ///
    /// Stages run in order: spoof check, wildcard filters, VLAN
    /// classification, learning, lookup/flood, egress tag handling.
    pub fn switch_frame(&mut self, in_port: PortId, frame: &EthernetFrame) -> Result<SwitchOutcome, NicError> {
        if !self.has_port(in_port) {
            return Err(NicError::UnknownPort(in_port));
        }

        if let Some(cfg) = self.vf_config(in_port) {
            if cfg.spoof_check && frame.src != cfg.mac {
                return Ok(SwitchOutcome::dropped(None, in_port, DropReason::SpoofBlocked));
            }
        }

        let pvid = self.pvid(in_port);
        let vlan = if pvid.is_untagged() {
            frame.vlan.unwrap_or(VlanId::UNTAGGED)
        } else {
            pvid
        };

        if self.first_matching_filter(in_port, vlan, frame) == Some(FilterAction::Drop) {
            return Ok(SwitchOutcome::dropped(Some(vlan), in_port, DropReason::FilterDrop));
        }

        // An untagged port sending into a tenant VLAN is not a member of it.
        if !self.is_member(in_port, vlan) {
            return Ok(SwitchOutcome::dropped(Some(vlan), in_port, DropReason::NoRoute));
        }

        if frame.src.0[0] & 1 == 0 {
            self.learning.learn(vlan, frame.src, in_port);
        }

        let targets: Result<Vec<PortId>, DropReason> = if frame.dst.is_broadcast() {
            let members: Vec<PortId> = self
                .ports()
                .into_iter()
                .filter(|&p| p != in_port && self.is_member(p, vlan))
                .collect();
            if members.is_empty() {
                Err(DropReason::NoRoute)
            } else {
                Ok(members)
            }
        } else {
            match self.static_lookup(vlan, frame.dst).or_else(|| self.learning.get(vlan, frame.dst)) {
                Some(p) if p == in_port => Err(DropReason::NoRoute),
                Some(p) => Ok(vec![p]),
                None if vlan.is_untagged() => match self.uplink(in_port) {
                    Some(up) => Ok(vec![up]),
                    None => Err(DropReason::NoRoute),
                },
                None if self.mac_owner(frame.dst).is_some() => Err(DropReason::NoRoute),
                None => Err(DropReason::UnknownUnicastIsolated),
            }
        };

        let mut out = SwitchOutcome {
            vlan: Some(vlan),
            deliveries: Vec::new(),
            drops: Vec::new(),
        };
        match targets {
            Err(reason) => out.drops.push(DropRecord { port: in_port, reason }),
            Ok(ports) => {
                for port in ports {
                    let mut f = frame.clone();
                    // The classification tag of an access port is popped on
                    // egress; a priority tag on the untagged network is
                    // stripped toward the fabric.
                    if matches!(port, PortId::Fabric(_)) && f.vlan == Some(VlanId::UNTAGGED) {
                        f.vlan = None;
                    }
                    out.deliveries.push((port, f));
                }
            }
        }
        Ok(out)
    }
}
