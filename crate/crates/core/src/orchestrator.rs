//! Deployment planning: turns a tenant specification and a security level
//! into a configured NIC, vswitch compartments with installed rules, tenant
//! VMs and a resource account.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::{
    build_tenant_rules, build_vxlan_rules, DataplaneError, ExecContext, Ipv4Prefix,
    TenantAddressing, VmAddressing, VswitchInstance, VtepAddressing,
};
use crate::endpoints::TenantVm;
use crate::frames::{MacAddress, VlanId, Vni};
use crate::ids::{ComponentId, PortId};
use crate::nic::{
    FilterAction, FilterMatch, NicError, NicSwitch, PfConfig, VfConfig, VfRole, WildcardFilter,
    DEFAULT_MAX_VFS_PER_PF,
};
use crate::secmodel::ComponentGraph;

pub const SPEC_VERSION: u32 = 1;

/// Locally administered prefix for every MAC the planner assigns.
pub const MAC_PREFIX: [u8; 3] = [0x02, 0x4d, 0x54];

pub const RAM_GB_PER_VM: u32 = 4;
pub const HUGEPAGES_GB_PER_VM: u32 = 1;

/// Priority of the NIC filters that keep tenant VLANs away from the PFs.
pub const PF_GUARD_PRIORITY: i32 = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("unsupported spec version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate tenant id {0:?}")]
    DuplicateTenantId(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),
    #[error("ip block {block} of tenant {tenant} cannot hold a gateway and {vms} VMs")]
    IpBlockTooSmall { tenant: String, block: Ipv4Prefix, vms: u32 },
    #[error("ip blocks of {0} and {1} overlap")]
    OverlappingIpBlocks(String, String),
    #[error("{needed} VFs needed but only {capacity} available")]
    VfExhaustion { needed: usize, capacity: usize },
    #[error("no vni configured for tenant {0}")]
    MissingVni(String),
    #[error(transparent)]
    Nic(#[from] NicError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error("plan validation failed: {0}")]
    Validation(String),
    #[error("malformed spec: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantSpec {
    pub id: String,
    pub vm_count: u32,
    pub ip_block: Ipv4Prefix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerTenant,
    /// Explicit partition of tenant ids into compartments.
    Zones(Vec<Vec<String>>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecurityLevel {
    Baseline,
    Level1,
    Level2 { grouping: Grouping },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceMode {
    Shared,
    Isolated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VxlanSpec {
    pub local_vtep_ip: Ipv4Addr,
    pub remote_vtep_ip: Ipv4Addr,
    pub vni: BTreeMap<String, u32>,
}

/// Isolation expectations checked by the `attack` command.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_reachable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_reachable_tenants: Option<usize>,
}

fn default_true() -> bool {
    true
}

fn default_one() -> u32 {
    1
}

fn default_max_vfs() -> u16 {
    DEFAULT_MAX_VFS_PER_PF
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub version: u32,
    pub tenants: Vec<TenantSpec>,
    pub level: SecurityLevel,
    #[serde(default)]
    pub user_space: bool,
    pub mode: ResourceMode,
    pub fabric_ports: u16,
    #[serde(default = "default_max_vfs")]
    pub max_vfs_per_pf: u16,
    pub external_gw_mac: MacAddress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vxlan: Option<VxlanSpec>,
    /// Pre-populate each VM's ARP cache with its gateway.
    #[serde(default = "default_true")]
    pub static_arp: bool,
    /// Baseline only: number of compartments the deployment is compared
    /// against when accounting isolated cores.
    #[serde(default = "default_one")]
    pub compare_compartments: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectations: Option<Expectations>,
}

impl DeploymentSpec {
    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        let spec: DeploymentSpec = serde_json::from_str(text).map_err(|e| OrchestratorError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// A spec with `n` tenants of `vms` VMs each, named t0.. with blocks
    /// 10.<i+1>.0.0/24.
    pub fn uniform(level: SecurityLevel, n: usize, vms: u32) -> Self {
        DeploymentSpec {
            version: SPEC_VERSION,
            tenants: (0..n)
                .map(|i| TenantSpec {
                    id: format!("t{i}"),
                    vm_count: vms,
                    ip_block: Ipv4Prefix::new(Ipv4Addr::new(10, (i + 1) as u8, 0, 0), 24).expect("valid"),
                })
                .collect(),
            level,
            user_space: false,
            mode: ResourceMode::Isolated,
            fabric_ports: 1,
            max_vfs_per_pf: DEFAULT_MAX_VFS_PER_PF,
            external_gw_mac: MacAddress([0x02, 0xee, 0, 0, 0, 1]),
            vxlan: None,
            static_arp: true,
            compare_compartments: 1,
            expectations: None,
        }
    }

    pub fn is_mts(&self) -> bool {
        !matches!(self.level, SecurityLevel::Baseline)
    }

    /// `user_space` forces isolated cores.
    pub fn effective_mode(&self) -> ResourceMode {
        if self.user_space {
            ResourceMode::Isolated
        } else {
            self.mode
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.version != SPEC_VERSION {
            return Err(OrchestratorError::UnsupportedVersion(self.version));
        }
        if self.tenants.is_empty() {
            return Err(OrchestratorError::InvalidSpec("no tenants".into()));
        }
        if usize::from(VlanId::MAX) < self.tenants.len() {
            return Err(OrchestratorError::InvalidSpec("more tenants than VLAN ids".into()));
        }
        if self.fabric_ports == 0 {
            return Err(OrchestratorError::InvalidSpec("fabric_ports must be at least 1".into()));
        }
        if self.max_vfs_per_pf == 0 {
            return Err(OrchestratorError::InvalidSpec("max_vfs_per_pf must be at least 1".into()));
        }
        if self.compare_compartments == 0 {
            return Err(OrchestratorError::InvalidSpec("compare_compartments must be at least 1".into()));
        }
        if self.external_gw_mac.0[0] & 1 == 1 {
            return Err(OrchestratorError::InvalidSpec("external_gw_mac must be unicast".into()));
        }
        if self.external_gw_mac.0[..3] == MAC_PREFIX {
            return Err(OrchestratorError::InvalidSpec("external_gw_mac collides with planner MAC space".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tenants {
            if !seen.insert(t.id.as_str()) {
                return Err(OrchestratorError::DuplicateTenantId(t.id.clone()));
            }
            if t.vm_count == 0 {
                return Err(OrchestratorError::InvalidSpec(format!("tenant {} has no VMs", t.id)));
            }
            // network address, gateway, VMs, broadcast
            if u64::from(t.vm_count) + 3 > t.ip_block.size() {
                return Err(OrchestratorError::IpBlockTooSmall {
                    tenant: t.id.clone(),
                    block: t.ip_block,
                    vms: t.vm_count,
                });
            }
        }
        for (i, a) in self.tenants.iter().enumerate() {
            for b in &self.tenants[i + 1..] {
                if a.ip_block.contains(b.ip_block.addr()) || b.ip_block.contains(a.ip_block.addr()) {
                    return Err(OrchestratorError::OverlappingIpBlocks(a.id.clone(), b.id.clone()));
                }
            }
        }
        self.compartments()?;
        if let Some(vx) = &self.vxlan {
            for t in &self.tenants {
                let v = vx.vni.get(&t.id).ok_or_else(|| OrchestratorError::MissingVni(t.id.clone()))?;
                Vni::new(*v).map_err(|e| OrchestratorError::InvalidSpec(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Tenant ids per vswitch compartment, in vswitch id order.
    pub fn compartments(&self) -> Result<Vec<Vec<String>>, OrchestratorError> {
        let all: Vec<String> = self.tenants.iter().map(|t| t.id.clone()).collect();
        match &self.level {
            SecurityLevel::Baseline | SecurityLevel::Level1 => Ok(vec![all]),
            SecurityLevel::Level2 {
                grouping: Grouping::PerTenant,
            } => Ok(all.into_iter().map(|t| vec![t]).collect()),
            SecurityLevel::Level2 {
                grouping: Grouping::Zones(zones),
            } => {
                let known: BTreeSet<&str> = all.iter().map(String::as_str).collect();
                let mut covered = BTreeSet::new();
                for z in zones {
                    if z.is_empty() {
                        return Err(OrchestratorError::InvalidGrouping("empty zone".into()));
                    }
                    for t in z {
                        if !known.contains(t.as_str()) {
                            return Err(OrchestratorError::InvalidGrouping(format!("unknown tenant {t}")));
                        }
                        if !covered.insert(t.as_str()) {
                            return Err(OrchestratorError::InvalidGrouping(format!("tenant {t} in two zones")));
                        }
                    }
                }
                if covered.len() != known.len() {
                    let missing: Vec<&str> = known.difference(&covered).copied().collect();
                    return Err(OrchestratorError::InvalidGrouping(format!("tenants without zone: {}", missing.join(","))));
                }
                // keep declaration order inside each zone
                Ok(zones
                    .iter()
                    .map(|z| all.iter().filter(|t| z.contains(t)).cloned().collect())
                    .collect())
            }
        }
    }

    fn tenant(&self, id: &str) -> &TenantSpec {
        self.tenants.iter().find(|t| t.id == id).expect("tenant ids come from the spec")
    }
}

/// Total VFs an MTS deployment needs: per compartment one In/Out VF per
/// fabric port, one gateway VF per tenant and one VF per tenant VM.
/// Baseline uses none.
pub fn count_vfs(spec: &DeploymentSpec) -> Result<usize, OrchestratorError> {
    if !spec.is_mts() {
        return Ok(0);
    }
    let needed: usize = spec
        .compartments()?
        .iter()
        .map(|tenants| {
            usize::from(spec.fabric_ports)
                + tenants.len()
                + tenants.iter().map(|t| spec.tenant(t).vm_count as usize).sum::<usize>()
        })
        .sum();
    let capacity = usize::from(spec.max_vfs_per_pf) * usize::from(spec.fabric_ports);
    if needed > capacity {
        return Err(OrchestratorError::VfExhaustion { needed, capacity });
    }
    Ok(needed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceAccount {
    pub mode: ResourceMode,
    pub compartments: u32,
    pub host_cores: u32,
    pub vswitch_cores: u32,
    pub total_cores: u32,
    pub vswitch_vms: u32,
    pub tenant_vms: u32,
    pub ram_gb_per_vm: u32,
    pub hugepages_gb_per_vm: u32,
    pub vswitch_ram_gb: u32,
    pub tenant_ram_gb: u32,
    pub host_hugepages_gb: u32,
    pub vswitch_hugepages_gb: u32,
    pub total_vfs: u32,
}

impl ResourceAccount {
    pub const CSV_HEADER: &'static str = "mode,compartments,host_cores,vswitch_cores,total_cores,vswitch_vms,tenant_vms,ram_gb_per_vm,hugepages_gb_per_vm,vswitch_ram_gb,tenant_ram_gb,host_hugepages_gb,vswitch_hugepages_gb,total_vfs";

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn render_table(&self) -> String {
        let rows: [(&str, String); 14] = [
            ("mode", format!("{:?}", self.mode).to_lowercase()),
            ("compartments", self.compartments.to_string()),
            ("host_cores", self.host_cores.to_string()),
            ("vswitch_cores", self.vswitch_cores.to_string()),
            ("total_cores", self.total_cores.to_string()),
            ("vswitch_vms", self.vswitch_vms.to_string()),
            ("tenant_vms", self.tenant_vms.to_string()),
            ("ram_gb_per_vm", self.ram_gb_per_vm.to_string()),
            ("hugepages_gb_per_vm", self.hugepages_gb_per_vm.to_string()),
            ("vswitch_ram_gb", self.vswitch_ram_gb.to_string()),
            ("tenant_ram_gb", self.tenant_ram_gb.to_string()),
            ("host_hugepages_gb", self.host_hugepages_gb.to_string()),
            ("vswitch_hugepages_gb", self.vswitch_hugepages_gb.to_string()),
            ("total_vfs", self.total_vfs.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<22}{v}\n")).collect()
    }
}

/// Cores and memory of a deployment. One core always belongs to the host.
///
/// MTS: shared mode puts every vswitch VM on one core; isolated mode pins
/// one core per compartment. Baseline's kernel vswitch runs on the host core
/// and, isolated, gets `compare_compartments - 1` more. User space dedicates
/// one polling core per compartment, Baseline included.
pub fn account_resources(spec: &DeploymentSpec) -> Result<ResourceAccount, OrchestratorError> {
    let mode = spec.effective_mode();
    let tenant_vms: u32 = spec.tenants.iter().map(|t| t.vm_count).sum();
    let (compartments, vswitch_cores, vswitch_vms) = if spec.is_mts() {
        let c = spec.compartments()?.len() as u32;
        let cores = match mode {
            ResourceMode::Shared => 1,
            ResourceMode::Isolated => c,
        };
        (c, cores, c)
    } else {
        let n = spec.compare_compartments;
        let cores = match (spec.user_space, mode) {
            (true, _) => n,
            (false, ResourceMode::Shared) => 0,
            (false, ResourceMode::Isolated) => n - 1,
        };
        (n, cores, 0)
    };
    let host_cores = 1;
    let vswitch_hugepages_gb = if spec.is_mts() {
        vswitch_vms * HUGEPAGES_GB_PER_VM
    } else if spec.user_space {
        compartments * HUGEPAGES_GB_PER_VM
    } else {
        0
    };
    Ok(ResourceAccount {
        mode,
        compartments,
        host_cores,
        vswitch_cores,
        total_cores: host_cores + vswitch_cores,
        vswitch_vms,
        tenant_vms,
        ram_gb_per_vm: RAM_GB_PER_VM,
        hugepages_gb_per_vm: HUGEPAGES_GB_PER_VM,
        vswitch_ram_gb: vswitch_vms * RAM_GB_PER_VM,
        tenant_ram_gb: tenant_vms * RAM_GB_PER_VM,
        host_hugepages_gb: 1,
        vswitch_hugepages_gb,
        total_vfs: count_vfs(spec)? as u32,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compartment {
    pub vswitch: u32,
    pub tenants: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub spec: DeploymentSpec,
    pub compartments: Vec<Compartment>,
    pub vlan_map: BTreeMap<String, VlanId>,
    pub gateway_ips: BTreeMap<String, Ipv4Addr>,
    /// Gateway MAC per tenant: the Gw VF's MAC, or the virtual gateway
    /// address of the host vswitch in Baseline.
    pub gateway_macs: BTreeMap<String, MacAddress>,
    pub nic: NicSwitch,
    pub vswitches: Vec<VswitchInstance>,
    pub tenant_vms: Vec<TenantVm>,
    pub resources: ResourceAccount,
    pub graph: ComponentGraph,
}

impl DeploymentPlan {
    pub fn is_mts(&self) -> bool {
        self.spec.is_mts()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn vswitch(&self, id: u32) -> Option<&VswitchInstance> {
        self.vswitches.iter().find(|v| v.id == id)
    }

    pub fn vswitch_mut(&mut self, id: u32) -> Option<&mut VswitchInstance> {
        self.vswitches.iter_mut().find(|v| v.id == id)
    }

    pub fn vswitch_of_tenant(&self, tenant: &str) -> Option<&VswitchInstance> {
        self.vswitches.iter().find(|v| v.gw_ports.contains_key(tenant))
    }

    /// Vswitch owning `port`.
    pub fn vswitch_of_port(&self, port: PortId) -> Option<&VswitchInstance> {
        self.vswitches.iter().find(|v| v.owns_port(port))
    }

    pub fn vm(&self, id: u32) -> Option<&TenantVm> {
        self.tenant_vms.iter().find(|v| v.id == id)
    }

    pub fn vms_of<'a>(&'a self, tenant: &'a str) -> impl Iterator<Item = &'a TenantVm> + 'a {
        self.tenant_vms.iter().filter(move |v| v.tenant == tenant)
    }

    pub fn vm_on_port(&self, port: PortId, mac: MacAddress) -> Option<&TenantVm> {
        self.tenant_vms.iter().find(|v| v.vf == port && v.mac == mac)
    }

    /// MAC of a fabric-facing vswitch port.
    pub fn port_mac(&self, port: PortId) -> Option<MacAddress> {
        self.nic.port_mac(port)
    }

    pub fn rules_text(&self) -> String {
        let mut out = String::new();
        for vs in &self.vswitches {
            out.push_str(&format!("# vswitch {} ({:?})\n", vs.id, vs.exec_ctx));
            out.push_str(&vs.table.render());
        }
        out
    }

    /// Re-derives the structural invariants from the materialized plan.
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |m: String| Err(OrchestratorError::Validation(m));
        let vlans: BTreeSet<VlanId> = self.vlan_map.values().copied().collect();
        if vlans.len() != self.vlan_map.len() || vlans.contains(&VlanId::UNTAGGED) {
            return fail("tenant VLANs not unique and nonzero".into());
        }
        let mut macs = BTreeSet::new();
        for i in 0..self.nic.fabric_ports() {
            macs.insert(self.nic.pf(i).expect("pf").mac);
        }
        for (port, slot) in self.nic.vfs() {
            if !macs.insert(slot.config.mac) {
                return fail(format!("mac of {port} not unique"));
            }
            if slot.config.role == VfRole::Tenant && !slot.config.spoof_check {
                return fail(format!("tenant {port} without spoof check"));
            }
        }
        if count_vfs(&self.spec)? != self.nic.vf_count() {
            return fail("VF count differs from formula".into());
        }
        let mut owned = BTreeSet::new();
        for vs in &self.vswitches {
            for p in vs.ports() {
                if !owned.insert(p) {
                    return fail(format!("{p} owned by two vswitches"));
                }
            }
            if vs.exec_ctx.on_host() == self.is_mts() {
                return fail(format!("vswitch {} runs in the wrong context", vs.id));
            }
        }
        for vm in &self.tenant_vms {
            if self.spec.static_arp && self.gateway_macs.get(&vm.tenant) != vm.static_arp.get(&vm.gateway_ip) {
                return fail(format!("vm {} lacks its gateway ARP entry", vm.id));
            }
        }
        Ok(())
    }
}

struct MacAllocator(u32);

impl MacAllocator {
    fn next(&mut self) -> MacAddress {
        let m = MacAddress::from_prefix(MAC_PREFIX, self.0);
        self.0 += 1;
        m
    }
}

pub fn plan_from_json(text: &str) -> Result<DeploymentPlan, OrchestratorError> {
    plan_deployment(&DeploymentSpec::from_json(text)?)
}

/// Materializes the deployment described by `spec`.
pub fn plan_deployment(spec: &DeploymentSpec) -> Result<DeploymentPlan, OrchestratorError> {
    spec.validate()?;
    count_vfs(spec)?;
    let groups = spec.compartments()?;
    let mut macs = MacAllocator(0);

    let vlan_map: BTreeMap<String, VlanId> = spec
        .tenants
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.clone(), VlanId::new(i as u16 + 1).expect("bounded by validate")))
        .collect();
    let gateway_ips: BTreeMap<String, Ipv4Addr> = spec
        .tenants
        .iter()
        .map(|t| (t.id.clone(), t.ip_block.nth(1).expect("block size checked")))
        .collect();

    let pf_owner = if spec.is_mts() {
        ComponentId::Host
    } else {
        ComponentId::Vswitch(0)
    };
    let pfs = (0..spec.fabric_ports)
        .map(|_| PfConfig {
            mac: macs.next(),
            attached_to: pf_owner,
        })
        .collect();
    let mut nic = NicSwitch::new(pfs, spec.max_vfs_per_pf);

    let mut vswitches = Vec::new();
    let mut tenant_vms = Vec::new();
    let mut gateway_macs = BTreeMap::new();
    let mut compartments = Vec::new();

    for (c, tenants) in groups.iter().enumerate() {
        let c = c as u32;
        let exec = match (spec.is_mts(), spec.user_space) {
            (true, false) => ExecContext::VmKernel,
            (true, true) => ExecContext::VmUser,
            (false, false) => ExecContext::HostKernel,
            (false, true) => ExecContext::HostUser,
        };
        let mut vs = VswitchInstance::new(c, exec);
        let owner = ComponentId::Vswitch(c);

        if spec.is_mts() {
            for j in 0..spec.fabric_ports {
                let cfg = VfConfig {
                    mac: macs.next(),
                    pvid: VlanId::UNTAGGED,
                    spoof_check: true,
                    attached_to: owner,
                    role: VfRole::InOut,
                };
                vs.inout_ports.push(nic.allocate_vf(ComponentId::Host, j, cfg)?);
            }
        } else {
            vs.inout_ports.extend((0..spec.fabric_ports).map(PortId::Pf));
        }

        let mut addressing = Vec::new();
        for (t_idx, tid) in tenants.iter().enumerate() {
            let t = spec.tenant(tid);
            let vlan = vlan_map[tid];
            let gw_mac = macs.next();
            let gw_port = if spec.is_mts() {
                allocate_first_fit(
                    &mut nic,
                    VfConfig {
                        mac: gw_mac,
                        pvid: vlan,
                        spoof_check: true,
                        attached_to: owner,
                        role: VfRole::Gateway,
                    },
                )?
            } else {
                PortId::Vif(t_idx as u16)
            };
            vs.gw_ports.insert(tid.clone(), gw_port);
            gateway_macs.insert(tid.clone(), gw_mac);

            let mut vm_addrs = Vec::new();
            for k in 0..t.vm_count {
                let id = tenant_vms.len() as u32;
                let mac = macs.next();
                let ip = t.ip_block.nth(2 + u64::from(k)).expect("block size checked");
                let port = if spec.is_mts() {
                    allocate_first_fit(
                        &mut nic,
                        VfConfig {
                            mac,
                            pvid: vlan,
                            spoof_check: true,
                            attached_to: ComponentId::TenantVm(id),
                            role: VfRole::Tenant,
                        },
                    )?
                } else {
                    gw_port
                };
                let mut vm = TenantVm::new(id, tid.clone(), port, mac, ip, gateway_ips[tid]);
                if spec.static_arp {
                    vm = vm.with_arp(gateway_ips[tid], gw_mac);
                }
                tenant_vms.push(vm);
                vm_addrs.push(VmAddressing {
                    mac: Some(mac),
                    ip: Some(ip),
                });
            }

            let uplink_port = *vs.inout_ports.last().expect("at least one fabric port");
            addressing.push(TenantAddressing {
                tenant: tid.clone(),
                gateway_ip: Some(gateway_ips[tid]),
                gw_port,
                gw_mac: Some(gw_mac),
                uplink_port,
                uplink_mac: nic.port_mac(uplink_port),
                external_gw_mac: spec.external_gw_mac,
                vms: vm_addrs,
            });
        }

        for a in &addressing {
            vs.table.install_all(build_tenant_rules(a)?)?;
        }
        if let Some(vx) = &spec.vxlan {
            let pairs = addressing
                .iter()
                .map(|a| Ok((a.clone(), Vni::new(vx.vni[&a.tenant]).map_err(|e| OrchestratorError::InvalidSpec(e.to_string()))?)))
                .collect::<Result<Vec<_>, OrchestratorError>>()?;
            let vtep = VtepAddressing {
                local_ip: vx.local_vtep_ip,
                remote_ip: vx.remote_vtep_ip,
            };
            vs.table.install_all(build_vxlan_rules(&pairs, &vtep)?)?;
        }

        compartments.push(Compartment {
            vswitch: c,
            tenants: tenants.clone(),
        });
        vswitches.push(vs);
    }

    if spec.is_mts() {
        // keep tenant VLANs away from the host's physical functions
        for vlan in vlan_map.values() {
            for i in 0..spec.fabric_ports {
                let pf_mac = nic.pf(i).expect("pf").mac;
                nic.install_filter(
                    ComponentId::Host,
                    WildcardFilter {
                        priority: PF_GUARD_PRIORITY,
                        matcher: FilterMatch {
                            vlan: Some(*vlan),
                            dst_mac: Some(pf_mac),
                            ..Default::default()
                        },
                        action: FilterAction::Drop,
                    },
                )?;
            }
        }
    }

    let resources = account_resources(spec)?;
    let mut plan = DeploymentPlan {
        spec: spec.clone(),
        compartments,
        vlan_map,
        gateway_ips,
        gateway_macs,
        nic,
        vswitches,
        tenant_vms,
        resources,
        graph: ComponentGraph::default(),
    };
    plan.graph = ComponentGraph::derive(&plan);
    plan.validate()?;
    Ok(plan)
}

/// Places a VF on the first PF with spare capacity.
fn allocate_first_fit(nic: &mut NicSwitch, cfg: VfConfig) -> Result<PortId, OrchestratorError> {
    let max = usize::from(nic.max_vfs_per_pf());
    let pf = (0..nic.fabric_ports())
        .find(|&p| nic.vfs_on_pf(p) < max)
        .ok_or(OrchestratorError::VfExhaustion {
            needed: nic.vf_count() + 1,
            capacity: max * usize::from(nic.fabric_ports()),
        })?;
    Ok(nic.allocate_vf(ComponentId::Host, pf, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2() -> SecurityLevel {
        SecurityLevel::Level2 {
            grouping: Grouping::PerTenant,
        }
    }

    #[test]
    fn vf_formulas() {
        assert_eq!(count_vfs(&DeploymentSpec::uniform(SecurityLevel::Level1, 1, 1)), Ok(3));
        assert_eq!(count_vfs(&DeploymentSpec::uniform(SecurityLevel::Level1, 4, 1)), Ok(9));
        assert_eq!(count_vfs(&DeploymentSpec::uniform(l2(), 2, 1)), Ok(6));
        assert_eq!(count_vfs(&DeploymentSpec::uniform(l2(), 4, 1)), Ok(12));
        assert_eq!(count_vfs(&DeploymentSpec::uniform(SecurityLevel::Baseline, 4, 1)), Ok(0));
    }

    #[test]
    fn vf_exhaustion() {
        // 1 in/out + 1 gw + 62 VMs = 64 fits, one more does not
        let spec = DeploymentSpec::uniform(SecurityLevel::Level1, 1, 62);
        assert_eq!(count_vfs(&spec), Ok(64));
        assert!(plan_deployment(&spec).is_ok());
        let spec = DeploymentSpec::uniform(SecurityLevel::Level1, 1, 63);
        assert_eq!(
            count_vfs(&spec),
            Err(OrchestratorError::VfExhaustion {
                needed: 65,
                capacity: 64
            })
        );
        assert!(matches!(plan_deployment(&spec), Err(OrchestratorError::VfExhaustion { .. })));
    }

    #[test]
    fn monotone_in_tenants_and_vms() {
        for level in [SecurityLevel::Level1, l2()] {
            let mut last = 0;
            for n in 1..6 {
                let v = count_vfs(&DeploymentSpec::uniform(level.clone(), n, 2)).unwrap();
                assert!(v > last);
                last = v;
            }
            let mut last = 0;
            for vms in 1..6 {
                let v = count_vfs(&DeploymentSpec::uniform(level.clone(), 3, vms)).unwrap();
                assert!(v > last);
                last = v;
            }
        }
    }

    #[test]
    fn level2_plan_shape() {
        let plan = plan_deployment(&DeploymentSpec::uniform(l2(), 4, 1)).unwrap();
        assert_eq!(plan.vswitches.len(), 4);
        assert_eq!(plan.nic.vf_count(), 12);
        let vlans: Vec<u16> = plan.vlan_map.values().map(|v| v.get()).collect();
        assert_eq!(vlans, vec![1, 2, 3, 4]);
        for vs in &plan.vswitches {
            assert_eq!(vs.exec_ctx, ExecContext::VmKernel);
            assert_eq!(vs.gw_ports.len(), 1);
        }
        assert_eq!(plan.nic.filters().len(), 4);
    }

    #[test]
    fn level1_plan_shape() {
        let plan = plan_deployment(&DeploymentSpec::uniform(SecurityLevel::Level1, 4, 1)).unwrap();
        assert_eq!(plan.vswitches.len(), 1);
        assert_eq!(plan.vswitches[0].gw_ports.len(), 4);
        let gw = plan
            .nic
            .vfs()
            .filter(|(_, s)| s.config.role == VfRole::Gateway)
            .count();
        assert_eq!(gw, 4);
        // 4 tenants x (ingress, egress, arp)
        assert_eq!(plan.vswitches[0].table.len(), 12);
    }

    #[test]
    fn baseline_plan_has_no_vfs() {
        let plan = plan_deployment(&DeploymentSpec::uniform(SecurityLevel::Baseline, 4, 1)).unwrap();
        assert_eq!(plan.nic.vf_count(), 0);
        assert_eq!(plan.vswitches.len(), 1);
        assert!(plan.vswitches[0].exec_ctx.on_host());
        assert_eq!(plan.nic.attached_to(PortId::Pf(0)), Some(ComponentId::Vswitch(0)));
        assert!(plan.tenant_vms.iter().all(|v| matches!(v.vf, PortId::Vif(_))));
        assert!(plan.nic.filters().is_empty());
    }

    #[test]
    fn addressing_is_deterministic() {
        let plan = plan_deployment(&DeploymentSpec::uniform(SecurityLevel::Level1, 1, 1)).unwrap();
        assert_eq!(plan.nic.pf(0).unwrap().mac.to_string(), "02:4d:54:00:00:00");
        assert_eq!(plan.nic.port_mac(PortId::Vf(0)).unwrap().to_string(), "02:4d:54:00:00:01");
        assert_eq!(plan.gateway_macs["t0"].to_string(), "02:4d:54:00:00:02");
        let vm = &plan.tenant_vms[0];
        assert_eq!(vm.mac.to_string(), "02:4d:54:00:00:03");
        assert_eq!(vm.ip, Ipv4Addr::new(10, 1, 0, 2));
        assert_eq!(vm.gateway_ip, Ipv4Addr::new(10, 1, 0, 1));
        assert_eq!(vm.static_arp[&vm.gateway_ip], plan.gateway_macs["t0"]);
    }

    #[test]
    fn plans_are_byte_identical() {
        let spec = DeploymentSpec::uniform(l2(), 3, 2);
        assert_eq!(plan_deployment(&spec).unwrap().to_json(), plan_deployment(&spec).unwrap().to_json());
    }

    #[test]
    fn spec_json_round_trip() {
        let mut spec = DeploymentSpec::uniform(
            SecurityLevel::Level2 {
                grouping: Grouping::Zones(vec![vec!["t0".into(), "t2".into()], vec!["t1".into()]]),
            },
            3,
            1,
        );
        spec.vxlan = Some(VxlanSpec {
            local_vtep_ip: Ipv4Addr::new(192, 0, 2, 10),
            remote_vtep_ip: Ipv4Addr::new(192, 0, 2, 20),
            vni: [("t0".into(), 7), ("t1".into(), 8), ("t2".into(), 9)].into(),
        });
        let back = DeploymentSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        let plan = plan_deployment(&back).unwrap();
        assert_eq!(plan.compartments[0].tenants, vec!["t0", "t2"]);
        assert_eq!(count_vfs(&back), Ok(8));
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let text = r#"{
            "version": 1,
            "tenants": [{"id": "red", "vm_count": 1, "ip_block": "10.1.0.0/24"}],
            "level": {"kind": "level1"},
            "mode": "shared",
            "fabric_ports": 1,
            "external_gw_mac": "02:ee:00:00:00:01"
        }"#;
        let spec = DeploymentSpec::from_json(text).unwrap();
        assert_eq!(spec.max_vfs_per_pf, 64);
        assert!(spec.static_arp);
        assert!(!spec.user_space);
    }

    #[test]
    fn spec_errors() {
        let mut spec = DeploymentSpec::uniform(SecurityLevel::Level1, 2, 1);
        spec.tenants[1].id = "t0".into();
        assert_eq!(plan_deployment(&spec), Err(OrchestratorError::DuplicateTenantId("t0".into())));

        let mut spec = DeploymentSpec::uniform(SecurityLevel::Level1, 2, 1);
        spec.version = 2;
        assert_eq!(spec.validate(), Err(OrchestratorError::UnsupportedVersion(2)));

        let mut spec = DeploymentSpec::uniform(SecurityLevel::Level1, 2, 1);
        spec.tenants[1].ip_block = "10.1.0.128/25".parse().unwrap();
        assert!(matches!(spec.validate(), Err(OrchestratorError::OverlappingIpBlocks(..))));

        let mut spec = DeploymentSpec::uniform(SecurityLevel::Level1, 1, 2);
        spec.tenants[0].ip_block = "10.1.0.0/30".parse().unwrap();
        assert!(matches!(spec.validate(), Err(OrchestratorError::IpBlockTooSmall { .. })));

        let spec = DeploymentSpec::uniform(
            SecurityLevel::Level2 {
                grouping: Grouping::Zones(vec![vec!["t0".into()]]),
            },
            2,
            1,
        );
        assert!(matches!(spec.validate(), Err(OrchestratorError::InvalidGrouping(_))));

        let mut spec = DeploymentSpec::uniform(SecurityLevel::Level1, 2, 1);
        spec.vxlan = Some(VxlanSpec {
            local_vtep_ip: Ipv4Addr::new(192, 0, 2, 10),
            remote_vtep_ip: Ipv4Addr::new(192, 0, 2, 20),
            vni: [("t0".into(), 7), ("t1".into(), 7)].into(),
        });
        assert!(matches!(
            plan_deployment(&spec),
            Err(OrchestratorError::Dataplane(DataplaneError::DuplicateVni(_)))
        ));
    }

    #[test]
    fn resource_rows() {
        let acct = |level: SecurityLevel, n: usize, mode: ResourceMode, user: bool| {
            let mut s = DeploymentSpec::uniform(level, n, 1);
            s.mode = mode;
            s.user_space = user;
            account_resources(&s).unwrap()
        };
        let base = acct(SecurityLevel::Baseline, 1, ResourceMode::Isolated, false);
        assert_eq!((base.host_cores, base.vswitch_cores, base.total_cores), (1, 0, 1));
        let l1 = acct(SecurityLevel::Level1, 1, ResourceMode::Isolated, false);
        assert_eq!(l1.total_cores - base.total_cores, 1);
        for n in [1, 2, 4] {
            let a = acct(l2(), n, ResourceMode::Shared, false);
            assert_eq!(a.vswitch_cores, 1);
            assert_eq!(a.total_cores, 2);
            assert_eq!(a.vswitch_ram_gb, 4 * n as u32);
            let a = acct(l2(), n, ResourceMode::Isolated, false);
            assert_eq!(a.vswitch_cores, n as u32);
        }
        let bu = acct(SecurityLevel::Baseline, 1, ResourceMode::Shared, true);
        assert_eq!((bu.total_cores, bu.mode), (2, ResourceMode::Isolated));
        let mut s = DeploymentSpec::uniform(SecurityLevel::Baseline, 4, 1);
        s.compare_compartments = 4;
        s.mode = ResourceMode::Isolated;
        assert_eq!(account_resources(&s).unwrap().total_cores, 4);
        s.user_space = true;
        assert_eq!(account_resources(&s).unwrap().vswitch_cores, 4);
        assert_eq!(base.host_hugepages_gb, 1);
    }

    #[test]
    fn resource_csv() {
        let a = account_resources(&DeploymentSpec::uniform(SecurityLevel::Level1, 4, 1)).unwrap();
        let csv = a.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), ResourceAccount::CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "isolated,1,1,1,2,1,4,4,1,4,16,1,1,9");
    }
}
