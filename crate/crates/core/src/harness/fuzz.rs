//! Isolation fuzzer. Tenant VMs put random, plan-biased raw frames on the
//! wire; every hop of the resulting trace is checked against the isolation
//! invariants.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frames::{
    ArpMessage, ArpOp, EthernetFrame, Ipv4Body, Ipv4Packet, MacAddress, Payload, VlanId, Vni, VxlanEnvelope, IPPROTO_UDP,
};
use crate::endpoints::{AppBehavior, TEST_PROTOCOL};
use crate::ids::{ComponentId, PortId};
use crate::nic::VfRole;
use crate::orchestrator::DeploymentPlan;

use super::engine::Engine;
use super::scenario::EXTERNAL_HOST_IP;
use super::trace::{Direction, Location, TraceEvent};
use super::HarnessError;

pub const OPAQUE_ETHERTYPE: u16 = 0x88b5;

/// IPv4, ARP, 802.1Q-tagged, opaque.
const ETHERTYPE_WEIGHTS: [u32; 4] = [50, 20, 20, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub frames_per_vf: u32,
    pub seed: u64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            frames_per_vf: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A tenant frame reached a port owned by the host.
    HostDelivery,
    /// A frame classified into a tenant VLAN left through a fabric port.
    FabricLeak,
    /// A tenant frame reached another compartment's in/out port.
    ForeignInOut,
    /// A tenant frame reached another tenant without passing its vswitch.
    CrossTenant,
    /// The NIC forwarded a frame whose source MAC is not the sending VF's.
    SpoofedDelivery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub origin_vm: u32,
    pub packet: u64,
    pub event: TraceEvent,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub frames: u64,
    pub events: u64,
    pub delivered: u64,
    pub drops_by_reason: BTreeMap<String, u64>,
    pub violations_by_kind: BTreeMap<String, u64>,
    /// First few violations, for diagnosis.
    pub samples: Vec<Violation>,
    pub violation_count: u64,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.violation_count == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const MAX_SAMPLES: usize = 16;

struct Pools {
    macs: Vec<MacAddress>,
    ips: Vec<Ipv4Addr>,
    vlans: Vec<VlanId>,
}

impl Pools {
    fn of(plan: &DeploymentPlan) -> Self {
        let mut macs: Vec<MacAddress> = plan.nic.ports().into_iter().filter_map(|p| plan.nic.port_mac(p)).collect();
        macs.extend(plan.tenant_vms.iter().map(|v| v.mac));
        macs.extend(plan.gateway_macs.values().copied());
        macs.push(plan.spec.external_gw_mac);
        macs.sort();
        macs.dedup();
        let mut ips: Vec<Ipv4Addr> = plan.tenant_vms.iter().map(|v| v.ip).collect();
        ips.extend(plan.gateway_ips.values().copied());
        ips.push(EXTERNAL_HOST_IP);
        if let Some(vx) = &plan.spec.vxlan {
            ips.push(vx.local_vtep_ip);
            ips.push(vx.remote_vtep_ip);
        }
        let vlans = plan.vlan_map.values().copied().collect();
        Pools { macs, ips, vlans }
    }
}

fn random_mac(rng: &mut ChaCha8Rng) -> MacAddress {
    let mut b: [u8; 6] = rng.gen();
    b[0] = (b[0] & 0xfc) | 0x02;
    MacAddress(b)
}

struct Generator<'a> {
    rng: ChaCha8Rng,
    pools: &'a Pools,
    kinds: WeightedIndex<u32>,
}

impl Generator<'_> {
    fn pick_mac(&mut self) -> MacAddress {
        *self.pools.macs.choose(&mut self.rng).expect("pool is never empty")
    }

    fn ip(&mut self) -> Ipv4Addr {
        if self.rng.gen_bool(0.8) {
            *self.pools.ips.choose(&mut self.rng).expect("pool is never empty")
        } else {
            Ipv4Addr::from(self.rng.gen::<u32>())
        }
    }

    fn src(&mut self, own: MacAddress) -> MacAddress {
        match self.rng.gen_range(0..100) {
            0..=59 => own,
            60..=89 => self.pick_mac(),
            _ => random_mac(&mut self.rng),
        }
    }

    fn dst(&mut self) -> MacAddress {
        match self.rng.gen_range(0..100) {
            0..=14 => MacAddress::BROADCAST,
            15..=79 => self.pick_mac(),
            _ => random_mac(&mut self.rng),
        }
    }

    fn vlan(&mut self) -> VlanId {
        if !self.pools.vlans.is_empty() && self.rng.gen_bool(0.7) {
            *self.pools.vlans.choose(&mut self.rng).expect("non-empty")
        } else {
            VlanId::new(self.rng.gen_range(1..=VlanId::MAX)).expect("in range")
        }
    }

    fn bytes(&mut self, max: usize) -> Vec<u8> {
        let n = self.rng.gen_range(0..=max);
        (0..n).map(|_| self.rng.gen()).collect()
    }

    fn ipv4(&mut self, own_mac: MacAddress) -> Payload {
        let body = if self.rng.gen_bool(0.2) {
            let inner = EthernetFrame {
                dst: self.dst(),
                src: self.src(own_mac),
                vlan: None,
                payload: Payload::Ipv4(Ipv4Packet {
                    src: self.ip(),
                    dst: self.ip(),
                    protocol: TEST_PROTOCOL,
                    body: Ipv4Body::Opaque(self.bytes(32)),
                }),
            };
            Ipv4Body::Vxlan(VxlanEnvelope {
                vni: Vni::new(self.rng.gen_range(0..Vni::LIMIT)).expect("in range"),
                inner: Box::new(inner),
            })
        } else {
            Ipv4Body::Opaque(self.bytes(64))
        };
        let protocol = match body {
            Ipv4Body::Vxlan(_) => IPPROTO_UDP,
            Ipv4Body::Opaque(_) => TEST_PROTOCOL,
        };
        Payload::Ipv4(Ipv4Packet {
            src: self.ip(),
            dst: self.ip(),
            protocol,
            body,
        })
    }

    fn frame(&mut self, own_mac: MacAddress) -> EthernetFrame {
        let dst = self.dst();
        let src = self.src(own_mac);
        let (vlan, payload) = match self.kinds.sample(&mut self.rng) {
            0 => (None, self.ipv4(own_mac)),
            1 => {
                let op = if self.rng.gen_bool(0.5) { ArpOp::Request } else { ArpOp::Reply };
                let msg = ArpMessage {
                    op,
                    sender_mac: src,
                    sender_ip: self.ip(),
                    target_mac: if op == ArpOp::Request { MacAddress::ZERO } else { self.pick_mac() },
                    target_ip: self.ip(),
                };
                (None, Payload::Arp(msg))
            }
            2 => (Some(self.vlan()), self.ipv4(own_mac)),
            _ => (
                None,
                Payload::Opaque {
                    ethertype: OPAQUE_ETHERTYPE,
                    bytes: self.bytes(64),
                },
            ),
        };
        EthernetFrame { dst, src, vlan, payload }
    }
}

/// Tenant that owns `port`, if it is a tenant VM or gateway port.
fn tenant_of_port(plan: &DeploymentPlan, port: PortId) -> Option<String> {
    match plan.nic.vf_config(port)?.role {
        VfRole::Tenant => plan.vm_on_port(port, plan.nic.port_mac(port)?).map(|v| v.tenant.clone()).or_else(|| {
            match plan.nic.attached_to(port)? {
                ComponentId::TenantVm(id) => plan.vm(id).map(|v| v.tenant.clone()),
                _ => None,
            }
        }),
        VfRole::Gateway => plan
            .vswitches
            .iter()
            .find_map(|vs| vs.gw_ports.iter().find(|(_, &p)| p == port).map(|(t, _)| t.clone())),
        VfRole::InOut => None,
    }
}

fn compartment_of(plan: &DeploymentPlan, tenant: &str) -> Option<u32> {
    plan.vswitch_of_tenant(tenant).map(|vs| vs.id)
}

/// Invariant violations in one event of a packet sent by `origin`.
pub fn check_event(plan: &DeploymentPlan, origin: u32, ev: &TraceEvent) -> Vec<ViolationKind> {
    let mut out = Vec::new();
    let Some(origin_vm) = plan.vm(origin) else { return out };
    let home = compartment_of(plan, &origin_vm.tenant);
    match (ev.location, ev.direction) {
        (Location::Nic, Direction::Switch) => {
            let classified = ev.snapshot.vlan.filter(|v| !v.is_untagged());
            let in_cfg = plan.nic.vf_config(ev.port);
            if let Some(cfg) = in_cfg {
                if cfg.role == VfRole::Tenant && ev.snapshot.src != cfg.mac && !ev.out_ports.is_empty() {
                    out.push(ViolationKind::SpoofedDelivery);
                }
            }
            let in_tenant = tenant_of_port(plan, ev.port);
            for &p in &ev.out_ports {
                if let PortId::Fabric(_) = p {
                    if classified.is_some() {
                        out.push(ViolationKind::FabricLeak);
                    }
                    continue;
                }
                if plan.nic.attached_to(p) == Some(ComponentId::Host) {
                    out.push(ViolationKind::HostDelivery);
                }
                if let Some(cfg) = plan.nic.vf_config(p) {
                    if cfg.role == VfRole::InOut {
                        if let ComponentId::Vswitch(x) = cfg.attached_to {
                            if Some(x) != home {
                                out.push(ViolationKind::ForeignInOut);
                            }
                        }
                    }
                }
                if let (Some(a), Some(b)) = (&in_tenant, tenant_of_port(plan, p)) {
                    if *a != b {
                        out.push(ViolationKind::CrossTenant);
                    }
                }
            }
        }
        (Location::Host, Direction::Rx) => out.push(ViolationKind::HostDelivery),
        (Location::Tenant(id), Direction::Rx) => {
            if let Some(vm) = plan.vm(id) {
                if compartment_of(plan, &vm.tenant) != home {
                    out.push(ViolationKind::CrossTenant);
                }
            }
        }
        _ => {}
    }
    out.sort();
    out.dedup();
    out
}

/// Has every tenant VM send `frames_per_vf` random raw frames and checks
/// every resulting hop.
pub fn verify_isolation(plan: &DeploymentPlan, cfg: FuzzConfig) -> Result<FuzzReport, HarnessError> {
    let pools = Pools::of(plan);
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        pools: &pools,
        kinds: WeightedIndex::new(ETHERTYPE_WEIGHTS).expect("static weights"),
    };
    let mut p = plan.clone();
    for vm in &mut p.tenant_vms {
        vm.app = AppBehavior::Sink;
    }
    let vms: Vec<(u32, MacAddress)> = p.tenant_vms.iter().map(|v| (v.id, v.mac)).collect();
    let mut engine = Engine::new(p);
    let mut report = FuzzReport::default();
    let mut origins: BTreeMap<u64, u32> = BTreeMap::new();
    for _ in 0..cfg.frames_per_vf {
        for &(vm, mac) in &vms {
            let frame = gen.frame(mac);
            let pkt = engine.inject_tenant(vm, frame, None)?;
            origins.insert(pkt, vm);
            report.frames += 1;
        }
        engine.run()?;
        for ev in engine.take_trace() {
            report.events += 1;
            let origin = origins[&ev.packet];
            for kind in check_event(plan, origin, &ev) {
                report.violation_count += 1;
                *report.violations_by_kind.entry(format!("{kind:?}")).or_default() += 1;
                if report.samples.len() < MAX_SAMPLES {
                    report.samples.push(Violation {
                        kind,
                        origin_vm: origin,
                        packet: ev.packet,
                        event: ev.clone(),
                    });
                }
            }
        }
        origins.clear();
    }
    for pkt in engine.packets() {
        if !pkt.delivered.is_empty() {
            report.delivered += 1;
        } else if let Some(d) = pkt.drops.first() {
            *report.drops_by_reason.entry(d.reason.as_str().to_owned()).or_default() += 1;
        }
    }
    Ok(report)
}

/// Copy of `plan` with spoof checking turned off on every tenant VF.
pub fn without_spoof_check(plan: &DeploymentPlan) -> DeploymentPlan {
    let mut p = plan.clone();
    let tenant_vfs: Vec<PortId> = p
        .nic
        .vfs()
        .filter(|(_, s)| s.config.role == VfRole::Tenant)
        .map(|(port, _)| port)
        .collect();
    for port in tenant_vfs {
        let mut cfg = p.nic.vf_config(port).expect("listed").clone();
        cfg.spoof_check = false;
        p.nic.configure_vf(ComponentId::Host, port, cfg).expect("same config, one flag changed");
    }
    p
}
