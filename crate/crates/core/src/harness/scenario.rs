//! Traffic scenarios: physical-to-physical, physical-to-virtual and
//! virtual-to-virtual (two-VM service chain).

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataplane::{build_chain_rule, build_transit_rule};
use crate::endpoints::{AppBehavior, MIN_PACKET_SIZE, TEST_PROTOCOL};
use crate::frames::{EthernetFrame, Ipv4Body, Ipv4Packet, MacAddress, Payload};
use crate::ids::PortId;
use crate::orchestrator::DeploymentPlan;

use super::engine::Engine;
use super::metrics::Metrics;
use super::trace::{PacketRecord, TraceEvent};
use super::HarnessError;

/// Traffic generator on the far side of the fabric.
pub const EXTERNAL_HOST_MAC: MacAddress = MacAddress([0x02, 0x4c, 0x47, 0x00, 0x00, 0x01]);
pub const EXTERNAL_HOST_IP: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 1);

pub const DEFAULT_PACKET_SIZE: usize = 64;

/// Off-host destination for physical-to-physical flow `i`.
pub fn external_dst_ip(i: usize) -> Ipv4Addr {
    Ipv4Addr::new(203, 0, 113, 1 + (i % 250) as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    P2p,
    P2v,
    V2v,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::P2p => "p2p",
            ScenarioKind::P2v => "p2v",
            ScenarioKind::V2v => "v2v",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p2p" => Ok(ScenarioKind::P2p),
            "p2v" => Ok(ScenarioKind::P2v),
            "v2v" => Ok(ScenarioKind::V2v),
            _ => Err(format!("unknown scenario {s:?}; expected p2p, p2v or v2v")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTarget {
    /// Routed straight through vswitch `via` to an off-host address.
    External { via: u32, dst_ip: Ipv4Addr },
    /// To a VM that echoes it back out.
    Vm(u32),
    /// Through `forwarder`, then `sink`, which echoes it back out.
    Chain { forwarder: u32, sink: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub target: FlowTarget,
    pub size: usize,
    pub count: u64,
}

impl FlowSpec {
    pub fn label(&self) -> String {
        match &self.target {
            FlowTarget::External { via, dst_ip } => format!("vswitch:{via}->{dst_ip}"),
            FlowTarget::Vm(v) => format!("vm:{v}"),
            FlowTarget::Chain { forwarder, sink } => format!("vm:{forwarder}>vm:{sink}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub flows: Vec<FlowSpec>,
    /// Fixes the interleaving of packets across flows.
    pub seed: u64,
}

impl Scenario {
    /// One flow per tenant for p2p/p2v; disjoint VM pairs for v2v.
    pub fn standard(plan: &DeploymentPlan, kind: ScenarioKind, packets: u64, size: usize, seed: u64) -> Result<Self, HarnessError> {
        let first_vms: Vec<u32> = plan
            .spec
            .tenants
            .iter()
            .filter_map(|t| plan.vms_of(&t.id).next().map(|v| v.id))
            .collect();
        let targets: Vec<FlowTarget> = match kind {
            ScenarioKind::P2p => plan
                .spec
                .tenants
                .iter()
                .enumerate()
                .map(|(i, t)| FlowTarget::External {
                    via: plan.vswitch_of_tenant(&t.id).expect("every tenant has a vswitch").id,
                    dst_ip: external_dst_ip(i),
                })
                .collect(),
            ScenarioKind::P2v => first_vms.into_iter().map(FlowTarget::Vm).collect(),
            ScenarioKind::V2v => {
                // VMs in compartment order, paired off
                let mut order: Vec<u32> = Vec::new();
                for c in &plan.compartments {
                    for t in &c.tenants {
                        order.extend(plan.vms_of(t).map(|v| v.id));
                    }
                }
                if order.len() < 2 {
                    return Err(HarnessError::InvalidScenario("v2v needs at least two VMs".into()));
                }
                order
                    .chunks_exact(2)
                    .map(|p| FlowTarget::Chain {
                        forwarder: p[0],
                        sink: p[1],
                    })
                    .collect()
            }
        };
        Ok(Scenario {
            kind,
            flows: targets
                .into_iter()
                .map(|target| FlowSpec {
                    target,
                    size,
                    count: packets,
                })
                .collect(),
            seed,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.flows.iter().map(|f| format!("{}:{}", self.kind, f.label())).collect()
    }

    fn validate(&self, plan: &DeploymentPlan) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidScenario(m));
        let mut roles: Vec<(u32, bool)> = Vec::new();
        for f in &self.flows {
            if f.size < MIN_PACKET_SIZE {
                return bad(format!("packet size {} below {MIN_PACKET_SIZE}", f.size));
            }
            match (&f.target, self.kind) {
                (FlowTarget::External { via, .. }, ScenarioKind::P2p) => {
                    if plan.vswitch(*via).is_none() {
                        return bad(format!("no vswitch {via}"));
                    }
                }
                (FlowTarget::Vm(v), ScenarioKind::P2v) => {
                    if plan.vm(*v).is_none() {
                        return bad(format!("no vm {v}"));
                    }
                }
                (FlowTarget::Chain { forwarder, sink }, ScenarioKind::V2v) => {
                    if forwarder == sink {
                        return bad("chain forwarder and sink must differ".into());
                    }
                    for v in [forwarder, sink] {
                        if plan.vm(*v).is_none() {
                            return bad(format!("no vm {v}"));
                        }
                    }
                    roles.push((*forwarder, true));
                    roles.push((*sink, false));
                }
                _ => return bad(format!("flow {} does not fit a {} scenario", f.label(), self.kind)),
            }
        }
        for &(vm, fwd) in &roles {
            if roles.iter().any(|&(v, f)| v == vm && f != fwd) {
                return bad(format!("vm {vm} is both a forwarder and a sink"));
            }
        }
        Ok(())
    }
}

/// Copy of `plan` with VM behaviors and the scenario-specific transit or
/// service-chain rules installed.
pub fn prepare(plan: &DeploymentPlan, scenario: &Scenario) -> Result<DeploymentPlan, HarnessError> {
    scenario.validate(plan)?;
    let mut p = plan.clone();
    for vm in &mut p.tenant_vms {
        vm.app = AppBehavior::Sink;
    }
    match scenario.kind {
        ScenarioKind::P2p => {
            for vs in &mut p.vswitches {
                let n = vs.inout_ports.len();
                for i in 0..n {
                    let to = vs.inout_ports[(i + 1) % n];
                    let to_mac = plan.nic.port_mac(to).expect("fabric-facing ports have MACs");
                    vs.table
                        .install(build_transit_rule(vs.inout_ports[i], to, to_mac, plan.spec.external_gw_mac))?;
                }
            }
        }
        ScenarioKind::P2v => {
            for f in &scenario.flows {
                if let FlowTarget::Vm(v) = f.target {
                    set_app(&mut p, v, AppBehavior::Echo);
                }
            }
        }
        ScenarioKind::V2v => {
            for f in &scenario.flows {
                if let FlowTarget::Chain { forwarder, sink } = f.target {
                    install_chain(&mut p, forwarder, sink)?;
                }
            }
        }
    }
    Ok(p)
}

fn set_app(plan: &mut DeploymentPlan, vm: u32, app: AppBehavior) {
    if let Some(v) = plan.tenant_vms.iter_mut().find(|v| v.id == vm) {
        v.app = app;
    }
}

fn install_chain(plan: &mut DeploymentPlan, forwarder: u32, sink: u32) -> Result<(), HarnessError> {
    let f = plan.vm(forwarder).expect("validated").clone();
    let s = plan.vm(sink).expect("validated").clone();
    let f_gw_mac = plan.gateway_macs[&f.tenant];
    let s_gw_mac = plan.gateway_macs[&s.tenant];
    let vx = plan.vswitch_of_tenant(&f.tenant).expect("tenant has vswitch");
    let vy = plan.vswitch_of_tenant(&s.tenant).expect("tenant has vswitch");
    let (x, y) = (vx.id, vy.id);
    let f_gw = vx.gw_ports[&f.tenant];
    let s_gw = vy.gw_ports[&s.tenant];
    if x == y {
        let rule = build_chain_rule(f_gw, f.ip, s_gw, s_gw_mac, s.mac);
        plan.vswitch_mut(x).expect("exists").table.install(rule)?;
    } else {
        let out_x = vx.inout_ports[0];
        let in_y = vy.inout_ports[0];
        let out_x_mac = plan.nic.port_mac(out_x).expect("in/out VF");
        let in_y_mac = plan.nic.port_mac(in_y).expect("in/out VF");
        let hop = build_chain_rule(f_gw, f.ip, out_x, out_x_mac, in_y_mac);
        let deliver = build_chain_rule(in_y, f.ip, s_gw, s_gw_mac, s.mac);
        plan.vswitch_mut(x).expect("exists").table.install(hop)?;
        plan.vswitch_mut(y).expect("exists").table.install(deliver)?;
    }
    set_app(plan, forwarder, AppBehavior::L2Fwd { next_hop_mac: f_gw_mac });
    set_app(plan, sink, AppBehavior::Echo);
    Ok(())
}

/// Frame the external generator sends toward vswitch `via` for `dst_ip`.
pub fn external_frame(plan: &DeploymentPlan, via: u32, dst_ip: Ipv4Addr, size: usize, seq: u64) -> (u16, EthernetFrame) {
    let vs = plan.vswitch(via).expect("validated");
    let entry = vs.inout_ports[0];
    let fabric = match entry {
        PortId::Pf(i) => i,
        _ => plan.nic.vf(entry).expect("in/out VF").pf,
    };
    let body_len = size.saturating_sub(MIN_PACKET_SIZE);
    let seq_bytes = seq.to_be_bytes();
    let body = (0..body_len).map(|i| if i < 8 { seq_bytes[i] } else { i as u8 }).collect();
    let frame = EthernetFrame {
        dst: plan.nic.port_mac(entry).expect("entry port has a MAC"),
        src: EXTERNAL_HOST_MAC,
        vlan: None,
        payload: Payload::Ipv4(Ipv4Packet {
            src: EXTERNAL_HOST_IP,
            dst: dst_ip,
            protocol: TEST_PROTOCOL,
            body: Ipv4Body::Opaque(body),
        }),
    };
    (fabric, frame)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub metrics: Metrics,
    pub packets: Vec<PacketRecord>,
    pub trace: Vec<TraceEvent>,
}

impl RunResult {
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.trace {
            out.push_str(&ev.to_json_line());
            out.push('\n');
        }
        out
    }
}

/// Injects every flow's packets from the fabric, in a seeded interleaving,
/// and steps the network until it is quiet.
pub fn run_scenario(plan: &DeploymentPlan, scenario: &Scenario) -> Result<RunResult, HarnessError> {
    let prepared = prepare(plan, scenario)?;
    let mut order: Vec<usize> = Vec::new();
    for (i, f) in scenario.flows.iter().enumerate() {
        order.extend(std::iter::repeat_n(i, f.count as usize));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(scenario.seed));

    let mut engine = Engine::new(prepared);
    let mut sent = vec![0u64; scenario.flows.len()];
    for flow in order {
        let f = &scenario.flows[flow];
        let (via, dst_ip) = match f.target {
            FlowTarget::External { via, dst_ip } => (via, dst_ip),
            FlowTarget::Vm(v) | FlowTarget::Chain { forwarder: v, .. } => {
                let vm = engine.plan().vm(v).expect("validated");
                let vs = engine.plan().vswitch_of_tenant(&vm.tenant).expect("tenant has vswitch").id;
                (vs, vm.ip)
            }
        };
        let (port, frame) = external_frame(engine.plan(), via, dst_ip, f.size, sent[flow]);
        sent[flow] += 1;
        engine.inject_fabric(port, frame, Some(flow))?;
    }
    engine.run()?;
    Ok(RunResult {
        metrics: Metrics::collect(engine.packets(), &scenario.labels(), engine.counters()),
        packets: engine.packets().to_vec(),
        trace: engine.trace().to_vec(),
    })
}

/// VM `from` sends `count` packets to VM `to`, which echoes each back.
/// Flow 0 carries the whole exchange.
pub fn run_exchange(plan: &DeploymentPlan, from: u32, to: u32, count: u64, size: usize) -> Result<RunResult, HarnessError> {
    let mut p = plan.clone();
    for vm in &mut p.tenant_vms {
        vm.app = AppBehavior::Sink;
    }
    set_app(&mut p, to, AppBehavior::Echo);
    let dst_ip = p.vm(to).ok_or_else(|| HarnessError::InvalidScenario(format!("no vm {to}")))?.ip;
    if p.vm(from).is_none() || from == to {
        return Err(HarnessError::InvalidScenario(format!("bad exchange {from} -> {to}")));
    }
    let mut engine = Engine::new(p);
    for _ in 0..count {
        engine.send_from_vm(from, dst_ip, size, Some(0))?;
    }
    engine.run()?;
    Ok(RunResult {
        metrics: Metrics::collect(engine.packets(), &[format!("vm:{from}<->vm:{to}")], engine.counters()),
        packets: engine.packets().to_vec(),
        trace: engine.trace().to_vec(),
    })
}
