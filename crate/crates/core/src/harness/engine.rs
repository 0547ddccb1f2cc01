//! Synchronous step loop moving frames between the fabric, the NIC switch,
//! vswitch compartments and tenant VMs.
//!
//! Each tick takes every node's inbox, drains the nodes in `Location`
//! order and queues their outputs for the next tick. The run ends when all
//! inboxes are empty.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::DataplaneError;
use crate::endpoints::{EndpointError, Emission};
use crate::frames::{EthernetFrame, VlanId};
use crate::ids::{ComponentId, PortId};
use crate::nic::{DropReason, DropRecord, NicError};
use crate::orchestrator::DeploymentPlan;

use super::trace::{Direction, Location, PacketRecord, Snapshot, TraceEvent};

pub const DEFAULT_STEP_BOUND: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("network did not go quiet within {0} ticks")]
    NonQuiescent(u64),
    #[error("no tenant VM {0}")]
    UnknownVm(u32),
    #[error("no fabric port {0}")]
    UnknownFabricPort(u16),
    #[error(transparent)]
    Nic(#[from] NicError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
}

#[derive(Clone, Debug)]
struct Item {
    packet: u64,
    port: PortId,
    frame: EthernetFrame,
}

/// Per-link and per-rule counters accumulated during a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Frames per directed link, keyed `"<from>-><to>"`.
    pub links: BTreeMap<String, u64>,
    /// Rule hits keyed `"vswitch:<id>/seq:<n>"`.
    pub rule_hits: BTreeMap<String, u64>,
}

pub struct Engine {
    plan: DeploymentPlan,
    inboxes: BTreeMap<Location, VecDeque<Item>>,
    packets: Vec<PacketRecord>,
    trace: Vec<TraceEvent>,
    counters: Counters,
    tick: u64,
    step_bound: u64,
}

impl Engine {
    pub fn new(plan: DeploymentPlan) -> Self {
        Engine {
            plan,
            inboxes: BTreeMap::new(),
            packets: Vec::new(),
            trace: Vec::new(),
            counters: Counters::default(),
            tick: 0,
            step_bound: DEFAULT_STEP_BOUND,
        }
    }

    pub fn with_step_bound(mut self, bound: u64) -> Self {
        self.step_bound = bound;
        self
    }

    pub fn plan(&self) -> &DeploymentPlan {
        &self.plan
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.packets
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Hands back the trace recorded so far and starts a fresh one.
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    fn new_packet(&mut self, flow: Option<usize>, origin: Location) -> u64 {
        self.packets.push(PacketRecord::new(flow, origin));
        (self.packets.len() - 1) as u64
    }

    fn event(
        &mut self,
        packet: u64,
        location: Location,
        direction: Direction,
        port: PortId,
        frame: &EthernetFrame,
    ) -> &mut TraceEvent {
        let rec = &mut self.packets[packet as usize];
        rec.steps += 1;
        rec.hops += 1;
        if location == Location::Nic {
            rec.nic_traversals += 1;
        }
        self.trace.push(TraceEvent {
            packet,
            step: rec.steps,
            tick: self.tick,
            location,
            direction,
            port,
            out_ports: Vec::new(),
            snapshot: Snapshot::of(frame),
            drop: None,
        });
        self.trace.last_mut().expect("just pushed")
    }

    fn drop(&mut self, packet: u64, port: PortId, reason: DropReason) {
        self.packets[packet as usize].drops.push(DropRecord { port, reason });
    }

    fn deliver(&mut self, packet: u64, at: Location) {
        self.packets[packet as usize].delivered.push(at);
    }

    fn link(&mut self, from: impl ToString, to: impl ToString) {
        *self
            .counters
            .links
            .entry(format!("{}->{}", from.to_string(), to.to_string()))
            .or_default() += 1;
    }

    fn enqueue(&mut self, at: Location, packet: u64, port: PortId, frame: EthernetFrame) {
        self.inboxes.entry(at).or_default().push_back(Item { packet, port, frame });
    }

    /// A frame arriving from the outside world on fabric port `port`.
    pub fn inject_fabric(&mut self, port: u16, frame: EthernetFrame, flow: Option<usize>) -> Result<u64, EngineError> {
        if port >= self.plan.nic.fabric_ports() {
            return Err(EngineError::UnknownFabricPort(port));
        }
        let p = self.new_packet(flow, Location::Fabric);
        let port = PortId::Fabric(port);
        self.event(p, Location::Fabric, Direction::Tx, port, &frame);
        self.link("external", port);
        self.enqueue(Location::Nic, p, port, frame);
        Ok(p)
    }

    /// A raw frame put on the wire by tenant VM `vm`, bypassing its network
    /// stack. This is how attacker traffic enters.
    pub fn inject_tenant(&mut self, vm: u32, frame: EthernetFrame, flow: Option<usize>) -> Result<u64, EngineError> {
        if self.plan.vm(vm).is_none() {
            return Err(EngineError::UnknownVm(vm));
        }
        let p = self.new_packet(flow, Location::Tenant(vm));
        self.tenant_tx(p, vm, frame);
        Ok(p)
    }

    /// Lets VM `vm` originate an IP packet through its own stack.
    pub fn send_from_vm(&mut self, vm: u32, dst_ip: Ipv4Addr, size: usize, flow: Option<usize>) -> Result<u64, EngineError> {
        let idx = self.vm_index(vm)?;
        let emission = self.plan.tenant_vms[idx].make_packet(dst_ip, size, true)?;
        let p = self.new_packet(flow, Location::Tenant(vm));
        let frame = match emission {
            Emission::Data(f) | Emission::ArpFirst(f) => f,
        };
        self.tenant_tx(p, vm, frame);
        Ok(p)
    }

    fn vm_index(&self, vm: u32) -> Result<usize, EngineError> {
        self.plan
            .tenant_vms
            .iter()
            .position(|v| v.id == vm)
            .ok_or(EngineError::UnknownVm(vm))
    }

    fn tenant_tx(&mut self, packet: u64, vm: u32, frame: EthernetFrame) {
        let port = self.plan.vm(vm).expect("checked by caller").vf;
        self.event(packet, Location::Tenant(vm), Direction::Tx, port, &frame);
        self.link(Location::Tenant(vm), port);
        match port {
            PortId::Vif(_) => {
                let vs = self.plan.vswitch_of_port(port).expect("segment has a vswitch").id;
                self.enqueue(Location::Vswitch(vs), packet, port, frame);
            }
            _ => self.enqueue(Location::Nic, packet, port, frame),
        }
    }

    pub fn is_quiescent(&self) -> bool {
        self.inboxes.values().all(VecDeque::is_empty)
    }

    /// Steps until no frame is in flight.
    pub fn run(&mut self) -> Result<(), EngineError> {
        let start = self.tick;
        while !self.is_quiescent() {
            if self.tick - start >= self.step_bound {
                return Err(EngineError::NonQuiescent(self.step_bound));
            }
            self.tick += 1;
            let inboxes = std::mem::take(&mut self.inboxes);
            for (loc, items) in inboxes {
                for item in items {
                    self.process(loc, item)?;
                }
            }
        }
        Ok(())
    }

    fn process(&mut self, loc: Location, item: Item) -> Result<(), EngineError> {
        match loc {
            Location::Fabric => {
                self.event(item.packet, loc, Direction::Rx, item.port, &item.frame);
                self.link(item.port, "external");
                self.deliver(item.packet, loc);
            }
            Location::Host => {
                self.event(item.packet, loc, Direction::Rx, item.port, &item.frame);
                self.deliver(item.packet, loc);
            }
            Location::Nic => self.process_nic(item)?,
            Location::Vswitch(id) => self.process_vswitch(id, item)?,
            Location::Tenant(id) => self.process_tenant(id, item)?,
        }
        Ok(())
    }

    fn process_nic(&mut self, item: Item) -> Result<(), EngineError> {
        let outcome = self.plan.nic.switch_frame(item.port, &item.frame)?;
        let out_ports: Vec<PortId> = outcome.deliveries.iter().map(|(p, _)| *p).collect();
        let ev = self.event(item.packet, Location::Nic, Direction::Switch, item.port, &item.frame);
        if let Some(v) = outcome.vlan.filter(|v| !v.is_untagged()) {
            ev.snapshot.vlan = Some(v);
        }
        ev.out_ports = out_ports;
        ev.drop = outcome.drops.first().map(|d| d.reason);
        for d in outcome.drops {
            self.drop(item.packet, d.port, d.reason);
        }
        for (port, frame) in outcome.deliveries {
            self.link(item.port, port);
            let target = match port {
                PortId::Fabric(_) => Location::Fabric,
                _ => match self.plan.nic.attached_to(port) {
                    Some(ComponentId::Host) => Location::Host,
                    Some(ComponentId::Vswitch(i)) => Location::Vswitch(i),
                    Some(ComponentId::TenantVm(i)) => Location::Tenant(i),
                    None => unreachable!("nic delivered to unattached {port}"),
                },
            };
            self.enqueue(target, item.packet, port, frame);
        }
        Ok(())
    }

    fn process_vswitch(&mut self, id: u32, item: Item) -> Result<(), EngineError> {
        self.event(item.packet, Location::Vswitch(id), Direction::Rx, item.port, &item.frame);
        let vs = self.plan.vswitch(id).expect("vswitch locations come from the plan");
        let out = vs.process_frame(item.port, &item.frame)?;
        if let Some(seq) = out.rule {
            *self.counters.rule_hits.entry(format!("vswitch:{id}/seq:{seq}")).or_default() += 1;
        }
        for d in out.drops {
            self.drop(item.packet, d.port, d.reason);
        }
        for (port, frame) in out.emitted {
            self.event(item.packet, Location::Vswitch(id), Direction::Tx, port, &frame);
            match port {
                PortId::Vif(_) => {
                    let targets: Vec<u32> = self
                        .plan
                        .tenant_vms
                        .iter()
                        .filter(|v| v.vf == port && (v.mac == frame.dst || frame.dst.is_broadcast()))
                        .map(|v| v.id)
                        .collect();
                    if targets.is_empty() {
                        self.drop(item.packet, port, DropReason::NoRoute);
                    }
                    for vm in targets {
                        self.link(port, Location::Tenant(vm));
                        self.enqueue(Location::Tenant(vm), item.packet, port, frame.clone());
                    }
                }
                _ => self.enqueue(Location::Nic, item.packet, port, frame),
            }
        }
        Ok(())
    }

    fn process_tenant(&mut self, id: u32, item: Item) -> Result<(), EngineError> {
        self.event(item.packet, Location::Tenant(id), Direction::Rx, item.port, &item.frame);
        let idx = self.vm_index(id)?;
        let outputs = self.plan.tenant_vms[idx].tenant_handle(&item.frame);
        if outputs.is_empty() {
            self.deliver(item.packet, Location::Tenant(id));
        }
        for frame in outputs {
            self.tenant_tx(item.packet, id, frame);
        }
        Ok(())
    }
}

/// VLAN a NIC event classified its frame into, if it was a tenant VLAN.
pub fn classified_vlan(ev: &TraceEvent) -> Option<VlanId> {
    (ev.location == Location::Nic).then_some(ev.snapshot.vlan).flatten()
}
