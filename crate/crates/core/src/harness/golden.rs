//! Golden forwarding check: one packet in from the fabric to a tenant VM and
//! one packet back out, compared event by event against the path a correct
//! compartmentalized deployment must take.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::endpoints::AppBehavior;
use crate::frames::{MacAddress, VlanId};
use crate::ids::PortId;
use crate::nic::DropReason;
use crate::orchestrator::DeploymentPlan;

use super::engine::Engine;
use super::scenario::{external_frame, DEFAULT_PACKET_SIZE, EXTERNAL_HOST_IP};
use super::trace::{Direction, Location, TraceEvent};
use super::HarnessError;

/// What one trace event must look like. `step` numbers the stage of the
/// path (1 to 10); a stage can span two events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedEvent {
    pub step: u8,
    pub location: Location,
    pub direction: Direction,
    pub port: PortId,
    pub out_ports: Vec<PortId>,
    pub dst: MacAddress,
    pub vlan: Option<VlanId>,
}

/// Trimmed view of an observed event, comparable with `ExpectedEvent`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub location: Location,
    pub direction: Direction,
    pub port: PortId,
    pub out_ports: Vec<PortId>,
    pub dst: MacAddress,
    pub vlan: Option<VlanId>,
    pub drop: Option<DropReason>,
}

impl From<&TraceEvent> for ObservedEvent {
    fn from(ev: &TraceEvent) -> Self {
        ObservedEvent {
            location: ev.location,
            direction: ev.direction,
            port: ev.port,
            out_ports: ev.out_ports.clone(),
            dst: ev.snapshot.dst,
            vlan: ev.snapshot.vlan,
            drop: ev.drop,
        }
    }
}

impl ExpectedEvent {
    fn matches(&self, o: &ObservedEvent) -> bool {
        self.location == o.location
            && self.direction == o.direction
            && self.port == o.port
            && self.out_ports == o.out_ports
            && self.dst == o.dst
            && self.vlan == o.vlan
            && o.drop.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u8,
    pub expected: Option<ExpectedEvent>,
    pub observed: Option<ObservedEvent>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: expected {:?}, observed {:?}", self.step, self.expected, self.observed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub passed: bool,
    /// Stages fully matched before the first divergence.
    pub steps_matched: u8,
    pub events_checked: usize,
    pub divergence: Option<Divergence>,
}

fn ev(step: u8, location: Location, direction: Direction, port: PortId, out: Vec<PortId>, dst: MacAddress, vlan: Option<VlanId>) -> ExpectedEvent {
    ExpectedEvent {
        step,
        location,
        direction,
        port,
        out_ports: out,
        dst,
        vlan,
    }
}

/// Expected ingress and egress events for the first VM of the first tenant.
pub fn expected_path(plan: &DeploymentPlan) -> Result<(Vec<ExpectedEvent>, Vec<ExpectedEvent>), HarnessError> {
    if !plan.is_mts() {
        return Err(HarnessError::NotApplicable("golden check needs a compartmentalized deployment".into()));
    }
    let tenant = &plan.spec.tenants[0].id;
    let vm = plan.vms_of(tenant).next().expect("tenants have VMs");
    let vs = plan.vswitch_of_tenant(tenant).expect("tenant has vswitch");
    let vlan = plan.vlan_map[tenant];
    let gw = vs.gw_ports[tenant];
    let entry = vs.inout_ports[0];
    let uplink = *vs.inout_ports.last().expect("vswitch has in/out ports");
    let mac = |p: PortId| plan.nic.port_mac(p).expect("plan ports have MACs");
    let fabric = |p: PortId| PortId::Fabric(plan.nic.vf(p).expect("in/out VF").pf);
    let (fin, fout) = (fabric(entry), fabric(uplink));
    let vs_loc = Location::Vswitch(vs.id);
    let vm_loc = Location::Tenant(vm.id);
    let first_hop = vm
        .static_arp
        .get(&vm.gateway_ip)
        .copied()
        .unwrap_or(plan.gateway_macs[tenant]);
    let ext = plan.spec.external_gw_mac;

    let ingress = vec![
        ev(1, Location::Fabric, Direction::Tx, fin, vec![], mac(entry), None),
        ev(2, Location::Nic, Direction::Switch, fin, vec![entry], mac(entry), None),
        ev(3, vs_loc, Direction::Rx, entry, vec![], mac(entry), None),
        ev(3, vs_loc, Direction::Tx, gw, vec![], vm.mac, None),
        ev(4, Location::Nic, Direction::Switch, gw, vec![vm.vf], vm.mac, Some(vlan)),
        ev(5, vm_loc, Direction::Rx, vm.vf, vec![], vm.mac, None),
    ];
    let egress = vec![
        ev(6, vm_loc, Direction::Tx, vm.vf, vec![], first_hop, None),
        ev(7, Location::Nic, Direction::Switch, vm.vf, vec![gw], first_hop, Some(vlan)),
        ev(8, vs_loc, Direction::Rx, gw, vec![], first_hop, None),
        ev(9, vs_loc, Direction::Tx, uplink, vec![], ext, None),
        ev(10, Location::Nic, Direction::Switch, uplink, vec![fout], ext, None),
        ev(10, Location::Fabric, Direction::Rx, fout, vec![], ext, None),
    ];
    Ok((ingress, egress))
}

/// Runs the two golden packets through `plan` and reports the first
/// divergence from the expected path, if any.
pub fn golden_chain_check(plan: &DeploymentPlan) -> Result<GoldenReport, HarnessError> {
    let (ingress, egress) = expected_path(plan)?;
    let mut p = plan.clone();
    for vm in &mut p.tenant_vms {
        vm.app = AppBehavior::Sink;
    }
    let tenant = p.spec.tenants[0].id.clone();
    let vm_id = p.vms_of(&tenant).next().expect("tenants have VMs").id;
    let gw_mac = p.gateway_macs[&tenant];
    if let Some(vm) = p.tenant_vms.iter_mut().find(|v| v.id == vm_id) {
        // without an entry the VM would ARP first
        vm.static_arp.entry(vm.gateway_ip).or_insert(gw_mac);
    }
    let vm = p.vm(vm_id).expect("exists").clone();
    let via = p.vswitch_of_tenant(&tenant).expect("tenant has vswitch").id;

    let mut engine = Engine::new(p);
    let (port, frame) = external_frame(engine.plan(), via, vm.ip, DEFAULT_PACKET_SIZE, 0);
    let pin = engine.inject_fabric(port, frame, Some(0))?;
    engine.run()?;
    let pout = engine.send_from_vm(vm_id, EXTERNAL_HOST_IP, DEFAULT_PACKET_SIZE, Some(1))?;
    engine.run()?;

    let observed = |pkt: u64| -> Vec<ObservedEvent> {
        engine.trace().iter().filter(|e| e.packet == pkt).map(ObservedEvent::from).collect()
    };
    let mut checked = 0;
    let mut matched_to = 0u8;
    for (expected, seen) in [(&ingress, observed(pin)), (&egress, observed(pout))] {
        for i in 0..expected.len().max(seen.len()) {
            let (e, o) = (expected.get(i), seen.get(i));
            checked += 1;
            match (e, o) {
                (Some(e), Some(o)) if e.matches(o) => {}
                _ => {
                    let step = e.map(|e| e.step).unwrap_or(matched_to + 1);
                    return Ok(GoldenReport {
                        passed: false,
                        steps_matched: step - 1,
                        events_checked: checked,
                        divergence: Some(Divergence {
                            step,
                            expected: e.cloned(),
                            observed: o.cloned(),
                        }),
                    });
                }
            }
            matched_to = e.expect("matched").step;
        }
    }
    Ok(GoldenReport {
        passed: true,
        steps_matched: matched_to,
        events_checked: checked,
        divergence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{plan_deployment, DeploymentSpec, Grouping, SecurityLevel};

    #[test]
    fn level1_follows_golden_path() {
        let plan = plan_deployment(&DeploymentSpec::uniform(SecurityLevel::Level1, 2, 2)).unwrap();
        let r = golden_chain_check(&plan).unwrap();
        assert!(r.passed, "{:?}", r.divergence);
        assert_eq!(r.steps_matched, 10);
        assert_eq!(r.events_checked, 12);
    }

    #[test]
    fn level2_follows_golden_path() {
        let spec = DeploymentSpec::uniform(SecurityLevel::Level2 { grouping: Grouping::PerTenant }, 3, 1);
        let r = golden_chain_check(&plan_deployment(&spec).unwrap()).unwrap();
        assert!(r.passed, "{:?}", r.divergence);
    }

    #[test]
    fn wrong_gateway_arp_diverges_at_step_7() {
        let spec = DeploymentSpec::uniform(SecurityLevel::Level2 { grouping: Grouping::PerTenant }, 2, 1);
        let mut plan = plan_deployment(&spec).unwrap();
        let other_gw = plan.gateway_macs["t1"];
        let vm = plan.tenant_vms.iter_mut().find(|v| v.tenant == "t0").unwrap();
        vm.static_arp.insert(vm.gateway_ip, other_gw);
        let r = golden_chain_check(&plan).unwrap();
        assert!(!r.passed);
        let d = r.divergence.unwrap();
        assert_eq!(d.step, 7);
        assert_eq!(r.steps_matched, 6);
        assert_eq!(d.observed.unwrap().drop, Some(DropReason::NoRoute));
    }

    #[test]
    fn baseline_not_applicable() {
        let plan = plan_deployment(&DeploymentSpec::uniform(SecurityLevel::Baseline, 2, 1)).unwrap();
        assert!(matches!(golden_chain_check(&plan), Err(HarnessError::NotApplicable(_))));
    }
}
