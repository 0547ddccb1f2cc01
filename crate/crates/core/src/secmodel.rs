//! Threat model: which components an attacker controls after compromising
//! one, and how many isolation mechanisms stand between tenant code and the
//! host kernel.
//!
//! The NIC switch and the hypervisor are trusted. NIC-mediated channels only
//! carry frames within a VLAN; they never extend a compromise by themselves.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::ExecContext;
use crate::frames::VlanId;
use crate::ids::{ComponentId, PortId};
use crate::orchestrator::{DeploymentPlan, Expectations};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SecError {
    #[error("no component {0} in this plan")]
    UnknownComponent(ComponentId),
    #[error("no tenant {0:?} in this plan")]
    UnknownTenant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    HostKernel,
    HostUser,
    NicSwitch,
    Vswitch(u32),
    Tenant(u32),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::HostKernel => f.write_str("host-kernel"),
            Node::HostUser => f.write_str("host-user"),
            Node::NicSwitch => f.write_str("nic-switch"),
            Node::Vswitch(i) => write!(f, "vswitch:{i}"),
            Node::Tenant(i) => write!(f, "vm:{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    NicMediated(VlanId),
    SoftwareDirect,
    /// Same protection domain: controlling one controls the other.
    CoResident,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: Node,
    pub b: Node,
    pub channel: Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    VmIsolation,
    UserKernelSeparation,
}

/// Mechanisms tenant code must defeat, after taking over a vswitch running
/// in `ctx`, to control the host kernel.
pub fn mechanisms_for(ctx: ExecContext) -> BTreeSet<Mechanism> {
    match ctx {
        ExecContext::HostKernel => BTreeSet::new(),
        ExecContext::HostUser => [Mechanism::UserKernelSeparation].into(),
        ExecContext::VmKernel => [Mechanism::VmIsolation].into(),
        ExecContext::VmUser => [Mechanism::VmIsolation, Mechanism::UserKernelSeparation].into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentGraph {
    pub vswitch_ctx: BTreeMap<u32, ExecContext>,
    pub tenant_of: BTreeMap<u32, String>,
    pub edges: Vec<Edge>,
}

impl ComponentGraph {
    /// Builds the graph from port attachments and execution contexts.
    pub fn derive(plan: &DeploymentPlan) -> Self {
        let mut g = ComponentGraph::default();
        for vs in &plan.vswitches {
            g.vswitch_ctx.insert(vs.id, vs.exec_ctx);
            match vs.exec_ctx {
                ExecContext::HostKernel => g.push(Node::Vswitch(vs.id), Node::HostKernel, Channel::CoResident),
                ExecContext::HostUser => g.push(Node::Vswitch(vs.id), Node::HostUser, Channel::CoResident),
                ExecContext::VmKernel | ExecContext::VmUser => {}
            }
        }
        for vm in &plan.tenant_vms {
            g.tenant_of.insert(vm.id, vm.tenant.clone());
            if let PortId::Vif(_) = vm.vf {
                if let Some(vs) = plan.vswitch_of_port(vm.vf) {
                    g.push(Node::Tenant(vm.id), Node::Vswitch(vs.id), Channel::SoftwareDirect);
                }
            }
        }
        for port in plan.nic.ports() {
            if let Some(owner) = plan.nic.attached_to(port) {
                g.push(node_of(owner), Node::NicSwitch, Channel::NicMediated(plan.nic.pvid(port)));
            }
        }
        g.edges.sort();
        g.edges.dedup();
        g
    }

    fn push(&mut self, a: Node, b: Node, channel: Channel) {
        self.edges.push(Edge { a, b, channel });
    }

    pub fn contains(&self, node: Node) -> bool {
        match node {
            Node::HostKernel | Node::HostUser | Node::NicSwitch => true,
            Node::Vswitch(i) => self.vswitch_ctx.contains_key(&i),
            Node::Tenant(i) => self.tenant_of.contains_key(&i),
        }
    }

    fn neighbors(&self, n: Node) -> impl Iterator<Item = (Node, Channel)> + '_ {
        self.edges.iter().filter_map(move |e| {
            if e.a == n {
                Some((e.b, e.channel))
            } else if e.b == n {
                Some((e.a, e.channel))
            } else {
                None
            }
        })
    }

    /// VLANs > 0 `n` is attached to through the NIC.
    fn tenant_vlans(&self, n: Node) -> BTreeSet<VlanId> {
        self.neighbors(n)
            .filter_map(|(_, c)| match c {
                Channel::NicMediated(v) if !v.is_untagged() => Some(v),
                _ => None,
            })
            .collect()
    }

    /// Nodes controlled once `start` is: the closure over co-residence.
    pub fn controlled(&self, start: Node) -> BTreeSet<Node> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for (m, c) in self.neighbors(n) {
                if c == Channel::CoResident && seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    }
}

pub fn node_of(c: ComponentId) -> Node {
    match c {
        ComponentId::Host => Node::HostKernel,
        ComponentId::Vswitch(i) => Node::Vswitch(i),
        ComponentId::TenantVm(i) => Node::Tenant(i),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompromiseReport {
    pub compromised: ComponentId,
    pub controlled: BTreeSet<Node>,
    pub reachable_tenants: BTreeSet<String>,
    pub host_reachable: bool,
    pub paths: Vec<String>,
}

impl CompromiseReport {
    pub fn render_table(&self) -> String {
        let tenants: Vec<&str> = self.reachable_tenants.iter().map(String::as_str).collect();
        let controlled: Vec<String> = self.controlled.iter().map(ToString::to_string).collect();
        let mut out = String::new();
        out.push_str(&format!("{:<20}{}\n", "compromised", self.compromised));
        out.push_str(&format!("{:<20}{}\n", "controlled", controlled.join(",")));
        out.push_str(&format!("{:<20}{}\n", "host_reachable", self.host_reachable));
        out.push_str(&format!("{:<20}{}\n", "reachable_tenants", tenants.join(",")));
        for p in &self.paths {
            out.push_str(&format!("  {p}\n"));
        }
        out
    }
}

/// Attacker reach after taking over `component` with the privileges of its
/// execution context.
pub fn compromise(plan: &DeploymentPlan, component: ComponentId) -> Result<CompromiseReport, SecError> {
    let g = &plan.graph;
    let start = node_of(component);
    if !g.contains(start) {
        return Err(SecError::UnknownComponent(component));
    }
    let controlled = g.controlled(start);
    let mut tenants = BTreeSet::new();
    let mut paths = Vec::new();
    for &n in &controlled {
        if n != start {
            paths.push(format!("{start} co-resident with {n}"));
        }
    }
    let host_reachable = controlled.contains(&Node::HostKernel) || controlled.contains(&Node::HostUser);
    if controlled.contains(&Node::HostKernel) {
        tenants.extend(g.tenant_of.values().cloned());
        paths.push("host-kernel controls every tenant VM".into());
    }
    for &n in &controlled {
        if let Node::Tenant(i) = n {
            tenants.insert(g.tenant_of[&i].clone());
        }
        for (m, c) in g.neighbors(n) {
            if let (Node::Tenant(i), Channel::SoftwareDirect) = (m, c) {
                tenants.insert(g.tenant_of[&i].clone());
                paths.push(format!("{n} software link to {m}"));
            }
        }
        for vlan in g.tenant_vlans(n) {
            for (&vm, tenant) in &g.tenant_of {
                if g.tenant_vlans(Node::Tenant(vm)).contains(&vlan) && tenants.insert(tenant.clone()) {
                    paths.push(format!("{n} shares vlan {vlan} with tenant {tenant}"));
                }
            }
        }
    }
    Ok(CompromiseReport {
        compromised: component,
        controlled,
        reachable_tenants: tenants,
        host_reachable,
        paths,
    })
}

/// Mechanisms that must all fail for code of `tenant`, attacking through
/// its vswitch, to control the host kernel.
pub fn security_mechanisms(plan: &DeploymentPlan, tenant: &str) -> Result<BTreeSet<Mechanism>, SecError> {
    let vs = plan
        .vswitch_of_tenant(tenant)
        .ok_or_else(|| SecError::UnknownTenant(tenant.to_owned()))?;
    Ok(mechanisms_for(vs.exec_ctx))
}

/// What a level promises: compartments never reach the host, a vswitch
/// reaches at most the tenants it serves, a tenant VM only its own tenant.
/// Baseline promises nothing.
pub fn default_expectations(plan: &DeploymentPlan, component: ComponentId) -> Expectations {
    if !plan.is_mts() {
        return Expectations::default();
    }
    match component {
        ComponentId::Host => Expectations::default(),
        ComponentId::Vswitch(i) => Expectations {
            host_reachable: Some(false),
            max_reachable_tenants: plan.vswitch(i).map(|v| v.gw_ports.len()),
        },
        ComponentId::TenantVm(_) => Expectations {
            host_reachable: Some(false),
            max_reachable_tenants: Some(1),
        },
    }
}

/// Human-readable list of violated expectations; empty when all hold.
pub fn check_expectations(report: &CompromiseReport, exp: &Expectations) -> Vec<String> {
    let mut breaches = Vec::new();
    if let Some(h) = exp.host_reachable {
        if h != report.host_reachable {
            breaches.push(format!("host_reachable is {} but expected {h}", report.host_reachable));
        }
    }
    if let Some(max) = exp.max_reachable_tenants {
        if report.reachable_tenants.len() > max {
            breaches.push(format!(
                "{} tenants reachable but at most {max} expected",
                report.reachable_tenants.len()
            ));
        }
    }
    breaches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{plan_deployment, DeploymentSpec, Grouping, SecurityLevel};

    fn plan(level: SecurityLevel, user: bool) -> DeploymentPlan {
        let mut s = DeploymentSpec::uniform(level, 4, 1);
        s.user_space = user;
        plan_deployment(&s).unwrap()
    }

    fn l2() -> SecurityLevel {
        SecurityLevel::Level2 {
            grouping: Grouping::PerTenant,
        }
    }

    fn all() -> BTreeSet<String> {
        (0..4).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn baseline_vswitch_owns_everything() {
        let r = compromise(&plan(SecurityLevel::Baseline, false), ComponentId::Vswitch(0)).unwrap();
        assert!(r.host_reachable);
        assert_eq!(r.reachable_tenants, all());
    }

    #[test]
    fn level1_vswitch_reaches_tenants_not_host() {
        let r = compromise(&plan(SecurityLevel::Level1, false), ComponentId::Vswitch(0)).unwrap();
        assert!(!r.host_reachable);
        assert_eq!(r.reachable_tenants, all());
    }

    #[test]
    fn level2_vswitch_reaches_one_tenant() {
        let p = plan(l2(), false);
        for i in 0..4 {
            let r = compromise(&p, ComponentId::Vswitch(i)).unwrap();
            assert!(!r.host_reachable);
            assert_eq!(r.reachable_tenants, BTreeSet::from([format!("t{i}")]));
            assert!(check_expectations(&r, &default_expectations(&p, ComponentId::Vswitch(i))).is_empty());
        }
    }

    #[test]
    fn tenant_vm_reaches_own_tenant() {
        for p in [plan(SecurityLevel::Baseline, false), plan(SecurityLevel::Level1, false), plan(l2(), false)] {
            let r = compromise(&p, ComponentId::TenantVm(2)).unwrap();
            assert!(!r.host_reachable);
            assert_eq!(r.reachable_tenants, BTreeSet::from(["t2".to_string()]));
        }
    }

    #[test]
    fn unknown_component() {
        let p = plan(l2(), false);
        assert_eq!(
            compromise(&p, ComponentId::Vswitch(9)),
            Err(SecError::UnknownComponent(ComponentId::Vswitch(9)))
        );
        assert_eq!(
            security_mechanisms(&p, "nobody"),
            Err(SecError::UnknownTenant("nobody".into()))
        );
    }

    #[test]
    fn mechanism_counts() {
        let n = |level: SecurityLevel, user: bool| security_mechanisms(&plan(level, user), "t0").unwrap();
        assert!(n(SecurityLevel::Baseline, false).is_empty());
        assert_eq!(n(SecurityLevel::Baseline, true), BTreeSet::from([Mechanism::UserKernelSeparation]));
        assert_eq!(n(SecurityLevel::Level1, false), BTreeSet::from([Mechanism::VmIsolation]));
        assert_eq!(n(l2(), false), BTreeSet::from([Mechanism::VmIsolation]));
        assert_eq!(n(SecurityLevel::Level1, true).len(), 2);
        assert_eq!(n(l2(), true).len(), 2);
    }

    #[test]
    fn mts_has_no_software_path_to_host() {
        for p in [plan(SecurityLevel::Level1, false), plan(l2(), true)] {
            assert!(!p
                .graph
                .edges
                .iter()
                .any(|e| e.channel == Channel::SoftwareDirect || e.channel == Channel::CoResident));
        }
    }

    #[test]
    fn expectation_breach_reported() {
        let p = plan(SecurityLevel::Baseline, false);
        let r = compromise(&p, ComponentId::Vswitch(0)).unwrap();
        assert!(check_expectations(&r, &default_expectations(&p, ComponentId::Vswitch(0))).is_empty());
        let strict = Expectations {
            host_reachable: Some(false),
            max_reachable_tenants: Some(1),
        };
        assert_eq!(check_expectations(&r, &strict).len(), 2);
    }
}
