//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use common::{level2, plan};
use mts_core::endpoints::TEST_PROTOCOL;
use mts_core::frames::{
    vxlan_encap, EthernetFrame, Ipv4Body, Ipv4Packet, MacAddress, Payload, Underlay, VlanId, VXLAN_OVERHEAD,
};
use mts_core::harness::fuzz::{check_event, verify_isolation, without_spoof_check, FuzzConfig, ViolationKind};
use mts_core::harness::golden::golden_chain_check;
use mts_core::harness::scenario::{run_exchange, run_scenario, Scenario, ScenarioKind};
use mts_core::harness::Engine;
use mts_core::ids::ComponentId;
use mts_core::nic::DropReason;
use mts_core::orchestrator::{
    account_resources, count_vfs, plan_deployment, DeploymentSpec, Grouping, OrchestratorError, ResourceMode,
    SecurityLevel,
};
use mts_core::secmodel::{compromise, security_mechanisms};

fn spec(level: SecurityLevel, tenants: usize) -> DeploymentSpec {
    DeploymentSpec::uniform(level, tenants, 1)
}

fn vf_formulas() -> Result<String> {
    let got: Vec<usize> = [
        (SecurityLevel::Level1, 1),
        (SecurityLevel::Level1, 4),
        (level2(), 2),
        (level2(), 4),
    ]
    .into_iter()
    .map(|(l, n)| count_vfs(&spec(l, n)))
    .collect::<Result<_, _>>()?;
    ensure!(got == [3, 9, 6, 12], "counts {got:?}");
    ensure!(plan_deployment(&spec(SecurityLevel::Level1, 31)).is_ok(), "63 VFs must fit");
    let err = plan_deployment(&spec(SecurityLevel::Level1, 32)).unwrap_err();
    ensure!(
        err == OrchestratorError::VfExhaustion { needed: 65, capacity: 64 },
        "expected exhaustion at 65, got {err}"
    );
    Ok(format!("counts {got:?}, 65 VFs on one PF rejected"))
}

fn golden_chains() -> Result<String> {
    let mut n = 0;
    for tenants in 1..=4 {
        for vms in 1..=2 {
            let zones = Grouping::Zones((0..tenants).map(|i| vec![format!("t{i}")]).collect());
            for level in [SecurityLevel::Level1, level2(), SecurityLevel::Level2 { grouping: zones }] {
                let r = golden_chain_check(&plan(level.clone(), tenants, vms))?;
                ensure!(r.passed, "{level:?} x{tenants}: {}", r.divergence.unwrap());
                ensure!(r.steps_matched == 10 && r.events_checked == 12, "{r:?}");
                n += 1;
            }
        }
    }
    let mut bad = plan(level2(), 2, 1);
    let wrong = bad.gateway_macs["t1"];
    let vm = &mut bad.tenant_vms[0];
    vm.static_arp.insert(vm.gateway_ip, wrong);
    let r = golden_chain_check(&bad)?;
    ensure!(!r.passed && r.divergence.as_ref().map(|d| d.step) == Some(7), "mutated plan: {r:?}");
    Ok(format!("{n} plans match steps 1-10; mutated ARP diverges at step 7"))
}

fn isolation_fuzz() -> Result<String> {
    let p = plan(level2(), 4, 1);
    let cfg = FuzzConfig { frames_per_vf: 10_000, seed: 7 };
    let r = verify_isolation(&p, cfg)?;
    ensure!(r.frames == 40_000, "frames {}", r.frames);
    ensure!(r.clean(), "violations {:?}", r.violations_by_kind);
    ensure!(r.delivered + r.drops_by_reason.values().sum::<u64>() == r.frames, "accounting");

    let faulty = without_spoof_check(&p);
    let f = verify_isolation(&faulty, cfg)?;
    let spoofed = f.violations_by_kind.get("SpoofedDelivery").copied().unwrap_or(0);
    ensure!(spoofed >= 1, "fault not flagged: {:?}", f.violations_by_kind);

    // crafted frame: tenant VM claims its gateway port's MAC
    let crafted = |plan| -> Result<(Vec<ViolationKind>, Option<DropReason>)> {
        let mut e = Engine::new(plan);
        let vm = e.plan().tenant_vms[0].clone();
        let frame = EthernetFrame {
            dst: MacAddress::BROADCAST,
            src: e.plan().gateway_macs[&vm.tenant],
            vlan: None,
            payload: Payload::Opaque { ethertype: 0x88b5, bytes: vec![0; 8] },
        };
        let pkt = e.inject_tenant(vm.id, frame, None)?;
        e.run()?;
        let kinds = e.trace().iter().flat_map(|ev| check_event(e.plan(), vm.id, ev)).collect();
        Ok((kinds, e.packets()[pkt as usize].drops.first().map(|d| d.reason)))
    };
    let (ok_kinds, ok_drop) = crafted(p.clone())?;
    ensure!(ok_kinds.is_empty() && ok_drop == Some(DropReason::SpoofBlocked), "filtered: {ok_kinds:?} {ok_drop:?}");
    let (bad_kinds, _) = crafted(faulty)?;
    ensure!(bad_kinds.contains(&ViolationKind::SpoofedDelivery), "unfiltered: {bad_kinds:?}");
    Ok(format!("40000 frames, 0 violations; without spoof check {spoofed} flagged"))
}

fn compromise_table() -> Result<String> {
    let all: BTreeSet<String> = ["t0", "t1", "t2", "t3"].map(String::from).into();
    let base = compromise(&plan(SecurityLevel::Baseline, 4, 1), ComponentId::Vswitch(0))?;
    ensure!(base.host_reachable && base.reachable_tenants == all, "baseline {base:?}");
    let l1 = compromise(&plan(SecurityLevel::Level1, 4, 1), ComponentId::Vswitch(0))?;
    ensure!(!l1.host_reachable && l1.reachable_tenants == all, "level1 {l1:?}");
    let p2 = plan(level2(), 4, 1);
    for i in 0..4u32 {
        let r = compromise(&p2, ComponentId::Vswitch(i))?;
        let want: BTreeSet<String> = [format!("t{i}")].into();
        ensure!(!r.host_reachable && r.reachable_tenants == want, "level2 vswitch {i}: {r:?}");
    }
    Ok("baseline host+4, level1 4 no host, level2 exactly 1 no host".into())
}

fn boundary_counting() -> Result<String> {
    let mut rows = Vec::new();
    for (level, user) in [
        (SecurityLevel::Baseline, false),
        (SecurityLevel::Baseline, true),
        (SecurityLevel::Level1, false),
        (level2(), false),
        (SecurityLevel::Level1, true),
        (level2(), true),
    ] {
        let mut s = spec(level, 2);
        s.user_space = user;
        let p = plan_deployment(&s)?;
        rows.push(security_mechanisms(&p, "t0")?.len());
    }
    ensure!(rows == [0, 1, 1, 1, 2, 2], "mechanism counts {rows:?}");
    Ok(format!("{rows:?}"))
}

fn resource_accounting() -> Result<String> {
    let l1 = account_resources(&spec(SecurityLevel::Level1, 4))?;
    let base = account_resources(&spec(SecurityLevel::Baseline, 4))?;
    ensure!(l1.total_cores - base.total_cores == 1, "isolated delta {} - {}", l1.total_cores, base.total_cores);

    let mut shared_rows = Vec::new();
    for c in [1usize, 2, 4] {
        let mut s = spec(level2(), c);
        s.mode = ResourceMode::Shared;
        let a = account_resources(&s)?;
        ensure!(a.compartments == c as u32 && a.vswitch_cores == 1, "shared {c}: {a:?}");
        ensure!(a.vswitch_ram_gb == 4 * c as u32, "ram {c}: {}", a.vswitch_ram_gb);
        shared_rows.push(a.vswitch_ram_gb);
    }

    for c in [1u32, 2, 4] {
        let mut mts = spec(level2(), c as usize);
        mts.user_space = true;
        let mut b = spec(SecurityLevel::Baseline, c as usize);
        b.compare_compartments = c;
        b.mode = ResourceMode::Shared;
        let kernel = account_resources(&b)?;
        b.user_space = true;
        let user = account_resources(&b)?;
        let m = account_resources(&mts)?;
        ensure!(user.vswitch_cores - kernel.vswitch_cores == c, "baseline user adds {}", user.vswitch_cores - kernel.vswitch_cores);
        ensure!(m.vswitch_cores == c && m.total_cores == user.total_cores, "user-space mts {m:?} vs {user:?}");
    }
    Ok(format!("isolated delta 1, shared cores 1 with ram {shared_rows:?}, user space 1 core/compartment"))
}

fn p2v_traversals(p: &mts_core::orchestrator::DeploymentPlan) -> Result<(f64, u32, u32)> {
    let r = run_scenario(p, &Scenario::standard(p, ScenarioKind::P2v, 10, 64, 1)?)?;
    let s = r.metrics.flows[0].nic_traversals.expect("delivered");
    Ok((s.mean, s.min, s.max))
}

fn hop_deltas() -> Result<String> {
    let base = plan(SecurityLevel::Baseline, 2, 2);
    let l1 = plan(SecurityLevel::Level1, 2, 2);
    let l2 = plan(level2(), 2, 2);
    let (b, bmin, bmax) = p2v_traversals(&base)?;
    for (name, p) in [("level1", &l1), ("level2", &l2)] {
        let (m, mmin, mmax) = p2v_traversals(p)?;
        ensure!(bmin == bmax && mmin == mmax && mmin - bmin == 2, "{name} p2v {m} vs baseline {b}");
    }

    let exch = |p| -> Result<u32> {
        let s = run_exchange(p, 0, 1, 10, 64)?.metrics.flows[0].nic_traversals.expect("delivered");
        ensure!(s.min == s.max, "uneven exchange");
        Ok(s.min)
    };
    let (eb, em) = (exch(&base)?, exch(&l1)?);
    ensure!(em - eb == 4, "exchange {em} vs {eb}");

    let mut orders = Vec::new();
    for p in [&base, &l1, &l2] {
        let hops: Vec<f64> = [ScenarioKind::P2p, ScenarioKind::P2v, ScenarioKind::V2v]
            .into_iter()
            .map(|k| {
                let r = run_scenario(p, &Scenario::standard(p, k, 5, 64, 1)?)?;
                Ok(r.metrics.flows[0].hops.expect("delivered").mean)
            })
            .collect::<Result<_>>()?;
        ensure!(hops[0] < hops[1] && hops[1] < hops[2], "hops {hops:?}");
        orders.push(hops);
    }
    Ok(format!("p2v +2, tenant exchange +4, hops {orders:?}"))
}

fn determinism_conservation() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let kinds = [ScenarioKind::P2p, ScenarioKind::P2v, ScenarioKind::V2v];
    let mut packets = 0;
    for run in 0..100 {
        let level = match rng.gen_range(0..3) {
            0 => SecurityLevel::Baseline,
            1 => SecurityLevel::Level1,
            _ => level2(),
        };
        let tenants = rng.gen_range(1..=4);
        let vms = rng.gen_range(2..=3);
        let p = plan(level, tenants, vms);
        let sc = Scenario::standard(&p, *kinds.choose(&mut rng).unwrap(), rng.gen_range(1..=20), rng.gen_range(34..=256), rng.gen())?;
        let a = run_scenario(&p, &sc)?;
        let b = run_scenario(&p, &sc)?;
        ensure!(a.trace_jsonl() == b.trace_jsonl(), "run {run}: traces differ");
        ensure!(a.metrics.to_json() == b.metrics.to_json(), "run {run}: metrics differ");
        ensure!(a.metrics.conserved(), "run {run}: not conserved");
        packets += a.metrics.injected();
    }
    Ok(format!("100 runs, {packets} packets, identical and conserved"))
}

fn wire_format() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..1000 {
        let f = common::random_frame(&mut rng);
        let bytes = f.serialize();
        ensure!(bytes.len() == f.wire_len(), "frame {i} length");
        ensure!(EthernetFrame::parse(&bytes)? == f, "frame {i} round trip");
        let outer = vxlan_encap(&f, rng.gen_range(0..1 << 24), &underlay())?;
        ensure!(outer.serialize().len() == bytes.len() + VXLAN_OVERHEAD, "frame {i} encap length");
    }

    let inner = EthernetFrame {
        dst: MacAddress([2, 0, 0, 0, 0, 0x0b]),
        src: MacAddress([2, 0, 0, 0, 0, 0x0a]),
        vlan: Some(VlanId::new(100)?),
        payload: Payload::Ipv4(Ipv4Packet {
            src: "10.0.0.1".parse()?,
            dst: "10.0.0.2".parse()?,
            protocol: TEST_PROTOCOL,
            body: Ipv4Body::Opaque(vec![0xde, 0xad, 0xbe, 0xef]),
        }),
    };
    let inner_hex = concat!(
        "02000000000b", "02000000000a", "8100", "0064", "0800",
        "4500", "0018", "00000000", "40", "fd", "0000", "0a000001", "0a000002",
        "deadbeef",
    );
    let outer_hex = concat!(
        "020000000002", "020000000001", "0800",
        "4500", "004e", "00000000", "40", "11", "0000", "c0000201", "c0000202",
        "c000", "12b5", "003a", "0000",
        "08000000", "001388", "00",
    );
    ensure!(inner.to_hex() == inner_hex, "inner dump {}", inner.to_hex());
    let outer = vxlan_encap(&inner, 5000, &underlay())?;
    ensure!(outer.to_hex() == format!("{outer_hex}{inner_hex}"), "outer dump {}", outer.to_hex());
    ensure!(EthernetFrame::from_hex(&outer.to_hex())? == outer, "outer reparse");
    Ok("1000 frames round trip; encap +50 bytes; hex dumps match".into())
}

fn underlay() -> Underlay {
    Underlay {
        src_mac: MacAddress([2, 0, 0, 0, 0, 1]),
        dst_mac: MacAddress([2, 0, 0, 0, 0, 2]),
        src_ip: "192.0.2.1".parse().unwrap(),
        dst_ip: "192.0.2.2".parse().unwrap(),
    }
}

type Check = fn() -> Result<String>;

fn main() -> ExitCode {
    let criteria: [(&str, Check, Option<u64>); 9] = [
        ("vf count formulas", vf_formulas, Some(1)),
        ("golden forwarding chains", golden_chains, Some(1)),
        ("isolation fuzz", isolation_fuzz, Some(30)),
        ("compromise table", compromise_table, None),
        ("boundary counting", boundary_counting, None),
        ("resource accounting", resource_accounting, None),
        ("hop-count deltas", hop_deltas, Some(5)),
        ("determinism and conservation", determinism_conservation, None),
        ("wire format", wire_format, Some(1)),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(s)) if took > Duration::from_secs(s) => Err(anyhow::anyhow!("took {took:?}, limit {s}s")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{} ms]", i + 1, took.as_millis()),
            Err(e) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {e:#} [{} ms]", i + 1, took.as_millis());
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
