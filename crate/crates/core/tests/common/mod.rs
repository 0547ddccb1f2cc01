#![allow(dead_code)]

use std::net::Ipv4Addr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use mts_core::endpoints::TEST_PROTOCOL;
use mts_core::frames::{
    ArpMessage, ArpOp, EthernetFrame, Ipv4Body, Ipv4Packet, MacAddress, Payload, VlanId, Vni, VxlanEnvelope, IPPROTO_UDP,
};
use mts_core::orchestrator::{plan_deployment, DeploymentPlan, DeploymentSpec, Grouping, SecurityLevel};

pub fn level2() -> SecurityLevel {
    SecurityLevel::Level2 { grouping: Grouping::PerTenant }
}

pub fn plan(level: SecurityLevel, tenants: usize, vms: u32) -> DeploymentPlan {
    plan_deployment(&DeploymentSpec::uniform(level, tenants, vms)).expect("uniform specs plan")
}

fn mac(rng: &mut ChaCha8Rng) -> MacAddress {
    MacAddress(rng.gen())
}

fn ip(rng: &mut ChaCha8Rng) -> Ipv4Addr {
    Ipv4Addr::from(rng.gen::<u32>())
}

fn bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen()).collect()
}

fn vlan(rng: &mut ChaCha8Rng) -> Option<VlanId> {
    rng.gen_bool(0.3).then(|| VlanId::new(rng.gen_range(1..=VlanId::MAX)).unwrap())
}

fn ipv4(rng: &mut ChaCha8Rng, depth: u32) -> Ipv4Packet {
    if depth == 0 && rng.gen_bool(0.3) {
        Ipv4Packet {
            src: ip(rng),
            dst: ip(rng),
            protocol: IPPROTO_UDP,
            body: Ipv4Body::Vxlan(VxlanEnvelope {
                vni: Vni::new(rng.gen_range(0..Vni::LIMIT)).unwrap(),
                inner: Box::new(frame_at(rng, depth + 1)),
            }),
        }
    } else {
        Ipv4Packet {
            src: ip(rng),
            dst: ip(rng),
            protocol: TEST_PROTOCOL,
            body: Ipv4Body::Opaque(bytes(rng, 96)),
        }
    }
}

fn frame_at(rng: &mut ChaCha8Rng, depth: u32) -> EthernetFrame {
    let payload = match rng.gen_range(0..3) {
        0 => Payload::Ipv4(ipv4(rng, depth)),
        1 => Payload::Arp(ArpMessage {
            op: if rng.gen() { ArpOp::Request } else { ArpOp::Reply },
            sender_mac: mac(rng),
            sender_ip: ip(rng),
            target_mac: mac(rng),
            target_ip: ip(rng),
        }),
        _ => Payload::Opaque {
            ethertype: *[0x88b5, 0x86dd, 0x88cc, 0x0842].choose(rng).unwrap(),
            bytes: bytes(rng, 96),
        },
    };
    EthernetFrame {
        dst: mac(rng),
        src: mac(rng),
        vlan: vlan(rng),
        payload,
    }
}

/// Structurally valid random frame, possibly VXLAN with one inner frame.
pub fn random_frame(rng: &mut ChaCha8Rng) -> EthernetFrame {
    frame_at(rng, 0)
}
