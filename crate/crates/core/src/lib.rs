//! Simulator for multi-tenant virtual switching over an SR-IOV NIC.

pub mod dataplane;
pub mod endpoints;
pub mod frames;
pub mod harness;
pub mod ids;
pub mod nic;
pub mod orchestrator;
pub mod secmodel;
