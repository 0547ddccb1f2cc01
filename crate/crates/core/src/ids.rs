//! Identifiers shared across the simulator: NIC ports and the components
//! attached to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse {kind} from {input:?}")]
pub struct IdParseError {
    kind: &'static str,
    input: String,
}

/// A port on the NIC switch, or a software interface on a host-resident
/// vswitch (`Vif`), which never appears on the NIC.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortId {
    Fabric(u16),
    Pf(u16),
    Vf(u16),
    Vif(u16),
}

impl PortId {
    pub fn is_vf(self) -> bool {
        matches!(self, PortId::Vf(_))
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortId::Fabric(i) => write!(f, "fabric{i}"),
            PortId::Pf(i) => write!(f, "pf{i}"),
            PortId::Vf(i) => write!(f, "vf{i}"),
            PortId::Vif(i) => write!(f, "vif{i}"),
        }
    }
}

impl fmt::Debug for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for PortId {
    type Err = IdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || IdParseError {
            kind: "port",
            input: s.to_owned(),
        };
        let split = s.find(|c: char| c.is_ascii_digit()).ok_or_else(err)?;
        let (kind, num) = s.split_at(split);
        let idx: u16 = num.parse().map_err(|_| err())?;
        match kind {
            "fabric" => Ok(PortId::Fabric(idx)),
            "pf" => Ok(PortId::Pf(idx)),
            "vf" => Ok(PortId::Vf(idx)),
            "vif" => Ok(PortId::Vif(idx)),
            _ => Err(err()),
        }
    }
}

impl Serialize for PortId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Something a port can be attached to.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentId {
    Host,
    Vswitch(u32),
    TenantVm(u32),
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Host => f.write_str("host"),
            ComponentId::Vswitch(i) => write!(f, "vswitch:{i}"),
            ComponentId::TenantVm(i) => write!(f, "vm:{i}"),
        }
    }
}

impl fmt::Debug for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for ComponentId {
    type Err = IdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || IdParseError {
            kind: "component",
            input: s.to_owned(),
        };
        if s == "host" {
            return Ok(ComponentId::Host);
        }
        let (kind, num) = s.split_once(':').ok_or_else(err)?;
        let idx: u32 = num.parse().map_err(|_| err())?;
        match kind {
            "vswitch" => Ok(ComponentId::Vswitch(idx)),
            "vm" => Ok(ComponentId::TenantVm(idx)),
            _ => Err(err()),
        }
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_forms_parse_back() {
        for p in [PortId::Fabric(0), PortId::Pf(1), PortId::Vf(63), PortId::Vif(2)] {
            assert_eq!(p.to_string().parse::<PortId>().unwrap(), p);
        }
        for c in [ComponentId::Host, ComponentId::Vswitch(3), ComponentId::TenantVm(0)] {
            assert_eq!(c.to_string().parse::<ComponentId>().unwrap(), c);
        }
        assert!("vf".parse::<PortId>().is_err());
        assert!("eth0".parse::<PortId>().is_err());
        assert!("vswitch".parse::<ComponentId>().is_err());
        assert!("router:1".parse::<ComponentId>().is_err());
    }
}
