//! Run metrics: per-flow delivery counts, drop reasons, NIC traversals and
//! hop counts. Traversal and hop counts stand in for latency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::Counters;
use super::trace::{Fate, PacketRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: u32,
    pub max: u32,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = u32>) -> Option<Self> {
        let v: Vec<u32> = values.into_iter().collect();
        let min = *v.iter().min()?;
        let max = *v.iter().max()?;
        let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        Some(Summary { min, max, mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow_id: usize,
    pub label: String,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub drops: BTreeMap<String, u64>,
    /// Over delivered packets only.
    pub nic_traversals: Option<Summary>,
    pub hops: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub flows: Vec<FlowMetrics>,
    pub drops_by_reason: BTreeMap<String, u64>,
    pub links: BTreeMap<String, u64>,
    pub rule_hits: BTreeMap<String, u64>,
}

impl Metrics {
    /// Aggregates finished packets by flow. `labels[i]` names flow `i`.
    pub fn collect(packets: &[PacketRecord], labels: &[String], counters: &Counters) -> Self {
        let mut flows: Vec<FlowMetrics> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| FlowMetrics {
                flow_id: i,
                label: l.clone(),
                injected: 0,
                delivered: 0,
                dropped: 0,
                drops: BTreeMap::new(),
                nic_traversals: None,
                hops: None,
            })
            .collect();
        let mut drops_by_reason = BTreeMap::new();
        let mut delivered: Vec<Vec<&PacketRecord>> = vec![Vec::new(); flows.len()];
        for p in packets {
            let fate = p.fate();
            if let Some(Fate::Dropped(r)) = fate {
                *drops_by_reason.entry(r.as_str().to_owned()).or_default() += 1;
            }
            let Some(f) = p.flow.filter(|&f| f < flows.len()) else { continue };
            let fm = &mut flows[f];
            fm.injected += 1;
            match fate {
                Some(Fate::Delivered(_)) => {
                    fm.delivered += 1;
                    delivered[f].push(p);
                }
                Some(Fate::Dropped(r)) => {
                    fm.dropped += 1;
                    *fm.drops.entry(r.as_str().to_owned()).or_default() += 1;
                }
                None => {}
            }
        }
        for (fm, ps) in flows.iter_mut().zip(&delivered) {
            fm.nic_traversals = Summary::of(ps.iter().map(|p| p.nic_traversals));
            fm.hops = Summary::of(ps.iter().map(|p| p.hops));
        }
        Metrics {
            flows,
            drops_by_reason,
            links: counters.links.clone(),
            rule_hits: counters.rule_hits.clone(),
        }
    }

    pub fn injected(&self) -> u64 {
        self.flows.iter().map(|f| f.injected).sum()
    }

    pub fn delivered(&self) -> u64 {
        self.flows.iter().map(|f| f.delivered).sum()
    }

    pub fn dropped(&self) -> u64 {
        self.flows.iter().map(|f| f.dropped).sum()
    }

    /// Every flow satisfies `injected == delivered + dropped`.
    pub fn conserved(&self) -> bool {
        self.flows.iter().all(|f| f.injected == f.delivered + f.dropped)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["flow_id", "injected", "delivered", "dropped", "drop_reason_breakdown", "nic_traversals_mean"])
            .expect("in-memory csv");
        for f in &self.flows {
            let breakdown: Vec<String> = f.drops.iter().map(|(r, n)| format!("{r}:{n}")).collect();
            let mean = f.nic_traversals.map(|s| format!("{:.3}", s.mean)).unwrap_or_default();
            w.write_record([
                f.flow_id.to_string(),
                f.injected.to_string(),
                f.delivered.to_string(),
                f.dropped.to_string(),
                breakdown.join(";"),
                mean,
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
