use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DcId(pub u16);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Edge,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub vcpu: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatacenterSpec {
    pub name: String,
    pub tier: Tier,
    pub nodes: Vec<NodeSpec>,
    /// Probability that a replica host in this datacenter is operational.
    pub stability: f64,
}

/// One-way latency between two datacenters (or within one when `a == b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEntry {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
}

/// Topology file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub datacenters: Vec<DatacenterSpec>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
    /// Latency inside a datacenter when no self-link is listed.
    #[serde(default = "default_intra_latency")]
    pub intra_dc_latency_ms: f64,
}

fn default_intra_latency() -> f64 {
    1.0
}

/// Validated cluster layout with dense node and datacenter ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    datacenters: Vec<DatacenterSpec>,
    node_names: Vec<String>,
    node_dc: Vec<DcId>,
    node_vcpu: Vec<u32>,
    /// One-way delay in whole milliseconds, indexed by datacenter pair.
    delay_ms: Vec<Vec<u64>>,
    file: TopologyFile,
}

impl Topology {
    pub fn from_file(file: TopologyFile) -> Result<Self, SimError> {
        let err = |m: String| Err(SimError::Topology(m));
        if file.datacenters.is_empty() {
            return err("no datacenters".into());
        }
        let mut node_names = Vec::new();
        let mut node_dc = Vec::new();
        let mut node_vcpu = Vec::new();
        for (i, dc) in file.datacenters.iter().enumerate() {
            if file.datacenters[..i].iter().any(|d| d.name == dc.name) {
                return err(format!("datacenter `{}` listed twice", dc.name));
            }
            if dc.nodes.is_empty() {
                return err(format!("datacenter `{}` has no nodes", dc.name));
            }
            if !(dc.stability > 0.0 && dc.stability < 1.0) {
                return err(format!(
                    "datacenter `{}` stability must be in (0,1)",
                    dc.name
                ));
            }
            for n in &dc.nodes {
                if n.vcpu == 0 {
                    return err(format!("node `{}` has zero vcpu", n.id));
                }
                if node_names.contains(&n.id) {
                    return err(format!("node `{}` listed twice", n.id));
                }
                node_names.push(n.id.clone());
                node_dc.push(DcId(i as u16));
                node_vcpu.push(n.vcpu);
            }
        }
        let index = |name: &str| file.datacenters.iter().position(|d| d.name == name);
        let n = file.datacenters.len();
        let mut latency: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for link in &file.links {
            let (Some(a), Some(b)) = (index(&link.a), index(&link.b)) else {
                return err(format!(
                    "link {}–{} names an unknown datacenter",
                    link.a, link.b
                ));
            };
            if !(link.latency_ms >= 0.0) {
                return err(format!("link {}–{} has negative latency", link.a, link.b));
            }
            for key in [(a, b), (b, a)] {
                match latency.get(&key) {
                    Some(&l) if l != link.latency_ms => {
                        return err(format!("link {}–{} is asymmetric", link.a, link.b))
                    }
                    _ => {
                        latency.insert(key, link.latency_ms);
                    }
                }
            }
        }
        let mut delay_ms = vec![vec![0u64; n]; n];
        for (a, row) in delay_ms.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                let l = match latency.get(&(a, b)) {
                    Some(&l) => l,
                    None if a == b => file.intra_dc_latency_ms,
                    None => {
                        return err(format!(
                            "no link between `{}` and `{}`",
                            file.datacenters[a].name, file.datacenters[b].name
                        ))
                    }
                };
                // Half-millisecond latencies (e.g. a 33 ms round trip) round up.
                *cell = l.ceil() as u64;
            }
        }
        Ok(Self {
            datacenters: file.datacenters.clone(),
            node_names,
            node_dc,
            node_vcpu,
            delay_ms,
            file,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: TopologyFile =
            serde_json::from_str(text).map_err(|e| SimError::Topology(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn file(&self) -> &TopologyFile {
        &self.file
    }

    pub fn datacenters(&self) -> &[DatacenterSpec] {
        &self.datacenters
    }

    pub fn dc(&self, id: DcId) -> &DatacenterSpec {
        &self.datacenters[id.0 as usize]
    }

    pub fn dc_id(&self, name: &str) -> Option<DcId> {
        self.datacenters
            .iter()
            .position(|d| d.name == name)
            .map(|i| DcId(i as u16))
    }

    pub fn dc_ids(&self) -> impl Iterator<Item = DcId> {
        (0..self.datacenters.len() as u16).map(DcId)
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_names.len() as u32).map(NodeId)
    }

    pub fn nodes_in(&self, dc: DcId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes()
            .filter(move |n| self.node_dc[n.0 as usize] == dc)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_names
            .iter()
            .position(|n| n == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        &self.node_names[node.0 as usize]
    }

    pub fn dc_of(&self, node: NodeId) -> DcId {
        self.node_dc[node.0 as usize]
    }

    pub fn vcpu(&self, node: NodeId) -> u32 {
        self.node_vcpu[node.0 as usize]
    }

    pub fn total_vcpu(&self) -> u64 {
        self.node_vcpu.iter().map(|&v| v as u64).sum()
    }

    /// One-way delay between two nodes; zero for loopback.
    pub fn delay(&self, src: NodeId, dst: NodeId) -> u64 {
        if src == dst {
            return 0;
        }
        self.delay_ms[self.dc_of(src).0 as usize][self.dc_of(dst).0 as usize]
    }

    /// One edge datacenter and one cloud datacenter, 33 ms round trip between
    /// them, three nodes each.
    pub fn edge_cloud() -> Self {
        Self::from_file(preset(
            &[("edge-1", Tier::Edge), ("cloud-1", Tier::Cloud)],
            3,
            16.5,
        ))
        .expect("preset is valid")
    }

    /// One edge and two cloud datacenters.
    pub fn edge_two_clouds() -> Self {
        let mut file = preset(
            &[
                ("edge-1", Tier::Edge),
                ("cloud-1", Tier::Cloud),
                ("cloud-2", Tier::Cloud),
            ],
            3,
            16.5,
        );
        for l in file.links.iter_mut() {
            if l.a.starts_with("cloud") && l.b.starts_with("cloud") && l.a != l.b {
                l.latency_ms = 5.0;
            }
        }
        Self::from_file(file).expect("preset is valid")
    }
}

fn preset(dcs: &[(&str, Tier)], nodes_per_dc: usize, inter_ms: f64) -> TopologyFile {
    let datacenters = dcs
        .iter()
        .map(|(name, tier)| DatacenterSpec {
            name: name.to_string(),
            tier: *tier,
            nodes: (0..nodes_per_dc)
                .map(|i| NodeSpec {
                    id: format!("{name}/n{i}"),
                    vcpu: 16,
                })
                .collect(),
            stability: 0.9436,
        })
        .collect();
    let mut links = Vec::new();
    for (i, (a, _)) in dcs.iter().enumerate() {
        for (b, _) in &dcs[i + 1..] {
            links.push(LinkEntry {
                a: a.to_string(),
                b: b.to_string(),
                latency_ms: inter_ms,
            });
        }
    }
    TopologyFile {
        datacenters,
        links,
        intra_dc_latency_ms: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        let t = Topology::edge_cloud();
        assert_eq!(t.node_count(), 6);
        let edge = t.node_id("edge-1/n0").unwrap();
        let cloud = t.node_id("cloud-1/n0").unwrap();
        assert_eq!(t.delay(edge, cloud), 17);
        assert_eq!(t.delay(edge, t.node_id("edge-1/n1").unwrap()), 1);
        assert_eq!(t.delay(edge, edge), 0);
        let t3 = Topology::edge_two_clouds();
        assert_eq!(t3.datacenters().len(), 3);
        let c1 = t3.node_id("cloud-1/n0").unwrap();
        let c2 = t3.node_id("cloud-2/n0").unwrap();
        assert!(t3.delay(c1, c2) < t3.delay(c1, t3.node_id("edge-1/n0").unwrap()));
    }

    #[test]
    fn rejects_bad_files() {
        let mut f = Topology::edge_cloud().file().clone();
        f.datacenters[0].nodes.clear();
        assert!(Topology::from_file(f).is_err());

        let mut f = Topology::edge_cloud().file().clone();
        f.datacenters[0].stability = 1.0;
        assert!(Topology::from_file(f).is_err());

        let mut f = Topology::edge_cloud().file().clone();
        f.links.push(LinkEntry {
            a: "cloud-1".into(),
            b: "edge-1".into(),
            latency_ms: 3.0,
        });
        assert!(Topology::from_file(f).is_err(), "asymmetric link");

        let mut f = Topology::edge_cloud().file().clone();
        f.links.clear();
        assert!(Topology::from_file(f).is_err(), "missing link");
    }

    #[test]
    fn json_round_trip() {
        let t = Topology::edge_two_clouds();
        let text = serde_json::to_string(t.file()).unwrap();
        assert_eq!(Topology::from_json(&text).unwrap(), t);
    }
}
