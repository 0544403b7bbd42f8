//! Edge federation description: hosts grouped into LEIs, broker roles,
//! the three reference 16-node configurations, broker reassignment and
//! topology-graph construction for the model.
//!
//! Brokers connect to each other over WAN links modeled as a clique with
//! uniform latency (the public-cloud router in between is collapsed);
//! workers connect to their LEI broker over LAN.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub type HostId = usize;
pub type LeiId = usize;

pub const GB4: u64 = 4096;
pub const GB8: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub id: HostId,
    pub lei_id: LeiId,
    /// Work units executable per interval at full speed.
    pub cpu_capacity: f64,
    pub ram_mb: u64,
    pub swap_mb: u64,
    pub power_idle_w: f64,
    pub power_max_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeiSpec {
    pub id: LeiId,
    /// Broker at construction time; the live role is simulator state.
    pub initial_broker: HostId,
    pub hosts: Vec<HostId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub lan_gbps: f64,
    pub wan_gbps: f64,
    pub wan_latency_s: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { lan_gbps: 1.0, wan_gbps: 1.0, wan_latency_s: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub hosts: Vec<HostSpec>,
    pub leis: Vec<LeiSpec>,
    pub links: LinkParams,
}

fn host(id: HostId, lei_id: LeiId, ram_mb: u64) -> HostSpec {
    let (idle, max) = if ram_mb >= GB8 { (3.0, 8.0) } else { (2.5, 7.0) };
    HostSpec {
        id,
        lei_id,
        cpu_capacity: 1.0,
        ram_mb,
        swap_mb: ram_mb,
        power_idle_w: idle,
        power_max_w: max,
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hosts.is_empty() || self.leis.is_empty() {
            return Err(Error::contract("federation needs at least one host and one LEI"));
        }
        let mut seen = vec![false; self.hosts.len()];
        for (i, h) in self.hosts.iter().enumerate() {
            if h.id != i {
                return Err(Error::contract(format!("host ids must be dense, got {} at {i}", h.id)));
            }
            if h.cpu_capacity <= 0.0 || h.ram_mb == 0 {
                return Err(Error::contract(format!("host {} has non-positive capacity", h.id)));
            }
            if h.power_max_w < h.power_idle_w || h.power_idle_w < 0.0 {
                return Err(Error::contract(format!("host {} has invalid power range", h.id)));
            }
            if h.lei_id >= self.leis.len() {
                return Err(Error::contract(format!("host {} references unknown LEI", h.id)));
            }
        }
        for (li, lei) in self.leis.iter().enumerate() {
            if lei.id != li {
                return Err(Error::contract("LEI ids must be dense"));
            }
            if lei.hosts.is_empty() {
                return Err(Error::contract(format!("LEI {li} has no hosts")));
            }
            if !lei.hosts.contains(&lei.initial_broker) {
                return Err(Error::contract(format!("LEI {li} broker not among its hosts")));
            }
            for &h in &lei.hosts {
                if h >= self.hosts.len() || self.hosts[h].lei_id != li {
                    return Err(Error::contract(format!("LEI {li} host list inconsistent at {h}")));
                }
                if seen[h] {
                    return Err(Error::contract(format!("host {h} appears in two LEIs")));
                }
                seen[h] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::contract("some host belongs to no LEI"));
        }
        if self.links.lan_gbps <= 0.0 || self.links.wan_gbps <= 0.0 || self.links.wan_latency_s < 0.0
        {
            return Err(Error::contract("link parameters must be positive"));
        }
        Ok(())
    }

    pub fn n_hosts(&self) -> usize {
        self.hosts.len()
    }

    pub fn n_leis(&self) -> usize {
        self.leis.len()
    }

    /// Largest LEI size; the schedule one-hot width of the model.
    pub fn max_lei_size(&self) -> usize {
        self.leis.iter().map(|l| l.hosts.len()).max().unwrap_or(0)
    }

    /// Migration path time for `state_mb` of task state between hosts:
    /// transfer at link bandwidth plus propagation latency. Intra-LEI
    /// moves ride the LAN; cross-LEI moves ride the WAN.
    pub fn migration_time_s(&self, from: HostId, to: HostId, state_mb: f64, bw_scale: f64) -> f64 {
        let same_lei = self.hosts[from].lei_id == self.hosts[to].lei_id;
        let (gbps, latency) = if same_lei {
            (self.links.lan_gbps, 0.0)
        } else {
            (self.links.wan_gbps, self.links.wan_latency_s)
        };
        let effective = (gbps * bw_scale.clamp(0.01, 1.0)) * 125.0; // MB/s
        state_mb / effective + latency
    }
}

/// The three 16-host reference layouts.
///
/// 1. Sixteen single-host LEIs (every host its own broker).
/// 2. Four LEIs of four hosts: one all-4GB, one all-8GB, and two mixed
///    2+2 LEIs, one brokered by a 4GB host and one by an 8GB host.
/// 3. LEIs of sizes 2, 4, 4 and 8; the 8-host LEI is all 8GB, the rest
///    all 4GB.
pub fn build_config(which: u8) -> Result<FederationSpec> {
    let spec = match which {
        1 => {
            let hosts: Vec<HostSpec> = (0..16)
                .map(|i| host(i, i, if i < 8 { GB4 } else { GB8 }))
                .collect();
            let leis = (0..16)
                .map(|i| LeiSpec { id: i, initial_broker: i, hosts: vec![i] })
                .collect();
            FederationSpec { hosts, leis, links: LinkParams::default() }
        }
        2 => {
            let mut hosts = Vec::new();
            // LEI 0: all 4GB. LEI 1: all 8GB. LEI 2/3: two of each,
            // brokered by a 4GB and an 8GB host respectively.
            let rams = [
                [GB4, GB4, GB4, GB4],
                [GB8, GB8, GB8, GB8],
                [GB4, GB4, GB8, GB8],
                [GB8, GB8, GB4, GB4],
            ];
            for (lei, ram_row) in rams.iter().enumerate() {
                for (j, &ram) in ram_row.iter().enumerate() {
                    hosts.push(host(lei * 4 + j, lei, ram));
                }
            }
            let leis = (0..4)
                .map(|i| LeiSpec {
                    id: i,
                    initial_broker: i * 4,
                    hosts: (i * 4..i * 4 + 4).collect(),
                })
                .collect();
            FederationSpec { hosts, leis, links: LinkParams::default() }
        }
        3 => {
            let sizes = [2usize, 4, 4, 8];
            let mut hosts = Vec::new();
            let mut leis = Vec::new();
            let mut next = 0;
            for (lei, &size) in sizes.iter().enumerate() {
                let ram = if size == 8 { GB8 } else { GB4 };
                let ids: Vec<HostId> = (next..next + size).collect();
                for &id in &ids {
                    hosts.push(host(id, lei, ram));
                }
                leis.push(LeiSpec { id: lei, initial_broker: ids[0], hosts: ids });
                next += size;
            }
            FederationSpec { hosts, leis, links: LinkParams::default() }
        }
        other => return Err(Error::contract(format!("unknown reference config {other}"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// Outcome of a broker failure inside one LEI.
#[derive(Debug, Clone, PartialEq)]
pub enum BrokerReassignment {
    /// The given live worker takes over.
    Promoted(HostId),
    /// No live worker remains; the LEI is dead and its tasks must enter
    /// the global migration pool.
    LeiDead,
}

/// Pick the replacement broker among live workers: minimal CPU
/// utilization, ties broken by lowest host id.
pub fn reassign_broker(
    candidates: &[(HostId, f64)],
) -> BrokerReassignment {
    let mut best: Option<(HostId, f64)> = None;
    for &(id, util) in candidates {
        best = match best {
            None => Some((id, util)),
            Some((bid, bu)) => {
                if util < bu || (util == bu && id < bid) {
                    Some((id, util))
                } else {
                    Some((bid, bu))
                }
            }
        };
    }
    match best {
        Some((id, _)) => BrokerReassignment::Promoted(id),
        None => BrokerReassignment::LeiDead,
    }
}

/// Host graph handed to the model: per-host feature rows plus the two
/// relation channels (worker-broker stars, broker clique). The identity
/// channel is added inside the network.
#[derive(Debug, Clone)]
pub struct TopologyGraph {
    /// (H, n*k) per-host window slice.
    pub features: Tensor,
    /// Symmetric worker-broker adjacency, zero diagonal.
    pub adj_worker_broker: Tensor,
    /// Symmetric broker-broker adjacency, zero diagonal.
    pub adj_broker_broker: Tensor,
    pub lei_of: Vec<LeiId>,
    pub brokers: Vec<HostId>,
}

impl TopologyGraph {
    pub fn n_hosts(&self) -> usize {
        self.lei_of.len()
    }

    pub fn edge_counts(&self) -> (usize, usize) {
        let count = |t: &Tensor| {
            let mut edges = 0;
            for i in 0..t.rows() {
                for j in (i + 1)..t.cols() {
                    if t.get2(i, j) > 0.0 {
                        edges += 1;
                    }
                }
            }
            edges
        };
        (count(&self.adj_worker_broker), count(&self.adj_broker_broker))
    }
}

/// Build the model's host graph from the federation and the current
/// broker of each LEI (`brokers[lei]`). `features` must be (H, n*k).
pub fn topology_graph(
    spec: &FederationSpec,
    brokers: &[HostId],
    features: Tensor,
) -> Result<TopologyGraph> {
    let h = spec.n_hosts();
    if features.rows() != h {
        return Err(Error::shape(format!("{h} feature rows"), format!("{}", features.rows())));
    }
    if brokers.len() != spec.n_leis() {
        return Err(Error::shape(
            format!("{} brokers", spec.n_leis()),
            format!("{}", brokers.len()),
        ));
    }
    let mut wb = Tensor::zeros(&[h, h]);
    let mut bb = Tensor::zeros(&[h, h]);
    for lei in &spec.leis {
        let broker = brokers[lei.id];
        if !lei.hosts.contains(&broker) {
            return Err(Error::contract(format!("broker {broker} not in LEI {}", lei.id)));
        }
        for &w in &lei.hosts {
            if w != broker {
                wb.set2(w, broker, 1.0);
                wb.set2(broker, w, 1.0);
            }
        }
    }
    for (i, &a) in brokers.iter().enumerate() {
        for &b in brokers.iter().skip(i + 1) {
            bb.set2(a, b, 1.0);
            bb.set2(b, a, 1.0);
        }
    }
    Ok(TopologyGraph {
        features,
        adj_worker_broker: wb,
        adj_broker_broker: bb,
        lei_of: spec.hosts.iter().map(|h| h.lei_id).collect(),
        brokers: brokers.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_brokers(spec: &FederationSpec) -> Vec<HostId> {
        spec.leis.iter().map(|l| l.initial_broker).collect()
    }

    #[test]
    fn config1_sixteen_single_host_leis() {
        let spec = build_config(1).unwrap();
        assert_eq!(spec.n_hosts(), 16);
        assert_eq!(spec.n_leis(), 16);
        assert!(spec.leis.iter().all(|l| l.hosts.len() == 1));
        let n4 = spec.hosts.iter().filter(|h| h.ram_mb == GB4).count();
        assert_eq!(n4, 8);
    }

    #[test]
    fn config2_ram_layout() {
        let spec = build_config(2).unwrap();
        assert_eq!(spec.n_leis(), 4);
        assert!(spec.leis.iter().all(|l| l.hosts.len() == 4));
        let ram = |lei: usize| -> Vec<u64> {
            spec.leis[lei].hosts.iter().map(|&h| spec.hosts[h].ram_mb).collect()
        };
        assert!(ram(0).iter().all(|&r| r == GB4));
        assert!(ram(1).iter().all(|&r| r == GB8));
        for lei in [2, 3] {
            assert_eq!(ram(lei).iter().filter(|&&r| r == GB4).count(), 2);
        }
        // Mixed LEIs differ in broker RAM class.
        assert_eq!(spec.hosts[spec.leis[2].initial_broker].ram_mb, GB4);
        assert_eq!(spec.hosts[spec.leis[3].initial_broker].ram_mb, GB8);
        let n4 = spec.hosts.iter().filter(|h| h.ram_mb == GB4).count();
        assert_eq!(n4, 8);
    }

    #[test]
    fn config3_sizes_and_big_lei_ram() {
        let spec = build_config(3).unwrap();
        let sizes: Vec<usize> = spec.leis.iter().map(|l| l.hosts.len()).collect();
        assert_eq!(sizes, vec![2, 4, 4, 8]);
        let big = spec.leis.iter().find(|l| l.hosts.len() == 8).unwrap();
        assert!(big.hosts.iter().all(|&h| spec.hosts[h].ram_mb == GB8));
        let n8 = spec.hosts.iter().filter(|h| h.ram_mb == GB8).count();
        assert_eq!(n8, 8);
    }

    #[test]
    fn custom_two_host_spec_valid() {
        let spec = FederationSpec {
            hosts: vec![host(0, 0, GB4), host(1, 0, GB8)],
            leis: vec![LeiSpec { id: 0, initial_broker: 0, hosts: vec![0, 1] }],
            links: LinkParams::default(),
        };
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn reassign_picks_min_util_then_lowest_id() {
        assert_eq!(
            reassign_broker(&[(0, 0.9), (1, 0.2), (2, 0.5)]),
            BrokerReassignment::Promoted(1)
        );
        assert_eq!(
            reassign_broker(&[(3, 0.2), (1, 0.2)]),
            BrokerReassignment::Promoted(1)
        );
        assert_eq!(reassign_broker(&[]), BrokerReassignment::LeiDead);
    }

    #[test]
    fn edge_counts_per_config() {
        for (which, wb_expected, bb_expected) in [(1u8, 0usize, 120usize), (2, 12, 6), (3, 14, 6)] {
            let spec = build_config(which).unwrap();
            let feats = Tensor::zeros(&[spec.n_hosts(), 4]);
            let g = topology_graph(&spec, &default_brokers(&spec), feats).unwrap();
            let (wb, bb) = g.edge_counts();
            assert_eq!((wb, bb), (wb_expected, bb_expected), "config {which}");
        }
    }

    #[test]
    fn adjacency_symmetric_no_self_loops() {
        let spec = build_config(2).unwrap();
        let feats = Tensor::zeros(&[16, 4]);
        let g = topology_graph(&spec, &default_brokers(&spec), feats).unwrap();
        for t in [&g.adj_worker_broker, &g.adj_broker_broker] {
            for i in 0..16 {
                assert_eq!(t.get2(i, i), 0.0);
                for j in 0..16 {
                    assert_eq!(t.get2(i, j), t.get2(j, i));
                }
            }
        }
    }

    #[test]
    fn migration_time_hundred_mb_cross_lei() {
        let spec = build_config(2).unwrap();
        // 100 MB over 1 Gbps = 0.8 s, plus 50 ms WAN latency.
        let t = spec.migration_time_s(0, 4, 100.0, 1.0);
        approx::assert_abs_diff_eq!(t, 0.85, epsilon = 1e-12);
        // Intra-LEI rides the LAN with no added latency.
        let t = spec.migration_time_s(0, 1, 100.0, 1.0);
        approx::assert_abs_diff_eq!(t, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn build_config_rejects_unknown() {
        assert!(build_config(4).is_err());
    }
}
