//! Stage 1: P2P host detection through flow clustering and destination
//! diversity.
//!
//! P2P applications keep routing tables of peers spread across many
//! networks, so their management flows (which share one traffic pattern)
//! fan out to far more distinct /16 prefixes than client-server traffic
//! does. Hosts with at least one sufficiently diverse flow cluster are
//! kept; everything else drops out of the pipeline here.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::flow::{FlowKey, FlowPattern, FlowRecord, HostId, Prefix16};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of distinct /16 destination prefixes a flow cluster must
/// reach to count as P2P management traffic. Always at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DdThreshold(u32);

impl DdThreshold {
    pub fn new(value: u32) -> Result<Self> {
        if value == 0 {
            return Err(Error::Config(
                "destination diversity threshold must be at least 1".into(),
            ));
        }
        Ok(DdThreshold(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// All flows of one source host that share a traffic pattern, collapsed to
/// the set of destinations. Duplicate (key, dst) pairs merge.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FlowCluster {
    pub key: FlowKey,
    dsts: BTreeSet<HostId>,
    prefixes: BTreeSet<Prefix16>,
}

impl FlowCluster {
    fn new(key: FlowKey) -> Self {
        FlowCluster {
            key,
            dsts: BTreeSet::new(),
            prefixes: BTreeSet::new(),
        }
    }

    fn insert(&mut self, dst: HostId) {
        self.prefixes.insert(dst.prefix16());
        self.dsts.insert(dst);
    }

    fn merge(&mut self, other: FlowCluster) {
        self.prefixes.extend(other.prefixes);
        self.dsts.extend(other.dsts);
    }

    /// Destination diversity: distinct /16 prefixes among the destinations.
    pub fn dd(&self) -> usize {
        self.prefixes.len()
    }

    pub fn dsts(&self) -> &BTreeSet<HostId> {
        &self.dsts
    }

    /// Number of deduplicated flows in the cluster.
    pub fn len(&self) -> usize {
        self.dsts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dsts.is_empty()
    }
}

/// Clusters keyed by (src, pattern). The map is ordered so iteration, and
/// everything derived from it, is independent of input order.
pub type ClusterMap = BTreeMap<FlowKey, FlowCluster>;

/// Groups flows into per-source, per-pattern clusters.
pub fn cluster_flows(flows: &[FlowRecord]) -> ClusterMap {
    #[cfg(feature = "parallel")]
    {
        cluster_flows_parallel(flows)
    }
    #[cfg(not(feature = "parallel"))]
    {
        cluster_flows_sequential(flows)
    }
}

/// Single-threaded clustering. Reference behavior for the parallel path.
pub fn cluster_flows_sequential(flows: &[FlowRecord]) -> ClusterMap {
    let mut map = ClusterMap::new();
    for f in flows {
        map.entry(f.key())
            .or_insert_with(|| FlowCluster::new(f.key()))
            .insert(f.dst);
    }
    map
}

/// Merges two cluster maps, unioning destination sets for shared keys.
/// Clustering a partition of the flows shard by shard and merging gives
/// exactly the single-pass result.
pub fn merge_cluster_maps(mut a: ClusterMap, b: ClusterMap) -> ClusterMap {
    if a.len() < b.len() {
        return merge_cluster_maps(b, a);
    }
    for (key, cluster) in b {
        match a.entry(key) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(cluster);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                e.get_mut().merge(cluster);
            }
        }
    }
    a
}

#[cfg(feature = "parallel")]
const CLUSTER_SHARD: usize = 16 * 1024;

/// Data-parallel clustering: shards the flow slice, clusters each shard,
/// and merges. Yields the same map as the sequential pass.
#[cfg(feature = "parallel")]
pub fn cluster_flows_parallel(flows: &[FlowRecord]) -> ClusterMap {
    flows
        .par_chunks(CLUSTER_SHARD)
        .map(cluster_flows_sequential)
        .reduce(ClusterMap::new, merge_cluster_maps)
}

/// Keys of clusters whose destination diversity reaches the threshold.
pub fn detect_p2p_flow_clusters(clusters: &ClusterMap, theta_dd: DdThreshold) -> BTreeSet<FlowKey> {
    clusters
        .iter()
        .filter(|(_, c)| c.dd() >= theta_dd.get() as usize)
        .map(|(k, _)| *k)
        .collect()
}

/// Stage-1 result for one surviving host: its qualifying clusters and the
/// contact and pattern sets derived from them alone. Flows in clusters
/// below the diversity threshold contribute nothing here.
#[derive(Clone, PartialEq, Debug)]
pub struct P2pHostProfile {
    pub host: HostId,
    pub mnf_clusters: Vec<FlowCluster>,
    pub contacts: BTreeSet<HostId>,
    pub patterns: BTreeSet<FlowPattern>,
}

impl P2pHostProfile {
    fn new(host: HostId) -> Self {
        P2pHostProfile {
            host,
            mnf_clusters: Vec::new(),
            contacts: BTreeSet::new(),
            patterns: BTreeSet::new(),
        }
    }

    fn add_cluster(&mut self, cluster: FlowCluster) {
        self.contacts.extend(cluster.dsts.iter().copied());
        self.patterns.insert(cluster.key.pattern());
        self.mnf_clusters.push(cluster);
    }

    /// Destination diversity across all qualifying clusters.
    pub fn dd(&self) -> usize {
        self.contacts
            .iter()
            .map(|h| h.prefix16())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Stage-1 survivors keyed by host.
pub type HostProfiles = BTreeMap<HostId, P2pHostProfile>;

fn profiles_from_clusters(clusters: ClusterMap, theta_dd: DdThreshold) -> HostProfiles {
    let keep = detect_p2p_flow_clusters(&clusters, theta_dd);
    let mut hosts = HostProfiles::new();
    for (key, cluster) in clusters {
        if !keep.contains(&key) {
            continue;
        }
        hosts
            .entry(key.src)
            .or_insert_with(|| P2pHostProfile::new(key.src))
            .add_cluster(cluster);
    }
    hosts
}

/// Runs stage 1: clusters flows and keeps hosts owning at least one
/// cluster with destination diversity at or above the threshold.
pub fn detect_p2p_hosts(flows: &[FlowRecord], theta_dd: DdThreshold) -> HostProfiles {
    profiles_from_clusters(cluster_flows(flows), theta_dd)
}

/// Single-threaded variant of [`detect_p2p_hosts`].
pub fn detect_p2p_hosts_sequential(flows: &[FlowRecord], theta_dd: DdThreshold) -> HostProfiles {
    profiles_from_clusters(cluster_flows_sequential(flows), theta_dd)
}
