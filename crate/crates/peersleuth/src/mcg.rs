//! Stage 2: the mutual-contact graph.
//!
//! Bots of one botnet keep finding the same peers, so their contact sets
//! overlap far more than those of unrelated hosts. Each stage-1 survivor
//! becomes a vertex weighted by its destination-diversity ratio; two
//! vertices are linked when they share a traffic pattern and the Jaccard
//! overlap of their contact sets clears the mutual-contact threshold.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::flow::{distinct_prefixes, HostId};
use crate::p2p::HostProfiles;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum mutual-contact ratio for an edge. Comparison is strict, so a
/// pair sitting exactly at the threshold is not linked.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct McrThreshold(f64);

impl McrThreshold {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!(
                "mutual-contact ratio threshold {value} out of range 0..=1"
            )));
        }
        Ok(McrThreshold(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Destination-diversity ratio: distinct /16 prefixes per contacted host.
/// Bots talk to many hosts inside few networks, so their ratio runs low;
/// an empty contact set has no ratio.
pub fn compute_ddr(contacts: &BTreeSet<HostId>) -> Result<f64> {
    if contacts.is_empty() {
        return Err(Error::EmptyContactSet);
    }
    Ok(distinct_prefixes(contacts).len() as f64 / contacts.len() as f64)
}

/// Mutual-contact ratio: Jaccard overlap of two contact sets. Defined as
/// long as at least one set is nonempty.
pub fn compute_mcr(a: &BTreeSet<HostId>, b: &BTreeSet<HostId>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::EmptyContactSet);
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let shared = small.iter().filter(|h| large.contains(h)).count();
    let union = a.len() + b.len() - shared;
    Ok(shared as f64 / union as f64)
}

/// Weighted undirected graph over stage-1 survivors. Vertices carry their
/// destination-diversity ratio, edges the mutual-contact ratio. Edge keys
/// are stored with the smaller host first and there are no self-loops.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct MutualContactGraph {
    vertices: BTreeMap<HostId, f64>,
    edges: BTreeMap<(HostId, HostId), f64>,
}

impl MutualContactGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, host: HostId, ddr: f64) -> Result<()> {
        if !(ddr > 0.0 && ddr <= 1.0) {
            return Err(Error::Config(format!(
                "vertex ratio {ddr} for {host} out of range (0, 1]"
            )));
        }
        self.vertices.insert(host, ddr);
        Ok(())
    }

    pub fn add_edge(&mut self, a: HostId, b: HostId, weight: f64) -> Result<()> {
        if a == b {
            return Err(Error::Config(format!("self-loop on {a}")));
        }
        if !self.vertices.contains_key(&a) || !self.vertices.contains_key(&b) {
            return Err(Error::Config(format!(
                "edge {a} -- {b} references a missing vertex"
            )));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Config(format!(
                "edge weight {weight} out of range (0, 1]"
            )));
        }
        self.edges.insert(Self::key(a, b), weight);
        Ok(())
    }

    fn key(a: HostId, b: HostId) -> (HostId, HostId) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn ddr(&self, host: HostId) -> Option<f64> {
        self.vertices.get(&host).copied()
    }

    pub fn edge(&self, a: HostId, b: HostId) -> Option<f64> {
        self.edges.get(&Self::key(a, b)).copied()
    }

    pub fn hosts(&self) -> impl Iterator<Item = HostId> + '_ {
        self.vertices.keys().copied()
    }

    pub fn vertices(&self) -> &BTreeMap<HostId, f64> {
        &self.vertices
    }

    pub fn edges(&self) -> &BTreeMap<(HostId, HostId), f64> {
        &self.edges
    }

    /// Sum of all edge weights.
    pub fn total_weight(&self) -> f64 {
        self.edges.values().sum()
    }

    /// Per-vertex neighbor lists (both directions of every edge), sorted.
    pub fn adjacency(&self) -> BTreeMap<HostId, Vec<(HostId, f64)>> {
        let mut adj: BTreeMap<HostId, Vec<(HostId, f64)>> =
            self.hosts().map(|h| (h, Vec::new())).collect();
        for (&(a, b), &w) in &self.edges {
            adj.get_mut(&a).unwrap().push((b, w));
            adj.get_mut(&b).unwrap().push((a, w));
        }
        adj
    }

    /// Writes one `src_ip dst_ip mcr` line per edge, smaller host first,
    /// in key order.
    pub fn write_edges<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (&(a, b), &weight) in &self.edges {
            writeln!(w, "{a} {b} {weight}")?;
        }
        Ok(())
    }

    /// Writes one `ip ddr` line per vertex in host order.
    pub fn write_vertices<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (&host, &ddr) in &self.vertices {
            writeln!(w, "{host} {ddr}")?;
        }
        Ok(())
    }
}

fn edge_candidate(
    a: &crate::p2p::P2pHostProfile,
    b: &crate::p2p::P2pHostProfile,
    theta_mcr: McrThreshold,
) -> Result<Option<f64>> {
    if a.patterns.intersection(&b.patterns).next().is_none() {
        return Ok(None);
    }
    let mcr = compute_mcr(&a.contacts, &b.contacts)?;
    if mcr > theta_mcr.get() {
        Ok(Some(mcr))
    } else {
        Ok(None)
    }
}

fn graph_from_parts(
    hosts: &HostProfiles,
    edges: impl IntoIterator<Item = ((HostId, HostId), f64)>,
) -> Result<MutualContactGraph> {
    let mut g = MutualContactGraph::new();
    for (&host, profile) in hosts {
        g.add_vertex(host, compute_ddr(&profile.contacts)?)?;
    }
    for ((a, b), w) in edges {
        g.add_edge(a, b, w)?;
    }
    Ok(g)
}

/// Builds the mutual-contact graph over all stage-1 survivors.
///
/// Every host becomes a vertex, connected or not. An edge appears only
/// when the two hosts share at least one traffic pattern and their
/// mutual-contact ratio strictly exceeds the threshold.
pub fn extract_mcg(hosts: &HostProfiles, theta_mcr: McrThreshold) -> Result<MutualContactGraph> {
    #[cfg(feature = "parallel")]
    {
        extract_mcg_parallel(hosts, theta_mcr)
    }
    #[cfg(not(feature = "parallel"))]
    {
        extract_mcg_sequential(hosts, theta_mcr)
    }
}

/// Single-threaded pairwise comparison. Reference behavior for the
/// parallel path.
pub fn extract_mcg_sequential(
    hosts: &HostProfiles,
    theta_mcr: McrThreshold,
) -> Result<MutualContactGraph> {
    let profiles: Vec<_> = hosts.values().collect();
    let mut edges = Vec::new();
    for (i, a) in profiles.iter().enumerate() {
        for b in &profiles[i + 1..] {
            if let Some(mcr) = edge_candidate(a, b, theta_mcr)? {
                edges.push(((a.host, b.host), mcr));
            }
        }
    }
    graph_from_parts(hosts, edges)
}

/// Data-parallel pairwise comparison, one row of the pair matrix per task.
/// Yields the same graph as the sequential pass.
#[cfg(feature = "parallel")]
pub fn extract_mcg_parallel(
    hosts: &HostProfiles,
    theta_mcr: McrThreshold,
) -> Result<MutualContactGraph> {
    let profiles: Vec<_> = hosts.values().collect();
    let edges: Vec<Vec<((HostId, HostId), f64)>> = profiles
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut row = Vec::new();
            for b in &profiles[i + 1..] {
                if let Some(mcr) = edge_candidate(a, b, theta_mcr)? {
                    row.push(((a.host, b.host), mcr));
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    graph_from_parts(hosts, edges.into_iter().flatten())
}
