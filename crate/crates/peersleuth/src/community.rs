//! Stage 3: community detection on the mutual-contact graph.
//!
//! Bots of one botnet form dense, heavy subgraphs; modularity maximization
//! groups them without knowing how many botnets there are. The optimizer
//! is the two-phase local-move/aggregate scheme: nodes greedily hop to the
//! neighboring community with the best modularity gain until no move
//! helps, then communities collapse into single nodes and the process
//! repeats on the smaller graph.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::HostId;
use crate::mcg::MutualContactGraph;

/// Gains this close to zero do not justify a move; keeps the optimizer
/// from wandering on floating-point noise.
const GAIN_TOL: f64 = 1e-9;

/// An assignment of hosts to communities. Ids are dense, starting at 0,
/// with no empty community; labeling is canonical (community 0 contains
/// the smallest host, and ids increase with each community's first host).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Partition {
    assignment: BTreeMap<HostId, usize>,
    community_count: usize,
}

impl Partition {
    /// Builds a partition from any host-to-label map, compacting labels
    /// into the canonical dense form.
    pub fn new(raw: BTreeMap<HostId, usize>) -> Self {
        let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
        let mut assignment = BTreeMap::new();
        for (host, label) in raw {
            let next = relabel.len();
            let id = *relabel.entry(label).or_insert(next);
            assignment.insert(host, id);
        }
        let community_count = relabel.len();
        Partition {
            assignment,
            community_count,
        }
    }

    pub fn empty() -> Self {
        Partition {
            assignment: BTreeMap::new(),
            community_count: 0,
        }
    }

    /// One community per host.
    pub fn singletons<I: IntoIterator<Item = HostId>>(hosts: I) -> Self {
        Self::new(hosts.into_iter().enumerate().map(|(i, h)| (h, i)).collect())
    }

    pub fn community_of(&self, host: HostId) -> Option<usize> {
        self.assignment.get(&host).copied()
    }

    pub fn community_count(&self) -> usize {
        self.community_count
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &BTreeMap<HostId, usize> {
        &self.assignment
    }

    /// Member lists indexed by community id, each sorted ascending.
    pub fn communities(&self) -> Vec<Vec<HostId>> {
        let mut out = vec![Vec::new(); self.community_count];
        for (&host, &c) in &self.assignment {
            out[c].push(host);
        }
        out
    }

    /// Writes one `ip community_id` line per host in host order.
    pub fn write_assignments<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (&host, &c) in &self.assignment {
            writeln!(w, "{host} {c}")?;
        }
        Ok(())
    }
}

fn check_resolution(resolution: f64) -> Result<()> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Config(format!(
            "resolution {resolution} must be a positive finite number"
        )));
    }
    Ok(())
}

pub(crate) fn check_partition_covers(g: &MutualContactGraph, p: &Partition) -> Result<()> {
    if p.len() != g.vertex_count() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} host(s), graph has {}",
            p.len(),
            g.vertex_count()
        )));
    }
    for host in g.hosts() {
        if p.community_of(host).is_none() {
            return Err(Error::InvalidPartition(format!("vertex {host} is unassigned")));
        }
    }
    Ok(())
}

/// Weighted modularity of a partition, with a resolution parameter
/// scaling the null-model term. An edgeless graph has modularity 0 under
/// the all-singletons partition and is undefined otherwise.
pub fn modularity(g: &MutualContactGraph, p: &Partition, resolution: f64) -> Result<f64> {
    check_resolution(resolution)?;
    check_partition_covers(g, p)?;

    let total = 2.0 * g.total_weight();
    if total == 0.0 {
        return if p.community_count() == p.len() {
            Ok(0.0)
        } else {
            Err(Error::DegenerateModularity)
        };
    }

    let mut intra = vec![0.0; p.community_count()];
    let mut tot = vec![0.0; p.community_count()];
    for (&(a, b), &w) in g.edges() {
        let (ca, cb) = (p.community_of(a).unwrap(), p.community_of(b).unwrap());
        if ca == cb {
            intra[ca] += w;
        }
        tot[ca] += w;
        tot[cb] += w;
    }
    let q: f64 = intra
        .iter()
        .zip(&tot)
        .map(|(&i, &t)| 2.0 * i / total - resolution * (t / total) * (t / total))
        .sum();
    Ok(q)
}

/// Working graph for one aggregation level. Vertices are dense indices;
/// aggregated communities carry their internal weight as a self-loop.
struct LevelGraph {
    n: usize,
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    degree: Vec<f64>,
    /// Total degree, i.e. twice the total edge weight.
    total: f64,
}

impl LevelGraph {
    fn from_mcg(g: &MutualContactGraph, index: &BTreeMap<HostId, usize>) -> Self {
        let n = index.len();
        let mut adj = vec![Vec::new(); n];
        let mut degree = vec![0.0; n];
        for (&(a, b), &w) in g.edges() {
            let (ia, ib) = (index[&a], index[&b]);
            adj[ia].push((ib, w));
            adj[ib].push((ia, w));
            degree[ia] += w;
            degree[ib] += w;
        }
        let total = degree.iter().sum();
        LevelGraph {
            n,
            adj,
            self_loop: vec![0.0; n],
            degree,
            total,
        }
    }

    /// Modularity of the given node-to-community labeling.
    fn modularity(&self, node2comm: &[usize], resolution: f64) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        let communities = node2comm.iter().max().map_or(0, |&c| c + 1);
        let mut intra = vec![0.0; communities];
        let mut tot = vec![0.0; communities];
        for v in 0..self.n {
            intra[node2comm[v]] += self.self_loop[v];
            tot[node2comm[v]] += self.degree[v];
            for &(u, w) in &self.adj[v] {
                if u > v && node2comm[u] == node2comm[v] {
                    intra[node2comm[v]] += w;
                }
            }
        }
        intra
            .iter()
            .zip(&tot)
            .map(|(&i, &t)| 2.0 * i / self.total - resolution * (t / self.total) * (t / self.total))
            .sum()
    }

    /// One local-move phase. Visits nodes in a shuffled order, repeatedly,
    /// moving each to the strictly best neighboring community until a full
    /// sweep makes no move. Ties go to the lowest community id, and a move
    /// needs a strictly positive gain, so the phase terminates.
    fn local_moves(
        &self,
        resolution: f64,
        rng: &mut ChaCha8Rng,
        node2comm: &mut [usize],
    ) -> bool {
        if self.total == 0.0 {
            return false;
        }
        let mut comm_tot = self.degree.clone();
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(rng);

        let mut moved_any = false;
        loop {
            let mut moved_sweep = false;
            for &v in &order {
                let old = node2comm[v];
                let mut links: BTreeMap<usize, f64> = BTreeMap::new();
                links.insert(old, 0.0);
                for &(u, w) in &self.adj[v] {
                    *links.entry(node2comm[u]).or_insert(0.0) += w;
                }

                comm_tot[old] -= self.degree[v];
                let scale = resolution * self.degree[v] / self.total;
                let stay = links[&old] - scale * comm_tot[old];

                let mut best = old;
                let mut best_gain = 0.0;
                for (&c, &k_vc) in &links {
                    let gain = k_vc - scale * comm_tot[c] - stay;
                    if gain > best_gain + GAIN_TOL {
                        best = c;
                        best_gain = gain;
                    }
                }

                comm_tot[best] += self.degree[v];
                if best != old {
                    node2comm[v] = best;
                    moved_sweep = true;
                    moved_any = true;
                }
            }
            if !moved_sweep {
                break;
            }
        }
        moved_any
    }

    /// Collapses communities into single nodes. Returns the smaller graph
    /// and the map from old node to new node, with new ids assigned in
    /// ascending order of old community id.
    fn aggregate(&self, node2comm: &[usize]) -> (LevelGraph, Vec<usize>) {
        let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in node2comm {
            let next = dense.len();
            dense.entry(c).or_insert(next);
        }
        let remap: Vec<usize> = node2comm.iter().map(|&c| dense[&c]).collect();
        let n = dense.len();

        let mut self_loop = vec![0.0; n];
        let mut degree = vec![0.0; n];
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for v in 0..self.n {
            let cv = remap[v];
            self_loop[cv] += self.self_loop[v];
            degree[cv] += self.degree[v];
            for &(u, w) in &self.adj[v] {
                if u < v {
                    continue;
                }
                let cu = remap[u];
                if cu == cv {
                    self_loop[cv] += w;
                } else {
                    let key = (cv.min(cu), cv.max(cu));
                    *merged.entry(key).or_insert(0.0) += w;
                }
            }
        }
        let mut adj = vec![Vec::new(); n];
        for (&(a, b), &w) in &merged {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        (
            LevelGraph {
                n,
                adj,
                self_loop,
                degree,
                total: self.total,
            },
            remap,
        )
    }
}

/// Result of [`louvain_detailed`]: the partition plus the modularity after
/// the initial all-singletons state and after each aggregation pass.
#[derive(Clone, Debug)]
pub struct LouvainRun {
    pub partition: Partition,
    pub pass_modularity: Vec<f64>,
}

/// Community detection by seeded modularity maximization. The same graph,
/// resolution, and seed always produce the same partition.
pub fn louvain(g: &MutualContactGraph, resolution: f64, seed: u64) -> Result<Partition> {
    Ok(louvain_detailed(g, resolution, seed)?.partition)
}

/// [`louvain`] with the per-pass modularity trace kept for inspection.
pub fn louvain_detailed(g: &MutualContactGraph, resolution: f64, seed: u64) -> Result<LouvainRun> {
    check_resolution(resolution)?;

    let index: BTreeMap<HostId, usize> = g.hosts().enumerate().map(|(i, h)| (h, i)).collect();
    if index.is_empty() {
        return Ok(LouvainRun {
            partition: Partition::empty(),
            pass_modularity: Vec::new(),
        });
    }

    let mut level = LevelGraph::from_mcg(g, &index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = (0..level.n).collect();
    let identity: Vec<usize> = (0..level.n).collect();
    let mut pass_modularity = vec![level.modularity(&identity, resolution)];

    loop {
        let mut node2comm: Vec<usize> = (0..level.n).collect();
        if !level.local_moves(resolution, &mut rng, &mut node2comm) {
            break;
        }
        pass_modularity.push(level.modularity(&node2comm, resolution));
        let (next, remap) = level.aggregate(&node2comm);
        for f in flat.iter_mut() {
            *f = remap[*f];
        }
        level = next;
    }

    let assignment = index.into_iter().map(|(h, i)| (h, flat[i])).collect();
    Ok(LouvainRun {
        partition: Partition::new(assignment),
        pass_modularity,
    })
}
