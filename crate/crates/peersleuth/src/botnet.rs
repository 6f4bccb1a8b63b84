//! Stage 4: botnet community classification and bot candidate extraction.
//!
//! A botnet community shows two signatures at once: low destination
//! diversity per member (bots loop over the same peer lists) would not
//! separate it alone, but the *average* mutual-contact ratio inside a
//! botnet community is an order of magnitude above anything legitimate
//! P2P applications produce. Communities passing both thresholds are
//! mined for maximum cliques, since every pair of bots in one botnet
//! tends to be linked; cliques of at least three hosts become bot
//! candidates.

use std::collections::BTreeSet;

use crate::community::{check_partition_covers, Partition};
use crate::error::{Error, Result};
use crate::flow::HostId;
use crate::mcg::MutualContactGraph;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// A clique must have at least this many members to count as a bot group.
pub const MIN_CLIQUE_SIZE: usize = 3;

/// Lower bounds a community must meet on both features to be classified
/// as a botnet community. Comparisons are inclusive.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct BotnetThresholds {
    theta_avgddr: f64,
    theta_avgmcr: f64,
}

impl BotnetThresholds {
    pub fn new(theta_avgddr: f64, theta_avgmcr: f64) -> Result<Self> {
        for (name, v) in [("avgddr", theta_avgddr), ("avgmcr", theta_avgmcr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{name} threshold {v} out of range 0..=1"
                )));
            }
        }
        Ok(BotnetThresholds {
            theta_avgddr,
            theta_avgmcr,
        })
    }

    pub fn theta_avgddr(self) -> f64 {
        self.theta_avgddr
    }

    pub fn theta_avgmcr(self) -> f64 {
        self.theta_avgmcr
    }
}

/// Aggregate behavior of one community.
#[derive(Clone, PartialEq, Debug)]
pub struct CommunityFeatures {
    pub community: usize,
    pub size: usize,
    /// Mean destination-diversity ratio over members.
    pub avgddr: f64,
    /// Mean mutual-contact ratio over all member pairs, counting absent
    /// edges as 0. A single-host community has no pairs and scores 0.
    pub avgmcr: f64,
}

/// Computes per-community features for every community in the partition,
/// ordered by community id.
pub fn community_features(g: &MutualContactGraph, p: &Partition) -> Result<Vec<CommunityFeatures>> {
    check_partition_covers(g, p)?;

    let mut ddr_sum = vec![0.0; p.community_count()];
    let mut size = vec![0usize; p.community_count()];
    for (&host, &c) in p.assignment() {
        ddr_sum[c] += g.ddr(host).unwrap();
        size[c] += 1;
    }
    let mut mcr_sum = vec![0.0; p.community_count()];
    for (&(a, b), &w) in g.edges() {
        let (ca, cb) = (p.community_of(a).unwrap(), p.community_of(b).unwrap());
        if ca == cb {
            mcr_sum[ca] += w;
        }
    }
    Ok((0..p.community_count())
        .map(|c| {
            let s = size[c];
            let avgmcr = if s < 2 {
                0.0
            } else {
                2.0 * mcr_sum[c] / (s as f64 * (s as f64 - 1.0))
            };
            CommunityFeatures {
                community: c,
                size: s,
                avgddr: ddr_sum[c] / s as f64,
                avgmcr,
            }
        })
        .collect())
}

/// Ids of communities whose features meet both thresholds.
pub fn filter_botnet_communities(
    features: &[CommunityFeatures],
    thresholds: BotnetThresholds,
) -> BTreeSet<usize> {
    features
        .iter()
        .filter(|f| f.avgddr >= thresholds.theta_avgddr && f.avgmcr >= thresholds.theta_avgmcr)
        .map(|f| f.community)
        .collect()
}

/// All maximum cliques of the subgraph induced on `members`, each clique
/// sorted ascending, the list in lexicographic order.
///
/// Branch-and-bound Bron-Kerbosch with pivoting; branches that cannot
/// reach the best size found so far are cut, except ties, which are kept
/// so every maximum clique is reported.
pub fn max_cliques(g: &MutualContactGraph, members: &[HostId]) -> Vec<Vec<HostId>> {
    let mut hosts: Vec<HostId> = members.to_vec();
    hosts.sort_unstable();
    hosts.dedup();
    let n = hosts.len();
    if n == 0 {
        return Vec::new();
    }

    let mut mat = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if g.edge(hosts[i], hosts[j]).is_some() {
                mat[i][j] = true;
                mat[j][i] = true;
            }
        }
    }

    let mut found: Vec<Vec<usize>> = Vec::new();
    let mut best = 0usize;
    let mut r = Vec::new();
    let p: Vec<usize> = (0..n).collect();
    bron_kerbosch(&mat, &mut r, p, Vec::new(), &mut best, &mut found);

    let mut cliques: Vec<Vec<HostId>> = found
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            c.into_iter().map(|i| hosts[i]).collect()
        })
        .collect();
    cliques.sort();
    cliques
}

fn bron_kerbosch(
    mat: &[Vec<bool>],
    r: &mut Vec<usize>,
    mut p: Vec<usize>,
    mut x: Vec<usize>,
    best: &mut usize,
    found: &mut Vec<Vec<usize>>,
) {
    if r.len() + p.len() < *best {
        return;
    }
    if p.is_empty() && x.is_empty() {
        if r.len() > *best {
            *best = r.len();
            found.clear();
        }
        if r.len() == *best {
            found.push(r.clone());
        }
        return;
    }

    let pivot = p
        .iter()
        .chain(x.iter())
        .copied()
        .max_by_key(|&u| p.iter().filter(|&&v| mat[u][v]).count())
        .unwrap();

    let ext: Vec<usize> = p.iter().copied().filter(|&v| !mat[pivot][v]).collect();
    for v in ext {
        let next_p: Vec<usize> = p.iter().copied().filter(|&u| mat[v][u]).collect();
        let next_x: Vec<usize> = x.iter().copied().filter(|&u| mat[v][u]).collect();
        r.push(v);
        bron_kerbosch(mat, r, next_p, next_x, best, found);
        r.pop();
        p.retain(|&u| u != v);
        let pos = x.binary_search(&v).unwrap_err();
        x.insert(pos, v);
    }
}

/// One extracted bot group.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BotClique {
    pub community: usize,
    pub members: Vec<HostId>,
}

/// Result of clique mining over all botnet communities.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct BotCandidates {
    pub bots: BTreeSet<HostId>,
    pub cliques: Vec<BotClique>,
}

fn mine_community(g: &MutualContactGraph, community: usize, members: &[HostId]) -> Vec<BotClique> {
    let mut survivors: BTreeSet<HostId> = members.iter().copied().collect();
    let mut out = Vec::new();
    loop {
        if survivors.len() < MIN_CLIQUE_SIZE {
            break;
        }
        let pool: Vec<HostId> = survivors.iter().copied().collect();
        let cliques = max_cliques(g, &pool);
        let top = cliques.first().map_or(0, Vec::len);
        if top < MIN_CLIQUE_SIZE {
            break;
        }
        for clique in cliques {
            if clique.iter().all(|h| survivors.contains(h)) {
                for h in &clique {
                    survivors.remove(h);
                }
                out.push(BotClique {
                    community,
                    members: clique,
                });
            }
        }
    }
    out
}

/// Extracts bot candidates from each botnet community.
///
/// Rounds repeat per community: find the maximum cliques of the remaining
/// members, accept them in lexicographic order (skipping any clique that
/// already lost a member to an earlier acceptance), remove accepted
/// members, and continue until no clique of [`MIN_CLIQUE_SIZE`] remains.
/// Members never swept into a clique are not reported.
pub fn detect_bot_candidates(
    g: &MutualContactGraph,
    p: &Partition,
    botnet_communities: &BTreeSet<usize>,
) -> Result<BotCandidates> {
    check_partition_covers(g, p)?;
    for &c in botnet_communities {
        if c >= p.community_count() {
            return Err(Error::InvalidPartition(format!(
                "community id {c} out of range, partition has {}",
                p.community_count()
            )));
        }
    }

    let members = p.communities();
    let ids: Vec<usize> = botnet_communities.iter().copied().collect();

    #[cfg(feature = "parallel")]
    let per_community: Vec<Vec<BotClique>> = ids
        .par_iter()
        .map(|&c| mine_community(g, c, &members[c]))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let per_community: Vec<Vec<BotClique>> = ids
        .iter()
        .map(|&c| mine_community(g, c, &members[c]))
        .collect();

    let mut result = BotCandidates::default();
    for cliques in per_community {
        for clique in cliques {
            result.bots.extend(clique.members.iter().copied());
            result.cliques.push(clique);
        }
    }
    Ok(result)
}
