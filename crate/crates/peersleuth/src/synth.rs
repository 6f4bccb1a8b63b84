//! Synthetic dataset generation with exact ground truth.
//!
//! A dataset is a flow table plus a label per internal host. It is built
//! from three ingredients:
//!
//! * a background universe of clients and servers whose contact graph is
//!   bipartite, from which the internal network is sampled by two-coloring
//!   a BFS walk, guaranteeing every internal host shares a contact with
//!   another internal host while no two internal hosts ever talk to each
//!   other directly;
//! * botnet families, one peer pool each, split into a shared core every
//!   bot contacts plus disjoint per-bot remainders, which pins the
//!   pairwise contact overlap of a family at its configured rate;
//! * legitimate P2P applications whose hosts sample peers independently
//!   from one large shared universe, giving high destination diversity
//!   but only incidental contact overlap.
//!
//! Injected hosts are then remapped onto sampled internal hosts, keeping
//! those hosts' background flows, so bots and P2P hosts blend into normal
//! traffic. All randomness flows through one seeded generator; the same
//! config and seed reproduce the dataset byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Cidr, FlowPattern, FlowRecord, HostId, Protocol};
use crate::mcg::compute_mcr;

const CLIENT_OCTET: u8 = 10;
const POPULAR_OCTET: u8 = 20;
const PRIVATE_OCTET: u8 = 30;
const BOTNET_OCTET_BASE: u8 = 40;
const P2P_OCTET_BASE: u8 = 120;
const BOT_PLACEHOLDER: (u8, u8) = (198, 18);
const P2P_PLACEHOLDER: (u8, u8) = (198, 19);

/// Background traffic patterns stay at or below this bytes-per-packet;
/// injected traffic sits above it, so injected clusters never merge with
/// background clusters.
const BACKGROUND_BPP_MAX: u64 = 1500;
const BOTNET_BPP_BASE: u64 = 2000;
const P2P_BPP_BASE: u64 = 5000;

fn addr(a: u8, b: u8, c: u8, d: u8) -> HostId {
    HostId::new(Ipv4Addr::new(a, b, c, d))
}

/// idx-th address of a first-octet block spread round-robin over
/// `prefixes` /16 networks.
fn block_addr(octet: u8, prefixes: usize, idx: usize) -> HostId {
    let prefix = (idx % prefixes) as u8;
    let serial = idx / prefixes;
    addr(octet, prefix, (serial >> 8) as u8, (serial & 0xff) as u8)
}

/// Ground-truth label of one internal host.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum HostLabel {
    Background,
    Bot { family: String },
    P2p { app: String },
}

impl HostLabel {
    pub fn is_bot(&self) -> bool {
        matches!(self, HostLabel::Bot { .. })
    }

    pub fn family(&self) -> Option<&str> {
        match self {
            HostLabel::Bot { family } => Some(family),
            _ => None,
        }
    }

    pub fn app(&self) -> Option<&str> {
        match self {
            HostLabel::P2p { app } => Some(app),
            _ => None,
        }
    }
}

impl fmt::Display for HostLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostLabel::Background => f.write_str("background"),
            HostLabel::Bot { family } => write!(f, "bot:{family}"),
            HostLabel::P2p { app } => write!(f, "p2p:{app}"),
        }
    }
}

impl FromStr for HostLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "background" {
            return Ok(HostLabel::Background);
        }
        if let Some(family) = s.strip_prefix("bot:") {
            if family.is_empty() {
                return Err("empty botnet family name".into());
            }
            return Ok(HostLabel::Bot {
                family: family.to_string(),
            });
        }
        if let Some(app) = s.strip_prefix("p2p:") {
            if app.is_empty() {
                return Err("empty application name".into());
            }
            return Ok(HostLabel::P2p {
                app: app.to_string(),
            });
        }
        Err(format!(
            "unknown label '{s}', expected background, bot:<family>, or p2p:<app>"
        ))
    }
}

/// Labels for every internal host of a dataset.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct GroundTruth {
    labels: BTreeMap<HostId, HostLabel>,
}

pub const TRUTH_CSV_HEADER: &str = "ip,label";

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, host: HostId, label: HostLabel) {
        self.labels.insert(host, label);
    }

    pub fn get(&self, host: HostId) -> Option<&HostLabel> {
        self.labels.get(&host)
    }

    pub fn contains(&self, host: HostId) -> bool {
        self.labels.contains_key(&host)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HostId, &HostLabel)> {
        self.labels.iter().map(|(&h, l)| (h, l))
    }

    /// All hosts labeled as bots.
    pub fn bots(&self) -> BTreeSet<HostId> {
        self.labels
            .iter()
            .filter(|(_, l)| l.is_bot())
            .map(|(&h, _)| h)
            .collect()
    }

    /// Distinct botnet family names present.
    pub fn families(&self) -> BTreeSet<&str> {
        self.labels.values().filter_map(HostLabel::family).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRUTH_CSV_HEADER}")?;
        for (&host, label) in &self.labels {
            writeln!(w, "{host},{label}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse { line, reason };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty input, expected a header line".into()))??;
        if header.trim() != TRUTH_CSV_HEADER {
            return Err(parse_err(
                1,
                format!("expected header '{TRUTH_CSV_HEADER}', got '{}'", header.trim()),
            ));
        }
        let mut truth = GroundTruth::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (ip, label) = line
                .split_once(',')
                .ok_or_else(|| parse_err(line_no, "expected 2 fields".into()))?;
            let host: HostId = ip
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid IP address '{}'", ip.trim())))?;
            let label: HostLabel = label
                .trim()
                .parse()
                .map_err(|e| parse_err(line_no, e))?;
            if truth.contains(host) {
                return Err(parse_err(line_no, format!("duplicate host {host}")));
            }
            truth.insert(host, label);
        }
        Ok(truth)
    }
}

/// One injected botnet family.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BotnetSpec {
    pub family: String,
    pub bot_count: usize,
    /// Size of the family's peer pool; the shared core and the per-bot
    /// remainders are carved out of it.
    pub peer_pool_size: usize,
    /// Target pairwise contact overlap between bots of this family, in
    /// (0, 1].
    pub shared_contact_rate: f64,
}

impl Default for BotnetSpec {
    fn default() -> Self {
        BotnetSpec {
            family: "alpha".into(),
            bot_count: 5,
            peer_pool_size: 400,
            shared_contact_rate: 0.5,
        }
    }
}

/// One legitimate P2P application.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P2pAppSpec {
    pub app: String,
    pub host_count: usize,
    /// Size of the shared peer universe hosts draw from.
    pub universe_size: usize,
    /// Distinct /16 prefixes the universe spreads over.
    pub universe_prefixes: usize,
    /// Contacts each host samples, without replacement.
    pub contacts_per_host: usize,
}

impl Default for P2pAppSpec {
    fn default() -> Self {
        P2pAppSpec {
            app: "share-a".into(),
            host_count: 5,
            universe_size: 20_000,
            universe_prefixes: 250,
            contacts_per_host: 2_000,
        }
    }
}

/// Shape of the background client-server universe.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Servers everyone may contact; the first one is contacted by every
    /// client, which makes the contact graph connected and gives every
    /// host a mutual contact. Must be at least 1.
    pub popular_server_count: usize,
    /// Long-tail servers, each contacted by few clients.
    pub private_server_pool: usize,
    /// Distinct /16 prefixes of the private pool.
    pub private_server_prefixes: usize,
    /// Distinct /16 prefixes the clients spread over.
    pub client_prefixes: usize,
    /// Clients generated per internal host wanted, so the two-coloring
    /// has room to trim.
    pub client_scale: f64,
    pub contacts_min: usize,
    pub contacts_max: usize,
    /// Each host speaks 1..=this many traffic patterns.
    pub patterns_per_host_max: usize,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            popular_server_count: 5,
            private_server_pool: 3_000,
            private_server_prefixes: 8,
            client_prefixes: 16,
            client_scale: 3.0,
            contacts_min: 3,
            contacts_max: 12,
            patterns_per_host_max: 3,
        }
    }
}

/// Full description of a synthetic dataset.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub internal_hosts: usize,
    pub seed: u64,
    /// Every injected host's flow cluster must reach at least this many
    /// distinct /16 prefixes; generation fails otherwise.
    pub min_injected_dd: usize,
    /// Upper bound on the measured pairwise contact overlap between
    /// legitimate P2P hosts; exceeded draws are retried.
    pub max_legit_mcr: f64,
    pub background: BackgroundSpec,
    pub botnets: Vec<BotnetSpec>,
    pub p2p_apps: Vec<P2pAppSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            internal_hosts: 1_000,
            seed: 0,
            min_injected_dd: 60,
            max_legit_mcr: 0.1,
            background: BackgroundSpec::default(),
            botnets: vec![
                BotnetSpec::default(),
                BotnetSpec {
                    family: "bravo".into(),
                    bot_count: 8,
                    shared_contact_rate: 0.8,
                    ..BotnetSpec::default()
                },
            ],
            p2p_apps: vec![
                P2pAppSpec::default(),
                P2pAppSpec {
                    app: "share-b".into(),
                    ..P2pAppSpec::default()
                },
            ],
        }
    }
}

impl GenConfig {
    fn client_count(&self) -> usize {
        ((self.internal_hosts as f64 * self.background.client_scale).ceil() as usize)
            .max(self.internal_hosts)
            .max(2)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.internal_hosts == 0 {
            return cfg_err("internal_hosts must be at least 1".into());
        }
        let injected: usize = self.botnets.iter().map(|b| b.bot_count).sum::<usize>()
            + self.p2p_apps.iter().map(|a| a.host_count).sum::<usize>();
        if injected > self.internal_hosts {
            return cfg_err(format!(
                "{injected} injected hosts exceed {} internal hosts",
                self.internal_hosts
            ));
        }
        if self.min_injected_dd == 0 {
            return cfg_err("min_injected_dd must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_legit_mcr) {
            return cfg_err(format!("max_legit_mcr {} out of range 0..=1", self.max_legit_mcr));
        }

        let bg = &self.background;
        if bg.client_scale < 1.0 {
            return cfg_err("client_scale must be at least 1".into());
        }
        if bg.contacts_min == 0 || bg.contacts_min > bg.contacts_max {
            return cfg_err("contacts_min must be in 1..=contacts_max".into());
        }
        if bg.patterns_per_host_max == 0 {
            return cfg_err("patterns_per_host_max must be at least 1".into());
        }
        if bg.popular_server_count > 256 {
            return cfg_err("popular_server_count exceeds the 256 addresses available".into());
        }
        for (what, count, prefixes) in [
            ("clients", self.client_count(), bg.client_prefixes),
            ("private servers", bg.private_server_pool, bg.private_server_prefixes),
        ] {
            if prefixes == 0 || prefixes > 256 {
                return cfg_err(format!("{what}: prefix count {prefixes} out of range 1..=256"));
            }
            if count > prefixes * 65_536 {
                return cfg_err(format!("{what}: {count} hosts exceed {prefixes} /16 blocks"));
            }
        }

        if self.botnets.len() > (P2P_OCTET_BASE - BOTNET_OCTET_BASE) as usize {
            return cfg_err("too many botnet families for the address plan".into());
        }
        let mut family_names = BTreeSet::new();
        for b in &self.botnets {
            if b.family.is_empty() || b.family.contains([':', ',']) {
                return cfg_err(format!("invalid family name '{}'", b.family));
            }
            if !family_names.insert(&b.family) {
                return cfg_err(format!("duplicate family name '{}'", b.family));
            }
            if b.bot_count < 2 {
                return cfg_err(format!("family {}: at least 2 bots required", b.family));
            }
            if b.bot_count > 255 {
                return cfg_err(format!("family {}: at most 255 bots supported", b.family));
            }
            if !(b.shared_contact_rate > 0.0 && b.shared_contact_rate <= 1.0) {
                return cfg_err(format!(
                    "family {}: shared_contact_rate {} out of range (0, 1]",
                    b.family, b.shared_contact_rate
                ));
            }
            if b.peer_pool_size > self.min_injected_dd.min(256) * 65_536 {
                return cfg_err(format!("family {}: peer pool too large for its block", b.family));
            }
        }

        if self.p2p_apps.len() > (BOT_PLACEHOLDER.0 - P2P_OCTET_BASE) as usize {
            return cfg_err("too many P2P applications for the address plan".into());
        }
        let mut app_names = BTreeSet::new();
        for a in &self.p2p_apps {
            if a.app.is_empty() || a.app.contains([':', ',']) {
                return cfg_err(format!("invalid application name '{}'", a.app));
            }
            if !app_names.insert(&a.app) {
                return cfg_err(format!("duplicate application name '{}'", a.app));
            }
            if a.host_count == 0 || a.host_count > 255 {
                return cfg_err(format!("app {}: host_count out of range 1..=255", a.app));
            }
            if a.universe_prefixes == 0 || a.universe_prefixes > 256 {
                return cfg_err(format!("app {}: universe_prefixes out of range 1..=256", a.app));
            }
            if a.universe_size > a.universe_prefixes * 65_536 {
                return cfg_err(format!("app {}: universe exceeds its /16 blocks", a.app));
            }
            if a.contacts_per_host == 0 || a.contacts_per_host > a.universe_size {
                return cfg_err(format!(
                    "app {}: contacts_per_host out of range 1..=universe_size",
                    a.app
                ));
            }
        }
        Ok(())
    }
}

/// Undirected contact graph over a fixed host list.
#[derive(Clone, Debug)]
pub struct ContactGraph {
    hosts: Vec<HostId>,
    index: BTreeMap<HostId, usize>,
    adj: Vec<Vec<usize>>,
}

impl ContactGraph {
    fn new(hosts: Vec<HostId>, edges: &[(usize, usize)]) -> Self {
        let index = hosts.iter().enumerate().map(|(i, &h)| (h, i)).collect();
        let mut adj = vec![Vec::new(); hosts.len()];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        ContactGraph { hosts, index, adj }
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn host(&self, i: usize) -> HostId {
        self.hosts[i]
    }

    pub fn index_of(&self, host: HostId) -> Option<usize> {
        self.index.get(&host).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn hosts(&self) -> &[HostId] {
        &self.hosts
    }
}

/// The background universe: its contact graph and each host's repertoire
/// of traffic patterns, indexed like the graph.
#[derive(Clone, Debug)]
pub struct BackgroundUniverse {
    pub graph: ContactGraph,
    pub patterns: Vec<Vec<FlowPattern>>,
    pub client_count: usize,
}

fn random_background_pattern(rng: &mut ChaCha8Rng) -> FlowPattern {
    FlowPattern {
        proto: if rng.gen_bool(0.5) { Protocol::Tcp } else { Protocol::Udp },
        bpp_out: rng.gen_range(40..=BACKGROUND_BPP_MAX),
        bpp_in: rng.gen_range(40..=BACKGROUND_BPP_MAX),
    }
}

/// Builds the background client-server universe.
///
/// Every client contacts the first popular server, so any two hosts are
/// within four hops and every host shares a contact with some other host.
/// Per-client contact counts stay small, keeping background clusters far
/// below any plausible diversity threshold.
pub fn generate_background_contacts(
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BackgroundUniverse> {
    let bg = &cfg.background;
    if bg.popular_server_count == 0 {
        return Err(Error::Generation(
            "popular_server_count is 0: without a shared popular server the \
             mutual-contact guarantee cannot hold"
                .into(),
        ));
    }

    let client_count = cfg.client_count();
    let clients: Vec<HostId> = (0..client_count)
        .map(|i| block_addr(CLIENT_OCTET, bg.client_prefixes, i))
        .collect();
    let popular: Vec<HostId> = (0..bg.popular_server_count)
        .map(|i| addr(POPULAR_OCTET, i as u8, 0, 1))
        .collect();
    let private: Vec<HostId> = (0..bg.private_server_pool)
        .map(|i| block_addr(PRIVATE_OCTET, bg.private_server_prefixes, i))
        .collect();

    // Contact selection per client, as indices into popular/private.
    let mut popular_used = vec![false; popular.len()];
    let mut private_used = vec![false; private.len()];
    popular_used[0] = true;
    let mut picks: Vec<(BTreeSet<usize>, BTreeSet<usize>)> = Vec::with_capacity(client_count);
    for _ in 0..client_count {
        let want = rng.gen_range(bg.contacts_min..=bg.contacts_max);
        let mut pop: BTreeSet<usize> = BTreeSet::new();
        let mut prv: BTreeSet<usize> = BTreeSet::new();
        pop.insert(0);
        let mut attempts = 0;
        while pop.len() + prv.len() < want && attempts < 4 * want + 16 {
            attempts += 1;
            if popular.len() > 1 && rng.gen_bool(0.15) {
                let i = rng.gen_range(0..popular.len());
                if pop.insert(i) {
                    popular_used[i] = true;
                }
            } else if !private.is_empty() {
                let i = rng.gen_range(0..private.len());
                if prv.insert(i) {
                    private_used[i] = true;
                }
            }
        }
        picks.push((pop, prv));
    }

    // Hosts: clients, then only the servers that were actually contacted.
    let mut hosts = clients;
    let mut popular_index = vec![usize::MAX; popular.len()];
    for (i, &used) in popular_used.iter().enumerate() {
        if used {
            popular_index[i] = hosts.len();
            hosts.push(popular[i]);
        }
    }
    let mut private_index = vec![usize::MAX; private.len()];
    for (i, &used) in private_used.iter().enumerate() {
        if used {
            private_index[i] = hosts.len();
            hosts.push(private[i]);
        }
    }

    let mut edges = Vec::new();
    for (client, (pop, prv)) in picks.iter().enumerate() {
        for &i in pop {
            edges.push((client, popular_index[i]));
        }
        for &i in prv {
            edges.push((client, private_index[i]));
        }
    }
    let graph = ContactGraph::new(hosts, &edges);

    let patterns: Vec<Vec<FlowPattern>> = (0..graph.len())
        .map(|_| {
            let count = rng.gen_range(1..=bg.patterns_per_host_max);
            (0..count).map(|_| random_background_pattern(rng)).collect()
        })
        .collect();

    Ok(BackgroundUniverse {
        graph,
        patterns,
        client_count,
    })
}

/// A two-colored sample of the background universe. `black` holds the
/// internal-side hosts in the order the walk discovered them; taking a
/// prefix of it preserves the mutual-contact guarantee, because each
/// discovered host shares its discovering contact with an earlier one.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ColoredSample {
    pub black: Vec<HostId>,
    pub white: Vec<HostId>,
    pub c_black: usize,
    pub c_white: usize,
}

impl ColoredSample {
    /// First `n` internal-side hosts in discovery order.
    pub fn internal_hosts(&self, n: usize) -> Result<&[HostId]> {
        if n > self.black.len() {
            return Err(Error::Generation(format!(
                "asked for {n} internal hosts but the sample found only {}",
                self.black.len()
            )));
        }
        Ok(&self.black[..n])
    }
}

/// Two-colors the contact graph breadth-first from `start` (colored
/// black) until both colors have at least `n_internal` hosts.
///
/// Fails if the walk runs out of reachable hosts first (the universe is
/// too small; enlarge it) or if it meets an odd cycle (the graph is not
/// bipartite, so no client/server split exists).
pub fn two_color_sample_from(
    graph: &ContactGraph,
    start: HostId,
    n_internal: usize,
) -> Result<ColoredSample> {
    let start = graph
        .index_of(start)
        .ok_or_else(|| Error::Generation(format!("start host {start} not in the universe")))?;

    let mut color: Vec<Option<bool>> = vec![None; graph.len()];
    let mut black = Vec::new();
    let mut white = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    color[start] = Some(true);
    black.push(graph.host(start));
    queue.push_back(start);

    while let Some(v) = queue.pop_front() {
        if black.len() >= n_internal && white.len() >= n_internal {
            break;
        }
        let v_color = color[v].unwrap();
        for &u in graph.neighbors(v) {
            match color[u] {
                None => {
                    color[u] = Some(!v_color);
                    if !v_color {
                        black.push(graph.host(u));
                    } else {
                        white.push(graph.host(u));
                    }
                    queue.push_back(u);
                }
                Some(c) if c == v_color => {
                    return Err(Error::Generation(format!(
                        "contact graph is not bipartite: {} and {} are linked but share a side",
                        graph.host(v),
                        graph.host(u)
                    )));
                }
                Some(_) => {}
            }
        }
    }

    if black.len() < n_internal || white.len() < n_internal {
        return Err(Error::Generation(format!(
            "two-coloring found {} black and {} white hosts, but {n_internal} of each \
             are needed; enlarge the background universe",
            black.len(),
            white.len()
        )));
    }
    Ok(ColoredSample {
        c_black: black.len(),
        c_white: white.len(),
        black,
        white,
    })
}

/// [`two_color_sample_from`] with a randomly chosen start host.
pub fn two_color_sample(
    graph: &ContactGraph,
    n_internal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ColoredSample> {
    if graph.is_empty() {
        return Err(Error::Generation("contact universe is empty".into()));
    }
    let start = graph.host(rng.gen_range(0..graph.len()));
    two_color_sample_from(graph, start, n_internal)
}

/// Flows and labels of injected hosts, keyed by placeholder addresses
/// that [`mix_datasets`] later remaps onto real internal hosts.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct InjectedTraffic {
    pub flows: Vec<FlowRecord>,
    pub labels: Vec<(HostId, HostLabel)>,
}

fn family_pattern(index: usize) -> FlowPattern {
    FlowPattern {
        proto: if index % 2 == 0 { Protocol::Udp } else { Protocol::Tcp },
        bpp_out: BOTNET_BPP_BASE + 16 * index as u64,
        bpp_in: BOTNET_BPP_BASE + 400 + 16 * index as u64,
    }
}

fn app_pattern(index: usize) -> FlowPattern {
    FlowPattern {
        proto: if index % 2 == 0 { Protocol::Tcp } else { Protocol::Udp },
        bpp_out: P2P_BPP_BASE + 16 * index as u64,
        bpp_in: P2P_BPP_BASE + 400 + 16 * index as u64,
    }
}

fn emit_flows(src: HostId, contacts: &BTreeSet<HostId>, pattern: FlowPattern, out: &mut Vec<FlowRecord>) {
    for &dst in contacts {
        out.push(FlowRecord {
            src,
            dst,
            proto: pattern.proto,
            bpp_out: pattern.bpp_out,
            bpp_in: pattern.bpp_in,
        });
    }
}

fn dd_of(contacts: &BTreeSet<HostId>) -> usize {
    crate::flow::distinct_prefixes(contacts).len()
}

/// Builds botnet traffic on placeholder addresses.
///
/// Each family owns a peer pool laid out round-robin over its /16
/// prefixes. A shared core of `s` peers is contacted by every bot and
/// each bot adds a disjoint remainder of `p` peers, so any two bots of
/// the family overlap in exactly `s / (s + 2p)` of their union, which is
/// solved to sit at the configured rate (never below it). Families use
/// disjoint pools, so cross-family overlap is zero by construction.
pub fn generate_botnet_traces(cfg: &GenConfig) -> Result<InjectedTraffic> {
    let mut out = InjectedTraffic::default();
    for (fi, spec) in cfg.botnets.iter().enumerate() {
        let gen_err = |m: String| Error::Generation(format!("family {}: {m}", spec.family));
        let rate = spec.shared_contact_rate;
        let bots = spec.bot_count;
        let pool_size = spec.peer_pool_size;
        let prefixes = pool_size.min(cfg.min_injected_dd).max(1);
        let pool: Vec<HostId> = (0..pool_size)
            .map(|i| block_addr(BOTNET_OCTET_BASE + fi as u8, prefixes, i))
            .collect();

        // Largest core size whose per-bot remainders still fit the pool.
        let remainder = |s: usize| ((s as f64 * (1.0 - rate)) / (2.0 * rate)).floor() as usize;
        let mut s = ((pool_size as f64 * 2.0 * rate)
            / (2.0 * rate + bots as f64 * (1.0 - rate)))
            .floor() as usize;
        while s > 0 && s + bots * remainder(s) > pool_size {
            s -= 1;
        }
        if s == 0 {
            return Err(gen_err("peer pool too small for any shared core".into()));
        }
        let p = remainder(s);
        let mcr = s as f64 / (s + 2 * p) as f64;
        if mcr < rate - 1e-12 || mcr > rate + 0.1 {
            return Err(gen_err(format!(
                "achievable pairwise overlap {mcr:.4} misses the target rate {rate}; \
                 grow the peer pool or lower the rate"
            )));
        }

        let core: BTreeSet<HostId> = pool[..s].iter().copied().collect();
        let pattern = family_pattern(fi);
        for b in 0..bots {
            let mut contacts = core.clone();
            contacts.extend(&pool[s + b * p..s + (b + 1) * p]);
            let dd = dd_of(&contacts);
            if dd < cfg.min_injected_dd.min(pool_size) {
                return Err(gen_err(format!(
                    "bot cluster reaches only {dd} prefixes, below the floor of {}",
                    cfg.min_injected_dd.min(pool_size)
                )));
            }
            let placeholder = addr(BOT_PLACEHOLDER.0, BOT_PLACEHOLDER.1, fi as u8, b as u8);
            emit_flows(placeholder, &contacts, pattern, &mut out.flows);
            out.labels.push((
                placeholder,
                HostLabel::Bot {
                    family: spec.family.clone(),
                },
            ));
        }
    }
    Ok(out)
}

const P2P_REDRAW_LIMIT: usize = 10;

/// Builds legitimate P2P traffic on placeholder addresses.
///
/// Hosts of one application sample their contacts independently from the
/// app's shared universe. Draws are checked post hoc: every host must
/// reach the diversity floor and no pair may overlap beyond
/// `max_legit_mcr`; a violating draw is retried up to 10 times before
/// generation fails.
pub fn generate_p2p_traces(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<InjectedTraffic> {
    let mut out = InjectedTraffic::default();
    for (ai, spec) in cfg.p2p_apps.iter().enumerate() {
        let universe: Vec<HostId> = (0..spec.universe_size)
            .map(|i| block_addr(P2P_OCTET_BASE + ai as u8, spec.universe_prefixes, i))
            .collect();

        let mut accepted: Option<Vec<BTreeSet<HostId>>> = None;
        'attempt: for _ in 0..P2P_REDRAW_LIMIT {
            let draws: Vec<BTreeSet<HostId>> = (0..spec.host_count)
                .map(|_| {
                    sample_indices(rng, universe.len(), spec.contacts_per_host)
                        .into_iter()
                        .map(|i| universe[i])
                        .collect()
                })
                .collect();
            for contacts in &draws {
                if dd_of(contacts) < cfg.min_injected_dd {
                    continue 'attempt;
                }
            }
            for i in 0..draws.len() {
                for j in (i + 1)..draws.len() {
                    if compute_mcr(&draws[i], &draws[j])? > cfg.max_legit_mcr {
                        continue 'attempt;
                    }
                }
            }
            accepted = Some(draws);
            break;
        }
        let draws = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "app {}: no draw satisfied the diversity floor and overlap cap \
                 within {P2P_REDRAW_LIMIT} attempts; adjust universe_size or the caps",
                spec.app
            ))
        })?;

        let pattern = app_pattern(ai);
        for (h, contacts) in draws.iter().enumerate() {
            let placeholder = addr(P2P_PLACEHOLDER.0, P2P_PLACEHOLDER.1, ai as u8, h as u8);
            emit_flows(placeholder, contacts, pattern, &mut out.flows);
            out.labels.push((
                placeholder,
                HostLabel::P2p {
                    app: spec.app.clone(),
                },
            ));
        }
    }
    Ok(out)
}

/// Everything written out for one generated dataset.
#[derive(Clone, PartialEq, Debug)]
pub struct SyntheticDataset {
    pub flows: Vec<FlowRecord>,
    pub truth: GroundTruth,
    pub manifest: DatasetManifest,
}

/// Sidecar metadata describing a generated dataset.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub internal_cidrs: Vec<Cidr>,
    pub internal_host_count: usize,
    pub flow_count: usize,
    pub background_flow_count: usize,
    pub bot_count: usize,
    pub p2p_host_count: usize,
    pub families: Vec<String>,
    pub apps: Vec<String>,
    pub config: GenConfig,
}

/// Merges background and injected traffic into the final dataset.
///
/// A set of internal hosts is drawn, injected placeholders are remapped
/// onto them, and their background flows are kept, so every bot and P2P
/// host also behaves like a normal client. Ground truth labels exactly
/// the internal hosts.
pub fn mix_datasets(
    cfg: &GenConfig,
    universe: &BackgroundUniverse,
    sample: &ColoredSample,
    botnet: InjectedTraffic,
    p2p: InjectedTraffic,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticDataset> {
    let internal = sample.internal_hosts(cfg.internal_hosts)?;

    let injected_labels: Vec<(HostId, HostLabel)> =
        botnet.labels.into_iter().chain(p2p.labels).collect();
    if injected_labels.len() > internal.len() {
        return Err(Error::Generation(format!(
            "{} injected hosts do not fit into {} internal hosts",
            injected_labels.len(),
            internal.len()
        )));
    }

    let targets = sample_indices(rng, internal.len(), injected_labels.len());
    let remap: BTreeMap<HostId, HostId> = injected_labels
        .iter()
        .map(|(placeholder, _)| *placeholder)
        .zip(targets.iter().map(|i| internal[i]))
        .collect();

    let mut truth = GroundTruth::new();
    for &host in internal {
        truth.insert(host, HostLabel::Background);
    }
    for (placeholder, label) in &injected_labels {
        truth.insert(remap[placeholder], label.clone());
    }

    let mut flows = Vec::new();
    for &host in internal {
        let i = universe.graph.index_of(host).expect("internal host from the universe");
        let repertoire = &universe.patterns[i];
        for &nb in universe.graph.neighbors(i) {
            let pattern = repertoire[rng.gen_range(0..repertoire.len())];
            flows.push(FlowRecord {
                src: host,
                dst: universe.graph.host(nb),
                proto: pattern.proto,
                bpp_out: pattern.bpp_out,
                bpp_in: pattern.bpp_in,
            });
        }
    }
    let background_flow_count = flows.len();
    for f in botnet.flows.into_iter().chain(p2p.flows) {
        flows.push(FlowRecord {
            src: remap[&f.src],
            ..f
        });
    }

    let octets: BTreeSet<u8> = internal.iter().map(|h| h.ip().octets()[0]).collect();
    let internal_cidrs: Vec<Cidr> = octets
        .into_iter()
        .map(|o| Cidr::new(Ipv4Addr::new(o, 0, 0, 0), 8))
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        seed: cfg.seed,
        internal_cidrs,
        internal_host_count: internal.len(),
        flow_count: flows.len(),
        background_flow_count,
        bot_count: injected_labels.iter().filter(|(_, l)| l.is_bot()).count(),
        p2p_host_count: injected_labels.iter().filter(|(_, l)| !l.is_bot()).count(),
        families: cfg.botnets.iter().map(|b| b.family.clone()).collect(),
        apps: cfg.p2p_apps.iter().map(|a| a.app.clone()).collect(),
        config: cfg.clone(),
    };

    Ok(SyntheticDataset {
        flows,
        truth,
        manifest,
    })
}

/// Generates a complete labeled dataset from one config. Deterministic:
/// the config (including its seed) fully determines the output.
pub fn generate_dataset(cfg: &GenConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let universe = generate_background_contacts(cfg, &mut rng)?;
    let sample = two_color_sample(&universe.graph, cfg.internal_hosts, &mut rng)?;
    let botnet = generate_botnet_traces(cfg)?;
    let p2p = generate_p2p_traces(cfg, &mut rng)?;
    mix_datasets(cfg, &universe, &sample, botnet, p2p, &mut rng)
}
