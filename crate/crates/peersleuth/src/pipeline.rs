//! End-to-end orchestration: configuration, stage execution, scoring
//! against ground truth, and report emission.
//!
//! [`run_pipeline`] chains the four detection stages over a flow slice
//! and captures per-stage results in a [`DetectionReport`]. The report
//! serializes to JSON (and back) so a stored run can be rescored later
//! with [`compute_metrics`] without repeating the detection work.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::botnet::{
    community_features, detect_bot_candidates, filter_botnet_communities, BotnetThresholds,
    MIN_CLIQUE_SIZE,
};
use crate::community::{louvain, Partition};
use crate::error::{Error, Result};
use crate::flow::{is_internal, Cidr, FlowRecord, HostId};
use crate::mcg::{extract_mcg, McrThreshold, MutualContactGraph};
use crate::p2p::{detect_p2p_hosts, DdThreshold, HostProfiles};
use crate::synth::GroundTruth;

/// Tunable knobs for a full detection run.
///
/// The threshold defaults suit flow captures where P2P overlays span at
/// least 50 distinct /16 networks; tighten or relax them per deployment
/// with [`PipelineConfig::apply_setting`].
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stage-1 cutoff: a flow cluster qualifies when its destinations
    /// cover at least this many distinct /16 prefixes.
    pub theta_dd: u32,
    /// Stage-2 cutoff: keep an edge only when the pair's mutual-contact
    /// ratio strictly exceeds this.
    pub theta_mcr: f64,
    /// Stage-4 community filter: minimum mean destination-diversity
    /// ratio.
    pub theta_avgddr: f64,
    /// Stage-4 community filter: minimum mean pairwise mutual-contact
    /// ratio.
    pub theta_avgmcr: f64,
    /// Resolution of the modularity objective in stage 3.
    pub louvain_resolution: f64,
    /// Seed for the community-detection RNG.
    pub louvain_seed: u64,
    /// Address blocks considered internal. Flows sourced elsewhere are
    /// ignored; at least one block is required.
    pub internal_cidrs: Vec<Cidr>,
    /// Worker-thread cap for the parallel stages.
    pub worker_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            theta_dd: 50,
            theta_mcr: 0.03125,
            theta_avgddr: 0.0625,
            theta_avgmcr: 0.25,
            louvain_resolution: 1.0,
            louvain_seed: 0,
            internal_cidrs: Vec::new(),
            worker_count: default_workers(),
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl PipelineConfig {
    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<()> {
        DdThreshold::new(self.theta_dd)?;
        McrThreshold::new(self.theta_mcr)?;
        BotnetThresholds::new(self.theta_avgddr, self.theta_avgmcr)?;
        if !(self.louvain_resolution.is_finite() && self.louvain_resolution > 0.0) {
            return Err(Error::Config(format!(
                "resolution must be positive and finite, got {}",
                self.louvain_resolution
            )));
        }
        if self.internal_cidrs.is_empty() {
            return Err(Error::Config(
                "at least one internal CIDR is required".into(),
            ));
        }
        if self.worker_count == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Keys use the CLI flag spellings
    /// (`theta-dd`, `theta-mcr`, `theta-avgddr`, `theta-avgmcr`,
    /// `resolution`, `seed`, `internal-cidr`, `workers`); underscores
    /// work too. `internal-cidr` appends, everything else overwrites.
    pub fn apply_setting(&mut self, key: &str, value: &str) -> Result<()> {
        let norm = key.trim().replace('_', "-");
        let value = value.trim();
        match norm.as_str() {
            "theta-dd" => self.theta_dd = parse_setting(&norm, value)?,
            "theta-mcr" => self.theta_mcr = parse_setting(&norm, value)?,
            "theta-avgddr" => self.theta_avgddr = parse_setting(&norm, value)?,
            "theta-avgmcr" => self.theta_avgmcr = parse_setting(&norm, value)?,
            "resolution" => self.louvain_resolution = parse_setting(&norm, value)?,
            "seed" => self.louvain_seed = parse_setting(&norm, value)?,
            "internal-cidr" => self.internal_cidrs.push(parse_setting(&norm, value)?),
            "workers" => self.worker_count = parse_setting(&norm, value)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines and applies them in order. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_config_file<R: BufRead>(&mut self, reader: R) -> Result<()> {
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1))
            })?;
            self.apply_setting(key, value)?;
        }
        Ok(())
    }
}

fn parse_setting<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: {e}")))
}

/// Host totals before and after each stage.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageCounts {
    /// Distinct internal source hosts in the input.
    pub internal_hosts: usize,
    /// Hosts surviving P2P detection.
    pub p2p_hosts: usize,
    /// Hosts entering community detection.
    pub community_hosts: usize,
    /// Hosts extracted as bot candidates.
    pub bot_candidates: usize,
}

/// One detected P2P host with its stage-1 cluster statistics.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HostReport {
    pub ip: HostId,
    /// Qualifying flow clusters owned by the host.
    pub clusters: usize,
    /// Distinct destinations across those clusters.
    pub contacts: usize,
    /// Distinct destination /16 prefixes across those clusters.
    pub dd: usize,
    /// `dd` over `contacts`.
    pub ddr: f64,
}

/// One community with its aggregate features and filter outcome.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommunityReport {
    pub id: usize,
    pub size: usize,
    pub avgddr: f64,
    pub avgmcr: f64,
    /// True when the community passed the botnet filter.
    pub botnet: bool,
    pub members: Vec<HostId>,
}

/// One extracted bot group.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CliqueReport {
    pub community: usize,
    pub members: Vec<HostId>,
}

/// Final verdicts: every clique found, plus the union of their members.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BotCandidatesReport {
    /// All clique members, ascending.
    pub hosts: Vec<HostId>,
    pub cliques: Vec<CliqueReport>,
}

/// A botnet-flagged community too small to hold a minimum clique. It can
/// produce no candidates, so it is surfaced separately for review.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SuspiciousCommunity {
    pub id: usize,
    pub size: usize,
    pub avgddr: f64,
    pub avgmcr: f64,
}

/// Ground-truth scores. Field names double as the JSON keys.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct Metrics {
    /// Detected bots over ground-truth bots; 1.0 when no bots exist.
    pub dr: f64,
    /// Legit hosts flagged as bot candidates.
    pub fp: usize,
    /// `fp` over legit hosts surviving stage 1.
    pub fpr_p2p_hosts: f64,
    /// `fp` over all legit hosts in the ground truth.
    pub fpr_all_internal: f64,
    /// Legit hosts sharing a community with a bot, over legit hosts
    /// present at the community stage.
    pub flcr: f64,
    /// Bots co-clustered with a different family, over bots present at
    /// the community stage.
    pub fbcr: f64,
    /// Botnet fragmentation, floored at zero.
    pub fbsr: f64,
    /// Raw fragmentation: (bot communities - families) / families.
    /// Negative when families merged into fewer communities.
    pub fbsr_signed: f64,
    /// Communities holding bots from more than one family.
    pub merged_family_communities: usize,
}

/// Everything one detection run produces.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionReport {
    /// Echo of the configuration that produced the report.
    pub config: PipelineConfig,
    pub stage_counts: StageCounts,
    /// Stage-1 survivors, ascending by ip.
    pub p2p_hosts: Vec<HostReport>,
    /// All communities, ascending by id.
    pub communities: Vec<CommunityReport>,
    pub bot_candidates: BotCandidatesReport,
    /// Botnet-flagged communities below the clique minimum.
    pub suspicious_small_communities: Vec<SuspiciousCommunity>,
    /// Present when ground truth was supplied.
    pub metrics: Option<Metrics>,
}

/// Intermediate stage products, kept for debugging dumps.
#[derive(Clone, Debug)]
pub struct PipelineArtifacts {
    pub profiles: HostProfiles,
    pub mcg: MutualContactGraph,
    pub partition: Partition,
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |source| Error::Stage {
        stage,
        source: Box::new(source),
    }
}

/// Runs all four stages over `flows` and returns the report.
///
/// Deterministic for a fixed config and input: rerunning emits a
/// byte-identical report regardless of worker count.
pub fn run_pipeline(flows: &[FlowRecord], cfg: &PipelineConfig) -> Result<DetectionReport> {
    run_pipeline_detailed(flows, cfg).map(|(report, _)| report)
}

/// Like [`run_pipeline`] but also hands back the intermediates.
pub fn run_pipeline_detailed(
    flows: &[FlowRecord],
    cfg: &PipelineConfig,
) -> Result<(DetectionReport, PipelineArtifacts)> {
    cfg.validate()?;
    with_workers(cfg.worker_count, || run_stages(flows, cfg))
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(_workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    f()
}

fn run_stages(
    flows: &[FlowRecord],
    cfg: &PipelineConfig,
) -> Result<(DetectionReport, PipelineArtifacts)> {
    let internal: Vec<FlowRecord> = flows
        .iter()
        .filter(|f| is_internal(f.src, &cfg.internal_cidrs))
        .copied()
        .collect();
    let internal_hosts: BTreeSet<HostId> = internal.iter().map(|f| f.src).collect();

    let profiles = detect_p2p_hosts(&internal, DdThreshold::new(cfg.theta_dd)?);
    let mcg = extract_mcg(&profiles, McrThreshold::new(cfg.theta_mcr)?)
        .map_err(stage_err("mcg-extraction"))?;
    let partition = louvain(&mcg, cfg.louvain_resolution, cfg.louvain_seed)
        .map_err(stage_err("community-detection"))?;
    let features = community_features(&mcg, &partition).map_err(stage_err("botnet-filter"))?;
    let botnet_ids = filter_botnet_communities(
        &features,
        BotnetThresholds::new(cfg.theta_avgddr, cfg.theta_avgmcr)?,
    );
    let candidates =
        detect_bot_candidates(&mcg, &partition, &botnet_ids).map_err(stage_err("clique-mining"))?;

    let p2p_hosts: Vec<HostReport> = profiles
        .values()
        .map(|p| {
            let contacts = p.contacts.len();
            let dd = p.dd();
            HostReport {
                ip: p.host,
                clusters: p.mnf_clusters.len(),
                contacts,
                dd,
                ddr: dd as f64 / contacts as f64,
            }
        })
        .collect();

    let members = partition.communities();
    let communities: Vec<CommunityReport> = features
        .iter()
        .map(|f| CommunityReport {
            id: f.community,
            size: f.size,
            avgddr: f.avgddr,
            avgmcr: f.avgmcr,
            botnet: botnet_ids.contains(&f.community),
            members: members[f.community].clone(),
        })
        .collect();

    let suspicious_small_communities: Vec<SuspiciousCommunity> = features
        .iter()
        .filter(|f| botnet_ids.contains(&f.community) && f.size < MIN_CLIQUE_SIZE)
        .map(|f| SuspiciousCommunity {
            id: f.community,
            size: f.size,
            avgddr: f.avgddr,
            avgmcr: f.avgmcr,
        })
        .collect();

    let report = DetectionReport {
        config: cfg.clone(),
        stage_counts: StageCounts {
            internal_hosts: internal_hosts.len(),
            p2p_hosts: profiles.len(),
            community_hosts: partition.len(),
            bot_candidates: candidates.bots.len(),
        },
        p2p_hosts,
        communities,
        bot_candidates: BotCandidatesReport {
            hosts: candidates.bots.iter().copied().collect(),
            cliques: candidates
                .cliques
                .iter()
                .map(|c| CliqueReport {
                    community: c.community,
                    members: c.members.clone(),
                })
                .collect(),
        },
        suspicious_small_communities,
        metrics: None,
    };
    let artifacts = PipelineArtifacts {
        profiles,
        mcg,
        partition,
    };
    Ok((report, artifacts))
}

/// Header of the per-host cluster-stats dump.
pub const HOST_STATS_CSV_HEADER: &str = "ip,clusters,contacts,dd,ddr";

/// Writes one CSV row per stage-1 survivor.
pub fn write_host_stats<W: Write>(report: &DetectionReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{HOST_STATS_CSV_HEADER}")?;
    for h in &report.p2p_hosts {
        writeln!(
            w,
            "{},{},{},{},{}",
            h.ip, h.clusters, h.contacts, h.dd, h.ddr
        )?;
    }
    Ok(())
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores a report against ground truth.
///
/// The truth must cover every host the report mentions. Conventions for
/// empty denominators: detection rate over zero bots is 1.0, every other
/// rate over zero hosts is 0.0.
pub fn compute_metrics(report: &DetectionReport, truth: &GroundTruth) -> Result<Metrics> {
    let survivors: Vec<HostId> = report.p2p_hosts.iter().map(|h| h.ip).collect();
    let missing: Vec<HostId> = survivors
        .iter()
        .copied()
        .filter(|&h| !truth.contains(h))
        .collect();
    if let Some(&example) = missing.first() {
        return Err(Error::TruthMismatch {
            missing: missing.len(),
            example: example.to_string(),
        });
    }

    let truth_bots = truth.bots();
    let detected: BTreeSet<HostId> = report.bot_candidates.hosts.iter().copied().collect();
    let detected_bots = detected.intersection(&truth_bots).count();
    let fp = detected.len() - detected_bots;
    let dr = if truth_bots.is_empty() {
        1.0
    } else {
        detected_bots as f64 / truth_bots.len() as f64
    };

    let legit_survivors = survivors
        .iter()
        .filter(|h| !truth_bots.contains(h))
        .count();
    let bots_surviving = survivors.len() - legit_survivors;
    let legit_internal = truth.len() - truth_bots.len();

    let mut bot_communities = 0usize;
    let mut flcr_num = 0usize;
    let mut fbcr_num = 0usize;
    let mut merged_family_communities = 0usize;
    for c in &report.communities {
        let mut bots = 0usize;
        let mut families: BTreeSet<&str> = BTreeSet::new();
        for m in &c.members {
            if let Some(family) = truth.get(*m).and_then(|l| l.family()) {
                bots += 1;
                families.insert(family);
            }
        }
        if bots == 0 {
            continue;
        }
        bot_communities += 1;
        flcr_num += c.members.len() - bots;
        if families.len() > 1 {
            merged_family_communities += 1;
            fbcr_num += bots;
        }
    }

    let family_count = truth.families().len();
    let fbsr_signed = if family_count == 0 {
        0.0
    } else {
        (bot_communities as f64 - family_count as f64) / family_count as f64
    };

    Ok(Metrics {
        dr,
        fp,
        fpr_p2p_hosts: rate(fp, legit_survivors),
        fpr_all_internal: rate(fp, legit_internal),
        flcr: rate(flcr_num, legit_survivors),
        fbcr: rate(fbcr_num, bots_surviving),
        fbsr: fbsr_signed.max(0.0),
        fbsr_signed,
        merged_family_communities,
    })
}

/// Output encodings for [`emit_report`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReportFormat {
    /// The full report as pretty-printed JSON.
    Json,
    /// One CSV row per community. Stage counts repeat on every row so
    /// each line stands alone.
    CsvSummary,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv-summary" => Ok(ReportFormat::CsvSummary),
            other => Err(Error::Config(format!(
                "unknown report format {other:?}, expected json or csv-summary"
            ))),
        }
    }
}

/// Column header of the csv-summary format.
pub const CSV_SUMMARY_HEADER: &str = "internal_hosts,p2p_hosts,community_hosts,bot_candidates,\
community,size,avgddr,avgmcr,botnet,community_bot_candidates";

/// Writes the report in the chosen format.
pub fn emit_report<W: Write>(
    report: &DetectionReport,
    format: ReportFormat,
    mut w: W,
) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
        ReportFormat::CsvSummary => {
            writeln!(w, "{CSV_SUMMARY_HEADER}")?;
            let mut clique_hosts: BTreeMap<usize, BTreeSet<HostId>> = BTreeMap::new();
            for c in &report.bot_candidates.cliques {
                clique_hosts
                    .entry(c.community)
                    .or_default()
                    .extend(c.members.iter().copied());
            }
            let s = report.stage_counts;
            for c in &report.communities {
                let bots = clique_hosts.get(&c.id).map_or(0, BTreeSet::len);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.internal_hosts,
                    s.p2p_hosts,
                    s.community_hosts,
                    s.bot_candidates,
                    c.id,
                    c.size,
                    c.avgddr,
                    c.avgmcr,
                    c.botnet,
                    bots
                )?;
            }
        }
    }
    Ok(())
}
