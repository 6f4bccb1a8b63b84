//! Threshold sweep harness: rerun the full pipeline over a value grid
//! for one threshold and collect the metric curve.
//!
//! Sweeps answer "how does detection degrade as this knob moves" on a
//! labeled dataset. Each grid point reruns [`run_pipeline`] with the
//! base configuration plus the swept value and scores the result, so a
//! curve of n points costs n full runs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowRecord;
use crate::pipeline::{compute_metrics, run_pipeline, Metrics, PipelineConfig, StageCounts};
use crate::synth::GroundTruth;

/// The threshold a sweep varies; everything else stays at the base
/// configuration.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    ThetaDd,
    ThetaMcr,
    ThetaAvgddr,
    ThetaAvgmcr,
}

impl SweepParam {
    /// The flag spelling, used as the first CSV column name.
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::ThetaDd => "theta-dd",
            SweepParam::ThetaMcr => "theta-mcr",
            SweepParam::ThetaAvgddr => "theta-avgddr",
            SweepParam::ThetaAvgmcr => "theta-avgmcr",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "theta-dd" => Ok(SweepParam::ThetaDd),
            "theta-mcr" => Ok(SweepParam::ThetaMcr),
            "theta-avgddr" => Ok(SweepParam::ThetaAvgddr),
            "theta-avgmcr" => Ok(SweepParam::ThetaAvgmcr),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}, expected theta-dd, theta-mcr, \
                 theta-avgddr or theta-avgmcr"
            ))),
        }
    }
}

/// One grid point: the swept value, and what the pipeline did there.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub stage_counts: StageCounts,
    pub metrics: Metrics,
}

fn apply_param(cfg: &mut PipelineConfig, param: SweepParam, value: f64) -> Result<()> {
    match param {
        SweepParam::ThetaDd => {
            if value.fract() != 0.0 || value < 1.0 || value > u32::MAX as f64 {
                return Err(Error::Config(format!(
                    "theta-dd sweep values must be positive integers, got {value}"
                )));
            }
            cfg.theta_dd = value as u32;
        }
        SweepParam::ThetaMcr => cfg.theta_mcr = value,
        SweepParam::ThetaAvgddr => cfg.theta_avgddr = value,
        SweepParam::ThetaAvgmcr => cfg.theta_avgmcr = value,
    }
    Ok(())
}

/// Runs the pipeline once per value and scores each run against the
/// truth. Points come back in grid order.
pub fn run_sweep(
    flows: &[FlowRecord],
    base: &PipelineConfig,
    truth: &GroundTruth,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        apply_param(&mut cfg, param, value)?;
        let report = run_pipeline(flows, &cfg)?;
        let metrics = compute_metrics(&report, truth)?;
        points.push(SweepPoint {
            value,
            stage_counts: report.stage_counts,
            metrics,
        });
    }
    Ok(points)
}

const SWEEP_CSV_COLUMNS: &str = "internal_hosts,p2p_hosts,community_hosts,bot_candidates,\
dr,fp,fpr_p2p_hosts,fpr_all_internal,flcr,fbcr,fbsr,fbsr_signed,merged_family_communities";

/// Writes the curve as CSV, one row per grid point. The first column is
/// named after the swept parameter.
pub fn write_sweep_csv<W: Write>(
    param: SweepParam,
    points: &[SweepPoint],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{},{}", param.key(), SWEEP_CSV_COLUMNS)?;
    for p in points {
        let s = p.stage_counts;
        let m = p.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.value,
            s.internal_hosts,
            s.p2p_hosts,
            s.community_hosts,
            s.bot_candidates,
            m.dr,
            m.fp,
            m.fpr_p2p_hosts,
            m.fpr_all_internal,
            m.flcr,
            m.fbcr,
            m.fbsr,
            m.fbsr_signed,
            m.merged_family_communities
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, BackgroundSpec, BotnetSpec, GenConfig, P2pAppSpec, SyntheticDataset};

    fn small_dataset() -> SyntheticDataset {
        generate_dataset(&GenConfig {
            internal_hosts: 60,
            seed: 1,
            min_injected_dd: 20,
            background: BackgroundSpec {
                private_server_pool: 400,
                ..BackgroundSpec::default()
            },
            botnets: vec![BotnetSpec {
                family: "alpha".into(),
                bot_count: 4,
                peer_pool_size: 120,
                shared_contact_rate: 0.5,
            }],
            p2p_apps: vec![P2pAppSpec {
                app: "share-a".into(),
                host_count: 3,
                universe_size: 2_000,
                universe_prefixes: 50,
                contacts_per_host: 300,
            }],
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn base_config(dataset: &SyntheticDataset) -> PipelineConfig {
        PipelineConfig {
            theta_dd: 20,
            internal_cidrs: dataset.manifest.internal_cidrs.clone(),
            worker_count: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn params_parse_and_print_their_flag_names() {
        for param in [
            SweepParam::ThetaDd,
            SweepParam::ThetaMcr,
            SweepParam::ThetaAvgddr,
            SweepParam::ThetaAvgmcr,
        ] {
            assert_eq!(param.key().parse::<SweepParam>().unwrap(), param);
            assert_eq!(param.to_string(), param.key());
        }
        assert_eq!(
            "theta_avgddr".parse::<SweepParam>().unwrap(),
            SweepParam::ThetaAvgddr
        );
        assert!("gamma".parse::<SweepParam>().is_err());
    }

    #[test]
    fn theta_dd_values_must_be_positive_integers() {
        let dataset = small_dataset();
        let base = base_config(&dataset);
        for bad in [10.5, 0.0, -3.0] {
            let err = run_sweep(
                &dataset.flows,
                &base,
                &dataset.truth,
                SweepParam::ThetaDd,
                &[bad],
            )
            .unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn raising_theta_dd_shrinks_survivors_and_kills_detection() {
        let dataset = small_dataset();
        let base = base_config(&dataset);
        let values = [10.0, 20.0, 25.0, 60.0];
        let points = run_sweep(
            &dataset.flows,
            &base,
            &dataset.truth,
            SweepParam::ThetaDd,
            &values,
        )
        .unwrap();

        assert_eq!(points.len(), values.len());
        for pair in points.windows(2) {
            assert!(
                pair[0].stage_counts.p2p_hosts >= pair[1].stage_counts.p2p_hosts,
                "survivor count increased from {:?} to {:?}",
                pair[0],
                pair[1]
            );
        }
        assert_eq!(points[0].metrics.dr, 1.0);
        assert_eq!(points[1].metrics.dr, 1.0);
        assert_eq!(points[2].metrics.dr, 0.0, "bots fall below theta-dd 25");
        assert_eq!(points[3].stage_counts.p2p_hosts, 0);
        assert_eq!(points[3].metrics.dr, 0.0);
    }

    #[test]
    fn raising_theta_mcr_splits_the_botnet_community() {
        let dataset = small_dataset();
        let base = base_config(&dataset);
        let points = run_sweep(
            &dataset.flows,
            &base,
            &dataset.truth,
            SweepParam::ThetaMcr,
            &[0.03125, 0.6],
        )
        .unwrap();

        assert_eq!(points[0].metrics.fbsr, 0.0);
        assert_eq!(points[0].metrics.dr, 1.0);
        assert!(
            points[1].metrics.fbsr > 0.0,
            "bot edges vanish above their pairwise ratio, splitting the family"
        );
        assert_eq!(points[1].metrics.dr, 0.0, "singletons hold no cliques");
        for p in &points {
            assert_eq!(p.metrics.flcr, 0.0);
            assert_eq!(p.metrics.fbcr, 0.0);
        }
    }

    #[test]
    fn raising_botnet_thresholds_never_improves_detection() {
        let dataset = small_dataset();
        let base = base_config(&dataset);
        for param in [SweepParam::ThetaAvgddr, SweepParam::ThetaAvgmcr] {
            let points = run_sweep(
                &dataset.flows,
                &base,
                &dataset.truth,
                param,
                &[0.0625, 0.25, 0.45, 0.8, 1.0],
            )
            .unwrap();
            for pair in points.windows(2) {
                assert!(
                    pair[0].metrics.dr >= pair[1].metrics.dr,
                    "{param}: dr rose from {} to {}",
                    pair[0].metrics.dr,
                    pair[1].metrics.dr
                );
            }
            assert_eq!(points[0].metrics.dr, 1.0);
            assert_eq!(points.last().unwrap().metrics.dr, 0.0);
        }
    }

    #[test]
    fn sweep_csv_has_one_row_per_point() {
        let dataset = small_dataset();
        let base = base_config(&dataset);
        let points = run_sweep(
            &dataset.flows,
            &base,
            &dataset.truth,
            SweepParam::ThetaAvgmcr,
            &[0.25, 0.5, 0.75],
        )
        .unwrap();

        let mut buf = Vec::new();
        write_sweep_csv(SweepParam::ThetaAvgmcr, &points, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), points.len() + 1);
        assert!(lines[0].starts_with("theta-avgmcr,"));
        assert!(lines[1].starts_with("0.25,"));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 14);
        }
    }
}
