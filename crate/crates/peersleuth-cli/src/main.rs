//! Command-line front end for the peersleuth detection pipeline.
//!
//! Four verbs: `detect` runs the stages over a flow capture, `generate`
//! builds a labeled synthetic dataset, `score` grades a stored report
//! against ground truth, and `sweep` traces metric curves over a
//! threshold grid. Exit codes: 0 on success, 2 on configuration errors,
//! 3 on input errors.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use peersleuth::flow::load_flow_csv;
use peersleuth::pipeline::{
    compute_metrics, emit_report, run_pipeline_detailed, write_host_stats, DetectionReport,
    PipelineConfig, ReportFormat,
};
use peersleuth::sweep::{run_sweep, write_sweep_csv, SweepParam};
use peersleuth::synth::{generate_dataset, GenConfig, GroundTruth};
use peersleuth::{Cidr, FlowRecord};

#[derive(Parser)]
#[command(name = "peersleuth", version, about = "P2P botnet detection from flow records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detection stages over a flow capture and emit a report.
    Detect(DetectArgs),
    /// Generate a labeled synthetic dataset.
    Generate(GenerateArgs),
    /// Score a stored detection report against ground truth.
    Score(ScoreArgs),
    /// Rerun detection over a threshold grid and emit the metric curve.
    Sweep(SweepArgs),
}

/// Pipeline settings as flags. Unset flags fall back to the config
/// file, then to the defaults.
#[derive(Args)]
struct ConfigFlags {
    /// Stage-1 cutoff: distinct /16 prefixes a flow cluster must reach.
    #[arg(long)]
    theta_dd: Option<u32>,
    /// Stage-2 cutoff: mutual-contact ratio an edge must exceed.
    #[arg(long)]
    theta_mcr: Option<f64>,
    /// Community filter: minimum mean destination-diversity ratio.
    #[arg(long)]
    theta_avgddr: Option<f64>,
    /// Community filter: minimum mean pairwise mutual-contact ratio.
    #[arg(long)]
    theta_avgmcr: Option<f64>,
    /// Modularity resolution for community detection.
    #[arg(long)]
    resolution: Option<f64>,
    /// Seed for the community-detection RNG.
    #[arg(long)]
    seed: Option<u64>,
    /// Internal address block, repeatable. Overrides the config file's
    /// list entirely when given.
    #[arg(long = "internal-cidr", value_name = "CIDR")]
    internal_cidr: Vec<Cidr>,
    /// Worker-thread cap for the parallel stages.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.theta_dd {
            cfg.theta_dd = v;
        }
        if let Some(v) = self.theta_mcr {
            cfg.theta_mcr = v;
        }
        if let Some(v) = self.theta_avgddr {
            cfg.theta_avgddr = v;
        }
        if let Some(v) = self.theta_avgmcr {
            cfg.theta_avgmcr = v;
        }
        if let Some(v) = self.resolution {
            cfg.louvain_resolution = v;
        }
        if let Some(v) = self.seed {
            cfg.louvain_seed = v;
        }
        if !self.internal_cidr.is_empty() {
            cfg.internal_cidrs = self.internal_cidr.clone();
        }
        if let Some(v) = self.workers {
            cfg.worker_count = v;
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Flow CSV, canonical or raw per-direction form.
    #[arg(long)]
    flows: PathBuf,
    /// Optional key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigFlags,
    /// Ground-truth CSV; when given, metrics are embedded in the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report encoding: json or csv-summary.
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Write per-host cluster stats of stage-1 survivors as CSV.
    #[arg(long, value_name = "PATH")]
    dump_p2p_hosts: Option<PathBuf>,
    /// Write mutual-contact graph edges as `ip ip weight` lines.
    #[arg(long, value_name = "PATH")]
    dump_edges: Option<PathBuf>,
    /// Write mutual-contact graph vertices as `ip ddr` lines.
    #[arg(long, value_name = "PATH")]
    dump_vertices: Option<PathBuf>,
    /// Write community assignments as `ip community` lines.
    #[arg(long, value_name = "PATH")]
    dump_partition: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator settings as JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the generator settings.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives flows.csv, truth.csv and
    /// manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Detection report JSON produced by detect.
    #[arg(long)]
    report: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Metrics destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Flow CSV, canonical or raw per-direction form.
    #[arg(long)]
    flows: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Threshold to vary.
    #[arg(long)]
    param: SweepParam,
    /// Grid values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Optional key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigFlags,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(args) => detect(args),
        Command::Generate(args) => generate(args),
        Command::Score(args) => score(args),
        Command::Sweep(args) => sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<peersleuth::Error>() {
            return match e {
                peersleuth::Error::Config(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn build_config(file: Option<&Path>, flags: &ConfigFlags) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = file {
        let reader = BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        );
        cfg.apply_config_file(reader)
            .with_context(|| format!("reading {}", path.display()))?;
    }
    flags.apply(&mut cfg);
    Ok(cfg)
}

fn load_flows(path: &Path) -> anyhow::Result<Vec<FlowRecord>> {
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    load_flow_csv(reader).with_context(|| format!("parsing {}", path.display()))
}

fn load_truth(path: &Path) -> anyhow::Result<GroundTruth> {
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    GroundTruth::read_csv(reader).with_context(|| format!("parsing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn dump<F>(path: &Path, write: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let mut out = create(path)?;
    write(&mut out)
        .and_then(|()| out.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn with_output<F>(path: Option<&Path>, write: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    match path {
        Some(path) => {
            let mut out = create(path)?;
            write(&mut out)?;
            out.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            write(&mut out)?;
        }
    }
    Ok(())
}

fn detect(args: DetectArgs) -> anyhow::Result<()> {
    let cfg = build_config(args.config.as_deref(), &args.overrides)?;
    let flows = load_flows(&args.flows)?;
    let (mut report, artifacts) = run_pipeline_detailed(&flows, &cfg)?;
    if let Some(truth_path) = &args.truth {
        let truth = load_truth(truth_path)?;
        report.metrics = Some(compute_metrics(&report, &truth)?);
    }

    if let Some(path) = &args.dump_p2p_hosts {
        dump(path, |w| write_host_stats(&report, w))?;
    }
    if let Some(path) = &args.dump_edges {
        dump(path, |w| artifacts.mcg.write_edges(w))?;
    }
    if let Some(path) = &args.dump_vertices {
        dump(path, |w| artifacts.mcg.write_vertices(w))?;
    }
    if let Some(path) = &args.dump_partition {
        dump(path, |w| artifacts.partition.write_assignments(w))?;
    }

    with_output(args.report.as_deref(), |out| {
        emit_report(&report, args.format, out).map_err(Into::into)
    })
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let reader = BufReader::new(
                File::open(path).with_context(|| format!("opening {}", path.display()))?,
            );
            serde_json::from_reader(reader).map_err(|e| {
                peersleuth::Error::Config(format!("{}: {e}", path.display()))
            })?
        }
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let dataset = generate_dataset(&cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let flows_path = args.out.join("flows.csv");
    let mut out = create(&flows_path)?;
    peersleuth::flow::render_flow_csv(&dataset.flows, &mut out)
        .with_context(|| format!("writing {}", flows_path.display()))?;
    out.flush()?;

    let truth_path = args.out.join("truth.csv");
    let mut out = create(&truth_path)?;
    dataset
        .truth
        .write_csv(&mut out)
        .with_context(|| format!("writing {}", truth_path.display()))?;
    out.flush()?;

    let manifest_path = args.out.join("manifest.json");
    let mut out = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut out, &dataset.manifest)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    writeln!(out)?;
    out.flush()?;

    eprintln!(
        "wrote {} flows, {} labels to {}",
        dataset.manifest.flow_count,
        dataset.truth.len(),
        args.out.display()
    );
    Ok(())
}

fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let reader = BufReader::new(
        File::open(&args.report).with_context(|| format!("opening {}", args.report.display()))?,
    );
    let report: DetectionReport = serde_json::from_reader(reader)
        .map_err(peersleuth::Error::from)
        .with_context(|| format!("parsing {}", args.report.display()))?;
    let truth = load_truth(&args.truth)?;
    let metrics = compute_metrics(&report, &truth)?;

    with_output(args.out.as_deref(), |out| {
        serde_json::to_writer_pretty(&mut *out, &metrics).map_err(peersleuth::Error::from)?;
        writeln!(out)?;
        Ok(())
    })
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let cfg = build_config(args.config.as_deref(), &args.overrides)?;
    let flows = load_flows(&args.flows)?;
    let truth = load_truth(&args.truth)?;
    let points = run_sweep(&flows, &cfg, &truth, args.param, &args.values)?;

    with_output(args.out.as_deref(), |out| {
        write_sweep_csv(args.param, &points, out).map_err(Into::into)
    })
}
