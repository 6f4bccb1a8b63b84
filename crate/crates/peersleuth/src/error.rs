use std::io;

use thiserror::Error;

/// Errors surfaced by parsing, dataset generation, and the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A flow or ground-truth file failed to parse. `line` is 1-based and
    /// counts the header.
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// A threshold, CIDR list, or generator parameter is out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A contact-set ratio was requested for a host with no contacts.
    #[error("ratio undefined for an empty contact set")]
    EmptyContactSet,

    /// Modularity is undefined when the graph has no edges, unless every
    /// vertex sits in its own community (then it is 0 by convention).
    #[error("modularity undefined: graph has no edges but the partition is not all singletons")]
    DegenerateModularity,

    /// A partition does not line up with the graph it is evaluated against.
    #[error("partition does not match graph: {0}")]
    InvalidPartition(String),

    /// The synthetic dataset generator could not satisfy its own
    /// construction checks with the given parameters.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    /// Scoring was asked to grade hosts the ground truth does not cover.
    #[error("ground truth is missing {missing} host(s) seen in the report, e.g. {example}")]
    TruthMismatch { missing: usize, example: String },

    /// A pipeline stage failed; names the stage around the underlying
    /// error.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
