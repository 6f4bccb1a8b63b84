//! Detection of peer-to-peer botnets in aggregated network flow data.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`p2p`] clusters each host's flows by traffic pattern and keeps hosts
//!    whose clusters reach many distinct /16 networks, a signature of
//!    decentralized peer discovery.
//! 2. [`mcg`] links surviving hosts that share an unusually large fraction
//!    of contacted peers into a weighted mutual-contact graph.
//! 3. [`community`] partitions that graph into communities by modularity
//!    maximization.
//! 4. [`botnet`] flags communities whose average destination diversity and
//!    mutual-contact weight look bot-like, then extracts tightly connected
//!    bot candidates as maximum cliques.
//!
//! [`synth`] generates labeled synthetic datasets for evaluation and
//! [`pipeline`] ties the stages together behind one configuration, with
//! [`sweep`] running threshold sensitivity grids.
//!
//! Stage internals are data-parallel via rayon when the default `parallel`
//! feature is on; every parallel operation also ships a `_sequential`
//! variant that produces identical results.

pub mod botnet;
pub mod community;
pub mod error;
pub mod flow;
pub mod mcg;
pub mod p2p;
pub mod pipeline;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
pub use flow::{Cidr, FlowPattern, FlowRecord, HostId, Protocol};
pub use pipeline::{DetectionReport, PipelineConfig};
