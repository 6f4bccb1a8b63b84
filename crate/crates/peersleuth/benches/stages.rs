//! Compares the data-parallel stage implementations against their
//! sequential twins on mid-sized synthetic workloads.
//!
//! Run with `cargo bench -p peersleuth`.

use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use peersleuth::flow::{FlowPattern, FlowRecord, HostId, Protocol};
use peersleuth::mcg::{extract_mcg_parallel, extract_mcg_sequential, McrThreshold};
use peersleuth::p2p::{cluster_flows_parallel, cluster_flows_sequential, HostProfiles, P2pHostProfile};

fn random_flows(n: usize) -> Vec<FlowRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut flows = Vec::with_capacity(n);
    while flows.len() < n {
        let src = HostId::from_u32(rng.gen_range(0..200));
        let dst = HostId::from_u32(rng.gen());
        if src == dst {
            continue;
        }
        let proto = if rng.gen() { Protocol::Tcp } else { Protocol::Udp };
        let record = FlowRecord::new(src, dst, proto, rng.gen_range(1..=12), rng.gen_range(1..=12));
        flows.push(record.unwrap());
    }
    flows
}

fn random_profiles(n: u32) -> HostProfiles {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patterns: Vec<FlowPattern> = (0..6)
        .map(|i| FlowPattern {
            proto: Protocol::Udp,
            bpp_out: 100 + i,
            bpp_in: 200 + i,
        })
        .collect();
    (0..n)
        .map(|i| {
            let me = HostId::from_u32(1_000_000 + i);
            let contacts: BTreeSet<HostId> = (0..rng.gen_range(200..800))
                .map(|_| HostId::from_u32(rng.gen_range(0..20_000)))
                .collect();
            let mut pats = BTreeSet::new();
            pats.insert(patterns[rng.gen_range(0..patterns.len())]);
            pats.insert(patterns[rng.gen_range(0..patterns.len())]);
            let profile = P2pHostProfile {
                host: me,
                mnf_clusters: Vec::new(),
                contacts,
                patterns: pats,
            };
            (me, profile)
        })
        .collect()
}

fn bench_clustering(c: &mut Criterion) {
    let flows = random_flows(200_000);
    let mut group = c.benchmark_group("cluster_flows");
    group.throughput(Throughput::Elements(flows.len() as u64));
    group.bench_function("sequential", |b| {
        b.iter(|| cluster_flows_sequential(black_box(&flows)))
    });
    group.bench_function("parallel", |b| {
        b.iter(|| cluster_flows_parallel(black_box(&flows)))
    });
    group.finish();
}

fn bench_mcg_extraction(c: &mut Criterion) {
    let profiles = random_profiles(300);
    let theta = McrThreshold::new(0.02).unwrap();
    let mut group = c.benchmark_group("extract_mcg");
    group.throughput(Throughput::Elements(profiles.len() as u64));
    group.bench_function("sequential", |b| {
        b.iter(|| extract_mcg_sequential(black_box(&profiles), theta).unwrap())
    });
    group.bench_function("parallel", |b| {
        b.iter(|| extract_mcg_parallel(black_box(&profiles), theta).unwrap())
    });
    group.finish();
}

criterion_group!(stages, bench_clustering, bench_mcg_extraction);
criterion_main!(stages);
