use rand::seq::index;
use rayon::prelude::*;

use super::FanoutSpec;
use crate::relmodel::{Day, EntityGraph};
use crate::rng::{derive_seed, rng_for, Rng};

/// Incoming neighbors of every node, pooled over all relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    offsets: Vec<usize>,
    sources: Vec<u32>,
}

impl NeighborIndex {
    pub fn build(g: &EntityGraph) -> Self {
        let n = g.num_nodes();
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n];
        for r in &g.relations {
            let (so, to) = (g.blocks[r.src_table].offset, g.blocks[r.dst_table].offset);
            for &(s, t) in &r.edges {
                lists[to + t as usize].push((so + s as usize) as u32);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            sources.extend(l);
            offsets.push(sources.len());
        }
        NeighborIndex { offsets, sources }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn incoming(&self, node: usize) -> &[u32] {
        &self.sources[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn max_degree(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }
}

/// Nodes reached from a set of seeds, in discovery order, with the sampled
/// message edges between them. Local index `i` refers to `nodes[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampledSubgraph {
    pub nodes: Vec<usize>,
    /// Table index of each node.
    pub types: Vec<usize>,
    /// Hop at which each node was first reached (seeds are hop 0).
    pub hops: Vec<u8>,
    /// Message edges (source local, target local).
    pub edges: Vec<(u32, u32)>,
    /// Local index of each requested seed, in request order.
    pub seed_local: Vec<usize>,
    pub layers: usize,
}

impl SampledSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of nodes first reached at each hop.
    pub fn hop_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.layers + 1];
        for &h in &self.hops {
            c[h as usize] += 1;
        }
        c
    }

    /// In-neighbor lists per local node.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.nodes.len()];
        for &(s, t) in &self.edges {
            inc[t as usize].push(s as usize);
        }
        inc
    }

    fn append(&mut self, other: SampledSubgraph) {
        let base = self.nodes.len();
        self.nodes.extend(other.nodes);
        self.types.extend(other.types);
        self.hops.extend(other.hops);
        self.edges.extend(
            other
                .edges
                .into_iter()
                .map(|(s, t)| (s + base as u32, t + base as u32)),
        );
        self.seed_local
            .extend(other.seed_local.into_iter().map(|i| i + base));
    }
}

fn admissible(g: &EntityGraph, node: usize, bound: Option<Day>) -> bool {
    match (bound, g.timestamps[node]) {
        (Some(b), Some(ts)) => ts <= b,
        _ => true,
    }
}

/// Expands each frontier node once, drawing up to `cap_k` distinct incoming
/// neighbors per hop. Neighbors newer than `time_bound` are never drawn.
pub fn sample_neighborhood(
    g: &EntityGraph,
    index: &NeighborIndex,
    seeds: &[usize],
    fanout: &FanoutSpec,
    rng: &mut Rng,
    time_bound: Option<Day>,
) -> SampledSubgraph {
    let mut sub = SampledSubgraph {
        layers: fanout.len(),
        ..Default::default()
    };
    let mut local: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    let mut frontier = Vec::new();
    for &s in seeds {
        let id = *local.entry(s).or_insert_with(|| {
            sub.nodes.push(s);
            sub.types.push(g.node_type(s));
            sub.hops.push(0);
            frontier.push(s);
            (sub.nodes.len() - 1) as u32
        });
        sub.seed_local.push(id as usize);
    }
    let mut pool = Vec::new();
    for (hop, &cap) in fanout.caps().iter().enumerate() {
        let mut next = Vec::new();
        for &v in &frontier {
            pool.clear();
            pool.extend(
                index
                    .incoming(v)
                    .iter()
                    .map(|&u| u as usize)
                    .filter(|&u| admissible(g, u, time_bound)),
            );
            let picked: Vec<usize> = if pool.len() <= cap {
                pool.clone()
            } else {
                index::sample(rng, pool.len(), cap)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            };
            let target = local[&v];
            for u in picked {
                let src = *local.entry(u).or_insert_with(|| {
                    sub.nodes.push(u);
                    sub.types.push(g.node_type(u));
                    sub.hops.push((hop + 1) as u8);
                    next.push(u);
                    (sub.nodes.len() - 1) as u32
                });
                sub.edges.push((src, target));
            }
        }
        frontier = next;
    }
    sub
}

/// One independent neighborhood per (seed, time bound), concatenated. Each
/// seed draws from its own stream derived from `base_seed`, so the result does
/// not depend on batch composition or thread count.
pub fn sample_disjoint(
    g: &EntityGraph,
    index: &NeighborIndex,
    seeds: &[(usize, Option<Day>)],
    fanout: &FanoutSpec,
    base_seed: u64,
) -> SampledSubgraph {
    let parts: Vec<SampledSubgraph> = seeds
        .par_iter()
        .map(|&(node, bound)| {
            let time_key = bound.map_or(u64::MAX, |d| d as i64 as u64);
            let mut rng = rng_for(derive_seed(base_seed, &[node as u64, time_key]), &[]);
            sample_neighborhood(g, index, &[node], fanout, &mut rng, bound)
        })
        .collect();
    let mut out = SampledSubgraph {
        layers: fanout.len(),
        ..Default::default()
    };
    for p in parts {
        out.append(p);
    }
    out
}
