//! Graph metric suite: cycles, weighted diameter, average path length,
//! clustering coefficient and small-world index.
//!
//! Undefined values are `None` (written as JSON `null`), never NaN.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ReasoningGraph;
use crate::numfmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleMode {
    /// Largest visit count of any node, minus one.
    #[default]
    MaxRepeats,
    /// Visit count, minus one, of the first node seen twice.
    FirstRepeat,
}

impl FromStr for CycleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-repeats" => Ok(CycleMode::MaxRepeats),
            "first-repeat" => Ok(CycleMode::FirstRepeat),
            other => Err(Error::contract(format!(
                "unknown cycle mode {other:?} (expected max-repeats or first-repeat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleStats {
    pub has_cycle: bool,
    pub cycle_count: usize,
}

/// `path` with runs of equal adjacent nodes reduced to one visit.
pub fn collapse_adjacent(path: &[usize]) -> Vec<usize> {
    let mut out = path.to_vec();
    out.dedup();
    out
}

/// Revisit statistics of a node path. Adjacent repeats are collapsed first in
/// both modes, so `has_cycle` does not depend on the mode.
pub fn cycle_stats(path: &[usize], mode: CycleMode) -> CycleStats {
    let collapsed = collapse_adjacent(path);
    let mut visits: HashMap<usize, usize> = HashMap::new();
    let mut first_repeat = None;
    for &n in &collapsed {
        let c = visits.entry(n).or_insert(0);
        *c += 1;
        if *c == 2 && first_repeat.is_none() {
            first_repeat = Some(n);
        }
    }
    let cycle_count = match (mode, first_repeat) {
        (_, None) => 0,
        (CycleMode::MaxRepeats, Some(_)) => visits.values().max().copied().unwrap_or(1) - 1,
        (CycleMode::FirstRepeat, Some(n)) => visits[&n] - 1,
    };
    CycleStats {
        has_cycle: first_repeat.is_some(),
        cycle_count,
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Directed adjacency over local node ids `0..nodes.len()`.
struct LocalGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl LocalGraph {
    fn new(graph: &ReasoningGraph) -> Result<Self> {
        let local: HashMap<usize, usize> = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let mut adj = vec![Vec::new(); graph.nodes.len()];
        for e in &graph.edges {
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::contract(format!(
                    "question {:?}: edge {}->{} has invalid weight {}",
                    graph.question_id, e.source, e.target, e.weight
                )));
            }
            let (Some(&u), Some(&v)) = (local.get(&e.source), local.get(&e.target)) else {
                return Err(Error::contract(format!(
                    "question {:?}: edge {}->{} touches a node outside the node set",
                    graph.question_id, e.source, e.target
                )));
            };
            adj[u].push((v, e.weight));
        }
        Ok(LocalGraph { adj })
    }

    fn dijkstra(&self, source: usize) -> Vec<Option<f64>> {
        let mut dist: Vec<Option<f64>> = vec![None; self.adj.len()];
        dist[source] = Some(0.0);
        let mut heap = BinaryHeap::new();
        heap.push(Frontier {
            dist: 0.0,
            node: source,
        });
        while let Some(Frontier { dist: d, node }) = heap.pop() {
            if dist[node].is_some_and(|best| d > best) {
                continue;
            }
            for &(next, w) in &self.adj[node] {
                let nd = d + w;
                if dist[next].is_none_or(|cur| nd < cur) {
                    dist[next] = Some(nd);
                    heap.push(Frontier { dist: nd, node: next });
                }
            }
        }
        dist
    }

    /// Shortest distances over every ordered reachable pair `u != v`.
    fn reachable_distances(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for u in 0..self.adj.len() {
            for (v, d) in self.dijkstra(u).into_iter().enumerate() {
                if v != u {
                    if let Some(d) = d {
                        out.push(d);
                    }
                }
            }
        }
        out
    }
}

/// Largest shortest-path distance over ordered reachable pairs; 0 when no
/// such pair exists.
pub fn diameter(graph: &ReasoningGraph) -> Result<f64> {
    let g = LocalGraph::new(graph)?;
    Ok(g.reachable_distances().into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathClustering {
    /// Mean shortest-path distance over reachable ordered pairs.
    pub avg_path_length: Option<f64>,
    /// Mean local clustering over nodes with at least two undirected neighbours.
    pub clustering: Option<f64>,
    pub n_nodes: usize,
    /// Mean undirected degree.
    pub mean_degree: f64,
}

/// Undirected neighbour sets over local ids.
fn symmetrize(graph: &ReasoningGraph) -> Vec<Vec<usize>> {
    let local: HashMap<usize, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i))
        .collect();
    let mut nbrs = vec![Vec::new(); graph.nodes.len()];
    for e in &graph.edges {
        let (u, v) = (local[&e.source], local[&e.target]);
        nbrs[u].push(v);
        nbrs[v].push(u);
    }
    for n in &mut nbrs {
        n.sort_unstable();
        n.dedup();
    }
    nbrs
}

pub fn path_length_and_clustering(graph: &ReasoningGraph) -> Result<PathClustering> {
    let g = LocalGraph::new(graph)?;
    let dists = g.reachable_distances();
    let avg_path_length = (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64);

    let nbrs = symmetrize(graph);
    let mut local_sum = 0f64;
    let mut counted = 0usize;
    for ns in &nbrs {
        let k = ns.len();
        if k < 2 {
            continue;
        }
        let mut links = 0usize;
        for (i, &a) in ns.iter().enumerate() {
            for &b in &ns[i + 1..] {
                if nbrs[a].binary_search(&b).is_ok() {
                    links += 1;
                }
            }
        }
        local_sum += links as f64 / (k * (k - 1) / 2) as f64;
        counted += 1;
    }
    let clustering = (counted > 0).then(|| local_sum / counted as f64);

    let n_nodes = graph.nodes.len();
    let degree_sum: usize = nbrs.iter().map(Vec::len).sum();
    let mean_degree = if n_nodes == 0 {
        0.0
    } else {
        degree_sum as f64 / n_nodes as f64
    };
    Ok(PathClustering {
        avg_path_length,
        clustering,
        n_nodes,
        mean_degree,
    })
}

/// `S = (C / C_rand) / (L / L_rand)` against the Erdős–Rényi baselines
/// `C_rand = K/(N-1)` and `L_rand = ln N / ln K`, with `K` the mean degree.
/// `None` whenever a term is undefined, a denominator vanishes, or `C = 0`
/// (S is only meaningful as a positive ratio).
pub fn small_world_index(
    avg_path_length: Option<f64>,
    clustering: Option<f64>,
    n_nodes: usize,
    mean_degree: f64,
) -> Option<f64> {
    let (l, c) = (avg_path_length?, clustering?);
    if n_nodes <= 1 || mean_degree <= 1.0 {
        return None;
    }
    let n = n_nodes as f64;
    let c_rand = mean_degree / (n - 1.0);
    let l_rand = n.ln() / mean_degree.ln();
    if c == 0.0 || c_rand == 0.0 || l_rand == 0.0 || !l_rand.is_finite() || l == 0.0 {
        return None;
    }
    let s = (c / c_rand) / (l / l_rand);
    s.is_finite().then_some(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub question_id: String,
    pub has_cycle: bool,
    pub cycle_count: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub diameter: f64,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub avg_path_length: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub clustering_coefficient: Option<f64>,
    #[serde(serialize_with = "numfmt::ser_opt_f64")]
    pub small_world: Option<f64>,
    pub n_nodes: usize,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub mean_degree: f64,
    pub answer_correct: Option<bool>,
}

pub fn compute(graph: &ReasoningGraph, mode: CycleMode) -> Result<GraphMetrics> {
    let cycles = cycle_stats(&graph.path, mode);
    let diameter = diameter(graph)?;
    let pc = path_length_and_clustering(graph)?;
    Ok(GraphMetrics {
        question_id: graph.question_id.clone(),
        has_cycle: cycles.has_cycle,
        cycle_count: cycles.cycle_count,
        diameter,
        avg_path_length: pc.avg_path_length,
        clustering_coefficient: pc.clustering,
        small_world: small_world_index(pc.avg_path_length, pc.clustering, pc.n_nodes, pc.mean_degree),
        n_nodes: pc.n_nodes,
        mean_degree: pc.mean_degree,
        answer_correct: graph.answer_correct,
    })
}

pub fn compute_all(graphs: &[ReasoningGraph], mode: CycleMode) -> Result<Vec<GraphMetrics>> {
    graphs.par_iter().map(|g| compute(g, mode)).collect()
}

/// One JSON object per line, in input order.
pub fn to_jsonl(metrics: &[GraphMetrics]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m).expect("metrics serialize");
        out.push(b'\n');
    }
    out
}
