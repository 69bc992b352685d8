//! Per-question reasoning graphs built from centroid paths.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::clustering::{centroid_distance, Assignment, Codebook};
use crate::error::{Error, Result};
use crate::trace::TraceBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningGraph {
    pub question_id: String,
    /// Centroid index per segment, in generation order.
    pub path: Vec<usize>,
    /// Distinct visited nodes, ascending.
    pub nodes: Vec<usize>,
    /// Distinct transitions in order of first traversal; never self-loops.
    pub edges: Vec<Edge>,
    pub answer_correct: Option<bool>,
}

/// Distinct consecutive transitions of `path`, skipping adjacent repeats.
pub(crate) fn path_transitions(path: &[usize]) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    path.windows(2)
        .map(|w| (w[0], w[1]))
        .filter(|&(u, v)| u != v && seen.insert((u, v)))
        .collect()
}

pub fn build_graph(
    path: &[usize],
    codebook: &Codebook,
    question_id: &str,
    answer_correct: Option<bool>,
) -> Result<ReasoningGraph> {
    if path.is_empty() {
        return Err(Error::contract(format!(
            "question {question_id:?}: cannot build a graph from an empty path"
        )));
    }
    if let Some(&bad) = path.iter().find(|&&i| i >= codebook.num_clusters) {
        return Err(Error::contract(format!(
            "question {question_id:?}: node {bad} outside codebook of {} centroids",
            codebook.num_clusters
        )));
    }
    let nodes: BTreeSet<usize> = path.iter().copied().collect();
    let edges = path_transitions(path)
        .into_iter()
        .map(|(u, v)| {
            Ok(Edge {
                source: u,
                target: v,
                weight: centroid_distance(codebook, u, v)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReasoningGraph {
        question_id: question_id.to_owned(),
        path: path.to_vec(),
        nodes: nodes.into_iter().collect(),
        edges,
        answer_correct,
    })
}

/// One graph per question of `bundle`, in bundle order.
pub fn build_all(
    assignment: &Assignment,
    codebook: &Codebook,
    bundle: &TraceBundle,
) -> Result<Vec<ReasoningGraph>> {
    if assignment.paths.len() != bundle.questions.len() {
        return Err(Error::contract(format!(
            "assignment has {} paths but bundle has {} questions",
            assignment.paths.len(),
            bundle.questions.len()
        )));
    }
    bundle
        .questions
        .par_iter()
        .zip(assignment.paths.par_iter())
        .map(|(q, path)| {
            if path.len() != q.segments.len() {
                return Err(Error::contract(format!(
                    "question {:?}: path length {} but {} segments",
                    q.question_id,
                    path.len(),
                    q.segments.len()
                )));
            }
            build_graph(path, codebook, &q.question_id, q.answer_correct)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(Error::contract(format!(
                "unknown export format {other:?} (expected csv or jsonl)"
            ))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }
}

/// Coordinates per codebook node, `coords[node]` of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    pub dim: usize,
    pub coords: Vec<Vec<f64>>,
}

impl NodeTable {
    pub fn from_codebook(codebook: &Codebook) -> Self {
        NodeTable {
            dim: codebook.dim,
            coords: codebook.centroid_rows().map(<[f64]>::to_vec).collect(),
        }
    }
}

/// Edge list, one record per edge. Weights use the shortest round-trip
/// representation so the export parses back to the same values.
pub fn export_edges(graph: &ReasoningGraph, format: ExportFormat) -> Vec<u8> {
    let mut out = String::new();
    match format {
        ExportFormat::Csv => {
            out.push_str("source,target,weight\n");
            for e in &graph.edges {
                writeln!(out, "{},{},{:?}", e.source, e.target, e.weight).unwrap();
            }
        }
        ExportFormat::Jsonl => {
            for e in &graph.edges {
                writeln!(
                    out,
                    r#"{{"source":{},"target":{},"weight":{:?}}}"#,
                    e.source, e.target, e.weight
                )
                .unwrap();
            }
        }
    }
    out.into_bytes()
}

/// Coordinates of every node in `graph`.
pub fn export_nodes(
    graph: &ReasoningGraph,
    table: &NodeTable,
    format: ExportFormat,
) -> Result<Vec<u8>> {
    let mut out = String::new();
    if format == ExportFormat::Csv {
        out.push_str("node");
        for c in 0..table.dim {
            write!(out, ",coord_{c}").unwrap();
        }
        out.push('\n');
    }
    for &n in &graph.nodes {
        let row = table.coords.get(n).ok_or_else(|| {
            Error::contract(format!(
                "node {n} missing from node table of {} rows",
                table.coords.len()
            ))
        })?;
        match format {
            ExportFormat::Csv => {
                write!(out, "{n}").unwrap();
                for v in row {
                    write!(out, ",{v:?}").unwrap();
                }
                out.push('\n');
            }
            ExportFormat::Jsonl => {
                write!(out, r#"{{"node":{n}"#).unwrap();
                for (c, v) in row.iter().enumerate() {
                    write!(out, r#","coord_{c}":{v:?}"#).unwrap();
                }
                out.push_str("}\n");
            }
        }
    }
    Ok(out.into_bytes())
}
