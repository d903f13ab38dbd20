use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::assign::NeuronAssignment;
use super::Concept;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEdge {
    /// Endpoints ordered by concept index.
    pub a: Concept,
    pub b: Concept,
    pub count: usize,
    /// `count / max count` within the layer.
    pub width: f64,
}

/// Concepts as nodes; an edge counts the neurons of one layer whose primary
/// and secondary concepts are its endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptGraph {
    pub layer: u32,
    pub nodes: Vec<Concept>,
    pub edges: Vec<ConceptEdge>,
}

impl ConceptGraph {
    fn from_counts(layer: u32, counts: BTreeMap<(Concept, Concept), usize>) -> Self {
        let max = counts.values().copied().max().unwrap_or(1) as f64;
        ConceptGraph {
            layer,
            nodes: Concept::ALL.to_vec(),
            edges: counts
                .into_iter()
                .map(|((a, b), count)| ConceptEdge {
                    a,
                    b,
                    count,
                    width: count as f64 / max,
                })
                .collect(),
        }
    }

    /// Undirected DOT with `weight` set to the count and `penwidth` scaled
    /// from the normalized width.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        writeln!(out, "graph \"layer_{}\" {{", self.layer).unwrap();
        out.push_str("  node [shape=ellipse];\n");
        for n in &self.nodes {
            writeln!(out, "  \"{n}\";").unwrap();
        }
        for e in &self.edges {
            writeln!(
                out,
                "  \"{}\" -- \"{}\" [weight={}, penwidth={:.3}];",
                e.a,
                e.b,
                e.count,
                1.0 + 4.0 * e.width
            )
            .unwrap();
        }
        out.push_str("}\n");
        out
    }
}

pub fn build_concept_graph(assignments: &[NeuronAssignment], layer: u32) -> ConceptGraph {
    let mut counts = BTreeMap::new();
    for a in assignments.iter().filter(|a| a.layer == layer) {
        if let Some(s) = a.secondary {
            let key = if a.primary < s { (a.primary, s) } else { (s, a.primary) };
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    ConceptGraph::from_counts(layer, counts)
}

fn quoted(s: &str) -> Option<&str> {
    s.trim().strip_prefix('"')?.strip_suffix('"')
}

/// Reads back the DOT written by [`ConceptGraph::to_dot`]. Widths are
/// recomputed from the edge weights.
pub fn parse_dot(src: &str) -> Result<ConceptGraph> {
    let mut layer = None;
    let mut nodes = Vec::new();
    let mut counts = BTreeMap::new();
    for (i, raw) in src.lines().enumerate() {
        let fail = |msg: String| Error::Validation { line: i + 1, msg };
        let line = raw.trim();
        if line.is_empty() || line == "}" || line.starts_with("node ") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("graph ") {
            let name = quoted(rest.trim_end_matches('{')).ok_or_else(|| fail("unquoted graph name".into()))?;
            let n = name
                .strip_prefix("layer_")
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| fail(format!("graph name {name:?} is not layer_<n>")))?;
            layer = Some(n);
        } else if let Some((lhs, rhs)) = line.split_once(" -- ") {
            let (b, attrs) = rhs
                .split_once('[')
                .ok_or_else(|| fail("edge without attributes".into()))?;
            let parse = |s: &str| -> Result<Concept> {
                quoted(s).ok_or_else(|| fail(format!("unquoted node {s:?}")))?.parse()
            };
            let (a, b) = (parse(lhs)?, parse(b)?);
            let weight = attrs
                .trim_end_matches(';')
                .trim_end_matches(']')
                .split(',')
                .filter_map(|kv| kv.trim().split_once('='))
                .find(|(k, _)| *k == "weight")
                .and_then(|(_, v)| v.parse::<usize>().ok())
                .ok_or_else(|| fail("edge without integer weight".into()))?;
            if a == b || weight == 0 {
                return Err(fail("self-loop or zero-weight edge".into()));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            *counts.entry(key).or_insert(0) += weight;
        } else if let Some(name) = line.strip_suffix(';').and_then(quoted) {
            nodes.push(name.parse::<Concept>()?);
        } else {
            return Err(fail(format!("unrecognized line {line:?}")));
        }
    }
    let layer = layer.ok_or_else(|| Error::Validation {
        line: 1,
        msg: "missing graph header".into(),
    })?;
    let mut g = ConceptGraph::from_counts(layer, counts);
    g.nodes = nodes;
    Ok(g)
}
