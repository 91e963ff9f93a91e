//! Directly-follows graph mining and the normalized propagation matrices
//! consumed by the graph-convolution layer.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{ActivityAlphabet, EventLog};

/// Directly-follows graph over the activity alphabet of a log.
///
/// `edge_counts[(i, j)]` is the number of times activity `j` immediately
/// follows activity `i` within a case, summed over all cases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dfg {
    pub num_nodes: usize,
    pub edge_counts: Array2<u64>,
    pub start_activities: BTreeSet<usize>,
    pub end_activities: BTreeSet<usize>,
    /// Total occurrences of each activity, used for node labels on export.
    pub node_frequencies: Vec<u64>,
}

/// The four normalization variants of the propagation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropagationKind {
    Weighted,
    Binary,
    LaplacianWeighted,
    LaplacianBinary,
}

impl PropagationKind {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            PropagationKind::Binary | PropagationKind::LaplacianBinary
        )
    }

    pub fn is_laplacian(self) -> bool {
        matches!(
            self,
            PropagationKind::LaplacianWeighted | PropagationKind::LaplacianBinary
        )
    }
}

/// A symmetric-normalized adjacency (or Laplacian) matrix, ready for the
/// graph-convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationMatrix {
    pub kind: PropagationKind,
    pub matrix: Array2<f64>,
}

/// Counts directly-follows pairs over all consecutive event pairs of each case.
pub fn mine_dfg(log: &EventLog) -> Result<Dfg> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n = log.num_nodes();
    let mut edge_counts = Array2::<u64>::zeros((n, n));
    let mut start_activities = BTreeSet::new();
    let mut end_activities = BTreeSet::new();
    let mut node_frequencies = vec![0u64; n];

    for case in &log.cases {
        start_activities.insert(case.events[0].activity);
        end_activities.insert(case.events[case.len() - 1].activity);
        for event in &case.events {
            node_frequencies[event.activity] += 1;
        }
        for pair in case.events.windows(2) {
            edge_counts[(pair[0].activity, pair[1].activity)] += 1;
        }
    }

    Ok(Dfg {
        num_nodes: n,
        edge_counts,
        start_activities,
        end_activities,
        node_frequencies,
    })
}

impl Dfg {
    /// Edge counts reduced to 0/1 adjacency.
    pub fn binary_adjacency(&self) -> Array2<u64> {
        self.edge_counts.mapv(|c| u64::from(c > 0))
    }
}

/// Builds `D^{-1/2} A D^{-1/2}` (plain kinds) or `D^{-1/2} (D - A) D^{-1/2}`
/// (Laplacian kinds), where `A` is the weighted or binarized adjacency and
/// `D` the diagonal of its row sums. Any node with zero row sum first
/// receives a self-loop of weight 1 so the normalization stays defined.
pub fn propagation_matrix(dfg: &Dfg, kind: PropagationKind) -> Result<PropagationMatrix> {
    let n = dfg.num_nodes;
    let mut adjacency: Array2<f64> = if kind.is_binary() {
        dfg.edge_counts.mapv(|c| f64::from(u8::from(c > 0)))
    } else {
        dfg.edge_counts.mapv(|c| c as f64)
    };

    for i in 0..n {
        if adjacency.row(i).sum() == 0.0 {
            adjacency[(i, i)] = 1.0;
        }
    }

    let degrees: Vec<f64> = (0..n).map(|i| adjacency.row(i).sum()).collect();
    if let Some(node) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::SingularDegree(node));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();

    let mut matrix = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let base = if kind.is_laplacian() {
                let diagonal = if i == j { degrees[i] } else { 0.0 };
                diagonal - adjacency[(i, j)]
            } else {
                adjacency[(i, j)]
            };
            matrix[(i, j)] = inv_sqrt[i] * base * inv_sqrt[j];
        }
    }

    if let Some(bad) = matrix.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "propagation matrix entry ({}, {}) is not finite",
            bad / n,
            bad % n
        )));
    }

    Ok(PropagationMatrix { kind, matrix })
}

/// Renders the graph as DOT text: one node per activity labeled with its
/// raw label and total frequency, one edge per nonzero count labeled with
/// that count. Start activities are drawn bold green, end activities get a
/// double border.
pub fn export_dot(dfg: &Dfg, alphabet: &ActivityAlphabet) -> String {
    let mut out = String::from("digraph dfg {\n  rankdir=LR;\n  node [shape=box];\n");
    for id in 0..dfg.num_nodes {
        let mut attrs = format!(
            "label=\"{} ({})\"",
            alphabet.label(id),
            dfg.node_frequencies[id]
        );
        if dfg.start_activities.contains(&id) {
            attrs.push_str(", style=bold, color=darkgreen");
        }
        if dfg.end_activities.contains(&id) {
            attrs.push_str(", peripheries=2");
        }
        out.push_str(&format!("  \"{}\" [{attrs}];\n", alphabet.label(id)));
    }
    for i in 0..dfg.num_nodes {
        for j in 0..dfg.num_nodes {
            let count = dfg.edge_counts[(i, j)];
            if count > 0 {
                out.push_str(&format!(
                    "  \"{}\" -> \"{}\" [label=\"{count}\"];\n",
                    alphabet.label(i),
                    alphabet.label(j)
                ));
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Writes a real matrix as CSV with 12 significant digits.
pub fn write_matrix_csv<W: Write>(matrix: &Array2<f64>, mut writer: W) -> Result<()> {
    for row in matrix.rows() {
        let line = row
            .iter()
            .map(|v| format!("{v:.11e}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Writes the integer edge-count matrix as CSV.
pub fn write_counts_csv<W: Write>(matrix: &Array2<u64>, mut writer: W) -> Result<()> {
    for row in matrix.rows() {
        let line = row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
