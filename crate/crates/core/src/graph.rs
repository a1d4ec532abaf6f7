//! Directed sampled graphs and their text exports.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};

/// Directed graph stored by destination: edge `(i, j)` means `j` is an
/// in-neighbour of `i`. Edges are kept sorted by `(i, j)` and each carries the
/// probability it was sampled under.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    edge_prob: Vec<f64>,
}

impl SampledGraph {
    /// Builds a graph from an arbitrary list of `(i, j, p_ij)` triples.
    /// Self-edges, duplicates and out-of-range endpoints are rejected.
    pub fn from_edges(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0; n + 1];
        for w in edges.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Structure(format!("duplicate edge ({}, {})", w[0].0, w[0].1)));
            }
        }
        for &(i, j, _) in &edges {
            if i >= n || j >= n {
                return Err(Error::Index {
                    index: i.max(j),
                    len: n,
                });
            }
            if i == j {
                return Err(Error::Structure(format!("self-edge at node {i}")));
            }
            offsets[i + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            offsets,
            neighbors: edges.iter().map(|e| e.1).collect(),
            edge_prob: edges.iter().map(|e| e.2).collect(),
        })
    }

    /// Assembles a graph from per-node neighbour lists already sorted
    /// ascending.
    pub(crate) fn from_sorted_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut edge_prob = Vec::new();
        for row in rows {
            for (j, p) in row {
                neighbors.push(j);
                edge_prob.push(p);
            }
            offsets.push(neighbors.len());
        }
        Self {
            offsets,
            neighbors,
            edge_prob,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// In-neighbours of `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn neighbor_probs(&self, i: usize) -> &[f64] {
        &self.edge_prob[self.offsets[i]..self.offsets[i + 1]]
    }

    /// The shared in-degree, if every node has the same one.
    pub fn uniform_degree(&self) -> Option<usize> {
        let n = self.num_nodes();
        if n == 0 {
            return None;
        }
        let k = self.degree(0);
        (1..n).all(|i| self.degree(i) == k).then_some(k)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_nodes()).flat_map(move |i| {
            let r = self.offsets[i]..self.offsets[i + 1];
            self.neighbors[r.clone()]
                .iter()
                .zip(&self.edge_prob[r])
                .map(move |(&j, &p)| (i, j, p))
        })
    }

    pub fn edge_probs(&self) -> &[f64] {
        &self.edge_prob
    }

    pub fn mean_edge_prob(&self) -> f64 {
        if self.edge_prob.is_empty() {
            return 0.0;
        }
        self.edge_prob.iter().sum::<f64>() / self.edge_prob.len() as f64
    }

    /// Plain-text edge list: one `i j p_ij` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, j, p) in self.edges() {
            writeln!(w, "{i} {j} {p}")?;
        }
        Ok(())
    }

    /// Graphviz rendering; arrows point from the in-neighbour to the node
    /// that aggregates it.
    pub fn to_dot(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph {name} {{");
        for i in 0..self.num_nodes() {
            let _ = writeln!(s, "  {i};");
        }
        for (i, j, p) in self.edges() {
            let _ = writeln!(s, "  {j} -> {i} [label=\"{p:.4}\"];");
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_sorts_and_validates() {
        let g = SampledGraph::from_edges(3, vec![(2, 0, 0.5), (0, 2, 0.1), (0, 1, 0.3)]).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbor_probs(0), &[0.3, 0.1]);
        assert_eq!(g.degree(1), 0);
        assert_eq!(g.uniform_degree(), None);
        assert!(SampledGraph::from_edges(2, vec![(0, 0, 1.0)]).is_err());
        assert!(SampledGraph::from_edges(2, vec![(0, 1, 1.0), (0, 1, 1.0)]).is_err());
        assert!(SampledGraph::from_edges(2, vec![(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn exports() {
        let g = SampledGraph::from_edges(2, vec![(0, 1, 0.25), (1, 0, 0.25)]).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 1 0.25\n1 0 0.25\n");
        let dot = g.to_dot("layer1");
        assert!(dot.starts_with("digraph layer1 {"));
        assert!(dot.contains("1 -> 0 [label=\"0.2500\"];"));
    }
}
