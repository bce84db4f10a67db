//! The ROI adjacency graph shared by all subjects.
//!
//! Edge files are UTF-8 text, one undirected edge per line written as
//! `<name-a>\t<name-b>`. Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::sparse::{EdgeList, SparseRows};
use crate::math::Matrix;

const DEFAULT_EDGES: &str = include_str!("../data/desikan_killiany.tsv");
const DEFAULT_REGIONS: &str = include_str!("../data/desikan_killiany_regions.txt");

/// The 34 cortical regions of the default atlas, in canonical order.
pub fn default_roi_names() -> Vec<String> {
    DEFAULT_REGIONS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiGraph {
    names: Vec<String>,
    adjacency: Matrix,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    edge_list: Arc<EdgeList>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphReport {
    pub nodes: usize,
    pub edges: usize,
    pub symmetric: bool,
    pub zero_diagonal: bool,
    pub binary: bool,
    pub degrees: Vec<usize>,
    /// degree -> number of nodes with that degree
    pub degree_histogram: BTreeMap<usize, usize>,
    pub components: usize,
}

impl RoiGraph {
    /// Builds a graph from node names and index pairs. Pairs may come in
    /// either orientation and may repeat; self-loops are rejected.
    pub fn new(
        names: Vec<String>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = names.len();
        let mut seen = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if seen.insert(name.as_str(), i).is_some() {
                return Err(Error::Contract(format!("duplicate node name {name}")));
            }
        }
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::Contract(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::Contract(format!("self-loop on node {}", names[a])));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = Matrix::zeros(n, n);
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            adjacency.set(i, j, 1.0);
            adjacency.set(j, i, 1.0);
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        neighbors.iter_mut().for_each(|v| v.sort_unstable());
        let edge_list = EdgeList::new(n, edges.clone());
        Ok(Self {
            names,
            adjacency,
            edges,
            neighbors,
            edge_list,
        })
    }

    /// Parses edge-file text. `origin` is only used in error messages.
    pub fn parse(text: &str, names: Vec<String>, origin: &Path) -> Result<Self> {
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fmt_err = |message: String| Error::Format {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut parts = line.split('\t').map(str::trim);
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(fmt_err(format!(
                    "expected two tab-separated node names, got {line:?}"
                )));
            };
            let lookup = |name: &str| {
                index
                    .get(name)
                    .copied()
                    .ok_or_else(|| fmt_err(format!("unknown node name {name:?}")))
            };
            let (i, j) = (lookup(a)?, lookup(b)?);
            if i == j {
                return Err(fmt_err(format!("self-loop on {a:?}")));
            }
            pairs.push((i, j));
        }
        Self::new(names, pairs)
    }

    pub fn load(path: &Path, names: Vec<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, names, path)
    }

    /// The shipped 34-region adjacency (a hand reconstruction of cortical
    /// boundaries, see the data file header).
    pub fn default_desikan_killiany() -> Self {
        Self::parse(
            DEFAULT_EDGES,
            default_roi_names(),
            Path::new("<builtin desikan_killiany.tsv>"),
        )
        .expect("builtin graph is well-formed")
    }

    pub fn default_edge_text() -> &'static str {
        DEFAULT_EDGES
    }

    /// Serializes to the edge-file format; edges in index order.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{}\t{}", self.names[i], self.names[j]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_atomic(path, self.to_edge_text().as_bytes())
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_list(&self) -> &Arc<EdgeList> {
        &self.edge_list
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).ok()
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[old] = new;
        }
        if perm.len() != n {
            return Err(Error::Contract("not a permutation".into()));
        }
        let names = perm.iter().map(|&p| self.names[p].clone()).collect();
        let pairs = self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j]));
        Self::new(names, pairs)
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn gcn_operator(&self) -> Arc<SparseRows> {
        let n = self.node_count();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / ((self.neighbors[i].len() + 1) as f64).sqrt())
            .collect();
        let rows = (0..n)
            .map(|i| {
                let mut row = vec![(i, inv_sqrt[i] * inv_sqrt[i])];
                row.extend(
                    self.neighbors[i]
                        .iter()
                        .map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])),
                );
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Arc::new(SparseRows { nodes: n, rows })
    }

    pub fn validate(&self) -> GraphReport {
        let n = self.node_count();
        let a = &self.adjacency;
        let mut symmetric = true;
        let mut binary = true;
        for i in 0..n {
            for j in 0..n {
                let v = a.get(i, j);
                symmetric &= v == a.get(j, i);
                binary &= v == 0.0 || v == 1.0;
            }
        }
        let zero_diagonal = (0..n).all(|i| a.get(i, i) == 0.0);
        let degrees: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| a.get(i, j) != 0.0).count())
            .collect();
        let mut degree_histogram = BTreeMap::new();
        for &d in &degrees {
            *degree_histogram.entry(d).or_insert(0) += 1;
        }
        GraphReport {
            nodes: n,
            edges: self.edges.len(),
            symmetric,
            zero_diagonal,
            binary,
            degrees,
            degree_histogram,
            components: self.component_count(),
        }
    }

    fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &w in &self.neighbors[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }
}
