//! Undirected road-network graph and the sparse precision structure built on it.
//!
//! A vertex is a road segment; an edge joins two segments a vehicle can move
//! between directly. Direction of travel is not modeled, so `(a, b)` and
//! `(b, a)` are the same edge. Vertices are relabeled to contiguous indices in
//! ascending id order and the original ids are kept as labels.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// External road identifier.
///
/// Ordering is "natural": ids that are plain integers compare numerically and
/// sort before all other ids, which compare as strings.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct RoadId(String);

impl RoadId {
    pub fn new(id: impl Into<String>) -> Self {
        RoadId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn numeric(&self) -> Option<i128> {
        self.0.parse().ok()
    }
}

impl Ord for RoadId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.numeric(), other.numeric()) {
            (Some(a), Some(b)) => a.cmp(&b).then_with(|| self.0.cmp(&other.0)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for RoadId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RoadId {
    fn from(s: &str) -> Self {
        RoadId(s.to_owned())
    }
}

impl From<String> for RoadId {
    fn from(s: String) -> Self {
        RoadId(s)
    }
}

macro_rules! road_id_from_int {
    ($($t:ty),*) => {$(
        impl From<$t> for RoadId {
            fn from(v: $t) -> Self {
                RoadId(v.to_string())
            }
        }
    )*};
}
road_id_from_int!(u32, u64, usize, i32, i64);

impl<'de> Deserialize<'de> for RoadId {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Int(i64),
            UInt(u64),
        }
        Ok(match Raw::deserialize(de)? {
            Raw::Str(s) => RoadId(s),
            Raw::Int(v) => RoadId(v.to_string()),
            Raw::UInt(v) => RoadId(v.to_string()),
        })
    }
}

/// Undirected simple graph of road segments.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    labels: Vec<RoadId>,
    index: HashMap<RoadId, usize>,
    /// Canonical `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    fingerprint: String,
}

impl RoadGraph {
    /// Builds a graph from id pairs. Vertices are exactly the ids that appear in an edge.
    pub fn from_pairs<T, I>(pairs: I) -> Result<Self>
    where
        T: Into<RoadId>,
        I: IntoIterator<Item = (T, T)>,
    {
        Self::with_vertices(Vec::<RoadId>::new(), pairs)
    }

    /// Builds a graph from an explicit vertex declaration plus id pairs. Declared
    /// vertices without edges become isolated vertices; edge endpoints are added
    /// to the vertex set.
    pub fn with_vertices<V, T, I>(vertices: impl IntoIterator<Item = V>, pairs: I) -> Result<Self>
    where
        V: Into<RoadId>,
        T: Into<RoadId>,
        I: IntoIterator<Item = (T, T)>,
    {
        let mut ids: BTreeSet<RoadId> = vertices.into_iter().map(Into::into).collect();
        let mut raw = Vec::new();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            if a == b {
                return Err(Error::Structure(format!("self-loop on road {a}")));
            }
            ids.insert(a.clone());
            ids.insert(b.clone());
            raw.push((a, b));
        }
        let labels: Vec<RoadId> = ids.into_iter().collect();
        let index: HashMap<RoadId, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let edges: Vec<(usize, usize)> = raw.iter().map(|(a, b)| (index[a], index[b])).collect();
        Self::assemble(labels, index, edges)
    }

    /// Builds a graph on vertices `0..n` labeled by their index.
    pub fn from_index_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let labels: Vec<RoadId> = (0..n).map(RoadId::from).collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let edges: Vec<(usize, usize)> = edges.into_iter().collect();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::Structure(format!(
                    "edge ({a}, {b}) references a vertex outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::Structure(format!("self-loop on vertex {a}")));
            }
        }
        Self::assemble(labels, index, edges)
    }

    fn assemble(
        labels: Vec<RoadId>,
        index: HashMap<RoadId, usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = labels.len();
        let canonical: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        let edges: Vec<(usize, usize)> = canonical.into_iter().collect();

        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(a, b) in &edges {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }

        let fingerprint = fingerprint_of(&labels, &edges);
        Ok(RoadGraph {
            labels,
            index,
            edges,
            offsets,
            neighbors,
            fingerprint,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn labels(&self) -> &[RoadId] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &RoadId {
        &self.labels[i]
    }

    pub fn index_of(&self, id: &RoadId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Hex SHA-256 over the sorted vertex ids and canonical edge list.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Graph on the same vertex count with vertex `i` renamed to `perm[i]`.
    /// Labels follow the new indices.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::error::ensure_len("permutation", self.n(), perm.len())?;
        let mut seen = vec![false; self.n()];
        for &p in perm {
            if p >= self.n() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidParameter("not a permutation".into()));
            }
        }
        Self::from_index_edges(
            self.n(),
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let net: NetworkFile = serde_json::from_reader(std::io::BufReader::new(file))?;
        net.into_graph()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&NetworkFile::from_graph(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

fn fingerprint_of(labels: &[RoadId], edges: &[(usize, usize)]) -> String {
    let mut hasher = Sha256::new();
    for id in labels {
        hasher.update(b"v:");
        hasher.update(id.as_str().as_bytes());
        hasher.update(b"\n");
    }
    for &(a, b) in edges {
        hasher.update(b"e:");
        hasher.update(labels[a].as_str().as_bytes());
        hasher.update(b",");
        hasher.update(labels[b].as_str().as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|byte| format!("{byte:02x}"))
        .collect()
}

/// On-disk network description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<RoadId>>,
    pub edges: Vec<[RoadId; 2]>,
}

impl NetworkFile {
    pub fn from_graph(g: &RoadGraph) -> Self {
        NetworkFile {
            vertices: Some(g.labels.clone()),
            edges: g
                .edges
                .iter()
                .map(|&(a, b)| [g.labels[a].clone(), g.labels[b].clone()])
                .collect(),
        }
    }

    pub fn into_graph(self) -> Result<RoadGraph> {
        let vertices = self.vertices.unwrap_or_default();
        let declared = vertices.len();
        let unique: BTreeSet<&RoadId> = vertices.iter().collect();
        if unique.len() != declared {
            return Err(Error::Structure("duplicate id in vertex list".into()));
        }
        RoadGraph::with_vertices(vertices, self.edges.into_iter().map(|[a, b]| (a, b)))
    }
}

/// Sparse structure of the symmetric matrix with `epsilon + deg(i)` on the
/// diagonal and `-1` for every edge among the covered vertices.
///
/// Covers either the whole graph (the prior precision C, up to the factor
/// eta) or a vertex subset (the conditional precision A). In the subset case
/// the diagonal still counts every graph neighbor, so rows touching excluded
/// vertices are strictly dominant by more than `epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionPattern {
    epsilon: f64,
    /// Graph vertex of each row.
    vertices: Vec<usize>,
    diag: Vec<f64>,
    /// Local `(r, s)` pairs with `r < s`.
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )))
    }
}

/// The full-graph matrix C.
pub fn precision_pattern(g: &RoadGraph, epsilon: f64) -> Result<PrecisionPattern> {
    check_epsilon(epsilon)?;
    let all: Vec<usize> = (0..g.n()).collect();
    Ok(restrict(g, all, epsilon))
}

/// The matrix A over `unobserved`. Rows follow ascending vertex order.
pub fn subgraph_pattern(
    g: &RoadGraph,
    unobserved: &[usize],
    epsilon: f64,
) -> Result<PrecisionPattern> {
    check_epsilon(epsilon)?;
    let mut vertices = unobserved.to_vec();
    vertices.sort_unstable();
    vertices.dedup();
    if let Some(&bad) = vertices.iter().find(|&&v| v >= g.n()) {
        return Err(Error::Structure(format!(
            "vertex {bad} is not in the graph (n = {})",
            g.n()
        )));
    }
    Ok(restrict(g, vertices, epsilon))
}

fn restrict(g: &RoadGraph, vertices: Vec<usize>, epsilon: f64) -> PrecisionPattern {
    let mut local = vec![usize::MAX; g.n()];
    for (r, &v) in vertices.iter().enumerate() {
        local[v] = r;
    }
    let diag = vertices
        .iter()
        .map(|&v| epsilon + g.degree(v) as f64)
        .collect();
    let mut offsets = Vec::with_capacity(vertices.len() + 1);
    let mut neighbors = Vec::new();
    let mut edges = Vec::new();
    offsets.push(0);
    for (r, &v) in vertices.iter().enumerate() {
        for &w in g.neighbors(v) {
            let s = local[w];
            if s != usize::MAX {
                neighbors.push(s);
                if r < s {
                    edges.push((r, s));
                }
            }
        }
        offsets.push(neighbors.len());
    }
    PrecisionPattern {
        epsilon,
        vertices,
        diag,
        edges,
        offsets,
        neighbors,
    }
}

impl PrecisionPattern {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Graph vertex for each row.
    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    /// Columns holding a `-1` in row `r`.
    pub fn row_neighbors(&self, r: usize) -> &[usize] {
        &self.neighbors[self.offsets[r]..self.offsets[r + 1]]
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|r| {
                let off: f64 = self.row_neighbors(r).iter().map(|&s| x[s]).sum();
                self.diag[r] * x[r] - off
            })
            .collect()
    }

    /// `xᵀ M x`, accumulated edge-wise.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let d: f64 = self.diag.iter().zip(x).map(|(d, v)| d * v * v).sum();
        let e: f64 = self.edges.iter().map(|&(r, s)| x[r] * x[s]).sum();
        d - 2.0 * e
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for r in 0..n {
            m[(r, r)] = self.diag[r];
        }
        for &(r, s) in &self.edges {
            m[(r, s)] = -1.0;
            m[(s, r)] = -1.0;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> RoadGraph {
        RoadGraph::from_pairs([
            (1, 2),
            (1, 3),
            (1, 4),
            (2, 3),
            (2, 4),
            (3, 4),
            (4, 5),
            (4, 6),
            (5, 6),
        ])
        .unwrap()
    }

    fn idx(g: &RoadGraph, id: u32) -> usize {
        g.index_of(&RoadId::from(id)).unwrap()
    }

    #[test]
    fn toy_network_degrees() {
        let g = toy();
        assert_eq!(g.n(), 6);
        assert_eq!(g.edge_count(), 9);
        assert_eq!(g.degree(idx(&g, 1)), 3);
        assert_eq!(g.degree(idx(&g, 4)), 5);
    }

    #[test]
    fn orientation_and_repeats_collapse() {
        let g = RoadGraph::from_pairs([("a", "b"), ("b", "a"), ("a", "b")]).unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn declared_isolated_vertex() {
        let g = RoadGraph::with_vertices(["a"], Vec::<(&str, &str)>::new()).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.degree(0), 0);
    }

    #[test]
    fn empty_pairs_give_empty_graph() {
        let g = RoadGraph::from_pairs(Vec::<(u32, u32)>::new()).unwrap();
        assert_eq!(g.n(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn self_pair_rejected() {
        let err = RoadGraph::from_pairs([(1, 2), (3, 3)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn ids_sort_naturally() {
        let g = RoadGraph::from_pairs([(10, 2), (2, 1)]).unwrap();
        let labels: Vec<&str> = g.labels().iter().map(RoadId::as_str).collect();
        assert_eq!(labels, ["1", "2", "10"]);
        let g = RoadGraph::from_pairs([("x", "10"), ("b", "9")]).unwrap();
        let labels: Vec<&str> = g.labels().iter().map(RoadId::as_str).collect();
        assert_eq!(labels, ["9", "10", "b", "x"]);
    }

    #[test]
    fn toy_precision_diagonal() {
        let p = precision_pattern(&toy(), 1e-4).unwrap();
        let expected = [3.0001, 3.0001, 3.0001, 5.0001, 2.0001, 2.0001];
        for (d, e) in p.diag().iter().zip(expected) {
            assert!((d - e).abs() < 1e-12);
        }
        assert_eq!(p.edges().len(), 9);
    }

    #[test]
    fn single_vertex_pattern() {
        let g = RoadGraph::with_vertices(["only"], Vec::<(&str, &str)>::new()).unwrap();
        let p = precision_pattern(&g, 1.0).unwrap();
        assert_eq!(p.diag(), &[1.0]);
        assert!(p.edges().is_empty());
    }

    #[test]
    fn path_graph_pattern_matches_hand_assembly() {
        let g = RoadGraph::from_pairs([(1, 2), (2, 3)]).unwrap();
        let p = precision_pattern(&g, 0.5).unwrap();
        assert_eq!(p.diag(), &[1.5, 2.5, 1.5]);
        assert_eq!(p.edges(), &[(0, 1), (1, 2)]);
        let dense = p.to_dense();
        let hand = nalgebra::DMatrix::from_row_slice(
            3,
            3,
            &[1.5, -1.0, 0.0, -1.0, 2.5, -1.0, 0.0, -1.0, 1.5],
        );
        assert_eq!(dense, hand);
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        assert!(matches!(
            precision_pattern(&toy(), 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(precision_pattern(&toy(), -1.0).is_err());
        assert!(subgraph_pattern(&toy(), &[0], 0.0).is_err());
    }

    #[test]
    fn subgraph_single_hub() {
        let g = toy();
        let p = subgraph_pattern(&g, &[idx(&g, 4)], 1e-4).unwrap();
        assert_eq!(p.dim(), 1);
        assert!((p.diag()[0] - 5.0001).abs() < 1e-12);
        assert!(p.edges().is_empty());
    }

    #[test]
    fn subgraph_pair_keeps_internal_edge_only() {
        let g = toy();
        let p = subgraph_pattern(&g, &[idx(&g, 5), idx(&g, 6)], 1e-4).unwrap();
        assert!((p.diag()[0] - 2.0001).abs() < 1e-12);
        assert!((p.diag()[1] - 2.0001).abs() < 1e-12);
        assert_eq!(p.edges(), &[(0, 1)]);
    }

    #[test]
    fn subgraph_of_everything_is_full_pattern() {
        let g = toy();
        let all: Vec<usize> = (0..g.n()).collect();
        assert_eq!(
            subgraph_pattern(&g, &all, 1e-4).unwrap(),
            precision_pattern(&g, 1e-4).unwrap()
        );
    }

    #[test]
    fn subgraph_unknown_vertex_rejected() {
        assert!(matches!(
            subgraph_pattern(&toy(), &[6], 1e-4),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn json_round_trip_preserves_fingerprint() {
        let g = RoadGraph::with_vertices(["iso"], [("a", "b"), ("b", "c")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        g.write_json(&path).unwrap();
        let back = RoadGraph::read_json(&path).unwrap();
        assert_eq!(back.fingerprint(), g.fingerprint());
        assert_eq!(back.n(), 4);
        assert_eq!(back.degree(back.index_of(&"iso".into()).unwrap()), 0);
    }

    #[test]
    fn json_accepts_numeric_ids_and_missing_vertex_list() {
        let net: NetworkFile = serde_json::from_str(r#"{"edges": [[1, 2], ["2", 3]]}"#).unwrap();
        let g = net.into_graph().unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn fingerprint_ignores_input_order() {
        let a = RoadGraph::from_pairs([(1, 2), (2, 3)]).unwrap();
        let b = RoadGraph::from_pairs([(3, 2), (2, 1), (1, 2)]).unwrap();
        let c = RoadGraph::from_pairs([(1, 2), (1, 3)]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
