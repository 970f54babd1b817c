//! Undirected simple graphs, the five synthetic network families and the
//! community-based node ordering used to lay states out on a grid.

mod community;
mod generators;
mod io;

pub use community::{greedy_modularity_communities, greedy_modularity_reorder, modularity};
pub use generators::{
    default_partition_sizes, gen_barabasi_albert, gen_erdos_renyi, gen_grid8, gen_newman_watts,
    gen_random_partition, Family,
};
pub use io::{edgelist_string, read_edgelist, write_edgelist};

use crate::error::{invalid, Result};
use std::collections::BTreeSet;

/// Undirected graph without self-loops or parallel edges.
///
/// Edges are kept as `(i, j)` with `i < j` in ascending order; adjacency
/// lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    /// Planted block of each node for partition models.
    blocks: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Orientation of each pair is ignored;
    /// self-loops, out-of-range endpoints and repeated pairs are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(invalid(format!("self-loop at node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(invalid(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self::from_sorted_set(n, set))
    }

    pub(crate) fn from_sorted_set(n: usize, set: BTreeSet<(usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in &set {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            n,
            edges: set.into_iter().collect(),
            adjacency,
            blocks: None,
        }
    }

    pub fn with_blocks(mut self, blocks: Vec<usize>) -> Result<Self> {
        if blocks.len() != self.n {
            return Err(invalid("block vector length differs from node count"));
        }
        self.blocks = Some(blocks);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    /// Sizes of the planted blocks, in block order.
    pub fn block_sizes(&self) -> Option<Vec<usize>> {
        let blocks = self.blocks.as_ref()?;
        let count = blocks.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; count];
        for &b in blocks {
            sizes[b] += 1;
        }
        Some(sizes)
    }

    /// Dense 0/1 adjacency matrix (tests and small oracles only).
    pub fn dense_adjacency(&self) -> crate::Matrix {
        let mut a = crate::Matrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Relabels nodes so that `order[k]` becomes node `k`.
    pub fn relabel(&self, order: &NodePermutation) -> Result<Self> {
        if order.len() != self.n {
            return Err(invalid("permutation length differs from node count"));
        }
        let new_id = order.inverse();
        let set = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (new_id[i], new_id[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        let mut g = Self::from_sorted_set(self.n, set);
        if let Some(blocks) = &self.blocks {
            g.blocks = Some(order.as_slice().iter().map(|&old| blocks[old]).collect());
        }
        Ok(g)
    }

    /// Checks every structural invariant; used by tests and loaders.
    pub fn validate(&self) -> Result<()> {
        let mut prev = None;
        for &(i, j) in &self.edges {
            if i >= j || j >= self.n {
                return Err(invalid(format!("bad edge ({i}, {j})")));
            }
            if prev.is_some_and(|p| p >= (i, j)) {
                return Err(invalid("edges not strictly ascending"));
            }
            prev = Some((i, j));
        }
        let mut degree = vec![0usize; self.n];
        for &(i, j) in &self.edges {
            degree[i] += 1;
            degree[j] += 1;
        }
        for (i, list) in self.adjacency.iter().enumerate() {
            if list.len() != degree[i] {
                return Err(invalid(format!("degree mismatch at node {i}")));
            }
            for &j in list {
                if !self.adjacency[j].contains(&i) {
                    return Err(invalid(format!("asymmetric adjacency at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// A bijection on `0..n`, listed as the old node id at each new position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePermutation(Vec<usize>);

impl NodePermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(invalid("not a permutation"));
            }
        }
        Ok(Self(perm))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Position of each old node id.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.0.len()];
        for (pos, &old) in self.0.iter().enumerate() {
            inv[old] = pos;
        }
        inv
    }

    pub fn is_bijection(&self) -> bool {
        let mut sorted = self.0.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &v)| i == v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_edges() {
        assert!(Graph::from_edges(3, [(0, 0)]).is_err());
        assert!(Graph::from_edges(3, [(0, 3)]).is_err());
        assert!(Graph::from_edges(3, [(0, 1), (1, 0)]).is_err());
        assert!(Graph::from_edges(0, []).is_err());
    }

    #[test]
    fn relabel_preserves_structure() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let p = NodePermutation::new(vec![3, 1, 0, 2]).unwrap();
        let h = g.relabel(&p).unwrap();
        h.validate().unwrap();
        // old 0 -> new 2, old 1 -> 1, old 2 -> 3, old 3 -> 0
        assert_eq!(h.edges(), &[(0, 3), (1, 2), (1, 3)]);
        let mut dg = g.degrees();
        let mut dh = h.degrees();
        dg.sort();
        dh.sort();
        assert_eq!(dg, dh);
    }

    #[test]
    fn permutation_checks() {
        assert!(NodePermutation::new(vec![0, 0]).is_err());
        assert!(NodePermutation::new(vec![1, 2]).is_err());
        let p = NodePermutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse(), vec![1, 2, 0]);
    }
}
