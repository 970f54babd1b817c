//! Clauset-Newman-Moore greedy modularity maximization.

use super::{Graph, NodePermutation};
use std::collections::BTreeMap;

/// Greedy agglomerative modularity maximization.
///
/// Starts from singletons and repeatedly merges the pair of adjacent
/// communities with the largest modularity gain `2 (e_ij - a_i a_j)`; equal
/// gains go to the lexicographically smallest `(i, j)`. Stops when no merge
/// has a positive gain. Communities come back sorted by descending size,
/// then by smallest member, with members ascending.
pub fn greedy_modularity_communities(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.n();
    let m = g.edge_count();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    if m > 0 {
        let unit = 1.0 / (2.0 * m as f64);
        let mut a: Vec<f64> = (0..n).map(|i| g.degree(i) as f64 * unit).collect();
        let mut e: Vec<BTreeMap<usize, f64>> = (0..n)
            .map(|i| g.neighbors(i).iter().map(|&j| (j, unit)).collect())
            .collect();
        let mut alive = vec![true; n];

        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..n {
                if !alive[i] {
                    continue;
                }
                for (&j, &eij) in e[i].range(i + 1..) {
                    let gain = 2.0 * (eij - a[i] * a[j]);
                    if best.map_or(true, |(b, _, _)| gain > b) {
                        best = Some((gain, i, j));
                    }
                }
            }
            let Some((gain, i, j)) = best else { break };
            if gain <= 0.0 {
                break;
            }
            // fold j into i
            let row_j = std::mem::take(&mut e[j]);
            for (k, ejk) in row_j {
                if k == i {
                    continue;
                }
                *e[i].entry(k).or_insert(0.0) += ejk;
                e[k].remove(&j);
                *e[k].entry(i).or_insert(0.0) += ejk;
            }
            e[i].remove(&j);
            a[i] += a[j];
            let moved = std::mem::take(&mut members[j]);
            members[i].extend(moved);
            alive[j] = false;
        }
    }
    let mut communities: Vec<Vec<usize>> = members.into_iter().filter(|c| !c.is_empty()).collect();
    for c in &mut communities {
        c.sort_unstable();
    }
    communities.sort_by(|x, y| y.len().cmp(&x.len()).then(x[0].cmp(&y[0])));
    communities
}

/// Node ordering that lists the greedy-modularity communities contiguously.
pub fn greedy_modularity_reorder(g: &Graph) -> NodePermutation {
    let order = greedy_modularity_communities(g).concat();
    NodePermutation::new(order).expect("communities partition the node set")
}

/// Newman modularity of a partition.
pub fn modularity(g: &Graph, communities: &[Vec<usize>]) -> f64 {
    let m = g.edge_count() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut label = vec![usize::MAX; g.n()];
    for (c, nodes) in communities.iter().enumerate() {
        for &v in nodes {
            label[v] = c;
        }
    }
    let mut inside = vec![0.0; communities.len()];
    let mut degree_sum = vec![0.0; communities.len()];
    for &(i, j) in g.edges() {
        if label[i] == label[j] {
            inside[label[i]] += 1.0;
        }
    }
    for v in 0..g.n() {
        degree_sum[label[v]] += g.degree(v) as f64;
    }
    inside
        .iter()
        .zip(&degree_sum)
        .map(|(&l, &d)| l / m - (d / (2.0 * m)).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::{gen_grid8, gen_random_partition};

    fn two_triangles() -> Graph {
        Graph::from_edges(6, [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]).unwrap()
    }

    #[test]
    fn triangles_are_contiguous() {
        let g = two_triangles();
        let p = greedy_modularity_reorder(&g);
        let first: Vec<usize> = {
            let mut v = p.as_slice()[..3].to_vec();
            v.sort();
            v
        };
        assert!(first == vec![0, 1, 2] || first == vec![3, 4, 5]);
        assert_eq!(p.as_slice(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn triangle_split_is_the_best_two_way_partition() {
        // exhaustive search over all 2-community splits
        let g = two_triangles();
        let mut best = (f64::MIN, 0u32);
        for mask in 1u32..(1 << 6) - 1 {
            let a: Vec<usize> = (0..6).filter(|v| mask >> v & 1 == 1).collect();
            let b: Vec<usize> = (0..6).filter(|v| mask >> v & 1 == 0).collect();
            let q = modularity(&g, &[a, b]);
            if q > best.0 + 1e-12 {
                best = (q, mask);
            }
        }
        let found = greedy_modularity_communities(&g);
        assert_eq!(found.len(), 2);
        assert!((modularity(&g, &found) - best.0).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_is_one_community() {
        let edges = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j)));
        let g = Graph::from_edges(5, edges).unwrap();
        assert_eq!(greedy_modularity_communities(&g), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(greedy_modularity_reorder(&g), NodePermutation::identity(5));
    }

    #[test]
    fn isolated_nodes_stay_single() {
        let g = Graph::from_edges(4, [(0, 1)]).unwrap();
        let c = greedy_modularity_communities(&g);
        assert_eq!(c, vec![vec![0, 1], vec![2], vec![3]]);
        let empty = Graph::from_edges(3, []).unwrap();
        assert_eq!(
            greedy_modularity_reorder(&empty),
            NodePermutation::identity(3)
        );
    }

    #[test]
    fn output_is_always_bijection() {
        for seed in 0..5 {
            let g = gen_random_partition(&[20, 15, 10], 0.3, 0.05, seed).unwrap();
            assert!(greedy_modularity_reorder(&g).is_bijection());
        }
        assert!(greedy_modularity_reorder(&gen_grid8(7).unwrap()).is_bijection());
    }
}
