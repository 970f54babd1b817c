use super::Graph;
use crate::error::{invalid, Result};
use crate::rng::seeded;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// The five network families used throughout the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Grid,
    Random,
    PowerLaw,
    SmallWorld,
    Community,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Grid,
        Family::Random,
        Family::PowerLaw,
        Family::SmallWorld,
        Family::Community,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Grid => "grid",
            Family::Random => "random",
            Family::PowerLaw => "power-law",
            Family::SmallWorld => "small-world",
            Family::Community => "community",
        }
    }

    /// Generates an `n`-node member of the family with the default parameters:
    /// 8-neighbour grid (n must be a square), G(n, 0.1), BA with m = 5,
    /// Newman-Watts with k = 5, p = 0.5, and a four-block partition with
    /// p_in = 0.25, p_out = 0.01.
    pub fn generate(self, n: usize, seed: u64) -> Result<Graph> {
        match self {
            Family::Grid => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(invalid(format!("grid needs a square node count, got {n}")));
                }
                gen_grid8(side)
            }
            Family::Random => gen_erdos_renyi(n, 0.1, seed),
            Family::PowerLaw => gen_barabasi_albert(n, 5, seed),
            Family::SmallWorld => gen_newman_watts(n, 5, 0.5, seed),
            Family::Community => {
                gen_random_partition(&default_partition_sizes(n)?, 0.25, 0.01, seed)
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "grid" => Family::Grid,
            "random" | "er" | "erdos-renyi" => Family::Random,
            "power-law" | "powerlaw" | "ba" | "barabasi-albert" => Family::PowerLaw,
            "small-world" | "smallworld" | "ws" | "nw" | "newman-watts" => Family::SmallWorld,
            "community" | "partition" | "sbm" => Family::Community,
            other => return Err(invalid(format!("unknown network family '{other}'"))),
        })
    }
}

/// `N x N` lattice where every node links to its Moore neighbourhood.
/// Node `(r, c)` has index `r * N + c`.
pub fn gen_grid8(side: usize) -> Result<Graph> {
    if side < 2 {
        return Err(invalid(format!("grid side must be >= 2, got {side}")));
    }
    let mut set = BTreeSet::new();
    for r in 0..side as isize {
        for c in 0..side as isize {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= side as isize || nc >= side as isize {
                        continue;
                    }
                    let a = (r as usize) * side + c as usize;
                    let b = (nr as usize) * side + nc as usize;
                    set.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    Ok(Graph::from_sorted_set(side * side, set))
}

/// G(n, p): every unordered pair is drawn independently, in lexicographic order.
pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    check_probability(p, "p")?;
    let mut rng = seeded(seed);
    let mut set = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                set.insert((i, j));
            }
        }
    }
    Ok(Graph::from_sorted_set(n, set))
}

/// Preferential attachment starting from `m` isolated seed nodes. The first
/// arrival links to all seeds; every later arrival picks `m` distinct targets
/// from the degree-weighted pool, resampling on repeats.
pub fn gen_barabasi_albert(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || m >= n {
        return Err(invalid(format!("need 1 <= m < n, got m = {m}, n = {n}")));
    }
    let mut rng = seeded(seed);
    let mut set = BTreeSet::new();
    // Every endpoint of every edge, so uniform draws are degree-proportional.
    let mut pool: Vec<usize> = Vec::with_capacity(2 * m * (n - m));
    let mut targets: Vec<usize> = (0..m).collect();
    for source in m..n {
        for &t in &targets {
            set.insert((t.min(source), t.max(source)));
        }
        pool.extend_from_slice(&targets);
        pool.extend(std::iter::repeat(source).take(m));
        let mut chosen = BTreeSet::new();
        while chosen.len() < m {
            chosen.insert(pool[rng.gen_range(0..pool.len())]);
        }
        targets = chosen.into_iter().collect();
    }
    Ok(Graph::from_sorted_set(n, set))
}

/// Newman-Watts small world: a ring lattice with `k / 2` neighbours per side,
/// plus, for each lattice edge `(u, v)` with probability `p`, one shortcut
/// from `u` to a uniformly drawn node that is neither `u` nor adjacent to it.
pub fn gen_newman_watts(n: usize, k: usize, p: f64, seed: u64) -> Result<Graph> {
    if k < 2 || k >= n {
        return Err(invalid(format!("need n > k >= 2, got n = {n}, k = {k}")));
    }
    check_probability(p, "p")?;
    let mut rng = seeded(seed);
    let half = k / 2;
    let mut lattice = Vec::with_capacity(n * half);
    let mut set = BTreeSet::new();
    let mut degree = vec![0usize; n];
    for j in 1..=half {
        for u in 0..n {
            let v = (u + j) % n;
            if set.insert((u.min(v), u.max(v))) {
                lattice.push((u, v));
                degree[u] += 1;
                degree[v] += 1;
            }
        }
    }
    for (u, _) in lattice {
        if rng.gen::<f64>() >= p {
            continue;
        }
        if degree[u] >= n - 1 {
            continue;
        }
        loop {
            let w = rng.gen_range(0..n);
            if w != u && set.insert((u.min(w), u.max(w))) {
                degree[u] += 1;
                degree[w] += 1;
                break;
            }
        }
    }
    Ok(Graph::from_sorted_set(n, set))
}

/// Planted partition: within-block pairs drawn with `p_in`, cross-block pairs
/// with `p_out`. Nodes are numbered block by block and the block of each node
/// is recorded on the graph.
pub fn gen_random_partition(sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    if sizes.is_empty() {
        return Err(invalid("partition needs at least one block"));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(invalid("every block needs at least one node"));
    }
    check_probability(p_in, "p_in")?;
    check_probability(p_out, "p_out")?;
    let blocks: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
        .collect();
    let n = blocks.len();
    let mut rng = seeded(seed);
    let mut set = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if blocks[i] == blocks[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                set.insert((i, j));
            }
        }
    }
    Graph::from_sorted_set(n, set).with_blocks(blocks)
}

/// Four blocks of sizes `n/3, n/3, n/4` and the remainder.
pub fn default_partition_sizes(n: usize) -> Result<Vec<usize>> {
    let (a, b, c) = (n / 3, n / 3, n / 4);
    if a == 0 || c == 0 || n <= a + b + c {
        return Err(invalid(format!(
            "n = {n} too small for the four-block partition"
        )));
    }
    Ok(vec![a, b, c, n - a - b - c])
}

fn check_probability(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_small_cases() {
        let g = gen_grid8(2).unwrap();
        assert_eq!((g.n(), g.edge_count()), (4, 6));
        assert!(g.degrees().iter().all(|&d| d == 3));

        let g = gen_grid8(3).unwrap();
        assert_eq!(g.edge_count(), 20);
        assert_eq!(g.degree(0), 3);
        assert_eq!(g.degree(1), 5);
        assert_eq!(g.degree(4), 8);

        assert_eq!(gen_grid8(20).unwrap().n(), 400);
        assert!(gen_grid8(1).is_err());
    }

    #[test]
    fn grid_edge_formula_matches_enumeration() {
        for side in 2..=6usize {
            // brute force over all node pairs
            let mut count = 0;
            let n = side * side;
            for a in 0..n {
                for b in a + 1..n {
                    let (ra, ca) = ((a / side) as isize, (a % side) as isize);
                    let (rb, cb) = ((b / side) as isize, (b % side) as isize);
                    if (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 {
                        count += 1;
                    }
                }
            }
            let g = gen_grid8(side).unwrap();
            assert_eq!(g.edge_count(), count);
            assert_eq!(count, 4 * side * side - 6 * side + 2);
        }
    }

    #[test]
    fn erdos_renyi_extremes() {
        assert_eq!(gen_erdos_renyi(10, 0.0, 1).unwrap().edge_count(), 0);
        assert_eq!(gen_erdos_renyi(10, 1.0, 1).unwrap().edge_count(), 45);
        assert!(gen_erdos_renyi(10, 1.5, 1).is_err());
        assert!(gen_erdos_renyi(10, -0.1, 1).is_err());
    }

    #[test]
    fn erdos_renyi_edge_count_band() {
        let g = gen_erdos_renyi(400, 0.1, 3).unwrap();
        let sigma = (79800.0f64 * 0.1 * 0.9).sqrt();
        assert!((g.edge_count() as f64 - 7980.0).abs() <= 5.0 * sigma);
    }

    #[test]
    fn barabasi_albert_counts() {
        assert_eq!(gen_barabasi_albert(6, 5, 0).unwrap().edge_count(), 5);
        assert_eq!(gen_barabasi_albert(400, 5, 0).unwrap().edge_count(), 1975);
        assert!(gen_barabasi_albert(5, 5, 0).is_err());
        assert!(gen_barabasi_albert(5, 0, 0).is_err());
    }

    #[test]
    fn barabasi_albert_forms_hubs() {
        for seed in 0..20 {
            let g = gen_barabasi_albert(400, 5, seed).unwrap();
            let max = g.degrees().into_iter().max().unwrap();
            assert!(max > 20, "seed {seed}: max degree {max}");
        }
    }

    #[test]
    fn newman_watts_lattice() {
        let g = gen_newman_watts(10, 4, 0.0, 0).unwrap();
        assert_eq!(g.edge_count(), 20);
        assert!(g.degrees().iter().all(|&d| d == 4));
        assert_eq!(gen_newman_watts(10, 5, 0.0, 0).unwrap().edge_count(), 20);
        assert!(gen_newman_watts(5, 5, 0.0, 0).is_err());
    }

    #[test]
    fn newman_watts_shortcut_band() {
        let g = gen_newman_watts(400, 5, 0.5, 11).unwrap();
        let added = g.edge_count() as f64 - 800.0;
        let sigma = (800.0f64 * 0.25).sqrt();
        assert!((added - 400.0).abs() <= 5.0 * sigma, "added {added}");
    }

    #[test]
    fn partition_cases() {
        let g = gen_random_partition(&[3, 3], 1.0, 0.0, 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
        assert_eq!(g.blocks().unwrap(), &[0, 0, 0, 1, 1, 1]);
        assert_eq!(
            default_partition_sizes(400).unwrap(),
            vec![133, 133, 100, 34]
        );
        assert!(gen_random_partition(&[], 0.5, 0.5, 0).is_err());
    }

    #[test]
    fn partition_within_block_band() {
        let g = gen_random_partition(&[200, 200], 0.25, 0.01, 5).unwrap();
        let blocks = g.blocks().unwrap();
        let within = g
            .edges()
            .iter()
            .filter(|&&(i, j)| blocks[i] == blocks[j])
            .count() as f64;
        let pairs: f64 = 2.0 * 200.0 * 199.0 / 2.0;
        let mean = 0.25 * pairs;
        let sigma = (pairs * 0.25 * 0.75).sqrt();
        assert!((within - mean).abs() <= 5.0 * sigma);
    }

    #[test]
    fn families_parse_and_generate() {
        for fam in Family::ALL {
            let parsed: Family = fam.name().parse().unwrap();
            assert_eq!(parsed, fam);
            let g = fam.generate(400, 1).unwrap();
            assert_eq!(g.n(), 400);
            g.validate().unwrap();
        }
        assert!("bogus".parse::<Family>().is_err());
        assert!(Family::Grid.generate(10, 0).is_err());
    }
}
