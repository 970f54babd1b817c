//! Plain-text edge lists.
//!
//! ```text
//! n=<node count>
//! # optional comment lines
//! i j
//! ...
//! ```
//! Pairs are written with `i < j` in ascending order. A partition graph
//! records its block sizes as `# blocks <s0> <s1> ...`.

use super::Graph;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub fn write_edgelist(g: &Graph, path: &Path) -> Result<()> {
    std::fs::write(path, edgelist_string(g))?;
    Ok(())
}

pub fn edgelist_string(g: &Graph) -> String {
    let mut out = String::with_capacity(16 * g.edge_count() + 16);
    let _ = writeln!(out, "n={}", g.n());
    if let Some(sizes) = g.block_sizes() {
        let sizes: Vec<String> = sizes.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "# blocks {}", sizes.join(" "));
    }
    for &(i, j) in g.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    out
}

pub fn read_edgelist(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    parse_edgelist(&text)
}

pub(crate) fn parse_edgelist(text: &str) -> Result<Graph> {
    let mut lines = text.lines().enumerate();
    let n = loop {
        let Some((_, line)) = lines.next() else {
            return Err(Error::Format("edge list is empty".into()));
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value = line
            .strip_prefix("n=")
            .ok_or_else(|| Error::Format(format!("expected 'n=<int>' header, got '{line}'")))?;
        break value
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("bad node count: {e}")))?;
    };
    let mut blocks = None;
    let mut edges = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(sizes) = rest.trim().strip_prefix("blocks") {
                let sizes = sizes
                    .split_whitespace()
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("bad block sizes: {e}")))?;
                blocks = Some(sizes);
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| {
                    Error::Format(format!("line {}: expected two node ids", lineno + 1))
                })?
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
        };
        let (i, j) = (next()?, next()?);
        edges.push((i, j));
    }
    let g = Graph::from_edges(n, edges).map_err(|e| Error::Format(e.to_string()))?;
    match blocks {
        Some(sizes) => {
            let labels: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
                .collect();
            g.with_blocks(labels)
                .map_err(|e| Error::Format(e.to_string()))
        }
        None => Ok(g),
    }
}
