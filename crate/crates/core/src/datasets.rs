//! Labeled graphs for node classification.
//!
//! A bundle is a directory of four files:
//!
//! * `graph.edgelist`: the edge-list format of [`crate::graphgen`].
//! * `features.csv`: `n` lines of `D` comma-separated floats, no header.
//! * `labels.csv`: `n` lines, one class index in `[0, C)` each.
//! * `split.json`: `{"train": [ids], "val": [ids], "test": [ids]}` with
//!   optional `"classes": C` and `"sizes": {"train": .., "val": .., "test": ..}`;
//!   when `sizes` is present the mask sizes must match it.

use crate::error::{invalid, Error, Result};
use crate::graphgen::{gen_random_partition, read_edgelist, write_edgelist, Graph};
use crate::rng::derived;
use crate::Matrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGraphBundle {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
    /// Sizes that the split file declared, if any.
    pub declared: Option<SplitSizes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sizes: Option<SplitSizes>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Scale each feature row to unit l1 norm (rows of zeros stay zero).
    pub row_normalize: bool,
}

fn mask_ids(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

impl LabeledGraphBundle {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn sizes(&self) -> SplitSizes {
        let count = |m: &[bool]| m.iter().filter(|&&v| v).count();
        SplitSizes {
            train: count(&self.train),
            val: count(&self.val),
            test: count(&self.test),
        }
    }

    /// One-hot `n x C` label matrix.
    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.labels.len(), self.classes);
        for (i, &y) in self.labels.iter().enumerate() {
            m.set(i, y, 1.0);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        let fmt = |msg: String| Err(Error::Format(msg));
        if self.features.rows() != n || self.labels.len() != n {
            return fmt(format!(
                "graph has {n} nodes but features have {} rows and labels {} entries",
                self.features.rows(),
                self.labels.len()
            ));
        }
        if [&self.train, &self.val, &self.test]
            .iter()
            .any(|m| m.len() != n)
        {
            return fmt("mask length differs from node count".into());
        }
        if !self.features.is_finite() {
            return fmt("non-finite feature values".into());
        }
        if self.classes == 0 {
            return fmt("no classes".into());
        }
        for i in 0..n {
            let hits = [self.train[i], self.val[i], self.test[i]]
                .iter()
                .filter(|&&m| m)
                .count();
            if hits > 1 {
                return fmt(format!("node {i} appears in more than one split"));
            }
            if hits == 1 && self.labels[i] >= self.classes {
                return fmt(format!(
                    "node {i} has label {} outside [0, {})",
                    self.labels[i], self.classes
                ));
            }
        }
        if let Some(declared) = self.declared {
            let actual = self.sizes();
            if actual != declared {
                return fmt(format!(
                    "split sizes {actual:?} differ from declared {declared:?}"
                ));
            }
        }
        Ok(())
    }

    pub fn row_normalize_features(&mut self) {
        for r in 0..self.features.rows() {
            let row = self.features.row_mut(r);
            let total: f64 = row.iter().map(|v| v.abs()).sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })
}

fn parse_features(text: &str) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("features.csv line {}: bad number '{field}'", k + 1))
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format(format!(
                    "features.csv line {}: {width} columns, expected {c}",
                    k + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Format(format!("labels.csv line {}: bad label '{l}'", k + 1)))
        })
        .collect()
}

fn mask_from_ids(ids: &[usize], n: usize, name: &str) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in ids {
        if i >= n {
            return Err(Error::Format(format!(
                "{name} id {i} out of range for {n} nodes"
            )));
        }
        if std::mem::replace(&mut mask[i], true) {
            return Err(Error::Format(format!("{name} lists node {i} twice")));
        }
    }
    Ok(mask)
}

pub fn load_bundle(dir: &Path) -> Result<LabeledGraphBundle> {
    load_bundle_with(dir, LoadOptions::default())
}

pub fn load_bundle_with(dir: &Path, options: LoadOptions) -> Result<LabeledGraphBundle> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.display().to_string()));
    }
    let graph = read_edgelist(&dir.join("graph.edgelist"))?;
    let features = parse_features(&read_text(&dir.join("features.csv"))?)?;
    let labels = parse_labels(&read_text(&dir.join("labels.csv"))?)?;
    let split: SplitFile = serde_json::from_str(&read_text(&dir.join("split.json"))?)
        .map_err(|e| Error::Format(format!("split.json: {e}")))?;
    let n = graph.n();
    let classes = split
        .classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut bundle = LabeledGraphBundle {
        train: mask_from_ids(&split.train, n, "train")?,
        val: mask_from_ids(&split.val, n, "val")?,
        test: mask_from_ids(&split.test, n, "test")?,
        graph,
        features,
        labels,
        classes,
        declared: split.sizes,
    };
    bundle.validate()?;
    if options.row_normalize {
        bundle.row_normalize_features();
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &LabeledGraphBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir)?;
    write_edgelist(&bundle.graph, &dir.join("graph.edgelist"))?;
    let mut feats = String::new();
    for r in 0..bundle.features.rows() {
        let row: Vec<String> = bundle
            .features
            .row(r)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        let _ = writeln!(feats, "{}", row.join(","));
    }
    std::fs::write(dir.join("features.csv"), feats)?;
    let mut labels = String::new();
    for y in &bundle.labels {
        let _ = writeln!(labels, "{y}");
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    let split = SplitFile {
        train: mask_ids(&bundle.train),
        val: mask_ids(&bundle.val),
        test: mask_ids(&bundle.test),
        classes: Some(bundle.classes),
        sizes: bundle.declared,
    };
    std::fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&split)?,
    )?;
    Ok(())
}

/// Settings of the planted-partition stand-in for citation data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_noise: f64,
    pub label_fraction: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            n: 200,
            blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feature_noise: 1.0,
            label_fraction: 0.1,
        }
    }
}

/// Planted partition with one-hot block features plus Gaussian noise, a
/// block-stratified train mask and the rest split evenly into val and test.
pub fn gen_sbm_bundle(cfg: &SbmConfig, seed: u64) -> Result<LabeledGraphBundle> {
    if cfg.blocks == 0 || cfg.n < cfg.blocks {
        return Err(invalid(format!(
            "cannot split {} nodes into {} blocks",
            cfg.n, cfg.blocks
        )));
    }
    if !(cfg.label_fraction > 0.0 && cfg.label_fraction < 1.0) {
        return Err(invalid(format!(
            "label fraction {} outside (0, 1)",
            cfg.label_fraction
        )));
    }
    if !(cfg.feature_noise >= 0.0 && cfg.feature_noise.is_finite()) {
        return Err(invalid("feature noise must be finite and >= 0"));
    }
    let base = cfg.n / cfg.blocks;
    let sizes: Vec<usize> = (0..cfg.blocks)
        .map(|b| base + usize::from(b < cfg.n % cfg.blocks))
        .collect();
    let graph = gen_random_partition(&sizes, cfg.p_in, cfg.p_out, seed)?;
    let labels = graph
        .blocks()
        .expect("partition graph carries blocks")
        .to_vec();

    let mut rng = derived(seed, 1);
    let noise = Normal::new(0.0, cfg.feature_noise).map_err(|e| invalid(e.to_string()))?;
    let mut features = Matrix::zeros(cfg.n, cfg.blocks);
    for (i, &y) in labels.iter().enumerate() {
        for (c, v) in features.row_mut(i).iter_mut().enumerate() {
            let indicator = if c == y { 1.0 } else { 0.0 };
            *v = indicator
                + if cfg.feature_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
        }
    }

    let mut rng = derived(seed, 2);
    let mut train = vec![false; cfg.n];
    let mut rest = Vec::new();
    for b in 0..cfg.blocks {
        let mut members: Vec<usize> = (0..cfg.n).filter(|&i| labels[i] == b).collect();
        let k = (cfg.label_fraction * members.len() as f64).round() as usize;
        if k == 0 || k >= members.len() {
            return Err(invalid(format!(
                "block {b} with {} nodes is too small to stratify at fraction {}",
                members.len(),
                cfg.label_fraction
            )));
        }
        members.shuffle(&mut rng);
        members[..k].iter().for_each(|&i| train[i] = true);
        rest.extend_from_slice(&members[k..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let half = rest.len() / 2;
    let mut val = vec![false; cfg.n];
    let mut test = vec![false; cfg.n];
    rest[..half].iter().for_each(|&i| val[i] = true);
    rest[half..].iter().for_each(|&i| test[i] = true);

    let bundle = LabeledGraphBundle {
        graph,
        features,
        labels,
        classes: cfg.blocks,
        train,
        val,
        test,
        declared: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledGraphBundle {
        LabeledGraphBundle {
            graph: Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap(),
            features: Matrix::from_vec(
                4,
                2,
                vec![0.1, -1.5, 1e-300, 3.0, 0.0, 1.0 / 3.0, 2.5e17, -0.0],
            )
            .unwrap(),
            labels: vec![0, 1, 1, 0],
            classes: 2,
            train: vec![true, false, false, false],
            val: vec![false, true, false, false],
            test: vec![false, false, true, true],
            declared: Some(SplitSizes {
                train: 1,
                val: 1,
                test: 2,
            }),
        }
    }

    fn scratch(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ndcn-ds-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn toy_round_trip() {
        let dir = scratch("toy");
        let b = toy();
        save_bundle(&b, &dir).unwrap();
        let back = load_bundle(&dir).unwrap();
        assert_eq!(back, b);
        assert_eq!(
            back.features
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            b.features
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn load_errors() {
        let dir = scratch("missing");
        assert!(matches!(load_bundle(&dir), Err(Error::NotFound(_))));

        let dir = scratch("overlap");
        save_bundle(&toy(), &dir).unwrap();
        std::fs::write(
            dir.join("split.json"),
            r#"{"train":[0],"val":[0],"test":[2]}"#,
        )
        .unwrap();
        assert!(matches!(load_bundle(&dir), Err(Error::Format(_))));

        std::fs::write(
            dir.join("split.json"),
            r#"{"train":[0],"val":[1],"test":[2]}"#,
        )
        .unwrap();
        std::fs::write(dir.join("labels.csv"), "0\n1\n1\n").unwrap();
        assert!(matches!(load_bundle(&dir), Err(Error::Format(_))));

        std::fs::remove_file(dir.join("features.csv")).unwrap();
        assert!(matches!(load_bundle(&dir), Err(Error::NotFound(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn declared_sizes_are_checked() {
        let mut b = toy();
        b.declared = Some(SplitSizes {
            train: 2,
            val: 1,
            test: 1,
        });
        assert!(b.validate().is_err());
    }

    #[test]
    fn sbm_default_is_valid() {
        let b = gen_sbm_bundle(&SbmConfig::default(), 3).unwrap();
        b.validate().unwrap();
        let s = b.sizes();
        assert_eq!(s.train, 20);
        assert_eq!(s.train + s.val + s.test, 200);
        assert!(s.val.abs_diff(s.test) <= 1);
        for c in 0..2 {
            let per_block = (0..200).filter(|&i| b.train[i] && b.labels[i] == c).count();
            assert_eq!(per_block, 10);
        }
    }

    #[test]
    fn noiseless_features_separate_classes() {
        let cfg = SbmConfig {
            feature_noise: 0.0,
            blocks: 3,
            n: 90,
            ..SbmConfig::default()
        };
        let b = gen_sbm_bundle(&cfg, 1).unwrap();
        for i in 0..b.n() {
            let row = b.features.row(i);
            let arg = (0..3).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
            assert_eq!(arg, b.labels[i]);
        }
    }

    #[test]
    fn sbm_rejects_tiny_blocks() {
        let cfg = SbmConfig {
            n: 8,
            blocks: 4,
            ..SbmConfig::default()
        };
        assert!(gen_sbm_bundle(&cfg, 0).is_err());
    }

    #[test]
    fn row_normalization() {
        let mut b = toy();
        b.row_normalize_features();
        for r in 0..4 {
            let s: f64 = b.features.row(r).iter().map(|v| v.abs()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
