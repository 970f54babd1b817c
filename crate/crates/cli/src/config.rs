//! Flat TOML configuration files.
//!
//! Every key of an experiment plan may appear at top level, plus `out`,
//! `jobs` and `verbosity`. Values in the file take precedence over flags.

use ndcn::training::ExperimentPlan;
use ndcn::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Default)]
pub struct FileConfig {
    pub plan: toml::Table,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub verbosity: Option<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<FileConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| bad(format!("config: {e}")))?;
    let mut cfg = FileConfig::default();
    if let Some(v) = table.remove("out") {
        let s = v
            .as_str()
            .ok_or_else(|| bad("config: out must be a string"))?;
        cfg.out = Some(PathBuf::from(s));
    }
    if let Some(v) = table.remove("jobs") {
        let j = v
            .as_integer()
            .filter(|&j| j >= 1)
            .ok_or_else(|| bad("config: jobs must be a positive integer"))?;
        cfg.jobs = Some(j as usize);
    }
    if let Some(v) = table.remove("verbosity") {
        let j = v
            .as_integer()
            .filter(|j| (0..=3).contains(j))
            .ok_or_else(|| bad("config: verbosity must be 0..3"))?;
        cfg.verbosity = Some(j as u8);
    }
    cfg.plan = table;
    Ok(cfg)
}

/// Overlays the file's plan keys on `plan`; unknown keys are rejected.
pub fn apply(plan: &ExperimentPlan, overrides: &toml::Table) -> Result<ExperimentPlan> {
    if overrides.is_empty() {
        return Ok(plan.clone());
    }
    let mut value = serde_json::to_value(plan)?;
    let obj = value.as_object_mut().expect("plan serializes to an object");
    for (k, v) in overrides {
        if !obj.contains_key(k) {
            return Err(bad(format!("config: unknown key '{k}'")));
        }
        let v = serde_json::to_value(v)?;
        match (obj.get_mut(k), v) {
            (Some(serde_json::Value::Object(dst)), serde_json::Value::Object(src)) => {
                for (sk, sv) in src {
                    if !dst.contains_key(&sk) {
                        return Err(bad(format!("config: unknown key '{k}.{sk}'")));
                    }
                    dst.insert(sk, sv);
                }
            }
            (_, v) => {
                obj.insert(k.clone(), v);
            }
        }
    }
    let merged: ExperimentPlan =
        serde_json::from_value(value).map_err(|e| bad(format!("config: {e}")))?;
    merged.validate()?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_rejects() {
        let base = ExperimentPlan::default();
        let cfg = parse("epochs = 7\nfamily = \"random\"\nout = \"x\"\njobs = 2\n[sbm]\nn = 60\n")
            .unwrap();
        assert_eq!(cfg.out, Some(PathBuf::from("x")));
        assert_eq!(cfg.jobs, Some(2));
        let p = apply(&base, &cfg.plan).unwrap();
        assert_eq!(p.epochs, 7);
        assert_eq!(p.sbm.n, 60);
        assert_eq!(p.family, ndcn::graphgen::Family::Random);

        let cfg = parse("epoch = 7").unwrap();
        assert!(apply(&base, &cfg.plan).is_err());
        let cfg = parse("[sbm]\nsize = 3").unwrap();
        assert!(apply(&base, &cfg.plan).is_err());
        assert!(parse("runs = ").is_err());
    }
}
