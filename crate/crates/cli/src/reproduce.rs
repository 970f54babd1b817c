//! Table-shaped experiment suites.

use crate::config;
use crate::output::Staged;
use clap::{Args, ValueEnum};
use ndcn::dynamics::Law;
use ndcn::graphgen::Family;
use ndcn::models::Variant;
use ndcn::training::{run_plan, ExperimentPlan, RunResult, Summary};
use ndcn::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Continuous-time extrapolation.
    Table1,
    /// Continuous-time interpolation.
    Table2,
    /// Regularly sampled sequences against temporal GNNs.
    Table4,
    /// Node classification on a synthetic planted partition.
    #[value(name = "table5-synthetic")]
    Table5Synthetic,
    /// Node classification on a Cora bundle.
    #[value(name = "table5-cora")]
    Table5Cora,
}

#[derive(Args)]
pub struct ReproduceArgs {
    suite: Suite,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to `law:family` cells; repeatable.
    #[arg(long = "cell")]
    cells: Vec<String>,
    /// Restrict to these models; repeatable.
    #[arg(long = "model")]
    models: Vec<Variant>,
    /// Bundle directory for the citation suite.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Grid-search terminal time and alpha instead of using the fixed point.
    #[arg(long)]
    search: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "NDCN_JOBS", default_value_t = 1)]
    jobs: usize,
}

fn model_label(v: Variant) -> &'static str {
    match v {
        Variant::Ndcn | Variant::NdcnClassify => "NDCN",
        Variant::NoEncode => "No-Encode",
        Variant::NoGraph => "No-Graph",
        Variant::NoControl => "No-Control",
        Variant::RnnGnn => "RNN-GNN",
        Variant::GruGnn => "GRU-GNN",
        Variant::LstmGnn => "LSTM-GNN",
    }
}

fn parse_cell(s: &str) -> Result<(Law, Family)> {
    let (law, family) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("cell '{s}' is not law:family")))?;
    Ok((law.parse()?, family.parse()?))
}

fn percent(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std),
        None => String::new(),
    }
}

#[derive(Serialize)]
struct CellResult {
    law: Option<Law>,
    family: Option<Family>,
    variant: Variant,
    result: RunResult,
}

pub fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => config::load(p)?,
        None => config::FileConfig::default(),
    };
    let jobs = file.jobs.unwrap_or(a.jobs).max(1);
    let suite_name = a
        .suite
        .to_possible_value()
        .map(|v| v.get_name().to_string())
        .unwrap_or_default();
    let target = file
        .out
        .clone()
        .or_else(|| a.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/reproduce-{suite_name}")));

    let plans = build_plans(&a, &file)?;
    let mut out = Staged::new(&target)?;
    let mut cells = Vec::new();
    for (law, family, plan) in plans {
        out.note(format!(
            "{} {}{} runs={} epochs={}",
            model_label(plan.variant),
            law.map(|l| format!("{l}:")).unwrap_or_default(),
            family
                .map(|f| f.to_string())
                .unwrap_or_else(|| "classify".into()),
            plan.runs,
            plan.epochs
        ));
        let output = run_plan(&plan, jobs)?;
        let name = match (law, family) {
            (Some(l), Some(f)) => format!("cells/{l}_{f}_{}.json", plan.variant),
            _ => format!("cells/{}.json", plan.variant),
        };
        out.write(&name, output.result.to_json()?)?;
        if output.result.failures > 0 {
            out.note(format!("  {} failed runs", output.result.failures));
        }
        cells.push(CellResult {
            law,
            family,
            variant: plan.variant,
            result: output.result,
        });
    }
    out.write("table.csv", render_table(a.suite, &cells))?;
    out.write(
        "results.json",
        serde_json::to_string_pretty(&serde_json::json!({ "suite": a.suite, "cells": cells }))?,
    )?;
    let path = out.commit()?;
    println!("{}", path.display());
    Ok(())
}

fn build_plans(
    a: &ReproduceArgs,
    file: &config::FileConfig,
) -> Result<Vec<(Option<Law>, Option<Family>, ExperimentPlan)>> {
    let finish = |mut plan: ExperimentPlan| -> Result<ExperimentPlan> {
        plan.runs = a.runs;
        plan.seed = a.seed;
        if let Some(e) = a.epochs {
            plan.epochs = e;
        }
        config::apply(&plan, &file.plan)
    };
    let mut plans = Vec::new();
    match a.suite {
        Suite::Table1 | Suite::Table2 | Suite::Table4 => {
            let wanted: Vec<(Law, Family)> = a
                .cells
                .iter()
                .map(|c| parse_cell(c))
                .collect::<Result<_>>()?;
            let models: &[Variant] = if a.suite == Suite::Table4 {
                &[
                    Variant::LstmGnn,
                    Variant::GruGnn,
                    Variant::RnnGnn,
                    Variant::Ndcn,
                ]
            } else {
                &[
                    Variant::NoEncode,
                    Variant::NoGraph,
                    Variant::NoControl,
                    Variant::Ndcn,
                ]
            };
            for law in Law::ALL {
                for &variant in models {
                    if !a.models.is_empty() && !a.models.contains(&variant) {
                        continue;
                    }
                    for family in Family::ALL {
                        if !wanted.is_empty() && !wanted.contains(&(law, family)) {
                            continue;
                        }
                        let plan = match a.suite {
                            Suite::Table4 => ExperimentPlan::regular(law, family, variant),
                            _ => ExperimentPlan::continuous(law, family, variant),
                        };
                        plans.push((Some(law), Some(family), finish(plan)?));
                    }
                }
            }
        }
        Suite::Table5Synthetic => {
            let mut plan = ExperimentPlan::classify(None);
            if !a.search {
                plan = plan.with_fixed_point(1.2, 0.0);
            }
            plans.push((None, None, finish(plan)?));
        }
        Suite::Table5Cora => {
            let dataset = a.dataset.clone().or_else(|| {
                file.plan
                    .get("dataset")
                    .and_then(|v| v.as_str())
                    .map(PathBuf::from)
            });
            let Some(dir) = dataset.filter(|d| d.is_dir()) else {
                return Err(Error::NotFound(
                    "table5-cora needs a Cora bundle: pass --dataset DIR holding graph.edgelist, \
                     features.csv, labels.csv and split.json (see the README for the format and a converter)"
                        .into(),
                ));
            };
            let mut plan = ExperimentPlan::classify(Some(dir));
            if !a.search {
                plan = plan.with_fixed_point(1.2, 0.0);
            }
            plans.push((None, None, finish(plan)?));
        }
    }
    if plans.is_empty() {
        return Err(Error::InvalidArgument(
            "the cell and model filters select nothing".into(),
        ));
    }
    Ok(plans)
}

fn render_table(suite: Suite, cells: &[CellResult]) -> String {
    let mut out = String::new();
    match suite {
        Suite::Table5Synthetic | Suite::Table5Cora => {
            let col = if suite == Suite::Table5Cora {
                "cora"
            } else {
                "synthetic"
            };
            let _ = writeln!(out, "model,{col}");
            for c in cells {
                let _ = writeln!(
                    out,
                    "{},{}",
                    model_label(c.variant),
                    percent(c.result.metric("test_accuracy"))
                );
            }
        }
        _ => {
            let metric = if suite == Suite::Table2 {
                "interpolation"
            } else {
                "extrapolation"
            };
            let families: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
            let _ = writeln!(out, "dynamics,model,{}", families.join(","));
            let mut rows: Vec<(Law, Variant)> = Vec::new();
            for c in cells {
                let key = (c.law.expect("dynamics cell"), c.variant);
                if !rows.contains(&key) {
                    rows.push(key);
                }
            }
            for (law, variant) in rows {
                let vals: Vec<String> = Family::ALL
                    .iter()
                    .map(|&f| {
                        cells
                            .iter()
                            .find(|c| {
                                c.law == Some(law) && c.family == Some(f) && c.variant == variant
                            })
                            .map(|c| percent(c.result.metric(metric)))
                            .unwrap_or_default()
                    })
                    .collect();
                let _ = writeln!(out, "{law},{},{}", model_label(variant), vals.join(","));
            }
        }
    }
    out
}
