//! Losses, the Adam optimizer and the three experiment protocols.

use crate::autodiff::{cross_entropy_masked, Tape, Var};
use crate::datasets::{
    gen_sbm_bundle, load_bundle_with, LabeledGraphBundle, LoadOptions, SbmConfig,
};
use crate::dynamics::{
    default_initial_state, sample_times, simulate_truth, DynamicsSpec, Law, Sampling,
};
use crate::error::{invalid, Error, Result};
use crate::graphgen::{greedy_modularity_reorder, Family, Graph};
use crate::models::{
    classify_forward, classify_predict, init_params, ndcn_forward, ndcn_predict, param_count,
    temporal_forward, temporal_rollout, ModelParams, ModelSpec, Variant, DEFAULT_GCN_HIDDEN,
    DEFAULT_RNN_HIDDEN,
};
use crate::odeint::{Method, SolverSpec, StepRule, Trajectory};
use crate::rng::derived;
use crate::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

/// Mean over snapshots of the mean element-wise `|pred - truth|`.
pub fn l1_loss(pred: &Trajectory<Var>, truth: &Trajectory) -> Result<Var> {
    if pred.times != truth.times {
        return Err(invalid(
            "prediction and truth are sampled at different times",
        ));
    }
    let first = pred
        .states
        .first()
        .ok_or_else(|| invalid("empty trajectory"))?;
    let terms = pred
        .states
        .iter()
        .zip(&truth.states)
        .map(|(p, t)| p.mean_abs_diff(t))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(f64, &Var)> = terms.iter().map(|v| (w, v)).collect();
    first.tape().lin_comb(&weighted)
}

/// Per snapshot `mean|pred - truth| / mean|truth|`, averaged over snapshots.
pub fn normalized_l1(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.times != truth.times {
        return Err(invalid(
            "prediction and truth are sampled at different times",
        ));
    }
    if pred.is_empty() {
        return Err(invalid("empty trajectory"));
    }
    let mut total = 0.0;
    for ((p, x), t) in pred.states.iter().zip(&truth.states).zip(&truth.times) {
        p.expect_same_shape(x, "normalized_l1")?;
        let scale = x.mean_abs();
        if scale == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "truth snapshot at t = {t} is identically zero"
            )));
        }
        total += p.zip_map(x, |a, b| (a - b).abs())?.mean_abs() / scale;
    }
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// First and second moment estimates, one pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid("gradient count differs from parameter count"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .matrices_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        p.expect_same_shape(g, "adam_step")?;
        let it = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
        for ((p, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lambda * sum ||theta||^2` over every bound parameter.
fn l2_penalty(tape: &Tape, bound: &crate::models::BoundParams, lambda: f64) -> Result<Option<Var>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let squares = bound
        .iter()
        .map(|(_, v)| v.mul(v)?.sum())
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(f64, &Var)> = squares.iter().map(|s| (lambda, s)).collect();
    tape.lin_comb(&terms).map(Some)
}

/// Sample mean and sample standard deviation (`k - 1` divisor, 0 for one value).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (k - 1.0)).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Continuous,
    Regular,
    Classify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Continuous => "continuous",
            Task::Regular => "regular",
            Task::Classify => "classify",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(Task::Continuous),
            "regular" => Ok(Task::Regular),
            "classify" | "classification" => Ok(Task::Classify),
            other => Err(invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// Weight of the l2 penalty for the irregularly sampled task; shared by all
/// continuous-time variants.
pub fn continuous_weight_decay(law: Law, family: Family) -> f64 {
    use Family::*;
    match (law, family) {
        (Law::Heat, Grid) => 1e-3,
        (Law::Heat, Random) => 1e-6,
        (Law::Heat, PowerLaw) => 1e-3,
        (Law::Heat, SmallWorld) => 1e-3,
        (Law::Heat, Community) => 1e-5,
        (Law::Mutualistic, Grid) => 1e-2,
        (Law::Mutualistic, _) => 1e-4,
        (Law::Gene, _) => 1e-4,
    }
}

/// Weight of the l2 penalty for the regularly sampled task.
pub fn regular_weight_decay(variant: Variant, law: Law, family: Family) -> f64 {
    use Family::*;
    if variant.is_temporal() {
        return 1e-3;
    }
    match (law, family) {
        (Law::Heat, _) => continuous_weight_decay(law, family),
        (Law::Mutualistic, Grid) => 1e-2,
        (Law::Mutualistic, Random) => 1e-3,
        (Law::Mutualistic, _) => 1e-4,
        (Law::Gene, SmallWorld | Community) => 1e-3,
        (Law::Gene, _) => 1e-4,
    }
}

/// Everything needed to run one experiment, repeated over `runs` seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub task: Task,
    pub variant: Variant,
    pub law: Law,
    pub family: Family,
    pub n: usize,
    /// Simulation horizon; the law and family default when absent.
    pub horizon: Option<f64>,
    pub snapshots: usize,
    pub train: usize,
    pub interp: usize,
    pub extrap: usize,
    pub seed: u64,
    pub runs: usize,
    pub lr: f64,
    pub epochs: usize,
    /// l2 weight; the tabulated default when absent.
    pub weight_decay: Option<f64>,
    pub hidden: usize,
    pub gcn_hidden: usize,
    pub rnn_hidden: usize,
    /// Euler steps between consecutive sample times.
    pub euler_substeps: usize,
    /// Classification bundle directory; the synthetic partition when absent.
    pub dataset: Option<PathBuf>,
    pub sbm: SbmConfig,
    pub row_normalize: bool,
    pub t_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self::continuous(Law::Heat, Family::Grid, Variant::Ndcn)
    }
}

fn grid_steps(lo_tenths: u32, hi_tenths: u32, step_tenths: u32) -> Vec<f64> {
    (lo_tenths..=hi_tenths)
        .step_by(step_tenths as usize)
        .map(|k| k as f64 / 10.0)
        .collect()
}

impl ExperimentPlan {
    pub fn continuous(law: Law, family: Family, variant: Variant) -> Self {
        Self {
            task: Task::Continuous,
            variant,
            law,
            family,
            n: 400,
            horizon: None,
            snapshots: 120,
            train: 80,
            interp: 20,
            extrap: 20,
            seed: 0,
            runs: 3,
            lr: 0.01,
            epochs: 2000,
            weight_decay: None,
            hidden: 20,
            gcn_hidden: DEFAULT_GCN_HIDDEN,
            rnn_hidden: DEFAULT_RNN_HIDDEN,
            euler_substeps: 1,
            dataset: None,
            sbm: SbmConfig::default(),
            row_normalize: false,
            t_grid: grid_steps(5, 15, 1),
            alpha_grid: grid_steps(0, 10, 2),
        }
    }

    pub fn regular(law: Law, family: Family, variant: Variant) -> Self {
        Self {
            task: Task::Regular,
            snapshots: 100,
            interp: 0,
            ..Self::continuous(law, family, variant)
        }
    }

    /// Node classification with grid search over terminal time and alpha.
    pub fn classify(dataset: Option<PathBuf>) -> Self {
        Self {
            task: Task::Classify,
            variant: Variant::NdcnClassify,
            lr: 0.01,
            epochs: 100,
            weight_decay: Some(0.024),
            hidden: 256,
            dataset,
            ..Self::continuous(Law::Heat, Family::Grid, Variant::Ndcn)
        }
    }

    pub fn with_fixed_point(mut self, t: f64, alpha: f64) -> Self {
        self.t_grid = vec![t];
        self.alpha_grid = vec![alpha];
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
            .unwrap_or_else(|| self.law.default_horizon(self.family))
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or_else(|| match self.task {
            Task::Continuous => continuous_weight_decay(self.law, self.family),
            Task::Regular => regular_weight_decay(self.variant, self.law, self.family),
            Task::Classify => 0.024,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(invalid("run count must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self
            .weight_decay
            .is_some_and(|w| !(w >= 0.0 && w.is_finite()))
        {
            return Err(invalid("weight decay must be finite and >= 0"));
        }
        match self.task {
            Task::Continuous | Task::Regular => {
                if self.task == Task::Continuous && !self.variant.is_ode() {
                    return Err(invalid(format!(
                        "{} cannot model irregularly sampled dynamics",
                        self.variant
                    )));
                }
                if self.task == Task::Regular
                    && !(self.variant.is_ode() || self.variant.is_temporal())
                {
                    return Err(invalid(format!("{} is not a sequence model", self.variant)));
                }
                if self.task == Task::Regular && self.interp != 0 {
                    return Err(invalid("the regular task has no interpolation split"));
                }
                if self.train == 0 || self.extrap == 0 {
                    return Err(invalid("train and extrapolation splits must be non-empty"));
                }
                if self.train + self.interp + self.extrap != self.snapshots {
                    return Err(invalid(format!(
                        "split {}+{}+{} does not add up to {} snapshots",
                        self.train, self.interp, self.extrap, self.snapshots
                    )));
                }
                let side = (self.n as f64).sqrt().round() as usize;
                if side * side != self.n || side < 2 {
                    return Err(invalid(format!(
                        "node count {} is not a square >= 4",
                        self.n
                    )));
                }
                if self.euler_substeps == 0 {
                    return Err(invalid("need at least one Euler step per interval"));
                }
                let h = self.horizon();
                if !(h > 0.0 && h.is_finite()) {
                    return Err(invalid("horizon must be positive"));
                }
            }
            Task::Classify => {
                if self.variant != Variant::NdcnClassify {
                    return Err(invalid("classification uses the ndcn_classify variant"));
                }
                if self.t_grid.is_empty() || self.alpha_grid.is_empty() {
                    return Err(invalid("empty search grid"));
                }
                if self.t_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                    return Err(invalid("terminal times must be positive"));
                }
                if self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(invalid("alpha values must lie in [0, 1]"));
                }
                let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
                if !increasing(&self.t_grid) || !increasing(&self.alpha_grid) {
                    return Err(invalid("search grids must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub first_loss: f64,
    pub best_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub plan: ExperimentPlan,
    pub param_count: usize,
    pub runs: Vec<RunRecord>,
    pub aggregate: BTreeMap<String, Summary>,
    pub failures: usize,
}

impl RunResult {
    fn assemble(plan: &ExperimentPlan, param_count: usize, runs: Vec<RunRecord>) -> Result<Self> {
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.failure.is_none()) {
            for (k, v) in &r.metrics {
                per_metric.entry(k.clone()).or_default().push(*v);
            }
        }
        let aggregate = per_metric
            .into_iter()
            .map(|(k, vals)| {
                let (mean, std) = aggregate(&vals)?;
                Ok((
                    k,
                    Summary {
                        mean,
                        std,
                        count: vals.len(),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            plan: plan.clone(),
            param_count,
            failures: runs.iter().filter(|r| r.failure.is_some()).count(),
            runs,
            aggregate,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per run: `run,seed,status,<metric columns>`.
    pub fn to_csv(&self) -> String {
        let mut names: Vec<&String> = self.runs.iter().flat_map(|r| r.metrics.keys()).collect();
        names.sort();
        names.dedup();
        let mut out = String::from("run,seed,status");
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for r in &self.runs {
            let status = if r.failure.is_some() { "failed" } else { "ok" };
            let _ = write!(out, "{},{},{status}", r.run, r.seed);
            for n in &names {
                match r.metrics.get(*n) {
                    Some(v) => {
                        let _ = write!(out, ",{v:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn metric(&self, name: &str) -> Option<Summary> {
        self.aggregate.get(name).copied()
    }

    /// Per-run values of one metric, `None` for failed runs.
    pub fn per_run(&self, name: &str) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .map(|r| r.metrics.get(name).copied())
            .collect()
    }
}

/// Indices into the sampled times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub interp: Vec<usize>,
    pub extrap: Vec<usize>,
}

/// Ground truth for one dynamics run.
#[derive(Debug, Clone)]
pub struct DynamicsData {
    pub graph: Graph,
    pub x0: Matrix,
    pub times: Vec<f64>,
    pub truth: Trajectory,
    pub split: Split,
}

impl DynamicsData {
    fn subset(&self, idx: &[usize]) -> Trajectory {
        Trajectory {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            states: idx.iter().map(|&i| self.truth.states[i].clone()).collect(),
        }
    }
}

/// The network of a dynamics run; all families but the grid are relabeled
/// so that detected communities occupy contiguous index ranges.
pub fn build_network(family: Family, n: usize, seed: u64) -> Result<Graph> {
    let g = family.generate(n, seed)?;
    if family == Family::Grid {
        return Ok(g);
    }
    let order = greedy_modularity_reorder(&g);
    g.relabel(&order)
}

pub fn prepare_dynamics(plan: &ExperimentPlan, seed: u64) -> Result<DynamicsData> {
    plan.validate()?;
    if plan.task == Task::Classify {
        return Err(invalid("classification plans carry no dynamics"));
    }
    let graph = build_network(plan.family, plan.n, seed)?;
    let side = (plan.n as f64).sqrt().round() as usize;
    let x0 = default_initial_state(side);
    let horizon = plan.horizon();
    let (times, split) = match plan.task {
        Task::Continuous => {
            let times = sample_times(
                Sampling::Irregular,
                plan.snapshots,
                horizon,
                derived(seed, 11).gen(),
            )?;
            let mut head: Vec<usize> = (0..plan.train + plan.interp).collect();
            head.shuffle(&mut derived(seed, 12));
            let mut train = head[..plan.train].to_vec();
            let mut interp = head[plan.train..].to_vec();
            train.sort_unstable();
            interp.sort_unstable();
            let extrap = (plan.train + plan.interp..plan.snapshots).collect();
            (
                times,
                Split {
                    train,
                    interp,
                    extrap,
                },
            )
        }
        _ => {
            let times = sample_times(Sampling::Regular, plan.snapshots, horizon, seed)?;
            let split = Split {
                train: (0..plan.train).collect(),
                interp: Vec::new(),
                extrap: (plan.train..plan.snapshots).collect(),
            };
            (times, split)
        }
    };
    let truth = simulate_truth(&graph, &DynamicsSpec::default_for(plan.law), &x0, &times)?;
    Ok(DynamicsData {
        graph,
        x0,
        times,
        truth,
        split,
    })
}

/// The model a dynamics plan trains.
pub fn dynamics_model(plan: &ExperimentPlan) -> Result<ModelSpec> {
    if plan.variant.is_temporal() {
        return ModelSpec::temporal(plan.variant, 1, plan.gcn_hidden, plan.rnn_hidden);
    }
    let mut spec = ModelSpec::ode(plan.variant, 1, plan.hidden, plan.horizon())?;
    spec.solver = SolverSpec::fixed(Method::Euler, StepRule::PerInterval(plan.euler_substeps));
    Ok(spec)
}

/// Trains with full-batch Adam and returns the final parameters.
fn fit(
    plan: &ExperimentPlan,
    params: &mut ModelParams,
    mut loss_fn: impl FnMut(&Tape, &crate::models::BoundParams) -> Result<Var>,
) -> Result<TrainSummary> {
    let cfg = AdamConfig::with_lr(plan.lr);
    let lambda = plan.weight_decay();
    let mut state = AdamState::new(params);
    let mut summary = TrainSummary {
        epochs: 0,
        first_loss: f64::NAN,
        best_loss: f64::INFINITY,
        final_loss: f64::NAN,
    };
    for epoch in 0..plan.epochs {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let data = loss_fn(&tape, &bound)?;
        let loss = match l2_penalty(&tape, &bound, lambda)? {
            Some(pen) => data.add(&pen)?,
            None => data,
        };
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at epoch {}",
                epoch + 1
            )));
        }
        if epoch == 0 {
            summary.first_loss = value;
        }
        summary.best_loss = summary.best_loss.min(value);
        summary.final_loss = value;
        summary.epochs = epoch + 1;
        let grads = loss.backward()?;
        let g: Vec<Matrix> = bound.iter().map(|(_, v)| grads.get_or_zeros(v)).collect();
        adam_step(params, &g, &mut state, &cfg)?;
        if (epoch + 1) % 100 == 0 {
            log::debug!("epoch {} loss {value:.6e}", epoch + 1);
        }
    }
    if !params.iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    Ok(summary)
}

/// Test metrics of trained dynamics parameters.
pub fn evaluate_dynamics(
    plan: &ExperimentPlan,
    data: &DynamicsData,
    params: &ModelParams,
) -> Result<BTreeMap<String, f64>> {
    let spec = dynamics_model(plan)?;
    params.check(&spec)?;
    let op = spec.operator(&data.graph)?;
    let mut metrics = BTreeMap::new();
    if spec.variant.is_temporal() {
        let mut history = vec![data.x0.clone()];
        history.extend(
            data.split
                .train
                .iter()
                .map(|&i| data.truth.states[i].clone()),
        );
        let rollout = temporal_rollout(&spec, params, &op, &history, data.split.extrap.len())?;
        let pred = Trajectory {
            times: data.split.extrap.iter().map(|&i| data.times[i]).collect(),
            states: rollout,
        };
        metrics.insert(
            "extrapolation".into(),
            normalized_l1(&pred, &data.subset(&data.split.extrap))?,
        );
        return Ok(metrics);
    }
    let full = ndcn_predict(&spec, params, &op, &data.x0, &data.times)?;
    let pick = |idx: &[usize]| Trajectory {
        times: idx.iter().map(|&i| full.times[i]).collect(),
        states: idx.iter().map(|&i| full.states[i].clone()).collect(),
    };
    metrics.insert(
        "extrapolation".into(),
        normalized_l1(&pick(&data.split.extrap), &data.subset(&data.split.extrap))?,
    );
    if !data.split.interp.is_empty() {
        metrics.insert(
            "interpolation".into(),
            normalized_l1(&pick(&data.split.interp), &data.subset(&data.split.interp))?,
        );
    }
    Ok(metrics)
}

/// Trains one dynamics model on prepared data.
pub fn train_dynamics(
    plan: &ExperimentPlan,
    data: &DynamicsData,
    seed: u64,
) -> Result<(ModelParams, TrainSummary)> {
    let spec = dynamics_model(plan)?;
    let op = spec.operator(&data.graph)?;
    let mut params = init_params(&spec, seed)?;
    let train_truth = data.subset(&data.split.train);
    let summary = if spec.variant.is_temporal() {
        let mut inputs = vec![data.x0.clone()];
        inputs.extend(
            data.split
                .train
                .iter()
                .map(|&i| data.truth.states[i].clone()),
        );
        inputs.pop();
        fit(plan, &mut params, |_, bound| {
            let (preds, _) = temporal_forward(&spec, bound, &op, &inputs)?;
            let pred = Trajectory {
                times: train_truth.times.clone(),
                states: preds,
            };
            l1_loss(&pred, &train_truth)
        })?
    } else {
        let last = *data.split.train.last().expect("non-empty train split");
        let horizon_times = &data.times[..=last];
        fit(plan, &mut params, |_, bound| {
            let traj = ndcn_forward(&spec, bound, &op, &data.x0, horizon_times)?;
            let pred = Trajectory {
                times: train_truth.times.clone(),
                states: data
                    .split
                    .train
                    .iter()
                    .map(|&i| traj.states[i].clone())
                    .collect(),
            };
            l1_loss(&pred, &train_truth)
        })?
    };
    Ok((params, summary))
}

/// Outcome of a single run, with the trained parameters when it succeeded.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub params: Option<ModelParams>,
    pub seconds: f64,
}

fn is_run_failure(e: &Error) -> bool {
    matches!(e, Error::Stiffness { .. } | Error::Numeric(_))
}

fn run_dynamics_once(plan: &ExperimentPlan, run: usize) -> Result<RunOutcome> {
    let seed = plan.run_seed(run);
    let start = Instant::now();
    let data = prepare_dynamics(plan, seed)?;
    let attempt = train_dynamics(plan, &data, seed).and_then(|(params, summary)| {
        Ok((evaluate_dynamics(plan, &data, &params)?, params, summary))
    });
    let seconds = start.elapsed().as_secs_f64();
    match attempt {
        Ok((metrics, params, summary)) => Ok(RunOutcome {
            record: RunRecord {
                run,
                seed,
                metrics,
                train: Some(summary),
                failure: None,
            },
            params: Some(params),
            seconds,
        }),
        Err(e) if is_run_failure(&e) => {
            log::warn!("run {run} (seed {seed}) failed: {e}");
            Ok(RunOutcome {
                record: RunRecord {
                    run,
                    seed,
                    metrics: BTreeMap::new(),
                    train: None,
                    failure: Some(e.to_string()),
                },
                params: None,
                seconds,
            })
        }
        Err(e) => Err(e),
    }
}

/// Classification data for one run.
pub fn classify_bundle(plan: &ExperimentPlan, seed: u64) -> Result<LabeledGraphBundle> {
    match &plan.dataset {
        Some(dir) => load_bundle_with(
            dir,
            LoadOptions {
                row_normalize: plan.row_normalize,
            },
        ),
        None => {
            let mut b = gen_sbm_bundle(&plan.sbm, seed)?;
            if plan.row_normalize {
                b.row_normalize_features();
            }
            Ok(b)
        }
    }
}

/// Fraction of masked rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if logits.rows() != labels.len() || mask.len() != labels.len() {
        return Err(invalid("logits, labels and mask disagree in length"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in (0..labels.len()).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let arg = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        hits += usize::from(arg == labels[i]);
        total += 1;
    }
    if total == 0 {
        return Err(invalid("empty mask"));
    }
    Ok(hits as f64 / total as f64)
}

/// Trains the classifier at one `(T, alpha)` point and returns it with its
/// validation and test accuracy.
pub fn train_classifier(
    plan: &ExperimentPlan,
    bundle: &LabeledGraphBundle,
    t_end: f64,
    alpha: f64,
    seed: u64,
) -> Result<(ModelParams, TrainSummary, f64, f64)> {
    let spec = ModelSpec::classify(
        bundle.features.cols(),
        plan.hidden,
        bundle.classes,
        alpha,
        t_end,
    )?;
    let op = spec.operator(&bundle.graph)?;
    let labels = bundle.one_hot();
    let mut params = init_params(&spec, seed)?;
    let summary = fit(plan, &mut params, |_, bound| {
        let logits = classify_forward(&spec, bound, &op, &bundle.features)?;
        cross_entropy_masked(&logits, &labels, &bundle.train)
    })?;
    let (val, test) = evaluate_classifier(plan, bundle, &params, t_end, alpha)?;
    Ok((params, summary, val, test))
}

/// Validation and test accuracy of trained classifier parameters.
pub fn evaluate_classifier(
    plan: &ExperimentPlan,
    bundle: &LabeledGraphBundle,
    params: &ModelParams,
    t_end: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    let spec = ModelSpec::classify(
        bundle.features.cols(),
        plan.hidden,
        bundle.classes,
        alpha,
        t_end,
    )?;
    params.check(&spec)?;
    let op = spec.operator(&bundle.graph)?;
    let logits = classify_predict(&spec, params, &op, &bundle.features)?;
    let val = accuracy(&logits, &bundle.labels, &bundle.val)?;
    let test = accuracy(&logits, &bundle.labels, &bundle.test)?;
    Ok((val, test))
}

fn run_classify_once(plan: &ExperimentPlan, run: usize) -> Result<RunOutcome> {
    let seed = plan.run_seed(run);
    let start = Instant::now();
    let bundle = classify_bundle(plan, seed)?;
    if !bundle.train.contains(&true) || !bundle.val.contains(&true) || !bundle.test.contains(&true)
    {
        return Err(invalid(
            "classification needs non-empty train, val and test masks",
        ));
    }
    let mut best: Option<(f64, f64, f64, f64, ModelParams, TrainSummary)> = None;
    let mut failure = None;
    for &t in &plan.t_grid {
        for &alpha in &plan.alpha_grid {
            match train_classifier(plan, &bundle, t, alpha, seed) {
                Ok((params, summary, val, test)) => {
                    log::debug!("T = {t} alpha = {alpha}: val {val:.4} test {test:.4}");
                    if best.as_ref().map_or(true, |b| val > b.2) {
                        best = Some((t, alpha, val, test, params, summary));
                    }
                }
                Err(e) if is_run_failure(&e) || matches!(e, Error::DegenerateInput(_)) => {
                    log::warn!("run {run}: T = {t} alpha = {alpha} failed: {e}");
                    failure = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let record = match &best {
        Some((t, alpha, val, test, _, summary)) => RunRecord {
            run,
            seed,
            metrics: BTreeMap::from([
                ("T".to_string(), *t),
                ("alpha".to_string(), *alpha),
                ("val_accuracy".to_string(), *val),
                ("test_accuracy".to_string(), *test),
            ]),
            train: Some(summary.clone()),
            failure: None,
        },
        None => RunRecord {
            run,
            seed,
            metrics: BTreeMap::new(),
            train: None,
            failure: failure.or_else(|| Some("no grid point trained".into())),
        },
    };
    Ok(RunOutcome {
        record,
        params: best.map(|b| b.4),
        seconds,
    })
}

/// Runs every seed of a plan and aggregates the results.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub result: RunResult,
    pub outcomes: Vec<RunOutcome>,
}

impl PlanOutput {
    /// Wall-clock seconds per run, kept apart from the deterministic results.
    pub fn timing_json(&self) -> Result<String> {
        let secs: Vec<f64> = self.outcomes.iter().map(|o| o.seconds).collect();
        Ok(serde_json::to_string_pretty(
            &serde_json::json!({ "seconds_per_run": secs }),
        )?)
    }
}

/// Executes the plan on up to `jobs` worker threads.
pub fn run_plan(plan: &ExperimentPlan, jobs: usize) -> Result<PlanOutput> {
    plan.validate()?;
    let one = |run: usize| match plan.task {
        Task::Classify => run_classify_once(plan, run),
        _ => run_dynamics_once(plan, run),
    };
    let outcomes: Vec<RunOutcome> = if jobs <= 1 || plan.runs == 1 {
        (0..plan.runs).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| invalid(e.to_string()))?;
        pool.install(|| {
            (0..plan.runs)
                .into_par_iter()
                .map(one)
                .collect::<Result<_>>()
        })?
    };
    let count = match plan.task {
        Task::Classify => outcomes
            .iter()
            .find_map(|o| o.params.as_ref().map(ModelParams::scalar_count))
            .unwrap_or(0),
        _ => param_count(&dynamics_model(plan)?),
    };
    let records = outcomes.iter().map(|o| o.record.clone()).collect();
    let result = RunResult::assemble(plan, count, records)?;
    for (k, s) in &result.aggregate {
        log::info!("{k}: {:.4} +- {:.4} over {} runs", s.mean, s.std, s.count);
    }
    Ok(PlanOutput { result, outcomes })
}

fn expect_task(plan: &ExperimentPlan, task: Task) -> Result<()> {
    if plan.task != task {
        return Err(invalid(format!(
            "expected a {task} plan, got {}",
            plan.task
        )));
    }
    Ok(())
}

pub fn run_continuous(plan: &ExperimentPlan) -> Result<RunResult> {
    expect_task(plan, Task::Continuous)?;
    Ok(run_plan(plan, 1)?.result)
}

pub fn run_regular(plan: &ExperimentPlan) -> Result<RunResult> {
    expect_task(plan, Task::Regular)?;
    Ok(run_plan(plan, 1)?.result)
}

pub fn run_classify(plan: &ExperimentPlan) -> Result<RunResult> {
    expect_task(plan, Task::Classify)?;
    Ok(run_plan(plan, 1)?.result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(times: &[f64], vals: &[&[f64]]) -> Trajectory {
        Trajectory {
            times: times.to_vec(),
            states: vals.iter().map(|v| Matrix::column(v)).collect(),
        }
    }

    fn on_tape(tape: &Tape, t: &Trajectory) -> Trajectory<Var> {
        Trajectory {
            times: t.times.clone(),
            states: t.states.iter().map(|s| tape.leaf(s.clone())).collect(),
        }
    }

    #[test]
    fn l1_basics() {
        let truth = traj(&[0.5, 1.0], &[&[1.0, 2.0], &[-3.0, 0.5]]);
        let tape = Tape::new();
        assert_eq!(
            l1_loss(&on_tape(&tape, &truth), &truth)
                .unwrap()
                .value()
                .item(),
            0.0
        );
        let shifted = traj(&[0.5, 1.0], &[&[2.0, 3.0], &[-2.0, 1.5]]);
        assert!(
            (l1_loss(&on_tape(&tape, &shifted), &truth)
                .unwrap()
                .value()
                .item()
                - 1.0)
                .abs()
                < 1e-15
        );
        let moved = traj(&[0.5, 2.0], &[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert!(l1_loss(&on_tape(&tape, &moved), &truth).is_err());
    }

    #[test]
    fn normalized_l1_basics() {
        let truth = traj(&[1.0, 2.0], &[&[1.0, 2.0], &[3.0, 0.5]]);
        assert_eq!(normalized_l1(&truth, &truth).unwrap(), 0.0);
        let doubled = Trajectory {
            times: truth.times.clone(),
            states: truth.states.iter().map(|s| s.scaled(2.0)).collect(),
        };
        assert!((normalized_l1(&doubled, &truth).unwrap() - 1.0).abs() < 1e-15);
        let zero = traj(&[1.0], &[&[0.0, 0.0]]);
        assert!(matches!(
            normalized_l1(&zero, &zero),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ModelParams::new(vec![("w".into(), Matrix::scalar(1.0))]);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut params, &[Matrix::scalar(3.0)], &mut state, &cfg).unwrap();
        let moved = 1.0 - params.get("w").unwrap().item();
        assert!((moved - 0.01).abs() < 1e-6);

        let before = params.clone();
        let mut fresh = AdamState::new(&params);
        adam_step(&mut params, &[Matrix::scalar(0.0)], &mut fresh, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_sign_flip() {
        let mut params = ModelParams::new(vec![("w".into(), Matrix::scalar(0.0))]);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut params, &[Matrix::scalar(2.0)], &mut state, &cfg).unwrap();
        let after_one = params.get("w").unwrap().item();
        adam_step(&mut params, &[Matrix::scalar(-2.0)], &mut state, &cfg).unwrap();
        let step = (params.get("w").unwrap().item() - after_one).abs();
        assert!(state.v[0].item() > 0.0);
        assert!(step < 0.1);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[2.0, 4.0]).unwrap(), (3.0, 2f64.sqrt()));
        assert_eq!(aggregate(&[5.0]).unwrap(), (5.0, 0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn weight_decay_tables() {
        assert_eq!(continuous_weight_decay(Law::Heat, Family::Random), 1e-6);
        assert_eq!(
            continuous_weight_decay(Law::Mutualistic, Family::Grid),
            1e-2
        );
        assert_eq!(
            regular_weight_decay(Variant::Ndcn, Law::Gene, Family::Community),
            1e-3
        );
        assert_eq!(
            regular_weight_decay(Variant::Ndcn, Law::Mutualistic, Family::Random),
            1e-3
        );
        assert_eq!(
            regular_weight_decay(Variant::GruGnn, Law::Heat, Family::Random),
            1e-3
        );
    }

    #[test]
    fn plan_validation() {
        let mut p = ExperimentPlan::default();
        p.validate().unwrap();
        p.runs = 0;
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::default();
        p.train = 70;
        assert!(p.validate().is_err());
        let p = ExperimentPlan::continuous(Law::Heat, Family::Grid, Variant::RnnGnn);
        assert!(p.validate().is_err());
        ExperimentPlan::regular(Law::Heat, Family::Grid, Variant::RnnGnn)
            .validate()
            .unwrap();
        let p = ExperimentPlan::classify(None);
        p.validate().unwrap();
        assert_eq!(p.t_grid.len(), 11);
        assert_eq!(p.alpha_grid, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentPlan>(&json).unwrap(), p);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let mut plan = ExperimentPlan::continuous(Law::Heat, Family::Grid, Variant::Ndcn);
        plan.n = 16;
        let data = prepare_dynamics(&plan, 4).unwrap();
        let mut all: Vec<usize> = data
            .split
            .train
            .iter()
            .chain(&data.split.interp)
            .chain(&data.split.extrap)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        assert!(data.split.extrap.iter().all(|&i| i >= 100));
    }

    #[test]
    fn accuracy_counts_masked_rows() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        let acc = accuracy(&logits, &[0, 0, 0], &[true, true, false]).unwrap();
        assert_eq!(acc, 0.5);
        assert!(accuracy(&logits, &[0, 0, 0], &[false; 3]).is_err());
    }

    #[test]
    fn short_heat_run_is_deterministic() {
        let mut plan = ExperimentPlan::continuous(Law::Heat, Family::Grid, Variant::Ndcn);
        plan.n = 16;
        plan.epochs = 5;
        plan.runs = 2;
        let a = run_plan(&plan, 1).unwrap().result;
        let b = run_plan(&plan, 2).unwrap().result;
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.failures, 0);
        assert_eq!(a.param_count, 901);
        assert!(a.metric("extrapolation").is_some());
        assert!(a.to_csv().lines().count() == 3);
    }
}
