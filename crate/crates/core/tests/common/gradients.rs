//! Finite-difference cases for every tape op and every model variant.

use super::{grad_check, random_matrix, weighted_sum};
use ndcn::autodiff::cross_entropy_masked;
use ndcn::graphgen::{gen_newman_watts, Graph};
use ndcn::models::{
    classify_forward, init_params, ndcn_forward, temporal_forward, BoundParams, ModelParams,
    ModelSpec, Variant, CLASSIFY_ATOL, CLASSIFY_RTOL,
};
use ndcn::odeint::{Method, SolverSpec, StepRule, Trajectory};
use ndcn::operators::{normalized_laplacian, tunable_diffusion};
use ndcn::training::l1_loss;
use ndcn::{Matrix, Result};
use std::sync::Arc;

pub const TOLERANCE: f64 = 1e-4;

pub fn ten_nodes() -> Graph {
    gen_newman_watts(10, 4, 0.3, 5).unwrap()
}

fn leaves(entries: &[(&str, Matrix)]) -> ModelParams {
    ModelParams::new(
        entries
            .iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect(),
    )
}

fn get<'a>(b: &'a BoundParams, n: &str) -> &'a ndcn::autodiff::Var {
    b.get(n).unwrap()
}

/// Adds small noise to every entry so zero-initialized biases take part.
fn jitter(mut p: ModelParams, seed: u64) -> ModelParams {
    for (k, m) in p.matrices_mut().enumerate() {
        let noise = random_matrix(m.rows(), m.cols(), 0.05, 0.3, true, seed * 100 + k as u64);
        m.axpy(1.0, &noise);
    }
    p
}

/// `(name, worst relative error)` for each elementary op.
pub fn op_cases() -> Vec<(String, f64)> {
    let a43 = random_matrix(4, 3, 0.2, 1.5, true, 1);
    let b43 = random_matrix(4, 3, 0.2, 1.5, true, 2);
    let b32 = random_matrix(3, 2, 0.2, 1.5, true, 3);
    let bias = random_matrix(1, 3, 0.2, 1.0, true, 4);
    let x10 = random_matrix(10, 3, 0.2, 1.5, true, 5);
    let lap = Arc::new(normalized_laplacian(&ten_nodes()));
    let phi = Arc::new(tunable_diffusion(&ten_nodes(), 0.3).unwrap());
    let labels = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ])
    .unwrap();

    type Case = Box<dyn Fn(&BoundParams) -> Result<ndcn::autodiff::Var>>;
    let ab = leaves(&[("a", a43.clone()), ("b", b43.clone())]);
    let a = leaves(&[("a", a43.clone())]);
    let target = a43.zip_map(&b43, |x, y| x + 0.5 * y.signum()).unwrap();
    let cases: Vec<(&str, ModelParams, Case)> = vec![
        (
            "matmul",
            leaves(&[("a", a43.clone()), ("b", b32.clone())]),
            Box::new(|p| weighted_sum(&get(p, "a").matmul(get(p, "b"))?, 10)),
        ),
        (
            "sparse_apply laplacian",
            leaves(&[("a", x10.clone())]),
            Box::new(move |p| weighted_sum(&get(p, "a").sparse_apply(&lap)?, 11)),
        ),
        (
            "sparse_apply diffusion",
            leaves(&[("a", x10.clone())]),
            Box::new(move |p| weighted_sum(&get(p, "a").sparse_apply(&phi)?, 12)),
        ),
        (
            "add_row_bias",
            leaves(&[("a", a43.clone()), ("b", bias.clone())]),
            Box::new(|p| weighted_sum(&get(p, "a").add_row_bias(get(p, "b"))?, 13)),
        ),
        (
            "add",
            ab.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").add(get(p, "b"))?, 14)),
        ),
        (
            "sub",
            ab.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").sub(get(p, "b"))?, 15)),
        ),
        (
            "mul",
            ab.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").mul(get(p, "b"))?, 16)),
        ),
        (
            "mul self",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").mul(get(p, "a"))?, 17)),
        ),
        (
            "scale",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").scale(-1.7)?, 18)),
        ),
        (
            "lin_comb",
            ab.clone(),
            Box::new(|p| {
                let (x, y) = (get(p, "a"), get(p, "b"));
                weighted_sum(&x.tape().lin_comb(&[(0.3, x), (-2.0, y), (1.1, x)])?, 19)
            }),
        ),
        (
            "tanh",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").tanh()?, 20)),
        ),
        (
            "relu",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").relu()?, 21)),
        ),
        (
            "sigmoid",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").sigmoid()?, 22)),
        ),
        ("sum", a.clone(), Box::new(|p| get(p, "a").tanh()?.sum())),
        (
            "mean_abs_diff",
            a.clone(),
            Box::new(move |p| get(p, "a").mean_abs_diff(&target)),
        ),
        (
            "log_softmax_rows",
            a.clone(),
            Box::new(|p| weighted_sum(&get(p, "a").log_softmax_rows()?, 23)),
        ),
        (
            "cross_entropy_masked",
            a.clone(),
            Box::new(move |p| {
                cross_entropy_masked(get(p, "a"), &labels, &[true, false, true, true])
            }),
        ),
        (
            "composite",
            leaves(&[
                ("a", a43),
                ("b", b32),
                ("c", random_matrix(1, 2, 0.1, 0.5, true, 6)),
            ]),
            Box::new(|p| {
                let h = get(p, "a").matmul(get(p, "b"))?.add_row_bias(get(p, "c"))?;
                weighted_sum(&h.tanh()?.mul(&h.sigmoid()?)?, 24)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| (name.to_string(), grad_check(&params, f).unwrap()))
        .collect()
}

fn random_truth(times: &[f64], rows: usize, cols: usize) -> Trajectory {
    Trajectory {
        times: times.to_vec(),
        states: (0..times.len())
            .map(|k| random_matrix(rows, cols, 0.5, 2.0, false, 300 + k as u64))
            .collect(),
    }
}

fn ode_case(variant: Variant, solver: SolverSpec) -> f64 {
    let g = ten_nodes();
    let mut spec = ModelSpec::ode(variant, 2, 4, 1.0).unwrap();
    spec.solver = solver;
    let op = spec.operator(&g).unwrap();
    let params = jitter(init_params(&spec, 9).unwrap(), 9);
    let x0 = random_matrix(10, 2, 0.5, 2.0, false, 31);
    let times = [0.3, 0.7, 1.0];
    let truth = random_truth(&times, 10, 2);
    grad_check(&params, |p| {
        let traj = ndcn_forward(&spec, p, &op, &x0, &times)?;
        let fit = l1_loss(&traj, &truth)?;
        let probe = weighted_sum(traj.states.last().unwrap(), 32)?;
        fit.add(&probe.scale(0.1)?)
    })
    .unwrap()
}

fn temporal_case(variant: Variant) -> f64 {
    let g = ten_nodes();
    let spec = ModelSpec::temporal(variant, 1, 3, 4).unwrap();
    let op = spec.operator(&g).unwrap();
    let params = jitter(init_params(&spec, 8).unwrap(), 8);
    let frames: Vec<Matrix> = (0..4)
        .map(|k| random_matrix(10, 1, 0.5, 2.0, false, 400 + k))
        .collect();
    grad_check(&params, |p| {
        let (preds, _) = temporal_forward(&spec, p, &op, &frames[..3])?;
        let terms = preds
            .iter()
            .zip(&frames[1..])
            .map(|(y, x)| y.mean_abs_diff(x))
            .collect::<Result<Vec<_>>>()?;
        let weighted: Vec<(f64, &ndcn::autodiff::Var)> = terms.iter().map(|t| (1.0, t)).collect();
        let fit = terms[0].tape().lin_comb(&weighted)?;
        fit.add(&weighted_sum(preds.last().unwrap(), 41)?.scale(0.1)?)
    })
    .unwrap()
}

/// With `kinks = false` the encoder output is positive, so the flow never
/// crosses the relu kink.
pub fn classify_case(solver: SolverSpec, kinks: bool) -> f64 {
    let g = ten_nodes();
    let mut spec = ModelSpec::classify(3, 5, 3, 0.3, 1.0).unwrap();
    spec.solver = solver;
    let op = spec.operator(&g).unwrap();
    let mut params = jitter(init_params(&spec, 7).unwrap(), 7);
    if !kinks {
        for name in ["W_e", "b_e"] {
            let m = params.get_mut(name).unwrap();
            *m = m.map(f64::abs);
        }
    }
    let x = random_matrix(10, 3, 0.1, 1.0, kinks, 51);
    let mut labels = Matrix::zeros(10, 3);
    for i in 0..10 {
        labels.set(i, i % 3, 1.0);
    }
    let mask: Vec<bool> = (0..10).map(|i| i % 4 != 3).collect();
    grad_check(&params, |p| {
        cross_entropy_masked(&classify_forward(&spec, p, &op, &x)?, &labels, &mask)
    })
    .unwrap()
}

/// `(name, worst relative error)` for each model variant, including the
/// solvers they are run with.
pub fn model_cases() -> Vec<(String, f64)> {
    let euler = SolverSpec::fixed(Method::Euler, StepRule::PerInterval(1));
    let euler4 = SolverSpec::fixed(Method::Euler, StepRule::PerInterval(4));
    let rk4 = SolverSpec::rk4(0.1);
    let mut out = Vec::new();
    for v in [
        Variant::Ndcn,
        Variant::NoEncode,
        Variant::NoGraph,
        Variant::NoControl,
    ] {
        out.push((format!("{v} euler"), ode_case(v, euler)));
    }
    out.push(("ndcn euler x4".into(), ode_case(Variant::Ndcn, euler4)));
    out.push(("ndcn rk4".into(), ode_case(Variant::Ndcn, rk4)));
    for v in [Variant::RnnGnn, Variant::GruGnn, Variant::LstmGnn] {
        out.push((v.to_string(), temporal_case(v)));
    }
    out.push((
        "ndcn_classify dopri5".into(),
        classify_case(SolverSpec::dopri5(CLASSIFY_RTOL, CLASSIFY_ATOL), false),
    ));
    out.push(("ndcn_classify rk4 kinked".into(), classify_case(rk4, true)));
    out
}
