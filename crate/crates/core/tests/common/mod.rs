//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod gradients;

use ndcn::autodiff::{Tape, Var};
use ndcn::models::{BoundParams, ModelParams};
use ndcn::rng::derived;
use ndcn::{Matrix, Result};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

/// Uniform entries in `[lo, hi)`, negated with probability one half when
/// `signed`; keeps values away from zero so relu kinks stay out of reach
/// of the finite-difference step.
pub fn random_matrix(
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    signed: bool,
    seed: u64,
) -> Matrix {
    let mut rng = derived(seed, 77);
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if signed && rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output entry carries a distinct adjoint.
pub fn weighted_sum(out: &Var, seed: u64) -> Result<Var> {
    let (r, c) = out.shape();
    let w = out
        .tape()
        .constant(random_matrix(r, c, 0.5, 1.5, true, seed));
    out.mul(&w)?.sum()
}

/// Largest per-tensor relative error `|g_ad - g_fd| / max(|g_ad|, |g_fd|)`
/// (Euclidean norms) between reverse-mode and central-difference gradients.
pub fn grad_check<F>(params: &ModelParams, loss: F) -> Result<f64>
where
    F: Fn(&BoundParams) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let l = loss(&bound)?;
    let grads = l.backward()?;
    let analytic: Vec<(String, Matrix)> = bound
        .iter()
        .map(|(name, v)| (name.to_string(), grads.get_or_zeros(v)))
        .collect();

    let eval = |p: &ModelParams| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        Ok(loss(&bound)?.value().item())
    };

    let mut worst: f64 = 0.0;
    for (name, g_ad) in &analytic {
        let base = params.get(name).unwrap();
        let mut g_fd = Matrix::zeros(base.rows(), base.cols());
        for k in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_mut_slice()[k] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_mut_slice()[k] -= FD_STEP;
            g_fd.as_mut_slice()[k] = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        }
        let diff = g_ad
            .as_slice()
            .iter()
            .zip(g_fd.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = g_ad.sum_squares().sqrt().max(g_fd.sum_squares().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if !(rel <= worst) {
            worst = rel;
        }
    }
    Ok(worst)
}
