//! Ground-truth network dynamics: heat diffusion, mutualistic interaction
//! and gene regulation, plus the shared initial state and sampling helpers.

use crate::error::{invalid, Error, Result};
use crate::graphgen::{Family, Graph};
use crate::odeint::{solve, SolverSpec};
use crate::rng::seeded;
use crate::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::str::FromStr;

pub use crate::odeint::Trajectory;

/// Node-state matrix, `n x d`.
pub type StateMatrix = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Law {
    Heat,
    Mutualistic,
    Gene,
}

impl Law {
    pub const ALL: [Law; 3] = [Law::Heat, Law::Mutualistic, Law::Gene];

    pub fn name(self) -> &'static str {
        match self {
            Law::Heat => "heat",
            Law::Mutualistic => "mutualistic",
            Law::Gene => "gene",
        }
    }

    /// Default horizon: heat uses a per-network time scale, the other laws 5.
    pub fn default_horizon(self, family: Family) -> f64 {
        match (self, family) {
            (Law::Heat, Family::Grid) => 5.0,
            (Law::Heat, Family::Random) => 0.1,
            (Law::Heat, Family::PowerLaw) => 0.75,
            (Law::Heat, Family::SmallWorld) => 2.0,
            (Law::Heat, Family::Community) => 0.2,
            _ => 5.0,
        }
    }
}

impl fmt::Display for Law {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Law {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "heat" => Ok(Law::Heat),
            "mutualistic" | "mutual" => Ok(Law::Mutualistic),
            "gene" => Ok(Law::Gene),
            other => Err(invalid(format!("unknown dynamics law '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualisticConsts {
    pub b: f64,
    pub k: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub h: f64,
}

impl Default for MutualisticConsts {
    fn default() -> Self {
        Self {
            b: 0.1,
            k: 5.0,
            c: 1.0,
            d: 5.0,
            e: 0.9,
            h: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneConsts {
    pub b: f64,
    pub f: f64,
    pub h: f64,
}

impl Default for GeneConsts {
    fn default() -> Self {
        Self {
            b: 1.0,
            f: 1.0,
            h: 2.0,
        }
    }
}

/// A dynamics law with its constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum DynamicsSpec {
    Heat { k: f64 },
    Mutualistic(MutualisticConsts),
    Gene(GeneConsts),
}

impl DynamicsSpec {
    pub fn default_for(law: Law) -> Self {
        match law {
            Law::Heat => DynamicsSpec::Heat { k: 1.0 },
            Law::Mutualistic => DynamicsSpec::Mutualistic(MutualisticConsts::default()),
            Law::Gene => DynamicsSpec::Gene(GeneConsts::default()),
        }
    }

    pub fn law(&self) -> Law {
        match self {
            DynamicsSpec::Heat { .. } => Law::Heat,
            DynamicsSpec::Mutualistic(_) => Law::Mutualistic,
            DynamicsSpec::Gene(_) => Law::Gene,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            DynamicsSpec::Heat { k } => k.is_finite(),
            DynamicsSpec::Mutualistic(c) => {
                [c.b, c.k, c.c, c.d, c.e, c.h].iter().all(|v| v.is_finite())
            }
            DynamicsSpec::Gene(c) => [c.b, c.f, c.h].iter().all(|v| v.is_finite()),
        };
        if !finite {
            return Err(invalid("dynamics constants must be finite"));
        }
        if let DynamicsSpec::Gene(c) = self {
            if c.f != 1.0 && c.f != 2.0 {
                return Err(invalid(format!(
                    "gene exponent f must be 1 or 2, got {}",
                    c.f
                )));
            }
        }
        Ok(())
    }

    pub fn rhs(&self, g: &Graph, x: &StateMatrix) -> Result<StateMatrix> {
        match self {
            DynamicsSpec::Heat { k } => heat_rhs(g, x, *k),
            DynamicsSpec::Mutualistic(c) => mutualistic_rhs(g, x, c),
            DynamicsSpec::Gene(c) => gene_rhs(g, x, c),
        }
    }
}

fn check_rows(g: &Graph, x: &StateMatrix) -> Result<()> {
    if x.rows() != g.n() {
        return Err(invalid(format!(
            "state has {} rows, graph has {} nodes",
            x.rows(),
            g.n()
        )));
    }
    Ok(())
}

/// Newton cooling: `dx_i/dt = -k * sum_j A_ij (x_i - x_j)`.
pub fn heat_rhs(g: &Graph, x: &StateMatrix, k: f64) -> Result<StateMatrix> {
    check_rows(g, x)?;
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..g.n() {
        let xi = x.row(i);
        let mut acc = vec![0.0; d];
        for &j in g.neighbors(i) {
            for (a, (&vi, &vj)) in acc.iter_mut().zip(xi.iter().zip(x.row(j))) {
                *a += vi - vj;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = -k * a;
        }
    }
    Ok(out)
}

/// Migration, logistic growth with Allee effect, and saturating mutualism:
/// `b + x_i (1 - x_i/k)(x_i/c - 1) + sum_j A_ij x_i x_j / (d + e x_i + h x_j)`.
pub fn mutualistic_rhs(g: &Graph, x: &StateMatrix, c: &MutualisticConsts) -> Result<StateMatrix> {
    check_rows(g, x)?;
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..g.n() {
        for col in 0..d {
            let xi = x.get(i, col);
            let mut v = c.b + xi * (1.0 - xi / c.k) * (xi / c.c - 1.0);
            for &j in g.neighbors(i) {
                let xj = x.get(j, col);
                let denom = c.d + c.e * xi + c.h * xj;
                if denom == 0.0 {
                    return Err(Error::DegenerateInput(format!(
                        "mutualistic denominator vanishes on edge ({i}, {j})"
                    )));
                }
                v += xi * xj / denom;
            }
            out.set(i, col, v);
        }
    }
    Ok(out)
}

fn power(x: f64, p: f64) -> Result<f64> {
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        Ok(x.powi(p as i32))
    } else if x < 0.0 {
        Err(Error::DegenerateInput(format!(
            "negative state {x} with non-integer exponent {p}"
        )))
    } else {
        Ok(x.powf(p))
    }
}

/// Michaelis-Menten regulation: `-b x_i^f + sum_j A_ij x_j^h / (x_j^h + 1)`.
pub fn gene_rhs(g: &Graph, x: &StateMatrix, c: &GeneConsts) -> Result<StateMatrix> {
    check_rows(g, x)?;
    let d = x.cols();
    let mut hill = Matrix::zeros(x.rows(), d);
    for (dst, &v) in hill.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let p = power(v, c.h)?;
        *dst = p / (p + 1.0);
    }
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..g.n() {
        for col in 0..d {
            let mut v = -c.b * power(x.get(i, col), c.f)?;
            for &j in g.neighbors(i) {
                v += hill.get(j, col);
            }
            out.set(i, col, v);
        }
    }
    Ok(out)
}

/// The three-block initial pattern on an `N x N` layout, as an `N^2 x 1`
/// column. Blocks use half-open index ranges `[floor(lo N), floor(hi N))`.
pub fn default_initial_state(side: usize) -> StateMatrix {
    let n = side * side;
    let mut x = Matrix::zeros(n, 1);
    let cut = |f: f64| (f * side as f64) as usize;
    let mut fill = |rows: (f64, f64), cols: (f64, f64), value: f64| {
        for r in cut(rows.0)..cut(rows.1) {
            for c in cut(cols.0)..cut(cols.1) {
                x.set(r * side + c, 0, value);
            }
        }
    };
    fill((0.05, 0.25), (0.05, 0.25), 25.0);
    fill((0.45, 0.75), (0.45, 0.75), 20.0);
    fill((0.05, 0.25), (0.35, 0.65), 17.0);
    x
}

/// Tolerances for ground-truth trajectories.
pub const TRUTH_RTOL: f64 = 1e-7;
pub const TRUTH_ATOL: f64 = 1e-9;

/// Integrates the law with adaptive Dormand-Prince from `x0` at `t = 0`.
pub fn simulate_truth(
    g: &Graph,
    spec: &DynamicsSpec,
    x0: &StateMatrix,
    times: &[f64],
) -> Result<Trajectory> {
    simulate_with(
        g,
        spec,
        x0,
        times,
        &SolverSpec::dopri5(TRUTH_RTOL, TRUTH_ATOL),
    )
}

pub fn simulate_with(
    g: &Graph,
    spec: &DynamicsSpec,
    x0: &StateMatrix,
    times: &[f64],
    solver: &SolverSpec,
) -> Result<Trajectory> {
    spec.validate()?;
    check_rows(g, x0)?;
    solve(|_, x: &Matrix| spec.rhs(g, x), x0, times, solver)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Irregular,
    Regular,
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irregular" => Ok(Sampling::Irregular),
            "regular" => Ok(Sampling::Regular),
            other => Err(invalid(format!("unknown sampling '{other}'"))),
        }
    }
}

/// Sample times in `(0, T]`. Irregular draws are i.i.d. uniform, sorted,
/// with collisions redrawn; regular times are `T/count, 2T/count, ..., T`.
pub fn sample_times(mode: Sampling, count: usize, horizon: f64, seed: u64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(invalid("need at least two sample times"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    match mode {
        Sampling::Regular => Ok((1..=count)
            .map(|i| {
                if i == count {
                    horizon
                } else {
                    horizon * i as f64 / count as f64
                }
            })
            .collect()),
        Sampling::Irregular => {
            let mut rng = seeded(seed);
            let mut times: Vec<f64> = Vec::with_capacity(count);
            while times.len() < count {
                let t = horizon * (1.0 - rng.gen::<f64>());
                if !times.contains(&t) {
                    times.push(t);
                }
            }
            times.sort_by(f64::total_cmp);
            Ok(times)
        }
    }
}

/// `t,node,dim,value` rows, one per (time, node, dim).
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,node,dim,value\n");
    for (t, x) in traj.times.iter().zip(&traj.states) {
        for node in 0..x.rows() {
            for dim in 0..x.cols() {
                let _ = writeln!(out, "{t},{node},{dim},{}", x.get(node, dim));
            }
        }
    }
    out
}

/// Parses the output of [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t,node,dim,value") {
        return Err(Error::Format("missing trajectory header".into()));
    }
    let mut rows: Vec<(f64, usize, usize, f64)> = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 fields", k + 2)));
        }
        let bad = |e: &dyn fmt::Display| Error::Format(format!("line {}: {e}", k + 2));
        rows.push((
            f[0].parse().map_err(|e| bad(&e))?,
            f[1].parse().map_err(|e| bad(&e))?,
            f[2].parse().map_err(|e| bad(&e))?,
            f[3].parse().map_err(|e| bad(&e))?,
        ));
    }
    let mut times: Vec<f64> = Vec::new();
    for r in &rows {
        if times.last() != Some(&r.0) {
            times.push(r.0);
        }
    }
    let n = rows.iter().map(|r| r.1).max().map_or(0, |m| m + 1);
    let d = rows.iter().map(|r| r.2).max().map_or(0, |m| m + 1);
    let mut states = vec![Matrix::zeros(n, d); times.len()];
    let mut idx = 0;
    for r in rows {
        while times[idx] != r.0 {
            idx += 1;
        }
        states[idx].set(r.1, r.2, r.3);
    }
    Ok(Trajectory { times, states })
}
