//! Learnable architectures: the graph neural ODE, its ablations, the
//! temporal GNN baselines and the node classifier.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graphgen::Graph;
use crate::odeint::{solve, Method, SolverSpec, StepRule, Trajectory};
use crate::operators::{normalized_laplacian, tunable_diffusion, DiffOp};
use crate::rng::seeded;
use crate::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ndcn,
    NoEncode,
    NoGraph,
    NoControl,
    RnnGnn,
    GruGnn,
    LstmGnn,
    NdcnClassify,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Ndcn,
        Variant::NoEncode,
        Variant::NoGraph,
        Variant::NoControl,
        Variant::RnnGnn,
        Variant::GruGnn,
        Variant::LstmGnn,
        Variant::NdcnClassify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ndcn => "ndcn",
            Variant::NoEncode => "no_encode",
            Variant::NoGraph => "no_graph",
            Variant::NoControl => "no_control",
            Variant::RnnGnn => "rnn_gnn",
            Variant::GruGnn => "gru_gnn",
            Variant::LstmGnn => "lstm_gnn",
            Variant::NdcnClassify => "ndcn_classify",
        }
    }

    /// Continuous-time models driven through an ODE solver.
    pub fn is_ode(self) -> bool {
        matches!(
            self,
            Variant::Ndcn | Variant::NoEncode | Variant::NoGraph | Variant::NoControl
        )
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Variant::RnnGnn | Variant::GruGnn | Variant::LstmGnn)
    }

    /// Gate names of the recurrent cell, in parameter order.
    fn gates(self) -> &'static [&'static str] {
        match self {
            Variant::RnnGnn => &["h"],
            Variant::GruGnn => &["r", "z", "n"],
            Variant::LstmGnn => &["i", "f", "g", "o"],
            _ => &[],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let v = match key.as_str() {
            "ndcn" => Variant::Ndcn,
            "no_encode" => Variant::NoEncode,
            "no_graph" => Variant::NoGraph,
            "no_control" => Variant::NoControl,
            "rnn_gnn" | "rnn" => Variant::RnnGnn,
            "gru_gnn" | "gru" => Variant::GruGnn,
            "lstm_gnn" | "lstm" => Variant::LstmGnn,
            "ndcn_classify" | "classify" => Variant::NdcnClassify,
            _ => return Err(invalid(format!("unknown model variant '{s}'"))),
        };
        Ok(v)
    }
}

/// Architecture and integration settings of a model.
///
/// `d_hidden` is the ODE hidden size for the continuous models and the
/// recurrent state size for the temporal ones, whose graph extractor width
/// is `d_gcn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub d_gcn: usize,
    pub alpha: Option<f64>,
    pub terminal_t: f64,
    pub solver: SolverSpec,
}

pub const DEFAULT_GCN_HIDDEN: usize = 5;
pub const DEFAULT_RNN_HIDDEN: usize = 10;
pub const TEMPORAL_ALPHA: f64 = 0.5;
pub const CLASSIFY_TICKS: usize = 16;
pub const CLASSIFY_RTOL: f64 = 1e-3;
pub const CLASSIFY_ATOL: f64 = 1e-4;

impl ModelSpec {
    /// One of the four continuous-time variants, with one Euler step between
    /// consecutive query times.
    pub fn ode(variant: Variant, d: usize, d_hidden: usize, terminal_t: f64) -> Result<Self> {
        if !variant.is_ode() {
            return Err(invalid(format!(
                "{variant} is not a continuous-time variant"
            )));
        }
        let spec = Self {
            variant,
            d_in: d,
            d_hidden,
            d_out: d,
            d_gcn: 0,
            alpha: None,
            terminal_t,
            solver: SolverSpec::fixed(Method::Euler, StepRule::PerInterval(1)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ndcn(d: usize, d_hidden: usize, terminal_t: f64) -> Result<Self> {
        Self::ode(Variant::Ndcn, d, d_hidden, terminal_t)
    }

    pub fn temporal(variant: Variant, d: usize, d_gcn: usize, d_hidden: usize) -> Result<Self> {
        if !variant.is_temporal() {
            return Err(invalid(format!("{variant} is not a temporal variant")));
        }
        let spec = Self {
            variant,
            d_in: d,
            d_hidden,
            d_out: d,
            d_gcn,
            alpha: Some(TEMPORAL_ALPHA),
            terminal_t: 0.0,
            solver: SolverSpec::euler(1.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classify(
        d_in: usize,
        d_hidden: usize,
        classes: usize,
        alpha: f64,
        terminal_t: f64,
    ) -> Result<Self> {
        let spec = Self {
            variant: Variant::NdcnClassify,
            d_in,
            d_hidden,
            d_out: classes,
            d_gcn: 0,
            alpha: Some(alpha),
            terminal_t,
            solver: SolverSpec::dopri5(CLASSIFY_RTOL, CLASSIFY_ATOL),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.d_hidden == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.variant.is_temporal() && self.d_gcn == 0 {
            return Err(invalid(
                "temporal models need a positive graph extractor width",
            ));
        }
        if self.variant == Variant::NoEncode && self.d_in != self.d_out {
            return Err(invalid(
                "no_encode runs in signal space and needs d_in == d_out",
            ));
        }
        match (self.variant, self.alpha) {
            (Variant::NdcnClassify, None) => return Err(invalid("classifier needs alpha")),
            (v, Some(a)) if v == Variant::NdcnClassify || v.is_temporal() => {
                if !(0.0..=1.0).contains(&a) {
                    return Err(invalid(format!("alpha {a} outside [0, 1]")));
                }
            }
            (_, Some(_)) => {
                return Err(invalid(
                    "alpha only applies to classify and temporal models",
                ))
            }
            _ => {}
        }
        if !self.variant.is_temporal() && !(self.terminal_t > 0.0) {
            return Err(invalid("terminal time must be positive"));
        }
        self.solver.validate()
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (d, h, o) = (self.d_in, self.d_hidden, self.d_out);
        let mut out: Vec<(String, (usize, usize))> = Vec::new();
        let mut push = |name: &str, shape| out.push((name.to_string(), shape));
        match self.variant {
            Variant::Ndcn | Variant::NoGraph | Variant::NoControl => {
                push("W_e", (d, h));
                push("b_e", (1, h));
                push("W_0", (h, h));
                push("b_0", (1, h));
                if self.variant != Variant::NoControl {
                    push("W", (h, h));
                    push("b", (1, h));
                }
                push("W_d", (h, o));
                push("b_d", (1, o));
            }
            Variant::NoEncode => {
                push("W", (d, d));
                push("b", (1, d));
            }
            Variant::RnnGnn | Variant::GruGnn | Variant::LstmGnn => {
                let gcn = self.d_gcn;
                push("W_e", (d, gcn));
                push("b_e", (1, gcn));
                for gate in self.variant.gates() {
                    push(&format!("W_i{gate}"), (gcn, h));
                    push(&format!("b_i{gate}"), (1, h));
                    push(&format!("W_h{gate}"), (h, h));
                    push(&format!("b_h{gate}"), (1, h));
                }
                push("W_d", (h, o));
                push("b_d", (1, o));
            }
            Variant::NdcnClassify => {
                push("W_e", (d, h));
                push("b_e", (1, h));
                push("W_d", (h, o));
                push("b_d", (1, o));
            }
        }
        out
    }

    /// The graph operator this model consumes.
    pub fn operator(&self, g: &Graph) -> Result<Arc<DiffOp>> {
        let op = match self.variant {
            Variant::NoGraph => DiffOp::identity(g.n()),
            Variant::NdcnClassify | Variant::RnnGnn | Variant::GruGnn | Variant::LstmGnn => {
                tunable_diffusion(g, self.alpha.unwrap_or(TEMPORAL_ALPHA))?
            }
            _ => normalized_laplacian(g),
        };
        Ok(Arc::new(op))
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    spec.layout().iter().map(|(_, (r, c))| r * c).sum()
}

/// Named parameter matrices in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Matrix)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        Self { entries }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let entries = spec
            .layout()
            .into_iter()
            .map(|(name, (r, c))| (name, Matrix::zeros(r, c)))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.entries.iter_mut().map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Checks names and shapes against `spec`, and finiteness.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        if layout.len() != self.entries.len() {
            return Err(invalid(format!(
                "{} expects {} parameter blocks, got {}",
                spec.variant,
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (n, m)) in layout.iter().zip(&self.entries) {
            if name != n || *shape != m.shape() {
                return Err(invalid(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("parameter {n} is not finite")));
            }
        }
        Ok(())
    }

    /// Records every block on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, m)| {
                let v = if trainable {
                    tape.leaf(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Glorot-uniform weights and zero biases, drawn in canonical order.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let entries = spec
        .layout()
        .into_iter()
        .map(|(name, (r, c))| {
            let m = if name.starts_with('b') {
                Matrix::zeros(r, c)
            } else {
                let s = (6.0 / (r + c) as f64).sqrt();
                let data = (0..r * c).map(|_| rng.gen_range(-s..=s)).collect();
                Matrix::from_vec(r, c, data).expect("shape from layout")
            };
            (name, m)
        })
        .collect();
    Ok(ModelParams { entries })
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    fn tape(&self) -> Result<&Tape> {
        self.vars
            .first()
            .map(|(_, v)| v.tape())
            .ok_or_else(|| invalid("no parameters bound"))
    }

    fn affine(&self, x: &Var, w: &str, b: &str) -> Result<Var> {
        x.matmul(self.get(w)?)?.add_row_bias(self.get(b)?)
    }
}

fn check_times(spec: &ModelSpec, query_times: &[f64]) -> Result<()> {
    if let Some(&t) = query_times.iter().find(|&&t| t > spec.terminal_t) {
        return Err(invalid(format!(
            "query time {t} beyond terminal time {}",
            spec.terminal_t
        )));
    }
    Ok(())
}

/// Encodes `x0`, integrates the hidden flow and decodes every queried state.
pub fn ndcn_forward(
    spec: &ModelSpec,
    params: &BoundParams,
    op: &Arc<DiffOp>,
    x0: &Matrix,
    query_times: &[f64],
) -> Result<Trajectory<Var>> {
    if !spec.variant.is_ode() {
        return Err(invalid(format!(
            "{} is not a continuous-time variant",
            spec.variant
        )));
    }
    if x0.cols() != spec.d_in || x0.rows() != op.n() {
        return Err(invalid(format!(
            "initial state {:?} does not fit {} nodes x {} features",
            x0.shape(),
            op.n(),
            spec.d_in
        )));
    }
    check_times(spec, query_times)?;
    let tape = params.tape()?;
    let x = tape.constant(x0.clone());
    let variant = spec.variant;
    let h0 = match variant {
        Variant::NoEncode => x,
        _ => {
            let e = params.affine(&x, "W_e", "b_e")?.tanh()?;
            params.affine(&e, "W_0", "b_0")?
        }
    };
    let rhs = |_t: f64, h: &Var| -> Result<Var> {
        match variant {
            Variant::NoControl => h.sparse_apply(op)?.relu(),
            Variant::NoGraph => params.affine(h, "W", "b")?.relu(),
            _ => params.affine(&h.sparse_apply(op)?, "W", "b")?.relu(),
        }
    };
    let hidden = solve(rhs, &h0, query_times, &spec.solver)?;
    let states = match variant {
        Variant::NoEncode => hidden.states,
        _ => hidden
            .states
            .iter()
            .map(|h| params.affine(h, "W_d", "b_d"))
            .collect::<Result<_>>()?,
    };
    Ok(Trajectory {
        times: hidden.times,
        states,
    })
}

/// Inference-only wrapper around [`ndcn_forward`].
pub fn ndcn_predict(
    spec: &ModelSpec,
    params: &ModelParams,
    op: &Arc<DiffOp>,
    x0: &Matrix,
    query_times: &[f64],
) -> Result<Trajectory> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let traj = ndcn_forward(spec, &bound, op, x0, query_times)?;
    Ok(Trajectory {
        times: traj.times,
        states: traj.states.iter().map(|s| s.value().clone()).collect(),
    })
}

/// Recurrent state threaded through the temporal cells.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros(spec: &ModelSpec, tape: &Tape, n: usize) -> Self {
        let z = || tape.constant(Matrix::zeros(n, spec.d_hidden));
        Self {
            h: z(),
            c: (spec.variant == Variant::LstmGnn).then(z),
        }
    }
}

/// One temporal step: graph feature extraction, cell update and the
/// next-state prediction.
pub fn temporal_step(
    spec: &ModelSpec,
    params: &BoundParams,
    op: &Arc<DiffOp>,
    x: &Var,
    state: &CellState,
) -> Result<(Var, CellState)> {
    let xt = params.affine(&x.sparse_apply(op)?, "W_e", "b_e")?.relu()?;
    let h = &state.h;
    let gate = |g: &str| -> Result<Var> {
        let a = params.affine(&xt, &format!("W_i{g}"), &format!("b_i{g}"))?;
        let b = params.affine(h, &format!("W_h{g}"), &format!("b_h{g}"))?;
        a.add(&b)
    };
    let next = match spec.variant {
        Variant::RnnGnn => CellState {
            h: gate("h")?.tanh()?,
            c: None,
        },
        Variant::GruGnn => {
            let r = gate("r")?.sigmoid()?;
            let z = gate("z")?.sigmoid()?;
            let hn = params.affine(h, "W_hn", "b_hn")?;
            let n = params
                .affine(&xt, "W_in", "b_in")?
                .add(&r.mul(&hn)?)?
                .tanh()?;
            // (1 - z) n + z h = n + z (h - n)
            let h = n.add(&z.mul(&h.sub(&n)?)?)?;
            CellState { h, c: None }
        }
        Variant::LstmGnn => {
            let c_prev = state
                .c
                .as_ref()
                .ok_or_else(|| invalid("lstm state without a cell"))?;
            let i = gate("i")?.sigmoid()?;
            let f = gate("f")?.sigmoid()?;
            let g = gate("g")?.tanh()?;
            let o = gate("o")?.sigmoid()?;
            let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
            let h = o.mul(&c.tanh()?)?;
            CellState { h, c: Some(c) }
        }
        v => return Err(invalid(format!("{v} is not a temporal variant"))),
    };
    let pred = params.affine(&next.h, "W_d", "b_d")?;
    Ok((pred, next))
}

/// Teacher-forced pass: prediction `k` estimates `x_seq[k + 1]`.
pub fn temporal_forward(
    spec: &ModelSpec,
    params: &BoundParams,
    op: &Arc<DiffOp>,
    x_seq: &[Matrix],
) -> Result<(Vec<Var>, CellState)> {
    let first = x_seq
        .first()
        .ok_or_else(|| invalid("empty input sequence"))?;
    if x_seq.iter().any(|x| x.shape() != first.shape()) {
        return Err(invalid("sequence frames differ in shape"));
    }
    if first.rows() != op.n() || first.cols() != spec.d_in {
        return Err(invalid(format!(
            "frame shape {:?} does not fit the model",
            first.shape()
        )));
    }
    let tape = params.tape()?;
    let mut state = CellState::zeros(spec, tape, first.rows());
    let mut preds = Vec::with_capacity(x_seq.len());
    for x in x_seq {
        let (p, s) = temporal_step(spec, params, op, &tape.constant(x.clone()), &state)?;
        preds.push(p);
        state = s;
    }
    Ok((preds, state))
}

/// Warms the cell up on `history` and then feeds its own predictions back
/// for `steps` frames past the end of the history.
pub fn temporal_rollout(
    spec: &ModelSpec,
    params: &ModelParams,
    op: &Arc<DiffOp>,
    history: &[Matrix],
    steps: usize,
) -> Result<Vec<Matrix>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let (preds, mut state) = temporal_forward(spec, &bound, op, history)?;
    let mut out = Vec::with_capacity(steps);
    let Some(mut last) = preds.last().cloned() else {
        return Ok(out);
    };
    for k in 0..steps {
        out.push(last.value().clone());
        if k + 1 < steps {
            let (p, s) = temporal_step(spec, &bound, op, &last, &state)?;
            last = p;
            state = s;
        }
    }
    Ok(out)
}

/// Evenly spaced ticks `0, T/(m-1), ..., T`.
pub fn classify_ticks(t_end: f64) -> Vec<f64> {
    let m = CLASSIFY_TICKS;
    (0..m)
        .map(|i| {
            if i + 1 == m {
                t_end
            } else {
                t_end * i as f64 / (m - 1) as f64
            }
        })
        .collect()
}

/// Class logits at the terminal time.
pub fn classify_forward(
    spec: &ModelSpec,
    params: &BoundParams,
    op: &Arc<DiffOp>,
    x0: &Matrix,
) -> Result<Var> {
    if spec.variant != Variant::NdcnClassify {
        return Err(invalid(format!("{} is not the classifier", spec.variant)));
    }
    if x0.cols() != spec.d_in || x0.rows() != op.n() {
        return Err(invalid(format!(
            "features {:?} do not fit the model",
            x0.shape()
        )));
    }
    let tape = params.tape()?;
    let h0 = params
        .affine(&tape.constant(x0.clone()), "W_e", "b_e")?
        .tanh()?;
    let traj = solve(
        |_t, h: &Var| h.sparse_apply(op)?.relu(),
        &h0,
        &classify_ticks(spec.terminal_t),
        &spec.solver,
    )?;
    let last = traj.states.last().expect("non-empty tick grid");
    params.affine(last, "W_d", "b_d")
}

pub fn classify_predict(
    spec: &ModelSpec,
    params: &ModelParams,
    op: &Arc<DiffOp>,
    x0: &Matrix,
) -> Result<Matrix> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(classify_forward(spec, &bound, op, x0)?.value().clone())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NDCNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters as: magic `NDCNCKPT`, u32 version, u32 block
/// count, then per block a u32 name length, UTF-8 name, u64 rows, u64 cols
/// and rows*cols row-major f64 values. Integers and floats little-endian.
pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let total = rows
            .checked_mul(cols)
            .filter(|t| t.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("implausible shape for {name}")))?;
        let payload = cur.take(total * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(ModelParams { entries })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::{gen_erdos_renyi, gen_grid8};

    fn ndcn20() -> ModelSpec {
        ModelSpec::ndcn(1, 20, 5.0).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(&ndcn20()), 901);
        let nc = ModelSpec::ode(Variant::NoControl, 1, 20, 5.0).unwrap();
        assert_eq!(param_count(&nc), 481);
        assert!(nc.layout().iter().all(|(n, _)| n != "W" && n != "b"));
        let cls = ModelSpec::classify(1433, 256, 7, 0.0, 1.2).unwrap();
        assert_eq!(param_count(&cls), (1433 * 256 + 256) + (256 * 7 + 7));
        let rnn = ModelSpec::temporal(Variant::RnnGnn, 1, 5, 10).unwrap();
        assert_eq!(param_count(&rnn), 191);
        let enc = ModelSpec::ode(Variant::NoEncode, 1, 20, 5.0).unwrap();
        assert_eq!(param_count(&enc), 2);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ndcn20();
        let a = init_params(&spec, 3).unwrap();
        assert_eq!(a, init_params(&spec, 3).unwrap());
        assert_ne!(a, init_params(&spec, 4).unwrap());
        a.check(&spec).unwrap();
        assert_eq!(a.scalar_count(), 901);
        assert!(a.get("b_e").unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::ode(Variant::RnnGnn, 1, 20, 1.0).is_err());
        assert!(ModelSpec::classify(3, 4, 2, 1.5, 1.0).is_err());
        assert!(ModelSpec::ndcn(1, 0, 1.0).is_err());
        assert!(ModelSpec::ndcn(1, 20, 0.0).is_err());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn zero_length_flow() {
        let g = gen_grid8(3).unwrap();
        let spec = ndcn20();
        let params = init_params(&spec, 1).unwrap();
        let op = spec.operator(&g).unwrap();
        let x0 = Matrix::column(&(0..9).map(|i| i as f64).collect::<Vec<_>>());
        let traj = ndcn_predict(&spec, &params, &op, &x0, &[0.0]).unwrap();
        let enc = x0
            .matmul(params.get("W_e").unwrap())
            .unwrap()
            .map(f64::tanh)
            .matmul(params.get("W_0").unwrap())
            .unwrap();
        let dec = enc.matmul(params.get("W_d").unwrap()).unwrap();
        assert!(traj.states[0].max_abs_diff(&dec) < 1e-12);
    }

    #[test]
    fn zero_params_give_constant_output() {
        let g = gen_grid8(3).unwrap();
        let spec = ndcn20();
        let params = ModelParams::zeros(&spec);
        let op = spec.operator(&g).unwrap();
        let traj = ndcn_predict(
            &spec,
            &params,
            &op,
            &Matrix::filled(9, 1, 2.0),
            &[0.0, 1.0, 5.0],
        )
        .unwrap();
        assert!(traj.states.iter().all(|s| s == &traj.states[0]));
    }

    #[test]
    fn query_beyond_horizon_rejected() {
        let g = gen_grid8(2).unwrap();
        let spec = ModelSpec::ndcn(1, 4, 1.0).unwrap();
        let params = init_params(&spec, 0).unwrap();
        let op = spec.operator(&g).unwrap();
        assert!(ndcn_predict(&spec, &params, &op, &Matrix::zeros(4, 1), &[0.5, 2.0]).is_err());
    }

    #[test]
    fn no_graph_ignores_edges() {
        let spec = ModelSpec::ode(Variant::NoGraph, 1, 6, 2.0).unwrap();
        let params = init_params(&spec, 9).unwrap();
        let x0 = Matrix::column(&[0.1, 0.5, -0.3, 0.9, 0.0, 0.2, 0.4, -0.8, 0.6, 0.3]);
        let times = [0.5, 1.0, 2.0];
        let a = gen_erdos_renyi(10, 0.3, 1).unwrap();
        let b = gen_erdos_renyi(10, 0.6, 2).unwrap();
        let ta = ndcn_predict(&spec, &params, &spec.operator(&a).unwrap(), &x0, &times).unwrap();
        let tb = ndcn_predict(&spec, &params, &spec.operator(&b).unwrap(), &x0, &times).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn zero_temporal_params_predict_zero() {
        let g = gen_grid8(3).unwrap();
        for v in [Variant::RnnGnn, Variant::GruGnn, Variant::LstmGnn] {
            let spec = ModelSpec::temporal(v, 1, 5, 10).unwrap();
            let params = ModelParams::zeros(&spec);
            let op = spec.operator(&g).unwrap();
            let seq = vec![Matrix::filled(9, 1, 1.5); 3];
            let out = temporal_rollout(&spec, &params, &op, &seq, 4).unwrap();
            assert_eq!(out.len(), 4);
            assert!(out.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn gru_saturated_update_gate_carries_state() {
        let g = gen_grid8(2).unwrap();
        let spec = ModelSpec::temporal(Variant::GruGnn, 1, 3, 4).unwrap();
        let mut params = init_params(&spec, 5).unwrap();
        *params.get_mut("b_iz").unwrap() = Matrix::filled(1, 4, 1e3);
        let op = spec.operator(&g).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let h = tape
            .constant(Matrix::from_vec(4, 4, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap());
        let state = CellState {
            h: h.clone(),
            c: None,
        };
        let x = tape.constant(Matrix::column(&[1.0, -2.0, 0.5, 3.0]));
        let (_, next) = temporal_step(&spec, &bound, &op, &x, &state).unwrap();
        assert!(next.h.value().max_abs_diff(h.value()) < 1e-12);
    }

    #[test]
    fn scalar_rnn_matches_recurrence() {
        let g = Graph::from_edges(1, []).unwrap();
        let mut spec = ModelSpec::temporal(Variant::RnnGnn, 1, 1, 1).unwrap();
        spec.alpha = Some(0.5);
        let vals = [
            ("W_e", 0.7),
            ("b_e", 0.1),
            ("W_ih", -0.4),
            ("b_ih", 0.2),
            ("W_hh", 0.9),
            ("b_hh", -0.05),
            ("W_d", 1.3),
            ("b_d", 0.3),
        ];
        let params = ModelParams::new(
            vals.iter()
                .map(|(n, v)| (n.to_string(), Matrix::scalar(*v)))
                .collect(),
        );
        params.check(&spec).unwrap();
        let op = spec.operator(&g).unwrap();
        let xs = [0.5, 1.5, -0.25];
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let seq: Vec<Matrix> = xs.iter().map(|&x| Matrix::scalar(x)).collect();
        let (preds, _) = temporal_forward(&spec, &bound, &op, &seq).unwrap();
        let mut h = 0.0f64;
        for (k, &x) in xs.iter().enumerate() {
            // isolated node under alpha = 0.5: Phi = 0.5 / 0.5 = 1
            let xt = (x * 0.7 + 0.1f64).max(0.0);
            h = (-0.4 * xt + 0.2 + 0.9 * h - 0.05).tanh();
            let want = 1.3 * h + 0.3;
            assert!((preds[k].value().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_limits() {
        let g = Graph::from_edges(1, []).unwrap();
        let spec = ModelSpec::classify(2, 3, 2, 1.0, 0.7).unwrap();
        let mut params = init_params(&spec, 2).unwrap();
        *params.get_mut("W_e").unwrap() =
            Matrix::from_vec(2, 3, vec![0.5, 0.2, 0.1, 0.3, 0.0, 0.4]).unwrap();
        *params.get_mut("W_d").unwrap() =
            Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let op = spec.operator(&g).unwrap();
        let x0 = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let h0 = x0
            .matmul(params.get("W_e").unwrap())
            .unwrap()
            .map(f64::tanh);
        let logits = classify_predict(&spec, &params, &op, &x0).unwrap();
        let want = h0
            .scaled(0.7f64.exp())
            .matmul(params.get("W_d").unwrap())
            .unwrap();
        assert!(logits.max_abs_diff(&want) < 1e-3);

        let mut tiny = spec.clone();
        tiny.terminal_t = 1e-9;
        let logits = classify_predict(&tiny, &params, &op, &x0).unwrap();
        let want = h0.matmul(params.get("W_d").unwrap()).unwrap();
        assert!(logits.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ModelSpec::temporal(Variant::LstmGnn, 1, 5, 10).unwrap();
        let params = init_params(&spec, 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, params);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
