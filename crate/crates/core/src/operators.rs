//! Sparse symmetric diffusion operators built from a graph.

use crate::error::{invalid, Error, Result};
use crate::graphgen::Graph;
use crate::Matrix;

/// Symmetric sparse `n x n` operator in compressed-row form.
///
/// Off-diagonal values are computed once per edge and written to both
/// `(i, j)` and `(j, i)`, so symmetry holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffOp {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl DiffOp {
    /// Assembles an operator from a diagonal and per-edge off-diagonal values.
    /// Zero entries are dropped.
    fn assemble(g: &Graph, diag: &[f64], off: impl Fn(usize, usize) -> f64) -> Self {
        let n = g.n();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n + 2 * g.edge_count());
        let mut vals = Vec::with_capacity(n + 2 * g.edge_count());
        row_ptr.push(0);
        for i in 0..n {
            let mut diag_done = false;
            for &j in g.neighbors(i) {
                if !diag_done && j > i {
                    if diag[i] != 0.0 {
                        cols.push(i);
                        vals.push(diag[i]);
                    }
                    diag_done = true;
                }
                let v = off(i.min(j), i.max(j));
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            if !diag_done && diag[i] != 0.0 {
                cols.push(i);
                vals.push(diag[i]);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Iterates `(row, col, value)` over stored entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            m.set(i, j, v);
        }
        m
    }

    /// Sparse-dense product `self * x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(invalid(format!(
                "operator is {}x{}, state has {} rows",
                self.n,
                self.n,
                x.rows()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        self.apply_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_into(&self, x: &Matrix, out: &mut Matrix) {
        let d = x.cols();
        for i in 0..self.n {
            let row = out.row_mut(i);
            row.fill(0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.vals[k];
                let src = x.row(self.cols[k]);
                for c in 0..d {
                    row[c] += v * src[c];
                }
            }
        }
    }
}

/// `D^{-1/2} (D - A) D^{-1/2}`; rows and columns of isolated nodes are zero.
pub fn normalized_laplacian(g: &Graph) -> DiffOp {
    let inv_sqrt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let diag: Vec<f64> = (0..g.n())
        .map(|i| if g.degree(i) > 0 { 1.0 } else { 0.0 })
        .collect();
    DiffOp::assemble(g, &diag, |i, j| -(inv_sqrt[i] * inv_sqrt[j]))
}

/// `D~^{-1/2} (alpha I + (1 - alpha) A) D~^{-1/2}` with
/// `D~ = alpha I + (1 - alpha) D`.
///
/// `alpha = 1` gives the identity, `alpha = 0` the symmetric
/// random-walk average over neighbours, and `alpha = 0.5` the
/// self-loop renormalized adjacency.
pub fn tunable_diffusion(g: &Graph, alpha: f64) -> Result<DiffOp> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    let dt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| alpha + (1.0 - alpha) * d as f64)
        .collect();
    if let Some(i) = dt.iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateInput(format!(
            "node {i} is isolated and alpha = 0; normalizer vanishes"
        )));
    }
    let inv_sqrt: Vec<f64> = dt.iter().map(|v| 1.0 / v.sqrt()).collect();
    let diag: Vec<f64> = dt.iter().map(|&v| alpha / v).collect();
    let off = 1.0 - alpha;
    Ok(DiffOp::assemble(g, &diag, |i, j| {
        off * inv_sqrt[i] * inv_sqrt[j]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::{gen_erdos_renyi, gen_grid8};

    fn k2() -> Graph {
        Graph::from_edges(2, [(0, 1)]).unwrap()
    }

    fn k3() -> Graph {
        Graph::from_edges(3, [(0, 1), (0, 2), (1, 2)]).unwrap()
    }

    #[test]
    fn laplacian_small_graphs() {
        let l = normalized_laplacian(&k2()).to_dense();
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        let l = normalized_laplacian(&k3()).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { -0.5 };
                assert!((l.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_isolated_node_rows_are_zero() {
        let g = Graph::from_edges(3, [(0, 1)]).unwrap();
        let l = normalized_laplacian(&g).to_dense();
        assert_eq!(l.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(l.get(0, 2), 0.0);
        assert!(l.is_finite());
    }

    #[test]
    fn laplacian_kernel_is_sqrt_degree() {
        let g = gen_grid8(5).unwrap();
        let l = normalized_laplacian(&g);
        let v = Matrix::column(
            &g.degrees()
                .iter()
                .map(|&d| (d as f64).sqrt())
                .collect::<Vec<_>>(),
        );
        let out = l.apply(&v).unwrap();
        assert!(out.as_slice().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn tunable_special_cases() {
        let g = gen_erdos_renyi(12, 0.4, 2).unwrap();
        let id = tunable_diffusion(&g, 1.0).unwrap();
        assert_eq!(id.to_dense(), Matrix::identity(12));

        let phi = tunable_diffusion(&k2(), 0.0).unwrap().to_dense();
        assert_eq!(phi.as_slice(), &[0.0, 1.0, 1.0, 0.0]);

        assert!(tunable_diffusion(&g, 1.1).is_err());
        assert!(tunable_diffusion(&g, -0.1).is_err());
        let isolated = Graph::from_edges(3, [(0, 1)]).unwrap();
        assert!(matches!(
            tunable_diffusion(&isolated, 0.0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(tunable_diffusion(&isolated, 0.3).is_ok());
    }

    #[test]
    fn operators_are_exactly_symmetric() {
        let g = gen_erdos_renyi(30, 0.2, 9).unwrap();
        for op in [
            normalized_laplacian(&g),
            tunable_diffusion(&g, 0.3).unwrap(),
            tunable_diffusion(&g, 0.5).unwrap(),
        ] {
            let d = op.to_dense();
            assert_eq!(d, d.transpose());
            assert!(d.is_finite());
        }
    }

    #[test]
    fn apply_rejects_mismatch() {
        let op = normalized_laplacian(&k2());
        assert!(op.apply(&Matrix::zeros(3, 1)).is_err());
        let out = op.apply(&Matrix::column(&[1.0, 0.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, -1.0]);
    }
}
