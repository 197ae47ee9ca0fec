//! Relative position encoding over head/tail indices.
//!
//! Four signed distance matrices are built from token heads and tails, each
//! distance is mapped through a sinusoidal basis, and the four encodings are
//! fused by a learned projection followed by ReLU.

use ndarray::{s, Array1, Array2, Array3};
use thiserror::Error;

use crate::lattice::FlatLattice;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RelPosError {
    #[error("sinusoidal dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("fusion weights are {rows}x{cols}, expected {d_model}x{}", 4 * d_model)]
    Shape {
        rows: usize,
        cols: usize,
        d_model: usize,
    },
}

/// `hh[i][j] = head[i] - head[j]`, `ht[i][j] = head[i] - tail[j]`, and so on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeDistances {
    pub hh: Array2<i64>,
    pub ht: Array2<i64>,
    pub th: Array2<i64>,
    pub tt: Array2<i64>,
}

impl RelativeDistances {
    pub fn from_positions(heads: &[usize], tails: &[usize]) -> Self {
        let n = heads.len();
        let m = |a: &[usize], b: &[usize]| {
            Array2::from_shape_fn((n, n), |(i, j)| a[i] as i64 - b[j] as i64)
        };
        RelativeDistances {
            hh: m(heads, heads),
            ht: m(heads, tails),
            th: m(tails, heads),
            tt: m(tails, tails),
        }
    }

    pub fn len(&self) -> usize {
        self.hh.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.hh.is_empty()
    }

    /// Matrices in fusion order: hh, th, ht, tt.
    pub fn in_fusion_order(&self) -> [&Array2<i64>; 4] {
        [&self.hh, &self.th, &self.ht, &self.tt]
    }

    pub fn max_abs(&self) -> i64 {
        self.in_fusion_order()
            .iter()
            .flat_map(|m| m.iter())
            .map(|d| d.abs())
            .max()
            .unwrap_or(0)
    }
}

pub fn relative_distances(lattice: &FlatLattice) -> RelativeDistances {
    RelativeDistances::from_positions(&lattice.heads(), &lattice.tails())
}

/// Even components are `sin(d / 10000^(2k/d_model))`, odd ones the cosine.
/// Negative distances are substituted directly.
pub fn sinusoidal(d: i64, d_model: usize) -> Result<Array1<f64>, RelPosError> {
    Ok(SinusoidalBasis::new(d_model)?.eval(d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SinusoidalBasis {
    d_model: usize,
}

impl SinusoidalBasis {
    pub fn new(d_model: usize) -> Result<Self, RelPosError> {
        if d_model % 2 != 0 {
            return Err(RelPosError::OddDimension(d_model));
        }
        Ok(SinusoidalBasis { d_model })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn eval(&self, d: i64) -> Array1<f64> {
        let mut p = Array1::zeros(self.d_model);
        for k in 0..self.d_model / 2 {
            let angle = d as f64 / 10000f64.powf((2 * k) as f64 / self.d_model as f64);
            p[2 * k] = angle.sin();
            p[2 * k + 1] = angle.cos();
        }
        p
    }

    /// Rows for distances `-max_abs..=max_abs`; row `d + max_abs` holds `p_d`.
    pub fn table(&self, max_abs: i64) -> Array2<f64> {
        let n = (2 * max_abs + 1) as usize;
        let mut t = Array2::zeros((n, self.d_model));
        for (r, d) in (-max_abs..=max_abs).enumerate() {
            t.row_mut(r).assign(&self.eval(d));
        }
        t
    }
}

/// `w_r` is d_model x 4*d_model; column blocks multiply p(hh), p(th), p(ht),
/// p(tt) in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_r: Array2<f64>,
}

impl FusionParams {
    pub fn zeros(d_model: usize) -> Self {
        FusionParams {
            w_r: Array2::zeros((d_model, 4 * d_model)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_r.nrows()
    }

    fn check(&self, basis: &SinusoidalBasis) -> Result<(), RelPosError> {
        let (rows, cols) = self.w_r.dim();
        if rows != basis.d_model || cols != 4 * basis.d_model {
            return Err(RelPosError::Shape {
                rows,
                cols,
                d_model: basis.d_model,
            });
        }
        Ok(())
    }
}

/// Dense evaluation: `R_ij = ReLU(W_r (p_hh ⊕ p_th ⊕ p_ht ⊕ p_tt))`.
pub fn fuse(
    dist: &RelativeDistances,
    basis: &SinusoidalBasis,
    params: &FusionParams,
) -> Result<Array3<f64>, RelPosError> {
    params.check(basis)?;
    let n = dist.len();
    let d = basis.d_model;
    let mut r = Array3::zeros((n, n, d));
    let mut concat = Array1::zeros(4 * d);
    for i in 0..n {
        for j in 0..n {
            for (b, m) in dist.in_fusion_order().iter().enumerate() {
                concat
                    .slice_mut(s![b * d..(b + 1) * d])
                    .assign(&basis.eval(m[[i, j]]));
            }
            let out = params.w_r.dot(&concat);
            r.slice_mut(s![i, j, ..]).assign(&out.mapv(|v| v.max(0.0)));
        }
    }
    Ok(r)
}

/// Table-driven evaluation of [`fuse`] with its backward pass.
///
/// Each block of `W_r` only ever sees one distance, so `W_k p_d` is computed
/// once per distinct `d` and the fused encoding is a sum of four lookups.
#[derive(Debug, Clone)]
pub struct FusedEncoding {
    max_abs: i64,
    basis_table: Array2<f64>,
    /// `R`, L' x L' x d_model, post-ReLU.
    pub encoding: Array3<f64>,
    indices: [Array2<usize>; 4],
}

impl FusedEncoding {
    pub fn forward(
        dist: &RelativeDistances,
        basis: &SinusoidalBasis,
        params: &FusionParams,
    ) -> Result<Self, RelPosError> {
        params.check(basis)?;
        let d = basis.d_model;
        let n = dist.len();
        let max_abs = dist.max_abs();
        let basis_table = basis.table(max_abs);
        let indices = dist
            .in_fusion_order()
            .map(|m| m.mapv(|v| (v + max_abs) as usize));
        // projected[b] row r = W_b p_{r - max_abs}
        let projected: Vec<Array2<f64>> = (0..4)
            .map(|b| basis_table.dot(&params.w_r.slice(s![.., b * d..(b + 1) * d]).t()))
            .collect();
        let mut encoding = Array3::zeros((n, n, d));
        for i in 0..n {
            for j in 0..n {
                let mut cell = encoding.slice_mut(s![i, j, ..]);
                for b in 0..4 {
                    cell += &projected[b].row(indices[b][[i, j]]);
                }
                cell.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(FusedEncoding {
            max_abs,
            basis_table,
            encoding,
            indices,
        })
    }

    pub fn max_abs(&self) -> i64 {
        self.max_abs
    }

    /// Accumulates dL/dW_r into `grad_w_r` given dL/dR.
    pub fn backward(&self, d_encoding: &Array3<f64>, grad_w_r: &mut Array2<f64>) {
        let (n, _, d) = self.encoding.dim();
        let rows = self.basis_table.nrows();
        let mut d_projected = vec![Array2::<f64>::zeros((rows, d)); 4];
        for i in 0..n {
            for j in 0..n {
                let out = self.encoding.slice(s![i, j, ..]);
                let g = d_encoding.slice(s![i, j, ..]);
                for b in 0..4 {
                    let mut dst = d_projected[b].row_mut(self.indices[b][[i, j]]);
                    for k in 0..d {
                        if out[k] > 0.0 {
                            dst[k] += g[k];
                        }
                    }
                }
            }
        }
        for (b, dp) in d_projected.iter().enumerate() {
            let mut block = grad_w_r.slice_mut(s![.., b * d..(b + 1) * d]);
            block += &dp.t().dot(&self.basis_table);
        }
    }
}
