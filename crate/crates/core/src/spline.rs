//! B-spline bases, the SiLU base function, and single-edge activations.
//!
//! An edge activation is `phi(x) = w_b * silu(x) + w_s * spline(x)` where
//! `spline(x) = sum_k c_k B_k(x)` over a uniform knot grid. The grid places
//! `G` intervals on `[range_lo, range_hi]` and extends the knot vector by
//! `degree` uniformly spaced knots on each side, giving `G + degree` basis
//! functions that form a partition of unity on the range. Outside the knot
//! span every basis function is zero, so the activation falls back to its
//! SiLU term.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Parameters that fully determine an [`EdgeGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub degree: usize,
    pub intervals: usize,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            degree: 3,
            intervals: 5,
            range_lo: -1.0,
            range_hi: 1.0,
        }
    }
}

/// Knot vector and degree shared by all edges of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridSpec", try_from = "GridSpec")]
pub struct EdgeGrid {
    spec: GridSpec,
    knots: Vec<f64>,
}

impl From<EdgeGrid> for GridSpec {
    fn from(grid: EdgeGrid) -> Self {
        grid.spec
    }
}

impl TryFrom<GridSpec> for EdgeGrid {
    type Error = KanError;

    fn try_from(spec: GridSpec) -> Result<Self> {
        EdgeGrid::new(spec)
    }
}

impl EdgeGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        if spec.intervals == 0 {
            return Err(KanError::InvalidGrid("need at least one interval".into()));
        }
        if !(spec.range_lo.is_finite() && spec.range_hi.is_finite()) {
            return Err(KanError::InvalidGrid("range must be finite".into()));
        }
        if spec.range_lo >= spec.range_hi {
            return Err(KanError::InvalidGrid(format!(
                "range_lo ({}) must be below range_hi ({})",
                spec.range_lo, spec.range_hi
            )));
        }
        let k = spec.degree as i64;
        let g = spec.intervals as i64;
        let h = (spec.range_hi - spec.range_lo) / spec.intervals as f64;
        let knots = (-k..=g + k)
            .map(|m| match m {
                0 => spec.range_lo,
                m if m == g => spec.range_hi,
                m => spec.range_lo + m as f64 * h,
            })
            .collect();
        Ok(Self { spec, knots })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn degree(&self) -> usize {
        self.spec.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + degree`.
    pub fn basis_count(&self) -> usize {
        self.spec.intervals + self.spec.degree
    }

    /// Index of the degree-0 interval containing `x`, if any.
    ///
    /// Intervals are half-open, except that `range_hi` is assigned to the
    /// last interior interval so the partition of unity holds on the closed
    /// range for every degree.
    fn interval(&self, x: f64) -> Option<usize> {
        let t = &self.knots;
        if x == self.spec.range_hi {
            return Some(self.spec.degree + self.spec.intervals - 1);
        }
        if !(x >= t[0] && x < t[t.len() - 1]) {
            return None;
        }
        // uniform grid: direct index, then nudge for rounding at knot boundaries
        let h = (self.spec.range_hi - self.spec.range_lo) / self.spec.intervals as f64;
        let mut j = (((x - t[0]) / h).floor() as usize).min(t.len() - 2);
        while j > 0 && x < t[j] {
            j -= 1;
        }
        while j + 2 < t.len() && x >= t[j + 1] {
            j += 1;
        }
        Some(j)
    }

    /// Fill `table[j]` with the degree-`d` basis values for every `d` up to
    /// `top`, in place. Returns false when `x` lies outside the knot span.
    fn raise(&self, x: f64, top: usize, table: &mut [f64], mut on_degree: impl FnMut(usize, &[f64])) -> bool {
        let t = &self.knots;
        table.fill(0.0);
        let Some(j0) = self.interval(x) else {
            return false;
        };
        table[j0] = 1.0;
        on_degree(0, table);
        let n0 = t.len() - 1;
        for d in 1..=top {
            for j in 0..n0 - d {
                let left_den = t[j + d] - t[j];
                let right_den = t[j + d + 1] - t[j + 1];
                let left = if left_den > 0.0 {
                    (x - t[j]) / left_den * table[j]
                } else {
                    0.0
                };
                let right = if right_den > 0.0 {
                    (t[j + d + 1] - x) / right_den * table[j + 1]
                } else {
                    0.0
                };
                table[j] = left + right;
            }
            table[n0 - d] = 0.0;
            on_degree(d, table);
        }
        true
    }

    /// All basis values at `x` (length `G + degree`).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        self.basis_into(x, &mut out);
        out
    }

    pub fn basis_into(&self, x: f64, out: &mut [f64]) {
        let mut table = vec![0.0; self.knots.len() - 1];
        let n = self.basis_count();
        if self.raise(x, self.spec.degree, &mut table, |_, _| {}) {
            out.copy_from_slice(&table[..n]);
        } else {
            out.fill(0.0);
        }
    }

    /// Derivatives of all basis functions at `x`.
    pub fn basis_deriv(&self, x: f64) -> Vec<f64> {
        let n = self.basis_count();
        let mut values = vec![0.0; n];
        let mut derivs = vec![0.0; n];
        self.basis_and_deriv_into(x, &mut values, &mut derivs);
        derivs
    }

    /// Values and derivatives in one pass. The derivative uses the
    /// degree-reduction identity
    /// `B'_{j,k} = k/(t_{j+k}-t_j) B_{j,k-1} - k/(t_{j+k+1}-t_{j+1}) B_{j+1,k-1}`.
    pub fn basis_and_deriv_into(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) {
        let k = self.spec.degree;
        let t = &self.knots;
        let n = self.basis_count();
        let mut table = vec![0.0; t.len() - 1];
        derivs.fill(0.0);
        let inside = self.raise(x, k, &mut table, |d, lower| {
            if k > 0 && d == k - 1 {
                let kf = k as f64;
                for j in 0..n {
                    let a = t[j + k] - t[j];
                    let b = t[j + k + 1] - t[j + 1];
                    let left = if a > 0.0 { kf / a * lower[j] } else { 0.0 };
                    let right = if b > 0.0 { kf / b * lower[j + 1] } else { 0.0 };
                    derivs[j] = left - right;
                }
            }
        });
        if inside {
            values.copy_from_slice(&table[..n]);
        } else {
            values.fill(0.0);
            derivs.fill(0.0);
        }
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// One trainable edge function `phi(x) = w_b * silu(x) + w_s * spline(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeActivation {
    pub w_b: f64,
    pub w_s: f64,
    pub coeffs: Vec<f64>,
}

impl EdgeActivation {
    pub fn new(w_b: f64, w_s: f64, coeffs: Vec<f64>) -> Self {
        Self { w_b, w_s, coeffs }
    }

    /// `w_b = w_s = 1`, coefficients i.i.d. `N(0, sigma^2)`.
    pub fn random<R: Rng + ?Sized>(grid: &EdgeGrid, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let coeffs = (0..grid.basis_count()).map(|_| normal.sample(rng)).collect();
        Self::new(1.0, 1.0, coeffs)
    }

    pub fn validate(&self, grid: &EdgeGrid) -> Result<()> {
        if self.coeffs.len() != grid.basis_count() {
            return Err(KanError::DimensionMismatch(format!(
                "edge has {} coefficients, grid has {} basis functions",
                self.coeffs.len(),
                grid.basis_count()
            )));
        }
        if !(self.w_b.is_finite() && self.w_s.is_finite() && self.coeffs.iter().all(|c| c.is_finite())) {
            return Err(KanError::InvalidConfig("edge parameters must be finite".into()));
        }
        Ok(())
    }

    /// `sum_k c_k B_k(x)` given precomputed basis values.
    #[inline]
    pub fn spline_from_basis(&self, basis: &[f64]) -> f64 {
        self.coeffs.iter().zip(basis).map(|(c, b)| c * b).sum()
    }

    pub fn spline(&self, grid: &EdgeGrid, x: f64) -> f64 {
        self.spline_from_basis(&grid.basis(x))
    }

    pub fn eval(&self, grid: &EdgeGrid, x: f64) -> f64 {
        self.w_b * silu(x) + self.w_s * self.spline(grid, x)
    }
}

/// `w_b * silu(x) + w_s * (coeffs . basis(x))`.
pub fn activation_eval(edge: &EdgeActivation, grid: &EdgeGrid, x: f64) -> f64 {
    edge.eval(grid, x)
}
