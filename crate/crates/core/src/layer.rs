//! A single KAN layer: a dense `n_out x n_in` matrix of edge activations
//! whose outputs are summed at each node, plus the layer's drop regime.
//!
//! At evaluation time (or with mode `none`) node `j` outputs
//! `sum_i phi_{j,i}(x_i)`. In training mode:
//!
//! - `dropkan_pa`: `s * sum_i M_{j,i} phi_{j,i}(x_i)`
//! - `dropkan_ps`: `sum_i [w_b silu(x_i) + s M_{j,i} w_s spline_{j,i}(x_i)]`
//! - `dropout`:    `s * m_j * sum_i phi_{j,i}(x_i)`
//!
//! with `s = 1 / (1 - p)` when scaling is enabled and 1 otherwise.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drop::{sample_mask, DropConfig, DropMode, MaskTensor};
use crate::error::{KanError, Result};
use crate::spline::{silu, EdgeActivation, EdgeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer")]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    grid: EdgeGrid,
    drop: DropConfig,
    /// Row-major over `(j, i)`.
    edges: Vec<EdgeActivation>,
}

#[derive(Deserialize)]
struct RawLayer {
    n_in: usize,
    n_out: usize,
    grid: EdgeGrid,
    drop: DropConfig,
    edges: Vec<EdgeActivation>,
}

impl TryFrom<RawLayer> for KanLayer {
    type Error = KanError;

    fn try_from(raw: RawLayer) -> Result<Self> {
        KanLayer::from_edges(raw.n_in, raw.n_out, raw.grid, raw.edges, raw.drop)
    }
}

/// What a training-mode forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    /// `None` for an unmasked pass.
    pub mask: Option<MaskTensor>,
}

impl KanLayer {
    /// Randomly initialized layer: `w_b = w_s = 1`, coefficients `N(0, sigma^2)`.
    pub fn new<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        grid: EdgeGrid,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(KanError::InvalidConfig("layer dimensions must be positive".into()));
        }
        let edges = (0..n_in * n_out)
            .map(|_| EdgeActivation::random(&grid, sigma, rng))
            .collect();
        Ok(Self {
            n_in,
            n_out,
            grid,
            drop: DropConfig::none(),
            edges,
        })
    }

    pub fn from_edges(
        n_in: usize,
        n_out: usize,
        grid: EdgeGrid,
        edges: Vec<EdgeActivation>,
        drop: DropConfig,
    ) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(KanError::InvalidConfig("layer dimensions must be positive".into()));
        }
        if edges.len() != n_in * n_out {
            return Err(KanError::DimensionMismatch(format!(
                "{} edges for a {n_out}x{n_in} layer",
                edges.len()
            )));
        }
        for edge in &edges {
            edge.validate(&grid)?;
        }
        Ok(Self {
            n_in,
            n_out,
            grid,
            drop,
            edges,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn grid(&self) -> &EdgeGrid {
        &self.grid
    }

    pub fn drop_config(&self) -> DropConfig {
        self.drop
    }

    pub fn set_drop(&mut self, drop: DropConfig) {
        self.drop = drop;
    }

    pub fn edges(&self) -> &[EdgeActivation] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [EdgeActivation] {
        &mut self.edges
    }

    /// Edge from input `i` to node `j`.
    pub fn edge(&self, j: usize, i: usize) -> &EdgeActivation {
        &self.edges[j * self.n_in + i]
    }

    pub fn edge_mut(&mut self, j: usize, i: usize) -> &mut EdgeActivation {
        &mut self.edges[j * self.n_in + i]
    }

    pub(crate) fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.n_in {
            return Err(KanError::DimensionMismatch(format!(
                "input has {} columns, layer expects {}",
                input.ncols(),
                self.n_in
            )));
        }
        if let Some(((row, col), _)) = input.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(KanError::NonFiniteInput { row, col });
        }
        Ok(())
    }

    /// Sample this layer's mask for a batch, or `None` when no masking applies.
    pub fn sample_mask<R: Rng + ?Sized>(&self, batch: usize, training: bool, rng: &mut R) -> Result<Option<MaskTensor>> {
        if !training || self.drop.mode() == DropMode::None {
            return Ok(None);
        }
        sample_mask(self.drop.mode(), self.drop.rate(), batch, self.n_out, self.n_in, rng).map(Some)
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: ArrayView2<f64>, training: bool, rng: &mut R) -> Result<Array2<f64>> {
        let mask = self.sample_mask(input.nrows(), training, rng)?;
        self.forward_masked(input, mask.as_ref())
    }

    /// Forward pass with an explicit mask. `None` gives the plain node sum
    /// regardless of the configured drop mode.
    pub fn forward_masked(&self, input: ArrayView2<f64>, mask: Option<&MaskTensor>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        if let Some(m) = mask {
            self.check_mask(input.nrows(), m)?;
        }
        let batch = input.nrows();
        let nb = self.grid.basis_count();
        let mut out = Array2::zeros((batch, self.n_out));
        let mut basis = vec![0.0; self.n_in * nb];
        let mut base = vec![0.0; self.n_in];
        let s = self.drop.scale_factor();
        let mode = mask.map(|_| self.drop.mode()).unwrap_or(DropMode::None);

        for b in 0..batch {
            for i in 0..self.n_in {
                let x = input[[b, i]];
                base[i] = silu(x);
                self.grid.basis_into(x, &mut basis[i * nb..(i + 1) * nb]);
            }
            for j in 0..self.n_out {
                let row = &self.edges[j * self.n_in..(j + 1) * self.n_in];
                let mut sum = 0.0;
                match (mode, mask) {
                    (DropMode::DropkanPa, Some(m)) => {
                        for (i, e) in row.iter().enumerate() {
                            let post = e.w_b * base[i] + e.w_s * e.spline_from_basis(&basis[i * nb..(i + 1) * nb]);
                            sum += m.get(b, j, i) as f64 * post;
                        }
                        sum *= s;
                    }
                    (DropMode::DropkanPs, Some(m)) => {
                        for (i, e) in row.iter().enumerate() {
                            let keep = m.get(b, j, i) as f64 * s;
                            sum += e.w_b * base[i] + keep * e.w_s * e.spline_from_basis(&basis[i * nb..(i + 1) * nb]);
                        }
                    }
                    (DropMode::Dropout, Some(m)) => {
                        for (i, e) in row.iter().enumerate() {
                            sum += e.w_b * base[i] + e.w_s * e.spline_from_basis(&basis[i * nb..(i + 1) * nb]);
                        }
                        sum *= m.get(b, j, 0) as f64 * s;
                    }
                    _ => {
                        for (i, e) in row.iter().enumerate() {
                            sum += e.w_b * base[i] + e.w_s * e.spline_from_basis(&basis[i * nb..(i + 1) * nb]);
                        }
                    }
                }
                out[[b, j]] = sum;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_mask(&self, batch: usize, mask: &MaskTensor) -> Result<()> {
        let expected = match self.drop.mode() {
            DropMode::None => return Ok(()),
            DropMode::Dropout => (batch, self.n_out, 1),
            DropMode::DropkanPa | DropMode::DropkanPs => (batch, self.n_out, self.n_in),
        };
        if mask.shape() != expected {
            return Err(KanError::DimensionMismatch(format!(
                "mask shape {:?} does not match {:?} for mode {}",
                mask.shape(),
                expected,
                self.drop.mode()
            )));
        }
        Ok(())
    }
}

/// Free-function form of `KanLayer::forward`.
pub fn layer_forward<R: Rng + ?Sized>(
    layer: &KanLayer,
    input: ArrayView2<f64>,
    training: bool,
    rng: &mut R,
) -> Result<Array2<f64>> {
    layer.forward(input, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::spline::{activation_eval, GridSpec};
    use ndarray::{array, Array2};

    fn grid() -> EdgeGrid {
        EdgeGrid::new(GridSpec::default()).unwrap()
    }

    fn random_layer(n_in: usize, n_out: usize, seed: u64) -> KanLayer {
        KanLayer::new(n_in, n_out, grid(), 0.1, &mut seeded_rng(seed)).unwrap()
    }

    fn random_input(batch: usize, n_in: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_fn((batch, n_in), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn eval_mode_is_identity_for_every_mode() {
        let mut layer = random_layer(4, 3, 1);
        let x = random_input(5, 4, 2);
        let plain = layer.forward(x.view(), false, &mut seeded_rng(0)).unwrap();
        for mode in [DropMode::Dropout, DropMode::DropkanPa, DropMode::DropkanPs] {
            layer.set_drop(DropConfig::new(mode, 0.9, true).unwrap());
            let out = layer.forward(x.view(), false, &mut seeded_rng(0)).unwrap();
            assert_eq!(out, plain);
        }
    }

    #[test]
    fn matches_edge_loop() {
        let layer = random_layer(3, 2, 5);
        let x = random_input(4, 3, 6);
        let out = layer.forward_masked(x.view(), None).unwrap();
        for b in 0..4 {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|i| activation_eval(layer.edge(j, i), layer.grid(), x[[b, i]])).sum();
                assert!((out[[b, j]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pa_expectation_over_all_masks() {
        // post-activations fixed at 1, 2, 3 through silu-free constant splines
        let g = grid();
        let edges = [1.0, 2.0, 3.0]
            .iter()
            .map(|&c| EdgeActivation::new(0.0, 1.0, vec![c; g.basis_count()]))
            .collect();
        let drop = DropConfig::new(DropMode::DropkanPa, 0.5, true).unwrap();
        let layer = KanLayer::from_edges(3, 1, g, edges, drop).unwrap();
        let x = array![[0.1, -0.4, 0.7]];
        let mut total = 0.0;
        for bits in 0..8u8 {
            let m = MaskTensor::from_vec(1, 1, 3, (0..3).map(|i| (bits >> i) & 1).collect()).unwrap();
            total += layer.forward_masked(x.view(), Some(&m)).unwrap()[[0, 0]];
        }
        assert!((total / 8.0 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_keeps_and_doubles() {
        let mut layer = random_layer(3, 2, 8);
        let x = random_input(1, 3, 9);
        let plain = layer.forward_masked(x.view(), None).unwrap();
        layer.set_drop(DropConfig::new(DropMode::Dropout, 0.5, true).unwrap());
        let m = MaskTensor::from_vec(1, 2, 1, vec![1, 0]).unwrap();
        let out = layer.forward_masked(x.view(), Some(&m)).unwrap();
        assert_eq!(out[[0, 0]], 2.0 * plain[[0, 0]]);
        assert_eq!(out[[0, 1]], 0.0);
    }

    #[test]
    fn ps_masks_only_the_spline_term() {
        let mut layer = random_layer(1, 1, 4);
        layer.set_drop(DropConfig::new(DropMode::DropkanPs, 0.3, false).unwrap());
        let x = array![[0.45]];
        let m0 = MaskTensor::from_vec(1, 1, 1, vec![0]).unwrap();
        let out = layer.forward_masked(x.view(), Some(&m0)).unwrap();
        assert_eq!(out[[0, 0]], layer.edge(0, 0).w_b * silu(0.45));
    }

    #[test]
    fn rejects_bad_inputs() {
        let layer = random_layer(3, 2, 1);
        let wrong = random_input(2, 4, 1);
        assert!(matches!(layer.forward_masked(wrong.view(), None), Err(KanError::DimensionMismatch(_))));
        let mut bad = random_input(2, 3, 1);
        bad[[1, 2]] = f64::NAN;
        assert!(matches!(
            layer.forward_masked(bad.view(), None),
            Err(KanError::NonFiniteInput { row: 1, col: 2 })
        ));
    }

    #[test]
    fn training_masks_follow_the_seed() {
        let mut layer = random_layer(3, 2, 1);
        layer.set_drop(DropConfig::new(DropMode::DropkanPa, 0.5, true).unwrap());
        let x = random_input(6, 3, 3);
        let a = layer.forward(x.view(), true, &mut seeded_rng(77)).unwrap();
        let b = layer.forward(x.view(), true, &mut seeded_rng(77)).unwrap();
        assert_eq!(a, b);
    }
}
