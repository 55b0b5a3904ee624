//! Reverse-mode gradients through a cached forward pass.
//!
//! The backward pass honours the masks recorded in the cache: a masked
//! post-activation under `dropkan_pa` passes no gradient to its edge; a
//! masked spline term under `dropkan_ps` cuts `w_s` and the coefficients but
//! leaves `w_b` live; a dropped node under `dropout` cuts every incoming edge
//! of that node, while the next layer still sees (and learns from) the zero
//! it emitted.

use ndarray::{Array2, ArrayView2};

use crate::drop::DropMode;
use crate::error::{KanError, Result};
use crate::layer::{KanLayer, LayerCache};
use crate::network::{ForwardCache, KanNetwork};
use crate::spline::{silu, silu_deriv};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrad {
    pub d_wb: f64,
    pub d_ws: f64,
    pub d_coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Row-major over `(j, i)`, like the layer's edges.
    pub edges: Vec<EdgeGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    pub d_input: Array2<f64>,
}

impl GradientSet {
    /// Same ordering as [`KanNetwork::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for e in &layer.edges {
                out.push(e.d_wb);
                out.push(e.d_ws);
                out.extend_from_slice(&e.d_coeffs);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| &l.edges)
            .all(|e| e.d_wb.is_finite() && e.d_ws.is_finite() && e.d_coeffs.iter().all(|c| c.is_finite()))
            && self.d_input.iter().all(|v| v.is_finite())
    }
}

impl KanLayer {
    /// Gradients of this layer's parameters and inputs given `dL/d(output)`.
    pub fn backward(&self, cache: &LayerCache, grad_out: ArrayView2<f64>) -> Result<(LayerGrad, Array2<f64>)> {
        let input = &cache.input;
        let batch = input.nrows();
        if input.ncols() != self.n_in() || grad_out.dim() != (batch, self.n_out()) {
            return Err(KanError::CacheMismatch(format!(
                "cache input {:?} / output grad {:?} for a {}x{} layer",
                input.dim(),
                grad_out.dim(),
                self.n_out(),
                self.n_in()
            )));
        }
        if let Some(m) = &cache.mask {
            self.check_mask(batch, m).map_err(|e| KanError::CacheMismatch(e.to_string()))?;
        }
        let n_in = self.n_in();
        let nb = self.grid().basis_count();
        let s = self.drop_config().scale_factor();
        let mode = if cache.mask.is_some() {
            self.drop_config().mode()
        } else {
            DropMode::None
        };

        let mut grads: Vec<EdgeGrad> = self
            .edges()
            .iter()
            .map(|e| EdgeGrad {
                d_wb: 0.0,
                d_ws: 0.0,
                d_coeffs: vec![0.0; e.coeffs.len()],
            })
            .collect();
        let mut d_input = Array2::zeros((batch, n_in));
        let mut basis = vec![0.0; n_in * nb];
        let mut dbasis = vec![0.0; n_in * nb];
        let mut base = vec![0.0; n_in];
        let mut dbase = vec![0.0; n_in];

        for b in 0..batch {
            for i in 0..n_in {
                let x = input[[b, i]];
                base[i] = silu(x);
                dbase[i] = silu_deriv(x);
                self.grid()
                    .basis_and_deriv_into(x, &mut basis[i * nb..(i + 1) * nb], &mut dbasis[i * nb..(i + 1) * nb]);
            }
            for j in 0..self.n_out() {
                let g = grad_out[[b, j]];
                for i in 0..n_in {
                    // dpost: gradient reaching phi_{j,i}; spline_gate multiplies the spline term
                    let (dpost, spline_gate) = match (mode, &cache.mask) {
                        (DropMode::DropkanPa, Some(m)) => (g * s * m.get(b, j, i) as f64, 1.0),
                        (DropMode::DropkanPs, Some(m)) => (g, m.get(b, j, i) as f64 * s),
                        (DropMode::Dropout, Some(m)) => (g * m.get(b, j, 0) as f64 * s, 1.0),
                        _ => (g, 1.0),
                    };
                    let e = self.edge(j, i);
                    let bvals = &basis[i * nb..(i + 1) * nb];
                    let dvals = &dbasis[i * nb..(i + 1) * nb];
                    let eg = &mut grads[j * n_in + i];
                    let spline = e.spline_from_basis(bvals);
                    eg.d_wb += dpost * base[i];
                    eg.d_ws += dpost * spline_gate * spline;
                    let coeff_scale = dpost * spline_gate * e.w_s;
                    for (dc, bv) in eg.d_coeffs.iter_mut().zip(bvals) {
                        *dc += coeff_scale * bv;
                    }
                    let dspline: f64 = e.coeffs.iter().zip(dvals).map(|(c, d)| c * d).sum();
                    d_input[[b, i]] += dpost * (e.w_b * dbase[i] + spline_gate * e.w_s * dspline);
                }
            }
        }
        Ok((LayerGrad { edges: grads }, d_input))
    }
}

/// Exact gradients of a scalar loss with respect to every parameter and the
/// network input, given `dL/d(output)` and the cache of the forward pass that
/// produced the output.
pub fn backward(net: &KanNetwork, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<GradientSet> {
    if cache.layers.len() != net.layers().len() {
        return Err(KanError::CacheMismatch(format!(
            "cache has {} layers, network has {}",
            cache.layers.len(),
            net.layers().len()
        )));
    }
    let mut grad = output_grad.to_owned();
    let mut layer_grads = Vec::with_capacity(net.layers().len());
    for (layer, lc) in net.layers().iter().zip(&cache.layers).rev() {
        let (lg, d_in) = layer.backward(lc, grad.view())?;
        layer_grads.push(lg);
        grad = d_in;
    }
    layer_grads.reverse();
    Ok(GradientSet {
        layers: layer_grads,
        d_input: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drop::{sample_mask, MaskTensor};
    use crate::rng::seeded_rng;
    use crate::spline::GridSpec;
    use rand::Rng;

    fn setup(mode: DropMode, scale: bool, seed: u64) -> (KanNetwork, Array2<f64>, Vec<Option<MaskTensor>>, Array2<f64>) {
        let mut rng = seeded_rng(seed);
        let mut net = KanNetwork::new(&[4, 3, 2], GridSpec::default(), 0.3, &mut rng).unwrap();
        let rates: Vec<f64> = crate::network::maskable_layers(mode, 2).iter().map(|_| 0.4).collect();
        net.apply_drop(mode, scale, &rates).unwrap();
        for layer in net.layers_mut() {
            for e in layer.edges_mut() {
                e.w_b = rng.random_range(-1.5..1.5);
                e.w_s = rng.random_range(-1.5..1.5);
            }
        }
        let batch = 5;
        let x = Array2::from_shape_fn((batch, 4), |_| rng.random_range(-1.0..1.0));
        let masks = net
            .layers()
            .iter()
            .map(|l| {
                let c = l.drop_config();
                (c.mode() != DropMode::None)
                    .then(|| sample_mask(c.mode(), c.rate(), batch, l.n_out(), l.n_in(), &mut rng).unwrap())
            })
            .collect();
        let weights = Array2::from_shape_fn((batch, 2), |_| rng.random_range(-1.0..1.0));
        (net, x, masks, weights)
    }

    fn objective(net: &KanNetwork, x: &Array2<f64>, masks: &[Option<MaskTensor>], w: &Array2<f64>) -> f64 {
        let (out, _) = net.forward_with_masks(x.view(), masks).unwrap();
        (&out * w).sum()
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let h = 1e-5;
        for mode in [DropMode::None, DropMode::Dropout, DropMode::DropkanPa, DropMode::DropkanPs] {
            for seed in 0..5 {
                let (net, x, masks, w) = setup(mode, seed % 2 == 0, seed);
                let (_, cache) = net.forward_with_masks(x.view(), &masks).unwrap();
                let grads = backward(&net, &cache, w.view()).unwrap();
                let analytic = grads.flatten();
                let params = net.params();
                for k in 0..params.len() {
                    let mut probe = net.clone();
                    let mut p = params.clone();
                    p[k] += h;
                    probe.set_params(&p).unwrap();
                    let up = objective(&probe, &x, &masks, &w);
                    p[k] -= 2.0 * h;
                    probe.set_params(&p).unwrap();
                    let dn = objective(&probe, &x, &masks, &w);
                    let fd = (up - dn) / (2.0 * h);
                    let denom = analytic[k].abs().max(fd.abs()).max(1e-5);
                    assert!((fd - analytic[k]).abs() / denom < 1e-4, "{mode} seed {seed} param {k}: {fd} vs {}", analytic[k]);
                }
                for b in 0..x.nrows() {
                    for i in 0..x.ncols() {
                        let mut xp = x.clone();
                        xp[[b, i]] += h;
                        let up = objective(&net, &xp, &masks, &w);
                        xp[[b, i]] -= 2.0 * h;
                        let dn = objective(&net, &xp, &masks, &w);
                        let fd = (up - dn) / (2.0 * h);
                        let a = grads.d_input[[b, i]];
                        assert!((fd - a).abs() / a.abs().max(fd.abs()).max(1e-5) < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn fully_masked_pa_edge_gets_zero_gradient() {
        let (net, x, mut masks, w) = setup(DropMode::DropkanPa, true, 3);
        let m = masks[0].as_mut().unwrap();
        for b in 0..x.nrows() {
            m.set(b, 1, 2, false);
        }
        let (_, cache) = net.forward_with_masks(x.view(), &masks).unwrap();
        let g = backward(&net, &cache, w.view()).unwrap();
        let e = &g.layers[0].edges[4 + 2];
        assert_eq!(e.d_wb, 0.0);
        assert_eq!(e.d_ws, 0.0);
        assert!(e.d_coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn ps_mask_leaves_base_weight_live() {
        let (net, x, mut masks, w) = setup(DropMode::DropkanPs, false, 4);
        let m = masks[0].as_mut().unwrap();
        for b in 0..x.nrows() {
            m.set(b, 0, 0, false);
        }
        let (_, cache) = net.forward_with_masks(x.view(), &masks).unwrap();
        let g = backward(&net, &cache, w.view()).unwrap();
        let e = &g.layers[0].edges[0];
        assert_eq!(e.d_ws, 0.0);
        assert!(e.d_coeffs.iter().all(|&c| c == 0.0));
        assert!(e.d_wb != 0.0);
    }

    #[test]
    fn dropped_node_cuts_incoming_but_not_outgoing_edges() {
        let (net, x, mut masks, w) = setup(DropMode::Dropout, true, 6);
        let m = masks[0].as_mut().unwrap();
        for b in 0..x.nrows() {
            m.set(b, 1, 0, false);
        }
        let (_, cache) = net.forward_with_masks(x.view(), &masks).unwrap();
        let g = backward(&net, &cache, w.view()).unwrap();
        for i in 0..4 {
            let e = &g.layers[0].edges[4 + i];
            assert_eq!(e.d_wb, 0.0);
            assert!(e.d_coeffs.iter().all(|&c| c == 0.0));
        }
        // outgoing edges (k, 1) of the next layer see x = 0 and still learn
        let out_edge = &g.layers[1].edges[1];
        assert!(out_edge.d_coeffs.iter().any(|&c| c != 0.0));
    }

    #[test]
    fn cache_mismatch_is_reported() {
        let (net, x, masks, w) = setup(DropMode::None, false, 1);
        let (_, mut cache) = net.forward_with_masks(x.view(), &masks).unwrap();
        cache.layers.pop();
        assert!(matches!(backward(&net, &cache, w.view()), Err(KanError::CacheMismatch(_))));
    }
}
