//! Brute-force oracles for the drop modes and the backward pass.
//!
//! Each check builds seeded random layers and compares the implementation
//! against an independent computation: exhaustive mask enumeration for the
//! expectation identities, central finite differences for gradients, and
//! explicit counterexamples for the Dropout pathologies. The layer forward
//! under test is injectable so a deliberately broken forward can be shown to
//! fail.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::backward;
use crate::drop::{sample_mask, DropConfig, DropMode, MaskTensor};
use crate::error::Result;
use crate::layer::KanLayer;
use crate::network::{maskable_layers, KanNetwork};
use crate::rng::{derived_rng, KanRng};
use crate::spline::{silu, EdgeActivation, EdgeGrid, GridSpec};

pub const PA_EXPECTATION_TOL: f64 = 1e-10;
pub const PS_EXPECTATION_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-5;
pub const WITNESS_MIN: f64 = 1e-3;

/// Layer forward with an explicit mask, as exercised by the expectation checks.
pub type LayerForward = dyn Fn(&KanLayer, ArrayView2<f64>, Option<&MaskTensor>) -> Result<Array2<f64>> + Sync;

pub fn reference_forward(layer: &KanLayer, input: ArrayView2<f64>, mask: Option<&MaskTensor>) -> Result<Array2<f64>> {
    layer.forward_masked(input, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Threshold the observed value is compared against.
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn at_most(name: &str, tolerance: f64, observed: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            tolerance,
            observed,
            passed: observed <= tolerance,
            detail,
        }
    }

    fn above(name: &str, tolerance: f64, observed: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            tolerance,
            observed,
            passed: observed > tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let relation = if self.name.starts_with("witness") { ">" } else { "<=" };
        format!(
            "{} {} observed={:.3e} required {} {:.1e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            relation,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("dropkan verify seed={}\n", self.seed);
        for c in &self.checks {
            let _ = writeln!(out, "{}", c.line());
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.checks.len());
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Layer with random base/spline weights and coefficients, so no term
/// vanishes by construction.
pub fn random_layer(n_in: usize, n_out: usize, rng: &mut KanRng) -> KanLayer {
    let grid = EdgeGrid::new(GridSpec::default()).expect("default grid");
    let coeff = Normal::new(0.0, 0.5).unwrap();
    let edges = (0..n_in * n_out)
        .map(|_| {
            let coeffs = (0..grid.basis_count()).map(|_| coeff.sample(rng)).collect();
            EdgeActivation::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), coeffs)
        })
        .collect();
    KanLayer::from_edges(n_in, n_out, grid, edges, DropConfig::none()).expect("consistent shapes")
}

fn random_network(arch: &[usize], rng: &mut KanRng) -> KanNetwork {
    let layers = arch.windows(2).map(|w| random_layer(w[0], w[1], rng)).collect();
    KanNetwork::from_layers(layers).expect("consistent widths")
}

fn random_input(batch: usize, n: usize, rng: &mut KanRng) -> Array2<f64> {
    Array2::from_shape_fn((batch, n), |_| rng.random_range(-1.0..1.0))
}

/// Training-time drop with `training = false` must reproduce the plain
/// forward bit for bit.
pub fn eval_identity_check(seed: u64, tuples: usize) -> Result<CheckOutcome> {
    let modes = [DropMode::Dropout, DropMode::DropkanPa, DropMode::DropkanPs];
    let mut mismatches = 0usize;
    for t in 0..tuples {
        let mut rng = derived_rng(seed, &[10, t as u64]);
        let depth = rng.random_range(1..4);
        let arch: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..6)).collect();
        let base = random_network(&arch, &mut rng);
        let mode = modes[t % modes.len()];
        let p = rng.random_range(0.0..0.95);
        let rates = vec![p; maskable_layers(mode, depth).len()];
        let dropped = base.with_drop(mode, rng.random(), &rates)?;
        let x = random_input(rng.random_range(1..9), arch[0], &mut rng);
        let plain = base.forward(x.view(), false, &mut rng)?;
        let eval = dropped.forward(x.view(), false, &mut rng)?;
        if plain.iter().zip(&eval).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(CheckOutcome::at_most(
        "eval_identity",
        0.0,
        mismatches as f64,
        format!("{tuples} random (net, input, mode, p) tuples, bitwise"),
    ))
}

/// Probability of one mask under independent keep probability `1 - p`.
fn mask_probability(bits: u32, n: usize, p: f64) -> f64 {
    (0..n).fold(1.0, |acc, i| if bits >> i & 1 == 1 { acc * (1.0 - p) } else { acc * p })
}

/// Exact expectation of the scaled DropKAN^pa node sum over all `2^n_in`
/// masks of one node, against the unmasked sum.
pub fn pa_expectation_check(seed: u64, n_range: std::ops::RangeInclusive<usize>, forward: &LayerForward) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in n_range.clone() {
        for (k, p) in [0.5, 0.3].into_iter().enumerate() {
            let mut rng = derived_rng(seed, &[20, n as u64, k as u64]);
            let mut layer = random_layer(n, 2, &mut rng);
            layer.set_drop(DropConfig::new(DropMode::DropkanPa, p, true)?);
            let x = random_input(1, n, &mut rng);
            let plain = forward(&layer, x.view(), None)?[[0, 0]];
            let mut expectation = 0.0;
            let mut mask = MaskTensor::ones(1, 2, n);
            for bits in 0..1u32 << n {
                for i in 0..n {
                    mask.set(0, 0, i, bits >> i & 1 == 1);
                }
                expectation += mask_probability(bits, n, p) * forward(&layer, x.view(), Some(&mask))?[[0, 0]];
            }
            worst = worst.max((expectation - plain).abs() / plain.abs().max(1.0));
            cases += 1;
        }
    }
    Ok(CheckOutcome::at_most(
        "pa_expectation",
        PA_EXPECTATION_TOL,
        worst,
        format!(
            "n_in {}..={}, {cases} layers, full mask enumeration",
            n_range.start(),
            n_range.end()
        ),
    ))
}

/// Two-point expectation of one DropKAN^ps edge: unscaled gives
/// `w_b b(x) + (1 - p) w_s spline(x)`, scaled gives `phi(x)`.
pub fn ps_expectation_check(seed: u64, edges: usize, forward: &LayerForward) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let kept = MaskTensor::ones(1, 1, 1);
    let dropped = MaskTensor::from_vec(1, 1, 1, vec![0])?;
    for e in 0..edges {
        let mut rng = derived_rng(seed, &[30, e as u64]);
        let mut layer = random_layer(1, 1, &mut rng);
        let p = rng.random_range(0.05..0.9);
        let x = random_input(1, 1, &mut rng) * 1.2;
        let edge = layer.edge(0, 0).clone();
        let xv = x[[0, 0]];
        let spline_term = edge.w_s * edge.spline(layer.grid(), xv);
        let base_term = edge.w_b * silu(xv);
        for (scale, want) in [(false, base_term + (1.0 - p) * spline_term), (true, base_term + spline_term)] {
            layer.set_drop(DropConfig::new(DropMode::DropkanPs, p, scale)?);
            let on = forward(&layer, x.view(), Some(&kept))?[[0, 0]];
            let off = forward(&layer, x.view(), Some(&dropped))?[[0, 0]];
            let expectation = (1.0 - p) * on + p * off;
            worst = worst.max((expectation - want).abs());
        }
    }
    Ok(CheckOutcome::at_most(
        "ps_expectation",
        PS_EXPECTATION_TOL,
        worst,
        format!("{edges} edges, scaled and unscaled"),
    ))
}

fn frozen_masks(net: &KanNetwork, batch: usize, rng: &mut KanRng) -> Result<Vec<Option<MaskTensor>>> {
    net.layers()
        .iter()
        .map(|l| {
            let c = l.drop_config();
            if c.mode() == DropMode::None {
                Ok(None)
            } else {
                sample_mask(c.mode(), c.rate(), batch, l.n_out(), l.n_in(), rng).map(Some)
            }
        })
        .collect()
}

/// Largest relative disagreement between analytic gradients and central
/// differences for the objective `sum(w * net(x))` under frozen masks.
pub fn max_gradient_error(
    net: &KanNetwork,
    x: &Array2<f64>,
    masks: &[Option<MaskTensor>],
    weights: &Array2<f64>,
) -> Result<f64> {
    let objective = |net: &KanNetwork, x: &Array2<f64>| -> Result<f64> {
        let (out, _) = net.forward_with_masks(x.view(), masks)?;
        Ok((&out * weights).sum())
    };
    let rel = |fd: f64, a: f64| (fd - a).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
    let (_, cache) = net.forward_with_masks(x.view(), masks)?;
    let grads = backward(net, &cache, weights.view())?;
    let analytic = grads.flatten();
    let params = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut p = params.clone();
        p[k] += GRAD_STEP;
        probe.set_params(&p)?;
        let up = objective(&probe, x)?;
        p[k] -= 2.0 * GRAD_STEP;
        probe.set_params(&p)?;
        let down = objective(&probe, x)?;
        worst = worst.max(rel((up - down) / (2.0 * GRAD_STEP), a));
    }
    for ((b, i), &a) in grads.d_input.indexed_iter() {
        let mut xp = x.clone();
        xp[[b, i]] += GRAD_STEP;
        let up = objective(net, &xp)?;
        xp[[b, i]] -= 2.0 * GRAD_STEP;
        let down = objective(net, &xp)?;
        worst = worst.max(rel((up - down) / (2.0 * GRAD_STEP), a));
    }
    Ok(worst)
}

/// Finite-difference check on `nets` seeded `[4, 3, 2]` networks per drop
/// configuration, masks frozen.
pub fn gradient_check(seed: u64, nets: usize) -> Result<Vec<CheckOutcome>> {
    let configs = [
        (DropMode::None, false),
        (DropMode::Dropout, true),
        (DropMode::Dropout, false),
        (DropMode::DropkanPa, true),
        (DropMode::DropkanPa, false),
        (DropMode::DropkanPs, true),
        (DropMode::DropkanPs, false),
    ];
    let mut outcomes = Vec::new();
    for (c, &(mode, scale)) in configs.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..nets {
            let mut rng = derived_rng(seed, &[40, c as u64, k as u64]);
            let base = random_network(&[4, 3, 2], &mut rng);
            let rates = vec![0.4; maskable_layers(mode, 2).len()];
            let net = base.with_drop(mode, scale, &rates)?;
            let x = random_input(5, 4, &mut rng);
            let masks = frozen_masks(&net, 5, &mut rng)?;
            let weights = random_input(5, 2, &mut rng);
            worst = worst.max(max_gradient_error(&net, &x, &masks, &weights)?);
        }
        let name = format!("gradient_{}_{}", mode, if scale { "scaled" } else { "unscaled" });
        outcomes.push(CheckOutcome::at_most(
            &name,
            GRAD_TOL,
            worst,
            format!("{nets} [4,3,2] nets, h={GRAD_STEP:e}, relative"),
        ));
    }
    Ok(outcomes)
}

/// Zeroing a hidden node (Dropout) is not the same as removing it: its
/// outgoing edges still emit `phi(0) = w_s spline(0)`.
pub fn excision_witness(seed: u64) -> Result<CheckOutcome> {
    let mut rng = derived_rng(seed, &[50]);
    let base = random_network(&[3, 4, 1], &mut rng);
    let x = random_input(1, 3, &mut rng);

    let dropout = base.with_drop(DropMode::Dropout, false, &[0.5])?;
    let mut node_mask = MaskTensor::ones(1, 4, 1);
    node_mask.set(0, 0, 0, false);
    let (zeroed, _) = dropout.forward_with_masks(x.view(), &[Some(node_mask), None])?;

    let excise = base.with_drop(DropMode::DropkanPa, false, &[0.5, 0.5])?;
    let mut edge_mask = MaskTensor::ones(1, 1, 4);
    edge_mask.set(0, 0, 0, false);
    let (excised, _) = excise.forward_with_masks(x.view(), &[None, Some(edge_mask)])?;

    Ok(CheckOutcome::above(
        "witness_dropout_does_not_excise",
        WITNESS_MIN,
        (zeroed[[0, 0]] - excised[[0, 0]]).abs(),
        "[3,4,1] net, hidden node 0 zeroed vs its edges removed".into(),
    ))
}

/// Rescaling a node's value does not rescale a downstream activation.
pub fn homogeneity_witness(seed: u64) -> Result<CheckOutcome> {
    let mut rng = derived_rng(seed, &[51]);
    let layer = random_layer(1, 1, &mut rng);
    let x = 0.4;
    let phi = |v: f64| layer.edge(0, 0).eval(layer.grid(), v);
    Ok(CheckOutcome::above(
        "witness_phi_not_homogeneous",
        WITNESS_MIN,
        (phi(2.0 * x) - 2.0 * phi(x)).abs(),
        format!("|phi(2x) - 2 phi(x)| at x={x}"),
    ))
}

/// Under Dropout a dropped node's incoming edges get zero gradient but its
/// outgoing edges keep learning; under DropKAN^pa masked edges get exactly
/// zero. Observed is the smallest outgoing `|d_coeffs|` norm; the check also
/// fails if any gradient that must vanish does not.
pub fn gradient_flow_witness(seed: u64) -> Result<CheckOutcome> {
    let mut rng = derived_rng(seed, &[52]);
    let base = random_network(&[3, 4, 2], &mut rng);
    let x = random_input(6, 3, &mut rng);
    let weights = random_input(6, 2, &mut rng);

    let dropout = base.with_drop(DropMode::Dropout, true, &[0.5])?;
    let mut node_mask = MaskTensor::ones(6, 4, 1);
    for b in 0..6 {
        node_mask.set(b, 1, 0, false);
    }
    let (_, cache) = dropout.forward_with_masks(x.view(), &[Some(node_mask), None])?;
    let g = backward(&dropout, &cache, weights.view())?;
    let mut leaked = 0.0f64;
    for i in 0..3 {
        let e = &g.layers[0].edges[3 + i];
        leaked = e.d_coeffs.iter().fold(leaked.max(e.d_wb.abs()).max(e.d_ws.abs()), |m, c| m.max(c.abs()));
    }
    let outgoing = (0..2)
        .map(|j| g.layers[1].edges[j * 4 + 1].d_coeffs.iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);

    let pa = base.with_drop(DropMode::DropkanPa, true, &[0.5, 0.5])?;
    let masks = frozen_masks(&pa, 1, &mut rng)?;
    let full: Vec<Option<MaskTensor>> = masks
        .iter()
        .map(|m| {
            m.as_ref().map(|m| {
                let (_, rows, cols) = m.shape();
                let values = (0..6).flat_map(|_| m.values().iter().copied()).collect();
                MaskTensor::from_vec(6, rows, cols, values).expect("tiled shape")
            })
        })
        .collect();
    let (_, cache) = pa.forward_with_masks(x.view(), &full)?;
    let g = backward(&pa, &cache, weights.view())?;
    for (l, m) in masks.iter().enumerate() {
        let m = m.as_ref().expect("every layer masked");
        let (_, rows, cols) = m.shape();
        for j in 0..rows {
            for i in 0..cols {
                if m.get(0, j, i) == 0 {
                    let e = &g.layers[l].edges[j * cols + i];
                    leaked = e.d_coeffs.iter().fold(leaked.max(e.d_wb.abs()).max(e.d_ws.abs()), |a, c| a.max(c.abs()));
                }
            }
        }
    }
    let mut outcome = CheckOutcome::above(
        "witness_dropout_gradient_flow",
        WITNESS_MIN,
        outgoing,
        format!("masked-edge gradient max {leaked:.1e}, must be 0"),
    );
    outcome.passed &= leaked == 0.0;
    Ok(outcome)
}

/// Exact expectation of scaled Dropout over every hidden-node mask drifts
/// away from the no-drop output, because the next layer is nonlinear.
pub fn scaling_drift_witness(seed: u64) -> Result<CheckOutcome> {
    let mut rng = derived_rng(seed, &[53]);
    let base = random_network(&[3, 4, 1], &mut rng);
    let x = random_input(1, 3, &mut rng);
    let p = 0.5;
    let plain = base.forward(x.view(), false, &mut rng)?[[0, 0]];
    let dropout = base.with_drop(DropMode::Dropout, true, &[p])?;
    let mut expectation = 0.0;
    for bits in 0..1u32 << 4 {
        let values = (0..4).map(|j| (bits >> j & 1) as u8).collect();
        let mask = MaskTensor::from_vec(1, 4, 1, values)?;
        let (out, _) = dropout.forward_with_masks(x.view(), &[Some(mask), None])?;
        expectation += mask_probability(bits, 4, p) * out[[0, 0]];
    }
    Ok(CheckOutcome::above(
        "witness_dropout_scaling_drift",
        WITNESS_MIN,
        (expectation - plain).abs(),
        format!("[3,4,1] net, p={p}, exact expectation over 16 masks"),
    ))
}

/// The full oracle suite.
pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    let mut checks = vec![
        eval_identity_check(seed, 100)?,
        pa_expectation_check(seed, 3..=12, &reference_forward)?,
        ps_expectation_check(seed, 200, &reference_forward)?,
    ];
    checks.extend(gradient_check(seed, 20)?);
    checks.push(excision_witness(seed)?);
    checks.push(homogeneity_witness(seed)?);
    checks.push(gradient_flow_witness(seed)?);
    checks.push(scaling_drift_witness(seed)?);
    Ok(VerifyReport { seed, checks })
}
