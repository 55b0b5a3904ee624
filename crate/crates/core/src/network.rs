//! Stacks of KAN layers, cached forward passes, and the JSON model format.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drop::{DropConfig, DropMode, MaskTensor};
use crate::error::{KanError, Result};
use crate::layer::{KanLayer, LayerCache};
use crate::spline::{EdgeGrid, GridSpec};

pub const MODEL_FORMAT: &str = "dropkan-network";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct KanNetwork {
    architecture: Vec<usize>,
    layers: Vec<KanLayer>,
}

/// Per-layer inputs and masks from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub training: bool,
    pub layers: Vec<LayerCache>,
}

/// Indices of the layers a drop mode applies to.
///
/// Dropout sits between layers, so it never masks the output layer. DropKAN
/// masks live inside every layer.
pub fn maskable_layers(mode: DropMode, n_layers: usize) -> Vec<usize> {
    match mode {
        DropMode::None => Vec::new(),
        DropMode::Dropout => (0..n_layers.saturating_sub(1)).collect(),
        DropMode::DropkanPa | DropMode::DropkanPs => (0..n_layers).collect(),
    }
}

impl KanNetwork {
    /// Random network with every layer on the same grid and no dropping.
    pub fn new<R: Rng + ?Sized>(architecture: &[usize], grid: GridSpec, sigma: f64, rng: &mut R) -> Result<Self> {
        if architecture.len() < 2 {
            return Err(KanError::InvalidConfig(
                "architecture needs at least an input and an output width".into(),
            ));
        }
        let grid = EdgeGrid::new(grid)?;
        let layers = architecture
            .windows(2)
            .map(|w| KanLayer::new(w[0], w[1], grid.clone(), sigma, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            architecture: architecture.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<KanLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| KanError::InvalidConfig("network needs at least one layer".into()))?;
        let mut architecture = vec![first.n_in()];
        for layer in &layers {
            if layer.n_in() != *architecture.last().unwrap() {
                return Err(KanError::DimensionMismatch(format!(
                    "layer with n_in={} follows width {}",
                    layer.n_in(),
                    architecture.last().unwrap()
                )));
            }
            architecture.push(layer.n_out());
        }
        Ok(Self { architecture, layers })
    }

    pub fn architecture(&self) -> &[usize] {
        &self.architecture
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn n_inputs(&self) -> usize {
        self.architecture[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.architecture.last().unwrap()
    }

    /// Install a drop regime: `rates[k]` goes to the k-th maskable layer,
    /// all other layers are reset to no dropping.
    pub fn apply_drop(&mut self, mode: DropMode, scale: bool, rates: &[f64]) -> Result<()> {
        let targets = maskable_layers(mode, self.layers.len());
        if rates.len() != targets.len() {
            return Err(KanError::InvalidConfig(format!(
                "{} rates given for {} maskable layers under {mode}",
                rates.len(),
                targets.len()
            )));
        }
        let configs = targets
            .iter()
            .zip(rates)
            .map(|(&l, &p)| DropConfig::new(mode, p, scale).map(|c| (l, c)))
            .collect::<Result<Vec<_>>>()?;
        for layer in &mut self.layers {
            layer.set_drop(DropConfig::none());
        }
        for (l, cfg) in configs {
            self.layers[l].set_drop(cfg);
        }
        Ok(())
    }

    /// Copy of the network with a different drop regime.
    pub fn with_drop(&self, mode: DropMode, scale: bool, rates: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.apply_drop(mode, scale, rates)?;
        Ok(net)
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: ArrayView2<f64>, training: bool, rng: &mut R) -> Result<Array2<f64>> {
        let mut x = self.layers[0].forward(input, training, rng)?;
        for layer in &self.layers[1..] {
            x = layer.forward(x.view(), training, rng)?;
        }
        Ok(x)
    }

    /// Forward pass that keeps everything `backward` needs. Masks are drawn
    /// layer by layer in network order.
    pub fn forward_cached<R: Rng + ?Sized>(
        &self,
        input: ArrayView2<f64>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mask = layer.sample_mask(x.nrows(), training, rng)?;
            let out = layer.forward_masked(x.view(), mask.as_ref())?;
            caches.push(LayerCache { input: x, mask });
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                training,
                layers: caches,
            },
        ))
    }

    /// Forward pass with caller-supplied (frozen) masks, one per layer.
    pub fn forward_with_masks(
        &self,
        input: ArrayView2<f64>,
        masks: &[Option<MaskTensor>],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if masks.len() != self.layers.len() {
            return Err(KanError::DimensionMismatch(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (layer, mask) in self.layers.iter().zip(masks) {
            let out = layer.forward_masked(x.view(), mask.as_ref())?;
            caches.push(LayerCache {
                input: x,
                mask: mask.clone(),
            });
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                training: true,
                layers: caches,
            },
        ))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.edges().iter().map(|e| 2 + e.coeffs.len()).sum::<usize>())
            .sum()
    }

    /// Flat parameter vector: layer, then edge `(j, i)` row-major, then
    /// `[w_b, w_s, coeffs..]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for e in layer.edges() {
                out.push(e.w_b);
                out.push(e.w_s);
                out.extend_from_slice(&e.coeffs);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(KanError::DimensionMismatch(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for e in layer.edges_mut() {
                e.w_b = it.next().unwrap();
                e.w_s = it.next().unwrap();
                for c in &mut e.coeffs {
                    *c = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            architecture: self.architecture.clone(),
            layers: self.layers.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(KanError::Format(format!("expected `{MODEL_FORMAT}`, found `{}`", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(KanError::Format(format!("unsupported version {}", doc.version)));
        }
        let net = Self::from_layers(doc.layers)?;
        if net.architecture != doc.architecture {
            return Err(KanError::Format(format!(
                "declared architecture {:?} does not match layers {:?}",
                doc.architecture, net.architecture
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk model document. Floats are written in shortest round-trip form
/// and parsed with correct rounding, so save/load is lossless.
#[derive(Serialize, Deserialize)]
struct NetworkDocument {
    format: String,
    version: u32,
    architecture: Vec<usize>,
    layers: Vec<KanLayer>,
}

/// Forward pass through a network: returns the outputs and, when
/// `keep_cache` is set, the per-layer cache (otherwise an empty one).
pub fn network_forward<R: Rng + ?Sized>(
    net: &KanNetwork,
    input: ArrayView2<f64>,
    training: bool,
    rng: &mut R,
    keep_cache: bool,
) -> Result<(Array2<f64>, ForwardCache)> {
    if input.ncols() != net.n_inputs() {
        return Err(KanError::DimensionMismatch(format!(
            "input has {} columns, network expects {}",
            input.ncols(),
            net.n_inputs()
        )));
    }
    if keep_cache {
        net.forward_cached(input, training, rng)
    } else {
        let out = net.forward(input, training, rng)?;
        Ok((
            out,
            ForwardCache {
                training,
                layers: Vec::new(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::spline::activation_eval;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_net(arch: &[usize], seed: u64) -> KanNetwork {
        KanNetwork::new(arch, GridSpec::default(), 0.1, &mut seeded_rng(seed)).unwrap()
    }

    fn random_input(batch: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_fn((batch, n), |_| rng.random_range(-1.0..1.0))
    }

    /// Edge-by-edge re-implementation of the eval-mode forward pass.
    fn edge_loop_forward(net: &KanNetwork, input: &Array2<f64>) -> Array2<f64> {
        let mut x = input.clone();
        for layer in net.layers() {
            let mut y = Array2::zeros((x.nrows(), layer.n_out()));
            for b in 0..x.nrows() {
                for j in 0..layer.n_out() {
                    for i in 0..layer.n_in() {
                        y[[b, j]] += activation_eval(layer.edge(j, i), layer.grid(), x[[b, i]]);
                    }
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn single_layer_net_equals_layer() {
        let net = random_net(&[3, 2], 1);
        let x = random_input(4, 3, 2);
        let a = net.forward(x.view(), false, &mut seeded_rng(0)).unwrap();
        let b = net.layers()[0].forward(x.view(), false, &mut seeded_rng(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let mut net = random_net(&[6, 2, 2, 1], 3);
        net.apply_drop(DropMode::Dropout, true, &[0.5, 0.5]).unwrap();
        let x = random_input(10, 6, 4);
        let a = net.forward(x.view(), false, &mut seeded_rng(1)).unwrap();
        let b = net.forward(x.view(), false, &mut seeded_rng(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_edge_loop_oracle() {
        let net = random_net(&[4, 3, 2], 9);
        let x = random_input(7, 4, 10);
        let fast = net.forward(x.view(), false, &mut seeded_rng(0)).unwrap();
        let slow = edge_loop_forward(&net, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maskable_layer_placement() {
        assert_eq!(maskable_layers(DropMode::Dropout, 3), vec![0, 1]);
        assert_eq!(maskable_layers(DropMode::DropkanPa, 3), vec![0, 1, 2]);
        assert!(maskable_layers(DropMode::None, 3).is_empty());
        let mut net = random_net(&[6, 2, 2, 1], 0);
        assert!(net.apply_drop(DropMode::Dropout, true, &[0.5]).is_err());
        net.apply_drop(DropMode::Dropout, true, &[0.5, 0.25]).unwrap();
        assert_eq!(net.layers()[2].drop_config().mode(), DropMode::None);
        assert_eq!(net.layers()[1].drop_config().rate(), 0.25);
    }

    #[test]
    fn rejects_broken_documents() {
        let net = random_net(&[2, 2], 0);
        let text = net.to_json().unwrap().replace(MODEL_FORMAT, "other");
        assert!(KanNetwork::from_json(&text).is_err());
        let text = net.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(KanNetwork::from_json(&text).is_err());
    }

    #[test]
    fn network_forward_cache_flag() {
        let net = random_net(&[3, 2, 2], 5);
        let x = random_input(2, 3, 5);
        let (_, cache) = network_forward(&net, x.view(), false, &mut seeded_rng(0), false).unwrap();
        assert!(cache.layers.is_empty());
        let (_, cache) = network_forward(&net, x.view(), true, &mut seeded_rng(0), true).unwrap();
        assert_eq!(cache.layers.len(), 2);
        assert!(network_forward(&net, random_input(2, 4, 0).view(), false, &mut seeded_rng(0), false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn json_round_trip_is_lossless(seed in any::<u64>(), p in 0.0f64..0.99, scale in any::<bool>()) {
            let mut net = random_net(&[3, 4, 2], seed);
            net.apply_drop(DropMode::DropkanPs, scale, &[p, p / 2.0]).unwrap();
            let back = KanNetwork::from_json(&net.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
