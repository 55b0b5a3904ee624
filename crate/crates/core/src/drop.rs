//! Drop modes, their configuration, and Bernoulli mask sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    None,
    /// Mask whole nodes on the layer output.
    Dropout,
    /// Mask individual post-activations inside the layer.
    DropkanPa,
    /// Mask only the spline term of each post-activation.
    DropkanPs,
}

impl DropMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DropMode::None => "none",
            DropMode::Dropout => "dropout",
            DropMode::DropkanPa => "dropkan_pa",
            DropMode::DropkanPs => "dropkan_ps",
        }
    }

    pub fn is_dropkan(self) -> bool {
        matches!(self, DropMode::DropkanPa | DropMode::DropkanPs)
    }
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropMode {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "no_drop" => Ok(DropMode::None),
            "dropout" => Ok(DropMode::Dropout),
            "dropkan_pa" => Ok(DropMode::DropkanPa),
            "dropkan_ps" => Ok(DropMode::DropkanPs),
            other => Err(KanError::InvalidConfig(format!("unknown drop mode `{other}`"))),
        }
    }
}

/// Drop mode, rate `p` and whether kept units are scaled by `1 / (1 - p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDropConfig")]
pub struct DropConfig {
    mode: DropMode,
    rate: f64,
    scale: bool,
}

#[derive(Deserialize)]
struct RawDropConfig {
    mode: DropMode,
    rate: f64,
    scale: bool,
}

impl TryFrom<RawDropConfig> for DropConfig {
    type Error = KanError;

    fn try_from(raw: RawDropConfig) -> Result<Self> {
        DropConfig::new(raw.mode, raw.rate, raw.scale)
    }
}

impl Default for DropConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl DropConfig {
    pub fn new(mode: DropMode, rate: f64, scale: bool) -> Result<Self> {
        if mode != DropMode::None {
            check_rate(rate)?;
        }
        Ok(Self { mode, rate, scale })
    }

    pub fn none() -> Self {
        Self {
            mode: DropMode::None,
            rate: 0.0,
            scale: false,
        }
    }

    pub fn mode(&self) -> DropMode {
        self.mode
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> bool {
        self.scale
    }

    /// `1 / (1 - p)` when scaling is on, otherwise 1.
    pub fn scale_factor(&self) -> f64 {
        if self.scale && self.mode != DropMode::None {
            1.0 / (1.0 - self.rate)
        } else {
            1.0
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(KanError::InvalidRate(p))
    }
}

/// Binary keep-mask. Dropout masks have shape `(batch, n_out, 1)`; DropKAN
/// masks are per edge with shape `(batch, n_out, n_in)`. Stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    batch: usize,
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl MaskTensor {
    pub fn ones(batch: usize, rows: usize, cols: usize) -> Self {
        Self {
            batch,
            rows,
            cols,
            values: vec![1; batch * rows * cols],
        }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != batch * rows * cols {
            return Err(KanError::DimensionMismatch(format!(
                "mask has {} entries, shape needs {}",
                values.len(),
                batch * rows * cols
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(KanError::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        Ok(Self { batch, rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, b: usize, j: usize, i: usize) -> u8 {
        self.values[(b * self.rows + j) * self.cols + i]
    }

    pub fn set(&mut self, b: usize, j: usize, i: usize, keep: bool) {
        self.values[(b * self.rows + j) * self.cols + i] = keep as u8;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn fraction_kept(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        self.values.iter().map(|&v| v as u64).sum::<u64>() as f64 / self.values.len() as f64
    }
}

/// Draw an i.i.d. Bernoulli(1 - p) keep-mask for one layer.
///
/// Entries are drawn batch-major, then row-major over `(j, i)`: one uniform
/// `u` per entry, kept iff `u >= p`. A seed therefore fixes the mask bit for
/// bit. `DropMode::None` returns an all-ones mask without consuming the RNG.
pub fn sample_mask<R: Rng + ?Sized>(
    mode: DropMode,
    p: f64,
    batch: usize,
    n_out: usize,
    n_in: usize,
    rng: &mut R,
) -> Result<MaskTensor> {
    check_rate(p)?;
    let cols = match mode {
        DropMode::None => return Ok(MaskTensor::ones(batch, n_out, n_in)),
        DropMode::Dropout => 1,
        DropMode::DropkanPa | DropMode::DropkanPs => n_in,
    };
    let values = (0..batch * n_out * cols)
        .map(|_| (rng.random::<f64>() >= p) as u8)
        .collect();
    Ok(MaskTensor {
        batch,
        rows: n_out,
        cols,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn rate_validation() {
        assert!(DropConfig::new(DropMode::Dropout, 1.0, true).is_err());
        assert!(DropConfig::new(DropMode::DropkanPa, -0.1, true).is_err());
        assert!(DropConfig::new(DropMode::None, 1.0, true).is_ok());
        assert_eq!(DropConfig::new(DropMode::Dropout, 0.5, true).unwrap().scale_factor(), 2.0);
        assert_eq!(DropConfig::new(DropMode::Dropout, 0.5, false).unwrap().scale_factor(), 1.0);
        let err = serde_json::from_str::<DropConfig>(r#"{"mode":"dropout","rate":1.0,"scale":true}"#);
        assert!(err.is_err());
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let m = sample_mask(DropMode::DropkanPa, 0.0, 4, 3, 5, &mut seeded_rng(0)).unwrap();
        assert!(m.values().iter().all(|&v| v == 1));
        assert_eq!(m.shape(), (4, 3, 5));
    }

    #[test]
    fn dropout_mask_is_per_node() {
        let m = sample_mask(DropMode::Dropout, 0.3, 4, 3, 5, &mut seeded_rng(0)).unwrap();
        assert_eq!(m.shape(), (4, 3, 1));
    }

    #[test]
    fn keep_fraction_within_binomial_bound() {
        // 3 sigma of Binomial(1e6, 0.5)/1e6 is 0.0015
        let m = sample_mask(DropMode::DropkanPa, 0.5, 1000, 10, 100, &mut seeded_rng(42)).unwrap();
        assert!((m.fraction_kept() - 0.5).abs() < 0.002, "{}", m.fraction_kept());
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_mask(DropMode::DropkanPs, 0.4, 8, 3, 4, &mut seeded_rng(9)).unwrap();
        let b = sample_mask(DropMode::DropkanPs, 0.4, 8, 3, 4, &mut seeded_rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(sample_mask(DropMode::DropkanPa, 1.0, 1, 1, 1, &mut seeded_rng(0)).is_err());
        assert!(sample_mask(DropMode::DropkanPa, f64::NAN, 1, 1, 1, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [DropMode::None, DropMode::Dropout, DropMode::DropkanPa, DropMode::DropkanPs] {
            assert_eq!(m.as_str().parse::<DropMode>().unwrap(), m);
        }
        assert!("bogus".parse::<DropMode>().is_err());
    }
}
