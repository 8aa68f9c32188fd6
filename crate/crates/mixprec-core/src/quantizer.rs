//! Fake quantization: round-trip values through a b-bit integer grid in
//! f64, so the error of a bit assignment can be measured without integer
//! kernels.
//!
//! Symmetric (signed, zero-centered):
//!
//! ```text
//! xq = clip(round(x / s), -2^(b-1), 2^(b-1) - 1) * s
//! ```
//!
//! with the scale calibrated as `s = max|x| / (2^(b-1) - 1)` so the
//! largest magnitude lands on the top code. Asymmetric (unsigned grid with
//! a zero point):
//!
//! ```text
//! xq = delta * (clip(round(x / delta) + z, 0, 2^b - 1) - z)
//! delta = (max - min) / (2^b - 1),  z = -round(min / delta)
//! ```
//!
//! Rounding is half away from zero throughout (`f64::round`). Weights use
//! the symmetric scheme unless asked otherwise; activations are always
//! asymmetric because post-nonlinearity ranges are skewed. Calibrating on
//! a constant tensor stores the constant itself and reproduces it exactly,
//! since neither formula has a usable step there.

use thiserror::Error;

use crate::allocator::BitAllocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Symmetric => write!(f, "symmetric"),
            Scheme::Asymmetric => write!(f, "asymmetric"),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symmetric" => Ok(Scheme::Symmetric),
            "asymmetric" => Ok(Scheme::Asymmetric),
            other => Err(format!(
                "unknown scheme {other:?} (expected symmetric or asymmetric)"
            )),
        }
    }
}

/// Calibrated parameters for one tensor at one width.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub scheme: Scheme,
    pub bits: u8,
    /// Step between representable values (`s` or `delta`).
    pub step: f64,
    /// Asymmetric zero point; 0 for symmetric. May fall outside the clip
    /// range when the calibration data does not straddle zero.
    pub zero_point: i64,
    pub clip_lo: i64,
    pub clip_hi: i64,
    /// Set when calibration saw a degenerate range (constant input);
    /// quantization then reproduces this value exactly.
    pub constant_fill: Option<f64>,
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if bits == 0 || bits > 32 {
        return Err(QuantError::BadBits(bits));
    }
    Ok(())
}

fn check_values(x: &[f64]) -> Result<(), QuantError> {
    if x.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite { index: i });
        }
    }
    Ok(())
}

/// Calibrates a symmetric quantizer on `x`: signed clip range plus a scale
/// putting `max|x|` on the largest positive code.
pub fn calibrate_symmetric(x: &[f64], bits: u8) -> Result<QuantizerConfig, QuantError> {
    check_bits(bits)?;
    check_values(x)?;
    let clip_lo = -(1i64 << (bits - 1));
    let clip_hi = (1i64 << (bits - 1)) - 1;
    let amax = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if amax == 0.0 {
        return Ok(QuantizerConfig {
            scheme: Scheme::Symmetric,
            bits,
            step: 1.0,
            zero_point: 0,
            clip_lo,
            clip_hi,
            constant_fill: Some(0.0),
        });
    }
    // At 1 bit the positive range is empty (codes {-1, 0}); fall back to
    // the magnitude itself so the grid is {-amax, 0}.
    let step = if clip_hi == 0 {
        amax
    } else {
        amax / clip_hi as f64
    };
    Ok(QuantizerConfig {
        scheme: Scheme::Symmetric,
        bits,
        step,
        zero_point: 0,
        clip_lo,
        clip_hi,
        constant_fill: None,
    })
}

/// Calibrates an asymmetric quantizer on `x`: the grid spans exactly
/// `[min, max]` with `2^b` codes.
pub fn calibrate_asymmetric(x: &[f64], bits: u8) -> Result<QuantizerConfig, QuantError> {
    check_bits(bits)?;
    check_values(x)?;
    let clip_lo = 0i64;
    let clip_hi = if bits == 64 {
        unreachable!("bits capped at 32")
    } else {
        (1i64 << bits) - 1
    };
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(QuantizerConfig {
            scheme: Scheme::Asymmetric,
            bits,
            step: 1.0,
            zero_point: 0,
            clip_lo,
            clip_hi,
            constant_fill: Some(min),
        });
    }
    let step = (max - min) / clip_hi as f64;
    let zero_point = -((min / step).round()) as i64;
    Ok(QuantizerConfig {
        scheme: Scheme::Asymmetric,
        bits,
        step,
        zero_point,
        clip_lo,
        clip_hi,
        constant_fill: None,
    })
}

/// Fake-quantizes through a symmetric config.
pub fn quantize_symmetric(x: &[f64], cfg: &QuantizerConfig) -> Result<Vec<f64>, QuantError> {
    if cfg.scheme != Scheme::Symmetric {
        return Err(QuantError::SchemeMismatch {
            expected: Scheme::Symmetric,
            found: cfg.scheme,
        });
    }
    check_values(x)?;
    if let Some(fill) = cfg.constant_fill {
        return Ok(vec![fill; x.len()]);
    }
    let lo = cfg.clip_lo as f64;
    let hi = cfg.clip_hi.max(cfg.clip_lo) as f64; // 1-bit: clamp to {-1, 0}
    Ok(x.iter()
        // `+ 0.0` collapses -0.0 (from rounding small negatives) to +0.0
        // so the zero level has one representation.
        .map(|&v| (v / cfg.step).round().clamp(lo, hi) * cfg.step + 0.0)
        .collect())
}

/// Fake-quantizes through an asymmetric config.
pub fn quantize_asymmetric(x: &[f64], cfg: &QuantizerConfig) -> Result<Vec<f64>, QuantError> {
    if cfg.scheme != Scheme::Asymmetric {
        return Err(QuantError::SchemeMismatch {
            expected: Scheme::Asymmetric,
            found: cfg.scheme,
        });
    }
    check_values(x)?;
    if let Some(fill) = cfg.constant_fill {
        return Ok(vec![fill; x.len()]);
    }
    let lo = cfg.clip_lo as f64;
    let hi = cfg.clip_hi as f64;
    let z = cfg.zero_point as f64;
    Ok(x.iter()
        .map(|&v| (((v / cfg.step).round() + z).clamp(lo, hi) - z) * cfg.step + 0.0)
        .collect())
}

/// Dispatches on the config's scheme.
pub fn quantize(x: &[f64], cfg: &QuantizerConfig) -> Result<Vec<f64>, QuantError> {
    match cfg.scheme {
        Scheme::Symmetric => quantize_symmetric(x, cfg),
        Scheme::Asymmetric => quantize_asymmetric(x, cfg),
    }
}

/// Reconstruction error of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuantStats {
    pub mse: f64,
    pub max_abs_err: f64,
}

pub fn reconstruction_stats(x: &[f64], xq: &[f64]) -> LayerQuantStats {
    assert_eq!(x.len(), xq.len());
    let mut sq = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &b) in x.iter().zip(xq) {
        let e = a - b;
        sq += e * e;
        max_abs = max_abs.max(e.abs());
    }
    LayerQuantStats {
        mse: sq / x.len() as f64,
        max_abs_err: max_abs,
    }
}

/// Quantizes per-layer weight tensors at the widths an allocation chose,
/// calibrating each tensor on itself.
pub fn apply_allocation(
    weights: &[Vec<f64>],
    alloc: &BitAllocation,
    scheme: Scheme,
) -> Result<(Vec<Vec<f64>>, Vec<LayerQuantStats>), QuantError> {
    if weights.len() != alloc.bits.len() {
        return Err(QuantError::LayerCountMismatch {
            expected: alloc.bits.len(),
            found: weights.len(),
        });
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut stats = Vec::with_capacity(weights.len());
    for (layer, bits) in weights.iter().zip(&alloc.bits) {
        let cfg = match scheme {
            Scheme::Symmetric => calibrate_symmetric(layer, *bits)?,
            Scheme::Asymmetric => calibrate_asymmetric(layer, *bits)?,
        };
        let xq = quantize(layer, &cfg)?;
        stats.push(reconstruction_stats(layer, &xq));
        out.push(xq);
    }
    Ok((out, stats))
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("cannot calibrate on an empty tensor")]
    EmptyInput,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("bit width {0} outside 1..=32")]
    BadBits(u8),
    #[error("config is {found}, expected {expected}")]
    SchemeMismatch { expected: Scheme, found: Scheme },
    #[error("allocation covers {expected} layers but {found} weight tensors were given")]
    LayerCountMismatch { expected: usize, found: usize },
}
