//! Gaussian attention windows and the multi-scale variance bank.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A window variance: positive and finite, or infinite (no locality
/// constraint).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variance {
    Finite(f64),
    Infinite,
}

impl Variance {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "window variance must be positive, got {value}"
            )));
        }
        if value.is_infinite() {
            Ok(Variance::Infinite)
        } else {
            Ok(Variance::Finite(value))
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Variance::Infinite)
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Variance::Finite(v) => *v,
            Variance::Infinite => f64::INFINITY,
        }
    }
}

// JSON has no literal for infinity, so the infinite member is written
// as the string "inf".
impl Serialize for Variance {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Variance::Finite(v) => serializer.serialize_f64(*v),
            Variance::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Variance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        let repr = Repr::deserialize(deserializer)?;
        let value = match repr {
            Repr::Number(v) => v,
            Repr::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => f64::INFINITY,
                other => other
                    .parse::<f64>()
                    .map_err(|_| D::Error::custom(format!("invalid variance `{other}`")))?,
            },
        };
        Variance::new(value).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Whether window entries carry the `1/2pi` density prefactor
/// (`Literal`) or are rescaled so the diagonal is exactly 1
/// (`Normalized`). In normalized mode the infinite-variance window is
/// all ones, which makes that member coincide exactly with an
/// unwindowed transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Literal,
    #[default]
    Normalized,
}

const INV_TWO_PI: f64 = 1.0 / (2.0 * std::f64::consts::PI);

/// A symmetric `M x M` matrix of distance-decayed weights, multiplied
/// element-wise into attention logits before softmax.
#[derive(Clone, Debug)]
pub struct GaussianWindow {
    size: usize,
    variance: Variance,
    mode: WindowMode,
    values: Tensor,
}

impl GaussianWindow {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn variance(&self) -> Variance {
        self.variance
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Builds the Gaussian window for a length-`m` sequence.
///
/// Entry `(i, j)` is `exp(-(j-i)^2 / variance)`, times `1/2pi` in
/// literal mode. An infinite variance yields the all-ones matrix
/// (normalized) or the constant `1/2pi` matrix (literal). The optional
/// `scale` multiplies the variance before use.
pub fn gaussian_window_matrix(
    m: usize,
    variance: Variance,
    mode: WindowMode,
) -> Result<GaussianWindow> {
    gaussian_window_matrix_scaled(m, variance, mode, 1.0)
}

pub fn gaussian_window_matrix_scaled(
    m: usize,
    variance: Variance,
    mode: WindowMode,
    scale: f64,
) -> Result<GaussianWindow> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "window size must be at least 1".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance scale must be positive, got {scale}"
        )));
    }
    let prefactor = match mode {
        WindowMode::Literal => INV_TWO_PI,
        WindowMode::Normalized => 1.0,
    };
    let mut values = Tensor::zeros(m, m);
    match variance {
        Variance::Infinite => {
            for v in values.data_mut() {
                *v = prefactor;
            }
        }
        Variance::Finite(var) => {
            let var = var * scale;
            for i in 0..m {
                for j in 0..m {
                    let d = j as f64 - i as f64;
                    values.set(i, j, prefactor * (-(d * d) / var).exp());
                }
            }
        }
    }
    Ok(GaussianWindow {
        size: m,
        variance,
        mode,
        values,
    })
}

/// The ordered variances of one multi-scale block: strictly increasing,
/// at least one entry. The default covers low, medium, high and
/// infinite ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variance>", into = "Vec<Variance>")]
pub struct GaussianBank {
    variances: Vec<Variance>,
}

impl GaussianBank {
    pub fn new(variances: Vec<Variance>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidArgument(
                "variance bank must contain at least one entry".into(),
            ));
        }
        for pair in variances.windows(2) {
            if pair[0].as_f64() >= pair[1].as_f64() {
                return Err(Error::InvalidArgument(format!(
                    "bank variances must be strictly increasing, got {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self { variances })
    }

    /// Single infinite entry: every block member is an unwindowed
    /// transformer block.
    pub fn vanilla() -> Self {
        Self {
            variances: vec![Variance::Infinite],
        }
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn variances(&self) -> &[Variance] {
        &self.variances
    }
}

impl Default for GaussianBank {
    fn default() -> Self {
        Self {
            variances: vec![
                Variance::Finite(0.5),
                Variance::Finite(1.0),
                Variance::Finite(5.0),
                Variance::Infinite,
            ],
        }
    }
}

impl TryFrom<Vec<Variance>> for GaussianBank {
    type Error = String;

    fn try_from(v: Vec<Variance>) -> std::result::Result<Self, String> {
        GaussianBank::new(v).map_err(|e| e.to_string())
    }
}

impl From<GaussianBank> for Vec<Variance> {
    fn from(bank: GaussianBank) -> Self {
        bank.variances
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_normalized_is_all_ones() {
        let w = gaussian_window_matrix(3, Variance::Infinite, WindowMode::Normalized).unwrap();
        assert!(w.values().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn infinite_literal_is_constant_inv_two_pi() {
        let w = gaussian_window_matrix(3, Variance::Infinite, WindowMode::Literal).unwrap();
        assert!(w.values().data().iter().all(|&v| v == INV_TWO_PI));
    }

    #[test]
    fn literal_unit_variance_spot_values() {
        // diag = 1/2pi = 0.159155, off-diag = e^-1 / 2pi = 0.058550
        let w = gaussian_window_matrix(2, Variance::new(1.0).unwrap(), WindowMode::Literal).unwrap();
        assert!((w.values().get(0, 0) - INV_TWO_PI).abs() < 1e-15);
        assert!((w.values().get(0, 0) - 0.159155).abs() < 1e-6);
        let off = (-1.0f64).exp() * INV_TWO_PI;
        assert!((w.values().get(0, 1) - off).abs() < 1e-15);
        assert!((w.values().get(0, 1) - 0.058550).abs() < 1e-6);
    }

    #[test]
    fn literal_half_variance_far_corner() {
        // (j-i)=2 with variance 0.5: e^-8 / 2pi = 5.339e-5
        let w = gaussian_window_matrix(3, Variance::new(0.5).unwrap(), WindowMode::Literal).unwrap();
        let expected = (-8.0f64).exp() * INV_TWO_PI;
        assert!((w.values().get(0, 2) - expected).abs() < 1e-18);
        assert!((w.values().get(0, 2) - 5.339e-5).abs() < 1e-8);
    }

    #[test]
    fn nonpositive_variance_rejected() {
        assert!(Variance::new(0.0).is_err());
        assert!(Variance::new(-1.0).is_err());
        assert!(Variance::new(f64::NAN).is_err());
    }

    #[test]
    fn bank_requires_strictly_increasing() {
        let bad = vec![Variance::Finite(1.0), Variance::Finite(1.0)];
        assert!(GaussianBank::new(bad).is_err());
        assert!(GaussianBank::new(vec![]).is_err());
        let default = GaussianBank::default();
        assert_eq!(default.len(), 4);
        assert!(default.variances()[3].is_infinite());
    }

    #[test]
    fn variance_serde_round_trip() {
        let bank = GaussianBank::default();
        let json = serde_json::to_string(&bank).unwrap();
        assert_eq!(json, "[0.5,1.0,5.0,\"inf\"]");
        let back: GaussianBank = serde_json::from_str(&json).unwrap();
        assert_eq!(back, bank);
    }
}
