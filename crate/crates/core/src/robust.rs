//! Scalar robust kernels.
//!
//! `welsch` bounds positional residuals, `gaussian_weight` turns a color
//! difference into a weight in `(0, 1]`. With equal parameters the two are
//! exact complements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the Welsch kernel, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WelschParam(f64);

impl WelschParam {
    pub const DEFAULT: f64 = 0.2;

    pub fn new(nu: f64) -> Result<Self> {
        if nu.is_finite() && nu > 0.0 {
            Ok(Self(nu))
        } else {
            Err(Error::InvalidParameter(format!(
                "welsch nu must be > 0, got {nu}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for WelschParam {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

impl TryFrom<f64> for WelschParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WelschParam> for f64 {
    fn from(p: WelschParam) -> f64 {
        p.0
    }
}

/// Scale of the Gaussian color weight, in CIEDE2000 units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GaussianParam(f64);

impl GaussianParam {
    pub const DEFAULT: f64 = 5.0;

    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidParameter(format!(
                "gaussian sigma must be > 0, got {sigma}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for GaussianParam {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

impl TryFrom<f64> for GaussianParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GaussianParam> for f64 {
    fn from(p: GaussianParam) -> f64 {
        p.0
    }
}

/// `1 - exp(-x^2 / (2 nu^2))`.
#[inline]
pub fn welsch(x: f64, nu: WelschParam) -> f64 {
    let nu = nu.0;
    -(-(x * x) / (2.0 * nu * nu)).exp_m1()
}

/// `d welsch / dx = (x / nu^2) exp(-x^2 / (2 nu^2))`.
#[inline]
pub fn welsch_derivative(x: f64, nu: WelschParam) -> f64 {
    let nu2 = nu.0 * nu.0;
    x / nu2 * (-(x * x) / (2.0 * nu2)).exp()
}

/// `welsch_derivative(x) / x`, finite at `x = 0` where it equals `1 / nu^2`.
#[inline]
pub fn welsch_weight(x: f64, nu: WelschParam) -> f64 {
    let nu2 = nu.0 * nu.0;
    (-(x * x) / (2.0 * nu2)).exp() / nu2
}

/// `exp(-x^2 / (2 sigma^2))`.
#[inline]
pub fn gaussian_weight(x: f64, sigma: GaussianParam) -> f64 {
    let s = sigma.0;
    (-(x * x) / (2.0 * s * s)).exp()
}
