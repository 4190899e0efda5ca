//! Scalar float helpers routed through std or libm so the crate builds
//! without the standard library.

#[cfg(feature = "std")]
mod imp {
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn tanh(x: f64) -> f64 {
        x.tanh()
    }
    #[allow(dead_code)] // exercised by the finite-difference test oracles
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
}

#[cfg(all(not(feature = "std"), feature = "libm"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    #[allow(dead_code)] // exercised by the finite-difference test oracles
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
}

pub(crate) use imp::*;

pub(crate) fn abs(x: f64) -> f64 {
    f64::from_bits(x.to_bits() & !(1u64 << 63))
}

/// NaN-free maximum (callers guarantee finite operands).
pub(crate) fn max(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `sqrt(a^2 + b^2)` with the subgradient convention `d/da = 0` at the origin.
pub(crate) fn hypot(a: f64, b: f64) -> f64 {
    sqrt(a * a + b * b)
}
