//! Central finite differences and gradient comparison.
//!
//! This module is the independent oracle used to validate every analytic
//! gradient in the repository before it is trusted. It never calls into the
//! autodiff tape: a numeric gradient is assembled purely from evaluations of
//! the caller-supplied scalar function.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Defaults balancing truncation against round-off for unrolled solvers with
/// a handful of iterations, in double precision.
pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_RTOL: f64 = 1e-4;
pub const DEFAULT_ATOL: f64 = 1e-7;

/// Outcome of comparing an analytic against a numeric gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    /// `|a - n| / max(|a|, |n|, 1e-8)`, maximised over coordinates.
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest absolute error.
    pub worst_index: usize,
    pub n_params: usize,
    /// True iff `|a - n| <= atol + rtol * max(|a|, |n|)` at every coordinate.
    pub pass: bool,
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. Fails if any probe evaluation is non-finite.
pub fn numeric_gradient<F>(f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("numeric_gradient", "step must be positive"));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "numeric_gradient",
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// Like [`numeric_gradient`], but also reports coordinates whose probes
/// straddle a kink, where finite differences are invalid. Two symptoms are
/// checked: the one-sided differences disagree by more than `10x` the
/// central estimate (an asymmetric kink, like `|x|` at 0), or the central
/// estimates at steps `h` and `h/2` are inconsistent (a branch jump inside
/// the probe interval contributes `O(A/h)`, which does not survive step
/// refinement). Callers either re-sample their random input or exclude the
/// flagged coordinates from the comparison.
pub fn numeric_gradient_with_kinks<F>(f: F, at: &Tensor, h: f64) -> Result<(Tensor, Vec<usize>)>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("numeric_gradient", "step must be positive"));
    }
    let center = f(at)?;
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    let mut kinks = Vec::new();
    for i in 0..at.len() {
        let x0 = at.data()[i];
        let mut eval = |x: f64| -> Result<f64> {
            probe.data_mut()[i] = x;
            let y = f(&probe)?;
            probe.data_mut()[i] = x0;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite {
                    op: "numeric_gradient",
                })
            }
        };
        let up = eval(x0 + h)?;
        let down = eval(x0 - h)?;
        let up_half = eval(x0 + 0.5 * h)?;
        let down_half = eval(x0 - 0.5 * h)?;

        let central = (up - down) / (2.0 * h);
        let central_half = (up_half - down_half) / h;
        let fwd = (up - center) / h;
        let bwd = (center - down) / h;

        let one_sided_scale = math::max(math::abs(central), 1e-6);
        let asymmetric = math::abs(fwd - bwd) > 10.0 * one_sided_scale;
        let refine_scale = math::max(
            0.05 * math::max(math::abs(central), math::abs(central_half)),
            3e-7,
        );
        let inconsistent = math::abs(central - central_half) > refine_scale;
        if asymmetric || inconsistent {
            kinks.push(i);
        }
        grad.push(central);
    }
    Ok((Tensor::new(at.shape().to_vec(), grad)?, kinks))
}

/// Compares two gradients coordinatewise. Symmetric in its tensor arguments.
pub fn gradcheck(analytic: &Tensor, numeric: &Tensor, rtol: f64, atol: f64) -> Result<GradReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "gradcheck",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        ));
    }
    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        n_params: analytic.len(),
        pass: true,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs_err = math::abs(a - n);
        let mag = math::max(math::abs(a), math::abs(n));
        let rel_err = abs_err / math::max(mag, 1e-8);
        if abs_err > report.max_abs_err {
            report.max_abs_err = abs_err;
            report.worst_index = i;
        }
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
        }
        if abs_err > atol + rtol * mag {
            report.pass = false;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    #[test]
    fn quadratic_gradient_is_exact_up_to_round_off() {
        let f = |t: &Tensor| Ok(t.data()[0] * t.data()[0]);
        let at = Tensor::scalar(3.0);
        let g = numeric_gradient(f, &at, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6, "{}", g.data()[0]);
    }

    #[test]
    fn sum_of_sines_at_zero_gives_ones() {
        let f = |t: &Tensor| {
            let mut s = 0.0;
            for &x in t.data() {
                s += crate::math::sin(x);
            }
            Ok(s)
        };
        let at = Tensor::zeros(&[7]);
        let g = numeric_gradient(f, &at, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn linear_function_matches_coefficients() {
        let mut rng = Rng::new(9);
        let coef = Tensor::random_uniform(&[10], -2.0, 2.0, &mut rng);
        let coef_for_f = coef.clone();
        let f = move |t: &Tensor| {
            let mut s = 0.0;
            for (c, x) in coef_for_f.data().iter().zip(t.data()) {
                s += c * x;
            }
            Ok(s)
        };
        let at = Tensor::random_uniform(&[10], -1.0, 1.0, &mut rng);
        let g = numeric_gradient(f, &at, 1e-4).unwrap();
        for (got, want) in g.data().iter().zip(coef.data()) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // ln is NaN on the negative side of the central stencil at x = 0.
        let f = |t: &Tensor| Ok(crate::math::ln(t.data()[0]));
        let at = Tensor::scalar(0.0);
        assert!(numeric_gradient(f, &at, 1e-4).is_err());
    }

    #[test]
    fn identical_tensors_pass_with_zero_error() {
        let t = Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap();
        let r = gradcheck(&t, &t, 1e-6, 1e-12).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_err, 0.0);
        assert_eq!(r.n_params, 3);
    }

    #[test]
    fn single_coordinate_offset_fails_at_that_index() {
        let a = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut b = a.clone();
        b.set(&[2], a.at(&[2]) + 1.0).unwrap();
        let r = gradcheck(&a, &b, 1e-6, 1e-6).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_index, 2);
    }

    #[test]
    fn report_is_symmetric_in_arguments() {
        let mut rng = Rng::new(10);
        let a = Tensor::random_uniform(&[20], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(&[20], -1.0, 1.0, &mut rng);
        let r1 = gradcheck(&a, &b, 1e-4, 1e-7).unwrap();
        let r2 = gradcheck(&b, &a, 1e-4, 1e-7).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn kink_detection_flags_abs_at_origin() {
        let f = |t: &Tensor| Ok(crate::math::abs(t.data()[0]));
        // Exactly on the kink of |x|: forward slope +1, backward slope -1,
        // central 0 -> flagged.
        let (g, kinks) = numeric_gradient_with_kinks(f, &Tensor::scalar(0.0), 1e-4).unwrap();
        assert_eq!(kinks, vec![0]);
        assert!(g.data()[0].abs() < 1e-12);
        // Away from the kink nothing is flagged.
        let (_, kinks) = numeric_gradient_with_kinks(f, &Tensor::scalar(0.5), 1e-4).unwrap();
        assert!(kinks.is_empty());
    }
}
