//! Differentiable unnormalized log-densities.
//!
//! A [`LogDensity`] maps a point in unconstrained parameter space to its
//! log-density (up to an additive constant) and writes the exact gradient.
//! Model gradients in this crate are derived by hand; [`check_gradient`]
//! is the contract they are tested against.

use crate::{Error, Result};

/// Absolute error below which a gradient coordinate is treated as exact.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-8;

/// An unnormalized log-density over a fixed-length parameter vector with
/// its data already bound.
///
/// Implementations must be pure: identical inputs give bit-identical
/// outputs. A non-finite return value marks an invalid region; samplers
/// treat it as a divergent proposal rather than an error.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(theta)` and writes `d log p / d theta` into `grad`.
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn logp(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.logp_grad(theta, &mut g)
    }
}

impl<D: LogDensity + ?Sized> LogDensity for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        (**self).logp_grad(theta, grad)
    }
}

/// Evaluates log-density and gradient, checking the dimension.
pub fn evaluate<D: LogDensity + ?Sized>(density: &D, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if theta.len() != density.dim() {
        return Err(Error::Dimension {
            expected: density.dim(),
            got: theta.len(),
        });
    }
    let mut grad = vec![0.0; theta.len()];
    let logp = density.logp_grad(theta, &mut grad);
    Ok((logp, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Max relative error over coordinates whose absolute error exceeds
    /// [`GRADIENT_ABS_FLOOR`].
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: Option<usize>,
    /// Coordinates where the finite difference itself was not finite.
    pub non_finite: Vec<usize>,
}

impl GradientCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error <= rel_tol
    }
}

/// Number of step halvings tried per coordinate by [`check_gradient`].
const FD_HALVINGS: i32 = 12;

/// Compares the analytic gradient with five-point finite differences.
///
/// Each coordinate is differenced at steps `h * max(1, |theta_i|) / 2^k`.
/// The estimate kept is the one that agrees best with its half-step
/// neighbour, so neither truncation error at large steps nor cancellation
/// at small steps dominates when `|logp|` is large.
pub fn check_gradient<D: LogDensity + ?Sized>(density: &D, theta: &[f64], h: f64) -> Result<GradientCheck> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", "finite-difference step must be positive"));
    }
    let (_, grad) = evaluate(density, theta)?;
    let mut probe = theta.to_vec();
    let mut check = GradientCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: None,
        non_finite: Vec::new(),
    };
    for i in 0..theta.len() {
        let mut at = |x: f64| {
            probe[i] = x;
            density.logp(&probe)
        };
        let scale = theta[i].abs().max(1.0);
        let estimates: Vec<f64> = (0..=FD_HALVINGS)
            .map(|k| {
                let s = h * scale * 0.5f64.powi(k);
                let x = theta[i];
                (at(x - 2.0 * s) - 8.0 * at(x - s) + 8.0 * at(x + s) - at(x + 2.0 * s)) / (12.0 * s)
            })
            .collect();
        probe[i] = theta[i];
        let fd = estimates
            .windows(2)
            .filter(|w| w[0].is_finite() && w[1].is_finite())
            .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
            .map(|w| w[1]);
        let Some(fd) = fd else {
            check.non_finite.push(i);
            continue;
        };
        let abs = (grad[i] - fd).abs();
        check.max_abs_error = check.max_abs_error.max(abs);
        if abs <= GRADIENT_ABS_FLOOR {
            continue;
        }
        let rel = abs / grad[i].abs().max(fd.abs());
        if rel > check.max_rel_error || !rel.is_finite() {
            check.max_rel_error = rel;
            check.worst_coordinate = Some(i);
        }
    }
    Ok(check)
}

/// Simple closed-form targets used by tests, benches and sampler checks.
pub mod targets {
    use super::LogDensity;
    use crate::distributions::{logpdf_student_t, StudentTParams};

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

    /// Independent normals with per-coordinate mean and standard deviation.
    #[derive(Clone, Debug)]
    pub struct DiagNormal {
        pub mean: Vec<f64>,
        pub sd: Vec<f64>,
    }

    impl DiagNormal {
        pub fn standard(dim: usize) -> Self {
            DiagNormal {
                mean: vec![0.0; dim],
                sd: vec![1.0; dim],
            }
        }
    }

    impl LogDensity for DiagNormal {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..theta.len() {
                let z = (theta[i] - self.mean[i]) / self.sd[i];
                lp += -0.5 * z * z - self.sd[i].ln() - HALF_LN_2PI;
                grad[i] = -z / self.sd[i];
            }
            lp
        }
    }

    /// Bivariate normal with unit variances and correlation `rho`.
    #[derive(Clone, Debug)]
    pub struct CorrelatedNormal2 {
        pub rho: f64,
    }

    impl LogDensity for CorrelatedNormal2 {
        fn dim(&self) -> usize {
            2
        }
        fn logp_grad(&self, t: &[f64], grad: &mut [f64]) -> f64 {
            let det = 1.0 - self.rho * self.rho;
            let (x, y) = (t[0], t[1]);
            let q = (x * x - 2.0 * self.rho * x * y + y * y) / det;
            grad[0] = -(x - self.rho * y) / det;
            grad[1] = -(y - self.rho * x) / det;
            -0.5 * q - 0.5 * det.ln() - 2.0 * HALF_LN_2PI
        }
    }

    /// One-dimensional Student-t.
    #[derive(Clone, Debug)]
    pub struct StudentT1 {
        pub params: StudentTParams,
    }

    impl LogDensity for StudentT1 {
        fn dim(&self) -> usize {
            1
        }
        fn logp_grad(&self, t: &[f64], grad: &mut [f64]) -> f64 {
            let p = self.params;
            let r = t[0] - p.mu;
            grad[0] = -(p.nu + 1.0) * r / (p.nu * p.sigma * p.sigma + r * r);
            logpdf_student_t(t[0], p)
        }
    }

    /// Normal mean with a Normal prior and observed Normal data of known sd.
    #[derive(Clone, Debug)]
    pub struct NormalMean {
        pub prior_mean: f64,
        pub prior_sd: f64,
        pub noise_sd: f64,
        pub data: Vec<f64>,
    }

    impl NormalMean {
        /// Closed-form conjugate posterior (mean, variance).
        pub fn posterior(&self) -> (f64, f64) {
            let n = self.data.len() as f64;
            let prec = 1.0 / (self.prior_sd * self.prior_sd) + n / (self.noise_sd * self.noise_sd);
            let sum: f64 = self.data.iter().sum();
            let mean = (self.prior_mean / (self.prior_sd * self.prior_sd)
                + sum / (self.noise_sd * self.noise_sd))
                / prec;
            (mean, 1.0 / prec)
        }
    }

    impl LogDensity for NormalMean {
        fn dim(&self) -> usize {
            1
        }
        fn logp_grad(&self, t: &[f64], grad: &mut [f64]) -> f64 {
            let m = t[0];
            let zp = (m - self.prior_mean) / self.prior_sd;
            let mut lp = -0.5 * zp * zp;
            let mut g = -zp / self.prior_sd;
            let v = self.noise_sd * self.noise_sd;
            for &y in &self.data {
                lp -= 0.5 * (y - m) * (y - m) / v;
                g += (y - m) / v;
            }
            grad[0] = g;
            lp
        }
    }

    /// Adds a constant to another density's log-density.
    #[derive(Clone, Debug)]
    pub struct Shifted<D> {
        pub inner: D,
        pub shift: f64,
    }

    impl<D: LogDensity> LogDensity for Shifted<D> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn logp_grad(&self, t: &[f64], grad: &mut [f64]) -> f64 {
            self.inner.logp_grad(t, grad) + self.shift
        }
    }
}
