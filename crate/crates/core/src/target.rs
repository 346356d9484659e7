//! Unnormalized target densities over box domains: synthetic peak targets,
//! annealed intermediates, and the squared-PDE-residual target.
//!
//! Everything works in log space; a density of zero is a log-density of
//! `-inf`. Proposal log-densities are floored at [`LOG_DENSITY_FLOOR`] when
//! they appear in denominators or annealing exponents, so importance ratios
//! stay finite even where the proposal underflows.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::mixture::MixtureModel;
use crate::pde::PoissonProblem;
use crate::pinn::Field;

/// Log of the smallest positive double is about -744.4; anything below is an
/// underflow and gets clamped here.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Axis-aligned box `(lower_1, upper_1) x ... x (lower_d, upper_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxDomain {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(CoreError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.len() == 0 {
            return Err(CoreError::invalid("domain", "dimension must be positive"));
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) {
                return Err(CoreError::invalid("domain", format!("lower[{i}] >= upper[{i}]")));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    /// The box `(-1, 1)^d`.
    pub fn symmetric_unit(dim: usize) -> Self {
        BoxDomain {
            lower: DVector::from_element(dim, -1.0),
            upper: DVector::from_element(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Strict interior membership.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && (0..x.len()).all(|i| x[i] > self.lower[i] && x[i] < self.upper[i])
    }

    /// True when some coordinate sits on a face within `tol` and the rest are
    /// inside the closed box.
    pub fn on_boundary(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let inside_closed = (0..x.len())
            .all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol);
        let on_face = (0..x.len())
            .any(|i| (x[i] - self.lower[i]).abs() <= tol || (x[i] - self.upper[i]).abs() <= tol);
        inside_closed && on_face
    }

    /// One uniform draw from the open box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        loop {
            let x = DVector::from_fn(self.dim(), |i, _| rng.random_range(self.lower[i]..self.upper[i]));
            if self.contains(&x) {
                return x;
            }
        }
    }
}

/// An unnormalized nonnegative density on a box domain.
///
/// Implementations must be pure: repeated evaluation at the same point gives
/// the same value, and concurrent evaluation is safe.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    fn domain(&self) -> &BoxDomain;

    /// Natural log of the unnormalized density; `-inf` where the density is 0.
    fn log_density(&self, x: &DVector<f64>) -> f64;

    fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }
}

/// Sum of isotropic Gaussian-shaped bumps `sum_i exp(-sharpness*|x - c_i|^2)`,
/// the synthetic stand-in for sharply peaked residual landscapes.
#[derive(Debug, Clone)]
pub struct GaussianBumps {
    centers: Vec<DVector<f64>>,
    sharpness: f64,
    domain: BoxDomain,
}

impl GaussianBumps {
    pub fn new(centers: Vec<DVector<f64>>, sharpness: f64, domain: BoxDomain) -> Result<Self> {
        if centers.is_empty() {
            return Err(CoreError::invalid("centers", "need at least one center"));
        }
        if !(sharpness > 0.0) {
            return Err(CoreError::invalid("sharpness", "must be positive"));
        }
        for c in &centers {
            if c.len() != domain.dim() {
                return Err(CoreError::DimensionMismatch { expected: domain.dim(), got: c.len() });
            }
            if !domain.contains(c) {
                return Err(CoreError::invalid("centers", "center outside the domain"));
            }
        }
        Ok(GaussianBumps { centers, sharpness, domain })
    }

    /// Single bump at (0.5, 0.5) with sharpness 1000 on `(-1,1)^2`.
    pub fn one_peak_2d() -> Self {
        Self::new(vec![DVector::from_vec(vec![0.5, 0.5])], 1000.0, BoxDomain::symmetric_unit(2)).unwrap()
    }

    /// Bumps at (0.5, 0.5) and (-0.5, -0.5) with sharpness 1000.
    pub fn two_peak_2d() -> Self {
        Self::new(
            vec![DVector::from_vec(vec![0.5, 0.5]), DVector::from_vec(vec![-0.5, -0.5])],
            1000.0,
            BoxDomain::symmetric_unit(2),
        )
        .unwrap()
    }

    /// 3x3 grid of bumps over {-0.5, 0, 0.5}^2 with sharpness 1000.
    pub fn nine_peak_2d() -> Self {
        Self::new(crate::pde::nine_peak_centers(), 1000.0, BoxDomain::symmetric_unit(2)).unwrap()
    }

    /// Look up one of the named synthetic targets.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "one-peak-2d" => Ok(Self::one_peak_2d()),
            "two-peak-2d" => Ok(Self::two_peak_2d()),
            "nine-peak-2d" => Ok(Self::nine_peak_2d()),
            other => Err(CoreError::UnknownPreset(other.to_string())),
        }
    }

    pub fn names() -> &'static [&'static str] {
        &["one-peak-2d", "two-peak-2d", "nine-peak-2d"]
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }
}

impl TargetDensity for GaussianBumps {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .centers
            .iter()
            .map(|c| {
                let diff = x - c;
                -self.sharpness * diff.norm_squared()
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
    }
}

/// Geometric interpolation `q^(1-lambda) * Q^lambda` between a frozen proposal
/// snapshot and the true target.
pub struct AnnealedTarget<'a> {
    proposal: MixtureModel,
    base: &'a dyn TargetDensity,
    lambda: f64,
}

impl<'a> AnnealedTarget<'a> {
    pub fn new(proposal: MixtureModel, base: &'a dyn TargetDensity, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CoreError::invalid("lambda", format!("must be in [0,1], got {lambda}")));
        }
        if proposal.dim() != base.dim() {
            return Err(CoreError::DimensionMismatch { expected: base.dim(), got: proposal.dim() });
        }
        Ok(AnnealedTarget { proposal, base, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Combines the two log factors. The proposal factor is floored so the
    /// annealed value never hits zero just because the proposal underflowed;
    /// the target factor is not floored (a zero target stays zero for
    /// `lambda > 0`).
    pub(crate) fn combine_logs(log_proposal: f64, log_target: f64, lambda: f64) -> f64 {
        let lq = log_proposal.max(LOG_DENSITY_FLOOR);
        if lambda == 0.0 {
            lq
        } else if lambda == 1.0 {
            log_target
        } else {
            (1.0 - lambda) * lq + lambda * log_target
        }
    }
}

impl TargetDensity for AnnealedTarget<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn domain(&self) -> &BoxDomain {
        self.base.domain()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        Self::combine_logs(self.proposal.log_density(x), self.base.log_density(x), self.lambda)
    }
}

/// Squared interior PDE residual `|N(x; u)|^2` of a field, as a sampling
/// target.
pub struct ResidualTarget<'a, F: Field> {
    field: &'a F,
    problem: &'a PoissonProblem,
}

impl<'a, F: Field> ResidualTarget<'a, F> {
    pub fn new(field: &'a F, problem: &'a PoissonProblem) -> Result<Self> {
        if field.dim() != problem.dim() {
            return Err(CoreError::DimensionMismatch { expected: problem.dim(), got: field.dim() });
        }
        Ok(ResidualTarget { field, problem })
    }
}

/// Builds the residual-squared target for a field/problem pair.
pub fn residual_target<'a, F: Field>(
    field: &'a F,
    problem: &'a PoissonProblem,
) -> Result<ResidualTarget<'a, F>> {
    ResidualTarget::new(field, problem)
}

impl<F: Field> TargetDensity for ResidualTarget<'_, F> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn domain(&self) -> &BoxDomain {
        self.problem.domain()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = self.problem.interior_operator(self.field, x);
        if r == 0.0 {
            f64::NEG_INFINITY
        } else {
            2.0 * r.abs().ln()
        }
    }

    fn density(&self, x: &DVector<f64>) -> f64 {
        let r = self.problem.interior_operator(self.field, x);
        r * r
    }
}
