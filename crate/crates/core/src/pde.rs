//! Multi-peak Poisson problems on `(-1,1)^d`: closed-form solutions with
//! matching source and boundary data, domain samplers, test-set construction,
//! and error metrics.
//!
//! The solution is a sum of sharp exponential bumps. In the default `Product`
//! form each bump is `exp(-K |x - c|^2)`; the `LiteralSum` form instead adds
//! one-dimensional bumps per coordinate, `sum_j exp(-K (x_j - c_j)^2)`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pinn::Field;
use crate::target::BoxDomain;

/// Shape of the multi-center exact solution in d > 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighDimForm {
    #[default]
    Product,
    LiteralSum,
}

/// `-Laplace(u) = f` on `(-1,1)^d` with Dirichlet data `g`, both defined by a
/// closed-form multi-peak solution.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    centers: Vec<DVector<f64>>,
    sharpness: f64,
    domain: BoxDomain,
    form: HighDimForm,
}

/// Centers of the 3x3 bump grid, `{-0.5, 0, 0.5}^2`.
pub fn nine_peak_centers() -> Vec<DVector<f64>> {
    (0..9)
        .map(|i| {
            let x = -0.5 + (i % 3) as f64 * 0.5;
            let y = 0.5 - (i / 3) as f64 * 0.5;
            DVector::from_vec(vec![x, y])
        })
        .collect()
}

impl PoissonProblem {
    pub fn new(centers: Vec<DVector<f64>>, sharpness: f64, form: HighDimForm) -> Result<Self> {
        if centers.is_empty() {
            return Err(CoreError::invalid("centers", "need at least one center"));
        }
        if !(sharpness > 0.0) {
            return Err(CoreError::invalid("sharpness", "must be positive"));
        }
        let dim = centers[0].len();
        let domain = BoxDomain::symmetric_unit(dim);
        for c in &centers {
            if c.len() != dim {
                return Err(CoreError::DimensionMismatch { expected: dim, got: c.len() });
            }
            if !domain.contains(c) {
                return Err(CoreError::invalid("centers", "center outside the domain"));
            }
        }
        Ok(PoissonProblem { centers, sharpness, domain, form })
    }

    /// Named problem instances.
    pub fn preset(name: &str) -> Result<Self> {
        let two_peaks_correlated = |dim: usize| -> Vec<DVector<f64>> {
            [1.0_f64, -1.0]
                .iter()
                .map(|&sign| {
                    DVector::from_fn(dim, |j, _| if j < 2 { 0.5 * sign } else { 0.0 })
                })
                .collect()
        };
        match name {
            "poisson2d-1p" => Self::new(vec![DVector::from_vec(vec![0.5, 0.5])], 1000.0, HighDimForm::Product),
            "poisson2d-9p" => Self::new(nine_peak_centers(), 1000.0, HighDimForm::Product),
            "poisson5d-2p" => Self::new(two_peaks_correlated(5), 100.0, HighDimForm::Product),
            "poisson9d-2p" => {
                let centers = [1.0_f64, -1.0]
                    .iter()
                    .map(|&sign| {
                        DVector::from_fn(9, |j, _| match j {
                            0 => 0.5 * sign,
                            1 => 0.5,
                            _ => 0.0,
                        })
                    })
                    .collect();
                Self::new(centers, 100.0, HighDimForm::Product)
            }
            "poisson15d-1p" => Self::new(vec![DVector::zeros(15)], 10.0, HighDimForm::Product),
            other => Err(CoreError::UnknownPreset(other.to_string())),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["poisson2d-1p", "poisson2d-9p", "poisson5d-2p", "poisson9d-2p", "poisson15d-1p"]
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    pub fn form(&self) -> HighDimForm {
        self.form
    }

    /// Width of a single bump, `1/sqrt(2K)`; also the default standard
    /// deviation for peak-centered test-set Gaussians.
    pub fn bump_sigma(&self) -> f64 {
        1.0 / (2.0 * self.sharpness).sqrt()
    }

    pub fn exact_solution(&self, x: &DVector<f64>) -> f64 {
        let k = self.sharpness;
        match self.form {
            HighDimForm::Product => self.centers.iter().map(|c| (-k * (x - c).norm_squared()).exp()).sum(),
            HighDimForm::LiteralSum => self
                .centers
                .iter()
                .map(|c| (0..x.len()).map(|j| (-k * (x[j] - c[j]).powi(2)).exp()).sum::<f64>())
                .sum(),
        }
    }

    pub fn exact_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.sharpness;
        let d = x.len();
        let mut grad = DVector::zeros(d);
        match self.form {
            HighDimForm::Product => {
                for c in &self.centers {
                    let e = (-k * (x - c).norm_squared()).exp();
                    for j in 0..d {
                        grad[j] += -2.0 * k * (x[j] - c[j]) * e;
                    }
                }
            }
            HighDimForm::LiteralSum => {
                for c in &self.centers {
                    for j in 0..d {
                        let s = x[j] - c[j];
                        grad[j] += -2.0 * k * s * (-k * s * s).exp();
                    }
                }
            }
        }
        grad
    }

    pub fn exact_laplacian(&self, x: &DVector<f64>) -> f64 {
        let k = self.sharpness;
        let d = x.len() as f64;
        match self.form {
            HighDimForm::Product => self
                .centers
                .iter()
                .map(|c| {
                    let r2 = (x - c).norm_squared();
                    (4.0 * k * k * r2 - 2.0 * k * d) * (-k * r2).exp()
                })
                .sum(),
            HighDimForm::LiteralSum => self
                .centers
                .iter()
                .map(|c| {
                    (0..x.len())
                        .map(|j| {
                            let s2 = (x[j] - c[j]).powi(2);
                            (4.0 * k * k * s2 - 2.0 * k) * (-k * s2).exp()
                        })
                        .sum::<f64>()
                })
                .sum(),
        }
    }

    /// Source term `f = -Laplace(u*)`.
    pub fn source_term(&self, x: &DVector<f64>) -> f64 {
        -self.exact_laplacian(x)
    }

    /// Dirichlet data `g = u*` restricted to the boundary; errors off it.
    pub fn boundary_term(&self, x: &DVector<f64>) -> Result<f64> {
        if !self.domain.on_boundary(x, 1e-12) {
            return Err(CoreError::NotOnBoundary);
        }
        Ok(self.exact_solution(x))
    }

    /// Interior operator `N(x; u) = -Laplace(u)(x) - f(x)`; zero for the
    /// exact solution.
    pub fn interior_operator(&self, field: &dyn Field, x: &DVector<f64>) -> f64 {
        -field.laplacian(x) - self.source_term(x)
    }

    /// Boundary operator `B(x; u) = u(x) - g(x)`.
    pub fn boundary_operator(&self, field: &dyn Field, x: &DVector<f64>) -> f64 {
        field.value(x) - self.exact_solution(x)
    }

    pub fn sample_interior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.domain.sample_uniform(rng)).collect()
    }

    /// Uniform over the 2d faces, then uniform on the chosen face.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        let d = self.dim();
        (0..n)
            .map(|_| {
                let face = rng.random_range(0..2 * d);
                let (axis, upper) = (face / 2, face % 2 == 1);
                let mut x = self.domain.sample_uniform(rng);
                x[axis] = if upper { self.domain.upper()[axis] } else { self.domain.lower()[axis] };
                x
            })
            .collect()
    }

    /// Closed-form solution as a [`Field`], for residual and metric oracles.
    pub fn exact_field(&self) -> ExactSolutionField<'_> {
        ExactSolutionField { problem: self }
    }
}

/// The exact solution wired up as a differentiable field.
pub struct ExactSolutionField<'a> {
    problem: &'a PoissonProblem,
}

impl Field for ExactSolutionField<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.problem.exact_solution(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.problem.exact_gradient(x)
    }

    fn laplacian(&self, x: &DVector<f64>) -> f64 {
        self.problem.exact_laplacian(x)
    }
}

/// Evaluation points with attached exact values.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub points: Vec<DVector<f64>>,
    pub exact: Vec<f64>,
}

/// Uniform interior points plus per-center Gaussian draws (mean at the
/// center, covariance `sigma^2 I`, rejected outside the domain).
pub fn build_test_set<R: Rng + ?Sized>(
    problem: &PoissonProblem,
    n_uniform: usize,
    n_gauss_per_peak: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<TestSet> {
    use rand_distr::StandardNormal;
    let mut points = problem.sample_interior(n_uniform, rng);
    for c in problem.centers() {
        let mut accepted = 0;
        let mut attempts = 0usize;
        let cap = 1000 * n_gauss_per_peak.max(1);
        while accepted < n_gauss_per_peak {
            attempts += 1;
            if attempts > cap {
                return Err(CoreError::ProposalOutsideDomain { attempts });
            }
            let x = DVector::from_fn(c.len(), |j, _| c[j] + sigma * rng.sample::<f64, _>(StandardNormal));
            if problem.domain().contains(&x) {
                points.push(x);
                accepted += 1;
            }
        }
    }
    let exact = points.iter().map(|x| problem.exact_solution(x)).collect();
    Ok(TestSet { points, exact })
}

/// Relative L2 error and max absolute error against a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub e_r: f64,
    pub e_inf: f64,
}

pub fn compute_metrics(field: &dyn Field, test: &TestSet) -> Result<Metrics> {
    if test.points.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut e_inf: f64 = 0.0;
    for (x, &exact) in test.points.iter().zip(&test.exact) {
        let u = field.value(x);
        num += (u - exact) * (u - exact);
        den += exact * exact;
        e_inf = e_inf.max((u - exact).abs());
    }
    if den == 0.0 {
        return Err(CoreError::DegenerateReference);
    }
    Ok(Metrics { e_r: (num / den).sqrt(), e_inf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::target::residual_target;
    use crate::target::TargetDensity;

    #[test]
    fn exact_solution_is_one_at_the_center() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        assert_eq!(p.exact_solution(&DVector::from_vec(vec![0.5, 0.5])), 1.0);
    }

    #[test]
    fn exact_solution_underflows_at_the_far_corner() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let v = p.exact_solution(&DVector::from_vec(vec![-1.0, -1.0]));
        assert!(v < 1e-300);
    }

    #[test]
    fn nine_peak_value_at_origin_matches_direct_sum() {
        let p = PoissonProblem::preset("poisson2d-9p").unwrap();
        let origin = DVector::zeros(2);
        let expected: f64 =
            nine_peak_centers().iter().map(|c| (-1000.0 * (c - &origin).norm_squared()).exp()).sum();
        assert_relative_eq!(p.exact_solution(&origin), expected, epsilon = 1e-15);
        for c in p.centers() {
            assert!(p.domain().contains(c));
        }
    }

    #[test]
    fn source_term_at_center_is_2kd() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let f = p.source_term(&DVector::from_vec(vec![0.5, 0.5]));
        assert_relative_eq!(f, 4000.0, epsilon = 1e-9);
    }

    #[test]
    fn source_term_decays_far_from_every_center() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let f = p.source_term(&DVector::from_vec(vec![-0.95, -0.95]));
        assert!(f.abs() < 1e-100);
    }

    #[test]
    fn source_term_matches_fd_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["poisson2d-1p", "poisson2d-9p", "poisson5d-2p"] {
            let p = PoissonProblem::preset(name).unwrap();
            let h = 1e-4;
            for _ in 0..50 {
                let x = p.domain().sample_uniform(&mut rng);
                let mut fd = 0.0;
                let u0 = p.exact_solution(&x);
                for j in 0..p.dim() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    fd += (p.exact_solution(&xp) - 2.0 * u0 + p.exact_solution(&xm)) / (h * h);
                }
                let f = p.source_term(&x);
                if f.abs() > 1e-6 {
                    assert_relative_eq!(f, -fd, max_relative = 1e-4);
                }
            }
        }
    }

    #[test]
    fn literal_sum_form_matches_its_own_fd_laplacian() {
        let p = PoissonProblem::new(
            vec![DVector::from_vec(vec![0.3, -0.2, 0.0])],
            50.0,
            HighDimForm::LiteralSum,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-4;
        for _ in 0..30 {
            let x = p.domain().sample_uniform(&mut rng);
            let u0 = p.exact_solution(&x);
            let mut fd = 0.0;
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd += (p.exact_solution(&xp) - 2.0 * u0 + p.exact_solution(&xm)) / (h * h);
            }
            assert_relative_eq!(p.source_term(&x), -fd, max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn boundary_term_values_and_precondition() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let on = DVector::from_vec(vec![1.0, 0.5]);
        assert_relative_eq!(p.boundary_term(&on).unwrap(), (-250.0_f64).exp(), epsilon = 1e-16);
        let interior = DVector::from_vec(vec![0.2, 0.2]);
        assert!(matches!(p.boundary_term(&interior), Err(CoreError::NotOnBoundary)));
    }

    #[test]
    fn interior_operator_is_compositional() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let net = crate::pinn::init_params(&[2, 6, 1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = DVector::from_vec(vec![0.4, 0.6]);
        let n = p.interior_operator(&net, &x);
        assert_eq!(n, -net.laplacian(&x) - p.source_term(&x));
    }

    #[test]
    fn zero_field_residual_is_source_squared() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        struct Zero;
        impl Field for Zero {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
            fn gradient(&self, _: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(2)
            }
            fn laplacian(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
        }
        let zero = Zero;
        let target = residual_target(&zero, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = p.domain().sample_uniform(&mut rng);
            let f = p.source_term(&x);
            assert_relative_eq!(target.density(&x), f * f, epsilon = 1e-12 * (f * f).max(1.0));
        }
    }

    #[test]
    fn exact_field_annihilates_the_residual_on_every_preset() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in PoissonProblem::preset_names() {
            let p = PoissonProblem::preset(name).unwrap();
            let field = p.exact_field();
            let target = residual_target(&field, &p).unwrap();
            for _ in 0..100 {
                let x = p.domain().sample_uniform(&mut rng);
                assert!(target.density(&x) < 1e-8, "{name}: residual^2 = {}", target.density(&x));
            }
        }
    }

    #[test]
    fn interior_samples_stay_strictly_inside() {
        let p = PoissonProblem::preset("poisson5d-2p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = p.sample_interior(500, &mut rng);
        assert_eq!(pts.len(), 500);
        for x in &pts {
            assert!(p.domain().contains(x));
        }
    }

    #[test]
    fn boundary_samples_sit_on_exactly_one_face() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = p.sample_boundary(200, &mut rng);
        for x in &pts {
            let on_faces = (0..2).filter(|&j| x[j] == -1.0 || x[j] == 1.0).count();
            assert_eq!(on_faces, 1);
        }
    }

    #[test]
    fn boundary_face_occupancy_is_roughly_uniform() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let pts = p.sample_boundary(n, &mut rng);
        let mut counts = [0usize; 4];
        for x in &pts {
            for j in 0..2 {
                if x[j] == -1.0 {
                    counts[2 * j] += 1;
                } else if x[j] == 1.0 {
                    counts[2 * j + 1] += 1;
                }
            }
        }
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn test_set_composition_and_containment() {
        let p = PoissonProblem::preset("poisson2d-9p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let uniform_only = build_test_set(&p, 100, 0, p.bump_sigma(), &mut rng).unwrap();
        assert_eq!(uniform_only.points.len(), 100);

        let ts = build_test_set(&p, 100, 50, p.bump_sigma(), &mut rng).unwrap();
        assert_eq!(ts.points.len(), 100 + 9 * 50);
        for x in &ts.points {
            assert!(p.domain().contains(x));
        }
        // Gaussian draws concentrate on their own bump: at sigma = bump width,
        // most draws should see a solution value above exp(-9/2).
        let gauss = &ts.points[100..];
        let floor = (-4.5_f64).exp();
        let hits = gauss.iter().filter(|x| p.exact_solution(x) > floor).count();
        assert!(hits as f64 >= 0.99 * gauss.len() as f64, "{hits}/{}", gauss.len());
    }

    #[test]
    fn metrics_hand_case_and_identities() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        struct Fake(Vec<f64>);
        impl Field for Fake {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, x: &DVector<f64>) -> f64 {
                self.0[x[0] as usize]
            }
            fn gradient(&self, _: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(2)
            }
            fn laplacian(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
        }
        // u = (1,2,3) against u* = (1,1,1): e_r = sqrt(5/3), e_inf = 2.
        let test = TestSet {
            points: vec![
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![2.0, 0.0]),
            ],
            exact: vec![1.0, 1.0, 1.0],
        };
        let m = compute_metrics(&Fake(vec![1.0, 2.0, 3.0]), &test).unwrap();
        assert_relative_eq!(m.e_r, (5.0_f64 / 3.0).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(m.e_inf, 2.0, epsilon = 1e-14);

        // Exact field scores zero on a real test set.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ts = build_test_set(&p, 200, 100, p.bump_sigma(), &mut rng).unwrap();
        let m0 = compute_metrics(&p.exact_field(), &ts).unwrap();
        assert_eq!((m0.e_r, m0.e_inf), (0.0, 0.0));
    }

    #[test]
    fn metrics_scale_consistency() {
        let p = PoissonProblem::preset("poisson2d-1p").unwrap();
        struct Scaled<'a>(&'a PoissonProblem, f64);
        impl Field for Scaled<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn value(&self, x: &DVector<f64>) -> f64 {
                self.1 * self.0.exact_solution(x)
            }
            fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.exact_gradient(x) * self.1
            }
            fn laplacian(&self, x: &DVector<f64>) -> f64 {
                self.1 * self.0.exact_laplacian(x)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ts = build_test_set(&p, 100, 200, p.bump_sigma(), &mut rng).unwrap();
        for c in [0.5, 2.0, -1.0] {
            let m = compute_metrics(&Scaled(&p, c), &ts).unwrap();
            assert_relative_eq!(m.e_r, (c - 1.0_f64).abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_reference_is_rejected() {
        struct Zero;
        impl Field for Zero {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
            fn gradient(&self, _: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn laplacian(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
        }
        let test = TestSet { points: vec![DVector::zeros(1)], exact: vec![0.0] };
        assert!(matches!(compute_metrics(&Zero, &test), Err(CoreError::DegenerateReference)));
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(PoissonProblem::preset("poisson3d-42p"), Err(CoreError::UnknownPreset(_))));
    }
}
