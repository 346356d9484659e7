//! Finite mixtures of multivariate Gaussian or Student-t components:
//! construction, log-density evaluation, and sampling.
//!
//! Covariances are kept together with their cached lower Cholesky factor so
//! densities and draws never re-factorize. Student-t components use the
//! scale-matrix parameterization (the stored matrix is *not* the covariance
//! `v/(v-2)*Sigma`), which is what the weighted EM updates produce.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{CoreError, Result};
use crate::numeric::log_sum_exp;

const LN_2PI: f64 = 1.837877066409345483560659472811; // ln(2*pi)

/// Component family of a mixture. Student-t carries a fixed degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentKind {
    Gaussian,
    StudentT { dof: f64 },
}

impl ComponentKind {
    /// Student-t kind with validated degrees of freedom (`dof > 2` so the
    /// covariance is finite).
    pub fn student_t(dof: f64) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(CoreError::invalid("dof", format!("must be > 2, got {dof}")));
        }
        Ok(ComponentKind::StudentT { dof })
    }
}

/// Cholesky factorization with diagonal jitter retries.
///
/// Jitter is `1e-8 * trace/d` escalated by 10x per retry (3 retries); an
/// absolute floor of `1e-8` covers fully collapsed covariances whose trace
/// is zero. Returns the (possibly jittered) matrix together with its lower
/// factor so callers store a consistent pair.
pub(crate) fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = cov.nrows();
    if let Some(chol) = nalgebra::Cholesky::new(cov.clone()) {
        return Ok((cov.clone(), chol.unpack()));
    }
    let base = (cov.trace() / d as f64).max(1.0);
    let mut jitter = 1e-8 * base;
    for _ in 0..3 {
        let jittered = cov + DMatrix::identity(d, d) * jitter;
        if let Some(chol) = nalgebra::Cholesky::new(jittered.clone()) {
            return Ok((jittered, chol.unpack()));
        }
        jitter *= 10.0;
    }
    Err(CoreError::CovarianceNotSpd)
}

fn check_symmetric(cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() {
        return Err(CoreError::invalid("cov", "matrix is not square"));
    }
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                return Err(CoreError::invalid("cov", format!("asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// One weighted mixture component with cached Cholesky factor of its
/// covariance / scale matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl MixtureComponent {
    /// Builds a component, factorizing the covariance (with jitter retries).
    /// Weight zero is allowed transiently: EM can starve a component, which
    /// the delete step then drops.
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(CoreError::invalid("weight", format!("must be finite and >= 0, got {weight}")));
        }
        if cov.nrows() != mean.len() {
            return Err(CoreError::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        check_symmetric(&cov)?;
        let (cov, chol) = cholesky_with_jitter(&cov)?;
        Ok(MixtureComponent { weight, mean, cov, chol })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub(crate) fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Squared Mahalanobis distance via a triangular solve against the
    /// cached factor.
    pub(crate) fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self.chol.solve_lower_triangular(&diff).expect("cholesky factor is nonsingular");
        y.dot(&y)
    }

    fn log_det_half(&self) -> f64 {
        (0..self.chol.nrows()).map(|i| self.chol[(i, i)].ln()).sum()
    }

    /// Log-density of this component under the given family.
    pub fn log_pdf(&self, kind: ComponentKind, x: &DVector<f64>) -> f64 {
        let d = self.mean.len() as f64;
        let m2 = self.mahalanobis_sq(x);
        match kind {
            ComponentKind::Gaussian => -0.5 * d * LN_2PI - self.log_det_half() - 0.5 * m2,
            ComponentKind::StudentT { dof } => {
                ln_gamma(0.5 * (dof + d))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * d * (dof * std::f64::consts::PI).ln()
                    - self.log_det_half()
                    - 0.5 * (dof + d) * (1.0 + m2 / dof).ln()
            }
        }
    }

    /// One draw: `mu + L z` for Gaussian, `mu + L z sqrt(v/w)` with
    /// `w ~ ChiSquared(v)` for Student-t. The normal vector is drawn before
    /// the chi-square so the stream layout is fixed.
    pub fn sample<R: Rng + ?Sized>(&self, kind: ComponentKind, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &self.mean + &self.chol * z;
        if let ComponentKind::StudentT { dof } = kind {
            let w: f64 = ChiSquared::new(dof).expect("dof validated").sample(rng);
            let scale = (dof / w).sqrt();
            x = &self.mean + (&x - &self.mean) * scale;
        }
        x
    }
}

/// Log-density of a single Gaussian or Student-t component; factorizes the
/// covariance on the spot (jitter retries included).
pub fn component_log_pdf(
    kind: ComponentKind,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(CoreError::DimensionMismatch { expected: mean.len(), got: x.len() });
    }
    let comp = MixtureComponent::new(1.0, mean.clone(), cov.clone())?;
    Ok(comp.log_pdf(kind, x))
}

/// A finite mixture with a shared component family.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    kind: ComponentKind,
    dim: usize,
    components: Vec<MixtureComponent>,
}

impl MixtureModel {
    /// Validates weights (sum to 1 within 1e-12, at least one positive) and
    /// consistent dimensions.
    pub fn new(kind: ComponentKind, components: Vec<MixtureComponent>) -> Result<Self> {
        let dim = components.first().ok_or(CoreError::EmptyBatch)?.mean.len();
        for c in &components {
            if c.mean.len() != dim {
                return Err(CoreError::DimensionMismatch { expected: dim, got: c.mean.len() });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::invalid("weights", format!("sum to {total}, expected 1")));
        }
        if !components.iter().any(|c| c.weight > 0.0) {
            return Err(CoreError::invalid("weights", "all component weights are zero"));
        }
        Ok(MixtureModel { kind, dim, components })
    }

    /// Single-component mixture with weight 1.
    pub fn single(kind: ComponentKind, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let comp = MixtureComponent::new(1.0, mean, cov)?;
        Self::new(kind, vec![comp])
    }

    pub fn kind(&self) -> ComponentKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Per-component joint log-densities `ln(alpha_m) + ln f_m(x)`.
    pub fn component_log_densities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                if c.weight > 0.0 {
                    c.weight.ln() + c.log_pdf(self.kind, x)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Mixture log-density, evaluated with a max-shifted log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Mixture density `sum_m alpha_m f_m(x)`.
    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }

    /// Draws `n` points; each draw picks a component by weight, then samples
    /// it. Deterministic for a fixed RNG state.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut chosen = self.components.len() - 1;
                for (m, c) in self.components.iter().enumerate() {
                    cum += c.weight;
                    if u < cum {
                        chosen = m;
                        break;
                    }
                }
                self.components[chosen].sample(self.kind, rng)
            })
            .collect()
    }

    pub fn to_json(&self) -> MixtureJson {
        MixtureJson::from(self)
    }

    pub fn from_json(json: &MixtureJson) -> Result<Self> {
        json.to_model()
    }
}

/// Serialization schema: `{kind, dof?, dim, components: [{weight, mean, cov}]}`
/// with `cov` flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureJson {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
    pub dim: usize,
    pub components: Vec<ComponentJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentJson {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl From<&MixtureModel> for MixtureJson {
    fn from(model: &MixtureModel) -> Self {
        let (kind, dof) = match model.kind {
            ComponentKind::Gaussian => ("gaussian".to_string(), None),
            ComponentKind::StudentT { dof } => ("student-t".to_string(), Some(dof)),
        };
        let d = model.dim;
        let components = model
            .components
            .iter()
            .map(|c| ComponentJson {
                weight: c.weight,
                mean: c.mean.iter().copied().collect(),
                cov: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| c.cov[(i, j)]).collect(),
            })
            .collect();
        MixtureJson { kind, dof, dim: d, components }
    }
}

impl MixtureJson {
    pub fn to_model(&self) -> Result<MixtureModel> {
        let kind = match self.kind.as_str() {
            "gaussian" => ComponentKind::Gaussian,
            "student-t" => {
                let dof = self.dof.ok_or_else(|| CoreError::invalid("dof", "required for student-t"))?;
                ComponentKind::student_t(dof)?
            }
            other => return Err(CoreError::invalid("kind", format!("unknown kind `{other}`"))),
        };
        let d = self.dim;
        let components = self
            .components
            .iter()
            .map(|c| {
                if c.mean.len() != d || c.cov.len() != d * d {
                    return Err(CoreError::DimensionMismatch { expected: d, got: c.mean.len() });
                }
                let mean = DVector::from_vec(c.mean.clone());
                let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i * d + j]);
                MixtureComponent::new(c.weight, mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(kind, components)
    }
}
