//! Importance weights, effective sample size, responsibilities, and the
//! weighted EM update steps for Gaussian and Student-t mixtures.
//!
//! Weights are carried in log space; normalized weights and responsibilities
//! come out of max-shifted softmaxes so sharply peaked targets do not
//! overflow.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::mixture::{ComponentKind, MixtureComponent, MixtureModel};
use crate::numeric::normalize_log_weights;
use crate::target::{TargetDensity, LOG_DENSITY_FLOOR};

/// One importance-weighted point.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub point: DVector<f64>,
    /// Log of the raw importance weight `ln(Q(x)/q(x))`; `-inf` when the
    /// target vanishes at the point.
    pub log_weight: f64,
    /// Normalized weight; the batch sums to 1.
    pub weight: f64,
}

impl WeightedSample {
    /// Raw weight `Q(x)/q(x)` (may underflow or overflow when exponentiated;
    /// batch computations stay in log space).
    pub fn raw_weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// A batch of weighted samples with normalized weights.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pub samples: Vec<WeightedSample>,
    /// True when every raw weight was zero; normalized weights then fall back
    /// to uniform `1/N`.
    pub degenerate: bool,
}

impl WeightedBatch {
    /// Builds a batch from raw (linear-space) weights.
    pub fn from_raw(points: Vec<DVector<f64>>, raw: &[f64]) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        if points.len() != raw.len() {
            return Err(CoreError::DimensionMismatch { expected: points.len(), got: raw.len() });
        }
        for &w in raw {
            if !(w >= 0.0) {
                return Err(CoreError::invalid("raw", format!("negative or NaN weight {w}")));
            }
        }
        let logs: Vec<f64> = raw.iter().map(|&w| w.ln()).collect();
        Ok(Self::from_log_weights(points, logs))
    }

    pub(crate) fn from_log_weights(points: Vec<DVector<f64>>, logs: Vec<f64>) -> Self {
        let (weights, degenerate) = normalize_log_weights(&logs);
        let samples = points
            .into_iter()
            .zip(logs)
            .zip(weights)
            .map(|((point, log_weight), weight)| WeightedSample { point, log_weight, weight })
            .collect();
        WeightedBatch { samples, degenerate }
    }
}

/// Importance weights of `points` for `target` under `proposal`.
///
/// The proposal log-density is floored at [`LOG_DENSITY_FLOOR`], so points
/// where the proposal underflows get huge but finite weights.
pub fn importance_weights(
    target: &dyn TargetDensity,
    proposal: &MixtureModel,
    points: &[DVector<f64>],
) -> Result<WeightedBatch> {
    if points.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let logs: Vec<f64> = points
        .iter()
        .map(|x| target.log_density(x) - proposal.log_density(x).max(LOG_DENSITY_FLOOR))
        .collect();
    Ok(WeightedBatch::from_log_weights(points.to_vec(), logs))
}

/// Normalized effective sample size `(sum w)^2 / (N * sum w^2)` in `(0, 1]`.
///
/// Invariant under positive rescaling of the raw weights; equals 1 exactly
/// when all weights are equal.
pub fn ess(samples: &[WeightedSample]) -> Result<f64> {
    ess_from_log_weights(&samples.iter().map(|s| s.log_weight).collect::<Vec<_>>())
}

/// [`ess`] on bare log weights.
pub fn ess_from_log_weights(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(CoreError::DegenerateWeights);
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &l in log_weights {
        let v = (l - m).exp();
        s1 += v;
        s2 += v * v;
    }
    Ok(s1 * s1 / (log_weights.len() as f64 * s2))
}

/// Posterior component memberships: row `i` holds the probability that each
/// component generated point `i`.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    values: DMatrix<f64>,
}

impl Responsibilities {
    pub fn get(&self, point: usize, component: usize) -> f64 {
        self.values[(point, component)]
    }

    pub fn num_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.values.ncols()
    }
}

/// Membership posteriors `rho_m(x_i) = alpha_m f_m(x_i) / q(x_i)`, computed
/// row-wise in log space. A row where every component underflows falls back
/// to uniform.
pub fn responsibilities(model: &MixtureModel, points: &[DVector<f64>]) -> Responsibilities {
    let n = points.len();
    let mm = model.len();
    let mut values = DMatrix::zeros(n, mm);
    for (i, x) in points.iter().enumerate() {
        let logs = model.component_log_densities(x);
        let (row, _) = normalize_log_weights(&logs);
        for (m, r) in row.into_iter().enumerate() {
            values[(i, m)] = r;
        }
    }
    Responsibilities { values }
}

/// The Student-t reweighting factor `(v + d) / (v + (x-mu)' Sigma^{-1} (x-mu))`.
pub fn student_t_delta(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, dof: f64) -> Result<f64> {
    let comp = MixtureComponent::new(1.0, mean.clone(), cov.clone())?;
    Ok(delta_for_component(&comp, x, dof))
}

fn delta_for_component(comp: &MixtureComponent, x: &DVector<f64>, dof: f64) -> f64 {
    let d = comp.mean().len() as f64;
    (dof + d) / (dof + comp.mahalanobis_sq(x))
}

/// One weighted EM step for a Gaussian mixture.
pub fn em_step_gaussian(model: &MixtureModel, samples: &[WeightedSample]) -> Result<MixtureModel> {
    match model.kind() {
        ComponentKind::Gaussian => em_step_impl(model, samples, None),
        _ => Err(CoreError::invalid("model", "em_step_gaussian requires a Gaussian mixture")),
    }
}

/// One weighted EM step for a Student-t mixture (delta-reweighted moments).
pub fn em_step_student_t(model: &MixtureModel, samples: &[WeightedSample]) -> Result<MixtureModel> {
    match model.kind() {
        ComponentKind::StudentT { dof } => em_step_impl(model, samples, Some(dof)),
        _ => Err(CoreError::invalid("model", "em_step_student_t requires a Student-t mixture")),
    }
}

/// Dispatches on the mixture family.
pub fn em_step(model: &MixtureModel, samples: &[WeightedSample]) -> Result<MixtureModel> {
    match model.kind() {
        ComponentKind::Gaussian => em_step_gaussian(model, samples),
        ComponentKind::StudentT { .. } => em_step_student_t(model, samples),
    }
}

fn em_step_impl(model: &MixtureModel, samples: &[WeightedSample], dof: Option<f64>) -> Result<MixtureModel> {
    if samples.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let d = model.dim();
    let points: Vec<DVector<f64>> = samples.iter().map(|s| s.point.clone()).collect();
    let rho = responsibilities(model, &points);

    let mut new_components = Vec::with_capacity(model.len());
    for (m, comp) in model.components().iter().enumerate() {
        // wr_i = w_i * rho_im; the alpha update uses it bare, the moment
        // updates additionally carry the t-distribution delta factor.
        let wr: Vec<f64> = samples.iter().enumerate().map(|(i, s)| s.weight * rho.get(i, m)).collect();
        let alpha: f64 = wr.iter().sum();
        if alpha == 0.0 {
            // Starved component: keep parameters, zero the weight; the delete
            // step removes it.
            new_components.push(MixtureComponent::new(0.0, comp.mean().clone(), comp.cov().clone())?);
            continue;
        }
        let deltas: Option<Vec<f64>> =
            dof.map(|v| points.iter().map(|x| delta_for_component(comp, x, v)).collect());

        let (mean_num, mean_den) = {
            let mut num = DVector::zeros(d);
            let mut den = 0.0;
            for (i, x) in points.iter().enumerate() {
                let factor = wr[i] * deltas.as_ref().map_or(1.0, |dl| dl[i]);
                num += x * factor;
                den += factor;
            }
            (num, den)
        };
        if den_is_unusable(mean_den) {
            new_components.push(MixtureComponent::new(0.0, comp.mean().clone(), comp.cov().clone())?);
            continue;
        }
        let mean = mean_num / mean_den;

        let mut cov = DMatrix::zeros(d, d);
        for (i, x) in points.iter().enumerate() {
            let factor = wr[i] * deltas.as_ref().map_or(1.0, |dl| dl[i]);
            let diff = x - &mean;
            cov += &diff * diff.transpose() * factor;
        }
        cov /= alpha;
        new_components.push(MixtureComponent::new(alpha, mean, cov)?);
    }

    // Renormalize; responsibilities and weights each sum to one, so the total
    // is already 1 up to rounding.
    let total: f64 = new_components.iter().map(|c| c.weight()).sum();
    if total <= 0.0 {
        return Err(CoreError::DegenerateWeights);
    }
    let renormalized = new_components
        .into_iter()
        .map(|c| MixtureComponent::new(c.weight() / total, c.mean().clone(), c.cov().clone()))
        .collect::<Result<Vec<_>>>()?;
    MixtureModel::new(model.kind(), renormalized)
}

fn den_is_unusable(den: f64) -> bool {
    !(den > 0.0) || !den.is_finite()
}
