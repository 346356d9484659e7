//! The three collocation-point proposal strategies behind one interface:
//! uniform draws, residual-proportional categorical selection (RAD), and the
//! annealed adaptive importance sampler.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::aais::{run_aais, AaisConfig, AaisTrace};
use crate::error::{CoreError, Result};
use crate::mixture::MixtureModel;
use crate::numeric::normalize_log_weights;
use crate::target::{BoxDomain, TargetDensity};

/// Which proposal strategy to use.
#[derive(Debug, Clone)]
pub enum SamplerSpec {
    Uniform,
    /// Categorical selection among `n_search` uniform candidates, weighted by
    /// the target density.
    Rad { n_search: usize },
    Aais(AaisConfig),
}

/// Points plus whatever the strategy learned along the way.
#[derive(Debug, Clone)]
pub struct ProposedPoints {
    pub points: Vec<DVector<f64>>,
    /// Fitted mixture and trace, for the AAIS variant.
    pub mixture: Option<(MixtureModel, AaisTrace)>,
    /// True when RAD saw a flat-zero target and fell back to a uniform subset.
    pub rad_degenerate: bool,
}

/// Selection probabilities `p_i = Q(x_i) / sum_j Q(x_j)` from log densities.
/// All-zero densities fall back to uniform with the flag set.
pub fn rad_probabilities(target: &dyn TargetDensity, points: &[DVector<f64>]) -> (Vec<f64>, bool) {
    let logs: Vec<f64> = points.iter().map(|x| target.log_density(x)).collect();
    normalize_log_weights(&logs)
}

/// Weighted sampling without replacement via exponential keys
/// (`ln(u_i) / w_i`, top-k). Zero-weight items are only picked once every
/// positive weight is exhausted.
pub(crate) fn sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    debug_assert!(k <= weights.len());
    let keys: Vec<f64> = weights
        .iter()
        .map(|&w| {
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Uniform choice of `k` indices without replacement (partial Fisher-Yates).
fn uniform_without_replacement<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.partial_shuffle(rng, k);
    indices.truncate(k);
    indices
}

/// Rejection-samples `n` points of a mixture that land strictly inside the
/// domain; errors once `100 * n` draws have been spent.
pub fn sample_within_domain<R: Rng + ?Sized>(
    mixture: &MixtureModel,
    domain: &BoxDomain,
    n: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let cap = 100 * n;
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0;
    while points.len() < n {
        if attempts >= cap {
            return Err(CoreError::ProposalOutsideDomain { attempts });
        }
        attempts += 1;
        let x = mixture.sample(1, rng).pop().expect("one draw requested");
        if domain.contains(&x) {
            points.push(x);
        }
    }
    Ok(points)
}

/// Proposes `n_points` collocation points for the target density.
pub fn propose_points<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    target: &dyn TargetDensity,
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    propose_points_detailed(spec, target, n_points, rng).map(|p| p.points)
}

/// [`propose_points`] keeping the fitted proposal (AAIS) and fallback flags.
pub fn propose_points_detailed<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    target: &dyn TargetDensity,
    n_points: usize,
    rng: &mut R,
) -> Result<ProposedPoints> {
    if n_points == 0 {
        return Err(CoreError::invalid("n_points", "must be positive"));
    }
    let domain = target.domain();
    match spec {
        SamplerSpec::Uniform => {
            let points = (0..n_points).map(|_| domain.sample_uniform(rng)).collect();
            Ok(ProposedPoints { points, mixture: None, rad_degenerate: false })
        }
        SamplerSpec::Rad { n_search } => {
            if *n_search < n_points {
                return Err(CoreError::invalid("n_search", "must be at least the number of requested points"));
            }
            let candidates: Vec<DVector<f64>> = (0..*n_search).map(|_| domain.sample_uniform(rng)).collect();
            let (probs, degenerate) = rad_probabilities(target, &candidates);
            let chosen = if degenerate {
                uniform_without_replacement(candidates.len(), n_points, rng)
            } else {
                sample_without_replacement(&probs, n_points, rng)
            };
            let points = chosen.into_iter().map(|i| candidates[i].clone()).collect();
            Ok(ProposedPoints { points, mixture: None, rad_degenerate: degenerate })
        }
        SamplerSpec::Aais(cfg) => {
            let (mixture, trace) = run_aais(target, cfg, rng)?;
            let points = sample_within_domain(&mixture, domain, n_points, rng)?;
            Ok(ProposedPoints { points, mixture: Some((mixture, trace)), rad_degenerate: false })
        }
    }
}
