//! Optimizers (Adam, L-BFGS with backtracking line search) and the
//! residual-driven resampling training loop.
//!
//! Training is full batch: one "epoch" is one gradient step over the current
//! dataset. Each resampling iteration keeps a uniformly chosen part of the
//! interior set, injects freshly proposed points so the dataset size stays
//! constant, refreshes every boundary point, and retrains.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::mixture::MixtureJson;
use crate::pde::{build_test_set, compute_metrics, PoissonProblem};
use crate::pinn::{init_params, loss, loss_and_gradient, loss_gradient, LossSpec, MlpParams};
use crate::samplers::{propose_points_detailed, SamplerSpec};
use crate::target::residual_target;

/// Bias-corrected Adam state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: DVector::zeros(n), v: DVector::zeros(n), t: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// One update of `theta` in place.
    pub fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    /// Number of curvature pairs kept.
    pub history: usize,
    /// Initial line-search step; the "learning rate" of the optimizer.
    pub step_init: f64,
    pub grad_tol: f64,
    pub max_backtracks: u32,
    pub armijo_c: f64,
}

impl LbfgsOptions {
    pub fn new(max_iters: usize, step_init: f64) -> Self {
        LbfgsOptions { max_iters, history: 10, step_init, grad_tol: 1e-10, max_backtracks: 20, armijo_c: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub theta: DVector<f64>,
    pub loss: f64,
    pub iterations: usize,
    /// Losses of the initial point and every accepted step (non-increasing).
    pub accepted_losses: Vec<f64>,
    /// True when a non-finite loss or gradient aborted the run; `theta` is
    /// then the best iterate seen so far.
    pub aborted_non_finite: bool,
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Two-loop recursion direction with `gamma = s'y / y'y` initial scaling.
fn two_loop(grad: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    let gamma = history.back().map_or(1.0, |(s, y, _)| s.dot(y) / y.dot(y));
    let mut r = q * gamma;
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&r);
        r += s * (a - b);
    }
    r
}

/// L-BFGS with Armijo backtracking. Stops on the iteration cap, a gradient
/// norm below `grad_tol`, or a failed line search; the returned loss never
/// exceeds the starting loss.
pub fn lbfgs_minimize<F, G>(mut loss_fn: F, mut grad_fn: G, theta0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut theta = theta0.clone();
    let mut f = loss_fn(&theta);
    let mut g = grad_fn(&theta);
    if !f.is_finite() || !all_finite(&g) {
        return LbfgsOutcome {
            theta: theta0,
            loss: f,
            iterations: 0,
            accepted_losses: vec![f],
            aborted_non_finite: true,
        };
    }
    let mut best = (theta.clone(), f);
    let mut accepted_losses = vec![f];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut iterations = 0;
    let mut aborted = false;

    if g.norm() >= opts.grad_tol {
        for _ in 0..opts.max_iters {
            iterations += 1;
            let mut direction = -two_loop(&g, &history);
            let mut slope = g.dot(&direction);
            if slope >= 0.0 {
                // Curvature information went bad; fall back to steepest descent.
                history.clear();
                direction = -g.clone();
                slope = -g.norm_squared();
                if slope == 0.0 {
                    break;
                }
            }
            let mut step = opts.step_init;
            let mut accepted = None;
            for _ in 0..=opts.max_backtracks {
                let candidate = &theta + &direction * step;
                let f_new = loss_fn(&candidate);
                if f_new.is_finite() && f_new <= f + opts.armijo_c * step * slope {
                    accepted = Some((candidate, f_new));
                    break;
                }
                step *= 0.5;
            }
            let Some((theta_new, f_new)) = accepted else {
                break;
            };
            let g_new = grad_fn(&theta_new);
            if !all_finite(&g_new) {
                aborted = true;
                break;
            }
            let s = &theta_new - &theta;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            if sy > 1e-10 * s.norm() * y.norm() {
                if history.len() == opts.history {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            theta = theta_new;
            f = f_new;
            g = g_new;
            accepted_losses.push(f);
            if f < best.1 {
                best = (theta.clone(), f);
            }
            if g.norm() < opts.grad_tol {
                break;
            }
        }
    }

    LbfgsOutcome { theta: best.0, loss: best.1, iterations, accepted_losses, aborted_non_finite: aborted }
}

/// All knobs of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n_interior: usize,
    pub n_boundary: usize,
    /// Points replaced by the sampler each iteration (N_D <= N_in).
    pub n_resample: usize,
    /// Resampling iterations after pretraining (M).
    pub max_iterations: usize,
    pub adam_epochs_pretrain: usize,
    pub opt_epochs_pretrain: usize,
    pub adam_epochs: usize,
    pub opt_epochs: usize,
    pub lr_adam: f64,
    pub lr_opt: f64,
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub interior_weight: f64,
    pub boundary_weight: f64,
    pub test_uniform: usize,
    pub test_gauss_per_peak: usize,
}

impl TrainConfig {
    pub fn new(sampler: SamplerSpec, seed: u64) -> Self {
        TrainConfig {
            n_interior: 2000,
            n_boundary: 500,
            n_resample: 500,
            max_iterations: 5,
            adam_epochs_pretrain: 500,
            opt_epochs_pretrain: 1000,
            adam_epochs: 500,
            opt_epochs: 1000,
            lr_adam: 1e-4,
            lr_opt: 0.3,
            sampler,
            seed,
            interior_weight: 1.0,
            boundary_weight: 1.0,
            test_uniform: 4000,
            test_gauss_per_peak: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_interior == 0 || self.n_boundary == 0 {
            return Err(CoreError::invalid("counts", "point counts must be positive"));
        }
        if self.n_resample > self.n_interior {
            return Err(CoreError::invalid("n_resample", "must not exceed n_interior"));
        }
        if self.max_iterations > 0 && self.n_resample == 0 {
            return Err(CoreError::invalid("n_resample", "must be positive when resampling"));
        }
        if !(self.interior_weight > 0.0) || !(self.boundary_weight > 0.0) {
            return Err(CoreError::invalid("weights", "collocation weights must be positive"));
        }
        if self.test_uniform + self.test_gauss_per_peak == 0 {
            return Err(CoreError::invalid("test", "test set must be nonempty"));
        }
        Ok(())
    }
}

/// One row of the run history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    /// 0 is the pretraining stage, then 1..=M.
    pub iteration: usize,
    pub loss: f64,
    pub e_r: f64,
    pub e_inf: f64,
    pub n_interior: usize,
    /// SHA-256 over the little-endian bytes of the current datasets.
    pub dataset_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proposal: Option<MixtureJson>,
    pub wall_time_s: f64,
}

/// Per-iteration records of one training run (`M + 1` entries).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub entries: Vec<RunEntry>,
}

impl RunRecord {
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(RunRecord { entries })
    }

    pub fn final_entry(&self) -> Option<&RunEntry> {
        self.entries.last()
    }
}

fn dataset_hash(interior: &[DVector<f64>], boundary: &[DVector<f64>]) -> String {
    let mut hasher = Sha256::new();
    for x in interior.iter().chain(boundary.iter()) {
        for v in x.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_params_finite(theta: &DVector<f64>, stage: &str) -> Result<()> {
    if all_finite(theta) {
        Ok(())
    } else {
        Err(CoreError::NonFinite { what: "parameters", stage: stage.to_string() })
    }
}

/// Adam epochs followed by L-BFGS epochs on a fixed dataset.
fn train_stage(
    params: &mut MlpParams,
    interior: &[DVector<f64>],
    boundary: &[DVector<f64>],
    problem: &PoissonProblem,
    cfg: &TrainConfig,
    adam_epochs: usize,
    opt_epochs: usize,
    stage: &str,
) -> Result<f64> {
    let w_in = vec![cfg.interior_weight; interior.len()];
    let w_b = vec![cfg.boundary_weight; boundary.len()];
    let spec = LossSpec::with_weights(interior, boundary, Some(&w_in), Some(&w_b), problem)?;
    let sizes = params.layer_sizes().to_vec();
    let mut theta = params.flatten();

    let mut adam = AdamState::new(theta.len());
    for _ in 0..adam_epochs {
        let p = MlpParams::from_flat(&sizes, &theta)?;
        let (_, grad) = loss_and_gradient(&p, &spec);
        adam.step(&mut theta, &grad, cfg.lr_adam);
        check_params_finite(&theta, stage)?;
    }

    if opt_epochs > 0 {
        let outcome = lbfgs_minimize(
            |t| loss(&MlpParams::from_flat(&sizes, t).expect("fixed sizes"), &spec),
            |t| loss_gradient(&MlpParams::from_flat(&sizes, t).expect("fixed sizes"), &spec),
            theta,
            &LbfgsOptions::new(opt_epochs, cfg.lr_opt),
        );
        theta = outcome.theta;
        check_params_finite(&theta, stage)?;
    }

    *params = MlpParams::from_flat(&sizes, &theta)?;
    Ok(loss(params, &spec))
}

/// The resampling training loop: uniform pretraining sets, then `M` rounds of
/// residual-driven point injection and retraining. Metrics are recorded after
/// pretraining and after every iteration.
pub fn resample_train<R: Rng + ?Sized>(
    problem: &PoissonProblem,
    net_sizes: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(MlpParams, RunRecord)> {
    cfg.validate()?;
    if net_sizes.first() != Some(&problem.dim()) {
        return Err(CoreError::DimensionMismatch {
            expected: problem.dim(),
            got: net_sizes.first().copied().unwrap_or(0),
        });
    }

    let mut params = init_params(net_sizes, rng)?;
    let test = build_test_set(problem, cfg.test_uniform, cfg.test_gauss_per_peak, problem.bump_sigma(), rng)?;
    let mut interior = problem.sample_interior(cfg.n_interior, rng);
    let mut boundary = problem.sample_boundary(cfg.n_boundary, rng);

    let mut entries = Vec::with_capacity(cfg.max_iterations + 1);
    let start = Instant::now();
    let loss_now = train_stage(
        &mut params,
        &interior,
        &boundary,
        problem,
        cfg,
        cfg.adam_epochs_pretrain,
        cfg.opt_epochs_pretrain,
        "pretrain",
    )?;
    let metrics = compute_metrics(&params, &test)?;
    entries.push(RunEntry {
        iteration: 0,
        loss: loss_now,
        e_r: metrics.e_r,
        e_inf: metrics.e_inf,
        n_interior: interior.len(),
        dataset_hash: dataset_hash(&interior, &boundary),
        proposal: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    });

    for iteration in 1..=cfg.max_iterations {
        let iter_start = Instant::now();
        let proposed = {
            let residual = residual_target(&params, problem)?;
            propose_points_detailed(&cfg.sampler, &residual, cfg.n_resample, rng)?
        };
        interior.shuffle(rng);
        interior.truncate(cfg.n_interior - cfg.n_resample);
        interior.extend(proposed.points.iter().cloned());
        boundary = problem.sample_boundary(cfg.n_boundary, rng);

        let loss_now = train_stage(
            &mut params,
            &interior,
            &boundary,
            problem,
            cfg,
            cfg.adam_epochs,
            cfg.opt_epochs,
            &format!("iteration {iteration}"),
        )?;
        let metrics = compute_metrics(&params, &test)?;
        entries.push(RunEntry {
            iteration,
            loss: loss_now,
            e_r: metrics.e_r,
            e_inf: metrics.e_inf,
            n_interior: interior.len(),
            dataset_hash: dataset_hash(&interior, &boundary),
            proposal: proposed.mixture.as_ref().map(|(m, _)| m.to_json()),
            wall_time_s: iter_start.elapsed().as_secs_f64(),
        });
    }

    Ok((params, RunRecord { entries }))
}
