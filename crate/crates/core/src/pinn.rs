//! Dense tanh network as a differentiable scalar field, with exact input
//! derivatives and exact parameter gradients of the discretized PDE loss.
//!
//! Input derivatives come from a per-input-dimension Taylor pass: alongside
//! the activations `a` each layer carries, for every input coordinate `j`,
//! the first- and second-derivative chains `da = d a/d x_j` and
//! `ga = d^2 a/d x_j^2`. The Laplacian is the sum of the `ga` outputs. The
//! tanh rules with `t = tanh(z)`, `s = 1 - t^2` are
//!
//! ```text
//! a  = t
//! da = s * dz
//! ga = s * gz - 2 t s dz^2
//! ```
//!
//! Parameter gradients of losses built from `value` and `laplacian` come from
//! reverse accumulation over that same computation, so differentiation
//! through the Laplacian is exact to rounding. Batch evaluations fan out over
//! fixed-size point chunks and are reduced in chunk order, which keeps full
//! runs bitwise reproducible regardless of thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::pde::PoissonProblem;

/// A scalar field with gradient and Laplacian, the quantities the Poisson
/// operator needs.
pub trait Field: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn laplacian(&self, x: &DVector<f64>) -> f64;
}

/// Fully connected tanh network with a scalar affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(CoreError::invalid("layer_sizes", "need at least input and output layers"));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(CoreError::invalid("layer_sizes", "all layer sizes must be positive"));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(CoreError::invalid("layer_sizes", "output layer must be scalar"));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<MlpParams> {
    validate_sizes(layer_sizes)?;
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for l in 0..layer_sizes.len() - 1 {
        let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)));
        biases.push(DVector::zeros(fan_out));
    }
    Ok(MlpParams { layer_sizes: layer_sizes.to_vec(), weights, biases })
}

impl MlpParams {
    pub fn from_parts(layer_sizes: Vec<usize>, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(CoreError::invalid("weights", "layer count mismatch"));
        }
        for l in 0..weights.len() {
            if weights[l].nrows() != layer_sizes[l + 1]
                || weights[l].ncols() != layer_sizes[l]
                || biases[l].len() != layer_sizes[l + 1]
            {
                return Err(CoreError::invalid("weights", format!("shape mismatch in layer {l}")));
            }
        }
        Ok(MlpParams { layer_sizes, weights, biases })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flattens to one vector, per layer weights (column-major) then bias.
    /// Round-trips bitwise with [`MlpParams::from_flat`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].as_slice());
            out.extend_from_slice(self.biases[l].as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn from_flat(layer_sizes: &[usize], flat: &DVector<f64>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for l in 0..layer_sizes.len() - 1 {
            let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
            if offset + rows * cols + rows > flat.len() {
                return Err(CoreError::invalid("flat", "too short for the layer sizes"));
            }
            weights.push(DMatrix::from_column_slice(rows, cols, &flat.as_slice()[offset..offset + rows * cols]));
            offset += rows * cols;
            biases.push(DVector::from_column_slice(&flat.as_slice()[offset..offset + rows]));
            offset += rows;
        }
        if offset != flat.len() {
            return Err(CoreError::invalid("flat", "length does not match the layer sizes"));
        }
        MlpParams::from_parts(layer_sizes.to_vec(), weights, biases)
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &DVector<f64>) -> f64 {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for l in 0..last {
            let mut z = &self.weights[l] * &a + &self.biases[l];
            z.apply(|v| *v = v.tanh());
            a = z;
        }
        (&self.weights[last] * &a + &self.biases[last])[0]
    }

    /// Value, input gradient, and Laplacian in one Taylor pass.
    pub fn input_derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, f64) {
        let d = self.input_dim();
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        let mut da = DMatrix::identity(d, d);
        let mut ga = DMatrix::zeros(d, d);
        for l in 0..last {
            let (na, nda, nga) = self.taylor_layer(l, &a, &da, &ga).into_activations();
            a = na;
            da = nda;
            ga = nga;
        }
        self.taylor_output(&a, &da, &ga)
    }

    /// Taylor pass that also records everything the reverse sweep needs.
    pub fn taylor_forward(&self, x: &DVector<f64>) -> TaylorTape {
        let d = self.input_dim();
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        let mut da = DMatrix::identity(d, d);
        let mut ga = DMatrix::zeros(d, d);
        let mut hidden = Vec::with_capacity(last);
        for l in 0..last {
            let trace = self.taylor_layer(l, &a, &da, &ga);
            a = trace.t.clone();
            da = trace.da_out.clone();
            ga = trace.ga_out.clone();
            hidden.push(trace);
        }
        let (value, gradient, laplacian) = self.taylor_output(&a, &da, &ga);
        TaylorTape { hidden, out_a: a, out_ga: ga, value, gradient, laplacian }
    }

    fn taylor_layer(&self, l: usize, a: &DVector<f64>, da: &DMatrix<f64>, ga: &DMatrix<f64>) -> LayerTrace {
        let d = da.ncols();
        let mut t = &self.weights[l] * a + &self.biases[l];
        let dz = &self.weights[l] * da;
        let gz = &self.weights[l] * ga;
        t.apply(|v| *v = v.tanh());
        let n = t.len();
        let s = DVector::from_fn(n, |i, _| 1.0 - t[i] * t[i]);
        let mut da_out = DMatrix::zeros(n, d);
        let mut ga_out = DMatrix::zeros(n, d);
        for j in 0..d {
            for i in 0..n {
                let dzv = dz[(i, j)];
                da_out[(i, j)] = s[i] * dzv;
                ga_out[(i, j)] = s[i] * gz[(i, j)] - 2.0 * t[i] * s[i] * dzv * dzv;
            }
        }
        LayerTrace { a_in: a.clone(), da_in: da.clone(), ga_in: ga.clone(), t, s, dz, gz, da_out, ga_out }
    }

    fn taylor_output(&self, a: &DVector<f64>, da: &DMatrix<f64>, ga: &DMatrix<f64>) -> (f64, DVector<f64>, f64) {
        let last = self.weights.len() - 1;
        let d = da.ncols();
        let value = (&self.weights[last] * a + &self.biases[last])[0];
        let du = &self.weights[last] * da;
        let gu = &self.weights[last] * ga;
        let gradient = DVector::from_fn(d, |j, _| du[(0, j)]);
        let laplacian = (0..d).map(|j| gu[(0, j)]).sum();
        (value, gradient, laplacian)
    }

    /// Reverse sweep over a recorded Taylor pass, accumulating the gradient
    /// of `w_value * value + w_laplacian * laplacian` with respect to the
    /// parameters.
    fn backprop_taylor(&self, tape: &TaylorTape, w_value: f64, w_laplacian: f64, acc: &mut GradAccumulator) {
        let last = self.weights.len() - 1;
        let d = self.input_dim();
        let w_out = &self.weights[last];
        let n_last = tape.out_a.len();

        // Output layer: u = W a + b, lap = sum_j (W ga)_j.
        {
            let gw = &mut acc.weights[last];
            for i in 0..n_last {
                let mut v = w_value * tape.out_a[i];
                if w_laplacian != 0.0 {
                    let mut sg = 0.0;
                    for j in 0..d {
                        sg += tape.out_ga[(i, j)];
                    }
                    v += w_laplacian * sg;
                }
                gw[(0, i)] += v;
            }
            acc.biases[last][0] += w_value;
        }
        let mut a_bar = DVector::from_fn(n_last, |i, _| w_value * w_out[(0, i)]);
        let mut da_bar = DMatrix::zeros(n_last, d);
        let mut ga_bar = DMatrix::from_fn(n_last, d, |i, _| w_laplacian * w_out[(0, i)]);

        for l in (0..last).rev() {
            let trace = &tape.hidden[l];
            let n = trace.t.len();
            // Adjoints through a = t, da = s dz, ga = s gz - 2 t s dz^2.
            let mut t_bar = a_bar;
            let mut s_bar = DVector::<f64>::zeros(n);
            let mut dz_bar = DMatrix::<f64>::zeros(n, d);
            let mut gz_bar = DMatrix::<f64>::zeros(n, d);
            for j in 0..d {
                for i in 0..n {
                    let dzv = trace.dz[(i, j)];
                    let e = dzv * dzv;
                    let dab = da_bar[(i, j)];
                    let gab = ga_bar[(i, j)];
                    s_bar[i] += dab * dzv + gab * (trace.gz[(i, j)] - 2.0 * trace.t[i] * e);
                    t_bar[i] -= 2.0 * trace.s[i] * e * gab;
                    dz_bar[(i, j)] = trace.s[i] * dab - 4.0 * trace.t[i] * trace.s[i] * dzv * gab;
                    gz_bar[(i, j)] = trace.s[i] * gab;
                }
            }
            // s = 1 - t^2 and t = tanh(z).
            let mut z_bar = DVector::<f64>::zeros(n);
            for i in 0..n {
                let tb = t_bar[i] - 2.0 * trace.t[i] * s_bar[i];
                z_bar[i] = trace.s[i] * tb;
            }
            let gw = &mut acc.weights[l];
            *gw += &z_bar * trace.a_in.transpose();
            *gw += &dz_bar * trace.da_in.transpose();
            *gw += &gz_bar * trace.ga_in.transpose();
            acc.biases[l] += &z_bar;

            let wt = self.weights[l].transpose();
            a_bar = &wt * &z_bar;
            da_bar = &wt * &dz_bar;
            ga_bar = &wt * &gz_bar;
        }
    }

    /// Forward pass recording activations only (for value-based terms).
    fn value_forward(&self, x: &DVector<f64>) -> ValueTape {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(last + 1);
        let mut slopes = Vec::with_capacity(last);
        let mut a = x.clone();
        for l in 0..last {
            let mut t = &self.weights[l] * &a + &self.biases[l];
            t.apply(|v| *v = v.tanh());
            let s = DVector::from_fn(t.len(), |i, _| 1.0 - t[i] * t[i]);
            acts.push(a);
            slopes.push(s);
            a = t;
        }
        let value = (&self.weights[last] * &a + &self.biases[last])[0];
        acts.push(a);
        ValueTape { acts, slopes, value }
    }

    /// Reverse sweep for `w * value`.
    fn backprop_value(&self, tape: &ValueTape, w: f64, acc: &mut GradAccumulator) {
        let last = self.weights.len() - 1;
        let a_last = &tape.acts[last];
        {
            let gw = &mut acc.weights[last];
            for i in 0..a_last.len() {
                gw[(0, i)] += w * a_last[i];
            }
            acc.biases[last][0] += w;
        }
        let mut a_bar = DVector::from_fn(a_last.len(), |i, _| w * self.weights[last][(0, i)]);
        for l in (0..last).rev() {
            let z_bar = DVector::from_fn(a_bar.len(), |i, _| a_bar[i] * tape.slopes[l][i]);
            acc.weights[l] += &z_bar * tape.acts[l].transpose();
            acc.biases[l] += &z_bar;
            a_bar = self.weights[l].transpose() * z_bar;
        }
    }
}

pub(crate) struct LayerTrace {
    a_in: DVector<f64>,
    da_in: DMatrix<f64>,
    ga_in: DMatrix<f64>,
    t: DVector<f64>,
    s: DVector<f64>,
    dz: DMatrix<f64>,
    gz: DMatrix<f64>,
    da_out: DMatrix<f64>,
    ga_out: DMatrix<f64>,
}

impl LayerTrace {
    fn into_activations(self) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.t, self.da_out, self.ga_out)
    }
}

/// Recorded Taylor pass for one point.
pub struct TaylorTape {
    hidden: Vec<LayerTrace>,
    out_a: DVector<f64>,
    out_ga: DMatrix<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub laplacian: f64,
}

struct ValueTape {
    acts: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
    value: f64,
}

/// Per-layer gradient accumulator mirroring the parameter shapes.
struct GradAccumulator {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

impl GradAccumulator {
    fn zeros_like(params: &MlpParams) -> Self {
        GradAccumulator {
            weights: params.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn add(&mut self, other: &GradAccumulator) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    fn into_flat(self, params: &MlpParams) -> DVector<f64> {
        let mut out = Vec::with_capacity(params.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].as_slice());
            out.extend_from_slice(self.biases[l].as_slice());
        }
        DVector::from_vec(out)
    }
}

impl Field for MlpParams {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.forward(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.input_derivatives(x).1
    }

    fn laplacian(&self, x: &DVector<f64>) -> f64 {
        self.input_derivatives(x).2
    }
}

/// Collocation sets and their weights for the discretized loss.
pub struct LossSpec<'a> {
    interior: &'a [DVector<f64>],
    boundary: &'a [DVector<f64>],
    interior_weights: Option<&'a [f64]>,
    boundary_weights: Option<&'a [f64]>,
    problem: &'a PoissonProblem,
}

impl<'a> LossSpec<'a> {
    /// Unit point weights. The boundary set may be empty; the interior set
    /// may not.
    pub fn new(
        interior: &'a [DVector<f64>],
        boundary: &'a [DVector<f64>],
        problem: &'a PoissonProblem,
    ) -> Result<Self> {
        Self::with_weights(interior, boundary, None, None, problem)
    }

    pub fn with_weights(
        interior: &'a [DVector<f64>],
        boundary: &'a [DVector<f64>],
        interior_weights: Option<&'a [f64]>,
        boundary_weights: Option<&'a [f64]>,
        problem: &'a PoissonProblem,
    ) -> Result<Self> {
        if interior.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        if let Some(w) = interior_weights {
            if w.len() != interior.len() {
                return Err(CoreError::DimensionMismatch { expected: interior.len(), got: w.len() });
            }
        }
        if let Some(w) = boundary_weights {
            if w.len() != boundary.len() {
                return Err(CoreError::DimensionMismatch { expected: boundary.len(), got: w.len() });
            }
        }
        for x in interior.iter().chain(boundary.iter()) {
            if x.len() != problem.dim() {
                return Err(CoreError::DimensionMismatch { expected: problem.dim(), got: x.len() });
            }
        }
        Ok(LossSpec { interior, boundary, interior_weights, boundary_weights, problem })
    }

    fn interior_weight(&self, i: usize) -> f64 {
        self.interior_weights.map_or(1.0, |w| w[i])
    }

    fn boundary_weight(&self, i: usize) -> f64 {
        self.boundary_weights.map_or(1.0, |w| w[i])
    }
}

const CHUNK: usize = 256;

/// Mean weighted squared interior residual plus mean weighted squared
/// boundary mismatch.
pub fn loss(params: &MlpParams, spec: &LossSpec) -> f64 {
    let n_in = spec.interior.len() as f64;
    let interior: f64 = spec
        .interior
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    let i = ci * CHUNK + k;
                    let (_, _, lap) = params.input_derivatives(x);
                    let r = -lap - spec.problem.source_term(x);
                    spec.interior_weight(i) * r * r
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        / n_in;

    let boundary = if spec.boundary.is_empty() {
        0.0
    } else {
        let n_b = spec.boundary.len() as f64;
        spec.boundary
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let i = ci * CHUNK + k;
                        let b = params.forward(x) - spec.problem.exact_solution(x);
                        spec.boundary_weight(i) * b * b
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
            / n_b
    };
    interior + boundary
}

/// Same discretized loss evaluated through the [`Field`] interface; the
/// closed-form oracle path.
pub fn loss_of_field(field: &dyn Field, spec: &LossSpec) -> f64 {
    let n_in = spec.interior.len() as f64;
    let mut total: f64 = spec
        .interior
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let r = spec.problem.interior_operator(field, x);
            spec.interior_weight(i) * r * r
        })
        .sum::<f64>()
        / n_in;
    if !spec.boundary.is_empty() {
        let n_b = spec.boundary.len() as f64;
        total += spec
            .boundary
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let b = field.value(x) - spec.problem.exact_solution(x);
                spec.boundary_weight(i) * b * b
            })
            .sum::<f64>()
            / n_b;
    }
    total
}

/// Loss and its exact parameter gradient in one pass.
pub fn loss_and_gradient(params: &MlpParams, spec: &LossSpec) -> (f64, DVector<f64>) {
    let n_in = spec.interior.len() as f64;
    let interior_parts: Vec<(f64, GradAccumulator)> = spec
        .interior
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = GradAccumulator::zeros_like(params);
            let mut part = 0.0;
            for (k, x) in chunk.iter().enumerate() {
                let i = ci * CHUNK + k;
                let w = spec.interior_weight(i);
                let tape = params.taylor_forward(x);
                let r = -tape.laplacian - spec.problem.source_term(x);
                part += w * r * r;
                // d/dtheta [w r^2 / N] with r = -lap - f.
                params.backprop_taylor(&tape, 0.0, -2.0 * w * r / n_in, &mut acc);
            }
            (part, acc)
        })
        .collect();

    let boundary_parts: Vec<(f64, GradAccumulator)> = spec
        .boundary
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = GradAccumulator::zeros_like(params);
            let mut part = 0.0;
            let n_b = spec.boundary.len() as f64;
            for (k, x) in chunk.iter().enumerate() {
                let i = ci * CHUNK + k;
                let w = spec.boundary_weight(i);
                let tape = params.value_forward(x);
                let b = tape.value - spec.problem.exact_solution(x);
                part += w * b * b;
                params.backprop_value(&tape, 2.0 * w * b / n_b, &mut acc);
            }
            (part, acc)
        })
        .collect();

    let mut total = 0.0;
    let mut acc = GradAccumulator::zeros_like(params);
    for (part, chunk_acc) in &interior_parts {
        total += part;
        acc.add(chunk_acc);
    }
    total /= n_in;
    if !spec.boundary.is_empty() {
        let n_b = spec.boundary.len() as f64;
        let mut bsum = 0.0;
        for (part, chunk_acc) in &boundary_parts {
            bsum += part;
            acc.add(chunk_acc);
        }
        total += bsum / n_b;
    }
    (total, acc.into_flat(params))
}

/// Gradient of [`loss`] with respect to the flattened parameters.
pub fn loss_gradient(params: &MlpParams, spec: &LossSpec) -> DVector<f64> {
    loss_and_gradient(params, spec).1
}

/// JSON shape header accompanying the raw little-endian parameter dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_sizes: Vec<usize>,
    pub param_count: usize,
    pub data: String,
}

/// Writes `<json_path>` and the flat f64 little-endian vector next to it
/// (same stem, `.bin` extension).
pub fn write_checkpoint(params: &MlpParams, json_path: &Path) -> Result<PathBuf> {
    let bin_path = json_path.with_extension("bin");
    let header = CheckpointHeader {
        layer_sizes: params.layer_sizes.clone(),
        param_count: params.param_count(),
        data: bin_path
            .file_name()
            .ok_or_else(|| CoreError::invalid("json_path", "has no file name"))?
            .to_string_lossy()
            .into_owned(),
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&header)?)?;
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin_path, bytes)?;
    Ok(bin_path)
}

pub fn read_checkpoint(json_path: &Path) -> Result<MlpParams> {
    let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let bin_path = json_path.parent().unwrap_or_else(|| Path::new(".")).join(&header.data);
    let bytes = std::fs::read(bin_path)?;
    if bytes.len() != header.param_count * 8 {
        return Err(CoreError::invalid("checkpoint", "binary size does not match the header"));
    }
    let flat = DVector::from_iterator(
        header.param_count,
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    );
    MlpParams::from_flat(&header.layer_sizes, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::pde::PoissonProblem;

    fn random_net(sizes: &[usize], seed: u64) -> MlpParams {
        init_params(sizes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn fd_gradient_laplacian(params: &MlpParams, x: &DVector<f64>, h: f64) -> (DVector<f64>, f64) {
        let d = x.len();
        let mut grad = DVector::zeros(d);
        let mut lap = 0.0;
        let u0 = params.forward(x);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (up, um) = (params.forward(&xp), params.forward(&xm));
            grad[j] = (up - um) / (2.0 * h);
            lap += (up - 2.0 * u0 + um) / (h * h);
        }
        (grad, lap)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let sizes = vec![2, 4, 1];
        let weights = vec![DMatrix::zeros(4, 2), DMatrix::zeros(1, 4)];
        let biases = vec![DVector::zeros(4), DVector::zeros(1)];
        let net = MlpParams::from_parts(sizes, weights, biases).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(net.forward(&x), 0.0);
        let (v, g, l) = net.input_derivatives(&x);
        assert_eq!((v, l), (0.0, 0.0));
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn tiny_identity_chain() {
        let net = MlpParams::from_parts(
            vec![1, 1, 1],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            vec![DVector::zeros(1), DVector::zeros(1)],
        )
        .unwrap();
        assert_eq!(net.forward(&DVector::from_vec(vec![0.0])), 0.0);
    }

    #[test]
    fn forward_matches_naive_matrix_evaluation() {
        let net = random_net(&[2, 4, 1], 17);
        let x = DVector::from_vec(vec![0.3, -0.2]);
        // Hand-rolled loops over the same parameters.
        let w0 = &net.weights[0];
        let w1 = &net.weights[1];
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut z = net.biases[0][i];
            for j in 0..2 {
                z += w0[(i, j)] * x[j];
            }
            h[i] = z.tanh();
        }
        let mut out = net.biases[1][0];
        for i in 0..4 {
            out += w1[(0, i)] * h[i];
        }
        assert_relative_eq!(net.forward(&x), out, epsilon = 1e-14);
    }

    #[test]
    fn value_is_bitwise_consistent_across_paths() {
        let net = random_net(&[3, 8, 8, 1], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let f = net.forward(&x);
            let (v, _, _) = net.input_derivatives(&x);
            let tape = net.taylor_forward(&x);
            assert_eq!(f.to_bits(), v.to_bits());
            assert_eq!(f.to_bits(), tape.value.to_bits());
        }
    }

    #[test]
    fn laplacian_of_scaled_tanh_matches_closed_form() {
        // u(x) = w * tanh(x): u'' = -2 w tanh(x) (1 - tanh(x)^2).
        let w = 0.8;
        let net = MlpParams::from_parts(
            vec![1, 1, 1],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, w)],
            vec![DVector::zeros(1), DVector::zeros(1)],
        )
        .unwrap();
        let x0 = 0.37;
        let (_, g, l) = net.input_derivatives(&DVector::from_vec(vec![x0]));
        let t = x0.tanh();
        let s = 1.0 - t * t;
        assert_relative_eq!(g[0], w * s, epsilon = 1e-12);
        assert_relative_eq!(l, -2.0 * w * t * s, epsilon = 1e-12);
    }

    #[test]
    fn input_derivatives_match_finite_differences() {
        let net = random_net(&[2, 8, 8, 1], 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-0.9..0.9));
            let (_, g, l) = net.input_derivatives(&x);
            let (g_fd, l_fd) = fd_gradient_laplacian(&net, &x, 1e-4);
            for j in 0..2 {
                assert_relative_eq!(g[j], g_fd[j], max_relative = 1e-5, epsilon = 1e-8);
            }
            assert_relative_eq!(l, l_fd, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let problem = PoissonProblem::preset("poisson2d-1p").unwrap();
        let net = random_net(&[2, 8, 8, 1], 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let interior: Vec<DVector<f64>> =
            (0..10).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-0.9..0.9))).collect();
        let boundary: Vec<DVector<f64>> = (0..4)
            .map(|_| {
                let mut x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                x[0] = 1.0;
                x
            })
            .collect();
        let spec = LossSpec::new(&interior, &boundary, &problem).unwrap();
        let (_, grad) = loss_and_gradient(&net, &spec);

        let sizes = net.layer_sizes().to_vec();
        let flat = net.flatten();
        let h = 1e-4;
        for idx in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let lp = loss(&MlpParams::from_flat(&sizes, &plus).unwrap(), &spec);
            let lm = loss(&MlpParams::from_flat(&sizes, &minus).unwrap(), &spec);
            let fd = (lp - lm) / (2.0 * h);
            if grad[idx].abs() > 1e-8 {
                assert_relative_eq!(grad[idx], fd, max_relative = 1e-4);
            } else {
                assert!(fd.abs() < 1e-6, "coordinate {idx}: grad {} vs fd {fd}", grad[idx]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_where_residuals_vanish() {
        // The one-peak source term is zero on the circle r^2 = d/(2K) around
        // the center, and the zero network has zero Laplacian, so every
        // interior residual vanishes there.
        let problem = PoissonProblem::preset("poisson2d-1p").unwrap();
        let sizes = vec![2, 6, 1];
        let net = MlpParams::from_parts(
            sizes,
            vec![DMatrix::zeros(6, 2), DMatrix::zeros(1, 6)],
            vec![DVector::zeros(6), DVector::zeros(1)],
        )
        .unwrap();
        let radius = (2.0 / (2.0 * 1000.0_f64)).sqrt();
        let interior: Vec<DVector<f64>> = (0..8)
            .map(|k| {
                let angle = k as f64 * std::f64::consts::PI / 4.0;
                DVector::from_vec(vec![0.5 + radius * angle.cos(), 0.5 + radius * angle.sin()])
            })
            .collect();
        let spec = LossSpec::new(&interior, &[], &problem).unwrap();
        let (l, grad) = loss_and_gradient(&net, &spec);
        assert!(l < 1e-20);
        assert!(grad.norm() < 1e-8, "gradient norm {}", grad.norm());
    }

    #[test]
    fn gradient_is_additive_over_interior_and_boundary() {
        let problem = PoissonProblem::preset("poisson2d-1p").unwrap();
        let net = random_net(&[2, 6, 1], 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let interior: Vec<DVector<f64>> =
            (0..6).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-0.9..0.9))).collect();
        let boundary: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_vec(vec![-1.0, rng.random_range(-1.0..1.0)]))
            .collect();
        let zeros = vec![0.0; interior.len()];

        let full = LossSpec::new(&interior, &boundary, &problem).unwrap();
        let interior_only = LossSpec::new(&interior, &[], &problem).unwrap();
        let boundary_only =
            LossSpec::with_weights(&interior, &boundary, Some(&zeros), None, &problem).unwrap();

        let g_full = loss_gradient(&net, &full);
        let g_int = loss_gradient(&net, &interior_only);
        let g_bnd = loss_gradient(&net, &boundary_only);
        assert_relative_eq!((g_full.clone() - (g_int + g_bnd)).norm(), 0.0, epsilon = 1e-12 * g_full.norm().max(1.0));
    }

    #[test]
    fn loss_hand_case_and_weight_linearity() {
        let problem = PoissonProblem::preset("poisson2d-1p").unwrap();
        let net = random_net(&[2, 4, 1], 51);
        let interior = vec![
            DVector::from_vec(vec![0.1, 0.2]),
            DVector::from_vec(vec![0.5, 0.45]),
            DVector::from_vec(vec![-0.3, 0.8]),
        ];
        let boundary = vec![DVector::from_vec(vec![1.0, 0.25]), DVector::from_vec(vec![-0.5, -1.0])];
        let spec = LossSpec::new(&interior, &boundary, &problem).unwrap();
        let l = loss(&net, &spec);

        // Independent scalar arithmetic from the two sub-operators.
        let mut expected = 0.0;
        for x in &interior {
            let r = -net.input_derivatives(x).2 - problem.source_term(x);
            expected += r * r / 3.0;
        }
        for x in &boundary {
            let b = net.forward(x) - problem.exact_solution(x);
            expected += b * b / 2.0;
        }
        assert_relative_eq!(l, expected, epsilon = 1e-12 * expected.abs().max(1.0));

        let w_in = vec![2.0; interior.len()];
        let w_b = vec![2.0; boundary.len()];
        let doubled =
            LossSpec::with_weights(&interior, &boundary, Some(&w_in), Some(&w_b), &problem).unwrap();
        assert_relative_eq!(loss(&net, &doubled), 2.0 * l, epsilon = 1e-12);
    }

    #[test]
    fn exact_solution_field_has_negligible_loss() {
        let problem = PoissonProblem::preset("poisson2d-1p").unwrap();
        let field = problem.exact_field();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let interior: Vec<DVector<f64>> = (0..50).map(|_| problem.domain().sample_uniform(&mut rng)).collect();
        let boundary = problem.sample_boundary(20, &mut rng);
        let spec = LossSpec::new(&interior, &boundary, &problem).unwrap();
        assert!(loss_of_field(&field, &spec) < 1e-8);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = random_net(&[2, 20, 20, 1], 9);
        let b = random_net(&[2, 20, 20, 1], 9);
        assert_eq!(a, b);
        for bias in &a.biases {
            assert_eq!(bias.iter().copied().fold(0.0_f64, |acc, v| acc + v.abs()), 0.0);
        }
    }

    #[test]
    fn init_variance_matches_glorot() {
        let net = random_net(&[20, 20, 1], 77);
        let w = &net.weights[0];
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 40.0;
        assert!((var - expected).abs() < 0.2 * expected, "var {var} vs {expected}");
    }

    #[test]
    fn flatten_round_trips_bitwise() {
        let net = random_net(&[3, 7, 5, 1], 99);
        let flat = net.flatten();
        let back = MlpParams::from_flat(net.layer_sizes(), &flat).unwrap();
        assert_eq!(net, back);
        assert_eq!(flat, back.flatten());
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = std::env::temp_dir().join(format!("aais-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let json = dir.join("checkpoint.json");
        let net = random_net(&[2, 5, 1], 123);
        write_checkpoint(&net, &json).unwrap();
        let back = read_checkpoint(&json).unwrap();
        assert_eq!(net, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
