//! Differentiable layer primitives with hand-written backward passes, and
//! a central-finite-difference gradient checker.
//!
//! The pipeline is a fixed composition of linear layers, ReLU and row
//! softmax, so reverse mode is implemented per layer instead of through a
//! general tape: each forward has a matching `*_backward` that consumes
//! the upstream gradient and produces exact gradients for its inputs.
//! Everything is `f64`; the gradient checker is the reason.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

/// Floor applied inside logarithms of probabilities so early training
/// cannot produce infinities. Entries at or below the floor contribute a
/// constant to the loss and therefore zero gradient.
pub const PROB_FLOOR: f64 = 1e-12;

/// `x W + b` with the bias row broadcast over rows of `x`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "bias is {}x{}, expected 1x{}",
            b.rows(),
            b.cols(),
            w.cols()
        )));
    }
    let mut out = x.matmul(w)?;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (o, &bv) in row.iter_mut().zip(b.row(0)) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Gradients of a linear layer w.r.t. its input, weight and bias.
pub struct LinearGrads {
    pub wrt_input: Tensor2,
    pub wrt_weight: Tensor2,
    pub wrt_bias: Tensor2,
}

pub fn linear_backward(x: &Tensor2, w: &Tensor2, d_out: &Tensor2) -> Result<LinearGrads> {
    if d_out.rows() != x.rows() || d_out.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            d_out.rows(),
            d_out.cols(),
            x.rows(),
            w.cols()
        )));
    }
    let wrt_weight = x.matmul_at_b(d_out)?;
    let mut wrt_bias = Tensor2::zeros(1, w.cols());
    for i in 0..d_out.rows() {
        for (acc, &g) in wrt_bias.row_mut(0).iter_mut().zip(d_out.row(i)) {
            *acc += g;
        }
    }
    let wrt_input = d_out.matmul_a_bt(w)?;
    Ok(LinearGrads {
        wrt_input,
        wrt_weight,
        wrt_bias,
    })
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward of ReLU given the pre-activation values; the subgradient at
/// exactly zero is taken as zero.
pub fn relu_backward(pre: &Tensor2, d_out: &Tensor2) -> Tensor2 {
    debug_assert_eq!(pre.rows(), d_out.rows());
    debug_assert_eq!(pre.cols(), d_out.cols());
    let mut out = d_out.clone();
    for (g, &z) in out.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction for stability. Each
/// output row is nonnegative and sums to 1.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of row softmax: given probabilities `p` and upstream `d_p`,
/// the gradient w.r.t. the logits is `p .* (d_p - rowdot(d_p, p))`.
pub fn softmax_rows_backward(probs: &Tensor2, d_probs: &Tensor2) -> Tensor2 {
    debug_assert_eq!(probs.rows(), d_probs.rows());
    debug_assert_eq!(probs.cols(), d_probs.cols());
    let mut out = Tensor2::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let d = d_probs.row(i);
        let dot: f64 = p.iter().zip(d).map(|(&pv, &dv)| pv * dv).sum();
        for (o, (&pv, &dv)) in out.row_mut(i).iter_mut().zip(p.iter().zip(d)) {
            *o = pv * (dv - dot);
        }
    }
    out
}

/// Squared Euclidean distance between two equal-length rows.
pub fn squared_row_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Xavier-uniform initialization: entries drawn from
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized by construction")
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst relative error seen in each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Checks analytic gradients against central finite differences.
///
/// `loss_fn` must evaluate the loss for the current parameter values and
/// accumulate analytic gradients into the store's gradient buffers. It has
/// to be deterministic given the parameters: any discrete choice (row
/// selections, pair labels) must be frozen by the caller before checking.
///
/// Every scalar parameter is perturbed by `+/-eps` and the relative error
/// `|g - fd| / max(1e-6, |g| + |fd|)` is recorded; the floor sits above
/// the roundoff noise of the central difference itself, so gradients that
/// are structurally zero compare as zero instead of as noise ratios. On
/// return the gradient buffers hold the analytic gradients of the
/// unperturbed parameters.
pub fn grad_check<F>(params: &mut ParamStore, mut loss_fn: F, eps: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&mut ParamStore) -> f64,
{
    params.zero_grads();
    let _ = loss_fn(params);
    let names: Vec<String> = params.names().map(String::from).collect();
    let analytic: BTreeMap<String, Tensor2> = names
        .iter()
        .map(|n| (n.clone(), params.grad(n).clone()))
        .collect();

    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for name in &names {
        let len = params.value(name).len();
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = params.value(name).data()[i];
            params.value_mut(name).data_mut()[i] = orig + eps;
            let plus = loss_fn(params);
            params.value_mut(name).data_mut()[i] = orig - eps;
            let minus = loss_fn(params);
            params.value_mut(name).data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic[name].data()[i];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(name.clone(), worst);
    }

    // leave the store holding the analytic gradients at the original point
    params.zero_grads();
    for (name, grad) in &analytic {
        params.accumulate(name, grad, 1.0).expect("same shapes");
    }
    GradCheckReport {
        per_param,
        max_rel_err,
        tol,
    }
}
