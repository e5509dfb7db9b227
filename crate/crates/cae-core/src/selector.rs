//! The concrete selector layer: k nodes, each holding a strictly positive
//! d-dimensional weight vector alpha. In training a node outputs the stochastic
//! convex combination x.m with m = softmax((log alpha + gumbel)/T); at test
//! time it outputs the single argmax feature.

use crate::error::{CaeError, Result};
use crate::nn::argmax;
use crate::numcore::{sample_gumbel, softmax, Matrix, Rng};

/// k x d matrix of strictly positive selector weights (row i belongs to node i).
#[derive(Clone, Debug)]
pub struct SelectorParams {
    pub alpha: Matrix,
}

impl SelectorParams {
    pub fn k(&self) -> usize {
        self.alpha.rows()
    }

    pub fn d(&self) -> usize {
        self.alpha.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 1 || self.d() < self.k() {
            return Err(CaeError::Parameter(format!(
                "selector needs 1 <= k <= d, got k={} d={}",
                self.k(),
                self.d()
            )));
        }
        if !self.alpha.data().iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(CaeError::Parameter(
                "selector weights must be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Exponential decay T(b) = t0 * (tb/t0)^(b/total_epochs), held at tb afterwards.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub tb: f64,
    pub total_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(t0: f64, tb: f64, total_epochs: usize) -> Result<AnnealSchedule> {
        if !(tb > 0.0 && t0 >= tb && t0.is_finite()) {
            return Err(CaeError::Parameter(format!(
                "annealing needs t0 >= tb > 0, got t0={} tb={}",
                t0, tb
            )));
        }
        if total_epochs < 1 {
            return Err(CaeError::Parameter(
                "annealing needs at least 1 epoch".into(),
            ));
        }
        Ok(AnnealSchedule {
            t0,
            tb,
            total_epochs,
        })
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        let b = epoch.min(self.total_epochs) as f64;
        self.t0 * (self.tb / self.t0).powf(b / self.total_epochs as f64)
    }
}

/// One concrete sample per node (k simplex rows) plus the Gumbel noise that
/// produced it, retained for backprop.
#[derive(Clone, Debug)]
pub struct ConcreteSampleBatch {
    pub m: Matrix,
    pub gumbel: Matrix,
    pub temperature: f64,
}

/// Selector weights initialized i.i.d. uniform in [1e-3, 1e-2].
pub fn init_alpha(k: usize, d: usize, rng: &mut Rng) -> Result<SelectorParams> {
    if k < 1 || k > d {
        return Err(CaeError::Parameter(format!(
            "selector needs 1 <= k <= d, got k={} d={}",
            k, d
        )));
    }
    let alpha = Matrix::from_fn(k, d, |_, _| {
        1e-3 + 9e-3 * crate::numcore::sample_uniform(rng)
    });
    Ok(SelectorParams { alpha })
}

/// Draw one concrete sample per node: row i = softmax((log alpha_i + g_i)/T)
/// with fresh i.i.d. Gumbel noise g_i.
pub fn concrete_sample(
    params: &SelectorParams,
    t: f64,
    rng: &mut Rng,
) -> Result<ConcreteSampleBatch> {
    let gumbel = Matrix::from_fn(params.k(), params.d(), |_, _| sample_gumbel(rng));
    concrete_sample_with_noise(params, t, gumbel)
}

/// Same as `concrete_sample` but with caller-supplied noise (frozen-noise
/// gradient checks, forced-zero-noise tests).
pub fn concrete_sample_with_noise(
    params: &SelectorParams,
    t: f64,
    gumbel: Matrix,
) -> Result<ConcreteSampleBatch> {
    if gumbel.rows() != params.k() || gumbel.cols() != params.d() {
        return Err(CaeError::Shape(format!(
            "noise is {}x{}, selector is {}x{}",
            gumbel.rows(),
            gumbel.cols(),
            params.k(),
            params.d()
        )));
    }
    let mut m = Matrix::zeros(params.k(), params.d());
    let mut logits = vec![0.0; params.d()];
    for i in 0..params.k() {
        let a = params.alpha.row(i);
        let g = gumbel.row(i);
        for j in 0..params.d() {
            logits[j] = a[j].ln() + g[j];
        }
        m.row_mut(i).copy_from_slice(&softmax(&logits, t)?);
    }
    Ok(ConcreteSampleBatch {
        m,
        gumbel,
        temperature: t,
    })
}

/// Training-mode forward pass: column i of the output is X . m_i, i.e. X m^T.
pub fn selector_forward_train(x: &Matrix, sample: &ConcreteSampleBatch) -> Result<Matrix> {
    if x.cols() != sample.m.cols() {
        return Err(CaeError::Shape(format!(
            "input has {} features, selector has {}",
            x.cols(),
            sample.m.cols()
        )));
    }
    x.matmul(&sample.m.transpose())
}

/// Argmax feature index per node; ties break to the lowest index. Duplicates
/// across nodes are allowed.
pub fn selected_indices(params: &SelectorParams) -> Vec<usize> {
    (0..params.k())
        .map(|i| argmax(params.alpha.row(i)))
        .collect()
}

/// Test-mode forward pass: node i outputs the single feature argmax_j alpha_ij.
/// Returns the n x k matrix and the selected indices.
pub fn selector_forward_test(x: &Matrix, params: &SelectorParams) -> Result<(Matrix, Vec<usize>)> {
    if x.cols() != params.d() {
        return Err(CaeError::Shape(format!(
            "input has {} features, selector has {}",
            x.cols(),
            params.d()
        )));
    }
    let idx = selected_indices(params);
    Ok((x.select_cols(&idx)?, idx))
}

/// Gradients of the training-mode forward pass.
pub struct SelectorBackward {
    pub d_alpha: Matrix,
    pub d_x: Matrix,
}

/// Exact chain rule through softmax((log alpha + g)/T) and the dot products.
/// `upstream` is the loss gradient w.r.t. the n x k selector output.
pub fn selector_backward(
    params: &SelectorParams,
    x: &Matrix,
    sample: &ConcreteSampleBatch,
    upstream: &Matrix,
) -> Result<SelectorBackward> {
    let (k, d) = (sample.m.rows(), sample.m.cols());
    if upstream.rows() != x.rows() || upstream.cols() != k || x.cols() != d {
        return Err(CaeError::Shape(format!(
            "backward shapes disagree: x {}x{}, m {}x{}, upstream {}x{}",
            x.rows(),
            x.cols(),
            k,
            d,
            upstream.rows(),
            upstream.cols()
        )));
    }
    if params.alpha.rows() != k || params.alpha.cols() != d {
        return Err(CaeError::Shape(format!(
            "alpha is {}x{}, sample is {}x{}",
            params.alpha.rows(),
            params.alpha.cols(),
            k,
            d
        )));
    }
    // dL/dM = upstream^T X, then the softmax Jacobian per row, then
    // d(logit)/d(alpha) = 1/(T * alpha).
    let d_m = upstream.transpose().matmul(x)?;
    let mut d_alpha = Matrix::zeros(k, d);
    for i in 0..k {
        let m = sample.m.row(i);
        let dm = d_m.row(i);
        let a = params.alpha.row(i);
        let dot: f64 = dm.iter().zip(m).map(|(u, v)| u * v).sum();
        let out = d_alpha.row_mut(i);
        for j in 0..d {
            out[j] = (dm[j] - dot) * m[j] / (sample.temperature * a[j]);
        }
    }
    let d_x = upstream.matmul(&sample.m)?;
    Ok(SelectorBackward { d_alpha, d_x })
}

/// Average over `n_samples` fresh concrete draws and over the k nodes of the
/// largest entry of each sample row; the training stop statistic.
pub fn mean_max_probability(
    params: &SelectorParams,
    t: f64,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<f64> {
    if n_samples < 1 {
        return Err(CaeError::Parameter("need at least one sample".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_samples {
        let sample = concrete_sample(params, t, rng)?;
        total += mean_max_of(&sample.m);
    }
    Ok(total / n_samples as f64)
}

/// Mean over rows of the row maximum (the per-batch convergence statistic).
pub fn mean_max_of(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        s += m.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    s / m.rows() as f64
}

/// Per node, the `top_t` feature indices with the largest alpha, descending;
/// ties break to the lower index.
pub fn feature_groups(params: &SelectorParams, top_t: usize) -> Result<Vec<Vec<usize>>> {
    if top_t > params.d() {
        return Err(CaeError::Parameter(format!(
            "top_t {} exceeds feature count {}",
            top_t,
            params.d()
        )));
    }
    let mut groups = Vec::with_capacity(params.k());
    for i in 0..params.k() {
        let row = params.alpha.row(i);
        let mut idx: Vec<usize> = (0..params.d()).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(top_t);
        groups.push(idx);
    }
    Ok(groups)
}
