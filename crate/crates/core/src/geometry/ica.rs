//! Symmetric fixed-point FastICA with the logcosh contrast (a = 1).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{canonical_sign, excess_kurtosis, sorted_eigen, whiten};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcaConfig {
    pub max_iterations: usize,
    pub random_state: u64,
    pub rescale_factor: f64,
    pub convergence_tolerance: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            random_state: 42,
            rescale_factor: 100.0,
            convergence_tolerance: 1e-6,
        }
    }
}

impl IcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.rescale_factor > 0.0) || !(self.convergence_tolerance > 0.0) {
            return Err(Error::invalid(format!("invalid ICA config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaOutcome {
    /// `n x d` sources, sorted by excess kurtosis (descending), sign-canonical,
    /// multiplied by the rescale factor.
    pub sources: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final fixed-point change `max_j | |<w_j', w_j>| - 1 |`.
    pub final_change: f64,
}

/// `(W W^T)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigen(&(w * w.transpose()));
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("ICA unmixing matrix became singular".into()));
    }
    let inv_sqrt = DVector::from_iterator(values.len(), values.iter().map(|v| 1.0 / v.sqrt()));
    Ok(&vectors * DMatrix::from_diagonal(&inv_sqrt) * vectors.transpose() * w)
}

/// Whiten, run parallel FastICA, then order, sign-fix and rescale components.
/// Non-convergence is reported through [`IcaOutcome::converged`]; the iterate
/// with the smallest fixed-point change is returned.
pub fn ica_transform(x: &DMatrix<f64>, config: &IcaConfig) -> Result<IcaOutcome> {
    config.validate()?;
    let z = whiten(x)?;
    let (n, d) = (z.nrows(), z.ncols());
    let nf = n as f64;

    let mut rng = rng_from_seed(config.random_state);
    let init = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let mut best = (f64::INFINITY, w.clone());
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iterations {
        iterations = it + 1;
        // projections: n x d, column j = Z w_j
        let proj = &z * w.transpose();
        let g = proj.map(f64::tanh);
        let g_prime_mean = DVector::from_iterator(
            d,
            g.column_iter().map(|c| c.iter().map(|v| 1.0 - v * v).sum::<f64>() / nf),
        );
        let mut next = (g.transpose() * &z) / nf;
        for j in 0..d {
            let scale = g_prime_mean[j];
            let row = w.row(j) * scale;
            let mut target = next.row_mut(j);
            target -= row;
        }
        let next = symmetric_decorrelation(&next)?;
        let change = (0..d)
            .map(|j| (next.row(j).dot(&w.row(j)).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < best.0 {
            best = (change, w.clone());
        }
        if change < config.convergence_tolerance {
            converged = true;
            break;
        }
    }
    let (final_change, w) = if converged { (best.0, w) } else { best };
    if !converged {
        log::warn!(
            "FastICA did not converge in {} iterations (change {final_change:.3e})",
            config.max_iterations
        );
    }

    let raw = &z * w.transpose();
    let kurt = excess_kurtosis(&raw);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| kurt[b].total_cmp(&kurt[a]).then(a.cmp(&b)));
    let mut sources = DMatrix::zeros(n, d);
    for (k, &j) in order.iter().enumerate() {
        let mut col: Vec<f64> = raw.column(j).iter().copied().collect();
        canonical_sign(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            sources[(i, k)] = v * config.rescale_factor;
        }
    }
    Ok(IcaOutcome {
        sources,
        converged,
        iterations,
        final_change,
    })
}
