//! Geometry of entry-embedding matrices (rows are entries, columns are axes).

mod ica;

pub use ica::{ica_transform, IcaConfig, IcaOutcome};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Ridge added to covariance eigenvalues before inversion.
pub const RIDGE: f64 = 1e-8;

const MAX_COSINE_PAIRS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    SvdRaw,
    PcaWhitened,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub mean_pairwise_cosine: f64,
    pub covariance_condition_number: f64,
    pub top2_variance_ratio: f64,
    pub is_centered: bool,
    /// Excess kurtosis of each axis; a numeric stand-in for visual protrusions.
    pub axis_excess_kurtosis: Vec<f64>,
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "matrix element ({}, {})",
            i % x.nrows(),
            i / x.nrows()
        ))),
        None => Ok(()),
    }
}

/// Subtract column means.
pub fn center(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(x)?;
    if x.nrows() < 2 {
        return Err(Error::invalid("centering needs at least two rows"));
    }
    let means = column_means(x);
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    Ok(out)
}

/// Sample covariance (denominator n - 1) of an already centered matrix.
pub fn covariance_of_centered(xc: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xc.nrows() as f64;
    (xc.transpose() * xc) / (n - 1.0)
}

pub fn covariance(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(covariance_of_centered(&center(x)?))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// descending and each eigenvector's largest-magnitude component positive.
pub fn sorted_eigen(sym: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(sym.nrows(), order.len());
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        canonical_sign(v.as_mut_slice());
        vectors.set_column(k, &v);
    }
    (values, vectors)
}

/// Flip `v` so that its largest-magnitude element is positive.
pub(crate) fn canonical_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, x) } else { best });
    if pivot.1 < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// ZCA whitening: centered data multiplied by `(C + εI)^{-1/2}`, so the output
/// covariance is the identity (up to the ridge) and the orientation is kept.
/// Directions with zero variance stay (numerically) zero.
pub fn whiten(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xc = center(x)?;
    let cov = covariance_of_centered(&xc);
    let (values, vectors) = sorted_eigen(&cov);
    let top = values[0];
    let bottom = values[values.len() - 1];
    // the ridge absorbs rank deficiency; only an empty or broken spectrum is fatal
    if !(top > 0.0) || !top.is_finite() || !(bottom + RIDGE > 0.0) {
        return Err(Error::Numeric(format!(
            "covariance is degenerate (eigenvalues {:.3e} .. {:.3e})",
            values[values.len() - 1],
            values[0]
        )));
    }
    let inv_sqrt = DVector::from_iterator(values.len(), values.iter().map(|&l| 1.0 / (l + RIDGE).sqrt()));
    let transform = &vectors * DMatrix::from_diagonal(&inv_sqrt) * vectors.transpose();
    Ok(xc * transform)
}

/// Coordinates on the two leading axes: right singular vectors of the raw
/// matrix (`SvdRaw`), or unit-variance principal components (`PcaWhitened`).
pub fn top2_projection(x: &DMatrix<f64>, mode: ProjectionMode) -> Result<DMatrix<f64>> {
    if x.ncols() < 2 {
        return Err(Error::invalid("projection needs at least two columns"));
    }
    check_finite(x)?;
    let (base, gram) = match mode {
        ProjectionMode::SvdRaw => (x.clone(), x.transpose() * x),
        ProjectionMode::PcaWhitened => {
            let xc = center(x)?;
            let cov = covariance_of_centered(&xc);
            (xc, cov)
        }
    };
    let (values, vectors) = sorted_eigen(&gram);
    let tol = values[0].abs() * 1e-12 * (x.nrows().max(x.ncols()) as f64);
    if !(values[0] > 0.0) || values[1] <= tol {
        return Err(Error::Numeric("matrix has rank < 2".into()));
    }
    let mut out = base * vectors.columns(0, 2);
    if mode == ProjectionMode::PcaWhitened {
        for k in 0..2 {
            let s = values[k].sqrt();
            out.column_mut(k).iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// Excess kurtosis of each column (population moments).
pub fn excess_kurtosis(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let m2 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m4 = c.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            if m2 > 0.0 {
                m4 / (m2 * m2) - 3.0
            } else {
                0.0
            }
        })
        .collect()
}

fn cosine_rows(x: &DMatrix<f64>, norms: &[f64], i: usize, j: usize) -> Option<f64> {
    if norms[i] == 0.0 || norms[j] == 0.0 {
        return None;
    }
    let dot = x.row(i).dot(&x.row(j));
    Some((dot / (norms[i] * norms[j])).clamp(-1.0, 1.0))
}

/// Anisotropy diagnostics. All pairs are used for the mean cosine when there
/// are at most 10^6 of them; otherwise 10^6 pairs are drawn with `seed`.
pub fn anisotropy_report(x: &DMatrix<f64>, seed: u64) -> Result<GeometryReport> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("anisotropy report needs at least two rows"));
    }
    let norms: Vec<f64> = x.row_iter().map(|r| r.norm()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    let n_pairs = n * (n - 1) / 2;
    if n_pairs <= MAX_COSINE_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                if let Some(c) = cosine_rows(x, &norms, i, j) {
                    total += c;
                    count += 1;
                }
            }
        }
    } else {
        let mut rng = rng_from_seed(seed);
        while count < MAX_COSINE_PAIRS {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            match cosine_rows(x, &norms, i, j) {
                Some(c) => {
                    total += c;
                    count += 1;
                }
                None => {
                    if norms.iter().all(|&v| v == 0.0) {
                        break;
                    }
                }
            }
        }
    }
    let mean_pairwise_cosine = if count == 0 { 0.0 } else { total / count as f64 };

    let cov = covariance(x)?;
    let (values, _) = sorted_eigen(&cov);
    let clamped: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let covariance_condition_number =
        ((clamped[0] + RIDGE) / (clamped[clamped.len() - 1] + RIDGE)).max(1.0);
    let mass: f64 = clamped.iter().sum();
    let top2_variance_ratio = if mass > 0.0 {
        (clamped.iter().take(2).sum::<f64>() / mass).min(1.0)
    } else {
        1.0
    };
    let means = column_means(x);
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let is_centered = means.iter().all(|m| m.abs() <= 1e-10 * scale);
    Ok(GeometryReport {
        mean_pairwise_cosine,
        covariance_condition_number,
        top2_variance_ratio,
        is_centered,
        axis_excess_kurtosis: excess_kurtosis(x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn centering_cases() {
        let xc = center(&gaussian(6, 3, 1)).unwrap();
        assert!(max_abs_diff(&center(&xc).unwrap(), &xc) < 1e-12);

        let same = DMatrix::from_fn(4, 3, |_, j| j as f64 + 0.5);
        assert!(center(&same).unwrap().iter().all(|&v| v == 0.0));

        let x = gaussian(5, 3, 2);
        let c = center(&x).unwrap();
        for col in c.column_iter() {
            let mean = col.iter().sum::<f64>() / 5.0;
            assert!(mean.abs() <= 1e-12);
        }
        assert!(center(&gaussian(1, 3, 3)).is_err());
    }

    #[test]
    fn whitening_cases() {
        let identity_err = |m: &DMatrix<f64>| {
            let c = covariance(m).unwrap();
            max_abs_diff(&c, &DMatrix::identity(c.nrows(), c.ncols()))
        };
        let white = whiten(&gaussian(400, 3, 4)).unwrap();
        assert!(identity_err(&white) < 1e-6);
        assert!(identity_err(&whiten(&white).unwrap()) < 1e-6);

        // covariance diag(4, 1) built by scaling a white sample
        let mut scaled = white.clone();
        scaled.column_mut(0).iter_mut().for_each(|v| *v *= 2.0);
        assert!(identity_err(&whiten(&scaled).unwrap()) < 1e-6);

        // rho = 0.9 via a Cholesky factor
        let z = gaussian(500, 2, 5);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.9, (1.0f64 - 0.81).sqrt()]);
        let correlated = &z * l.transpose();
        let w = whiten(&correlated).unwrap();
        assert!(covariance(&w).unwrap()[(0, 1)].abs() <= 1e-6);
    }

    #[test]
    fn whitening_is_idempotent() {
        let once = whiten(&gaussian(300, 4, 6)).unwrap();
        let twice = whiten(&once).unwrap();
        assert!(max_abs_diff(&once, &twice) <= 1e-5);
    }

    #[test]
    fn whitening_rejects_degenerate_covariance() {
        let same = DMatrix::from_fn(10, 3, |_, j| j as f64);
        assert!(matches!(whiten(&same), Err(Error::Numeric(_))));
        let mut broken = DMatrix::from_fn(10, 3, |i, j| (i * (j + 1)) as f64);
        broken[(0, 0)] = f64::NAN;
        assert!(whiten(&broken).is_err());
        // a constant column is absorbed by the ridge
        let x = DMatrix::from_fn(10, 3, |i, j| if j == 2 { 1.0 } else { ((i * (j + 3)) % 7) as f64 });
        let w = whiten(&x).unwrap();
        assert!(w.column(2).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn projection_of_planar_data_is_exact() {
        let x = gaussian(50, 2, 7);
        let p = top2_projection(&x, ProjectionMode::SvdRaw).unwrap();
        // p = X V with V orthogonal, so the Gram matrices agree
        let gram_x = &x * x.transpose();
        let gram_p = &p * p.transpose();
        assert!(max_abs_diff(&gram_x, &gram_p) < 1e-9);
    }

    #[test]
    fn pca_whitened_columns_have_unit_variance() {
        let x = gaussian(200, 5, 8) * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1.0, 0.5, 0.1]));
        let p = top2_projection(&x, ProjectionMode::PcaWhitened).unwrap();
        let c = covariance(&p).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((c[(1, 1)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn projection_rejects_rank_one() {
        let x = DMatrix::from_fn(10, 3, |i, j| (i as f64 + 1.0) * (j as f64 + 1.0));
        assert!(top2_projection(&x, ProjectionMode::SvdRaw).is_err());
    }

    #[test]
    fn svd_projection_keeps_the_largest_directions() {
        let x = gaussian(100, 6, 9) * DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 3.0, 0.5, 0.2, 2.0]));
        let p = top2_projection(&x, ProjectionMode::SvdRaw).unwrap();
        let captured = p.norm_squared();
        let (values, _) = sorted_eigen(&(x.transpose() * &x));
        assert!((captured - values[0] - values[1]).abs() < 1e-6 * captured);
        for k in 2..values.len() {
            assert!(values[k] <= values[1] + 1e-9);
        }
    }

    #[test]
    fn isotropic_sample_top2_ratio() {
        let r = anisotropy_report(&gaussian(2000, 8, 10), 0).unwrap();
        assert!((r.top2_variance_ratio - 0.25).abs() < 0.05, "{}", r.top2_variance_ratio);
    }

    #[test]
    fn report_cases() {
        let same = DMatrix::from_fn(5, 3, |_, j| j as f64 + 1.0);
        assert!((anisotropy_report(&same, 0).unwrap().mean_pairwise_cosine - 1.0).abs() < 1e-12);

        let n = 1000;
        let alt = DMatrix::from_fn(n, 3, |i, j| if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 });
        let r = anisotropy_report(&alt, 0).unwrap();
        assert!(r.mean_pairwise_cosine.abs() < 0.01);

        let w = whiten(&gaussian(300, 5, 11)).unwrap();
        let r = anisotropy_report(&w, 0).unwrap();
        assert!(r.covariance_condition_number <= 1.0 + 1e-4);
        assert!(r.is_centered);
        assert!((-1.0..=1.0).contains(&r.mean_pairwise_cosine));
    }

    #[test]
    fn geometry_is_pure() {
        let x = gaussian(80, 4, 12);
        assert_eq!(whiten(&x).unwrap(), whiten(&x).unwrap());
        assert_eq!(
            top2_projection(&x, ProjectionMode::PcaWhitened).unwrap(),
            top2_projection(&x, ProjectionMode::PcaWhitened).unwrap()
        );
        assert_eq!(anisotropy_report(&x, 3).unwrap(), anisotropy_report(&x, 3).unwrap());
    }
}
