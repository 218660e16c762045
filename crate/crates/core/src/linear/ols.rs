use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of a QR pivot below which a column counts as dependent.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Classical,
    Clustered,
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    pub column_names: Vec<String>,
    /// (X'X)^{-1}, kept for sandwich estimators.
    pub bread: DMatrix<f64>,
}

impl OlsFit {
    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn predict(&self, design: &DMatrix<f64>) -> Result<DVector<f64>> {
        if design.ncols() != self.coefficients.len() {
            return Err(Error::Dimension(format!(
                "design has {} columns, fit has {}",
                design.ncols(),
                self.coefficients.len()
            )));
        }
        Ok(design * &self.coefficients)
    }

    /// Replaces the covariance with the entity-clustered sandwich.
    pub fn with_clustered_covariance(mut self, design: &DMatrix<f64>, clusters: &ClusterSpec) -> Result<Self> {
        self.covariance = clustered_covariance(&self, design, clusters)?;
        self.covariance_kind = CovarianceKind::Clustered;
        Ok(self)
    }
}

/// Least squares through a Householder QR factorization.
///
/// Fails with the indices of columns that lie in the span of earlier ones
/// when the design is rank deficient.
pub fn ols_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    ols_fit_named(design, y, (0..design.ncols()).map(|j| format!("x{j}")).collect())
}

pub fn ols_fit_named(design: &DMatrix<f64>, y: &DVector<f64>, column_names: Vec<String>) -> Result<OlsFit> {
    let (n, p) = design.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, outcome {}", y.len())));
    }
    if column_names.len() != p {
        return Err(Error::Dimension("one name per design column required".into()));
    }
    if p > n {
        return Err(Error::InvalidArgument(format!("{p} columns exceed {n} rows")));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("design has no columns".into()));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| design.column(j).norm()).fold(0.0, f64::max);
    let dependent: Vec<usize> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOL * scale.max(f64::MIN_POSITIVE))
        .collect();
    if !dependent.is_empty() {
        return Err(Error::RankDeficient { columns: dependent });
    }
    let q = qr.q();
    let qty = q.tr_mul(y);
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient { columns: vec![] })?;
    let residuals = y - design * &coefficients;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient { columns: vec![] })?;
    let bread = &r_inv * r_inv.transpose();
    let dof = (n - p).max(1) as f64;
    let sigma2 = residuals.norm_squared() / dof;
    let covariance = &bread * sigma2;
    Ok(OlsFit {
        coefficients,
        residuals,
        covariance,
        covariance_kind: CovarianceKind::Classical,
        column_names,
        bread,
    })
}

/// Cluster label per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub labels: Vec<usize>,
}

impl ClusterSpec {
    pub fn new(labels: Vec<usize>) -> Self {
        ClusterSpec { labels }
    }

    pub fn n_clusters(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// Cluster-robust sandwich B (sum_c X_c'u_c u_c'X_c) B with small-sample
/// factor G/(G-1) * (N-1)/(N-p).
pub fn clustered_covariance(fit: &OlsFit, design: &DMatrix<f64>, clusters: &ClusterSpec) -> Result<DMatrix<f64>> {
    let (n, p) = design.shape();
    if clusters.labels.len() != n || fit.residuals.len() != n || fit.coefficients.len() != p {
        return Err(Error::Dimension("design, residuals and cluster labels disagree in size".into()));
    }
    let mut ids = clusters.labels.clone();
    ids.sort_unstable();
    ids.dedup();
    let g = ids.len();
    if g < 2 {
        return Err(Error::InvalidArgument("clustered covariance needs at least 2 clusters".into()));
    }
    let mut scores = DMatrix::<f64>::zeros(g, p);
    for i in 0..n {
        let c = ids.binary_search(&clusters.labels[i]).expect("label present");
        let u = fit.residuals[i];
        for j in 0..p {
            scores[(c, j)] += design[(i, j)] * u;
        }
    }
    let meat = scores.tr_mul(&scores);
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n - p).max(1) as f64);
    let mut v = &fit.bread * meat * &fit.bread * factor;
    // Symmetrize round-off.
    let vt = v.transpose();
    v = (v + vt) * 0.5;
    Ok(v)
}
