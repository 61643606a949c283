//! Shared-covariance Gaussian discriminant analysis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fusion::LogitModel;
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::softmax;

/// Linear discriminants δ_c(z) = m_cᵀ G z − ½ m_cᵀ G m_c + log p_c with
/// G = Σ̂⁻¹ and uniform class priors.
#[derive(Debug, Clone, PartialEq)]
pub struct GdaClassifier {
    means: Vec<DVector<f64>>,
    precision: DMatrix<f64>,
    log_prior: f64,
    /// G m_c, one row per class.
    linear: DMatrix<f64>,
    /// −½ m_cᵀ G m_c + log p_c
    bias: DVector<f64>,
}

/// Fits a GDA head. The covariance is inflated by `ridge · tr(Σ̂)/d · I`
/// before inversion by Cholesky.
pub fn gda_fit(means: &[DVector<f64>], covariance: &DMatrix<f64>, ridge: f64) -> Result<GdaClassifier> {
    let d = covariance.nrows();
    if covariance.ncols() != d || d == 0 {
        return Err(Error::DimensionMismatch("covariance must be square and non-empty".into()));
    }
    if means.is_empty() {
        return Err(Error::Validation("GDA needs at least one class".into()));
    }
    if let Some((c, m)) = means.iter().enumerate().find(|(_, m)| m.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "mean of class {c} has dimension {}, covariance is {d}x{d}",
            m.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidParameter(format!("ridge must be non-negative, got {ridge}")));
    }
    if covariance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance has non-finite entries".into()));
    }
    let mut reg = symmetrize(covariance);
    let shift = ridge * reg.trace() / d as f64;
    for i in 0..d {
        reg[(i, i)] += shift;
    }
    let chol = reg.clone().cholesky().ok_or_else(|| Error::SingularCovariance {
        min_eigenvalue: min_eigenvalue(&reg),
    })?;
    let precision = symmetrize(&chol.inverse());

    let c = means.len();
    let log_prior = -(c as f64).ln();
    let mut linear = DMatrix::zeros(c, d);
    let mut bias = DVector::zeros(c);
    for (k, m) in means.iter().enumerate() {
        let gm = &precision * m;
        bias[k] = -0.5 * m.dot(&gm) + log_prior;
        linear.set_row(k, &gm.transpose());
    }
    Ok(GdaClassifier {
        means: means.to_vec(),
        precision,
        log_prior,
        linear,
        bias,
    })
}

impl GdaClassifier {
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    /// The discriminants δ_c(z).
    pub fn discriminants(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has dimension {}, classifier expects {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GDA input".into()));
        }
        let z = DVector::from_column_slice(z);
        Ok((&self.linear * z + &self.bias).iter().cloned().collect())
    }

    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.discriminants(z)?))
    }
}

impl LogitModel for GdaClassifier {
    fn num_classes(&self) -> usize {
        self.means.len()
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.discriminants(z)
    }
}
