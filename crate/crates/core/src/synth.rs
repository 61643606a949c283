//! Synthetic shared-covariance Gaussian mixtures with known ground truth,
//! plus matching prompt banks, for desk-scale verification.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::embedding::{EmbeddingDataset, PromptBank};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSpec {
    /// One mean per class.
    Explicit(Vec<Vec<f64>>),
    /// Means drawn i.i.d. from N(0, scale² I).
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// σ² I
    Isotropic(f64),
    /// Row-major d×d matrix.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub clients: usize,
    pub means: MeanSpec,
    pub covariance: CovarianceSpec,
    pub per_class: usize,
    pub seed: u64,
}

/// The generating parameters (w_1..w_C, Σ).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub means: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pooled: EmbeddingDataset,
    /// The pooled rows dealt class-by-class round-robin over the clients.
    pub clients: Vec<EmbeddingDataset>,
    pub truth: GroundTruth,
}

/// Square root factor L with L Lᵀ = Σ for a PSD Σ.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(cov).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-12 {
        return Err(Error::InvalidParameter(format!(
            "covariance is not PSD (smallest eigenvalue {min:e})"
        )));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    let (c, d) = (cfg.num_classes, cfg.dim);
    if c == 0 || d == 0 || cfg.clients == 0 {
        return Err(Error::InvalidParameter("classes, dimension and clients must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let covariance = match &cfg.covariance {
        CovarianceSpec::Isotropic(v) => {
            if *v < 0.0 {
                return Err(Error::InvalidParameter(format!("variance must be non-negative, got {v}")));
            }
            DMatrix::identity(d, d) * *v
        }
        CovarianceSpec::Explicit(vals) => {
            if vals.len() != d * d {
                return Err(Error::DimensionMismatch(format!("covariance needs {} entries", d * d)));
            }
            DMatrix::from_row_slice(d, d, vals)
        }
    };
    let factor = psd_factor(&covariance)?;
    let means = match &cfg.means {
        MeanSpec::Explicit(ms) => {
            if ms.len() != c || ms.iter().any(|m| m.len() != d) {
                return Err(Error::DimensionMismatch(format!("need {c} means of length {d}")));
            }
            ms.iter().map(|m| DVector::from_column_slice(m)).collect()
        }
        MeanSpec::Random { scale } => (0..c).map(|_| gaussian_vec(&mut rng, d) * *scale).collect::<Vec<_>>(),
    };

    let mut labels = Vec::with_capacity(c * cfg.per_class);
    let mut vectors = Vec::with_capacity(c * cfg.per_class * d);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let z = mean + &factor * gaussian_vec(&mut rng, d);
            labels.push(k as u32);
            vectors.extend(z.iter().map(|&v| v as f32));
        }
    }
    let pooled = EmbeddingDataset::new(d, c, labels, vectors, false)?;

    let mut client_rows = vec![Vec::new(); cfg.clients];
    for k in 0..c {
        for j in 0..cfg.per_class {
            client_rows[j % cfg.clients].push(k * cfg.per_class + j);
        }
    }
    let clients = client_rows.iter().map(|rows| pooled.subset(rows)).collect();
    Ok(SynthOutput {
        pooled,
        clients,
        truth: GroundTruth { means, covariance },
    })
}

impl GroundTruth {
    /// Bayes-optimal label under equal priors.
    pub fn bayes_predict(&self, z: &DVector<f64>) -> usize {
        let prec = self
            .covariance
            .clone()
            .try_inverse()
            .expect("ground-truth covariance is invertible");
        let scores: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let diff = z - m;
                -(diff.transpose() * &prec * &diff)[(0, 0)]
            })
            .collect();
        crate::argmax(&scores)
    }

    /// Φ(Δ/2) for two classes, Δ the Mahalanobis distance between the means.
    pub fn two_class_bayes_accuracy(&self) -> Result<f64> {
        if self.means.len() != 2 {
            return Err(Error::InvalidParameter("closed form needs exactly two classes".into()));
        }
        let prec = self
            .covariance
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCovariance { min_eigenvalue: 0.0 })?;
        let diff = &self.means[0] - &self.means[1];
        let delta = (diff.transpose() * prec * &diff)[(0, 0)].sqrt();
        Ok(Normal::new(0.0, 1.0).unwrap().cdf(delta / 2.0))
    }
}

/// Prompt bank for a synthetic mixture: slot 0 is each class mean direction,
/// then `informative` noisy copies of it, then `planted` random unit vectors.
pub fn synth_prompts(
    truth: &GroundTruth,
    informative: usize,
    noise: f64,
    planted: usize,
    seed: u64,
) -> Result<PromptBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = truth.covariance.nrows();
    let unit = |v: DVector<f64>| -> Result<Vec<f64>> {
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::Degenerate("zero-length prompt direction".into()));
        }
        Ok((v / n).iter().cloned().collect())
    };
    let mut rows = Vec::with_capacity(truth.means.len());
    for mean in &truth.means {
        let anchor = mean.normalize();
        let mut class_rows = vec![unit(mean.clone())?];
        for _ in 0..informative {
            class_rows.push(unit(&anchor + gaussian_vec(&mut rng, d) * (noise / (d as f64).sqrt()))?);
        }
        for _ in 0..planted {
            class_rows.push(unit(gaussian_vec(&mut rng, d))?);
        }
        rows.push(class_rows);
    }
    PromptBank::from_rows(&rows)?.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(per_class: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: 2,
            dim: 2,
            clients: 1,
            means: MeanSpec::Explicit(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
            covariance: CovarianceSpec::Isotropic(0.25),
            per_class,
            seed,
        }
    }

    #[test]
    fn closed_form_bayes_accuracy() {
        let out = synth_generate(&two_class(10, 0)).unwrap();
        let acc = out.truth.two_class_bayes_accuracy().unwrap();
        assert!((acc - 0.97725).abs() < 1e-5);
    }

    #[test]
    fn bayes_rule_accuracy_matches_closed_form() {
        let out = synth_generate(&two_class(20_000, 5)).unwrap();
        let correct = (0..out.pooled.len())
            .filter(|&i| out.truth.bayes_predict(&out.pooled.row_f64(i)) == out.pooled.label(i))
            .count();
        let acc = correct as f64 / out.pooled.len() as f64;
        assert!((acc - 0.9772).abs() < 0.005, "{acc}");
    }

    #[test]
    fn empty_and_deterministic() {
        let out = synth_generate(&two_class(0, 0)).unwrap();
        assert!(out.pooled.is_empty());
        let a = synth_generate(&two_class(50, 9)).unwrap();
        let b = synth_generate(&two_class(50, 9)).unwrap();
        assert_eq!(a.pooled.to_bytes(), b.pooled.to_bytes());
    }

    #[test]
    fn rejects_non_psd_covariance() {
        let mut cfg = two_class(5, 0);
        cfg.covariance = CovarianceSpec::Explicit(vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(synth_generate(&cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn prompts_have_expected_shape() {
        let out = synth_generate(&two_class(5, 0)).unwrap();
        let bank = synth_prompts(&out.truth, 2, 0.3, 1, 4).unwrap();
        assert_eq!(bank.slots(), 4);
        assert!(bank.is_normalized());
        assert_eq!(bank.embedding(0, 0), &[1.0, 0.0]);
    }
}
