//! Normal-Inverse-Wishart inference over class prototypes with a shared
//! covariance.
//!
//! Model: Σ ~ IW(S, ν), w_c | Σ ~ N(m_c, Σ / κ_c). Observing per-class
//! evidence (n_c, z̄_c, scatter_c) gives
//!
//! ```text
//! κ'_c = κ_c + n_c
//! m'_c = (κ_c m_c + n_c z̄_c) / κ'_c
//! ν'   = ν + Σ_c n_c
//! S'   = S + Σ_c scatter_c + Σ_c (κ_c n_c / κ'_c) (z̄_c - m_c)(z̄_c - m_c)ᵀ
//! ```
//!
//! The last line is the numerically stable form of
//! `S + Σ raw_c + Σ (κ_c m_c m_cᵀ - κ'_c m'_c m'_cᵀ)`. Evidence may carry
//! real-valued weights, which is how the power prior tempers the global
//! likelihood by α.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{outer, pack_upper, symmetrize, unpack_upper};
use crate::stats::{ClientStatsMessage, WeightedStats};
use crate::wire::{checked_len, Reader, Writer};

pub const POSTERIOR_MAGIC: &[u8; 8] = b"TOFANIW1";

/// Parameters of the vague prior used by both the server and the clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub s0: f64,
    pub kappa0: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            s0: 1e-6,
            kappa0: 1e-6,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidParameter(format!("s0 must be positive, got {}", self.s0)));
        }
        if !(self.kappa0 > 0.0 && self.kappa0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa0 must be positive, got {}",
                self.kappa0
            )));
        }
        Ok(())
    }
}

/// (S, ν, {m_c, κ_c}) of a NIW distribution over C class means and one
/// shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPosterior {
    pub scale: DMatrix<f64>,
    pub dof: f64,
    pub means: Vec<DVector<f64>>,
    pub kappas: Vec<f64>,
}

impl NiwPosterior {
    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// Mode-based plug-in estimate: class means and Σ̂ = S / (ν + d + 2).
    pub fn map_estimate(&self) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
        let denom = self.dof + self.dim() as f64 + 2.0;
        if denom <= 0.0 {
            return Err(Error::Degenerate(format!("ν + d + 2 = {denom} is not positive")));
        }
        Ok((self.means.clone(), symmetrize(&(&self.scale / denom))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(POSTERIOR_MAGIC);
        w.u32(self.dim() as u32);
        w.u32(self.num_classes() as u32);
        w.f64(self.dof);
        for k in &self.kappas {
            w.f64(*k);
        }
        for m in &self.means {
            for v in m.iter() {
                w.f64(*v);
            }
        }
        for v in pack_upper(&self.scale) {
            w.f64(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, POSTERIOR_MAGIC)?;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        let tri = checked_len(&[d, d + 1], 1)? / 2;
        r.expect_remaining(8 * (1 + c + checked_len(&[c, d], 1)? + tri))?;
        let dof = r.f64()?;
        let kappas = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut means = Vec::with_capacity(c);
        for _ in 0..c {
            let m = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            means.push(DVector::from_vec(m));
        }
        let packed = (0..tri).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(NiwPosterior {
            scale: unpack_upper(d, &packed),
            dof,
            means,
            kappas,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// S = s0·I, ν = 0, m_c = 0, κ_c = κ0.
pub fn uninformative_prior(dim: usize, num_classes: usize, prior: &PriorConfig) -> Result<NiwPosterior> {
    prior.validate()?;
    Ok(NiwPosterior {
        scale: DMatrix::identity(dim, dim) * prior.s0,
        dof: 0.0,
        means: vec![DVector::zeros(dim); num_classes],
        kappas: vec![prior.kappa0; num_classes],
    })
}

/// Conjugate update with real-weighted per-class evidence. Classes whose
/// weight is zero keep their prior mean and κ.
pub fn update_weighted(prior: &NiwPosterior, evidence: &[WeightedStats]) -> Result<NiwPosterior> {
    if evidence.len() != prior.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "evidence for {} classes, prior has {}",
            evidence.len(),
            prior.num_classes()
        )));
    }
    let d = prior.dim();
    let mut post = prior.clone();
    for (c, ev) in evidence.iter().enumerate() {
        if ev.sum.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "class {c} evidence has dimension {}, prior has {d}",
                ev.sum.len()
            )));
        }
        let Some((mean, scatter)) = ev.scatter() else {
            continue;
        };
        let k0 = prior.kappas[c];
        let m0 = &prior.means[c];
        let kq = k0 + ev.count;
        let shift = &mean - m0;
        post.scale += scatter + outer(&shift) * (k0 * ev.count / kq);
        post.means[c] = (m0 * k0 + &mean * ev.count) / kq;
        post.kappas[c] = kq;
        post.dof += ev.count;
    }
    post.scale = symmetrize(&post.scale);
    Ok(post)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Conjugate update with the evidence of `stats` scaled by `alpha`.
pub fn posterior_update(prior: &NiwPosterior, stats: &ClientStatsMessage, alpha: f64) -> Result<NiwPosterior> {
    check_alpha(alpha)?;
    if stats.dim != prior.dim() {
        return Err(Error::DimensionMismatch(format!(
            "stats dimension {} vs prior dimension {}",
            stats.dim,
            prior.dim()
        )));
    }
    let evidence: Vec<_> = stats.classes.iter().map(|cs| cs.scaled(alpha)).collect();
    update_weighted(prior, &evidence)
}

/// Server-side posterior from the pooled statistics of every client.
pub fn global_posterior(merged: &ClientStatsMessage, prior: &PriorConfig) -> Result<NiwPosterior> {
    if merged.total_count() == 0 {
        return Err(Error::Degenerate("every class is empty in the pooled statistics".into()));
    }
    let base = uninformative_prior(merged.dim, merged.num_classes(), prior)?;
    posterior_update(&base, merged, 1.0)
}

/// Client posterior under the power prior: the global evidence is tempered by
/// `alpha` and pooled with the client's own evidence on top of the vague
/// prior. With `alpha = 0`, classes the client never saw fall back to the
/// global class mean with κ = κ0.
pub fn personalized_posterior(
    global_stats: &ClientStatsMessage,
    local_stats: &ClientStatsMessage,
    alpha: f64,
    prior: &PriorConfig,
) -> Result<NiwPosterior> {
    check_alpha(alpha)?;
    if global_stats.dim != local_stats.dim || global_stats.num_classes() != local_stats.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "global stats (d={}, C={}) vs local stats (d={}, C={})",
            global_stats.dim,
            global_stats.num_classes(),
            local_stats.dim,
            local_stats.num_classes()
        )));
    }
    let evidence: Vec<WeightedStats> = global_stats
        .classes
        .iter()
        .zip(&local_stats.classes)
        .map(|(g, l)| g.scaled(alpha).add(&l.into()))
        .collect();
    if evidence.iter().all(|e| e.count <= 0.0) {
        return Err(Error::Degenerate(
            "no global or local evidence for any class".into(),
        ));
    }
    let base = uninformative_prior(local_stats.dim, local_stats.num_classes(), prior)?;
    let mut post = update_weighted(&base, &evidence)?;
    if alpha == 0.0 {
        for (c, (g, l)) in global_stats.classes.iter().zip(&local_stats.classes).enumerate() {
            if l.count == 0 && g.count > 0 {
                post.means[c] = g.mean()?;
                post.kappas[c] = prior.kappa0;
            }
        }
    }
    Ok(post)
}
