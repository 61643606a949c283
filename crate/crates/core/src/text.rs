//! Text pipeline: per-client prompt confidences, server-side alignment into
//! per-class prompt weights, the optional cross-client cosine pre-filter, and
//! the weighted text classifier.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingDataset, PromptBank};
use crate::error::{Error, Result};
use crate::fusion::LogitModel;
use crate::softmax;
use crate::wire::{checked_len, Reader, Writer};

pub const REPORT_MAGIC: &[u8; 8] = b"TOFARPT1";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"TOFAWGT1";

pub const DEFAULT_TAU_T: f64 = 0.5;
pub const DEFAULT_EPS_U: f64 = 1e-6;
pub const DEFAULT_CLIP_TEMP: f64 = 0.01;
pub const DEFAULT_KAPPA_FILTER: f64 = 0.85;

/// One client's confidence u^k(t_c^m) for every (class, prompt slot).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTextReport {
    pub client_id: u32,
    pub num_classes: usize,
    pub slots: usize,
    /// Class-major, `num_classes · slots`.
    pub confidences: Vec<f64>,
    /// Classes with at least one local sample.
    pub present: Vec<bool>,
    /// Local class means used for scoring; diagnostic only, never serialized.
    pub class_means: Vec<Option<DVector<f64>>>,
}

impl ClientTextReport {
    pub fn confidence(&self, class: usize, slot: usize) -> f64 {
        self.confidences[class * self.slots + slot]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(REPORT_MAGIC);
        w.u32(self.client_id);
        w.u32(self.num_classes as u32);
        w.u32(self.slots as u32);
        for u in &self.confidences {
            w.f64(*u);
        }
        for p in &self.present {
            w.u8(*p as u8);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, REPORT_MAGIC)?;
        let client_id = r.u32()?;
        let num_classes = r.u32()? as usize;
        let slots = r.u32()? as usize;
        let n = checked_len(&[num_classes, slots], 1)?;
        r.expect_remaining(8 * n + num_classes)?;
        let confidences = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if confidences.iter().any(|u| !u.is_finite()) {
            return Err(Error::Validation("report holds non-finite confidences".into()));
        }
        let present = (0..num_classes)
            .map(|_| r.u8().map(|b| b != 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClientTextReport {
            client_id,
            num_classes,
            slots,
            confidences,
            present,
            class_means: vec![None; num_classes],
        })
    }
}

/// Mean embedding of every locally present class.
pub fn local_class_means(ds: &EmbeddingDataset) -> Vec<Option<DVector<f64>>> {
    let mut sums = vec![DVector::zeros(ds.dim()); ds.num_classes()];
    let mut counts = vec![0usize; ds.num_classes()];
    for i in 0..ds.len() {
        let c = ds.label(i);
        sums[c] += ds.row_f64(i);
        counts[c] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect()
}

fn probs_against_means(t: &DVector<f64>, means: &[Option<DVector<f64>>]) -> Result<Vec<f64>> {
    let present: Vec<usize> = (0..means.len()).filter(|&j| means[j].is_some()).collect();
    if present.is_empty() {
        return Err(Error::Degenerate("client has no locally present classes".into()));
    }
    let logits: Vec<f64> = present
        .iter()
        .map(|&j| t.dot(means[j].as_ref().unwrap()))
        .collect();
    let p = softmax(&logits);
    let mut out = vec![0.0; means.len()];
    for (&j, pj) in present.iter().zip(p) {
        out[j] = pj;
    }
    Ok(out)
}

/// p^k(t_c^m): softmax over locally present classes of the prompt's inner
/// product with each local class mean. Absent classes get probability 0.
pub fn class_prompt_prob(bank: &PromptBank, ds: &EmbeddingDataset, class: usize, slot: usize) -> Result<Vec<f64>> {
    check_bank(bank, ds)?;
    probs_against_means(&bank.embedding_f64(class, slot), &local_class_means(ds))
}

fn check_bank(bank: &PromptBank, ds: &EmbeddingDataset) -> Result<()> {
    if bank.dim() != ds.dim() || bank.num_classes() != ds.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "prompt bank (d={}, C={}) vs dataset (d={}, C={})",
            bank.dim(),
            bank.num_classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    Ok(())
}

/// u = p_c − max_{j≠c} p_j for the prompt's own class c.
fn margin(p: &[f64], c: usize) -> f64 {
    let rival = p
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != c)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    p[c] - rival
}

/// Confidence of every prompt in `bank` as judged by the client's data.
/// Inactive slots and classes absent from the client report 0.
pub fn client_confidences(client_id: u32, bank: &PromptBank, ds: &EmbeddingDataset) -> Result<ClientTextReport> {
    check_bank(bank, ds)?;
    let means = local_class_means(ds);
    let (c_total, slots) = (bank.num_classes(), bank.slots());
    let mut confidences = vec![0.0; c_total * slots];
    for c in 0..c_total {
        if means[c].is_none() {
            continue;
        }
        for m in 0..slots {
            if !bank.is_active(c, m) {
                continue;
            }
            let p = probs_against_means(&bank.embedding_f64(c, m), &means)?;
            confidences[c * slots + m] = margin(&p, c);
        }
    }
    Ok(ClientTextReport {
        client_id,
        num_classes: c_total,
        slots,
        confidences,
        present: means.iter().map(Option::is_some).collect(),
        class_means: means,
    })
}

/// Per-class importance scores r and softmax weights b over prompt slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPromptWeights {
    pub num_classes: usize,
    pub slots: usize,
    pub tau_t: f64,
    /// Class-major `num_classes · slots`. Inactive slots hold 0.
    pub scores: Vec<f64>,
    /// Class-major `num_classes · slots`. Inactive slots hold 0.
    pub weights: Vec<f64>,
}

impl AlignedPromptWeights {
    pub fn score(&self, class: usize, slot: usize) -> f64 {
        self.scores[class * self.slots + slot]
    }

    pub fn weight(&self, class: usize, slot: usize) -> f64 {
        self.weights[class * self.slots + slot]
    }

    /// Hand-crafted prompt only: b(t_c^0) = 1.
    pub fn hand_crafted(num_classes: usize, slots: usize, tau_t: f64) -> Self {
        let mut weights = vec![0.0; num_classes * slots];
        for c in 0..num_classes {
            weights[c * slots] = 1.0;
        }
        AlignedPromptWeights {
            num_classes,
            slots,
            tau_t,
            scores: vec![0.0; num_classes * slots],
            weights,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(WEIGHTS_MAGIC);
        w.u32(self.num_classes as u32);
        w.u32(self.slots as u32);
        w.f64(self.tau_t);
        for v in self.scores.iter().chain(&self.weights) {
            w.f64(*v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, WEIGHTS_MAGIC)?;
        let num_classes = r.u32()? as usize;
        let slots = r.u32()? as usize;
        let n = checked_len(&[num_classes, slots], 1)?;
        r.expect_remaining(8 + 16 * n)?;
        let tau_t = r.f64()?;
        let scores = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(AlignedPromptWeights {
            num_classes,
            slots,
            tau_t,
            scores,
            weights,
        })
    }
}

/// Alignment with every slot active and every client's confidence used.
pub fn align_scores(reports: &[ClientTextReport], tau_t: f64, eps_u: f64) -> Result<AlignedPromptWeights> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no client reports to align".into()))?;
    let active = vec![true; first.num_classes * first.slots];
    align_scores_masked(reports, tau_t, eps_u, &active, None)
}

/// Server-side alignment.
///
/// `r(t_c^m) = mean_k max(u_c^0, 0) · ln(max(u_c^m, ε) / max(u_c^0, ε))`
/// over the clients that hold class c (and, when `retained` is given, kept
/// slot m in the pre-filter). `b = softmax(r / τ_t)` over the active slots.
pub fn align_scores_masked(
    reports: &[ClientTextReport],
    tau_t: f64,
    eps_u: f64,
    active: &[bool],
    retained: Option<&[Vec<bool>]>,
) -> Result<AlignedPromptWeights> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no client reports to align".into()))?;
    let (num_classes, slots) = (first.num_classes, first.slots);
    if let Some(r) = reports
        .iter()
        .find(|r| r.num_classes != num_classes || r.slots != slots)
    {
        return Err(Error::DimensionMismatch(format!(
            "report of client {} covers (C={}, M+1={}), expected (C={num_classes}, M+1={slots})",
            r.client_id, r.num_classes, r.slots
        )));
    }
    if !(tau_t > 0.0 && tau_t.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau_t must be positive, got {tau_t}")));
    }
    if eps_u.is_nan() || eps_u <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps_u must be positive, got {eps_u}")));
    }
    if active.len() != num_classes * slots {
        return Err(Error::DimensionMismatch("slot activity mask has the wrong size".into()));
    }
    if let Some(ret) = retained {
        if ret.len() != reports.len() || ret.iter().any(|m| m.len() != active.len()) {
            return Err(Error::DimensionMismatch("retention masks do not match the reports".into()));
        }
    }

    let mut scores = vec![0.0; num_classes * slots];
    let mut weights = vec![0.0; num_classes * slots];
    for c in 0..num_classes {
        for m in 1..slots {
            let idx = c * slots + m;
            if !active[idx] {
                continue;
            }
            let mut total = 0.0;
            let mut contributors = 0usize;
            for (k, rep) in reports.iter().enumerate() {
                if !rep.present[c] || retained.is_some_and(|ret| !ret[k][idx]) {
                    continue;
                }
                let u0 = rep.confidence(c, 0);
                let um = rep.confidence(c, m);
                total += u0.max(0.0) * (um.max(eps_u) / u0.max(eps_u)).ln();
                contributors += 1;
            }
            if contributors > 0 {
                scores[idx] = total / contributors as f64;
            }
        }
        let live: Vec<usize> = (0..slots).filter(|&m| active[c * slots + m]).collect();
        let logits: Vec<f64> = live.iter().map(|&m| scores[c * slots + m] / tau_t).collect();
        for (&m, b) in live.iter().zip(softmax(&logits)) {
            weights[c * slots + m] = b;
        }
    }
    Ok(AlignedPromptWeights {
        num_classes,
        slots,
        tau_t,
        scores,
        weights,
    })
}

/// Global bank plus, per client, which (class, slot) entries survived.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefilterOutcome {
    pub bank: PromptBank,
    /// `retained[k][c·slots + m]`
    pub retained: Vec<Vec<bool>>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Cross-client screening of heterogeneous prompt sets.
///
/// An augmented prompt (slot ≥ 1) of client k survives when every other
/// client holds some augmented prompt of the same class with cosine
/// similarity ≥ `kappa`. Survivors are averaged per (class, slot) across
/// clients and re-normalized; slot 0 is never filtered. A slot with no
/// survivor becomes inactive.
pub fn prefilter_prompts(sets: &[PromptBank], kappa: f64) -> Result<PrefilterOutcome> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidParameter(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    combine_prompts(sets, Some(kappa))
}

/// Averages per-client prompt sets into one bank. With `kappa` set, applies
/// the same screening as [`prefilter_prompts`]; without it, every active
/// prompt is kept.
pub fn combine_prompts(sets: &[PromptBank], kappa: Option<f64>) -> Result<PrefilterOutcome> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Validation("no prompt sets to combine".into()))?;
    let (d, num_classes, slots) = (first.dim(), first.num_classes(), first.slots());
    if let Some(k) = sets
        .iter()
        .position(|s| s.dim() != d || s.num_classes() != num_classes || s.slots() != slots)
    {
        return Err(Error::DimensionMismatch(format!(
            "prompt set of client {k} differs in shape from client 0"
        )));
    }

    let mut retained = vec![vec![false; num_classes * slots]; sets.len()];
    for (k, set) in sets.iter().enumerate() {
        for c in 0..num_classes {
            retained[k][c * slots] = true;
            for a in 1..slots {
                if !set.is_active(c, a) {
                    continue;
                }
                let Some(kappa) = kappa else {
                    retained[k][c * slots + a] = true;
                    continue;
                };
                let e = set.embedding(c, a);
                let keep = sets.iter().enumerate().filter(|(k2, _)| *k2 != k).all(|(_, other)| {
                    (1..slots)
                        .filter(|&b| other.is_active(c, b))
                        .any(|b| cosine(e, other.embedding(c, b)) >= kappa)
                });
                retained[k][c * slots + a] = keep;
            }
        }
    }

    let mut embeddings = vec![0.0f32; num_classes * slots * d];
    for c in 0..num_classes {
        for m in 0..slots {
            let idx = c * slots + m;
            let mut acc = vec![0.0f64; d];
            for (k, set) in sets.iter().enumerate() {
                if !retained[k][idx] {
                    continue;
                }
                let e = set.embedding(c, m);
                let n = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                for (a, &v) in acc.iter_mut().zip(e) {
                    *a += v as f64 / n;
                }
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (j, v) in acc.iter().enumerate() {
                    embeddings[idx * d + j] = (v / norm) as f32;
                }
            }
        }
    }
    let bank = PromptBank::new(d, num_classes, slots, embeddings, true)?;
    Ok(PrefilterOutcome { bank, retained })
}

/// Weighted prompt-ensemble classifier: logit_j = Σ_m b(t_j^m) zᵀt_j^m / τ.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    /// Row j is Σ_m b(t_j^m) t_j^m.
    class_embeddings: DMatrix<f64>,
    clip_temp: f64,
}

impl TextClassifier {
    pub fn new(bank: &PromptBank, weights: &AlignedPromptWeights, clip_temp: f64) -> Result<Self> {
        if weights.num_classes != bank.num_classes() || weights.slots != bank.slots() {
            return Err(Error::DimensionMismatch(format!(
                "weights cover (C={}, M+1={}), bank is (C={}, M+1={})",
                weights.num_classes,
                weights.slots,
                bank.num_classes(),
                bank.slots()
            )));
        }
        if !(clip_temp > 0.0 && clip_temp.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "clip temperature must be positive, got {clip_temp}"
            )));
        }
        let mut class_embeddings = DMatrix::zeros(bank.num_classes(), bank.dim());
        for c in 0..bank.num_classes() {
            let mut row = DVector::zeros(bank.dim());
            for m in 0..bank.slots() {
                let b = weights.weight(c, m);
                if b != 0.0 && bank.is_active(c, m) {
                    row += bank.embedding_f64(c, m) * b;
                }
            }
            class_embeddings.set_row(c, &row.transpose());
        }
        Ok(TextClassifier {
            class_embeddings,
            clip_temp,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings.ncols()
    }

    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(z)?))
    }
}

impl LogitModel for TextClassifier {
    fn num_classes(&self) -> usize {
        self.class_embeddings.nrows()
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has dimension {}, text classifier expects {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text classifier input".into()));
        }
        let z = DVector::from_column_slice(z);
        Ok((&self.class_embeddings * z / self.clip_temp).iter().cloned().collect())
    }
}

/// Plain zero-shot probabilities from the hand-crafted prompts.
pub fn zero_shot_predict(bank: &PromptBank, z: &[f64], clip_temp: f64) -> Vec<f64> {
    let z = DVector::from_column_slice(z);
    let logits: Vec<f64> = (0..bank.num_classes())
        .map(|c| bank.embedding_f64(c, 0).dot(&z) / clip_temp)
        .collect();
    softmax(&logits)
}
