//! Embedding datasets and prompt banks, with their binary file formats.
//!
//! `.tfe` layout: magic `TOFAEMB1`, then little-endian `u32 d`, `u32 N`,
//! `u32 C`, `u8 normalized`, 3 reserved bytes, `N` u32 labels and `N·d`
//! float32 values in row-major order.
//!
//! `.tfp` layout: magic `TOFAPRM1`, `u32 d`, `u32 C`, `u32 M+1`,
//! `u8 normalized`, 3 reserved bytes, then `C·(M+1)·d` float32 values in
//! class-major, prompt-index order. Slot 0 of every class is the hand-crafted
//! prompt. An all-zero row in a slot above 0 marks that slot inactive.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{checked_len, Reader, Writer};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"TOFAEMB1";
pub const PROMPT_MAGIC: &[u8; 8] = b"TOFAPRM1";

/// Unit-norm tolerance for rows of a dataset flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Labeled embedding vectors for one client, a test split, or a pooled corpus.
///
/// Vectors are kept as float32 (the on-disk type) and promoted to float64 by
/// every consumer that does statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    num_classes: usize,
    labels: Vec<u32>,
    vectors: Vec<f32>,
    normalized: bool,
    /// Source-domain tag per row, when the rows came from several domain files.
    domains: Option<Vec<u32>>,
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        labels: Vec<u32>,
        vectors: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        let ds = EmbeddingDataset {
            dim,
            num_classes,
            labels,
            vectors,
            normalized,
            domains: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds from float64 rows (rounded to float32). Not flagged as normalized.
    pub fn from_rows(num_classes: usize, labels: Vec<u32>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or_else(|| {
            Error::Validation("cannot infer dimension from zero rows".into())
        })?;
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            vectors.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(dim, num_classes, labels, vectors, false)
    }

    pub fn empty(dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(dim, num_classes, Vec::new(), Vec::new(), false)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("number of classes must be positive".into()));
        }
        if self.vectors.len() != self.labels.len() * self.dim {
            return Err(Error::Validation(format!(
                "{} labels but {} values for dimension {}",
                self.labels.len(),
                self.vectors.len(),
                self.dim
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= self.num_classes) {
            return Err(Error::Validation(format!(
                "label {} at row {i} is not below C = {}",
                self.labels[i], self.num_classes
            )));
        }
        if let Some(domains) = &self.domains {
            if domains.len() != self.labels.len() {
                return Err(Error::Validation("domain tags do not cover every row".into()));
            }
        }
        if self.normalized {
            for i in 0..self.len() {
                let n = row_norm(self.row(i));
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "row {i} has norm {n} but dataset is flagged normalized"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn domains(&self) -> Option<&[u32]> {
        self.domains.as_deref()
    }

    pub fn with_domains(mut self, domains: Vec<u32>) -> Result<Self> {
        self.domains = Some(domains);
        self.validate()?;
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.row(i).iter().map(|&v| v as f64))
    }

    pub fn rows_f64(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        (0..self.len()).map(move |i| self.row_f64(i))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Classes with at least one row.
    pub fn present_classes(&self) -> Vec<bool> {
        self.class_counts().into_iter().map(|n| n > 0).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingDataset {
        let mut labels = Vec::with_capacity(indices.len());
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            labels.push(self.labels[i]);
            vectors.extend_from_slice(self.row(i));
        }
        EmbeddingDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            labels,
            vectors,
            normalized: self.normalized,
            domains: self
                .domains
                .as_ref()
                .map(|d| indices.iter().map(|&i| d[i]).collect()),
        }
    }

    /// Concatenates datasets, tagging every row with the index of its source.
    pub fn concat_domains(parts: &[EmbeddingDataset]) -> Result<EmbeddingDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("no datasets to concatenate".into()))?;
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        let mut domains = Vec::new();
        for (k, p) in parts.iter().enumerate() {
            if p.dim != first.dim || p.num_classes != first.num_classes {
                return Err(Error::DimensionMismatch(format!(
                    "domain {k} has (d={}, C={}), expected (d={}, C={})",
                    p.dim, p.num_classes, first.dim, first.num_classes
                )));
            }
            labels.extend_from_slice(&p.labels);
            vectors.extend_from_slice(&p.vectors);
            domains.extend(std::iter::repeat_n(k as u32, p.len()));
        }
        let ds = EmbeddingDataset {
            dim: first.dim,
            num_classes: first.num_classes,
            labels,
            vectors,
            normalized: parts.iter().all(|p| p.normalized),
            domains: Some(domains),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(EMBEDDING_MAGIC);
        w.u32(self.dim as u32);
        w.u32(self.len() as u32);
        w.u32(self.num_classes as u32);
        w.u8(self.normalized as u8);
        w.bytes(&[0; 3]);
        for &l in &self.labels {
            w.u32(l);
        }
        for &v in &self.vectors {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, EMBEDDING_MAGIC)?;
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("normalized flag must be 0 or 1, got {f}"))),
        };
        r.bytes(3)?;
        let payload = checked_len(&[n], 4)? + checked_len(&[n, dim], 4)?;
        r.expect_remaining(payload)?;
        let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let vectors = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite embedding value".into()));
        }
        Self::new(dim, num_classes, labels, vectors, normalized)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingDataset::from_bytes(&bytes)
}

pub fn save_embeddings(path: impl AsRef<Path>, ds: &EmbeddingDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads every `.tfe` file under `dir` (sorted by name) as one dataset whose
/// rows are tagged with the file index as their domain.
pub fn load_embeddings_dir(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tfe"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .tfe files in {}", dir.display())));
    }
    let parts = paths
        .iter()
        .map(load_embeddings)
        .collect::<Result<Vec<_>>>()?;
    EmbeddingDataset::concat_domains(&parts)
}

/// Scales every row to unit norm. Idempotent.
pub fn normalize(ds: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    if ds.normalized {
        return Ok(ds.clone());
    }
    let mut vectors = Vec::with_capacity(ds.vectors.len());
    for i in 0..ds.len() {
        let row = ds.row(i);
        let n = row_norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("row {i} has zero or non-finite norm")));
        }
        vectors.extend(row.iter().map(|&v| (v as f64 / n) as f32));
    }
    let mut out = ds.clone();
    out.vectors = vectors;
    out.normalized = true;
    out.validate()?;
    Ok(out)
}

/// Per-class prompt embeddings; slot 0 is the hand-crafted prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    dim: usize,
    num_classes: usize,
    slots: usize,
    embeddings: Vec<f32>,
    active: Vec<bool>,
    normalized: bool,
}

impl PromptBank {
    /// `embeddings` is `C·slots·d` values; zero rows in slots above 0 are inactive.
    pub fn new(
        dim: usize,
        num_classes: usize,
        slots: usize,
        embeddings: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 || slots == 0 {
            return Err(Error::Validation(
                "prompt bank needs positive d, C and at least slot 0".into(),
            ));
        }
        if embeddings.len() != dim * num_classes * slots {
            return Err(Error::Validation(format!(
                "prompt bank holds {} values, expected {}",
                embeddings.len(),
                dim * num_classes * slots
            )));
        }
        let active = embeddings
            .chunks(dim)
            .map(|row| row.iter().any(|&v| v != 0.0))
            .collect();
        let bank = PromptBank {
            dim,
            num_classes,
            slots,
            embeddings,
            active,
            normalized,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// `rows[c][m]` is the embedding of prompt `m` for class `c`.
    pub fn from_rows(rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let num_classes = rows.len();
        let slots = rows.first().map_or(0, |r| r.len());
        let dim = rows
            .first()
            .and_then(|r| r.first())
            .map_or(0, |v| v.len());
        let mut emb = Vec::with_capacity(num_classes * slots * dim);
        for (c, class_rows) in rows.iter().enumerate() {
            if class_rows.len() != slots {
                return Err(Error::Validation(format!(
                    "class {c} has {} prompts, expected {slots}",
                    class_rows.len()
                )));
            }
            for row in class_rows {
                if row.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "prompt of class {c} has length {}, expected {dim}",
                        row.len()
                    )));
                }
                emb.extend(row.iter().map(|&v| v as f32));
            }
        }
        Self::new(dim, num_classes, slots, emb, false)
    }

    fn validate(&self) -> Result<()> {
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite prompt embedding".into()));
        }
        for c in 0..self.num_classes {
            if !self.is_active(c, 0) {
                return Err(Error::Validation(format!(
                    "class {c} is missing its hand-crafted prompt (slot 0)"
                )));
            }
        }
        if self.normalized {
            for c in 0..self.num_classes {
                for m in 0..self.slots {
                    if !self.is_active(c, m) {
                        continue;
                    }
                    let n = row_norm(self.embedding(c, m));
                    if (n - 1.0).abs() > UNIT_NORM_TOL {
                        return Err(Error::Validation(format!(
                            "prompt ({c}, {m}) has norm {n} but bank is flagged normalized"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// M + 1.
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_active(&self, class: usize, slot: usize) -> bool {
        self.active[class * self.slots + slot]
    }

    /// Number of active slots for `class` (always ≥ 1).
    pub fn active_count(&self, class: usize) -> usize {
        (0..self.slots).filter(|&m| self.is_active(class, m)).count()
    }

    pub fn embedding(&self, class: usize, slot: usize) -> &[f32] {
        let start = (class * self.slots + slot) * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    pub fn embedding_f64(&self, class: usize, slot: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.embedding(class, slot).iter().map(|&v| v as f64))
    }

    /// Keeps only slot 0 of every class.
    pub fn hand_crafted_only(&self) -> PromptBank {
        let mut emb = Vec::with_capacity(self.num_classes * self.dim);
        for c in 0..self.num_classes {
            emb.extend_from_slice(self.embedding(c, 0));
        }
        PromptBank {
            dim: self.dim,
            num_classes: self.num_classes,
            slots: 1,
            embeddings: emb,
            active: vec![true; self.num_classes],
            normalized: self.normalized,
        }
    }

    /// Unit-normalizes every active prompt. Idempotent.
    pub fn normalize(&self) -> Result<PromptBank> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        for (i, row) in out.embeddings.chunks_mut(self.dim).enumerate() {
            if !self.active[i] {
                continue;
            }
            let n = row_norm(row);
            for v in row.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
        }
        out.normalized = true;
        out.validate()?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PROMPT_MAGIC);
        w.u32(self.dim as u32);
        w.u32(self.num_classes as u32);
        w.u32(self.slots as u32);
        w.u8(self.normalized as u8);
        w.bytes(&[0; 3]);
        for (i, row) in self.embeddings.chunks(self.dim).enumerate() {
            for &v in row {
                w.f32(if self.active[i] { v } else { 0.0 });
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, PROMPT_MAGIC)?;
        let dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let slots = r.u32()? as usize;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("normalized flag must be 0 or 1, got {f}"))),
        };
        r.bytes(3)?;
        let count = checked_len(&[num_classes, slots, dim], 1)?;
        r.expect_remaining(count * 4)?;
        let emb = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        Self::new(dim, num_classes, slots, emb, normalized)
    }
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PromptBank::from_bytes(&bytes)
}

pub fn save_prompts(path: impl AsRef<Path>, bank: &PromptBank) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Class names sidecar (`<name>.meta`, JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeta {
    pub dataset: String,
    pub classes: Vec<String>,
}

impl ClassMeta {
    pub fn new(dataset: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        let meta = ClassMeta {
            dataset: dataset.into(),
            classes,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in &self.classes {
            if !seen.insert(name) {
                return Err(Error::Validation(format!("duplicate class name {name:?}")));
            }
        }
        Ok(())
    }

    pub fn check_against(&self, num_classes: usize) -> Result<()> {
        if self.classes.len() != num_classes {
            return Err(Error::Validation(format!(
                "sidecar names {} classes, dataset has {num_classes}",
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn sidecar_path(data_path: &Path) -> std::path::PathBuf {
        data_path.with_extension("meta")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: ClassMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal_file() -> Vec<u8> {
        let mut b = EMBEDDING_MAGIC.to_vec();
        for v in [2u32, 1, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&[1, 0, 0, 0]);
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&1.0f32.to_le_bytes());
        b.extend_from_slice(&0.0f32.to_le_bytes());
        b
    }

    #[test]
    fn loads_minimal_file() {
        let ds = EmbeddingDataset::from_bytes(&minimal_file()).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[0]);
        assert_eq!(ds.row(0), &[1.0, 0.0]);
        assert!(ds.is_normalized());
    }

    #[test]
    fn declared_rows_beyond_payload_is_truncation() {
        let ds = EmbeddingDataset::from_rows(2, vec![0, 1], &[vec![1.0, 2.0], vec![3.0, 4.0]])
            .unwrap();
        let mut bytes = ds.to_bytes();
        bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            EmbeddingDataset::from_bytes(&bytes),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_label_out_of_range() {
        let mut bytes = minimal_file();
        bytes[7] = b'2';
        assert!(matches!(EmbeddingDataset::from_bytes(&bytes), Err(Error::Format(_))));

        let mut bytes = minimal_file();
        bytes[24..28].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            EmbeddingDataset::from_bytes(&bytes),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tfe");
        let ds = EmbeddingDataset::new(
            3,
            4,
            vec![3, 0],
            vec![0.1, -2.5, f32::MIN_POSITIVE, 7.0, 1e-30, -0.0],
            false,
        )
        .unwrap();
        save_embeddings(&path, &ds).unwrap();
        let back = load_embeddings(&path).unwrap();
        let a: Vec<u32> = ds.vectors().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.vectors().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(ds, back);
    }

    #[test]
    fn normalize_examples() {
        let ds = EmbeddingDataset::from_rows(1, vec![0], &[vec![3.0, 4.0]]).unwrap();
        let n = normalize(&ds).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(normalize(&n).unwrap(), n);

        let zero = EmbeddingDataset::from_rows(1, vec![0, 0], &[vec![1.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        let err = normalize(&zero).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn empty_dataset_is_legal() {
        let ds = EmbeddingDataset::empty(5, 3).unwrap();
        let back = EmbeddingDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 5);
    }

    #[test]
    fn prompt_bank_round_trip_and_inactive_slots() {
        let bank = PromptBank::from_rows(&[
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.6, 0.8]],
        ])
        .unwrap();
        assert!(!bank.is_active(0, 1));
        assert!(bank.is_active(1, 1));
        assert_eq!(bank.active_count(0), 1);
        let back = PromptBank::from_bytes(&bank.to_bytes()).unwrap();
        assert_eq!(back, bank);
        let normalized = bank.normalize().unwrap();
        assert!(normalized.is_normalized());
        assert_eq!(normalized.normalize().unwrap(), normalized);
    }

    #[test]
    fn prompt_bank_requires_slot_zero() {
        let err = PromptBank::from_rows(&[vec![vec![0.0, 0.0], vec![1.0, 0.0]]]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn meta_rejects_duplicates() {
        assert!(ClassMeta::new("pets", vec!["cat".into(), "cat".into()]).is_err());
        let meta = ClassMeta::new("pets", vec!["cat".into(), "dog".into()]).unwrap();
        assert!(meta.check_against(2).is_ok());
        assert!(meta.check_against(3).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = EmbeddingDataset> {
        (1usize..5, 1usize..6, 1usize..8).prop_flat_map(|(d, c, n)| {
            (
                proptest::collection::vec(0..c as u32, n),
                proptest::collection::vec(-10.0f32..10.0, n * d),
            )
                .prop_map(move |(labels, vectors)| {
                    EmbeddingDataset::new(d, c, labels, vectors, false).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip(ds in arb_dataset()) {
            let bytes = ds.to_bytes();
            let back = EmbeddingDataset::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn inconsistent_headers_are_rejected(ds in arb_dataset(), which in 0usize..5, delta in 1u32..4) {
            let mut bytes = ds.to_bytes();
            let field = |b: &mut Vec<u8>, off: usize, v: u32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
            let (d, n) = (ds.dim() as u32, ds.len() as u32);
            let max_label = *ds.labels().iter().max().unwrap();
            match which {
                0 => field(&mut bytes, 8, d + delta),
                1 => field(&mut bytes, 12, n + delta),
                2 => field(&mut bytes, 12, n.saturating_sub(delta)),
                3 => field(&mut bytes, 16, max_label),
                _ => { let len = bytes.len(); bytes.truncate(len - delta as usize); }
            }
            prop_assert!(EmbeddingDataset::from_bytes(&bytes).is_err());
        }

        #[test]
        fn normalize_idempotent_and_shape_preserving(ds in arb_dataset()) {
            prop_assume!((0..ds.len()).all(|i| ds.row(i).iter().any(|&v| v != 0.0)));
            let n1 = normalize(&ds).unwrap();
            prop_assert_eq!(n1.labels(), ds.labels());
            prop_assert_eq!(n1.dim(), ds.dim());
            let n2 = normalize(&n1).unwrap();
            prop_assert_eq!(n1, n2);
        }
    }
}
