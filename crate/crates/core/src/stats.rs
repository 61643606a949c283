//! Per-class sufficient statistics: the whole client upload of the visual
//! pipeline.
//!
//! Clients send raw second moments rather than centered scatters so that the
//! server can pool them by plain addition.
//!
//! `.tfs` layout: magic `TOFASTS1`, little-endian `u32 client_id`, `u32 d`,
//! `u32 C`, then per class `u64 count`, `d` float64 sum and `d·(d+1)/2`
//! float64 upper-triangular raw moment (row-major).

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::embedding::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::linalg::{outer, pack_upper, symmetrize, unpack_upper};
use crate::wire::{checked_len, Reader, Writer};

pub const STATS_MAGIC: &[u8; 8] = b"TOFASTS1";

/// Count, sum and raw second moment Σ z zᵀ of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class: usize,
    pub count: u64,
    pub sum: DVector<f64>,
    pub raw_moment: DMatrix<f64>,
}

impl ClassStats {
    pub fn zero(class: usize, dim: usize) -> Self {
        ClassStats {
            class,
            count: 0,
            sum: DVector::zeros(dim),
            raw_moment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn observe(&mut self, z: &DVector<f64>) {
        self.count += 1;
        self.sum += z;
        self.raw_moment.ger(1.0, z, z, 1.0);
    }

    pub fn from_points<'a>(
        class: usize,
        dim: usize,
        points: impl IntoIterator<Item = &'a DVector<f64>>,
    ) -> Self {
        let mut s = Self::zero(class, dim);
        for z in points {
            s.observe(z);
        }
        s
    }

    /// Componentwise sum of two statistics for the same class.
    pub fn merge(&self, other: &ClassStats) -> Result<ClassStats> {
        if self.class != other.class {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge class {} with class {}",
                self.class, other.class
            )));
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge dimension {} with {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(ClassStats {
            class: self.class,
            count: self.count + other.count,
            sum: &self.sum + &other.sum,
            raw_moment: &self.raw_moment + &other.raw_moment,
        })
    }

    /// Evidence scaled by `weight` (used for the power prior). Counts become real.
    pub fn scaled(&self, weight: f64) -> WeightedStats {
        WeightedStats {
            count: weight * self.count as f64,
            sum: &self.sum * weight,
            raw_moment: &self.raw_moment * weight,
        }
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        if self.count == 0 {
            return Err(Error::Degenerate(format!(
                "class {} has no samples, mean is undefined",
                self.class
            )));
        }
        Ok(&self.sum / self.count as f64)
    }

    /// Mean and centered scatter Σ (z - z̄)(z - z̄)ᵀ.
    pub fn scatter(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mean = self.mean()?;
        let scatter = if self.count == 1 {
            DMatrix::zeros(self.dim(), self.dim())
        } else {
            symmetrize(&(&self.raw_moment - outer(&mean) * self.count as f64))
        };
        Ok((mean, scatter))
    }
}

/// Real-weighted counterpart of [`ClassStats`]; the input of posterior updates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStats {
    pub count: f64,
    pub sum: DVector<f64>,
    pub raw_moment: DMatrix<f64>,
}

impl WeightedStats {
    pub fn add(&self, other: &WeightedStats) -> WeightedStats {
        WeightedStats {
            count: self.count + other.count,
            sum: &self.sum + &other.sum,
            raw_moment: &self.raw_moment + &other.raw_moment,
        }
    }

    /// Mean and centered scatter; `None` when the weight is zero.
    pub fn scatter(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        if self.count <= 0.0 {
            return None;
        }
        let mean = &self.sum / self.count;
        let scatter = symmetrize(&(&self.raw_moment - outer(&mean) * self.count));
        Some((mean, scatter))
    }
}

impl From<&ClassStats> for WeightedStats {
    fn from(s: &ClassStats) -> Self {
        s.scaled(1.0)
    }
}

/// Everything one client uploads in the visual pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStatsMessage {
    pub client_id: u32,
    pub dim: usize,
    pub classes: Vec<ClassStats>,
}

impl ClientStatsMessage {
    pub fn zero(client_id: u32, dim: usize, num_classes: usize) -> Self {
        ClientStatsMessage {
            client_id,
            dim,
            classes: (0..num_classes).map(|c| ClassStats::zero(c, dim)).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_count(&self) -> u64 {
        self.classes.iter().map(|c| c.count).sum()
    }

    /// Class-by-class merge. The result keeps `self.client_id`.
    pub fn merge(&self, other: &ClientStatsMessage) -> Result<ClientStatsMessage> {
        if self.dim != other.dim || self.num_classes() != other.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "stats (d={}, C={}) vs (d={}, C={})",
                self.dim,
                self.num_classes(),
                other.dim,
                other.num_classes()
            )));
        }
        let classes = self
            .classes
            .iter()
            .zip(&other.classes)
            .map(|(a, b)| a.merge(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClientStatsMessage {
            client_id: self.client_id,
            dim: self.dim,
            classes,
        })
    }

    /// Server-side pooling of all client uploads, in the order given.
    pub fn merge_all<'a>(
        messages: impl IntoIterator<Item = &'a ClientStatsMessage>,
    ) -> Result<ClientStatsMessage> {
        let mut iter = messages.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Validation("no statistics to merge".into()))?;
        let mut acc = first.clone();
        for m in iter {
            acc = acc.merge(m)?;
        }
        acc.client_id = u32::MAX;
        Ok(acc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(STATS_MAGIC);
        w.u32(self.client_id);
        w.u32(self.dim as u32);
        w.u32(self.num_classes() as u32);
        for cs in &self.classes {
            w.u64(cs.count);
            for v in cs.sum.iter() {
                w.f64(*v);
            }
            for v in pack_upper(&cs.raw_moment) {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, STATS_MAGIC)?;
        let client_id = r.u32()?;
        let dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("stats dimension must be positive".into()));
        }
        let tri = checked_len(&[dim, dim + 1], 1)? / 2;
        let per_class = 8 + 8 * (dim + tri);
        r.expect_remaining(checked_len(&[num_classes, per_class], 1)?)?;
        let mut classes = Vec::with_capacity(num_classes);
        for class in 0..num_classes {
            let count = r.u64()?;
            let sum = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let packed = (0..tri).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            classes.push(ClassStats {
                class,
                count,
                sum: DVector::from_vec(sum),
                raw_moment: unpack_upper(dim, &packed),
            });
        }
        Ok(ClientStatsMessage {
            client_id,
            dim,
            classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Accumulates per-class statistics of a dataset in float64.
pub fn compute_stats(client_id: u32, ds: &EmbeddingDataset) -> ClientStatsMessage {
    let mut msg = ClientStatsMessage::zero(client_id, ds.dim(), ds.num_classes());
    for i in 0..ds.len() {
        msg.classes[ds.label(i)].observe(&ds.row_f64(i));
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_symmetric_psd, rel_error};
    use proptest::prelude::*;

    fn one_d(class: usize, xs: &[f64]) -> ClassStats {
        let pts: Vec<_> = xs.iter().map(|&x| DVector::from_element(1, x)).collect();
        ClassStats::from_points(class, 1, pts.iter())
    }

    #[test]
    fn single_sample() {
        let ds = EmbeddingDataset::from_rows(1, vec![0], &[vec![1.0, 0.0]]).unwrap();
        let msg = compute_stats(0, &ds);
        let cs = &msg.classes[0];
        assert_eq!(cs.count, 1);
        assert_eq!(cs.sum.as_slice(), &[1.0, 0.0]);
        assert_eq!(cs.raw_moment, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn hand_accumulation_and_scatter() {
        let cs = one_d(0, &[0.0, 2.0]);
        assert_eq!(cs.count, 2);
        assert_eq!(cs.sum[0], 2.0);
        assert_eq!(cs.raw_moment[(0, 0)], 4.0);
        let (mean, scatter) = cs.scatter().unwrap();
        assert_eq!(mean[0], 1.0);
        assert_eq!(scatter[(0, 0)], 2.0);

        let (mean, scatter) = one_d(0, &[1.0, 3.0]).scatter().unwrap();
        assert_eq!(mean[0], 2.0);
        assert_eq!(scatter[(0, 0)], 2.0);

        let (_, scatter) = one_d(0, &[0.7]).scatter().unwrap();
        assert_eq!(scatter[(0, 0)], 0.0);
    }

    #[test]
    fn empty_class_has_no_mean() {
        assert!(matches!(ClassStats::zero(0, 3).scatter(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn empty_dataset_gives_zero_message() {
        let ds = EmbeddingDataset::empty(3, 2).unwrap();
        assert_eq!(compute_stats(4, &ds), ClientStatsMessage::zero(4, 3, 2));
    }

    #[test]
    fn merge_identity_and_split_equivalence() {
        let x = one_d(0, &[0.5, -1.0]);
        assert_eq!(x.merge(&ClassStats::zero(0, 1)).unwrap(), x);
        let merged = one_d(0, &[0.0]).merge(&one_d(0, &[2.0])).unwrap();
        assert_eq!(merged, one_d(0, &[0.0, 2.0]));
    }

    #[test]
    fn merge_rejects_mismatch() {
        assert!(one_d(0, &[1.0]).merge(&one_d(1, &[1.0])).is_err());
        assert!(one_d(0, &[1.0]).merge(&ClassStats::zero(0, 2)).is_err());
    }

    #[test]
    fn wire_round_trip_and_truncation() {
        let ds = EmbeddingDataset::from_rows(
            3,
            vec![0, 2, 2],
            &[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.25]],
        )
        .unwrap();
        let msg = compute_stats(7, &ds);
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 20 + 3 * (8 + 8 * (2 + 3)));
        assert_eq!(ClientStatsMessage::from_bytes(&bytes).unwrap(), msg);
        assert!(matches!(
            ClientStatsMessage::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }

    fn arb_rows() -> impl Strategy<Value = (usize, Vec<u32>, Vec<Vec<f64>>)> {
        (1usize..5, 1usize..4, 1usize..40).prop_flat_map(|(d, c, n)| {
            (
                Just(c),
                proptest::collection::vec(0..c as u32, n),
                proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n),
            )
        })
    }

    proptest! {
        #[test]
        fn federated_split_equals_pooled((c, labels, rows) in arb_rows(), cuts in proptest::collection::vec(0usize..40, 0..4)) {
            let ds = EmbeddingDataset::from_rows(c, labels, &rows).unwrap();
            let pooled = compute_stats(0, &ds);
            let mut bounds: Vec<usize> = cuts.into_iter().map(|x| x % (ds.len() + 1)).collect();
            bounds.push(0);
            bounds.push(ds.len());
            bounds.sort();
            let parts: Vec<_> = bounds
                .windows(2)
                .enumerate()
                .map(|(k, w)| compute_stats(k as u32, &ds.subset(&(w[0]..w[1]).collect::<Vec<_>>())))
                .collect();
            let merged = ClientStatsMessage::merge_all(&parts).unwrap();
            for (a, b) in merged.classes.iter().zip(&pooled.classes) {
                prop_assert_eq!(a.count, b.count);
                prop_assert!(rel_error(a.sum.as_slice(), b.sum.as_slice(), 1.0) < 1e-9);
                prop_assert!(rel_error(a.raw_moment.as_slice(), b.raw_moment.as_slice(), 1.0) < 1e-9);
            }
        }

        #[test]
        fn scatter_is_psd((c, labels, rows) in arb_rows()) {
            let ds = EmbeddingDataset::from_rows(c, labels, &rows).unwrap();
            for cs in compute_stats(0, &ds).classes.iter().filter(|cs| cs.count > 0) {
                let (_, s) = cs.scatter().unwrap();
                prop_assert!(is_symmetric_psd(&s, 1e-9));
            }
        }

        #[test]
        fn merge_commutes_and_associates((c, labels, rows) in arb_rows()) {
            let ds = EmbeddingDataset::from_rows(c, labels, &rows).unwrap();
            let n = ds.len();
            let third: Vec<Vec<usize>> = (0..3).map(|k| (0..n).filter(|i| i % 3 == k).collect()).collect();
            let [a, b, cc] = [0, 1, 2].map(|k| compute_stats(0, &ds.subset(&third[k])));
            let ab = a.merge(&b).unwrap();
            let ba = b.merge(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let left = ab.merge(&cc).unwrap();
            let right = a.merge(&b.merge(&cc).unwrap()).unwrap();
            for (x, y) in left.classes.iter().zip(&right.classes) {
                prop_assert!(rel_error(x.raw_moment.as_slice(), y.raw_moment.as_slice(), 1.0) < 1e-10);
                prop_assert!(rel_error(x.sum.as_slice(), y.sum.as_slice(), 1.0) < 1e-10);
            }
        }

        #[test]
        fn wire_format_round_trips((c, labels, rows) in arb_rows()) {
            let ds = EmbeddingDataset::from_rows(c, labels, &rows).unwrap();
            let msg = compute_stats(3, &ds);
            let back = ClientStatsMessage::from_bytes(&msg.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), msg.to_bytes());
        }
    }
}
