//! Splitting a labeled pool into federated clients, each with a private
//! train/test split.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingDataset;
use crate::error::{Error, Result};

const DIRICHLET_RETRIES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    /// Disjoint class subsets, dealt round-robin after a seeded shuffle.
    ClassSplit,
    /// Per-class client proportions drawn from a symmetric Dirichlet(β).
    Dirichlet { beta: f64 },
    /// One client per source domain.
    ByDomain,
    /// Every class spread evenly over all clients.
    Iid,
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::ClassSplit => write!(f, "class-split"),
            PartitionScheme::Dirichlet { beta } => write!(f, "dirichlet:{beta}"),
            PartitionScheme::ByDomain => write!(f, "by-domain"),
            PartitionScheme::Iid => write!(f, "iid"),
        }
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-split" => Ok(PartitionScheme::ClassSplit),
            "by-domain" => Ok(PartitionScheme::ByDomain),
            "iid" => Ok(PartitionScheme::Iid),
            "dirichlet" => Ok(PartitionScheme::Dirichlet { beta: 0.3 }),
            _ => {
                let beta = s
                    .strip_prefix("dirichlet:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::InvalidParameter(format!(
                            "unknown partition {s:?}; expected class-split, dirichlet:<beta>, by-domain or iid"
                        ))
                    })?;
                Ok(PartitionScheme::Dirichlet { beta })
            }
        }
    }
}

impl Serialize for PartitionScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PartitionScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    /// Ignored by `by-domain`, which makes one client per domain.
    pub clients: usize,
    /// Training samples kept per present class and client; the rest is test data.
    pub shots: Option<usize>,
    /// Test share of each class when `shots` is unset.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.5
}

impl PartitionSpec {
    pub fn new(scheme: PartitionScheme, clients: usize, shots: Option<usize>, seed: u64) -> Self {
        PartitionSpec {
            scheme,
            clients,
            shots,
            test_fraction: default_test_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidParameter("need at least one client".into()));
        }
        if let PartitionScheme::Dirichlet { beta } = self.scheme {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::InvalidParameter(format!("dirichlet beta must be positive, got {beta}")));
            }
        }
        if self.shots == Some(0) {
            return Err(Error::InvalidParameter("shots must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidParameter(format!(
                "test fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
}

impl ClientSplit {
    /// Classes with training data at this client.
    pub fn present_classes(&self) -> Vec<bool> {
        self.train.present_classes()
    }
}

fn indices_by_class(ds: &EmbeddingDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    by_class
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, beta: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Splits `rows` into consecutive chunks proportional to `props`.
fn split_by_proportions(rows: &[usize], props: &[f64]) -> Vec<Vec<usize>> {
    let n = rows.len();
    let mut out = Vec::with_capacity(props.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, p) in props.iter().enumerate() {
        cum += p;
        let end = if k + 1 == props.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        out.push(rows[start..end].to_vec());
        start = end;
    }
    out
}

fn assign(ds: &EmbeddingDataset, spec: &PartitionSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class = indices_by_class(ds);
    for rows in by_class.iter_mut() {
        rows.shuffle(rng);
    }
    let k = spec.clients;
    match spec.scheme {
        PartitionScheme::Iid => {
            let mut out = vec![Vec::new(); k];
            for rows in &by_class {
                for (j, &i) in rows.iter().enumerate() {
                    out[j % k].push(i);
                }
            }
            Ok(out)
        }
        PartitionScheme::ClassSplit => {
            if ds.num_classes() < k {
                return Err(Error::InvalidParameter(format!(
                    "class-split needs at least as many classes ({}) as clients ({k})",
                    ds.num_classes()
                )));
            }
            let mut classes: Vec<usize> = (0..ds.num_classes()).collect();
            classes.shuffle(rng);
            let mut out = vec![Vec::new(); k];
            for (j, &c) in classes.iter().enumerate() {
                out[j % k].extend_from_slice(&by_class[c]);
            }
            Ok(out)
        }
        PartitionScheme::Dirichlet { beta } => {
            let mut out = vec![Vec::new(); k];
            for rows in &by_class {
                let props = sample_dirichlet(rng, beta, k);
                for (client, chunk) in split_by_proportions(rows, &props).into_iter().enumerate() {
                    out[client].extend(chunk);
                }
            }
            Ok(out)
        }
        PartitionScheme::ByDomain => {
            let domains = ds.domains().ok_or_else(|| {
                Error::Validation("by-domain partition needs domain-tagged rows".into())
            })?;
            let n_domains = domains.iter().map(|&d| d as usize + 1).max().unwrap_or(0);
            let mut out = vec![Vec::new(); n_domains];
            for rows in &by_class {
                for &i in rows {
                    out[domains[i] as usize].push(i);
                }
            }
            Ok(out)
        }
    }
}

fn split_train_test(ds: &EmbeddingDataset, rows: &[usize], spec: &PartitionSpec) -> ClientSplit {
    let mut per_class = vec![Vec::new(); ds.num_classes()];
    for &i in rows {
        per_class[ds.label(i)].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rows in per_class {
        let keep = match spec.shots {
            Some(s) => s.min(rows.len()),
            None => ((1.0 - spec.test_fraction) * rows.len() as f64).ceil() as usize,
        };
        train.extend_from_slice(&rows[..keep]);
        test.extend_from_slice(&rows[keep..]);
    }
    ClientSplit {
        train: ds.subset(&train),
        test: ds.subset(&test),
    }
}

/// Deterministic (given the seed) split of `ds` into clients.
pub fn partition(ds: &EmbeddingDataset, spec: &PartitionSpec) -> Result<Vec<ClientSplit>> {
    spec.validate()?;
    let attempts = match spec.scheme {
        PartitionScheme::Dirichlet { .. } => DIRICHLET_RETRIES,
        _ => 1,
    };
    let mut last_empty = 0;
    for attempt in 0..attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
        let assigned = assign(ds, spec, &mut rng)?;
        let splits: Vec<ClientSplit> = assigned
            .iter()
            .map(|rows| split_train_test(ds, rows, spec))
            .collect();
        match splits.iter().position(|s| s.train.is_empty()) {
            None => return Ok(splits),
            Some(k) => last_empty = k,
        }
    }
    Err(Error::Validation(format!(
        "client {last_empty} received no training samples"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(num_classes: usize, per_class: usize) -> EmbeddingDataset {
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for c in 0..num_classes {
            for i in 0..per_class {
                labels.push(c as u32);
                rows.push(vec![c as f64, i as f64]);
            }
        }
        EmbeddingDataset::from_rows(num_classes, labels, &rows).unwrap()
    }

    #[test]
    fn parse_schemes() {
        assert_eq!("iid".parse::<PartitionScheme>().unwrap(), PartitionScheme::Iid);
        assert_eq!(
            "dirichlet:0.3".parse::<PartitionScheme>().unwrap(),
            PartitionScheme::Dirichlet { beta: 0.3 }
        );
        assert!("dirichlet:x".parse::<PartitionScheme>().is_err());
        assert!("round-robin".parse::<PartitionScheme>().is_err());
        let spec = PartitionSpec::new(PartitionScheme::Dirichlet { beta: 0.0 }, 3, None, 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = pool(3, 5);
        let spec = PartitionSpec {
            test_fraction: 0.0,
            ..PartitionSpec::new(PartitionScheme::Iid, 1, None, 7)
        };
        let out = partition(&ds, &spec).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].train.len(), 15);
        assert!(out[0].test.is_empty());
    }

    #[test]
    fn class_split_one_class_each() {
        let ds = pool(10, 4);
        let out = partition(&ds, &PartitionSpec::new(PartitionScheme::ClassSplit, 10, None, 3)).unwrap();
        let mut seen = [false; 10];
        for split in &out {
            let present: Vec<usize> = (0..10).filter(|&c| split.present_classes()[c]).collect();
            assert_eq!(present.len(), 1);
            assert!(!seen[present[0]]);
            seen[present[0]] = true;
        }
        assert!(partition(&ds, &PartitionSpec::new(PartitionScheme::ClassSplit, 11, None, 3)).is_err());
    }

    #[test]
    fn class_split_balances_class_counts() {
        let ds = pool(7, 2);
        let out = partition(&ds, &PartitionSpec::new(PartitionScheme::ClassSplit, 3, None, 1)).unwrap();
        let sizes: Vec<usize> = out
            .iter()
            .map(|s| s.present_classes().iter().filter(|&&p| p).count())
            .collect();
        assert_eq!(sizes.iter().sum::<usize>(), 7);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn shots_cap_training_rows() {
        let ds = pool(4, 30);
        let out = partition(&ds, &PartitionSpec::new(PartitionScheme::Iid, 3, Some(4), 0)).unwrap();
        for s in &out {
            assert!(s.train.class_counts().iter().all(|&n| n == 4));
            assert!(s.test.class_counts().iter().all(|&n| n == 6));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = pool(5, 40);
        let spec = PartitionSpec::new(PartitionScheme::Dirichlet { beta: 0.3 }, 4, Some(3), 11);
        assert_eq!(partition(&ds, &spec).unwrap(), partition(&ds, &spec).unwrap());
    }

    #[test]
    fn dirichlet_keeps_every_row() {
        let ds = pool(6, 50);
        let spec = PartitionSpec {
            test_fraction: 0.0,
            ..PartitionSpec::new(PartitionScheme::Dirichlet { beta: 0.3 }, 5, None, 2)
        };
        let out = partition(&ds, &spec).unwrap();
        let total: usize = out.iter().map(|s| s.train.len() + s.test.len()).sum();
        assert_eq!(total, 300);
        assert!(out.iter().all(|s| !s.train.is_empty()));
    }

    /// Repeated-sampling oracle: with β = 1000 each of 4 clients should get
    /// close to a quarter of every class.
    #[test]
    fn large_beta_concentrates() {
        let ds = pool(2, 400);
        let trials = 100;
        let mut good = 0;
        for seed in 0..trials {
            let spec = PartitionSpec {
                test_fraction: 0.0,
                ..PartitionSpec::new(PartitionScheme::Dirichlet { beta: 1000.0 }, 4, None, seed)
            };
            let out = partition(&ds, &spec).unwrap();
            let ok = out
                .iter()
                .all(|s| s.train.class_counts().iter().all(|&n| (n as f64 - 100.0).abs() <= 10.0));
            good += ok as usize;
        }
        assert!(good as f64 / trials as f64 >= 0.95, "{good}/{trials}");
    }

    #[test]
    fn by_domain_one_client_per_domain() {
        let a = pool(2, 3);
        let b = pool(2, 5);
        let ds = EmbeddingDataset::concat_domains(&[a, b]).unwrap();
        let spec = PartitionSpec {
            test_fraction: 0.0,
            ..PartitionSpec::new(PartitionScheme::ByDomain, 1, None, 0)
        };
        let out = partition(&ds, &spec).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].train.len(), 6);
        assert_eq!(out[1].train.len(), 10);
        assert!(partition(&pool(2, 3), &spec).is_err());
    }
}
