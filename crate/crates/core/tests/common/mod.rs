//! Helpers shared by the integration tests: textbook oracles and small
//! synthetic federations.

#![allow(dead_code)]

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tofa::partition::{partition, ClientSplit};
use tofa::synth::{synth_generate, synth_prompts, CovarianceSpec, MeanSpec, SynthConfig, SynthOutput};
use tofa::transport::{InProcessBus, Pipeline, Transport, TransportCounts};
use tofa::{EmbeddingDataset, NiwPosterior, PartitionScheme, PartitionSpec, PromptBank};

/// max|a − b| / max|b|, with `floor` guarding an all-zero reference.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}

/// Largest relative error over the fields of two posteriors.
pub fn posterior_rel_err(a: &NiwPosterior, b: &NiwPosterior) -> f64 {
    let mut worst = rel_err(a.scale.as_slice(), b.scale.as_slice(), 1e-300);
    worst = worst.max(rel_err(&[a.dof], &[b.dof], 1e-300));
    worst = worst.max(rel_err(&a.kappas, &b.kappas, 1e-300));
    let am: Vec<f64> = a.means.iter().flat_map(|m| m.iter().cloned()).collect();
    let bm: Vec<f64> = b.means.iter().flat_map(|m| m.iter().cloned()).collect();
    worst.max(rel_err(&am, &bm, 1e-300))
}

/// Normal-inverse-Wishart posterior written out the textbook way, from the
/// raw points of each class and a prior with zero means:
/// κ = κ0 + n, m = Σz / κ, ν = Σn, S = s0·I + Σ_c (Σ zzᵀ − κ m mᵀ).
pub fn niw_oracle(points: &[Vec<DVector<f64>>], dim: usize, s0: f64, kappa0: f64) -> NiwPosterior {
    let mut scale = DMatrix::identity(dim, dim) * s0;
    let mut dof = 0.0;
    let mut means = Vec::new();
    let mut kappas = Vec::new();
    for class_points in points {
        let n = class_points.len() as f64;
        let kappa = kappa0 + n;
        let mut sum = DVector::zeros(dim);
        for z in class_points {
            sum += z;
            scale += z * z.transpose();
        }
        let m = sum / kappa;
        scale -= &m * m.transpose() * kappa;
        dof += n;
        means.push(m);
        kappas.push(kappa);
    }
    NiwPosterior {
        scale: (&scale + scale.transpose()) * 0.5,
        dof,
        means,
        kappas,
    }
}

/// Rows of `ds` grouped by class.
pub fn points_by_class(ds: &EmbeddingDataset) -> Vec<Vec<DVector<f64>>> {
    let mut out = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        out[ds.label(i)].push(ds.row_f64(i));
    }
    out
}

pub fn random_normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        d,
        (0..d).map(|_| {
            // Box-Muller keeps the oracle free of the crate's samplers
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }),
    )
}

pub fn mixture(classes: usize, dim: usize, per_class: usize, variance: f64, mean_scale: f64, seed: u64) -> SynthOutput {
    synth_generate(&SynthConfig {
        num_classes: classes,
        dim,
        clients: 1,
        means: MeanSpec::Random { scale: mean_scale },
        covariance: CovarianceSpec::Isotropic(variance),
        per_class,
        seed,
    })
    .unwrap()
}

/// A small federation: mixture data, a partition and a matching prompt bank.
pub struct Federation {
    pub data: SynthOutput,
    pub clients: Vec<ClientSplit>,
    pub bank: PromptBank,
}

pub fn federation(scheme: PartitionScheme, clients: usize, shots: Option<usize>, seed: u64) -> Federation {
    let data = mixture(6, 8, 40, 0.3, 1.5, seed);
    let spec = PartitionSpec {
        scheme,
        clients,
        shots,
        test_fraction: 0.5,
        seed,
    };
    let split = partition(&data.pooled, &spec).unwrap();
    let bank = synth_prompts(&data.truth, 2, 0.3, 1, seed + 1).unwrap();
    Federation {
        data,
        clients: split,
        bank,
    }
}

/// Per-client prompt banks drawn around the same class directions.
pub fn client_banks(data: &SynthOutput, clients: usize, seed: u64) -> Vec<PromptBank> {
    (0..clients)
        .map(|k| synth_prompts(&data.truth, 2, 0.2, 1, seed + 100 + k as u64).unwrap())
        .collect()
}

/// Counts calls on its own, independently of the wrapped bus.
#[derive(Default)]
pub struct CountingTransport {
    inner: InProcessBus,
    pub calls: Mutex<Calls>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Calls {
    pub visual_uploads: Vec<u32>,
    pub text_uploads: Vec<u32>,
    pub broadcasts: usize,
}

impl Transport for CountingTransport {
    fn upload(&self, client: u32, pipeline: Pipeline, payload: Vec<u8>) -> tofa::Result<()> {
        {
            let mut c = self.calls.lock().unwrap();
            match pipeline {
                Pipeline::Visual => c.visual_uploads.push(client),
                Pipeline::Text => c.text_uploads.push(client),
            }
        }
        self.inner.upload(client, pipeline, payload)
    }

    fn collect(&self, pipeline: Pipeline) -> tofa::Result<Vec<(u32, Vec<u8>)>> {
        self.inner.collect(pipeline)
    }

    fn broadcast(&self, payload: Vec<u8>) -> tofa::Result<()> {
        self.calls.lock().unwrap().broadcasts += 1;
        self.inner.broadcast(payload)
    }

    fn receive_broadcast(&self) -> tofa::Result<Vec<u8>> {
        self.inner.receive_broadcast()
    }

    fn counts(&self) -> TransportCounts {
        self.inner.counts()
    }
}
