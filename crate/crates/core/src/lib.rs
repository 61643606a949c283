//! One-shot, training-free federated adaptation of vision-language embeddings.
//!
//! Clients summarize class-conditional embedding statistics in a single upload.
//! The server pools them into a global Normal-Inverse-Wishart posterior over
//! class prototypes and aligns prompt-embedding importance scores across
//! clients. Each client then derives a personalized posterior (power prior),
//! fits a shared-covariance GDA head, and fuses it with the weighted text head
//! through a calibrated, sample-wise mixing rule.
//!
//! Module map:
//! - [`embedding`]: datasets, prompt banks, `.tfe` / `.tfp` file formats
//! - [`stats`]: per-class sufficient statistics and the `.tfs` wire format
//! - [`bayes`]: NIW posterior updates (global and personalized)
//! - [`gda`]: the Gaussian discriminant visual classifier
//! - [`text`]: prompt confidences, global alignment, text classifier
//! - [`fusion`]: temperature calibration and adaptive fusion
//! - [`partition`], [`synth`], [`transport`], [`round`]: the federated simulator
//! - [`cli`]: command-line front end

pub mod bayes;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod gda;
pub mod linalg;
pub mod partition;
pub mod round;
pub mod stats;
pub mod synth;
pub mod text;
pub mod transport;
mod wire;

pub use bayes::{NiwPosterior, PriorConfig};
pub use embedding::{ClassMeta, EmbeddingDataset, PromptBank};
pub use error::{Error, Result};
pub use fusion::{CalibratedClassifier, FusionModel, LogitModel};
pub use gda::GdaClassifier;
pub use partition::{PartitionScheme, PartitionSpec};
pub use round::{EvalReport, RunConfig};
pub use stats::{ClassStats, ClientStatsMessage};
pub use text::{AlignedPromptWeights, ClientTextReport, TextClassifier};

/// Numerically stable softmax of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
