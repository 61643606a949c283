//! The one-shot federated round: client uploads, server reduction and
//! broadcast, client-side personalization, calibration and evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{global_posterior, personalized_posterior, NiwPosterior, PriorConfig};
use crate::embedding::{EmbeddingDataset, PromptBank};
use crate::error::{Error, Result};
use crate::fusion::{Calibration, CalibratedClassifier, CalibrationSettings, FusionModel};
use crate::gda::{gda_fit, GdaClassifier};
use crate::partition::{ClientSplit, PartitionScheme, PartitionSpec};
use crate::stats::{compute_stats, ClientStatsMessage};
use crate::text::{
    align_scores_masked, client_confidences, combine_prompts, AlignedPromptWeights, ClientTextReport,
    TextClassifier, DEFAULT_CLIP_TEMP, DEFAULT_EPS_U, DEFAULT_KAPPA_FILTER, DEFAULT_TAU_T,
};
use crate::transport::{Envelope, Pipeline, Transport, TransportCounts};
use crate::argmax;

const TAG_REPORT: &[u8; 4] = b"RPT ";
const TAG_PROMPTS: &[u8; 4] = b"PRM ";
const TAG_STATS: &[u8; 4] = b"STS ";
const TAG_POSTERIOR: &[u8; 4] = b"NIW ";
const TAG_WEIGHTS: &[u8; 4] = b"WGT ";

/// Which head the report's headline accuracy refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Fused,
    Visual,
    Text,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Head::Fused),
            "visual" => Ok(Head::Visual),
            "text" => Ok(Head::Text),
            _ => Err(Error::InvalidParameter(format!(
                "unknown head {s:?}; expected fused, visual or text"
            ))),
        }
    }
}

/// How the pooled data is split into clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub shots: Option<usize>,
    pub test_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: PartitionScheme::ClassSplit,
            clients: 10,
            shots: Some(16),
            test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Power-prior weight of the global evidence.
    pub alpha: f64,
    /// Temperature of the prompt-weight softmax.
    pub tau_t: f64,
    /// Temperature of the text classifier logits.
    pub clip_temp: f64,
    pub kappa_filter: f64,
    /// Cross-client prompt screening; off unless clients bring their own prompts.
    pub prefilter: bool,
    pub ridge: f64,
    pub s0: f64,
    pub kappa0: f64,
    pub eps_u: f64,
    pub calibration: bool,
    pub calibration_tol: f64,
    pub seed: u64,
    pub head: Head,
    /// Unit-normalize embeddings at ingestion.
    pub normalize: bool,
    pub partition: PartitionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 1.0,
            tau_t: DEFAULT_TAU_T,
            clip_temp: DEFAULT_CLIP_TEMP,
            kappa_filter: DEFAULT_KAPPA_FILTER,
            prefilter: false,
            ridge: 1e-4,
            s0: 1e-6,
            kappa0: 1e-6,
            eps_u: DEFAULT_EPS_U,
            calibration: true,
            calibration_tol: 1e-3,
            seed: 0,
            head: Head::Fused,
            normalize: true,
            partition: PartitionConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        positive("tau_t", self.tau_t)?;
        positive("clip_temp", self.clip_temp)?;
        positive("eps_u", self.eps_u)?;
        positive("calibration_tol", self.calibration_tol)?;
        if !(self.kappa_filter > 0.0 && self.kappa_filter < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa_filter must lie in (0, 1), got {}",
                self.kappa_filter
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidParameter(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        self.prior().validate()?;
        self.partition_spec().validate()
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            s0: self.s0,
            kappa0: self.kappa0,
        }
    }

    pub fn calibration_settings(&self) -> CalibrationSettings {
        CalibrationSettings {
            tol: self.calibration_tol,
            ..Default::default()
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.scheme,
            clients: self.partition.clients,
            shots: self.partition.shots,
            test_fraction: self.partition.test_fraction,
            seed: self.seed,
        }
    }
}

/// Prompt embeddings available to the clients.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// Every client holds the same bank.
    Shared(PromptBank),
    /// Client k holds bank k (e.g. produced by different language models).
    PerClient(Vec<PromptBank>),
}

impl PromptSource {
    fn for_client(&self, k: usize) -> &PromptBank {
        match self {
            PromptSource::Shared(b) => b,
            PromptSource::PerClient(v) => &v[k],
        }
    }
}

pub type ClientFusion = FusionModel<GdaClassifier, Arc<TextClassifier>>;

/// Everything a client ends the round with.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub client: u32,
    pub present: Vec<bool>,
    pub posterior: NiwPosterior,
    pub fusion: ClientFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadAccuracy {
    pub visual: f64,
    pub text: f64,
    pub fused: f64,
}

impl HeadAccuracy {
    pub fn get(&self, head: Head) -> f64 {
        match head {
            Head::Visual => self.visual,
            Head::Text => self.text,
            Head::Fused => self.fused,
        }
    }

    fn mean<'a>(items: impl Iterator<Item = &'a HeadAccuracy>) -> Option<HeadAccuracy> {
        let v: Vec<_> = items.collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        Some(HeadAccuracy {
            visual: v.iter().map(|a| a.visual).sum::<f64>() / n,
            text: v.iter().map(|a| a.text).sum::<f64>() / n,
            fused: v.iter().map(|a| a.fused).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientEval {
    pub client: u32,
    pub train_samples: usize,
    pub test_samples: usize,
    pub present_classes: usize,
    /// Empty test split: no accuracies, excluded from the averages.
    pub absent: bool,
    /// Argmax restricted to the classes present in the client's training data.
    pub accuracy: Option<HeadAccuracy>,
    /// Argmax over all classes.
    pub all_class_accuracy: Option<HeadAccuracy>,
    pub eta: Option<EtaStats>,
    pub visual_calibration: Calibration,
    pub text_calibration: Calibration,
}

/// Wall-clock seconds per phase. Not part of the serialized report, which
/// must be reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub stats: f64,
    pub alignment: f64,
    pub posterior: f64,
    pub calibration: f64,
    pub eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    pub clients: Vec<ClientEval>,
    /// Mean over non-absent clients of present-class accuracy.
    pub average: Option<HeadAccuracy>,
    pub average_all_class: Option<HeadAccuracy>,
    pub headline: Option<f64>,
    pub messages: TransportCounts,
    pub prompt_weights: AlignedPromptWeights,
    #[serde(skip)]
    pub timings: Timings,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per client and head.
    pub fn to_table(&self) -> String {
        let mut out = String::from("client,head,accuracy,all_class_accuracy,test_samples\n");
        for c in &self.clients {
            for (name, head) in [("visual", Head::Visual), ("text", Head::Text), ("fused", Head::Fused)] {
                let fmt = |a: &Option<HeadAccuracy>| a.map(|a| format!("{:.6}", a.get(head))).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.client,
                    name,
                    fmt(&c.accuracy),
                    fmt(&c.all_class_accuracy),
                    c.test_samples
                ));
            }
        }
        out
    }
}

/// Server-side state after the broadcast.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_stats: ClientStatsMessage,
    pub global_posterior: NiwPosterior,
    pub weights: AlignedPromptWeights,
    pub bank: PromptBank,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub server: ServerState,
    pub models: Vec<ClientModel>,
    pub report: EvalReport,
}

fn check_inputs(clients: &[ClientSplit], prompts: &PromptSource) -> Result<(usize, usize)> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Validation("a round needs at least one client".into()))?;
    let (d, c) = (first.train.dim(), first.train.num_classes());
    for (k, split) in clients.iter().enumerate() {
        for ds in [&split.train, &split.test] {
            if ds.dim() != d || ds.num_classes() != c {
                return Err(Error::DimensionMismatch(format!(
                    "client {k} has (d={}, C={}), client 0 has (d={d}, C={c})",
                    ds.dim(),
                    ds.num_classes()
                )));
            }
        }
    }
    if let PromptSource::PerClient(banks) = prompts {
        if banks.len() != clients.len() {
            return Err(Error::Validation(format!(
                "{} prompt banks for {} clients",
                banks.len(),
                clients.len()
            )));
        }
    }
    for k in 0..clients.len() {
        let b = prompts.for_client(k);
        if b.dim() != d || b.num_classes() != c {
            return Err(Error::DimensionMismatch(format!(
                "prompt bank of client {k} is (d={}, C={}), data is (d={d}, C={c})",
                b.dim(),
                b.num_classes()
            )));
        }
    }
    Ok((d, c))
}

/// Client phase: each client uploads its statistics and its text report.
fn client_uploads(
    clients: &[ClientSplit],
    prompts: &PromptSource,
    send_prompts: bool,
    transport: &dyn Transport,
    timings: &mut Timings,
) -> Result<()> {
    let t = Instant::now();
    clients
        .par_iter()
        .enumerate()
        .try_for_each(|(k, split)| {
            let stats = compute_stats(k as u32, &split.train);
            transport.upload(k as u32, Pipeline::Visual, stats.to_bytes())
        })?;
    timings.stats += t.elapsed().as_secs_f64();

    let t = Instant::now();
    clients
        .par_iter()
        .enumerate()
        .try_for_each(|(k, split)| {
            let bank = prompts.for_client(k);
            let report = client_confidences(k as u32, bank, &split.train).map_err(|e| e.in_client(k))?;
            let mut env = Envelope::new().with(TAG_REPORT, report.to_bytes());
            if send_prompts {
                env = env.with(TAG_PROMPTS, bank.to_bytes());
            }
            transport.upload(k as u32, Pipeline::Text, env.to_bytes())
        })?;
    timings.alignment += t.elapsed().as_secs_f64();
    Ok(())
}

/// Server phase: pool statistics, align prompt weights and broadcast once.
fn server_step(
    num_clients: usize,
    prompts: &PromptSource,
    send_prompts: bool,
    cfg: &RunConfig,
    transport: &dyn Transport,
    timings: &mut Timings,
) -> Result<ServerState> {
    let t = Instant::now();
    let uploads = transport.collect(Pipeline::Visual)?;
    if uploads.len() != num_clients {
        return Err(Error::Validation(format!(
            "expected {num_clients} statistics uploads, received {}",
            uploads.len()
        )));
    }
    let messages = uploads
        .iter()
        .map(|(_, b)| ClientStatsMessage::from_bytes(b))
        .collect::<Result<Vec<_>>>()?;
    let global_stats = ClientStatsMessage::merge_all(&messages)?;
    let global_posterior = global_posterior(&global_stats, &cfg.prior())?;
    timings.posterior += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let uploads = transport.collect(Pipeline::Text)?;
    if uploads.len() != num_clients {
        return Err(Error::Validation(format!(
            "expected {num_clients} text uploads, received {}",
            uploads.len()
        )));
    }
    let envelopes = uploads
        .iter()
        .map(|(_, b)| Envelope::from_bytes(b))
        .collect::<Result<Vec<_>>>()?;
    let reports = envelopes
        .iter()
        .map(|e| ClientTextReport::from_bytes(e.require(TAG_REPORT)?))
        .collect::<Result<Vec<_>>>()?;
    let (bank, retained) = if send_prompts {
        let sets = envelopes
            .iter()
            .map(|e| PromptBank::from_bytes(e.require(TAG_PROMPTS)?))
            .collect::<Result<Vec<_>>>()?;
        let kappa = cfg.prefilter.then_some(cfg.kappa_filter);
        let out = combine_prompts(&sets, kappa)?;
        (out.bank, Some(out.retained))
    } else {
        (prompts.for_client(0).clone(), None)
    };
    let slots = bank.slots();
    let active: Vec<bool> = (0..bank.num_classes())
        .flat_map(|c| (0..slots).map(move |m| (c, m)))
        .map(|(c, m)| bank.is_active(c, m))
        .collect();
    let weights = align_scores_masked(&reports, cfg.tau_t, cfg.eps_u, &active, retained.as_deref())?;
    timings.alignment += t.elapsed().as_secs_f64();

    let broadcast = Envelope::new()
        .with(TAG_STATS, global_stats.to_bytes())
        .with(TAG_POSTERIOR, global_posterior.to_bytes())
        .with(TAG_WEIGHTS, weights.to_bytes())
        .with(TAG_PROMPTS, bank.to_bytes());
    transport.broadcast(broadcast.to_bytes())?;
    Ok(ServerState {
        global_stats,
        global_posterior,
        weights,
        bank,
    })
}

struct Broadcast {
    global_stats: ClientStatsMessage,
    weights: AlignedPromptWeights,
    bank: PromptBank,
}

fn receive(transport: &dyn Transport) -> Result<Broadcast> {
    let env = Envelope::from_bytes(&transport.receive_broadcast()?)?;
    // the posterior part is informational for clients; decode to validate it
    NiwPosterior::from_bytes(env.require(TAG_POSTERIOR)?)?;
    Ok(Broadcast {
        global_stats: ClientStatsMessage::from_bytes(env.require(TAG_STATS)?)?,
        weights: AlignedPromptWeights::from_bytes(env.require(TAG_WEIGHTS)?)?,
        bank: PromptBank::from_bytes(env.require(TAG_PROMPTS)?)?,
    })
}

/// Personalization phase for one client: personalized posterior, GDA head, text head,
/// calibration of both.
fn build_client(
    k: usize,
    split: &ClientSplit,
    cfg: &RunConfig,
    transport: &dyn Transport,
) -> Result<(ClientModel, f64, f64)> {
    let t = Instant::now();
    let msg = receive(transport)?;
    let local = compute_stats(k as u32, &split.train);
    let posterior = personalized_posterior(&msg.global_stats, &local, cfg.alpha, &cfg.prior())?;
    let (means, covariance) = posterior.map_estimate()?;
    let gda = gda_fit(&means, &covariance, cfg.ridge)?;
    let text = Arc::new(TextClassifier::new(&msg.bank, &msg.weights, cfg.clip_temp)?);
    let posterior_time = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let fusion = if cfg.calibration {
        let settings = cfg.calibration_settings();
        FusionModel::new(
            CalibratedClassifier::fit(gda, &split.train, &settings)?,
            CalibratedClassifier::fit(text, &split.train, &settings)?,
        )?
    } else {
        FusionModel::new(
            CalibratedClassifier::uncalibrated(gda),
            CalibratedClassifier::uncalibrated(text),
        )?
    };
    let model = ClientModel {
        client: k as u32,
        present: split.train.present_classes(),
        posterior,
        fusion,
    };
    Ok((model, posterior_time, t.elapsed().as_secs_f64()))
}

fn restricted_argmax(p: &[f64], allowed: &[bool]) -> usize {
    let masked: Vec<f64> = p
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { *v } else { f64::NEG_INFINITY })
        .collect();
    argmax(&masked)
}

/// Top-1 accuracy of each head on one client's test split.
pub fn evaluate_client(model: &ClientModel, train_samples: usize, test: &EmbeddingDataset) -> Result<ClientEval> {
    let base = ClientEval {
        client: model.client,
        train_samples,
        test_samples: test.len(),
        present_classes: model.present.iter().filter(|&&p| p).count(),
        absent: test.is_empty(),
        accuracy: None,
        all_class_accuracy: None,
        eta: None,
        visual_calibration: model.fusion.visual.calibration,
        text_calibration: model.fusion.text.calibration,
    };
    if test.is_empty() {
        return Ok(base);
    }
    let all = vec![true; model.present.len()];
    let mut hits = [[0usize; 3]; 2];
    let (mut eta_sum, mut eta_min, mut eta_max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..test.len() {
        let z: Vec<f64> = test.row(i).iter().map(|&v| v as f64).collect();
        let pred = model.fusion.fuse_predict(&z)?;
        let y = test.label(i);
        for (h, probs) in [&pred.visual, &pred.text, &pred.probs].into_iter().enumerate() {
            hits[0][h] += (restricted_argmax(probs, &model.present) == y) as usize;
            hits[1][h] += (restricted_argmax(probs, &all) == y) as usize;
        }
        eta_sum += pred.eta;
        eta_min = eta_min.min(pred.eta);
        eta_max = eta_max.max(pred.eta);
    }
    let n = test.len() as f64;
    let acc = |h: [usize; 3]| HeadAccuracy {
        visual: h[0] as f64 / n,
        text: h[1] as f64 / n,
        fused: h[2] as f64 / n,
    };
    Ok(ClientEval {
        accuracy: Some(acc(hits[0])),
        all_class_accuracy: Some(acc(hits[1])),
        eta: Some(EtaStats {
            mean: eta_sum / n,
            min: eta_min,
            max: eta_max,
        }),
        ..base
    })
}

/// Evaluates every client on its own test split.
pub fn evaluate(models: &[ClientModel], clients: &[ClientSplit]) -> Result<Vec<ClientEval>> {
    if models.len() != clients.len() {
        return Err(Error::Validation(format!(
            "{} models for {} clients",
            models.len(),
            clients.len()
        )));
    }
    models
        .par_iter()
        .zip(clients.par_iter())
        .map(|(m, s)| evaluate_client(m, s.train.len(), &s.test).map_err(|e| e.in_client(m.client as usize)))
        .collect()
}

/// Runs the complete one-shot round over `clients` and evaluates it.
pub fn run_round(
    clients: &[ClientSplit],
    prompts: &PromptSource,
    cfg: &RunConfig,
    transport: &dyn Transport,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    check_inputs(clients, prompts)?;
    let mut timings = Timings::default();
    let send_prompts = cfg.prefilter || matches!(prompts, PromptSource::PerClient(_));

    client_uploads(clients, prompts, send_prompts, transport, &mut timings)?;
    let server = server_step(clients.len(), prompts, send_prompts, cfg, transport, &mut timings)?;

    let built = clients
        .par_iter()
        .enumerate()
        .map(|(k, split)| build_client(k, split, cfg, transport).map_err(|e| e.in_client(k)))
        .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(built.len());
    for (m, tp, tc) in built {
        timings.posterior += tp;
        timings.calibration += tc;
        models.push(m);
    }

    let t = Instant::now();
    let evals = evaluate(&models, clients)?;
    timings.eval = t.elapsed().as_secs_f64();

    let average = HeadAccuracy::mean(evals.iter().filter_map(|e| e.accuracy.as_ref()));
    let average_all_class = HeadAccuracy::mean(evals.iter().filter_map(|e| e.all_class_accuracy.as_ref()));
    let report = EvalReport {
        tool: "tofa".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        inputs: BTreeMap::new(),
        clients: evals,
        headline: average.map(|a| a.get(cfg.head)),
        average,
        average_all_class,
        messages: transport.counts(),
        prompt_weights: server.weights.clone(),
        timings,
    };
    Ok(RoundOutcome { server, models, report })
}
