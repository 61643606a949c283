//! `tofa` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or parameter error, 2 data or validation
//! error, 3 numerical failure. Every failure prints one line to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::embedding::{load_embeddings, load_embeddings_dir, load_prompts, normalize, save_embeddings, save_prompts};
use crate::error::{Error, Result};
use crate::partition::{partition, ClientSplit, PartitionScheme};
use crate::round::{run_round, EvalReport, Head, PromptSource, RunConfig};
use crate::stats::compute_stats;
use crate::synth::{synth_generate, synth_prompts, CovarianceSpec, MeanSpec, SynthConfig};
use crate::transport::{DirTransport, InProcessBus, Transport};
use crate::{EmbeddingDataset, PromptBank};

#[derive(Debug, Parser)]
#[command(name = "tofa", version, about = "Training-free one-shot federated adaptation")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads (also TOFA_THREADS); defaults to all cores.
    #[arg(long, global = true, env = "TOFA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Gaussian-mixture embedding set and a matching prompt bank.
    Synth(SynthArgs),
    /// Split a pooled embedding set into per-client train/test files.
    Partition(PartitionArgs),
    /// Compute one client's sufficient-statistics message.
    Stats(StatsArgs),
    /// Partition, run one federated round and evaluate.
    Run(RunArgs),
    /// Run and evaluate on an already partitioned client directory.
    Eval(EvalArgs),
    /// Accuracy-vs-α and accuracy-vs-shots tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Isotropic variance σ².
    #[arg(long, default_value_t = 0.25)]
    variance: f64,
    /// Standard deviation of the random class means.
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    /// Informative augmented prompts per class.
    #[arg(long, default_value_t = 2)]
    informative: usize,
    /// Random planted prompts per class.
    #[arg(long, default_value_t = 1)]
    planted: usize,
    #[arg(long, default_value_t = 0.3)]
    prompt_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
    /// Output prompt bank.
    #[arg(long)]
    prompts_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Embedding file, or a directory of per-domain files.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 0)]
    client_id: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Default)]
struct SplitFlags {
    /// class-split | dirichlet:<β> | by-domain | iid
    #[arg(long)]
    partition: Option<PartitionScheme>,
    #[arg(long)]
    clients: Option<usize>,
    /// Training samples per class per client; "all" keeps every sample.
    #[arg(long, value_parser = parse_shots)]
    shots: Option<ShotsArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct ShotsArg(Option<usize>);

fn parse_shots(s: &str) -> std::result::Result<ShotsArg, String> {
    if s == "all" {
        return Ok(ShotsArg(None));
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("shots must be a positive integer or \"all\", got {s:?}")),
        Ok(n) => Ok(ShotsArg(Some(n))),
    }
}

#[derive(Debug, Args, Default)]
struct ModelFlags {
    /// Weight of the global evidence, in [0, 1].
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_t: Option<f64>,
    #[arg(long)]
    clip_temp: Option<f64>,
    #[arg(long)]
    kappa_filter: Option<f64>,
    /// Screen per-client prompt sets against each other.
    #[arg(long)]
    prefilter: bool,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    no_calibration: bool,
    /// fused | visual | text
    #[arg(long)]
    head: Option<Head>,
    /// Keep embeddings as stored instead of unit-normalizing them.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Embedding file, or a directory of per-domain files.
    #[arg(long)]
    train: PathBuf,
    /// Prompt bank, or a directory with one bank per client.
    #[arg(long)]
    prompts: PathBuf,
    /// Report path; a .csv table and a timings file are written alongside.
    #[arg(long)]
    out: PathBuf,
    /// TOML config, or a previous JSON report whose config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exchange messages through files under this directory.
    #[arg(long)]
    transport_dir: Option<PathBuf>,
    #[command(flatten)]
    split: SplitFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of client_*/ folders holding train.tfe and test.tfe.
    #[arg(long)]
    clients: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    alphas: Vec<f64>,
    #[arg(long = "shot-grid", value_delimiter = ',', default_value = "1,2,4,8,16")]
    shot_grid: Vec<usize>,
    #[command(flatten)]
    split: SplitFlags,
    #[command(flatten)]
    model: ModelFlags,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", line.join(" "));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    let wd = cli.workdir;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(&wd, a),
        Command::Partition(a) => partition_cmd(&wd, a),
        Command::Stats(a) => stats_cmd(&wd, a),
        Command::Run(a) => run_cmd(&wd, a),
        Command::Eval(a) => eval_cmd(&wd, a),
        Command::Report(a) => report_cmd(&wd, a),
    })
}

fn resolve(wd: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        wd.join(p)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads a TOML config, or the `config` section of a JSON report.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: &dyn std::fmt::Display| Error::InvalidParameter(format!("config {}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        serde_json::from_value(v).map_err(|e| bad(&e))
    } else {
        toml::from_str(&text).map_err(|e| bad(&e))
    }
}

fn base_config(wd: &Path, config: &Option<PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => load_config(&resolve(wd, p)),
        None => Ok(RunConfig::default()),
    }
}

impl SplitFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.partition {
            cfg.partition.scheme = s;
        }
        if let Some(k) = self.clients {
            cfg.partition.clients = k;
        }
        if let Some(ShotsArg(s)) = self.shots {
            cfg.partition.shots = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.tau_t, self.tau_t);
        set(&mut cfg.clip_temp, self.clip_temp);
        set(&mut cfg.kappa_filter, self.kappa_filter);
        set(&mut cfg.ridge, self.ridge);
        if self.prefilter {
            cfg.prefilter = true;
        }
        if self.no_calibration {
            cfg.calibration = false;
        }
        if self.no_normalize {
            cfg.normalize = false;
        }
        if let Some(h) = self.head {
            cfg.head = h;
        }
    }
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<EmbeddingDataset> {
    let ds = if path.is_dir() {
        load_embeddings_dir(path)?
    } else {
        load_embeddings(path)?
    };
    if cfg.normalize {
        normalize(&ds)
    } else {
        Ok(ds)
    }
}

fn load_prompt_source(path: &Path, cfg: &RunConfig) -> Result<PromptSource> {
    let prep = |b: PromptBank| if cfg.normalize { b.normalize() } else { Ok(b) };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tfp"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Validation(format!("no .tfp files in {}", path.display())));
        }
        let banks = files
            .iter()
            .map(|f| prep(load_prompts(f)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptSource::PerClient(banks))
    } else {
        Ok(PromptSource::Shared(prep(load_prompts(path)?)?))
    }
}

fn synth(wd: &Path, a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        dim: a.dim,
        clients: 1,
        means: MeanSpec::Random { scale: a.mean_scale },
        covariance: CovarianceSpec::Isotropic(a.variance),
        per_class: a.per_class,
        seed: a.seed,
    };
    let out = synth_generate(&cfg)?;
    save_embeddings(resolve(wd, &a.out), &out.pooled)?;
    if let Some(p) = &a.prompts_out {
        let bank = synth_prompts(&out.truth, a.informative, a.prompt_noise, a.planted, a.seed.wrapping_add(1))?;
        save_prompts(resolve(wd, p), &bank)?;
    }
    Ok(())
}

fn client_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("client_{k:03}"))
}

fn partition_cmd(wd: &Path, a: PartitionArgs) -> Result<()> {
    let mut cfg = base_config(wd, &a.config)?;
    a.split.apply(&mut cfg);
    cfg.validate()?;
    let ds = load_data(&resolve(wd, &a.train), &cfg)?;
    let spec = cfg.partition_spec();
    let splits = partition(&ds, &spec)?;
    let out = resolve(wd, &a.out);
    for (k, s) in splits.iter().enumerate() {
        let dir = client_dir(&out, k);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_embeddings(dir.join("train.tfe"), &s.train)?;
        save_embeddings(dir.join("test.tfe"), &s.test)?;
    }
    let spec_json = serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n";
    write_file(&out.join("partition.json"), spec_json.as_bytes())
}

fn stats_cmd(wd: &Path, a: StatsArgs) -> Result<()> {
    let ds = load_embeddings(resolve(wd, &a.train))?;
    compute_stats(a.client_id, &ds).save(resolve(wd, &a.out))
}

fn load_client_dirs(root: &Path, cfg: &RunConfig) -> Result<Vec<ClientSplit>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("client_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no client_* directories in {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            Ok(ClientSplit {
                train: load_data(&d.join("train.tfe"), cfg)?,
                test: load_data(&d.join("test.tfe"), cfg)?,
            })
        })
        .collect()
}

fn execute_round(
    clients: &[ClientSplit],
    prompts: &PromptSource,
    cfg: &RunConfig,
    transport_dir: Option<PathBuf>,
) -> Result<EvalReport> {
    let transport: Box<dyn Transport> = match transport_dir {
        Some(d) => Box::new(DirTransport::new(d)?),
        None => Box::new(InProcessBus::new()),
    };
    Ok(run_round(clients, prompts, cfg, transport.as_ref())?.report)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_file(out, report.to_json().as_bytes())?;
    write_file(&out.with_extension("csv"), report.to_table().as_bytes())?;
    let timings = serde_json::to_string_pretty(&report.timings).expect("timings serialize") + "\n";
    write_file(&out.with_extension("timings.json"), timings.as_bytes())
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.display().to_string()))
        .collect()
}

fn run_cmd(wd: &Path, a: RunArgs) -> Result<()> {
    let mut cfg = base_config(wd, &a.config)?;
    a.split.apply(&mut cfg);
    a.model.apply(&mut cfg);
    cfg.validate()?;
    let ds = load_data(&resolve(wd, &a.train), &cfg)?;
    let prompts = load_prompt_source(&resolve(wd, &a.prompts), &cfg)?;
    let clients = partition(&ds, &cfg.partition_spec())?;
    let mut report = execute_round(&clients, &prompts, &cfg, a.transport_dir.map(|d| resolve(wd, &d)))?;
    report.inputs = inputs(&[("train", &a.train), ("prompts", &a.prompts)]);
    log_summary(&report);
    write_report(&resolve(wd, &a.out), &report)
}

fn eval_cmd(wd: &Path, a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(wd, &a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    a.model.apply(&mut cfg);
    cfg.validate()?;
    let clients = load_client_dirs(&resolve(wd, &a.clients), &cfg)?;
    let prompts = load_prompt_source(&resolve(wd, &a.prompts), &cfg)?;
    let mut report = execute_round(&clients, &prompts, &cfg, None)?;
    report.inputs = inputs(&[("clients", &a.clients), ("prompts", &a.prompts)]);
    log_summary(&report);
    write_report(&resolve(wd, &a.out), &report)
}

fn log_summary(report: &EvalReport) {
    if let Some(avg) = report.average {
        log::info!(
            "average accuracy: visual {:.4}, text {:.4}, fused {:.4}",
            avg.visual,
            avg.text,
            avg.fused
        );
    }
}

fn csv_row(sweep: &str, value: String, report: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let avg = report.average;
    format!(
        "{sweep},{value},{},{},{},{}\n",
        f(avg.map(|a| a.visual)),
        f(avg.map(|a| a.text)),
        f(avg.map(|a| a.fused)),
        f(report.average_all_class.map(|a| a.fused)),
    )
}

fn report_cmd(wd: &Path, a: ReportArgs) -> Result<()> {
    let mut cfg = base_config(wd, &a.config)?;
    a.split.apply(&mut cfg);
    a.model.apply(&mut cfg);
    cfg.validate()?;
    let ds = load_data(&resolve(wd, &a.train), &cfg)?;
    let prompts = load_prompt_source(&resolve(wd, &a.prompts), &cfg)?;

    let mut table = String::from("sweep,value,visual,text,fused,fused_all_class\n");
    let clients = partition(&ds, &cfg.partition_spec())?;
    for &alpha in &a.alphas {
        let c = RunConfig { alpha, ..cfg.clone() };
        c.validate()?;
        let report = execute_round(&clients, &prompts, &c, None)?;
        table.push_str(&csv_row("alpha", format!("{alpha}"), &report));
    }
    for &shots in &a.shot_grid {
        let mut c = cfg.clone();
        c.partition.shots = Some(shots);
        c.validate()?;
        let clients = partition(&ds, &c.partition_spec())?;
        let report = execute_round(&clients, &prompts, &c, None)?;
        table.push_str(&csv_row("shots", shots.to_string(), &report));
    }
    write_file(&resolve(wd, &a.out), table.as_bytes())
}
