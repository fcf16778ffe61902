//! Experiment plumbing: resolved JSON configs with dotted overrides, the
//! per-seed metric log, parameter files, and the train / eval / ablate
//! runners used by the command-line tool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::algo::{rollout_returns, EvalMode, EvalReport, TrainError, Trainer, TrainerConfig, TrainerKind, UpdateMetrics};
use crate::envs::{DiffEnv, EnvConfig};
use crate::nn::{Mlp, MlpSpec, NnError};
use crate::policy::{ActionBounds, SquashedNormalPolicy};
use crate::rng::{derive, stream};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("override '{0}': expected dotted.path=value")]
    Override(String),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("parameter file: {0}")]
    Params(String),
    #[error("training failed at seed {seed}, iteration {iteration}")]
    Training {
        seed: u64,
        iteration: usize,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Fixed start states. When set, each is rolled out once instead of
    /// sampling `episodes` starts from the environment.
    pub start_states: Option<Vec<Vec<f64>>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 128,
            start_states: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingConfig {
    pub out_dir: PathBuf,
    /// Metric rows buffered between flushes.
    pub flush_interval: usize,
    /// Record elapsed seconds in the metric log. Off keeps the log a pure
    /// function of (config, seed); timings then go to `timing.csv` only.
    pub wall_clock: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            flush_interval: 10,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub logging: LoggingConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            logging: LoggingConfig::default(),
            seeds: vec![0],
        }
    }
}

/// Sets `path` (dot separated) in a JSON object, creating objects on the
/// way. The value is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ExperimentError::Override(assignment.into()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object ensured above")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .expect("object ensured above")
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Recursive merge: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults for a trainer kind, with the entropy target made explicit.
    pub fn for_kind(kind: TrainerKind) -> Self {
        Self {
            trainer: TrainerConfig::for_kind(kind),
            ..Default::default()
        }
    }

    /// Parses a (possibly partial) config document, applies overrides and
    /// fills everything else from the defaults of the selected trainer.
    /// Unknown keys are rejected.
    pub fn resolve(doc: Option<Value>, overrides: &[String]) -> Result<Self> {
        let mut doc = doc.unwrap_or_else(|| Value::Object(Map::new()));
        if !doc.is_object() {
            return Err(ExperimentError::Config("top level must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let kind = match doc.pointer("/trainer/kind") {
            None => TrainerKind::Rpo,
            Some(v) => serde_json::from_value(v.clone())?,
        };
        let mut full = serde_json::to_value(Self::for_kind(kind))?;
        merge(&mut full, doc);
        let mut cfg: Self = serde_json::from_value(full)?;
        if cfg.trainer.target_entropy.is_none() {
            let dim = cfg.env.build().action_dim();
            cfg.trainer.target_entropy = Some(-(dim as f64) / 2.0);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (if any) and resolves it.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                Some(serde_json::from_str(&text)?)
            }
            None => None,
        };
        Self::resolve(doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.env.num_envs == 0 {
            return Err(ExperimentError::Config("env.num_envs must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        if self.logging.flush_interval == 0 {
            return Err(ExperimentError::Config("logging.flush_interval must be positive".into()));
        }
        if let Some(starts) = &self.eval.start_states {
            let sd = self.env.build().state_dim();
            if starts.is_empty() || starts.iter().any(|s| s.len() != sd) {
                return Err(ExperimentError::Config(format!(
                    "eval.start_states must be a non-empty list of {sd}-vectors"
                )));
            }
        } else if self.eval.episodes == 0 {
            return Err(ExperimentError::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Leaf-level differences between two JSON documents as
/// `(path, left, right)`; missing leaves appear as `null`.
pub fn config_diff(a: &Value, b: &Value) -> Vec<(String, Value, Value)> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<(String, Value, Value)>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push((prefix.to_string(), a.clone(), b.clone())),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}

/// One metric-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub kl_mean: f64,
    pub kl_raw_max: f64,
    pub ratio_mean: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub actor_lr: f64,
    pub critic_loss: f64,
    pub wall_time_s: f64,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "iteration",
    "env_steps",
    "mean_return",
    "kl_mean",
    "kl_raw_max",
    "ratio_mean",
    "clip_fraction",
    "entropy",
    "actor_lr",
    "critic_loss",
    "wall_time_s",
];

impl MetricRow {
    pub fn from_update(m: &UpdateMetrics, wall_time_s: f64) -> Self {
        Self {
            iteration: m.iteration,
            env_steps: m.env_steps,
            mean_return: m.mean_return,
            kl_mean: m.kl_mean,
            kl_raw_max: m.kl_raw_max,
            ratio_mean: m.ratio_mean,
            clip_fraction: m.clip_fraction,
            entropy: m.entropy,
            actor_lr: m.actor_lr,
            critic_loss: m.critic_loss,
            wall_time_s,
        }
    }
}

/// CSV metric log with a header row, flushed every `flush_interval` rows.
pub struct MetricLog<W: Write> {
    writer: csv::Writer<W>,
    flush_interval: usize,
    pending: usize,
}

impl MetricLog<BufWriter<File>> {
    pub fn create(path: &Path, flush_interval: usize) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self::new(BufWriter::new(file), flush_interval))
    }
}

impl<W: Write> MetricLog<W> {
    pub fn new(inner: W, flush_interval: usize) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
            flush_interval: flush_interval.max(1),
            pending: 0,
        }
    }

    pub fn push(&mut self, row: &MetricRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.pending += 1;
        if self.pending >= self.flush_interval {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| ExperimentError::Io {
            path: PathBuf::from("<metric log>"),
            source: e,
        })?;
        self.pending = 0;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| ExperimentError::Config(format!("metric log: {e}")))
    }
}

/// Reads a metric log back.
pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != METRIC_COLUMNS {
        return Err(ExperimentError::Config(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub len: usize,
}

/// JSON side of a parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub format: String,
    pub total: usize,
    pub tensors: Vec<TensorEntry>,
    pub network: MlpSpec,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub log_std_range: (f64, f64),
}

pub const PARAM_FORMAT: &str = "f64-le";

/// Writes `<stem>.bin` (raw little-endian f64) and `<stem>.json`.
pub fn save_policy(policy: &SquashedNormalPolicy, dir: &Path, stem: &str) -> Result<ParamManifest> {
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for p in policy.net().params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.shape.0, p.shape.1],
            offset,
            len: p.data.len(),
        });
        offset += p.data.len();
        for x in &p.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = ParamManifest {
        format: PARAM_FORMAT.into(),
        total: offset,
        tensors,
        network: policy.net().spec().clone(),
        action_low: policy.bounds().low.clone(),
        action_high: policy.bounds().high.clone(),
        log_std_range: policy.log_std_range(),
    };
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&json))?;
    Ok(manifest)
}

/// Rebuilds a policy from `<stem>.bin` and `<stem>.json`.
pub fn load_policy(dir: &Path, stem: &str) -> Result<SquashedNormalPolicy> {
    let json = dir.join(format!("{stem}.json"));
    let manifest: ParamManifest = serde_json::from_str(&fs::read_to_string(&json).map_err(io_err(&json))?)?;
    if manifest.format != PARAM_FORMAT {
        return Err(ExperimentError::Params(format!("unsupported format '{}'", manifest.format)));
    }
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != manifest.total * 8 {
        return Err(ExperimentError::Params(format!(
            "{} holds {} bytes, manifest expects {} values",
            bin.display(),
            bytes.len(),
            manifest.total
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    let net = Mlp::new(manifest.network.clone(), &mut ChaCha8Rng::seed_from_u64(0));
    let layout: Vec<(String, [usize; 2])> = net.params().iter().map(|p| (p.name.clone(), [p.shape.0, p.shape.1])).collect();
    let listed: Vec<(String, [usize; 2])> = manifest.tensors.iter().map(|t| (t.name.clone(), t.shape)).collect();
    if layout != listed {
        return Err(ExperimentError::Params("tensor list does not match the network layout".into()));
    }
    let bounds = ActionBounds {
        low: manifest.action_low.clone(),
        high: manifest.action_high.clone(),
    };
    if bounds.dim() * 2 != manifest.network.output {
        return Err(ExperimentError::Params("action bounds do not match the network output".into()));
    }
    let mut policy = SquashedNormalPolicy::from_net(net, bounds).with_log_std_range(manifest.log_std_range.0, manifest.log_std_range.1);
    policy.set_flat(&flat)?;
    Ok(policy)
}

/// Evaluates a policy under the experiment's evaluation protocol.
pub fn evaluate_policy(
    policy: &SquashedNormalPolicy,
    env: &dyn DiffEnv,
    eval: &EvalConfig,
    mode: EvalMode,
    gamma: f64,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = derive(seed, stream::EVAL);
    let starts: Vec<f64> = match &eval.start_states {
        Some(list) => list.iter().flatten().copied().collect(),
        None => (0..eval.episodes).flat_map(|_| env.reset(&mut rng)).collect(),
    };
    let episodes = starts.len() / env.state_dim();
    let (ret, disc) = rollout_returns(policy, env, &starts, env.episode_length(), mode, gamma, &mut rng)?;
    let n = episodes as f64;
    let mean = ret.iter().sum::<f64>() / n;
    let var = ret.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        mode,
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        mean_discounted_return: disc.iter().sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub trainer: TrainerKind,
    pub env: String,
    pub iterations: usize,
    pub env_steps: u64,
    pub final_mean_return: f64,
    pub deterministic: EvalReport,
    pub stochastic: EvalReport,
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes the resolved config to `dir/config.json`.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(io_err(&path))
}

/// Trains one seed into `dir/seed_<seed>/`: `metrics.csv`, `timing.csv`,
/// `policy.bin`/`policy.json` and `summary.json`. `progress` sees every
/// iteration's metrics.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    progress: &mut dyn FnMut(&UpdateMetrics),
) -> Result<RunSummary> {
    let run = seed_dir(dir, seed);
    create_dir(&run)?;
    let mut trainer = Trainer::new(cfg.env.build(), cfg.env.num_envs, cfg.trainer.clone(), seed)?;
    let mut log = MetricLog::create(&run.join("metrics.csv"), cfg.logging.flush_interval)?;
    let timing_path = run.join("timing.csv");
    let mut timing = BufWriter::new(File::create(&timing_path).map_err(io_err(&timing_path))?);
    writeln!(timing, "iteration,wall_time_s").map_err(io_err(&timing_path))?;
    let start = Instant::now();
    let mut last: Option<UpdateMetrics> = None;
    for iteration in 0..cfg.trainer.iterations {
        let m = trainer
            .iterate()
            .map_err(|source| ExperimentError::Training { seed, iteration, source })?;
        let elapsed = start.elapsed().as_secs_f64();
        writeln!(timing, "{},{elapsed}", m.iteration).map_err(io_err(&timing_path))?;
        let wall = if cfg.logging.wall_clock { elapsed } else { 0.0 };
        log.push(&MetricRow::from_update(&m, wall))?;
        progress(&m);
        last = Some(m);
    }
    log.flush()?;
    timing.flush().map_err(io_err(&timing_path))?;
    save_policy(trainer.policy(), &run, "policy")?;
    let env = trainer.env();
    let gamma = cfg.trainer.gamma;
    let summary = RunSummary {
        seed,
        trainer: cfg.trainer.kind,
        env: cfg.env.kind.as_str().into(),
        iterations: cfg.trainer.iterations,
        env_steps: trainer.env_steps(),
        final_mean_return: last.map(|m| m.mean_return).unwrap_or(f64::NAN),
        deterministic: evaluate_policy(trainer.policy(), env, &cfg.eval, EvalMode::Deterministic, gamma, seed)?,
        stochastic: evaluate_policy(trainer.policy(), env, &cfg.eval, EvalMode::Stochastic, gamma, seed)?,
    };
    let path = run.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

/// Echoes the config and trains every seed in order.
pub fn train_all(cfg: &ExperimentConfig, dir: &Path, progress: &mut dyn FnMut(u64, &UpdateMetrics)) -> Result<Vec<RunSummary>> {
    echo_config(cfg, dir)?;
    cfg.seeds
        .iter()
        .map(|&s| train_seed(cfg, s, dir, &mut |m| progress(s, m)))
        .collect()
}

/// Evaluates saved parameters from `dir/seed_<seed>/policy.*`.
pub fn evaluate_saved(cfg: &ExperimentConfig, dir: &Path, seed: u64, mode: EvalMode) -> Result<EvalReport> {
    let policy = load_policy(&seed_dir(dir, seed), "policy")?;
    let env = cfg.env.build();
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(ExperimentError::Params(format!(
            "saved policy maps {} states to {} actions, env '{}' needs {} to {}",
            policy.state_dim(),
            policy.action_dim(),
            cfg.env.kind.as_str(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    evaluate_policy(&policy, env.as_ref(), &cfg.eval, mode, cfg.trainer.gamma, seed)
}

pub const ABLATIONS: [&str; 4] = ["full", "no_kl", "epochs_2", "no_clip"];

/// The ablation set derived from an RPO config: unchanged, without the KL
/// term, with two policy epochs, and without the ratio gate.
pub fn ablation_variants(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if base.trainer.kind != TrainerKind::Rpo {
        return Err(ExperimentError::Config(format!(
            "ablations apply to rpo, not {}",
            base.trainer.kind.as_str()
        )));
    }
    Ok(ABLATIONS
        .iter()
        .map(|&name| {
            let mut c = base.clone();
            match name {
                "no_kl" => c.trainer.lambda_kl = 0.0,
                "epochs_2" => c.trainer.policy_epochs = 2,
                "no_clip" => c.trainer.clip_gate = false,
                _ => {}
            }
            (name.to_string(), c)
        })
        .collect())
}

/// Runs every ablation variant into `dir/<variant>/`.
pub fn ablate(
    base: &ExperimentConfig,
    dir: &Path,
    progress: &mut dyn FnMut(&str, u64, &UpdateMetrics),
) -> Result<Vec<(String, Vec<RunSummary>)>> {
    let mut out = Vec::new();
    for (name, cfg) in ablation_variants(base)? {
        let runs = train_all(&cfg, &dir.join(&name), &mut |s, m| progress(&name, s, m))?;
        out.push((name, runs));
    }
    Ok(out)
}
