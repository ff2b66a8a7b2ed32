//! Experiment modes and their output files.
//!
//! Every run writes into its output directory:
//!
//! - `manifest.json`: the run spec, hashes of every input file and a content
//!   hash over both;
//! - `metrics.csv`: one row per epoch, columns as [`EpochMetrics`];
//! - `events.jsonl`: one line per finished episode and per finished epoch.
//!
//! `train` adds `checkpoint.json`, `benchmark-shield` adds `benchmark.json`
//! and `fuzz-safety` adds `fuzz.json`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use safearm_rl::train::{episode_seed, evaluate, run_episode, EpisodeRecord, MetricsSink};
use safearm_rl::{
    DoneReason, EpochMetrics, Env, HumanBehavior, Policy, RandomPolicy, Scenario, ScriptedMode,
    ScriptedPolicy, TrainConfig, Trainer,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::{serve, ExternalPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Evaluate,
    BenchmarkShield,
    FuzzSafety,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Uniform random actions.
    Random,
    /// Heads straight for the episode goal.
    Scripted,
    /// Swings toward the human's head.
    ScriptedAdversary,
    /// Agent connected over the wire protocol.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub scenario: PathBuf,
    pub mode: Mode,
    pub agent: AgentKind,
    pub seed: u64,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub episodes_per_epoch: Option<usize>,
    /// Overrides the scenario's episode length.
    pub max_steps: Option<usize>,
    /// Overrides the scenario's shield switch.
    pub shield: Option<bool>,
    /// Training hyperparameters (TOML); defaults when absent.
    pub train_config: Option<PathBuf>,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub resume: bool,
    /// Worker threads for `fuzz-safety`; outputs do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl RunSpec {
    pub fn new(scenario: impl Into<PathBuf>, mode: Mode, out: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            mode,
            agent: AgentKind::Random,
            seed: 0,
            out: out.into(),
            epochs: None,
            episodes_per_epoch: None,
            max_steps: None,
            shield: None,
            train_config: None,
            endpoint: "127.0.0.1:5555".into(),
            timeout_ms: 30_000,
            resume: false,
            threads: None,
        }
    }
}

/// What a finished run reports back.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub episodes: usize,
    pub unsafe_contacts: usize,
    /// Nonzero when the run itself detected a failure.
    pub exit_code: i32,
}

/// Git-style object hash: SHA-256 of `blob <len>\0<content>`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct InputFile {
    role: &'static str,
    path: PathBuf,
    blob_sha256: String,
}

#[derive(Serialize)]
struct ManifestBody<'a> {
    tool: &'static str,
    version: &'static str,
    spec: &'a RunSpec,
    train_config: Option<&'a TrainConfig>,
    inputs: Vec<InputFile>,
}

fn write_manifest(spec: &RunSpec, scenario: &Scenario, train: Option<&TrainConfig>) -> Result<()> {
    let mut files = vec![("scenario", spec.scenario.clone()), ("robot", scenario.robot.clone())];
    if let Some(p) = &scenario.human_model {
        files.push(("human_model", p.clone()));
    }
    if let Some(p) = &scenario.human_motion {
        files.push(("human_motion", p.clone()));
    }
    if let Some(p) = &spec.train_config {
        files.push(("train_config", p.clone()));
    }
    let inputs = files
        .into_iter()
        .map(|(role, path)| {
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(InputFile {
                role,
                blob_sha256: blob_hash(&bytes),
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let body = ManifestBody {
        tool: "safearm",
        version: env!("CARGO_PKG_VERSION"),
        spec,
        train_config: train,
        inputs,
    };
    let mut value = serde_json::to_value(&body)?;
    let hash = blob_hash(value.to_string().as_bytes());
    value["content_hash"] = hash.into();
    fs::write(
        spec.out.join("manifest.json"),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Event<'a, T> {
    event: &'static str,
    #[serde(flatten)]
    data: &'a T,
}

/// Episode record with the fuzz combination that produced it.
#[derive(Clone, Debug, Serialize)]
struct Tagged {
    agent: AgentKind,
    behavior: HumanBehavior,
    #[serde(flatten)]
    record: EpisodeRecord,
}

/// Streams metrics rows and events to disk, keeping the records in memory.
/// The first IO error is kept and reported when the run finishes.
struct FileSink {
    csv: csv::Writer<File>,
    events: BufWriter<File>,
    records: Vec<EpisodeRecord>,
    epochs: Vec<EpochMetrics>,
    error: Option<anyhow::Error>,
}

impl FileSink {
    fn create(out: &Path, append_events: bool) -> Result<Self> {
        let events = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append_events)
            .truncate(!append_events)
            .open(out.join("events.jsonl"))?;
        Ok(Self {
            csv: csv::Writer::from_path(out.join("metrics.csv"))?,
            events: BufWriter::new(events),
            records: Vec::new(),
            epochs: Vec::new(),
            error: None,
        })
    }

    fn keep<E: Into<anyhow::Error>>(&mut self, r: std::result::Result<(), E>) {
        if let Err(e) = r {
            self.error.get_or_insert(e.into());
        }
    }

    fn event<T: Serialize>(&mut self, event: &'static str, data: &T) {
        let r = serde_json::to_writer(&mut self.events, &Event { event, data })
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(self.events.write_all(b"\n")?));
        self.keep(r);
    }

    fn row(&mut self, m: &EpochMetrics) {
        let r = self.csv.serialize(m).map_err(anyhow::Error::from);
        self.keep(r);
        let r = self.csv.flush();
        self.keep(r);
    }

    fn finish(mut self) -> Result<(Vec<EpisodeRecord>, Vec<EpochMetrics>)> {
        let r = self.events.flush();
        self.keep(r);
        let r = self.csv.flush();
        self.keep(r);
        match self.error {
            Some(e) => Err(e.context("writing run outputs")),
            None => Ok((self.records, self.epochs)),
        }
    }
}

impl MetricsSink for FileSink {
    fn episode(&mut self, record: &EpisodeRecord) {
        self.event("episode", record);
        self.records.push(record.clone());
    }

    fn epoch(&mut self, metrics: &EpochMetrics) {
        self.event("epoch", metrics);
        self.row(metrics);
        self.epochs.push(metrics.clone());
    }
}

fn load_scenario(spec: &RunSpec) -> Result<Scenario> {
    if !spec.scenario.exists() {
        bail!("scenario {} does not exist", spec.scenario.display());
    }
    let mut s = Scenario::load(&spec.scenario)
        .with_context(|| format!("loading scenario {}", spec.scenario.display()))?;
    if let Some(on) = spec.shield {
        s.shield = on;
    }
    if let Some(n) = spec.max_steps {
        if n == 0 {
            bail!("max steps must be positive");
        }
        s.max_episode_steps = n;
    }
    Ok(s)
}

fn builtin_policy(agent: AgentKind, env: &Env, seed: u64) -> Box<dyn Policy> {
    let dof = env.dof();
    let dq = env.scenario().delta_q_max;
    match agent {
        AgentKind::Random => Box::new(RandomPolicy::new(dof, seed)),
        AgentKind::Scripted => Box::new(ScriptedPolicy::new(dof, dq, ScriptedMode::GoalSeeking)),
        AgentKind::ScriptedAdversary => {
            Box::new(ScriptedPolicy::new(dof, dq, ScriptedMode::HumanSeeking))
        }
        AgentKind::External => unreachable!("external agents are connected by the runner"),
    }
}

/// Seed of the built-in random policy of a run.
pub fn policy_seed(run_seed: u64) -> u64 {
    episode_seed(run_seed, u64::MAX)
}

fn positive(v: Option<usize>, default: usize, what: &str) -> Result<usize> {
    match v {
        Some(0) => bail!("{what} must be positive"),
        Some(n) => Ok(n),
        None => Ok(default),
    }
}

/// Runs `spec`, printing the agent endpoint once it listens.
pub fn run(spec: &RunSpec) -> Result<RunSummary> {
    run_with(spec, |addr| eprintln!("waiting for an agent on {addr}"))
}

/// Like [`run`], calling `on_listening` when an external agent can connect.
pub fn run_with(spec: &RunSpec, on_listening: impl FnOnce(SocketAddr)) -> Result<RunSummary> {
    let scenario = load_scenario(spec)?;
    fs::create_dir_all(&spec.out)
        .with_context(|| format!("creating {}", spec.out.display()))?;
    let train_cfg = match spec.mode {
        Mode::Train => Some(train_config(spec, &scenario)?),
        _ => None,
    };
    write_manifest(spec, &scenario, train_cfg.as_ref())?;
    match spec.mode {
        Mode::FuzzSafety => return fuzz(spec, scenario),
        Mode::BenchmarkShield if !scenario.shield => {
            bail!("benchmark-shield needs the shield switched on")
        }
        _ => {}
    }

    let mut env = Env::from_scenario(scenario).context("building the environment")?;
    let mut policy: Box<dyn Policy> = match spec.agent {
        AgentKind::External => {
            let timeout = Duration::from_millis(spec.timeout_ms.max(1));
            let session = serve(&spec.endpoint, timeout, Some(timeout), on_listening)
                .context("connecting the agent")?;
            let save = spec.out.join("agent_checkpoint");
            Box::new(
                ExternalPolicy::new(session, env.dof())
                    .with_save_path(save.to_string_lossy().into_owned()),
            )
        }
        a => builtin_policy(a, &env, policy_seed(spec.seed)),
    };

    match spec.mode {
        Mode::Train => train(spec, train_cfg.unwrap(), &mut env, policy.as_mut()),
        Mode::Evaluate => {
            let epochs = positive(spec.epochs, 1, "epochs")?;
            let episodes = positive(spec.episodes_per_epoch, 100, "episodes per epoch")?;
            let (records, metrics) = evaluate_to_files(spec, &mut env, policy.as_mut(), epochs, episodes)?;
            Ok(summary(metrics, &records))
        }
        Mode::BenchmarkShield => benchmark(spec, &mut env, policy.as_mut()),
        Mode::FuzzSafety => unreachable!(),
    }
}

fn summary(metrics: Vec<EpochMetrics>, records: &[EpisodeRecord]) -> RunSummary {
    RunSummary {
        metrics,
        episodes: records.len(),
        unsafe_contacts: records.iter().map(|r| r.unsafe_contacts).sum(),
        exit_code: 0,
    }
}

fn evaluate_to_files(
    spec: &RunSpec,
    env: &mut Env,
    policy: &mut dyn Policy,
    epochs: usize,
    episodes: usize,
) -> Result<(Vec<EpisodeRecord>, Vec<EpochMetrics>)> {
    let mut sink = FileSink::create(&spec.out, false)?;
    let max_steps = env.scenario().max_episode_steps;
    let r = evaluate(env, policy, spec.seed, epochs, episodes, max_steps, &mut sink);
    let outputs = sink.finish();
    r.context("evaluation failed")?;
    outputs
}

fn train_config(spec: &RunSpec, scenario: &Scenario) -> Result<TrainConfig> {
    let mut cfg = match &spec.train_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig {
            max_episode_steps: scenario.max_episode_steps,
            ..TrainConfig::default()
        },
    };
    if let Some(n) = spec.epochs {
        cfg.n_epochs = n;
    }
    if let Some(n) = spec.episodes_per_epoch {
        cfg.episodes_per_epoch = n;
    }
    if spec.max_steps.is_some() {
        cfg.max_episode_steps = scenario.max_episode_steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(spec: &RunSpec, cfg: TrainConfig, env: &mut Env, policy: &mut dyn Policy) -> Result<RunSummary> {
    let ckpt = spec.out.join("checkpoint.json");
    let resuming = spec.resume && ckpt.exists();
    let mut trainer = if resuming {
        let t = Trainer::load(&ckpt)?;
        if t.state.config != cfg || t.state.run_seed != spec.seed {
            bail!("checkpoint {} was written by a different run", ckpt.display());
        }
        log::info!("resuming at epoch {}", t.state.next_epoch);
        t
    } else {
        Trainer::new(cfg, spec.seed)?
    };
    let mut sink = FileSink::create(&spec.out, resuming)?;
    // the CSV is rewritten from the checkpoint; events were appended all along
    for m in trainer.state.metrics.clone() {
        sink.row(&m);
    }
    let r = trainer.run(env, policy, &mut sink, Some(&ckpt), None);
    let (records, _) = sink.finish()?;
    r.context("training failed")?;
    Ok(summary(trainer.state.metrics.clone(), &records))
}

#[derive(Serialize)]
struct Benchmark {
    episodes: usize,
    ticks: usize,
    tick_mean_us: f64,
    tick_median_us: f64,
    tick_p99_us: f64,
    tick_max_us: f64,
    tick_budget_us: f64,
    over_budget_ticks: usize,
    simulated_seconds: f64,
    wall_seconds: f64,
    realtime_factor: f64,
}

fn benchmark(spec: &RunSpec, env: &mut Env, policy: &mut dyn Policy) -> Result<RunSummary> {
    let epochs = positive(spec.epochs, 1, "epochs")?;
    let episodes = positive(spec.episodes_per_epoch, 20, "episodes per epoch")?;
    let dt = env.shield_config().dt;
    let start = Instant::now();
    let (records, metrics) = evaluate_to_files(spec, env, policy, epochs, episodes)?;
    let wall = start.elapsed().as_secs_f64();
    let ticks: Vec<f64> = records
        .iter()
        .flat_map(|r| r.tick_micros.iter().copied())
        .collect();
    let n_ticks: usize = records.iter().map(|r| r.ticks).sum();
    let simulated = n_ticks as f64 * dt;
    let budget = dt * 1e6;
    let report = Benchmark {
        episodes: records.len(),
        ticks: ticks.len(),
        tick_mean_us: ticks.iter().sum::<f64>() / ticks.len().max(1) as f64,
        tick_median_us: safearm_rl::train::percentile(&ticks, 50.0),
        tick_p99_us: safearm_rl::train::percentile(&ticks, 99.0),
        tick_max_us: ticks.iter().copied().fold(0.0, f64::max),
        tick_budget_us: budget,
        over_budget_ticks: ticks.iter().filter(|&&t| t > budget).count(),
        simulated_seconds: simulated,
        wall_seconds: wall,
        realtime_factor: simulated / wall,
    };
    log::info!(
        "median tick {:.1} us, p99 {:.1} us, {:.1}x real time",
        report.tick_median_us,
        report.tick_p99_us,
        report.realtime_factor
    );
    fs::write(
        spec.out.join("benchmark.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(summary(metrics, &records))
}

/// Agent and human pairings covered by `fuzz-safety`.
pub fn fuzz_combos(scenario: &Scenario) -> Vec<(AgentKind, HumanBehavior)> {
    let mut behaviors = vec![
        HumanBehavior::Sprint,
        HumanBehavior::RandomWalk,
        HumanBehavior::Lunge,
    ];
    if scenario.human_motion.is_some() {
        behaviors.insert(0, HumanBehavior::Playback);
    }
    let agents = [
        AgentKind::Random,
        AgentKind::Scripted,
        AgentKind::ScriptedAdversary,
    ];
    agents
        .iter()
        .flat_map(|&a| behaviors.iter().map(move |&b| (a, b)))
        .collect()
}

/// Default episode length of `fuzz-safety`. Most contacts happen early, and
/// short episodes keep a thousand of them within minutes on one core.
pub const FUZZ_MAX_STEPS: usize = 25;

#[derive(Serialize)]
struct ComboReport {
    agent: AgentKind,
    behavior: HumanBehavior,
    episodes: usize,
    ticks: usize,
    unsafe_contacts: usize,
    safe_contacts: usize,
    audit_violations: usize,
    goal_reached: usize,
    safe_collisions: usize,
}

#[derive(Serialize)]
struct FuzzReport {
    episodes: usize,
    ticks: usize,
    unsafe_contacts: usize,
    audit_violations: usize,
    safe_contacts: usize,
    combos: Vec<ComboReport>,
}

/// Runs episodes `i = worker, worker + stride, ...` below `total`.
fn fuzz_worker(
    scenario: &Scenario,
    combos: &[(AgentKind, HumanBehavior)],
    run_seed: u64,
    total: usize,
    max_steps: usize,
    worker: usize,
    stride: usize,
) -> Result<Vec<(usize, Tagged)>> {
    let mut envs: Vec<(HumanBehavior, Env)> = Vec::new();
    let mut out = Vec::new();
    for i in (worker..total).step_by(stride) {
        let (agent, behavior) = combos[i % combos.len()];
        let env = match envs.iter().position(|(b, _)| *b == behavior) {
            Some(k) => &mut envs[k].1,
            None => {
                let mut s = scenario.clone();
                s.shield = true;
                let env = Env::with_behavior(behavior, s)?;
                envs.push((behavior, env));
                &mut envs.last_mut().unwrap().1
            }
        };
        let seed = episode_seed(run_seed, i as u64);
        let mut policy = builtin_policy(agent, env, seed);
        let (record, _) = run_episode(env, seed, max_steps, |o| Ok(policy.act(o)?))
            .with_context(|| format!("fuzz episode {i}"))?;
        out.push((i, Tagged { agent, behavior, record }));
    }
    Ok(out)
}

fn fuzz(spec: &RunSpec, scenario: Scenario) -> Result<RunSummary> {
    if spec.agent == AgentKind::External {
        bail!("fuzz-safety drives its own built-in agents");
    }
    if spec.shield == Some(false) {
        bail!("fuzz-safety audits the shield; it cannot be switched off");
    }
    let epochs = positive(spec.epochs, 1, "epochs")?;
    let per_epoch = positive(spec.episodes_per_epoch, 1000, "episodes per epoch")?;
    let max_steps = spec.max_steps.unwrap_or(FUZZ_MAX_STEPS);
    let total = epochs * per_epoch;
    let combos = fuzz_combos(&scenario);
    let threads = spec
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, total);

    let mut tagged: Vec<(usize, Tagged)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let (scenario, combos) = (&scenario, &combos);
                scope.spawn(move || {
                    fuzz_worker(scenario, combos, spec.seed, total, max_steps, w, threads)
                })
            })
            .collect();
        let mut all = Vec::with_capacity(total);
        for h in handles {
            all.extend(h.join().expect("fuzz worker panicked")?);
        }
        Ok::<_, anyhow::Error>(all)
    })?;
    tagged.sort_by_key(|(i, _)| *i);

    let mut sink = FileSink::create(&spec.out, false)?;
    for (epoch, chunk) in tagged.chunks_mut(per_epoch).enumerate() {
        for (l, (_, t)) in chunk.iter_mut().enumerate() {
            t.record.epoch = epoch;
            t.record.episode = l;
            sink.event("episode", t);
        }
        let records: Vec<EpisodeRecord> = chunk.iter().map(|(_, t)| t.record.clone()).collect();
        let m = EpochMetrics::from_records(epoch, &records);
        sink.epoch(&m);
        sink.records.extend(records);
    }
    let (records, metrics) = sink.finish()?;

    let combo_reports: Vec<ComboReport> = combos
        .iter()
        .map(|&(agent, behavior)| {
            let rs: Vec<&EpisodeRecord> = tagged
                .iter()
                .filter(|(_, t)| t.agent == agent && t.behavior == behavior)
                .map(|(_, t)| &t.record)
                .collect();
            ComboReport {
                agent,
                behavior,
                episodes: rs.len(),
                ticks: rs.iter().map(|r| r.ticks).sum(),
                unsafe_contacts: rs.iter().map(|r| r.unsafe_contacts).sum(),
                safe_contacts: rs.iter().map(|r| r.safe_contacts).sum(),
                audit_violations: rs.iter().map(|r| r.audit_violations).sum(),
                goal_reached: rs.iter().filter(|r| r.reason == DoneReason::GoalReached).count(),
                safe_collisions: rs
                    .iter()
                    .filter(|r| r.reason == DoneReason::SafeCollision)
                    .count(),
            }
        })
        .collect();
    let report = FuzzReport {
        episodes: records.len(),
        ticks: records.iter().map(|r| r.ticks).sum(),
        unsafe_contacts: records.iter().map(|r| r.unsafe_contacts).sum(),
        audit_violations: records.iter().map(|r| r.audit_violations).sum(),
        safe_contacts: records.iter().map(|r| r.safe_contacts).sum(),
        combos: combo_reports,
    };
    fs::write(
        spec.out.join("fuzz.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut s = summary(metrics, &records);
    if report.unsafe_contacts > 0 {
        log::error!("{} unsafe contacts", report.unsafe_contacts);
        s.exit_code = 1;
    }
    Ok(s)
}
