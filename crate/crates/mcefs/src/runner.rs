//! Experiment orchestration: load the corpus, sample demonstrations, run the
//! configured protocol over every (seed, k) cell, checkpoint after each
//! conversation, and aggregate metrics into the comparison report.
//!
//! Output directory layout (stable):
//!
//! ```text
//! out/
//!   config.json          config snapshot + hash (resume guard)
//!   demosets/<cell>.jsonl
//!   praise/<cell>.json   praise pool, dev accuracies, selected index
//!   prefixes/<cell>.json frozen learning-phase turns
//!   transcripts/<cell>.jsonl   one conversation record per line
//!   predictions/<cell>.jsonl   one prediction record per line
//!   metrics.json
//!   report.txt
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    BackendConfig, BackendError, CachedBackend, ChatBackend, LiveBackend, ScriptedBackend,
    ScriptedBehavior,
};
use crate::corpus::{corpus_stats, AbscInstance, Corpus, CorpusError};
use crate::metrics::{
    accuracy, compare_to_paper, macro_f1, ConfusionMatrix, MetricsError, MetricsReport,
    PredictionRecord, RunMetrics,
};
use crate::protocol::{
    build_fewshot_conversation, extract_label, parse_praise_reply, select_praise, Action,
    ChatTurn, McefsMachine, PraisePool, Prediction, ProtocolError, ProtocolKind, ProtocolOutcome,
    Templates, Transcript,
};
use crate::sampler::{derive_subseed, sample_demos, DemoSet, SamplerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_name: String,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub protocol: ProtocolKind,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub backend: BackendConfig,
    /// "live" or "scripted:<behavior>" with behavior one of always-correct,
    /// always-wrong, mixed, malformed, refusal.
    pub backend_kind: String,
    pub cache: bool,
    pub praise_pool_size: usize,
    pub dev_sample_size: usize,
    pub template_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Evaluate only the first N test instances. Results from limited runs
    /// are not comparable to the published numbers.
    pub limit: Option<usize>,
    /// Stop cleanly after this many conversations in this invocation; the
    /// run can then be resumed. Not part of the config hash.
    pub max_conversations: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_name: "14-Restaurant".into(),
            train_path: PathBuf::new(),
            test_path: PathBuf::new(),
            protocol: ProtocolKind::Fewshot,
            seeds: vec![13, 42, 550],
            shots: vec![1, 3, 9],
            backend: BackendConfig::default(),
            backend_kind: "live".into(),
            cache: true,
            praise_pool_size: 3,
            dev_sample_size: 50,
            template_path: None,
            output_dir: PathBuf::from("out"),
            limit: None,
            max_conversations: None,
        }
    }
}

impl RunConfig {
    /// Hash over every reproducibility-relevant field. The interruption
    /// knob is excluded so an interrupted run can be resumed with a
    /// different budget.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.max_conversations = None;
        let json = serde_json::to_string(&normalized).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn templates(&self) -> Result<Templates, RunError> {
        match &self.template_path {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                Ok(Templates::from_toml(&text)?)
            }
            None => Ok(Templates::default()),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

#[derive(Debug, PartialEq)]
pub enum RunStatus {
    Completed(MetricsReport),
    /// Conversation budget exhausted; resume to continue.
    Interrupted { conversations_done: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigSnapshot {
    hash: String,
    config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PraiseSelection {
    pub pool: PraisePool,
    pub dev_accuracies: Vec<f64>,
}

pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn ChatBackend>, RunError> {
    let inner: Arc<dyn ChatBackend> = if config.backend_kind == "live" {
        Arc::new(LiveBackend::new(config.backend.clone())?)
    } else if let Some(name) = config.backend_kind.strip_prefix("scripted:") {
        let behavior = ScriptedBehavior::parse(name).ok_or_else(|| {
            RunError::Config(format!("unknown scripted behavior {name:?}"))
        })?;
        let (corpus, _, _) = Corpus::load_from_paths(
            &config.dataset_name,
            &config.train_path,
            &config.test_path,
        )?;
        Arc::new(ScriptedBackend::with_gold(
            behavior,
            corpus.train.iter().chain(corpus.test.iter()),
        ))
    } else {
        return Err(RunError::Config(format!(
            "backend_kind must be \"live\" or \"scripted:<behavior>\", got {:?}",
            config.backend_kind
        )));
    };
    if config.cache {
        Ok(Arc::new(CachedBackend::new(
            ArcBackend(inner),
            config.output_dir.join("cache"),
            &config.backend.model,
            config.backend.temperature,
        )))
    } else {
        Ok(inner)
    }
}

struct ArcBackend(Arc<dyn ChatBackend>);

impl ChatBackend for ArcBackend {
    fn complete(&self, conversation: &[ChatTurn]) -> Result<String, BackendError> {
        self.0.complete(conversation)
    }
}

/// Run (or continue) the experiment described by `config`, building the
/// backend from the config.
pub fn run(config: &RunConfig) -> Result<RunStatus, RunError> {
    let backend = build_backend(config)?;
    run_with_backend(config, backend.as_ref())
}

/// Resume the checkpointed run in `output_dir`; refuses when the stored
/// config hash does not match the stored config (tampered snapshot).
pub fn resume(output_dir: &Path) -> Result<RunStatus, RunError> {
    let config = load_snapshot(output_dir)?;
    run(&config)
}

pub fn load_snapshot(output_dir: &Path) -> Result<RunConfig, RunError> {
    let path = output_dir.join("config.json");
    let bytes = fs::read(&path).map_err(|e| {
        RunError::CorruptCheckpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let snapshot: ConfigSnapshot = serde_json::from_slice(&bytes)
        .map_err(|e| RunError::CorruptCheckpoint(format!("bad config snapshot: {e}")))?;
    if snapshot.config.hash() != snapshot.hash {
        return Err(RunError::CorruptCheckpoint(
            "config hash mismatch in snapshot".into(),
        ));
    }
    Ok(snapshot.config)
}

/// Same as [`run`] but with an injected backend (tests use this to keep a
/// handle on the scripted backend's call counter).
pub fn run_with_backend(
    config: &RunConfig,
    backend: &dyn ChatBackend,
) -> Result<RunStatus, RunError> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    check_or_write_snapshot(config)?;

    let templates = config.templates()?;
    let (corpus, train_log, test_log) = Corpus::load_from_paths(
        &config.dataset_name,
        &config.train_path,
        &config.test_path,
    )?;
    let stats = corpus_stats(&corpus);
    println!(
        "loaded {}: train {} (dropped {} conflict), test {} (dropped {} conflict)",
        corpus.name, stats.train_count, train_log.dropped_conflict, stats.test_count,
        test_log.dropped_conflict
    );

    for dir in ["demosets", "praise", "prefixes", "transcripts", "predictions"] {
        fs::create_dir_all(out.join(dir))?;
    }

    let test_set: Vec<&AbscInstance> = match config.limit {
        Some(n) => corpus.test.iter().take(n).collect(),
        None => corpus.test.iter().collect(),
    };
    if test_set.is_empty() {
        return Err(RunError::Config("empty test set".into()));
    }
    if config.limit.is_some() {
        println!(
            "note: --limit {} active; results are not comparable to published numbers",
            test_set.len()
        );
    }

    let mut budget = config.max_conversations;
    let mut conversations_done = 0usize;
    let mut report = MetricsReport::default();

    for &seed in &config.seeds {
        for &k in &config.shots {
            let cell = format!("{}_seed{}_k{}", config.protocol.as_str(), seed, k);
            let demos = load_or_sample_demos(config, &corpus, seed, k, &cell)?;

            let praise = match config.protocol {
                ProtocolKind::McefsPr => Some(load_or_select_praise(
                    config, &corpus, &demos, seed, &cell, &templates, backend,
                )?),
                _ => None,
            };

            let prefix = match config.protocol {
                ProtocolKind::Fewshot => None,
                _ => Some(load_or_build_prefix(
                    config,
                    &demos,
                    praise.as_deref(),
                    &cell,
                    &templates,
                    backend,
                )?),
            };

            let predictions_path = out.join("predictions").join(format!("{cell}.jsonl"));
            let done = completed_source_ids(&predictions_path)?;

            for test in &test_set {
                if done.contains(&test.source_id) {
                    continue;
                }
                if let Some(0) = budget {
                    return Ok(RunStatus::Interrupted { conversations_done });
                }
                let conversation_id = format!("{cell}/{}", test.source_id);
                let (turns, outcome) = match execute_conversation(
                    config.protocol,
                    &demos.demos,
                    prefix.as_deref(),
                    test,
                    &templates,
                    backend,
                ) {
                    Ok(result) => result,
                    Err(RunError::Backend(e)) => {
                        // A failed conversation is recorded and skipped; it
                        // never aborts the run.
                        eprintln!("conversation {conversation_id} failed: {e}");
                        (
                            Vec::new(),
                            ProtocolOutcome {
                                prediction: Prediction::Unparsed,
                                raw_text: format!("<backend error: {e}>"),
                                correct: Some(false),
                            },
                        )
                    }
                    Err(other) => return Err(other),
                };

                let transcript = Transcript {
                    conversation_id: conversation_id.clone(),
                    protocol: config.protocol,
                    dataset: config.dataset_name.clone(),
                    seed,
                    k,
                    turns,
                };
                append_jsonl(&out.join("transcripts").join(format!("{cell}.jsonl")), &transcript)?;
                let record = PredictionRecord {
                    source_id: test.source_id.clone(),
                    gold: test.polarity,
                    prediction: outcome.prediction,
                    raw_text: outcome.raw_text,
                    conversation_id,
                };
                append_jsonl(&predictions_path, &record)?;

                conversations_done += 1;
                if let Some(b) = budget.as_mut() {
                    *b -= 1;
                }
            }

            report.runs.push(cell_metrics(
                config, seed, k, &predictions_path, &test_set,
            )?);
        }
    }

    let metrics_json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("metrics.json"), metrics_json)?;
    let rendered = render_report(&report);
    fs::write(out.join("report.txt"), &rendered)?;
    println!("{rendered}");
    Ok(RunStatus::Completed(report))
}

pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::from("per-run metrics\n");
    for run in &report.runs {
        out.push_str(&format!(
            "{:<14} {:<9} k={} seed={:<4} n={:<5} accuracy={:.4} macro_f1={:.4} unparsed={}\n",
            run.dataset, run.protocol.as_str(), run.k, run.seed, run.n, run.accuracy,
            run.macro_f1, run.unparsed
        ));
    }
    out.push_str("\ncomparison with published reference values\n");
    out.push_str(&compare_to_paper(report));
    out
}

fn check_or_write_snapshot(config: &RunConfig) -> Result<(), RunError> {
    let path = config.output_dir.join("config.json");
    if path.exists() {
        let existing = load_snapshot(&config.output_dir)?;
        if existing.hash() != config.hash() {
            return Err(RunError::CorruptCheckpoint(format!(
                "output dir {} holds a run with a different config",
                config.output_dir.display()
            )));
        }
        return Ok(());
    }
    let snapshot = ConfigSnapshot { hash: config.hash(), config: config.clone() };
    fs::write(&path, serde_json::to_vec_pretty(&snapshot).unwrap())?;
    Ok(())
}

fn load_or_sample_demos(
    config: &RunConfig,
    corpus: &Corpus,
    seed: u64,
    k: usize,
    cell: &str,
) -> Result<DemoSet, RunError> {
    let path = config.output_dir.join("demosets").join(format!("{cell}.jsonl"));
    if path.exists() {
        let demos = crate::corpus::read_instances(BufReader::new(fs::File::open(&path)?))?;
        return Ok(DemoSet { seed, k, demos });
    }
    let demo_seed = derive_subseed(seed, "demos");
    let mut set = sample_demos(&corpus.train, demo_seed, k)?;
    set.seed = seed;
    let mut label_counts = [0usize; 3];
    for d in &set.demos {
        label_counts[d.polarity.index()] += 1;
    }
    println!(
        "demoset {cell}: {} positive, {} negative, {} neutral",
        label_counts[0], label_counts[1], label_counts[2]
    );
    let mut file = fs::File::create(&path)?;
    crate::corpus::write_instances(&mut file, &set.demos)?;
    Ok(set)
}

fn completed_source_ids(path: &Path) -> Result<HashSet<String>, RunError> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| RunError::CorruptCheckpoint(format!("bad prediction record: {e}")))?;
        done.insert(record.source_id);
    }
    Ok(done)
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(file, "{line}")?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            RunError::CorruptCheckpoint(format!("bad record in {}: {e}", path.display()))
        })?);
    }
    Ok(out)
}

/// Drive the demo phase once and freeze the resulting turns; every test
/// instance then replays this prefix, which is exact under temperature 0.
pub fn run_learning_phase(
    demos: &[AbscInstance],
    praise: Option<&str>,
    templates: &Templates,
    backend: &dyn ChatBackend,
) -> Result<Vec<ChatTurn>, RunError> {
    let mut machine = McefsMachine::new(
        demos.to_vec(),
        None,
        praise.map(|s| s.to_string()),
        templates.clone(),
    );
    let mut action = machine.step(None)?;
    loop {
        match action {
            Action::SendUser(_) => {
                let reply = backend.complete(machine.turns())?;
                action = machine.step(Some(reply))?;
            }
            Action::Finished(_) => return Ok(machine.into_turns()),
            Action::AwaitModel => unreachable!("machine always advances on a reply"),
        }
    }
}

fn load_or_build_prefix(
    config: &RunConfig,
    demos: &DemoSet,
    praise: Option<&str>,
    cell: &str,
    templates: &Templates,
    backend: &dyn ChatBackend,
) -> Result<Vec<ChatTurn>, RunError> {
    let path = config.output_dir.join("prefixes").join(format!("{cell}.json"));
    if path.exists() {
        let turns: Vec<ChatTurn> = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| RunError::CorruptCheckpoint(format!("bad prefix: {e}")))?;
        return Ok(turns);
    }
    let turns = run_learning_phase(&demos.demos, praise, templates, backend)?;
    fs::write(&path, serde_json::to_vec_pretty(&turns).unwrap())?;
    Ok(turns)
}

/// One conversation for one test instance. For MCeFS protocols the frozen
/// learning prefix is replayed and only the test query hits the backend.
fn execute_conversation(
    protocol: ProtocolKind,
    demos: &[AbscInstance],
    prefix: Option<&[ChatTurn]>,
    test: &AbscInstance,
    templates: &Templates,
    backend: &dyn ChatBackend,
) -> Result<(Vec<ChatTurn>, ProtocolOutcome), RunError> {
    let mut turns = match protocol {
        ProtocolKind::Fewshot => build_fewshot_conversation(demos, test, templates),
        _ => {
            let mut turns = prefix.expect("prefix built for mcefs protocols").to_vec();
            turns.push(ChatTurn::user(templates.render_zero_shot(test)));
            turns
        }
    };
    let reply = backend.complete(&turns)?;
    turns.push(ChatTurn::assistant(reply.clone()));
    let prediction = extract_label(&reply);
    let correct = match prediction {
        Prediction::Label(p) => Some(p == test.polarity),
        Prediction::Unparsed => None,
    };
    Ok((turns, ProtocolOutcome { prediction, raw_text: reply, correct }))
}

fn cell_metrics(
    config: &RunConfig,
    seed: u64,
    k: usize,
    predictions_path: &Path,
    test_set: &[&AbscInstance],
) -> Result<RunMetrics, RunError> {
    let records: Vec<PredictionRecord> = read_jsonl(predictions_path)?;
    // Keep metrics limited to the configured test subset even if earlier
    // invocations evaluated more instances.
    let wanted: HashSet<&str> = test_set.iter().map(|t| t.source_id.as_str()).collect();
    let records: Vec<PredictionRecord> = records
        .into_iter()
        .filter(|r| wanted.contains(r.source_id.as_str()))
        .collect();
    let cm = ConfusionMatrix::from_records(&records);
    Ok(RunMetrics {
        dataset: config.dataset_name.clone(),
        protocol: config.protocol,
        k,
        seed,
        n: records.len(),
        accuracy: accuracy(&records)?,
        macro_f1: macro_f1(&cm)?,
        unparsed: cm.unparsed_count(),
    })
}

// ---------------------------------------------------------------------------
// Praise elicitation and selection
// ---------------------------------------------------------------------------

/// Ask the model for `n` short common praises; bounded retries with an
/// increasingly explicit request before giving up.
pub fn elicit_praises(
    backend: &dyn ChatBackend,
    n: usize,
    templates: &Templates,
    retry_budget: usize,
) -> Result<PraisePool, RunError> {
    let mut turns: Vec<ChatTurn> = Vec::new();
    let mut collected: Vec<String> = Vec::new();
    let attempts = retry_budget + 1;
    for attempt in 0..attempts {
        let prompt = if attempt == 0 {
            templates.render_praise_elicitation(n)
        } else {
            format!(
                "That gave {} usable praises. Please provide exactly {n} distinct short praises, one per line.",
                collected.len()
            )
        };
        turns.push(ChatTurn::user(prompt));
        let reply = backend.complete(&turns)?;
        turns.push(ChatTurn::assistant(reply.clone()));
        for praise in parse_praise_reply(&reply) {
            if !collected.contains(&praise) {
                collected.push(praise);
            }
        }
        if collected.len() >= n {
            collected.truncate(n);
            return Ok(PraisePool { praises: collected, selected_index: None });
        }
    }
    Err(ProtocolError::ElicitationFailed {
        got: collected.len(),
        wanted: n,
        attempts,
    }
    .into())
}

fn load_or_select_praise(
    config: &RunConfig,
    corpus: &Corpus,
    demos: &DemoSet,
    seed: u64,
    cell: &str,
    templates: &Templates,
    backend: &dyn ChatBackend,
) -> Result<String, RunError> {
    let path = config.output_dir.join("praise").join(format!("{cell}.json"));
    if path.exists() {
        let selection: PraiseSelection = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| RunError::CorruptCheckpoint(format!("bad praise record: {e}")))?;
        let idx = selection
            .pool
            .selected_index
            .ok_or_else(|| RunError::CorruptCheckpoint("praise record lacks selection".into()))?;
        return Ok(selection.pool.praises[idx].clone());
    }

    let mut pool = elicit_praises(backend, config.praise_pool_size, templates, 2)?;

    // Held-out dev sample from train, disjoint from the demos, to score each
    // candidate praise without touching the test split.
    let demo_ids: HashSet<&str> = demos.demos.iter().map(|d| d.source_id.as_str()).collect();
    let pool_train: Vec<AbscInstance> = corpus
        .train
        .iter()
        .filter(|i| !demo_ids.contains(i.source_id.as_str()))
        .cloned()
        .collect();
    let dev_k = config.dev_sample_size.min(pool_train.len());
    if dev_k == 0 {
        return Err(RunError::Config(
            "no training instances left for the praise dev sample".into(),
        ));
    }
    let dev = sample_demos(&pool_train, derive_subseed(seed, "praise-dev"), dev_k)?;

    let mut dev_accuracies = Vec::with_capacity(pool.praises.len());
    for praise in &pool.praises {
        let prefix = run_learning_phase(&demos.demos, Some(praise), templates, backend)?;
        let mut correct = 0usize;
        for instance in &dev.demos {
            let mut turns = prefix.clone();
            turns.push(ChatTurn::user(templates.render_zero_shot(instance)));
            let reply = backend.complete(&turns)?;
            if extract_label(&reply) == Prediction::Label(instance.polarity) {
                correct += 1;
            }
        }
        dev_accuracies.push(correct as f64 / dev.demos.len() as f64);
    }
    let selected = select_praise(&dev_accuracies)?;
    pool.selected_index = Some(selected);
    let selection = PraiseSelection { pool, dev_accuracies };
    fs::write(&path, serde_json::to_vec_pretty(&selection).unwrap())?;
    Ok(selection.pool.praises[selected].clone())
}
