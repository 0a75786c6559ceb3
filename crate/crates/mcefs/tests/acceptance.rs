//! Acceptance suite. Each test prints one `ACCEPTANCE <name>: PASS` line
//! (or SKIPPED with the reason when an external prerequisite is missing).

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use mcefs::backend::{ScriptedBackend, ScriptedBehavior};
use mcefs::corpus::{parse_semeval, AbscInstance, Polarity};
use mcefs::metrics::{
    accuracy, compare_to_paper, macro_f1, ConfusionMatrix, MetricsReport, PredictionRecord,
    RunMetrics,
};
use mcefs::protocol::{
    extract_label, select_praise, Action, McefsMachine, Prediction, ProtocolKind, Role, Templates,
    Transcript,
};
use mcefs::runner::{run_with_backend, RunStatus};

use common::scripted_config;

fn pass(name: &str, started: Instant) {
    println!("ACCEPTANCE {name}: PASS ({:.2}s)", started.elapsed().as_secs_f64());
}

// 1. Corpus counts against the official SemEval-2014 files (not
// redistributable, so located via SEMEVAL_DATA_DIR).
#[test]
fn corpus_counts() {
    let started = Instant::now();
    let dir = match std::env::var("SEMEVAL_DATA_DIR") {
        Ok(d) => PathBuf::from(d),
        Err(_) => {
            println!(
                "ACCEPTANCE corpus_counts: SKIPPED (set SEMEVAL_DATA_DIR to the directory \
                 holding the official SemEval-2014 Task 4 XML files)"
            );
            return;
        }
    };
    let find = |candidates: &[&str]| -> PathBuf {
        candidates
            .iter()
            .map(|c| dir.join(c))
            .find(|p| p.exists())
            .unwrap_or_else(|| panic!("none of {candidates:?} found in {}", dir.display()))
    };
    let cases = [
        (
            "14-Laptop",
            find(&["Laptop_Train_v2.xml", "Laptops_Train.xml", "laptops_train.xml"]),
            find(&["Laptops_Test_Gold.xml", "laptops_test.xml"]),
            2282usize,
            632usize,
        ),
        (
            "14-Restaurant",
            find(&["Restaurants_Train_v2.xml", "Restaurants_Train.xml", "restaurants_train.xml"]),
            find(&["Restaurants_Test_Gold.xml", "restaurants_test.xml"]),
            3608,
            1119,
        ),
    ];
    for (name, train_path, test_path, want_train, want_test) in cases {
        let train = parse_semeval(&std::fs::read(&train_path).unwrap()).unwrap();
        let test = parse_semeval(&std::fs::read(&test_path).unwrap()).unwrap();
        assert_eq!(train.len(), want_train, "{name} train count");
        assert_eq!(test.len(), want_test, "{name} test count");
    }
    assert!(started.elapsed().as_secs() < 5, "runtime bound exceeded");
    pass("corpus_counts", started);
}

// 2. Accuracy and macro F1 against an independent brute-force oracle on
// 1,000 randomized cases, within 1e-12.
mod oracle {
    use super::*;

    /// Deterministic LCG for case generation, unrelated to the crate's RNG.
    pub struct Lcg(pub u64);

    impl Lcg {
        pub fn next(&mut self) -> u64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            self.0 >> 33
        }
    }

    pub fn accuracy_oracle(golds: &[Polarity], preds: &[Option<Polarity>]) -> f64 {
        let correct = golds
            .iter()
            .zip(preds)
            .filter(|(g, p)| **p == Some(**g))
            .count();
        correct as f64 / golds.len() as f64
    }

    pub fn macro_f1_oracle(golds: &[Polarity], preds: &[Option<Polarity>]) -> f64 {
        let mut sum = 0.0;
        for class in Polarity::ALL {
            let tp = golds
                .iter()
                .zip(preds)
                .filter(|(g, p)| **g == class && **p == Some(class))
                .count() as f64;
            let fp = golds
                .iter()
                .zip(preds)
                .filter(|(g, p)| **g != class && **p == Some(class))
                .count() as f64;
            let fn_ = golds
                .iter()
                .zip(preds)
                .filter(|(g, p)| **g == class && **p != Some(class))
                .count() as f64;
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            sum += if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        sum / 3.0
    }
}

#[test]
fn metrics_oracle() {
    let started = Instant::now();
    let mut rng = oracle::Lcg(0xfeed_beef);
    for case in 0..1000u32 {
        let len = 1 + (rng.next() as usize % 200);
        let mut golds = Vec::with_capacity(len);
        let mut preds = Vec::with_capacity(len);
        for _ in 0..len {
            golds.push(Polarity::ALL[rng.next() as usize % 3]);
            // ~10% unparsed predictions.
            preds.push(if rng.next() % 10 == 0 {
                None
            } else {
                Some(Polarity::ALL[rng.next() as usize % 3])
            });
        }
        let records: Vec<PredictionRecord> = golds
            .iter()
            .zip(&preds)
            .enumerate()
            .map(|(i, (&gold, &pred))| PredictionRecord {
                source_id: i.to_string(),
                gold,
                prediction: pred.map(Prediction::Label).unwrap_or(Prediction::Unparsed),
                raw_text: String::new(),
                conversation_id: String::new(),
            })
            .collect();
        let got_acc = accuracy(&records).unwrap();
        let got_f1 = macro_f1(&ConfusionMatrix::from_records(&records)).unwrap();
        let want_acc = oracle::accuracy_oracle(&golds, &preds);
        let want_f1 = oracle::macro_f1_oracle(&golds, &preds);
        assert!((got_acc - want_acc).abs() < 1e-12, "case {case}: accuracy");
        assert!((got_f1 - want_f1).abs() < 1e-12, "case {case}: macro F1");
    }
    assert!(started.elapsed().as_secs() < 10, "runtime bound exceeded");
    pass("metrics_oracle", started);
}

// 3. Protocol structure over k in {1,3,9} and the four scripted behaviors.
fn fixture_instances() -> (Vec<AbscInstance>, AbscInstance) {
    let train = parse_semeval(common::fixture_xml("tr", 9).as_bytes()).unwrap();
    let test = parse_semeval(common::fixture_xml("te", 1).as_bytes()).unwrap();
    (train, test.into_iter().next().unwrap())
}

fn drive_mcefs(
    demos: &[AbscInstance],
    test: &AbscInstance,
    praise: Option<&str>,
    backend: &ScriptedBackend,
) -> (Transcript, Vec<bool>) {
    let mut machine = McefsMachine::new(
        demos.to_vec(),
        Some(test.clone()),
        praise.map(str::to_string),
        Templates::default(),
    );
    let mut action = machine.step(None).unwrap();
    loop {
        match action {
            Action::SendUser(_) => {
                let reply = mcefs::backend::ChatBackend::complete(backend, machine.turns()).unwrap();
                action = machine.step(Some(reply)).unwrap();
            }
            Action::Finished(_) => break,
            Action::AwaitModel => unreachable!(),
        }
    }
    let assessments = machine.demo_assessments().to_vec();
    let transcript = Transcript {
        conversation_id: "acc".into(),
        protocol: if praise.is_some() { ProtocolKind::McefsPr } else { ProtocolKind::Mcefs },
        dataset: "fixture".into(),
        seed: 0,
        k: demos.len(),
        turns: machine.into_turns(),
    };
    (transcript, assessments)
}

/// Fixture sentences contain no polarity words, so a demo's gold word can
/// only enter a User turn through feedback. For the first demo carrying
/// each distinct gold word, that word must not appear in any User turn at or
/// before that demo's task prompt.
fn check_gold_never_precedes(transcript: &Transcript, demos: &[AbscInstance]) {
    let mut seen_golds: Vec<Polarity> = Vec::new();
    for demo in demos {
        let task_prompt = format!("Review {}", demo.source_id.split(':').next().unwrap());
        let task_idx = transcript
            .turns
            .iter()
            .position(|t| t.role == Role::User && t.content.contains(&task_prompt))
            .expect("task turn present");
        assert!(
            !transcript.turns[task_idx]
                .content
                .to_lowercase()
                .contains(demo.polarity.word()),
            "task prompt for {} states the gold label",
            demo.source_id
        );
        if !seen_golds.contains(&demo.polarity) {
            for turn in &transcript.turns[..=task_idx] {
                if turn.role == Role::User {
                    assert!(
                        !turn.content.to_lowercase().contains(demo.polarity.word()),
                        "gold word {:?} leaked before the prediction for {}",
                        demo.polarity.word(),
                        demo.source_id
                    );
                }
            }
            seen_golds.push(demo.polarity);
        }
    }
}

#[test]
fn protocol_structure() {
    let started = Instant::now();
    let (train, test) = fixture_instances();
    let praise = "You're doing great work";
    let behaviors = [
        ScriptedBehavior::AlwaysCorrect,
        ScriptedBehavior::AlwaysWrong,
        ScriptedBehavior::Mixed,
        ScriptedBehavior::Malformed,
    ];
    let mut fixtures = 0usize;
    for k in [1usize, 3, 9] {
        let demos = &train[..k];
        for behavior in behaviors {
            let backend =
                ScriptedBackend::with_gold(behavior, demos.iter().chain(std::iter::once(&test)));

            for praise_arg in [None, Some(praise)] {
                let (transcript, assessments) = drive_mcefs(demos, &test, praise_arg, &backend);
                transcript.validate().expect("role alternation");
                assert_eq!(transcript.assistant_turns(), 2 * k + 1, "assistant turn count");
                assert_eq!(transcript.user_turns(), 2 * k + 1);
                check_gold_never_precedes(&transcript, demos);

                // Praise appears in feedback turn i iff demo i was assessed
                // correct (MCeFS+PR); never in plain MCeFS.
                for (i, &correct) in assessments.iter().enumerate() {
                    let feedback = &transcript.turns[4 * i + 2].content;
                    let expect_praise = praise_arg.is_some() && correct;
                    assert_eq!(
                        feedback.contains(praise),
                        expect_praise,
                        "behavior {behavior:?}, k={k}, demo {i}"
                    );
                    if !correct {
                        assert!(feedback.contains(demos[i].polarity.word()));
                    }
                }
                match behavior {
                    ScriptedBehavior::AlwaysCorrect => assert!(assessments.iter().all(|&c| c)),
                    ScriptedBehavior::AlwaysWrong | ScriptedBehavior::Malformed => {
                        assert!(assessments.iter().all(|&c| !c))
                    }
                    _ => {}
                }
                fixtures += 1;
            }

            // Few-shot: exactly one Assistant turn per conversation.
            let mut turns = mcefs::protocol::build_fewshot_conversation(
                demos,
                &test,
                &Templates::default(),
            );
            let reply = mcefs::backend::ChatBackend::complete(&backend, &turns).unwrap();
            turns.push(mcefs::protocol::ChatTurn::assistant(reply));
            let transcript = Transcript {
                conversation_id: "acc".into(),
                protocol: ProtocolKind::Fewshot,
                dataset: "fixture".into(),
                seed: 0,
                k,
                turns,
            };
            transcript.validate().unwrap();
            assert_eq!(transcript.assistant_turns(), 1);
            fixtures += 1;
        }
    }
    assert_eq!(fixtures, 36);
    assert!(started.elapsed().as_secs() < 30, "runtime bound exceeded");
    pass("protocol_structure", started);
}

// 4 & 5. Determinism and resume equivalence on a 50-instance subset.
fn output_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["transcripts", "predictions", "demosets", "prefixes", "praise"] {
        let subdir = dir.join(sub);
        if !subdir.exists() {
            continue;
        }
        let mut entries: Vec<_> = std::fs::read_dir(&subdir).unwrap().flatten().collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            files.push((
                format!("{sub}/{}", entry.file_name().to_string_lossy()),
                std::fs::read(entry.path()).unwrap(),
            ));
        }
    }
    for name in ["metrics.json", "report.txt"] {
        files.push((name.into(), std::fs::read(dir.join(name)).unwrap()));
    }
    files
}

fn assert_same_outputs(a: &Path, b: &Path) {
    let fa = output_bytes(a);
    let fb = output_bytes(b);
    let names_a: Vec<&String> = fa.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = fb.iter().map(|(n, _)| n).collect();
    assert_eq!(names_a, names_b, "output file sets differ");
    for ((name, bytes_a), (_, bytes_b)) in fa.iter().zip(&fb) {
        assert_eq!(bytes_a, bytes_b, "file {name} differs");
    }
}

fn determinism_config(dir: &Path, out: &str) -> mcefs::runner::RunConfig {
    let mut config = scripted_config(dir, 40, 60, "mixed");
    config.protocol = ProtocolKind::McefsPr;
    config.seeds = vec![13, 42];
    config.shots = vec![1, 3];
    config.limit = Some(50);
    config.dev_sample_size = 5;
    config.output_dir = dir.join(out);
    config
}

#[test]
fn determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_a = determinism_config(dir.path(), "out_a");
    let config_b = determinism_config(dir.path(), "out_b");
    assert!(matches!(mcefs::runner::run(&config_a).unwrap(), RunStatus::Completed(_)));
    assert!(matches!(mcefs::runner::run(&config_b).unwrap(), RunStatus::Completed(_)));
    assert_same_outputs(&config_a.output_dir, &config_b.output_dir);
    assert!(started.elapsed().as_secs() < 60, "runtime bound exceeded");
    pass("determinism", started);
}

#[test]
fn resume_equivalence() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_full = determinism_config(dir.path(), "out_full");
    let train = parse_semeval(&std::fs::read(&config_full.train_path).unwrap()).unwrap();
    let test = parse_semeval(&std::fs::read(&config_full.test_path).unwrap()).unwrap();
    let all: Vec<AbscInstance> = train.into_iter().chain(test).collect();
    let backend_full = ScriptedBackend::with_gold(ScriptedBehavior::Mixed, &all);
    assert!(matches!(
        run_with_backend(&config_full, &backend_full).unwrap(),
        RunStatus::Completed(_)
    ));
    let full_calls = backend_full.calls();

    // Same run, interrupted mid-way and resumed with the same backend so the
    // call counter spans both invocations.
    let mut config_int = determinism_config(dir.path(), "out_resumed");
    config_int.max_conversations = Some(75);
    let backend_resumed = ScriptedBackend::with_gold(ScriptedBehavior::Mixed, &all);
    match run_with_backend(&config_int, &backend_resumed).unwrap() {
        RunStatus::Interrupted { conversations_done } => assert_eq!(conversations_done, 75),
        other => panic!("expected interruption, got {other:?}"),
    }
    config_int.max_conversations = None;
    assert!(matches!(
        run_with_backend(&config_int, &backend_resumed).unwrap(),
        RunStatus::Completed(_)
    ));

    assert_same_outputs(&config_full.output_dir, &config_int.output_dir);
    assert_eq!(
        backend_resumed.calls(),
        full_calls,
        "interrupt+resume must not re-execute any conversation"
    );
    pass("resume_equivalence", started);
}

// 6. Praise selection rules.
#[test]
fn praise_selection() {
    let started = Instant::now();
    assert_eq!(select_praise(&[0.60, 0.75, 0.75]).unwrap(), 1);
    assert_eq!(select_praise(&[0.9]).unwrap(), 0);
    assert_eq!(select_praise(&[0.5, 0.5, 0.5]).unwrap(), 0);
    assert!(select_praise(&[]).is_err());
    pass("praise_selection", started);
}

// 7. Paper-comparison report renders the embedded constants as published,
// with signed deltas against injected synthetic measurements.
#[test]
fn paper_comparison_report() {
    let started = Instant::now();
    let mut report = MetricsReport::default();
    let mut add = |dataset: &str, protocol: ProtocolKind, k: usize, acc: f64, f1: f64| {
        for seed in [13u64, 42, 550] {
            report.runs.push(RunMetrics {
                dataset: dataset.into(),
                protocol,
                k,
                seed,
                n: 100,
                accuracy: acc,
                macro_f1: f1,
                unparsed: 0,
            });
        }
    };
    add("14-Restaurant", ProtocolKind::Fewshot, 3, 0.850, 0.700);
    add("14-Restaurant", ProtocolKind::Mcefs, 3, 0.850, 0.700);
    add("14-Laptop", ProtocolKind::Mcefs, 3, 0.823, 0.700);
    add("14-Laptop", ProtocolKind::McefsPr, 1, 0.800, 0.761);

    let table = compare_to_paper(&report);
    // Published values, rendered at published precision.
    assert!(table.contains("0.671"), "table:\n{table}");
    assert!(table.contains("0.775"), "table:\n{table}");
    assert!(table.contains("80.3%"), "table:\n{table}");
    assert!(table.contains("0.751"), "table:\n{table}");
    // Signed deltas: 82.3% - 80.3% = +2.0; 0.700 - 0.671 = +0.029;
    // 0.700 - 0.775 = -0.075; 0.761 - 0.751 = +0.010.
    assert!(table.contains("+2.0"), "table:\n{table}");
    assert!(table.contains("+0.029"), "table:\n{table}");
    assert!(table.contains("-0.075"), "table:\n{table}");
    assert!(table.contains("+0.010"), "table:\n{table}");
    pass("paper_comparison_report", started);
}

// 8. Optional live sanity run: FewShot(1), 100 instances, accuracy in
// [0.5, 1.0]. Needs credentials, the official 14-Restaurant files, and
// MCEFS_LIVE=1.
#[test]
fn live_fewshot_sanity() {
    let started = Instant::now();
    if std::env::var("MCEFS_LIVE").as_deref() != Ok("1")
        || std::env::var("OPENAI_API_KEY").is_err()
        || std::env::var("SEMEVAL_DATA_DIR").is_err()
    {
        println!(
            "ACCEPTANCE live_fewshot_sanity: SKIPPED (set MCEFS_LIVE=1, OPENAI_API_KEY and \
             SEMEVAL_DATA_DIR to run live)"
        );
        return;
    }
    let data = PathBuf::from(std::env::var("SEMEVAL_DATA_DIR").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let config = mcefs::runner::RunConfig {
        dataset_name: "14-Restaurant".into(),
        train_path: data.join("Restaurants_Train_v2.xml"),
        test_path: data.join("Restaurants_Test_Gold.xml"),
        protocol: ProtocolKind::Fewshot,
        seeds: vec![13],
        shots: vec![1],
        backend_kind: "live".into(),
        limit: Some(100),
        output_dir: dir.path().join("out"),
        ..mcefs::runner::RunConfig::default()
    };
    match mcefs::runner::run(&config).unwrap() {
        RunStatus::Completed(report) => {
            let acc = report.runs[0].accuracy;
            assert!((0.5..=1.0).contains(&acc), "accuracy {acc} outside sanity band");
        }
        other => panic!("expected completion, got {other:?}"),
    }
    pass("live_fewshot_sanity", started);
}

// Checks the harness keeps the label-extraction contract the protocol
// structure suite depends on: every scripted reply for a prediction parses
// (or deliberately fails to parse) as designed.
#[test]
fn scripted_replies_parse_as_designed() {
    let started = Instant::now();
    let (train, test) = fixture_instances();
    let backend = ScriptedBackend::with_gold(
        ScriptedBehavior::AlwaysCorrect,
        train.iter().chain(std::iter::once(&test)),
    );
    let prompt = mcefs::protocol::render_zero_shot(&train[0]);
    let reply =
        mcefs::backend::ChatBackend::complete(&backend, &[mcefs::protocol::ChatTurn::user(prompt)])
            .unwrap();
    assert_eq!(extract_label(&reply), Prediction::Label(train[0].polarity));
    pass("scripted_replies_parse", started);
}
