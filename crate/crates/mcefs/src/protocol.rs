//! Conversation protocols: traditional few-shot, metacognition-enhanced
//! few-shot (demo-by-demo prediction, feedback, reflection), and the same
//! with praise injected after correct demo predictions.
//!
//! Each conversation is an explicit state machine fed with model replies;
//! the machine owns the transcript and never reveals a demo's gold label
//! before that demo's prediction turn.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AbscInstance, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::Assistant, content: content.into() }
    }
    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Fewshot,
    Mcefs,
    McefsPr,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Fewshot => "fewshot",
            ProtocolKind::Mcefs => "mcefs",
            ProtocolKind::McefsPr => "mcefs-pr",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolKind> {
        match s {
            "fewshot" => Some(ProtocolKind::Fewshot),
            "mcefs" => Some(ProtocolKind::Mcefs),
            "mcefs-pr" => Some(ProtocolKind::McefsPr),
            _ => None,
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full audit record of one conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub conversation_id: String,
    pub protocol: ProtocolKind,
    pub dataset: String,
    pub seed: u64,
    pub k: usize,
    pub turns: Vec<ChatTurn>,
}

impl Transcript {
    /// Structural invariants: at most one System turn and only at position 0,
    /// then strict User/Assistant alternation starting with User, no empty
    /// content.
    pub fn validate(&self) -> Result<(), String> {
        let mut turns = self.turns.as_slice();
        if let Some(first) = turns.first() {
            if first.role == Role::System {
                turns = &turns[1..];
            }
        }
        for (i, turn) in turns.iter().enumerate() {
            if turn.content.is_empty() {
                return Err(format!("empty content at turn {i}"));
            }
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(format!(
                    "turn {i}: expected {:?}, found {:?}",
                    expected, turn.role
                ));
            }
        }
        if self.turns.iter().skip(1).any(|t| t.role == Role::System) {
            return Err("system turn after position 0".into());
        }
        Ok(())
    }

    pub fn assistant_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }

    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Label(Polarity),
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub prediction: Prediction,
    pub raw_text: String,
    /// Defined iff the prediction parsed and a gold label exists.
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PraisePool {
    pub praises: Vec<String>,
    pub selected_index: Option<usize>,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("praise elicitation failed: only {got} of {wanted} praises after {attempts} attempts")]
    ElicitationFailed { got: usize, wanted: usize, attempts: usize },
    #[error("empty praise pool")]
    EmptyPool,
    #[error("template error: {0}")]
    Template(String),
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Prompt and feedback wording, loadable from a plain-text template file so
/// phrasing can vary without code changes. The zero-shot task template and
/// defaults ship with the binary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub zero_shot: String,
    pub answer_line: String,
    pub feedback_correct_plain: String,
    pub feedback_correct_praise: String,
    pub feedback_incorrect: String,
    pub praise_elicitation: String,
    #[serde(default)]
    pub system: Option<String>,
}

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.toml");

impl Default for Templates {
    fn default() -> Self {
        toml::from_str(DEFAULT_TEMPLATES).expect("bundled default templates parse")
    }
}

impl Templates {
    pub fn from_toml(text: &str) -> Result<Templates, ProtocolError> {
        toml::from_str(text).map_err(|e| ProtocolError::Template(e.to_string()))
    }

    pub fn render_zero_shot(&self, instance: &AbscInstance) -> String {
        self.zero_shot
            .replace("{sentence}", &instance.sentence)
            .replace("{aspect}", &instance.aspect_term)
    }

    pub fn render_answer_line(&self, gold: Polarity) -> String {
        self.answer_line.replace("{gold}", gold.word())
    }

    pub fn render_feedback(&self, correct: bool, gold: Polarity, praise: Option<&str>) -> String {
        if correct {
            match praise {
                Some(p) => self.feedback_correct_praise.replace("{praise}", p),
                None => self.feedback_correct_plain.clone(),
            }
        } else {
            self.feedback_incorrect.replace("{gold}", gold.word())
        }
    }

    pub fn render_praise_elicitation(&self, n: usize) -> String {
        self.praise_elicitation.replace("{n}", &n.to_string())
    }
}

/// The exact zero-shot task prompt.
pub fn render_zero_shot(instance: &AbscInstance) -> String {
    Templates::default().render_zero_shot(instance)
}

// ---------------------------------------------------------------------------
// Label extraction
// ---------------------------------------------------------------------------

/// Map free-text model output to a polarity label.
///
/// Rules, pinned: case-insensitive scan for the words positive / negative /
/// neutral. Exactly one distinct label word present -> that label. Several
/// distinct label words -> the label of a negation-free `is/was/: <label>`
/// pattern when exactly one such label matches, else Unparsed. No label
/// word -> Unparsed. Unparsed never aborts a run; it scores as incorrect.
pub fn extract_label(raw: &str) -> Prediction {
    let lower = raw.to_lowercase();
    let mut present = Vec::new();
    for p in Polarity::ALL {
        if find_word(&lower, p.word()) {
            present.push(p);
        }
    }
    match present.len() {
        0 => Prediction::Unparsed,
        1 => Prediction::Label(present[0]),
        _ => {
            let mut asserted = Vec::new();
            for p in present {
                if asserted_pattern(&lower, p.word()) {
                    asserted.push(p);
                }
            }
            if asserted.len() == 1 {
                Prediction::Label(asserted[0])
            } else {
                Prediction::Unparsed
            }
        }
    }
}

fn is_word_boundary(bytes: &[u8], idx: usize) -> bool {
    idx == 0 || idx >= bytes.len() || !bytes[idx - 1].is_ascii_alphanumeric()
}

fn find_word(haystack: &str, word: &str) -> bool {
    word_positions(haystack, word).next().is_some()
}

fn word_positions<'a>(haystack: &'a str, word: &'a str) -> impl Iterator<Item = usize> + 'a {
    let bytes = haystack.as_bytes();
    haystack.match_indices(word).filter_map(move |(i, _)| {
        let end = i + word.len();
        let start_ok = is_word_boundary(bytes, i);
        let end_ok = end >= bytes.len() || !bytes[end].is_ascii_alphanumeric();
        (start_ok && end_ok).then_some(i)
    })
}

/// True when the label occurs as `is <label>`, `was <label>` or `: <label>`
/// with no intervening negation (a negated form like "is not positive" does
/// not match because "not" sits between the verb and the label).
fn asserted_pattern(lower: &str, label: &str) -> bool {
    for pos in word_positions(lower, label) {
        let before = &lower[..pos];
        let trimmed = before.trim_end();
        if trimmed.ends_with(':')
            || ends_with_word(trimmed, "is")
            || ends_with_word(trimmed, "was")
        {
            return true;
        }
    }
    false
}

fn ends_with_word(s: &str, word: &str) -> bool {
    s.ends_with(word) && is_word_boundary(s.as_bytes(), s.len() - word.len())
}

// ---------------------------------------------------------------------------
// Few-shot conversation
// ---------------------------------------------------------------------------

/// One User turn holding every demo as an answered input-output pair, demo
/// order preserved, followed by the unanswered test query.
pub fn build_fewshot_conversation(
    demos: &[AbscInstance],
    test: &AbscInstance,
    templates: &Templates,
) -> Vec<ChatTurn> {
    let mut turns = Vec::new();
    if let Some(system) = &templates.system {
        turns.push(ChatTurn::system(system.clone()));
    }
    let mut body = String::new();
    for demo in demos {
        body.push_str(&templates.render_zero_shot(demo));
        body.push('\n');
        body.push_str(&templates.render_answer_line(demo.polarity));
        body.push_str("\n\n");
    }
    body.push_str(&templates.render_zero_shot(test));
    turns.push(ChatTurn::user(body));
    turns
}

// ---------------------------------------------------------------------------
// MCeFS state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// A User turn was appended; send the conversation to the backend and
    /// feed the reply to the next `step`.
    SendUser(String),
    /// Still waiting for a model reply.
    AwaitModel,
    Finished(ProtocolOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    AwaitPrediction(usize),
    AwaitReflection(usize),
    AwaitAnswer,
    Done,
}

/// Drives one MCeFS (or MCeFS+PR) conversation: per demo, elicit a
/// prediction without the gold label, assess it, feed back praise or the
/// correction, await a reflection; then ask the test query.
///
/// `test: None` runs only the learning phase, ending in a Finished action
/// with an empty outcome; the accumulated turns are the reusable learning
/// prefix.
pub struct McefsMachine {
    demos: Vec<AbscInstance>,
    test: Option<AbscInstance>,
    /// Some(praise) = MCeFS+PR; None = plain MCeFS (neutral acknowledgment).
    praise: Option<String>,
    templates: Templates,
    turns: Vec<ChatTurn>,
    phase: Phase,
    demo_assessments: Vec<bool>,
}

impl McefsMachine {
    pub fn new(
        demos: Vec<AbscInstance>,
        test: Option<AbscInstance>,
        praise: Option<String>,
        templates: Templates,
    ) -> Self {
        let mut turns = Vec::new();
        if let Some(system) = &templates.system {
            turns.push(ChatTurn::system(system.clone()));
        }
        McefsMachine {
            demos,
            test,
            praise,
            templates,
            turns,
            phase: Phase::Start,
            demo_assessments: Vec::new(),
        }
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn into_turns(self) -> Vec<ChatTurn> {
        self.turns
    }

    /// Correctness of each demo prediction, in demo order.
    pub fn demo_assessments(&self) -> &[bool] {
        &self.demo_assessments
    }

    fn send_user(&mut self, content: String) -> Action {
        self.turns.push(ChatTurn::user(content.clone()));
        Action::SendUser(content)
    }

    fn after_reflection(&mut self, next_demo: usize) -> Action {
        if next_demo < self.demos.len() {
            let prompt = self.templates.render_zero_shot(&self.demos[next_demo]);
            self.phase = Phase::AwaitPrediction(next_demo);
            self.send_user(prompt)
        } else if let Some(test) = &self.test {
            let prompt = self.templates.render_zero_shot(test);
            self.phase = Phase::AwaitAnswer;
            self.send_user(prompt)
        } else {
            self.phase = Phase::Done;
            Action::Finished(ProtocolOutcome {
                prediction: Prediction::Unparsed,
                raw_text: String::new(),
                correct: None,
            })
        }
    }

    pub fn step(&mut self, model_reply: Option<String>) -> Result<Action, ProtocolError> {
        match (self.phase, model_reply) {
            (Phase::Start, None) => Ok(self.after_reflection(0)),
            (Phase::AwaitPrediction(i), Some(reply)) => {
                let gold = self.demos[i].polarity;
                // Unparsed predictions cannot be confirmed correct, so they
                // take the wrong branch and the feedback reveals the gold.
                let correct = extract_label(&reply) == Prediction::Label(gold);
                self.turns.push(ChatTurn::assistant(reply));
                self.demo_assessments.push(correct);
                let feedback =
                    self.templates
                        .render_feedback(correct, gold, self.praise.as_deref());
                self.phase = Phase::AwaitReflection(i);
                Ok(self.send_user(feedback))
            }
            (Phase::AwaitReflection(i), Some(reply)) => {
                self.turns.push(ChatTurn::assistant(reply));
                Ok(self.after_reflection(i + 1))
            }
            (Phase::AwaitAnswer, Some(reply)) => {
                let prediction = extract_label(&reply);
                self.turns.push(ChatTurn::assistant(reply.clone()));
                self.phase = Phase::Done;
                let correct = match (prediction, &self.test) {
                    (Prediction::Label(p), Some(test)) => Some(p == test.polarity),
                    _ => None,
                };
                Ok(Action::Finished(ProtocolOutcome {
                    prediction,
                    raw_text: reply,
                    correct,
                }))
            }
            (Phase::Done, _) => Err(ProtocolError::ProtocolViolation(
                "step after Finished".into(),
            )),
            (Phase::Start, Some(_)) => Err(ProtocolError::ProtocolViolation(
                "model reply supplied before any user turn".into(),
            )),
            (_, None) => Err(ProtocolError::ProtocolViolation(
                "model reply absent while awaited".into(),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Praise elicitation and selection
// ---------------------------------------------------------------------------

/// Parse a model reply into candidate praise strings: one per non-empty
/// line, with list numbering or bullets stripped, duplicates removed while
/// preserving order.
pub fn parse_praise_reply(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in reply.lines() {
        let mut s = line.trim();
        s = s.trim_start_matches(['-', '*', '•']).trim_start();
        if let Some(rest) = strip_list_number(s) {
            s = rest;
        }
        let s = s.trim().trim_matches('"').trim();
        if !s.is_empty() && !out.iter().any(|p| p == s) {
            out.push(s.to_string());
        }
    }
    out
}

fn strip_list_number(s: &str) -> Option<&str> {
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &s[digits..];
    rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))
}

/// Index of the praise with the highest dev accuracy; ties break toward the
/// lower pool index.
pub fn select_praise(dev_accuracies: &[f64]) -> Result<usize, ProtocolError> {
    if dev_accuracies.is_empty() {
        return Err(ProtocolError::EmptyPool);
    }
    let mut best = 0usize;
    for (i, &acc) in dev_accuracies.iter().enumerate().skip(1) {
        if acc > dev_accuracies[best] {
            best = i;
        }
    }
    Ok(best)
}
