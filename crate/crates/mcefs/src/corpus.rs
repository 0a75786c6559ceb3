//! SemEval-2014 Task 4 corpus ingestion.
//!
//! Parses the official ABSC XML files into typed instances, keeping only the
//! three-class label set (positive / negative / neutral). Aspect terms labeled
//! `conflict` are dropped and counted in the load log.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentiment polarity of an aspect term. Exactly three classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    /// Lowercase word as it appears in prompts and model output.
    pub fn word(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    /// Index into a fixed 3-class confusion matrix.
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_word(s: &str) -> Option<Polarity> {
        match s.to_ascii_lowercase().as_str() {
            "positive" => Some(Polarity::Positive),
            "negative" => Some(Polarity::Negative),
            "neutral" => Some(Polarity::Neutral),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// One (sentence, aspect term) pair with its gold polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbscInstance {
    pub sentence: String,
    pub aspect_term: String,
    pub polarity: Polarity,
    /// Sentence id plus aspect index within the sentence, e.g. "813:0".
    pub source_id: String,
    /// Character offsets of the aspect term in the sentence, when the
    /// official `from`/`to` attributes agree with the term text.
    pub char_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub train: Vec<AbscInstance>,
    pub test: Vec<AbscInstance>,
}

/// Per-split counts dropped or kept during parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadLog {
    pub kept: usize,
    pub dropped_conflict: usize,
    pub sentences_without_aspects: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed xml: {0}")]
    MalformedXml(String),
    #[error("unknown polarity attribute {value:?} on sentence {sentence_id}")]
    UnknownPolarity { value: String, sentence_id: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record on line {line}: {message}")]
    BadRecord { line: usize, message: String },
}

/// Parse one SemEval-2014 Task 4 XML file into instances, document order
/// preserved. `conflict` aspect terms are dropped; any other unknown polarity
/// value is an error.
pub fn parse_semeval(xml_bytes: &[u8]) -> Result<Vec<AbscInstance>, CorpusError> {
    let (instances, _) = parse_semeval_logged(xml_bytes)?;
    Ok(instances)
}

pub fn parse_semeval_logged(xml_bytes: &[u8]) -> Result<(Vec<AbscInstance>, LoadLog), CorpusError> {
    let mut reader = Reader::from_reader(xml_bytes);
    reader.config_mut().trim_text(false);

    let mut instances = Vec::new();
    let mut log = LoadLog::default();
    let mut buf = Vec::new();

    let mut sentence_id = String::new();
    let mut sentence_text: Option<String> = None;
    let mut in_text = false;
    let mut aspect_index = 0usize;
    let mut sentence_had_aspects = false;
    let mut in_sentence = false;

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| CorpusError::MalformedXml(e.to_string()))?;
        match event {
            Event::Start(ref e) => match e.name().as_ref() {
                b"sentence" => {
                    in_sentence = true;
                    sentence_id = attr(e, b"id").unwrap_or_default();
                    sentence_text = None;
                    aspect_index = 0;
                    sentence_had_aspects = false;
                }
                b"text" => in_text = true,
                b"aspectTerm" => {
                    push_aspect(
                        e,
                        &sentence_id,
                        sentence_text.as_deref(),
                        &mut aspect_index,
                        &mut sentence_had_aspects,
                        &mut instances,
                        &mut log,
                    )?;
                }
                _ => {}
            },
            Event::Empty(ref e) => {
                if e.name().as_ref() == b"aspectTerm" {
                    push_aspect(
                        e,
                        &sentence_id,
                        sentence_text.as_deref(),
                        &mut aspect_index,
                        &mut sentence_had_aspects,
                        &mut instances,
                        &mut log,
                    )?;
                }
            }
            Event::Text(t) => {
                if in_text {
                    let decoded = t
                        .unescape()
                        .map_err(|e| CorpusError::MalformedXml(e.to_string()))?;
                    sentence_text = Some(decoded.into_owned());
                }
            }
            Event::End(ref e) => match e.name().as_ref() {
                b"text" => in_text = false,
                b"sentence" => {
                    if in_sentence && !sentence_had_aspects {
                        log.sentences_without_aspects += 1;
                    }
                    in_sentence = false;
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    log.kept = instances.len();
    Ok((instances, log))
}

fn push_aspect(
    e: &quick_xml::events::BytesStart<'_>,
    sentence_id: &str,
    sentence_text: Option<&str>,
    aspect_index: &mut usize,
    sentence_had_aspects: &mut bool,
    instances: &mut Vec<AbscInstance>,
    log: &mut LoadLog,
) -> Result<(), CorpusError> {
    *sentence_had_aspects = true;
    let term = attr(e, b"term").unwrap_or_default();
    let polarity_raw = attr(e, b"polarity").unwrap_or_default();
    let idx = *aspect_index;
    *aspect_index += 1;

    let polarity = match polarity_raw.as_str() {
        "positive" => Polarity::Positive,
        "negative" => Polarity::Negative,
        "neutral" => Polarity::Neutral,
        "conflict" => {
            log.dropped_conflict += 1;
            return Ok(());
        }
        other => {
            return Err(CorpusError::UnknownPolarity {
                value: other.to_string(),
                sentence_id: sentence_id.to_string(),
            })
        }
    };

    let sentence = sentence_text.unwrap_or_default().to_string();
    if sentence.is_empty() || term.is_empty() {
        return Err(CorpusError::MalformedXml(format!(
            "sentence {sentence_id}: empty sentence text or aspect term"
        )));
    }

    // Keep offsets only when they actually point at the term; the official
    // files contain a handful of offset glitches and `term` wins.
    let char_span = span_attrs(e).filter(|&(from, to)| {
        sentence
            .get(from..to)
            .map(|s| s == term)
            .unwrap_or(false)
    });

    instances.push(AbscInstance {
        sentence,
        aspect_term: term,
        polarity,
        source_id: format!("{sentence_id}:{idx}"),
        char_span,
    });
    Ok(())
}

fn attr(e: &quick_xml::events::BytesStart<'_>, name: &[u8]) -> Option<String> {
    e.attributes().flatten().find_map(|a| {
        if a.key.as_ref() == name {
            a.unescape_value().ok().map(|v| v.into_owned())
        } else {
            None
        }
    })
}

fn span_attrs(e: &quick_xml::events::BytesStart<'_>) -> Option<(usize, usize)> {
    let from = attr(e, b"from")?.parse().ok()?;
    let to = attr(e, b"to")?.parse().ok()?;
    Some((from, to))
}

impl Corpus {
    pub fn load(
        name: &str,
        train_xml: &[u8],
        test_xml: &[u8],
    ) -> Result<(Corpus, LoadLog, LoadLog), CorpusError> {
        let (train, train_log) = parse_semeval_logged(train_xml)?;
        let (test, test_log) = parse_semeval_logged(test_xml)?;
        Ok((
            Corpus {
                name: name.to_string(),
                train,
                test,
            },
            train_log,
            test_log,
        ))
    }

    pub fn load_from_paths(
        name: &str,
        train_path: &Path,
        test_path: &Path,
    ) -> Result<(Corpus, LoadLog, LoadLog), CorpusError> {
        let train = std::fs::read(train_path)?;
        let test = std::fs::read(test_path)?;
        Corpus::load(name, &train, &test)
    }
}

/// Split sizes and per-label breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train_count: usize,
    pub test_count: usize,
    pub train_per_label: BTreeMap<Polarity, usize>,
    pub test_per_label: BTreeMap<Polarity, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let count = |split: &[AbscInstance]| {
        let mut m: BTreeMap<Polarity, usize> = Polarity::ALL.iter().map(|&p| (p, 0)).collect();
        for inst in split {
            *m.get_mut(&inst.polarity).unwrap() += 1;
        }
        m
    };
    CorpusStats {
        train_count: corpus.train.len(),
        test_count: corpus.test.len(),
        train_per_label: count(&corpus.train),
        test_per_label: count(&corpus.test),
    }
}

/// Write instances as line-delimited JSON, one record per line.
pub fn write_instances<W: Write>(mut w: W, instances: &[AbscInstance]) -> Result<(), CorpusError> {
    for inst in instances {
        let line = serde_json::to_string(inst)
            .map_err(|e| CorpusError::BadRecord { line: 0, message: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(r: R) -> Result<Vec<AbscInstance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}
