//! Shared fixtures: a synthetic SemEval-style corpus whose sentences never
//! contain a polarity word, so gold-leak checks can scan raw text.

#![allow(dead_code)] // each test target uses a different subset of helpers

use std::path::{Path, PathBuf};

use mcefs::runner::RunConfig;

pub fn fixture_xml(prefix: &str, n: usize) -> String {
    let mut xml = String::from("<?xml version=\"1.0\"?>\n<sentences>\n");
    for i in 0..n {
        let polarity = ["positive", "negative", "neutral"][i % 3];
        xml.push_str(&format!(
            "  <sentence id=\"{prefix}{i}\">\n    <text>Review {prefix}{i} talks about the {prefix}item{i} at length.</text>\n    <aspectTerms>\n      <aspectTerm term=\"{prefix}item{i}\" polarity=\"{polarity}\"/>\n    </aspectTerms>\n  </sentence>\n"
        ));
    }
    xml.push_str("</sentences>\n");
    xml
}

/// Writes train/test fixture XML files into `dir` and returns their paths.
pub fn write_fixture_corpus(dir: &Path, n_train: usize, n_test: usize) -> (PathBuf, PathBuf) {
    let train = dir.join("train.xml");
    let test = dir.join("test.xml");
    std::fs::write(&train, fixture_xml("tr", n_train)).unwrap();
    std::fs::write(&test, fixture_xml("te", n_test)).unwrap();
    (train, test)
}

pub fn scripted_config(dir: &Path, n_train: usize, n_test: usize, behavior: &str) -> RunConfig {
    let (train_path, test_path) = write_fixture_corpus(dir, n_train, n_test);
    RunConfig {
        dataset_name: "fixture".into(),
        train_path,
        test_path,
        backend_kind: format!("scripted:{behavior}"),
        cache: false,
        output_dir: dir.join("out"),
        ..RunConfig::default()
    }
}
