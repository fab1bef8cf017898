// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use xmrc::backend::{EvidenceCue, MockScript, ResponseRule};
use xmrc::corpus::{Answer, LangCode, ParallelCorpus, ParallelSample, SampleEntry};

pub const SMOKE_SAMPLES: usize = 20;
/// Samples whose en-de answer comes back in German.
pub const GERMAN_LEAKS: usize = 5;

fn entry(context: String, question: String, answer: String) -> SampleEntry {
    let start = context.find(&answer).expect("answer occurs in context");
    SampleEntry {
        answers: vec![Answer {
            answer_start: context[..start].chars().count(),
            text: answer,
        }],
        context,
        question,
    }
}

/// Two-language parallel corpus with one retrievable fact per sample.
pub fn smoke_corpus() -> ParallelCorpus {
    let en = LangCode::english();
    let de = LangCode::new("de").unwrap();
    let samples = (1..=SMOKE_SAMPLES)
        .map(|i| {
            let mut entries = BTreeMap::new();
            entries.insert(
                en.clone(),
                entry(
                    format!(
                        "Filler sentence one about topic {i}. The secret number of item {i} is value{i}. Another filler sentence here."
                    ),
                    format!("What is the secret number of item {i}?"),
                    format!("value{i}"),
                ),
            );
            entries.insert(
                de.clone(),
                entry(
                    format!(
                        "Ein Fuellsatz zum Thema {i}. Die geheime Nummer von Objekt {i} ist wert{i}. Noch ein Fuellsatz hier."
                    ),
                    format!("Was ist die geheime Nummer von Objekt {i}?"),
                    format!("wert{i}"),
                ),
            );
            ParallelSample {
                id: format!("s{i:02}"),
                entries,
            }
        })
        .collect();
    ParallelCorpus {
        name: "smoke".into(),
        languages: vec![de, en],
        samples,
    }
}

/// Mock that copies the fact from the test context, except for the first
/// few German questions which it answers in German.
pub fn smoke_script() -> MockScript {
    let mut s = MockScript::new(4, 8);
    s.focus_marker = Some("Your task starts here:".into());
    for i in 1..=GERMAN_LEAKS {
        s.rules.push(ResponseRule {
            cue: format!("Nummer von Objekt {i}?"),
            response: format!("Answer: wert{i}"),
        });
    }
    for i in 1..=SMOKE_SAMPLES {
        s.rules.push(ResponseRule {
            cue: format!("item {i} is"),
            response: format!("Answer: value{i}"),
        });
        s.rules.push(ResponseRule {
            cue: format!("Objekt {i} ist"),
            response: format!("Answer: wert{i}"),
        });
        s.evidence.push(EvidenceCue {
            cue: format!("is value{i}."),
            weight: 1.0,
        });
        s.evidence.push(EvidenceCue {
            cue: format!("ist wert{i}."),
            weight: 1.0,
        });
    }
    s
}

/// Writes corpus and mock script under `root` and returns config pairs.
pub fn smoke_setup(root: &Path) -> Vec<(String, String)> {
    let corpus_dir = root.join("corpus");
    fs::create_dir_all(&corpus_dir).unwrap();
    smoke_corpus().save(&corpus_dir).unwrap();
    let script = root.join("mock.json");
    fs::write(
        &script,
        serde_json::to_string_pretty(&smoke_script()).unwrap(),
    )
    .unwrap();
    let pairs = [
        ("corpus.path", corpus_dir.display().to_string()),
        ("corpus.name", "smoke".into()),
        ("backend.kind", "mock".into()),
        (
            "backend.model_path_or_endpoint",
            script.display().to_string(),
        ),
        ("judge.kind", "constant".into()),
        ("judge.constant_reply", "0".into()),
        ("detector.kind", "none".into()),
        ("run.dir", root.join("run").display().to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn set(pairs: &mut Vec<(String, String)>, key: &str, value: &str) {
    pairs.retain(|(k, _)| k != key);
    pairs.push((key.to_string(), value.to_string()));
}
