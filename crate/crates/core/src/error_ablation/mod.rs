// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error-type ablation: every evaluated answer is assigned exactly one of
//! language / blank / gibberish / refusal / content / correct, and the
//! classes are tallied into per-direction rates.
//!
//! Precedence for one record:
//! 1. blank, if the extracted answer is empty after trimming;
//! 2. gibberish or refusal, as typed by the judge;
//! 3. language error, if the reference is detected in the expected answer
//!    language, the answer is detected in the question language, and the
//!    two languages differ;
//! 4. correct, if the per-sample F1 exceeds the correctness threshold;
//! 5. content error otherwise.
//!
//! Records whose judge call failed are excluded from every rate and
//! counted separately.

mod detector;
mod judge;

#[cfg(feature = "lingua")]
pub use detector::LinguaDetector;
pub use detector::{LanguageDetector, NullDetector, TableDetector};
pub use judge::{
    judge_prompt, parse_judge_reply, CachedReply, ConstantJudge, HttpJudge, JudgeCache,
    JudgeCategory, JudgeClient, JudgeOutcome, JudgeTransport, OfflineJudge,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, LangCode};
use crate::error::{Error, Result};
use crate::scoring::AnswerScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalClass {
    Language,
    Blank,
    Gibberish,
    Refusal,
    Content,
    Correct,
}

impl FinalClass {
    pub const ALL: [FinalClass; 6] = [
        FinalClass::Language,
        FinalClass::Blank,
        FinalClass::Gibberish,
        FinalClass::Refusal,
        FinalClass::Content,
        FinalClass::Correct,
    ];
}

/// Which records form the rate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every classified record.
    #[default]
    All,
    /// Only records that are not correct; `correct_rate` is then 0.
    WrongOnly,
}

/// Everything needed to classify one answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInput {
    pub sample_id: String,
    pub direction: Direction,
    pub extracted_answer: String,
    /// Detected language of the answer.
    pub detected_lang: Option<LangCode>,
    /// Detected language of the (first) reference answer.
    pub reference_lang: Option<LangCode>,
    pub judge: JudgeOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub sample_id: String,
    pub direction: Direction,
    pub detected_lang: Option<LangCode>,
    pub reference_lang: Option<LangCode>,
    pub judge_category: Option<JudgeCategory>,
    pub judge_unavailable: bool,
    pub f1: f64,
    /// `None` when the record was excluded (judge unavailable).
    pub final_class: Option<FinalClass>,
}

/// Pure class assignment. Returns `None` for judge-unavailable records.
pub fn classify_record(input: &ErrorInput, f1: f64, correct_threshold: f64) -> Option<FinalClass> {
    if input.extracted_answer.trim().is_empty() {
        return Some(FinalClass::Blank);
    }
    match input.judge {
        JudgeOutcome::Unavailable => return None,
        JudgeOutcome::Category(JudgeCategory::Gibberish) => return Some(FinalClass::Gibberish),
        JudgeOutcome::Category(JudgeCategory::Refusal) => return Some(FinalClass::Refusal),
        // A "blank" verdict on non-empty text is not a blank answer.
        JudgeOutcome::Category(_) => {}
    }
    let d = &input.direction;
    let wrong_language = d.context_lang != d.question_lang
        && input.reference_lang.as_ref() == Some(&d.context_lang)
        && input.detected_lang.as_ref() == Some(&d.question_lang);
    if wrong_language {
        return Some(FinalClass::Language);
    }
    if f1 > correct_threshold {
        Some(FinalClass::Correct)
    } else {
        Some(FinalClass::Content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub direction: Direction,
    pub n: usize,
    pub counts: BTreeMap<FinalClass, usize>,
    pub language_rate: f64,
    pub generation_rate: f64,
    pub blank_rate: f64,
    pub gibberish_rate: f64,
    pub refusal_rate: f64,
    pub content_rate: f64,
    pub correct_rate: f64,
    pub judge_unavailable: usize,
    pub denominator: Denominator,
}

impl ErrorReport {
    pub fn rate(&self, class: FinalClass) -> f64 {
        match class {
            FinalClass::Language => self.language_rate,
            FinalClass::Blank => self.blank_rate,
            FinalClass::Gibberish => self.gibberish_rate,
            FinalClass::Refusal => self.refusal_rate,
            FinalClass::Content => self.content_rate,
            FinalClass::Correct => self.correct_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorConfig {
    pub correct_threshold: f64,
    pub denominator: Denominator,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        ErrorConfig {
            correct_threshold: 0.5,
            denominator: Denominator::All,
        }
    }
}

/// Classify every record of one direction and tally the rates.
pub fn compute_error_report(
    direction: &Direction,
    inputs: &[ErrorInput],
    scores: &BTreeMap<String, AnswerScore>,
    config: ErrorConfig,
) -> Result<(Vec<ErrorRecord>, ErrorReport)> {
    let ids: BTreeSet<&str> = inputs.iter().map(|i| i.sample_id.as_str()).collect();
    if ids.len() != inputs.len()
        || ids.len() != scores.len()
        || ids.iter().any(|id| !scores.contains_key(*id))
    {
        return Err(Error::InvalidArgument(format!(
            "error records and scores for {direction} are not aligned by sample id"
        )));
    }

    let mut records = Vec::with_capacity(inputs.len());
    let mut counts: BTreeMap<FinalClass, usize> = FinalClass::ALL.iter().map(|c| (*c, 0)).collect();
    let mut unavailable = 0;
    for input in inputs {
        if &input.direction != direction {
            return Err(Error::InvalidArgument(format!(
                "record {} belongs to {}, not {direction}",
                input.sample_id, input.direction
            )));
        }
        let f1 = scores[&input.sample_id].f1;
        let class = classify_record(input, f1, config.correct_threshold);
        match class {
            Some(c) => *counts.get_mut(&c).expect("all classes present") += 1,
            None => unavailable += 1,
        }
        let judge_category = match input.judge {
            JudgeOutcome::Category(c) => Some(c),
            JudgeOutcome::Unavailable => None,
        };
        records.push(ErrorRecord {
            sample_id: input.sample_id.clone(),
            direction: direction.clone(),
            detected_lang: input.detected_lang.clone(),
            reference_lang: input.reference_lang.clone(),
            judge_category,
            judge_unavailable: input.judge == JudgeOutcome::Unavailable,
            f1,
            final_class: class,
        });
    }

    let classified: usize = counts.values().sum();
    let n = match config.denominator {
        Denominator::All => classified,
        Denominator::WrongOnly => classified - counts[&FinalClass::Correct],
    };
    let rate = |c: FinalClass| {
        if n == 0 || (c == FinalClass::Correct && config.denominator == Denominator::WrongOnly) {
            0.0
        } else {
            100.0 * counts[&c] as f64 / n as f64
        }
    };
    let generation =
        counts[&FinalClass::Blank] + counts[&FinalClass::Gibberish] + counts[&FinalClass::Refusal];
    let report = ErrorReport {
        direction: direction.clone(),
        n,
        language_rate: rate(FinalClass::Language),
        generation_rate: if n == 0 {
            0.0
        } else {
            100.0 * generation as f64 / n as f64
        },
        blank_rate: rate(FinalClass::Blank),
        gibberish_rate: rate(FinalClass::Gibberish),
        refusal_rate: rate(FinalClass::Refusal),
        content_rate: rate(FinalClass::Content),
        correct_rate: rate(FinalClass::Correct),
        counts,
        judge_unavailable: unavailable,
        denominator: config.denominator,
    };
    Ok((records, report))
}

/// Share of records (matched by sample id and direction) on which two
/// judges gave the same category. `None` if no record is comparable.
pub fn judge_agreement(a: &[ErrorRecord], b: &[ErrorRecord]) -> Option<f64> {
    let other: BTreeMap<(&str, &Direction), Option<JudgeCategory>> = b
        .iter()
        .map(|r| ((r.sample_id.as_str(), &r.direction), r.judge_category))
        .collect();
    let (mut same, mut total) = (0usize, 0usize);
    for r in a {
        if let (Some(x), Some(Some(y))) = (
            r.judge_category,
            other.get(&(r.sample_id.as_str(), &r.direction)),
        ) {
            total += 1;
            same += usize::from(x == *y);
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn en_de() -> Direction {
        "en-de".parse().unwrap()
    }

    fn input(id: usize, answer: &str, judge: JudgeOutcome, ans_lang: Option<&str>) -> ErrorInput {
        ErrorInput {
            sample_id: format!("s{id:03}"),
            direction: en_de(),
            extracted_answer: answer.into(),
            detected_lang: ans_lang.map(|l| LangCode::new(l).unwrap()),
            reference_lang: Some(LangCode::english()),
            judge,
        }
    }

    fn score(f1: f64) -> AnswerScore {
        AnswerScore {
            f1,
            em: f1 == 1.0,
            pred_normalized: vec![],
            best_reference_index: 0,
        }
    }

    const OK: JudgeOutcome = JudgeOutcome::Category(JudgeCategory::Reasonable);

    #[test]
    fn precedence() {
        // Blank beats a language error.
        let blank = input(0, " ", OK, Some("de"));
        assert_eq!(classify_record(&blank, 0.0, 0.5), Some(FinalClass::Blank));
        let gib = input(
            0,
            "{Your Answer}",
            JudgeOutcome::Category(JudgeCategory::Gibberish),
            Some("de"),
        );
        assert_eq!(classify_record(&gib, 0.0, 0.5), Some(FinalClass::Gibberish));
        let lang = input(0, "vier", OK, Some("de"));
        assert_eq!(classify_record(&lang, 0.0, 0.5), Some(FinalClass::Language));
        let right = input(0, "four", OK, Some("en"));
        assert_eq!(
            classify_record(&right, 0.51, 0.5),
            Some(FinalClass::Correct)
        );
        assert_eq!(classify_record(&right, 0.5, 0.5), Some(FinalClass::Content));
        let down = input(0, "four", JudgeOutcome::Unavailable, Some("en"));
        assert_eq!(classify_record(&down, 1.0, 0.5), None);
    }

    #[test]
    fn no_language_error_in_monolingual_directions() {
        let mut i = input(0, "vier", OK, Some("de"));
        i.direction = "de-de".parse().unwrap();
        i.reference_lang = Some(LangCode::new("de").unwrap());
        assert_eq!(classify_record(&i, 0.0, 0.5), Some(FinalClass::Content));
    }

    #[test]
    fn all_correct_english() {
        let inputs: Vec<_> = (0..10).map(|i| input(i, "four", OK, Some("en"))).collect();
        let scores = (0..10).map(|i| (format!("s{i:03}"), score(1.0))).collect();
        let (_, r) =
            compute_error_report(&en_de(), &inputs, &scores, ErrorConfig::default()).unwrap();
        assert_eq!(
            (r.language_rate, r.generation_rate, r.correct_rate),
            (0.0, 0.0, 100.0)
        );
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let inputs = vec![input(0, "a", OK, None)];
        let scores = [("s999".to_string(), score(1.0))].into();
        assert!(compute_error_report(&en_de(), &inputs, &scores, ErrorConfig::default()).is_err());
    }

    #[test]
    fn unavailable_is_excluded_and_counted() {
        let inputs = vec![
            input(0, "a", JudgeOutcome::Unavailable, None),
            input(1, "b", OK, None),
        ];
        let scores = [
            ("s000".to_string(), score(1.0)),
            ("s001".to_string(), score(1.0)),
        ]
        .into();
        let (recs, r) =
            compute_error_report(&en_de(), &inputs, &scores, ErrorConfig::default()).unwrap();
        assert_eq!((r.n, r.judge_unavailable, r.correct_rate), (1, 1, 100.0));
        assert!(recs[0].judge_unavailable);
    }

    #[test]
    fn wrong_only_denominator() {
        let inputs = vec![
            input(0, "vier", OK, Some("de")),
            input(1, "x", OK, Some("en")),
            input(2, "four", OK, Some("en")),
        ];
        let scores = [
            ("s000".to_string(), score(0.0)),
            ("s001".to_string(), score(0.0)),
            ("s002".to_string(), score(1.0)),
        ]
        .into();
        let cfg = ErrorConfig {
            correct_threshold: 0.5,
            denominator: Denominator::WrongOnly,
        };
        let (_, r) = compute_error_report(&en_de(), &inputs, &scores, cfg).unwrap();
        assert_eq!(
            (r.n, r.language_rate, r.content_rate, r.correct_rate),
            (2, 50.0, 50.0, 0.0)
        );
    }

    #[test]
    fn agreement() {
        let mk = |id: &str, c: Option<JudgeCategory>| ErrorRecord {
            sample_id: id.into(),
            direction: en_de(),
            detected_lang: None,
            reference_lang: None,
            judge_category: c,
            judge_unavailable: c.is_none(),
            f1: 0.0,
            final_class: None,
        };
        let a = vec![
            mk("1", Some(JudgeCategory::Reasonable)),
            mk("2", Some(JudgeCategory::Gibberish)),
            mk("3", None),
        ];
        let b = vec![
            mk("1", Some(JudgeCategory::Reasonable)),
            mk("2", Some(JudgeCategory::Refusal)),
            mk("3", Some(JudgeCategory::Blank)),
        ];
        assert_eq!(judge_agreement(&a, &b), Some(0.5));
        assert_eq!(judge_agreement(&a[2..], &b), None);
    }

    proptest! {
        #[test]
        fn rates_partition_and_generation_sums(
            cases in proptest::collection::vec((0u8..4, any::<bool>(), any::<bool>(), 0.0f64..=1.0, any::<bool>()), 1..80)
        ) {
            let mut inputs = Vec::new();
            let mut scores = BTreeMap::new();
            for (i, (cat, blank, german, f1, down)) in cases.iter().enumerate() {
                let judge = if *down {
                    JudgeOutcome::Unavailable
                } else {
                    JudgeOutcome::Category([JudgeCategory::Reasonable, JudgeCategory::Blank, JudgeCategory::Gibberish, JudgeCategory::Refusal][*cat as usize])
                };
                let lang = if *german { "de" } else { "en" };
                inputs.push(input(i, if *blank { "" } else { "text" }, judge, Some(lang)));
                scores.insert(format!("s{i:03}"), score(*f1));
            }
            let (recs, r) = compute_error_report(&en_de(), &inputs, &scores, ErrorConfig::default()).unwrap();
            prop_assert_eq!(r.counts.values().sum::<usize>() + r.judge_unavailable, recs.len());
            if r.n > 0 {
                let total: f64 = FinalClass::ALL.iter().map(|c| r.rate(*c)).sum();
                prop_assert!((total - 100.0).abs() < 1e-9);
                prop_assert!((r.generation_rate - (r.blank_rate + r.gibberish_rate + r.refusal_rate)).abs() < 1e-9);
            }
            // Reclassification is idempotent.
            let (recs2, r2) = compute_error_report(&en_de(), &inputs, &scores, ErrorConfig::default()).unwrap();
            prop_assert_eq!(recs, recs2);
            prop_assert_eq!(r, r2);
        }
    }
}
