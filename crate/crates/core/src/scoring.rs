// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer extraction, SQuAD-style F1/EM, per-direction aggregation,
//! cross-lingual ratios and per-sample categorization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, DirectionKind};
use crate::error::{Error, Result};
use crate::prompting::ANSWER_PREFIX;

/// Text after the last `Answer:` (ASCII case-insensitive), trimmed. Without
/// a marker the whole text is returned trimmed.
pub fn extract_answer(raw: &str) -> String {
    let needle = ANSWER_PREFIX.as_bytes();
    let hay = raw.as_bytes();
    let last = (0..hay.len().saturating_sub(needle.len() - 1))
        .rev()
        .find(|&i| hay[i..i + needle.len()].eq_ignore_ascii_case(needle));
    match last {
        Some(i) => raw[i + needle.len()..].trim().to_string(),
        None => raw.trim().to_string(),
    }
}

/// Turns an answer string into comparison tokens.
pub trait AnswerNormalizer: Send + Sync {
    fn normalize(&self, text: &str) -> Vec<String>;
}

/// The SQuAD rules: lowercase, drop ASCII punctuation, drop the articles
/// `a`, `an`, `the` wherever they form a whole run of word characters,
/// split on whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquadNormalizer;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl AnswerNormalizer for SquadNormalizer {
    fn normalize(&self, text: &str) -> Vec<String> {
        let stripped: Vec<char> = text
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        let mut out = String::with_capacity(stripped.len());
        let mut i = 0;
        while i < stripped.len() {
            if !is_word_char(stripped[i]) {
                out.push(stripped[i]);
                i += 1;
                continue;
            }
            let start = i;
            while i < stripped.len() && is_word_char(stripped[i]) {
                i += 1;
            }
            let word: String = stripped[start..i].iter().collect();
            if matches!(word.as_str(), "a" | "an" | "the") {
                out.push(' ');
            } else {
                out.push_str(&word);
            }
        }
        out.split_whitespace().map(str::to_string).collect()
    }
}

pub fn normalize_answer(text: &str) -> Vec<String> {
    SquadNormalizer.normalize(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub f1: f64,
    pub em: bool,
    pub pred_normalized: Vec<String>,
    pub best_reference_index: usize,
}

fn token_f1(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Score a prediction against every reference and keep the best.
pub fn score_answer_with(
    normalizer: &dyn AnswerNormalizer,
    pred: &str,
    references: &[String],
) -> Result<AnswerScore> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("no reference answers".into()));
    }
    let pred_normalized = normalizer.normalize(pred);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_reference_index = 0;
    let mut em = false;
    for (i, reference) in references.iter().enumerate() {
        let r = normalizer.normalize(reference);
        let f1 = token_f1(&pred_normalized, &r);
        if f1 > best_f1 {
            best_f1 = f1;
            best_reference_index = i;
        }
        em |= pred_normalized == r;
    }
    Ok(AnswerScore {
        f1: best_f1,
        em,
        pred_normalized,
        best_reference_index,
    })
}

pub fn score_answer(pred: &str, references: &[String]) -> Result<AnswerScore> {
    score_answer_with(&SquadNormalizer, pred, references)
}

/// Order-independent mean: values are summed in sorted order.
pub(crate) fn stable_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub direction: Direction,
    pub mean_f1_x100: f64,
    pub mean_em_x100: f64,
    pub n: usize,
}

impl DirectionSummary {
    pub fn display_f1(&self) -> String {
        format!("{:.2}", self.mean_f1_x100)
    }

    pub fn display_em(&self) -> String {
        format!("{:.2}", self.mean_em_x100)
    }
}

pub fn aggregate_direction(
    direction: &Direction,
    scores: &[AnswerScore],
) -> Result<DirectionSummary> {
    let f1 = stable_mean(scores.iter().map(|s| s.f1))
        .ok_or_else(|| Error::InvalidArgument(format!("no scores for {direction}")))?;
    let em = stable_mean(scores.iter().map(|s| if s.em { 1.0 } else { 0.0 })).unwrap_or(0.0);
    Ok(DirectionSummary {
        direction: direction.clone(),
        mean_f1_x100: 100.0 * f1,
        mean_em_x100: 100.0 * em,
        n: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualRatios {
    pub en_en: f64,
    pub mean_en_x: Option<f64>,
    pub mean_x_x: Option<f64>,
    /// `None` when the run has no en-x directions.
    pub en_x_over_en_en: Option<f64>,
    pub x_x_over_en_en: Option<f64>,
}

/// Mean non-English performance relative to en-en.
pub fn cross_lingual_ratio(
    summaries: &BTreeMap<Direction, DirectionSummary>,
) -> Result<CrossLingualRatios> {
    let en_en = summaries
        .get(&Direction::en_en())
        .ok_or_else(|| Error::InvalidArgument("en-en summary is required for ratios".into()))?
        .mean_f1_x100;
    if en_en <= 0.0 {
        return Err(Error::Degenerate(
            "en-en mean is zero; ratios undefined".into(),
        ));
    }
    let mean_of = |kind: DirectionKind| {
        stable_mean(
            summaries
                .iter()
                .filter(|(d, _)| d.kind() == kind)
                .map(|(_, s)| s.mean_f1_x100),
        )
    };
    let mean_en_x = mean_of(DirectionKind::EnX);
    let mean_x_x = mean_of(DirectionKind::XX);
    Ok(CrossLingualRatios {
        en_en,
        mean_en_x,
        mean_x_x,
        en_x_over_en_en: mean_en_x.map(|m| m / en_en),
        x_x_over_en_en: mean_x_x.map(|m| m / en_en),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Balanced,
    EnSuperior,
    Other,
}

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::Balanced => "balanced",
            Category::EnSuperior => "en_superior",
            Category::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCategory {
    pub category: Category,
    pub per_direction_f1: BTreeMap<Direction, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryThresholds {
    pub balanced: f64,
    pub margin: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        CategoryThresholds {
            balanced: 0.5,
            margin: 0.5,
        }
    }
}

/// Classify one sample from its per-direction F1.
///
/// Balanced: F1 strictly above `balanced` in every analyzed direction.
/// En-superior: en-en F1 minus the mean F1 over the analyzed en-x
/// directions strictly above `margin`. Balanced takes precedence.
pub fn categorize_sample(
    per_direction_f1: &BTreeMap<Direction, f64>,
    directions: &[Direction],
    thresholds: CategoryThresholds,
) -> Result<SampleCategory> {
    let en_en = Direction::en_en();
    let mut wanted: Vec<&Direction> = directions.iter().collect();
    if !wanted.contains(&&en_en) {
        wanted.push(&en_en);
    }
    let mut picked = BTreeMap::new();
    for d in wanted {
        let f1 = per_direction_f1
            .get(d)
            .ok_or_else(|| Error::InvalidArgument(format!("missing F1 for direction {d}")))?;
        picked.insert(d.clone(), *f1);
    }

    let balanced = picked.values().all(|&f| f > thresholds.balanced);
    let en_x_mean = stable_mean(
        picked
            .iter()
            .filter(|(d, _)| d.kind() == DirectionKind::EnX)
            .map(|(_, f)| *f),
    );
    let en_superior = en_x_mean.is_some_and(|m| picked[&en_en] - m > thresholds.margin);

    let category = if balanced {
        Category::Balanced
    } else if en_superior {
        Category::EnSuperior
    } else {
        Category::Other
    };
    Ok(SampleCategory {
        category,
        per_direction_f1: picked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LangCode;
    use proptest::prelude::*;

    fn refs(r: &[&str]) -> Vec<String> {
        r.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extraction() {
        assert_eq!(
            extract_answer("Answer: four Pro Bowl selections."),
            "four Pro Bowl selections."
        );
        assert_eq!(extract_answer(""), "");
        assert_eq!(extract_answer("Answer: a\nAnswer: b"), "b");
        assert_eq!(extract_answer("ANSWER:  x "), "x");
        assert_eq!(extract_answer("  just text "), "just text");
        assert_eq!(extract_answer("Answer:"), "");
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_answer("four Pro Bowl selections."),
            vec!["four", "pro", "bowl", "selections"]
        );
        assert_eq!(normalize_answer("The answer"), vec!["answer"]);
        assert!(normalize_answer("").is_empty());
        assert_eq!(
            normalize_answer("Theatre, an  apple"),
            vec!["theatre", "apple"]
        );
        // Non-ASCII punctuation survives but still bounds a word.
        assert_eq!(
            normalize_answer("a\u{2019}s the\u{2014}end"),
            vec!["\u{2019}s", "\u{2014}end"]
        );
        assert_eq!(normalize_answer("the-end a.b"), vec!["theend", "ab"]);
    }

    #[test]
    fn pro_bowl_case() {
        let s = score_answer("four Pro Bowl selections.", &refs(&["four"])).unwrap();
        assert!(!s.em);
        assert!((s.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn exact_and_empty_cases() {
        let s = score_answer("Denver Broncos", &refs(&["Denver Broncos"])).unwrap();
        assert_eq!((s.f1, s.em), (1.0, true));
        let s = score_answer("the", &refs(&["a."])).unwrap();
        assert_eq!((s.f1, s.em), (1.0, true));
        let s = score_answer("", &refs(&["x"])).unwrap();
        assert_eq!((s.f1, s.em), (0.0, false));
        assert!(score_answer("x", &[]).is_err());
    }

    #[test]
    fn best_reference_is_reported() {
        let s = score_answer("Carolina Panthers", &refs(&["Broncos", "the Panthers"])).unwrap();
        assert_eq!(s.best_reference_index, 1);
    }

    #[test]
    fn aggregate() {
        let d = Direction::en_en();
        let mk = |f1: f64| AnswerScore {
            f1,
            em: f1 == 1.0,
            pred_normalized: vec![],
            best_reference_index: 0,
        };
        let s = aggregate_direction(&d, &[mk(1.0), mk(0.5)]).unwrap();
        assert_eq!(s.display_f1(), "75.00");
        assert_eq!(s.mean_em_x100, 50.0);
        let z = aggregate_direction(&d, &[mk(0.0), mk(0.0)]).unwrap();
        assert_eq!(z.display_f1(), "0.00");
        assert!(aggregate_direction(&d, &[]).is_err());
    }

    fn summary(d: &str, mean: f64) -> (Direction, DirectionSummary) {
        let direction: Direction = d.parse().unwrap();
        (
            direction.clone(),
            DirectionSummary {
                direction,
                mean_f1_x100: mean,
                mean_em_x100: 0.0,
                n: 1,
            },
        )
    }

    #[test]
    fn published_ratio() {
        let m: BTreeMap<_, _> = [summary("en-en", 77.89), summary("en-de", 72.13)].into();
        let r = cross_lingual_ratio(&m).unwrap();
        assert_eq!(format!("{:.2}", r.en_x_over_en_en.unwrap()), "0.93");
        assert!(r.x_x_over_en_en.is_none());
    }

    #[test]
    fn ratio_cases() {
        let m: BTreeMap<_, _> = [
            summary("en-en", 0.6),
            summary("en-de", 0.8),
            summary("en-zh", 0.4),
        ]
        .into();
        assert!((cross_lingual_ratio(&m).unwrap().en_x_over_en_en.unwrap() - 1.0).abs() < 1e-12);
        let eq: BTreeMap<_, _> = [
            summary("en-en", 50.0),
            summary("en-de", 50.0),
            summary("de-de", 50.0),
        ]
        .into();
        let r = cross_lingual_ratio(&eq).unwrap();
        assert_eq!(
            (r.en_x_over_en_en, r.x_x_over_en_en),
            (Some(1.0), Some(1.0))
        );
        let missing: BTreeMap<_, _> = [summary("en-de", 50.0)].into();
        assert!(cross_lingual_ratio(&missing).is_err());
    }

    fn f1_map(pairs: &[(&str, f64)]) -> (BTreeMap<Direction, f64>, Vec<Direction>) {
        let m: BTreeMap<Direction, f64> = pairs
            .iter()
            .map(|(d, f)| (d.parse().unwrap(), *f))
            .collect();
        let dirs = m.keys().cloned().collect();
        (m, dirs)
    }

    #[test]
    fn categories() {
        let t = CategoryThresholds::default();
        let (m, d) = f1_map(&[("en-en", 0.7), ("en-de", 0.7), ("en-zh", 0.7)]);
        assert_eq!(
            categorize_sample(&m, &d, t).unwrap().category,
            Category::Balanced
        );
        let (m, d) = f1_map(&[("en-en", 0.9), ("en-de", 0.3), ("en-zh", 0.3)]);
        assert_eq!(
            categorize_sample(&m, &d, t).unwrap().category,
            Category::EnSuperior
        );
        let (m, d) = f1_map(&[("en-en", 0.51), ("en-de", 0.50)]);
        assert_eq!(
            categorize_sample(&m, &d, t).unwrap().category,
            Category::Other
        );
        let (m, _) = f1_map(&[("en-en", 0.9)]);
        let de: Direction = "en-de".parse().unwrap();
        assert!(categorize_sample(&m, &[de], t).is_err());
    }

    #[test]
    fn exact_margin_is_not_en_superior() {
        let (m, d) = f1_map(&[("en-en", 1.0), ("en-de", 0.5)]);
        assert_eq!(
            categorize_sample(&m, &d, CategoryThresholds::default())
                .unwrap()
                .category,
            Category::Other
        );
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just("the".to_string()),
                Just("A".to_string()),
                Just("an".to_string()),
                Just("Bowl".to_string()),
                Just("bowl.".to_string()),
                Just("four".to_string()),
                Just("x,y".to_string()),
                Just("Zürich".to_string()),
                Just("!".to_string()),
            ],
            0..6,
        )
        .prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in arb_text(), b in arb_text()) {
            let ab = score_answer(&a, std::slice::from_ref(&b)).unwrap();
            let ba = score_answer(&b, std::slice::from_ref(&a)).unwrap();
            prop_assert_eq!(ab.f1, ba.f1);
        }

        #[test]
        fn em_implies_full_f1(a in arb_text(), b in arb_text()) {
            let s = score_answer(&a, &[b]).unwrap();
            prop_assert!(!s.em || s.f1 == 1.0);
        }

        #[test]
        fn f1_ignores_case_punctuation_articles(a in arb_text(), b in arb_text()) {
            let base = score_answer(&a, std::slice::from_ref(&b)).unwrap().f1;
            let noisy = format!("The {}!", a.to_uppercase());
            prop_assert_eq!(score_answer(&noisy, &[b]).unwrap().f1, base);
        }

        #[test]
        fn more_references_never_hurt(a in arb_text(), r in arb_text(), extra in proptest::collection::vec(arb_text(), 0..3)) {
            let one = score_answer(&a, std::slice::from_ref(&r)).unwrap();
            let mut all = vec![r];
            all.extend(extra);
            let many = score_answer(&a, &all).unwrap();
            prop_assert!(many.f1 >= one.f1);
            prop_assert!(many.em || !one.em);
        }

        #[test]
        fn aggregation_is_permutation_invariant(mut v in proptest::collection::vec(0.0f64..=1.0, 1..60), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let d = Direction::en_x(&LangCode::new("de").unwrap());
            let mk = |f1: f64| AnswerScore { f1, em: false, pred_normalized: vec![], best_reference_index: 0 };
            let a = aggregate_direction(&d, &v.iter().copied().map(mk).collect::<Vec<_>>()).unwrap();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = aggregate_direction(&d, &v.iter().copied().map(mk).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a.mean_f1_x100.to_bits(), b.mean_f1_x100.to_bits());
        }
    }
}
