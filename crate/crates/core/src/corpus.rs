// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parallel reading-comprehension corpora.
//!
//! A corpus is a set of SQuAD v1.1 files, one per language, named
//! `<corpus>.<lang>.json`, whose items are aligned by id. Loading validates
//! alignment and answer offsets and orders samples lexicographically by id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// ISO 639-1 language code, e.g. `en`, `de`, `zh`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangCode(String);

impl LangCode {
    pub fn new(code: &str) -> Result<Self> {
        let code = code.trim();
        let ok = (2..=3).contains(&code.len()) && code.chars().all(|c| c.is_ascii_lowercase());
        if ok {
            Ok(LangCode(code.to_string()))
        } else {
            Err(Error::InvalidArgument(format!(
                "`{code}` is not a lowercase ISO 639 code"
            )))
        }
    }

    pub fn english() -> Self {
        LangCode("en".to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_english(&self) -> bool {
        self.0 == "en"
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LangCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LangCode::new(s)
    }
}

impl TryFrom<String> for LangCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LangCode::new(&s)
    }
}

impl From<LangCode> for String {
    fn from(l: LangCode) -> String {
        l.0
    }
}

/// Which family a direction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionKind {
    /// English question over English context.
    EnEn,
    /// Non-English question over English context.
    EnX,
    /// Question and context in the same non-English language.
    XX,
}

/// An evaluation setting: the language of the question and of the context.
///
/// Labels are written `<context>-<question>`, so `en-de` is a German
/// question over an English context and `de-de` is monolingual German.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    pub context_lang: LangCode,
    pub question_lang: LangCode,
}

impl Direction {
    pub fn new(context_lang: LangCode, question_lang: LangCode) -> Result<Self> {
        if !context_lang.is_english() && context_lang != question_lang {
            return Err(Error::InvalidArgument(format!(
                "direction {context_lang}-{question_lang} is neither en-x nor x-x"
            )));
        }
        Ok(Direction {
            context_lang,
            question_lang,
        })
    }

    pub fn en_en() -> Self {
        Direction {
            context_lang: LangCode::english(),
            question_lang: LangCode::english(),
        }
    }

    pub fn en_x(x: &LangCode) -> Self {
        Direction {
            context_lang: LangCode::english(),
            question_lang: x.clone(),
        }
    }

    pub fn x_x(x: &LangCode) -> Self {
        Direction {
            context_lang: x.clone(),
            question_lang: x.clone(),
        }
    }

    pub fn kind(&self) -> DirectionKind {
        match (
            self.context_lang.is_english(),
            self.question_lang.is_english(),
        ) {
            (true, true) => DirectionKind::EnEn,
            (true, false) => DirectionKind::EnX,
            _ => DirectionKind::XX,
        }
    }

    /// The non-English language of the direction, if any.
    pub fn foreign_lang(&self) -> Option<&LangCode> {
        [&self.question_lang, &self.context_lang]
            .into_iter()
            .find(|l| !l.is_english())
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.context_lang, self.question_lang)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.context_lang, self.question_lang)
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (ctx, q) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("direction `{s}` is not `<ctx>-<q>`")))?;
        Direction::new(ctx.parse()?, q.parse()?)
    }
}

impl TryFrom<String> for Direction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> String {
        d.label()
    }
}

/// A gold answer; `answer_start` is a character (code point) offset into the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub answer_start: usize,
}

/// One language's view of a parallel sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub context: String,
    pub question: String,
    pub answers: Vec<Answer>,
}

impl SampleEntry {
    /// Byte range of the first gold answer inside the context.
    pub fn first_answer_byte_range(&self) -> Option<(usize, usize)> {
        let a = self.answers.first()?;
        answer_byte_range(&self.context, a)
    }

    pub fn answer_texts(&self) -> Vec<String> {
        self.answers.iter().map(|a| a.text.clone()).collect()
    }
}

/// Convert a character offset into a byte offset; `None` when out of range.
pub fn char_to_byte(text: &str, char_idx: usize) -> Option<usize> {
    if char_idx == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(char_idx).map(|(b, _)| b)
}

fn answer_byte_range(context: &str, answer: &Answer) -> Option<(usize, usize)> {
    let start = char_to_byte(context, answer.answer_start)?;
    let end = start + answer.text.len();
    (context.get(start..end) == Some(answer.text.as_str())).then_some((start, end))
}

/// One MRC item with an entry for every corpus language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelSample {
    pub id: String,
    pub entries: BTreeMap<LangCode, SampleEntry>,
}

impl ParallelSample {
    pub fn entry(&self, lang: &LangCode) -> Result<&SampleEntry> {
        self.entries
            .get(lang)
            .ok_or_else(|| Error::CorpusValidation {
                sample_id: self.id.clone(),
                reason: format!("no entry for language `{lang}`"),
            })
    }
}

/// A validated, id-aligned multilingual corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub name: String,
    pub languages: Vec<LangCode>,
    pub samples: Vec<ParallelSample>,
}

// SQuAD v1.1 file schema.

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    question: String,
    answers: Vec<Answer>,
}

/// Path of one language file inside a corpus directory.
pub fn language_file(dir: &Path, name: &str, lang: &LangCode) -> PathBuf {
    dir.join(format!("{name}.{lang}.json"))
}

fn discover_languages(dir: &Path, name: &str) -> Result<Vec<LangCode>> {
    let prefix = format!("{name}.");
    let mut langs = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(code) = file
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".json"))
        {
            if let Ok(code) = LangCode::new(code) {
                langs.insert(code);
            }
        }
    }
    if langs.is_empty() {
        return Err(Error::Corpus(format!(
            "no `{name}.<lang>.json` files in {}",
            dir.display()
        )));
    }
    Ok(langs.into_iter().collect())
}

fn read_language(path: &Path) -> Result<Vec<(String, SampleEntry)>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SquadFile =
        serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (a, article) in file.data.into_iter().enumerate() {
        for (p, para) in article.paragraphs.into_iter().enumerate() {
            for (q, qa) in para.qas.into_iter().enumerate() {
                let id = match qa.id {
                    Some(id) if !id.is_empty() => id,
                    _ => format!("{a}:{p}:{q}"),
                };
                items.push((
                    id,
                    SampleEntry {
                        context: para.context.clone(),
                        question: qa.question,
                        answers: qa.answers,
                    },
                ));
            }
        }
    }
    Ok(items)
}

impl ParallelCorpus {
    /// Load `<dir>/<name>.<lang>.json` for every language. When `languages`
    /// is `None` the languages are discovered from the directory listing.
    pub fn load(dir: &Path, name: &str, languages: Option<&[LangCode]>) -> Result<Self> {
        let languages = match languages {
            Some(l) if !l.is_empty() => {
                let set: BTreeSet<_> = l.iter().cloned().collect();
                set.into_iter().collect::<Vec<_>>()
            }
            _ => discover_languages(dir, name)?,
        };

        let mut per_lang: BTreeMap<LangCode, BTreeMap<String, SampleEntry>> = BTreeMap::new();
        for lang in &languages {
            let path = language_file(dir, name, lang);
            if !path.is_file() {
                return Err(Error::MissingLanguage {
                    lang: lang.to_string(),
                    path,
                });
            }
            let mut by_id = BTreeMap::new();
            for (id, entry) in read_language(&path)? {
                if by_id.insert(id.clone(), entry).is_some() {
                    return Err(Error::CorpusValidation {
                        sample_id: id,
                        reason: format!("duplicate id in `{lang}` file"),
                    });
                }
            }
            per_lang.insert(lang.clone(), by_id);
        }

        let reference = &languages[0];
        let ids: Vec<String> = per_lang[reference].keys().cloned().collect();
        for lang in &languages[1..] {
            let other = &per_lang[lang];
            if other.len() != ids.len() {
                return Err(Error::Corpus(format!(
                    "`{lang}` has {} samples but `{reference}` has {}",
                    other.len(),
                    ids.len()
                )));
            }
            if let Some(id) = ids.iter().find(|id| !other.contains_key(*id)) {
                return Err(Error::CorpusValidation {
                    sample_id: id.clone(),
                    reason: format!("missing from `{lang}` file"),
                });
            }
        }

        let samples = ids
            .into_iter()
            .map(|id| {
                let entries = per_lang
                    .iter_mut()
                    .map(|(lang, m)| (lang.clone(), m.remove(&id).expect("aligned above")))
                    .collect();
                ParallelSample { id, entries }
            })
            .collect();

        let corpus = ParallelCorpus {
            name: name.to_string(),
            languages,
            samples,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Corpus("corpus declares no languages".into()));
        }
        if self.samples.len() < 2 {
            return Err(Error::Corpus(format!(
                "corpus needs at least 2 samples, found {}",
                self.samples.len()
            )));
        }
        let mut prev: Option<&str> = None;
        for sample in &self.samples {
            if prev.is_some_and(|p| p >= sample.id.as_str()) {
                return Err(Error::CorpusValidation {
                    sample_id: sample.id.clone(),
                    reason: "samples are not strictly ordered by id".into(),
                });
            }
            prev = Some(&sample.id);
            if sample.entries.len() != self.languages.len() {
                return Err(Error::CorpusValidation {
                    sample_id: sample.id.clone(),
                    reason: "entry languages differ from corpus languages".into(),
                });
            }
            for lang in &self.languages {
                let entry = sample.entry(lang)?;
                if entry.answers.is_empty() {
                    return Err(Error::CorpusValidation {
                        sample_id: sample.id.clone(),
                        reason: format!("no answers in `{lang}`"),
                    });
                }
                for answer in &entry.answers {
                    if answer_byte_range(&entry.context, answer).is_none() {
                        return Err(Error::CorpusValidation {
                            sample_id: sample.id.clone(),
                            reason: format!(
                                "`{lang}` answer {:?} does not occur at character offset {}",
                                answer.text, answer.answer_start
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_language(&self, lang: &LangCode) -> bool {
        self.languages.contains(lang)
    }

    pub fn check_direction(&self, direction: &Direction) -> Result<()> {
        for lang in [&direction.context_lang, &direction.question_lang] {
            if !self.has_language(lang) {
                return Err(Error::InvalidArgument(format!(
                    "direction {direction} uses `{lang}`, which the corpus lacks"
                )));
            }
        }
        Ok(())
    }

    /// Digest over ids, texts and offsets; stable across runs.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("corpus serializes");
        sha256_hex(canonical)
    }

    /// Serialize one language as a SQuAD v1.1 document, one paragraph per sample.
    pub fn to_squad_json(&self, lang: &LangCode) -> Result<String> {
        let paragraphs = self
            .samples
            .iter()
            .map(|s| {
                let e = s.entry(lang)?;
                Ok(SquadParagraph {
                    context: e.context.clone(),
                    qas: vec![SquadQa {
                        id: Some(s.id.clone()),
                        question: e.question.clone(),
                        answers: e.answers.clone(),
                    }],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let file = SquadFile {
            version: Some("1.1".into()),
            data: vec![SquadArticle {
                title: Some(self.name.clone()),
                paragraphs,
            }],
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("corpus serialization", e))
    }

    /// Write all language files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for lang in &self.languages {
            let path = language_file(dir, &self.name, lang);
            fs::write(&path, self.to_squad_json(lang)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Samples not among `exclude_ids`, in corpus order.
    pub fn test_samples<'a>(&'a self, exclude_ids: &BTreeSet<&str>) -> Vec<&'a ParallelSample> {
        self.samples
            .iter()
            .filter(|s| !exclude_ids.contains(s.id.as_str()))
            .collect()
    }
}

/// Draw `k` demonstration samples from a seeded shuffle of the corpus.
///
/// The draw does not depend on `direction`, so every direction shares the
/// same demonstrations. `direction` is only validated against the corpus.
pub fn select_demonstrations<'a>(
    corpus: &'a ParallelCorpus,
    direction: &Direction,
    k: usize,
    seed: u64,
) -> Result<Vec<&'a ParallelSample>> {
    corpus.check_direction(direction)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    if k >= corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} demonstrations leave no test items in a corpus of {}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order[..k].iter().map(|&i| &corpus.samples[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(context: &str, question: &str, answer: &str) -> SampleEntry {
        let start = context.find(answer).unwrap();
        SampleEntry {
            context: context.into(),
            question: question.into(),
            answers: vec![Answer {
                text: answer.into(),
                answer_start: context[..start].chars().count(),
            }],
        }
    }

    fn tiny(n: usize) -> ParallelCorpus {
        let en = LangCode::english();
        let samples = (0..n)
            .map(|i| ParallelSample {
                id: format!("s{i:03}"),
                entries: [(
                    en.clone(),
                    entry(&format!("Fact {i} is here."), "Which?", "here"),
                )]
                .into_iter()
                .collect(),
            })
            .collect();
        ParallelCorpus {
            name: "t".into(),
            languages: vec![en],
            samples,
        }
    }

    #[test]
    fn direction_labels_round_trip() {
        let d: Direction = "en-de".parse().unwrap();
        assert_eq!(d.kind(), DirectionKind::EnX);
        assert_eq!(d.question_lang.as_str(), "de");
        assert_eq!(d.label(), "en-de");
        assert_eq!(
            "de-de".parse::<Direction>().unwrap().kind(),
            DirectionKind::XX
        );
        assert!("de-en".parse::<Direction>().is_err());
        assert!("en".parse::<Direction>().is_err());
    }

    #[test]
    fn char_offsets_map_to_bytes() {
        let s = "Zürich ist schön";
        assert_eq!(char_to_byte(s, 0), Some(0));
        assert_eq!(char_to_byte(s, 2), Some(3));
        assert_eq!(char_to_byte(s, s.chars().count()), Some(s.len()));
        assert_eq!(char_to_byte(s, 100), None);
    }

    #[test]
    fn single_language_two_samples_is_valid() {
        assert!(tiny(2).validate().is_ok());
        assert!(tiny(1).validate().is_err());
    }

    #[test]
    fn zero_shot_is_empty() {
        let c = tiny(5);
        assert!(select_demonstrations(&c, &Direction::en_en(), 0, 7)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn too_many_demos_is_an_error() {
        let c = tiny(2);
        assert!(select_demonstrations(&c, &Direction::en_en(), 2, 7).is_err());
        assert_eq!(
            select_demonstrations(&c, &Direction::en_en(), 1, 7)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn demos_reject_unknown_direction() {
        let c = tiny(4);
        let d = Direction::en_x(&LangCode::new("de").unwrap());
        assert!(select_demonstrations(&c, &d, 1, 7).is_err());
    }
}
