// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::corpus::LangCode;
#[cfg(feature = "lingua")]
use crate::error::{Error, Result};

/// Identifies the language of a short answer string.
///
/// Implementations return one of the corpus languages or `None` (unknown).
/// Empty or whitespace-only text is always unknown.
pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> Option<LangCode>;
}

/// Detector backed by Lingua in high-accuracy mode, restricted to a fixed
/// language set.
#[cfg(feature = "lingua")]
pub struct LinguaDetector {
    inner: Option<lingua::LanguageDetector>,
    sole: Option<LangCode>,
}

#[cfg(feature = "lingua")]
impl LinguaDetector {
    pub fn new(languages: &[LangCode]) -> Result<Self> {
        use std::str::FromStr;

        let mut langs = Vec::new();
        for code in languages {
            let iso = lingua::IsoCode639_1::from_str(code.as_str())
                .map_err(|_| Error::Config(format!("Lingua does not know language `{code}`")))?;
            langs.push(lingua::Language::from_iso_code_639_1(&iso));
        }
        langs.sort();
        langs.dedup();
        match langs.len() {
            0 => Err(Error::Config(
                "language detector needs at least one language".into(),
            )),
            // Lingua needs two candidates; with one, every non-empty text is that language.
            1 => Ok(LinguaDetector {
                inner: None,
                sole: Some(languages[0].clone()),
            }),
            _ => Ok(LinguaDetector {
                inner: Some(lingua::LanguageDetectorBuilder::from_languages(&langs).build()),
                sole: None,
            }),
        }
    }
}

#[cfg(feature = "lingua")]
impl LanguageDetector for LinguaDetector {
    fn detect(&self, text: &str) -> Option<LangCode> {
        if text.trim().is_empty() {
            return None;
        }
        match &self.inner {
            Some(d) => d
                .detect_language_of(text)
                .and_then(|l| LangCode::new(&l.iso_code_639_1().to_string()).ok()),
            None => self.sole.clone(),
        }
    }
}

/// Looks answers up in a fixed table (exact match after trimming).
#[derive(Debug, Clone, Default)]
pub struct TableDetector {
    table: BTreeMap<String, LangCode>,
}

impl TableDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: &str, lang: LangCode) {
        self.table.insert(text.trim().to_string(), lang);
    }
}

impl FromIterator<(String, LangCode)> for TableDetector {
    fn from_iter<I: IntoIterator<Item = (String, LangCode)>>(iter: I) -> Self {
        let mut d = TableDetector::new();
        for (t, l) in iter {
            d.insert(&t, l);
        }
        d
    }
}

impl LanguageDetector for TableDetector {
    fn detect(&self, text: &str) -> Option<LangCode> {
        let t = text.trim();
        if t.is_empty() {
            return None;
        }
        self.table.get(t).cloned()
    }
}

/// Never detects anything, which disables language-error classification.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullDetector;

impl LanguageDetector for NullDetector {
    fn detect(&self, _text: &str) -> Option<LangCode> {
        None
    }
}

#[cfg(all(test, feature = "lingua"))]
mod tests {
    use super::*;

    fn codes(c: &[&str]) -> Vec<LangCode> {
        c.iter().map(|c| LangCode::new(c).unwrap()).collect()
    }

    #[test]
    fn lingua_on_known_strings() {
        let d = LinguaDetector::new(&codes(&[
            "en", "de", "es", "vi", "zh", "hi", "ar", "el", "ro", "ru", "th", "tr",
        ]))
        .unwrap();
        assert_eq!(d.detect("vier Pro-Bowl-Auswahlen").unwrap().as_str(), "de");
        assert_eq!(d.detect("four").unwrap().as_str(), "en");
        assert_eq!(d.detect(""), None);
        assert_eq!(d.detect("   "), None);
    }

    #[test]
    fn single_language_detector() {
        let d = LinguaDetector::new(&codes(&["en"])).unwrap();
        assert_eq!(d.detect("vier").unwrap().as_str(), "en");
        assert_eq!(d.detect(""), None);
    }

    #[test]
    fn unknown_language_is_config_error() {
        assert!(LinguaDetector::new(&codes(&["xx"])).is_err());
    }
}
