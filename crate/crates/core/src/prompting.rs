// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt rendering with part-level span tracking.
//!
//! Templates live in `resources/templates/<id>.json`. Rendering records the
//! byte range of every named part (task description, each demonstration
//! block, the test context, the test question) so that relevance and
//! hidden-state analyses can address parts at token granularity once the
//! backend's tokenizer offsets are known.
//!
//! All offsets in this module are byte offsets into UTF-8 text and always
//! fall on character boundaries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, ParallelSample};
use crate::error::{Error, Result};

/// The answer prefix every template asks the model to produce.
pub const ANSWER_PREFIX: &str = "Answer:";

/// Named prompt regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    TaskDescription,
    Demonstrations,
    Context,
    Question,
    LastInputToken,
}

impl Part {
    /// Parts that have character spans in a rendered prompt.
    pub const TEXT_PARTS: [Part; 4] = [
        Part::TaskDescription,
        Part::Demonstrations,
        Part::Context,
        Part::Question,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Part::TaskDescription => "task_description",
            Part::Demonstrations => "demonstrations",
            Part::Context => "context",
            Part::Question => "question",
            Part::LastInputToken => "last_input_token",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "task_description" => Part::TaskDescription,
            "demonstrations" => Part::Demonstrations,
            "context" => Part::Context,
            "question" => Part::Question,
            "last_input_token" => Part::LastInputToken,
            other => return Err(Error::InvalidArgument(format!("unknown part `{other}`"))),
        })
    }
}

/// Half-open `[start, end)` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    V1,
    V2,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::V1 => "v1",
            TemplateId::V2 => "v2",
        })
    }
}

impl FromStr for TemplateId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(TemplateId::V1),
            "v2" => Ok(TemplateId::V2),
            other => Err(Error::InvalidArgument(format!(
                "unknown template `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionPosition {
    BeforeDemonstrations,
    AfterTask,
}

/// A prompt template as stored in the resource files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub revision: u32,
    pub system_text: String,
    pub instruction_text: String,
    pub instruction_position: InstructionPosition,
    /// Skeleton with `{context}`, `{question}` and `{answer}` slots.
    pub demo_block_format: String,
    /// Skeleton with `{context}` and `{question}` slots.
    pub task_block_format: String,
    pub task_separator: String,
    pub block_joiner: String,
}

const V1_JSON: &str = include_str!("../resources/templates/v1.json");
const V2_JSON: &str = include_str!("../resources/templates/v2.json");

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let raw = match id {
            TemplateId::V1 => V1_JSON,
            TemplateId::V2 => V2_JSON,
        };
        let t: PromptTemplate = serde_json::from_str(raw).expect("bundled template parses");
        debug_assert_eq!(t.template_id, id);
        t
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::json("prompt template", e))
    }
}

enum Piece<'a> {
    Lit(&'a str),
    Slot(&'a str),
}

fn parse_skeleton(format: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = format;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::InvalidArgument(format!("unclosed slot in `{format}`")))?;
        if open > 0 {
            out.push(Piece::Lit(&rest[..open]));
        }
        out.push(Piece::Slot(&rest[open + 1..close]));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Lit(rest));
    }
    Ok(out)
}

#[derive(Default)]
struct Builder {
    text: String,
    spans: BTreeMap<Part, Vec<Span>>,
}

impl Builder {
    fn push(&mut self, s: &str) -> Span {
        let start = self.text.len();
        self.text.push_str(s);
        Span::new(start, self.text.len())
    }

    fn mark(&mut self, part: Part, span: Span) {
        self.spans.entry(part).or_default().push(span);
    }

    fn block(&mut self, format: &str, slots: &[(&str, &str, Option<Part>)]) -> Result<Span> {
        let start = self.text.len();
        for piece in parse_skeleton(format)? {
            match piece {
                Piece::Lit(l) => {
                    self.push(l);
                }
                Piece::Slot(name) => {
                    let (_, value, part) = slots
                        .iter()
                        .find(|(n, _, _)| *n == name)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown slot `{name}`")))?;
                    let span = self.push(value);
                    if let Some(part) = part {
                        self.mark(*part, span);
                    }
                }
            }
        }
        Ok(Span::new(start, self.text.len()))
    }
}

/// A rendered prompt with byte spans for each text part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub part_spans: BTreeMap<Part, Vec<Span>>,
    pub direction: Direction,
    pub sample_id: String,
    pub template_id: TemplateId,
}

impl RenderedPrompt {
    pub fn spans(&self, part: Part) -> &[Span] {
        self.part_spans.get(&part).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The test context's span (exactly one).
    pub fn context_span(&self) -> Span {
        self.spans(Part::Context)[0]
    }

    /// Re-anchor spans after a chat wrapper placed this prompt at
    /// `user_offset` inside `wrapped`.
    pub fn rewrap(&self, wrapped: &str, user_offset: usize) -> Result<RenderedPrompt> {
        if wrapped.get(user_offset..user_offset + self.text.len()) != Some(self.text.as_str()) {
            return Err(Error::InvalidArgument(
                "chat wrapper does not contain the prompt verbatim at the stated offset".into(),
            ));
        }
        let part_spans = self
            .part_spans
            .iter()
            .map(|(p, spans)| {
                let moved = spans
                    .iter()
                    .map(|s| Span::new(s.start + user_offset, s.end + user_offset))
                    .collect();
                (*p, moved)
            })
            .collect();
        Ok(RenderedPrompt {
            text: wrapped.to_string(),
            part_spans,
            ..self.clone()
        })
    }

    /// The prompt with `range` (relative to the test context) removed from
    /// the test context.
    pub fn with_context_range_deleted(&self, range: Span) -> Result<String> {
        let ctx = self.context_span();
        if range.end > ctx.len() || range.start > range.end {
            return Err(Error::InvalidArgument(format!(
                "range {range:?} outside context of {} bytes",
                ctx.len()
            )));
        }
        let (a, b) = (ctx.start + range.start, ctx.start + range.end);
        let mut out = String::with_capacity(self.text.len() - (b - a));
        out.push_str(&self.text[..a]);
        out.push_str(&self.text[b..]);
        Ok(out)
    }
}

/// Render one test item under `template`.
///
/// The test and demonstration questions come from `direction.question_lang`;
/// contexts and demonstration answers come from `direction.context_lang`.
pub fn render_prompt(
    template: &PromptTemplate,
    demos: &[&ParallelSample],
    sample: &ParallelSample,
    direction: &Direction,
) -> Result<RenderedPrompt> {
    if demos.iter().any(|d| d.id == sample.id) {
        return Err(Error::InvalidArgument(format!(
            "sample `{}` is also a demonstration",
            sample.id
        )));
    }
    let test_ctx = sample.entry(&direction.context_lang)?;
    let test_q = sample.entry(&direction.question_lang)?;

    let mut b = Builder::default();
    let joiner = template.block_joiner.as_str();
    if !template.system_text.is_empty() {
        b.push(&template.system_text);
        b.push(joiner);
    }
    if template.instruction_position == InstructionPosition::BeforeDemonstrations {
        let span = b.push(&template.instruction_text);
        b.mark(Part::TaskDescription, span);
        b.push(joiner);
    }
    for demo in demos {
        let ctx = demo.entry(&direction.context_lang)?;
        let q = demo.entry(&direction.question_lang)?;
        let answer = ctx.answers.first().map(|a| a.text.as_str()).unwrap_or("");
        let span = b.block(
            &template.demo_block_format,
            &[
                ("context", &ctx.context, None),
                ("question", &q.question, None),
                ("answer", answer, None),
            ],
        )?;
        b.mark(Part::Demonstrations, span);
        b.push(joiner);
    }
    b.push(&template.task_separator);
    b.push(joiner);
    b.block(
        &template.task_block_format,
        &[
            ("context", &test_ctx.context, Some(Part::Context)),
            ("question", &test_q.question, Some(Part::Question)),
        ],
    )?;
    if template.instruction_position == InstructionPosition::AfterTask {
        b.push(joiner);
        let span = b.push(&template.instruction_text);
        b.mark(Part::TaskDescription, span);
    }

    Ok(RenderedPrompt {
        text: b.text,
        part_spans: b.spans,
        direction: direction.clone(),
        sample_id: sample.id.clone(),
        template_id: template.template_id,
    })
}

/// Token index ranges for every part of a tokenized prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartTokenSpans {
    pub ranges: BTreeMap<Part, Vec<Span>>,
    pub last_input_token_index: usize,
    pub num_tokens: usize,
}

impl PartTokenSpans {
    /// Token indices belonging to `part`, in order.
    pub fn tokens(&self, part: Part) -> Vec<usize> {
        if part == Part::LastInputToken {
            return vec![self.last_input_token_index];
        }
        self.ranges
            .get(&part)
            .into_iter()
            .flatten()
            .flat_map(|s| s.start..s.end)
            .collect()
    }
}

/// Map character-level part spans onto tokens.
///
/// A token belongs to a part iff its byte range overlaps one of the part's
/// spans; a token overlapping two parts goes to the one that starts first.
/// Empty tokens (e.g. special tokens with zero-width offsets) belong to no part.
pub fn align_part_spans(
    rendered: &RenderedPrompt,
    token_offsets: &[(usize, usize)],
) -> Result<PartTokenSpans> {
    if token_offsets.is_empty() {
        return Err(Error::InvalidArgument("prompt has no tokens".into()));
    }
    let len = rendered.text.len();
    let mut prev = (0usize, 0usize);
    for (i, &(s, e)) in token_offsets.iter().enumerate() {
        if s > e || e > len || s < prev.0 || e < prev.1 {
            return Err(Error::InvalidArgument(format!(
                "token {i} offsets ({s}, {e}) are not monotone within a {len}-byte prompt"
            )));
        }
        prev = (s, e);
    }

    let mut flat: Vec<(Span, Part)> = rendered
        .part_spans
        .iter()
        .flat_map(|(p, spans)| spans.iter().map(move |s| (*s, *p)))
        .filter(|(s, _)| !s.is_empty())
        .collect();
    flat.sort();

    let mut ranges: BTreeMap<Part, Vec<Span>> = BTreeMap::new();
    for (i, &(s, e)) in token_offsets.iter().enumerate() {
        let tok = Span::new(s, e);
        if tok.is_empty() {
            continue;
        }
        // `flat` is sorted by start, so the first overlap is the earliest part.
        let Some((_, part)) = flat.iter().find(|(span, _)| span.overlaps(&tok)) else {
            continue;
        };
        let list = ranges.entry(*part).or_default();
        match list.last_mut() {
            Some(last) if last.end == i => last.end = i + 1,
            _ => list.push(Span::new(i, i + 1)),
        }
    }

    Ok(PartTokenSpans {
        ranges,
        last_input_token_index: token_offsets.len() - 1,
        num_tokens: token_offsets.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Answer, LangCode, SampleEntry};

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

    fn sample(id: &str, n: usize) -> ParallelSample {
        let mut entries = BTreeMap::new();
        entries.insert(
            LangCode::english(),
            entry(
                &format!("The value is {n}."),
                &format!("What is value {id}?"),
                &n.to_string(),
            ),
        );
        entries.insert(
            LangCode::new("de").unwrap(),
            entry(
                &format!("Der Wert ist {n}."),
                &format!("Was ist Wert {id}?"),
                &n.to_string(),
            ),
        );
        entries.insert(
            LangCode::new("zh").unwrap(),
            entry(
                &format!("数值是{n}。"),
                &format!("{id}的数值是多少？"),
                &n.to_string(),
            ),
        );
        ParallelSample {
            id: id.into(),
            entries,
        }
    }

    fn en_de() -> Direction {
        "en-de".parse().unwrap()
    }

    #[test]
    fn v2_ends_with_instruction_after_german_question() {
        let (d1, d2, s) = (sample("a", 1), sample("b", 2), sample("c", 3));
        let t = PromptTemplate::builtin(TemplateId::V2);
        let r = render_prompt(&t, &[&d1, &d2], &s, &en_de()).unwrap();
        let q = r.spans(Part::Question)[0];
        assert_eq!(&r.text[q.start..q.end], "Was ist Wert c?");
        let td = r.spans(Part::TaskDescription)[0];
        assert!(td.start > q.end);
        assert_eq!(td.end, r.text.len());
        assert!(r.text.ends_with("\"Answer: {Your Answer}\""));
        assert!(r
            .text
            .contains("Your task starts here:\n\nContext: The value is 3."));
        // Demo answers and contexts stay English, demo questions follow the question language.
        assert!(r
            .text
            .starts_with("Context: The value is 1.\n\nQuestion: Was ist Wert a?\n\nAnswer: 1"));
        assert_eq!(r.spans(Part::Demonstrations).len(), 2);
    }

    #[test]
    fn v1_zero_shot_has_instruction_and_no_demos() {
        let s = sample("c", 3);
        let t = PromptTemplate::builtin(TemplateId::V1);
        let r = render_prompt(&t, &[], &s, &Direction::en_en()).unwrap();
        assert!(r.spans(Part::Demonstrations).is_empty());
        let td = r.spans(Part::TaskDescription)[0];
        assert_eq!(td.start, 0);
        assert!(r.text[td.start..td.end].starts_with("Below is a reading comprehension task."));
    }

    #[test]
    fn rendering_is_deterministic() {
        let (d1, s) = (sample("a", 1), sample("c", 3));
        let t = PromptTemplate::builtin(TemplateId::V1);
        let a = render_prompt(&t, &[&d1], &s, &en_de()).unwrap();
        let b = render_prompt(&t, &[&d1], &s, &en_de()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn demo_equal_to_test_sample_is_rejected() {
        let s = sample("c", 3);
        let t = PromptTemplate::builtin(TemplateId::V1);
        assert!(render_prompt(&t, &[&s], &s, &en_de()).is_err());
    }

    #[test]
    fn missing_language_is_an_error() {
        let s = sample("c", 3);
        let t = PromptTemplate::builtin(TemplateId::V1);
        let d: Direction = "en-ru".parse().unwrap();
        assert!(render_prompt(&t, &[], &s, &d).is_err());
    }

    #[test]
    fn switching_question_language_only_touches_the_question() {
        let (d1, s) = (sample("a", 1), sample("c", 3));
        let t = PromptTemplate::builtin(TemplateId::V2);
        let de = render_prompt(&t, &[&d1], &s, &en_de()).unwrap();
        let zh = render_prompt(&t, &[&d1], &s, &"en-zh".parse().unwrap()).unwrap();
        let text = |r: &RenderedPrompt, p: Part| -> Vec<String> {
            r.spans(p)
                .iter()
                .map(|s| r.text[s.start..s.end].to_string())
                .collect()
        };
        assert_eq!(text(&de, Part::Context), text(&zh, Part::Context));
        assert_eq!(
            text(&de, Part::TaskDescription),
            text(&zh, Part::TaskDescription)
        );
        assert_ne!(text(&de, Part::Question), text(&zh, Part::Question));
    }

    fn rendered_with(spans: &[(Part, usize, usize)], len: usize) -> RenderedPrompt {
        let mut part_spans: BTreeMap<Part, Vec<Span>> = BTreeMap::new();
        for &(p, s, e) in spans {
            part_spans.entry(p).or_default().push(Span::new(s, e));
        }
        RenderedPrompt {
            text: "x".repeat(len),
            part_spans,
            direction: Direction::en_en(),
            sample_id: "s".into(),
            template_id: TemplateId::V1,
        }
    }

    #[test]
    fn overlap_rule_hand_trace() {
        // Part [10,20) preceded by glue: the straddling tokens 0 and 2 both land in it.
        let r = rendered_with(&[(Part::Context, 10, 20)], 22);
        let spans = align_part_spans(&r, &[(8, 12), (12, 18), (18, 22)]).unwrap();
        assert_eq!(spans.tokens(Part::Context), vec![0, 1, 2]);

        // With a preceding part, the straddling token 0 goes to the earlier one.
        let r = rendered_with(&[(Part::Question, 0, 10), (Part::Context, 10, 20)], 22);
        let spans = align_part_spans(&r, &[(8, 12), (12, 18), (18, 22)]).unwrap();
        assert_eq!(spans.tokens(Part::Question), vec![0]);
        assert_eq!(spans.tokens(Part::Context), vec![1, 2]);
        assert_eq!(spans.last_input_token_index, 2);
        assert_eq!(spans.tokens(Part::LastInputToken), vec![2]);
    }

    #[test]
    fn empty_part_and_whole_prompt_part() {
        let r = rendered_with(&[(Part::Context, 0, 12)], 12);
        let spans = align_part_spans(&r, &[(0, 4), (5, 8), (9, 12)]).unwrap();
        assert!(spans.tokens(Part::Demonstrations).is_empty());
        assert_eq!(spans.tokens(Part::Context), vec![0, 1, 2]);
    }

    #[test]
    fn non_monotone_offsets_are_rejected() {
        let r = rendered_with(&[(Part::Context, 0, 12)], 12);
        assert!(align_part_spans(&r, &[(4, 8), (0, 4)]).is_err());
        assert!(align_part_spans(&r, &[(0, 40)]).is_err());
        assert!(align_part_spans(&r, &[]).is_err());
    }

    #[test]
    fn rewrap_shifts_spans() {
        let s = sample("c", 3);
        let t = PromptTemplate::builtin(TemplateId::V1);
        let r = render_prompt(&t, &[], &s, &Direction::en_en()).unwrap();
        let wrapped = format!("<user>{}</user>", r.text);
        let w = r.rewrap(&wrapped, 6).unwrap();
        let c = w.context_span();
        assert_eq!(&w.text[c.start..c.end], "The value is 3.");
        assert!(r.rewrap(&wrapped, 5).is_err());
    }

    #[test]
    fn context_deletion() {
        let s = sample("c", 3);
        let t = PromptTemplate::builtin(TemplateId::V1);
        let r = render_prompt(&t, &[], &s, &Direction::en_en()).unwrap();
        let out = r.with_context_range_deleted(Span::new(4, 10)).unwrap();
        assert!(out.contains("Context: The is 3.\n"));
        assert!(r.with_context_range_deleted(Span::new(0, 100)).is_err());
    }
}
