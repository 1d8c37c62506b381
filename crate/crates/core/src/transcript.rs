//! Structured chain-of-thought transcripts.
//!
//! Prompts and reference transcripts follow a rigid Markdown layout
//! (`### Problem Statement`, `### Solve`, `### Summary`). The parser finds the
//! structural strings in that layout and reports their character spans; the
//! last character of each structural string is the anchor that gets mapped
//! onto a model token.
//!
//! All offsets are in Unicode scalar values (not bytes), which matches the
//! offsets produced by common tokenizer front-ends.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{Child, NodeTruthMap, TaskInstance, TreeLayout};

/// Asterisk run used for the masked Logic line when token counts are not
/// known to the renderer.
pub const MASK_RUN: &str = "***************";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptVariant {
    #[default]
    Normal,
    /// Logic lines reference child IDs but never their values.
    SilentChildValues,
    /// Logic lines are replaced by an asterisk run.
    MaskedLogic,
}

impl std::str::FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "normal" => Ok(Self::Normal),
            "silent" | "silent_child_values" => Ok(Self::SilentChildValues),
            "masked" | "masked_logic" => Ok(Self::MaskedLogic),
            other => Err(format!("unknown prompt variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Solve,
    RecallSummary,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnchorKind {
    Header,
    Logic,
    Result,
    SummaryLine,
    FinalAnswer,
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnchorKind::Header => "header",
            AnchorKind::Logic => "logic",
            AnchorKind::Result => "result",
            AnchorKind::SummaryLine => "summary",
            AnchorKind::FinalAnswer => "final",
        };
        f.write_str(s)
    }
}

/// A structural string located in a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorEvent {
    pub phase: Phase,
    pub kind: AnchorKind,
    pub node_id: Option<u32>,
    /// Half-open character span of the structural string.
    pub char_start: usize,
    pub char_end: usize,
    pub token_index: Option<usize>,
}

impl AnchorEvent {
    /// Last character of the structural string.
    pub fn anchor_char(&self) -> usize {
        self.char_end - 1
    }

    pub fn describe(&self) -> String {
        match self.node_id {
            Some(id) => format!("{:?}/{:?} node {id}", self.phase, self.kind),
            None => format!("{:?}/{:?}", self.phase, self.kind),
        }
    }
}

/// Token with its character span, as recorded in `tokens_<task>.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub index: usize,
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn bool_word(v: bool) -> &'static str {
    if v {
        "True"
    } else {
        "False"
    }
}

fn example_task() -> TaskInstance {
    use crate::logic::{LogicTree, Op};
    let tree = LogicTree::from_parts(2, &[Op::Or, Op::Xor, Op::And], &[true, false, false, true])
        .expect("static example tree");
    TaskInstance::new("example", tree)
}

/// System prompt with an embedded worked example.
pub fn render_system_prompt(variant: PromptVariant) -> String {
    let mut s = String::new();
    s.push_str(
        "You are a precise Boolean logic solver. You will be given a boolean expression where \
         specific operations are labeled with IDs like `[01], [02]`, etc.\n",
    );
    s.push_str(
        "Your task is to solve the tree step-by-step in strictly **increasing order** of these IDs. \
         Follow the exact format shown in the example below.\n",
    );
    match variant {
        PromptVariant::Normal => {}
        PromptVariant::SilentChildValues => s.push_str(
            "In each Logic line, refer to child nodes by their IDs only and never write out their values.\n",
        ),
        PromptVariant::MaskedLogic => s.push_str(
            "In each Logic line, write only a run of asterisks in place of the logic expression.\n",
        ),
    }
    s.push_str("### EXAMPLE OUTPUT:\n");
    s.push_str(&render_reference_cot(&example_task(), variant));
    s.push_str("### YOUR TURN:\n");
    s
}

/// User turn carrying the task expression.
pub fn render_user_message(task: &TaskInstance) -> String {
    format!("Expression: `{}`\n", task.expression_text)
}

/// Ideal transcript for `task`; ends with a newline.
pub fn render_reference_cot(task: &TaskInstance, variant: PromptVariant) -> String {
    let tree = &task.tree;
    let layout = tree.layout();
    let truth = &task.truth;
    let ids: Vec<String> = (1..=layout.node_count()).map(|id| layout.format_id(id)).collect();
    let value_of = |c: Child| match c {
        Child::Leaf(i) => tree.leaves[i],
        Child::Node(id) => truth.get(id).expect("truth covers all nodes"),
    };

    let mut out = String::new();
    out.push_str("### Problem Statement\n");
    out.push_str(&format!("1. **Expression**: `{}`\n", task.expression_text));
    out.push_str(&format!("2. **Node IDs**: {}\n", ids.join(", ")));
    out.push_str("### Solve\n");
    for node in &tree.nodes {
        let lv = bool_word(value_of(node.left));
        let rv = bool_word(value_of(node.right));
        let op = node.op.keyword();
        out.push_str(&format!("**Node {}**\n", layout.format_id(node.id)));
        let logic = match (variant, node.left, node.right) {
            (PromptVariant::MaskedLogic, _, _) => format!("`{MASK_RUN}`"),
            (_, Child::Node(l), Child::Node(r)) => {
                let refs = format!("`{} {op} {}`", layout.format_id(l), layout.format_id(r));
                if variant == PromptVariant::SilentChildValues {
                    refs
                } else {
                    format!("{refs} → `{lv} {op} {rv}`")
                }
            }
            _ => format!("`{lv} {op} {rv}`"),
        };
        out.push_str(&format!("* Logic: {logic}\n"));
        out.push_str(&format!("* Result: `{}`\n", bool_word(truth.get(node.id).expect("truth"))));
    }
    out.push_str("### Summary\n");
    for (id, v) in truth.iter() {
        out.push_str(&format!("* {}: {}\n", layout.format_id(id), bool_word(v)));
    }
    out.push_str(&format!("**Final Answer: {}**\n", bool_word(truth.root())));
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    Problem,
    Solve,
    Summary,
}

/// Parses `[digits]` at the start of `s`; returns the ID and the bytes consumed.
fn bracket_id(s: &str) -> Option<(u32, usize)> {
    let rest = s.strip_prefix('[')?;
    let close = rest.find(']')?;
    let digits = &rest[..close];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((digits.parse().ok()?, close + 2))
}

/// Finds every structural anchor, in textual order.
///
/// Parsing is line oriented with exact prefixes; leading indentation, blank
/// lines, trailing whitespace and CRLF line endings are tolerated. Lines that
/// do not match produce no events.
pub fn parse_transcript(text: &str) -> Vec<AnchorEvent> {
    let mut events = Vec::new();
    let mut section = Section::Preamble;
    let mut current_node: Option<u32> = None;
    let mut line_start_char = 0usize;

    for raw in text.split_inclusive('\n') {
        let line_chars = raw.chars().count();
        let line = raw.trim_end_matches(['\n', '\r']);
        let indent = line.len() - line.trim_start().len();
        let body = line[indent..].trim_end();
        // `indent` is ASCII whitespace in practice, but count chars to be safe.
        let base = line_start_char + line[..indent].chars().count();
        let span = |prefix_bytes: usize| {
            let len = body[..prefix_bytes].chars().count();
            (base, base + len)
        };

        let mut push = |phase, kind, node_id, (char_start, char_end): (usize, usize)| {
            events.push(AnchorEvent { phase, kind, node_id, char_start, char_end, token_index: None });
        };

        if let Some(title) = body.strip_prefix("### ") {
            let title = title.trim();
            section = match title {
                "Problem Statement" => Section::Problem,
                "Solve" => Section::Solve,
                "Summary" => Section::Summary,
                _ => section,
            };
            current_node = None;
        } else if let Some(rest) = body.strip_prefix("**Final Answer:") {
            let _ = rest;
            push(Phase::Final, AnchorKind::FinalAnswer, None, span("**Final Answer:".len()));
        } else if section == Section::Summary {
            if let Some(rest) = body.strip_prefix("* ") {
                if let Some((id, used)) = bracket_id(rest) {
                    if rest[used - 1..].starts_with("]:") {
                        push(Phase::RecallSummary, AnchorKind::SummaryLine, Some(id), span(2 + used + 1));
                    }
                }
            }
        } else if section != Section::Problem {
            if let Some(rest) = body.strip_prefix("**Node ") {
                if let Some((id, used)) = bracket_id(rest) {
                    if rest[used..].starts_with("**") {
                        current_node = Some(id);
                        push(Phase::Solve, AnchorKind::Header, Some(id), span("**Node ".len() + used + 2));
                    }
                }
            } else if body.starts_with("* Logic:") {
                if let Some(id) = current_node {
                    push(Phase::Solve, AnchorKind::Logic, Some(id), span("* Logic:".len()));
                }
            } else if body.starts_with("* Result:") {
                if let Some(id) = current_node {
                    push(Phase::Solve, AnchorKind::Result, Some(id), span("* Result:".len()));
                }
            }
        }
        line_start_char += line_chars;
    }
    events
}

/// Characters-to-bytes index for one text.
struct CharIndex<'a> {
    text: &'a str,
    byte_of_char: Vec<usize>,
}

impl<'a> CharIndex<'a> {
    fn new(text: &'a str) -> Self {
        let mut byte_of_char: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        byte_of_char.push(text.len());
        Self { text, byte_of_char }
    }

    /// Remainder of the line after character `c`.
    fn rest_of_line(&self, c: usize) -> &'a str {
        let b = self.byte_of_char.get(c).copied().unwrap_or(self.text.len());
        let tail = &self.text[b..];
        tail.split('\n').next().unwrap_or("")
    }

    /// Character offset of the end of the line containing `c` (exclusive,
    /// excluding the line terminator).
    fn line_end(&self, c: usize) -> usize {
        let rest = self.rest_of_line(c);
        c + rest.trim_end_matches('\r').chars().count()
    }
}

/// Character span `[char_start, line_end)` of the line an event sits on.
pub fn event_line_span(text: &str, event: &AnchorEvent) -> (usize, usize) {
    let idx = CharIndex::new(text);
    (event.char_start, idx.line_end(event.char_start))
}

fn parse_bool_value(s: &str) -> Option<bool> {
    let cleaned: String = s.chars().filter(|c| !matches!(c, '`' | '*')).collect();
    match cleaned.split_whitespace().next()? {
        w if w.eq_ignore_ascii_case("true") => Some(true),
        w if w.eq_ignore_ascii_case("false") => Some(false),
        _ => None,
    }
}

/// Boolean written after an event's structural string, if any.
pub fn event_value(text: &str, event: &AnchorEvent) -> Option<bool> {
    parse_bool_value(CharIndex::new(text).rest_of_line(event.char_end))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("anchor {event} at char {anchor_char} is not covered by any token span")]
    Uncovered { event: String, anchor_char: usize },
}

/// Resolves each event's token index to the span containing its anchor char.
pub fn align_anchors(events: &[AnchorEvent], token_spans: &[TokenSpan]) -> Result<Vec<AnchorEvent>, AlignError> {
    events
        .iter()
        .map(|e| {
            let c = e.anchor_char();
            let i = token_spans.partition_point(|s| s.char_end <= c);
            match token_spans.get(i) {
                Some(s) if s.char_start <= c && c < s.char_end => {
                    Ok(AnchorEvent { token_index: Some(i), ..e.clone() })
                }
                _ => Err(AlignError::Uncovered { event: e.describe(), anchor_char: c }),
            }
        })
        .collect()
}

/// Indices of tokens overlapping the half-open character range.
pub fn tokens_in_range(token_spans: &[TokenSpan], start: usize, end: usize) -> Vec<usize> {
    let first = token_spans.partition_point(|s| s.char_end <= start);
    token_spans[first..]
        .iter()
        .take_while(|s| s.char_start < end)
        .map(|s| s.index)
        .collect()
}

/// Splits text into tokens that tile it exactly: each token is a run of
/// alphanumerics or a single other character, with any preceding whitespace
/// attached to it. Used for synthetic dumps and tests; real dumps carry the
/// model tokenizer's spans.
pub fn pretokenize(text: &str) -> Vec<TokenSpan> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i < chars.len() {
            if chars[i].is_alphanumeric() {
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        out.push(TokenSpan {
            index: out.len(),
            text: chars[start..i].iter().collect(),
            char_start: start,
            char_end: i,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradeReport {
    pub per_node_correct: BTreeMap<u32, bool>,
    pub summary_correct: BTreeMap<u32, bool>,
    pub final_correct: bool,
    pub format_valid: bool,
}

impl GradeReport {
    pub fn all_correct(&self) -> bool {
        self.format_valid
            && self.final_correct
            && self.per_node_correct.values().all(|&v| v)
            && self.summary_correct.values().all(|&v| v)
    }
}

/// Compares Result lines, Summary lines and the final answer with the truth.
///
/// `format_valid` requires exactly one Header/Logic/Result triple (in that
/// order) and one Summary line for every node, and exactly one final answer.
pub fn grade_transcript(text: &str, events: &[AnchorEvent], truth: &NodeTruthMap) -> GradeReport {
    let idx = CharIndex::new(text);
    let value = |e: &AnchorEvent| parse_bool_value(idx.rest_of_line(e.char_end));
    let mut report = GradeReport { format_valid: true, ..Default::default() };
    let mut counts: BTreeMap<(u32, AnchorKind), usize> = BTreeMap::new();
    let mut finals = 0;

    for e in events {
        if e.kind == AnchorKind::FinalAnswer {
            finals += 1;
            if finals == 1 {
                report.final_correct = value(e) == Some(truth.root());
            }
            continue;
        }
        let Some(id) = e.node_id else { continue };
        let Some(expected) = truth.get(id) else {
            report.format_valid = false;
            continue;
        };
        let n = counts.entry((id, e.kind)).or_default();
        *n += 1;
        if *n > 1 {
            continue;
        }
        match e.kind {
            AnchorKind::Result => {
                report.per_node_correct.insert(id, value(e) == Some(expected));
            }
            AnchorKind::SummaryLine => {
                report.summary_correct.insert(id, value(e) == Some(expected));
            }
            _ => {}
        }
    }

    if finals != 1 {
        report.format_valid = false;
    }
    for (id, _) in truth.iter() {
        for kind in [AnchorKind::Header, AnchorKind::Logic, AnchorKind::Result, AnchorKind::SummaryLine] {
            if counts.get(&(id, kind)) != Some(&1) {
                report.format_valid = false;
            }
        }
    }
    if report.format_valid && !solve_triples_ordered(events) {
        report.format_valid = false;
    }
    report
}

fn solve_triples_ordered(events: &[AnchorEvent]) -> bool {
    let pos = |id: u32, kind: AnchorKind| events.iter().position(|e| e.node_id == Some(id) && e.kind == kind);
    events.iter().filter(|e| e.kind == AnchorKind::Header).all(|h| {
        let id = h.node_id.expect("headers carry IDs");
        matches!(
            (pos(id, AnchorKind::Header), pos(id, AnchorKind::Logic), pos(id, AnchorKind::Result)),
            (Some(a), Some(b), Some(c)) if a < b && b < c
        )
    })
}

/// Event ordinals of a well-formed transcript for a tree of a given height:
/// `3M` solve anchors (Header, Logic, Result per node in ID order), then `M`
/// summary lines, then the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalLayout {
    layout: TreeLayout,
}

impl CanonicalLayout {
    pub fn new(layout: TreeLayout) -> Self {
        Self { layout }
    }

    pub fn tree(&self) -> TreeLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        4 * self.layout.node_count() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn solve(&self, id: u32, kind: AnchorKind) -> Option<usize> {
        if !self.layout.contains(id) {
            return None;
        }
        let base = 3 * (id as usize - 1);
        match kind {
            AnchorKind::Header => Some(base),
            AnchorKind::Logic => Some(base + 1),
            AnchorKind::Result => Some(base + 2),
            _ => None,
        }
    }

    pub fn summary(&self, id: u32) -> Option<usize> {
        self.layout
            .contains(id)
            .then(|| 3 * self.layout.node_count() as usize + id as usize - 1)
    }

    pub fn final_answer(&self) -> usize {
        4 * self.layout.node_count() as usize
    }

    /// Recall anchors of a child: its parent's solve triple.
    pub fn recall(&self, id: u32, kind: AnchorKind) -> Option<usize> {
        self.solve(self.layout.parent_of(id)?, kind)
    }

    /// `(phase, kind, node)` described by an ordinal.
    pub fn describe(&self, ordinal: usize) -> Option<(Phase, AnchorKind, Option<u32>)> {
        let m = self.layout.node_count() as usize;
        if ordinal < 3 * m {
            let kind = [AnchorKind::Header, AnchorKind::Logic, AnchorKind::Result][ordinal % 3];
            Some((Phase::Solve, kind, Some((ordinal / 3) as u32 + 1)))
        } else if ordinal < 4 * m {
            Some((Phase::RecallSummary, AnchorKind::SummaryLine, Some((ordinal - 3 * m) as u32 + 1)))
        } else if ordinal == 4 * m {
            Some((Phase::Final, AnchorKind::FinalAnswer, None))
        } else {
            None
        }
    }

    /// Whether a parsed event list has exactly the canonical structure.
    pub fn matches(&self, events: &[AnchorEvent]) -> bool {
        events.len() == self.len()
            && events
                .iter()
                .enumerate()
                .all(|(i, e)| self.describe(i) == Some((e.phase, e.kind, e.node_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{gen_balanced_dataset, LogicTree, Op};

    const TABLE_ONE_OUTPUT: &str = "### Problem Statement
1. **Expression**: `[03]: ([01]: (True or False) and [02]: (False xor True))`
2. **Node IDs**: [01], [02], [03]
### Solve
**Node [01]**
* Logic: `True or False`
* Result: `True`
**Node [02]**
* Logic: `False xor True`
* Result: `True`
**Node [03]**
* Logic: `[01] and [02]` → `True and True`
* Result: `True`
### Summary
* [01]: True
* [02]: True
* [03]: True
**Final Answer: True**
";

    fn table_one() -> TaskInstance {
        example_task()
    }

    fn count(events: &[AnchorEvent], kind: AnchorKind) -> usize {
        events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn reference_cot_matches_worked_example() {
        assert_eq!(render_reference_cot(&table_one(), PromptVariant::Normal), TABLE_ONE_OUTPUT);
    }

    #[test]
    fn system_prompt_variants() {
        let normal = render_system_prompt(PromptVariant::Normal);
        assert!(normal.starts_with("You are a precise Boolean logic solver."));
        assert!(normal.contains("strictly **increasing order**"));
        assert!(normal.contains(TABLE_ONE_OUTPUT));
        assert!(normal.ends_with("### YOUR TURN:\n"));
        let masked = render_system_prompt(PromptVariant::MaskedLogic);
        assert!(masked.contains("* Logic: `***************`\n"));
        let silent = render_system_prompt(PromptVariant::SilentChildValues);
        assert!(silent.contains("* Logic: `[01] and [02]`\n"));
        for v in [PromptVariant::Normal, PromptVariant::SilentChildValues, PromptVariant::MaskedLogic] {
            assert_eq!(render_system_prompt(v), render_system_prompt(v));
        }
    }

    #[test]
    fn parse_worked_example() {
        let events = parse_transcript(TABLE_ONE_OUTPUT);
        assert_eq!(count(&events, AnchorKind::Header), 3);
        assert_eq!(count(&events, AnchorKind::Logic), 3);
        assert_eq!(count(&events, AnchorKind::Result), 3);
        assert_eq!(count(&events, AnchorKind::SummaryLine), 3);
        assert_eq!(count(&events, AnchorKind::FinalAnswer), 1);
        let chars: Vec<char> = TABLE_ONE_OUTPUT.chars().collect();
        for e in &events {
            let s: String = chars[e.char_start..e.char_end].iter().collect();
            match e.kind {
                AnchorKind::Header => assert!(s.starts_with("**Node [") && s.ends_with("]**")),
                AnchorKind::Logic => assert_eq!(s, "* Logic:"),
                AnchorKind::Result => assert_eq!(s, "* Result:"),
                AnchorKind::SummaryLine => assert!(s.starts_with("* [") && s.ends_with("]:")),
                AnchorKind::FinalAnswer => assert_eq!(s, "**Final Answer:"),
            }
            assert_eq!(e.anchor_char(), e.char_end - 1);
        }
        assert!(CanonicalLayout::new(TreeLayout::new(2).unwrap()).matches(&events));
    }

    #[test]
    fn anchors_after_non_ascii_use_char_offsets() {
        let events = parse_transcript(TABLE_ONE_OUTPUT);
        let result3 = events.iter().find(|e| e.kind == AnchorKind::Result && e.node_id == Some(3)).unwrap();
        let chars: Vec<char> = TABLE_ONE_OUTPUT.chars().collect();
        assert_eq!(chars[result3.anchor_char()], ':');
        assert_eq!(chars[result3.char_start], '*');
    }

    #[test]
    fn parse_empty_and_garbage() {
        assert!(parse_transcript("").is_empty());
        assert!(parse_transcript("hello\n* Result: `True`\nworld").is_empty());
    }

    #[test]
    fn single_node_transcript() {
        let tree = LogicTree::from_parts(1, &[Op::Xor], &[true, false]).unwrap();
        let task = TaskInstance::new("t", tree);
        let text = render_reference_cot(&task, PromptVariant::Normal);
        let events = parse_transcript(&text);
        assert_eq!(events.len(), 5);
        let report = grade_transcript(&text, &events, &task.truth);
        assert!(report.all_correct());
    }

    #[test]
    fn grading_flags_flipped_result() {
        let task = table_one();
        let text = render_reference_cot(&task, PromptVariant::Normal)
            .replace("* Logic: `False xor True`\n* Result: `True`", "* Logic: `False xor True`\n* Result: `False`");
        let report = grade_transcript(&text, &parse_transcript(&text), &task.truth);
        assert!(report.format_valid);
        assert!(!report.per_node_correct[&2]);
        assert!(report.per_node_correct[&1] && report.per_node_correct[&3]);
        assert!(report.final_correct);
    }

    #[test]
    fn truncated_transcript_is_invalid() {
        let task = table_one();
        let full = render_reference_cot(&task, PromptVariant::Normal);
        let cut = &full[..full.find("### Summary").unwrap()];
        let report = grade_transcript(cut, &parse_transcript(cut), &task.truth);
        assert!(!report.format_valid);
        assert!(!report.final_correct);
    }

    #[test]
    fn duplicated_anchor_is_invalid() {
        let task = table_one();
        let full = render_reference_cot(&task, PromptVariant::Normal);
        let dup = full.replace("### Summary\n", "* Result: `True`\n### Summary\n");
        let report = grade_transcript(&dup, &parse_transcript(&dup), &task.truth);
        assert!(!report.format_valid);
    }

    #[test]
    fn grading_ignores_line_endings() {
        let task = table_one();
        let lf = render_reference_cot(&task, PromptVariant::Normal);
        let crlf = lf.replace('\n', "  \r\n");
        let a = grade_transcript(&lf, &parse_transcript(&lf), &task.truth);
        let b = grade_transcript(&crlf, &parse_transcript(&crlf), &task.truth);
        assert_eq!(a, b);
        assert!(b.all_correct());
    }

    #[test]
    fn masked_variant_hides_children() {
        let task = gen_balanced_dataset(3, 2, 1).unwrap().remove(0);
        let text = render_reference_cot(&task, PromptVariant::MaskedLogic);
        for line in text.lines().filter(|l| l.starts_with("* Logic:")) {
            assert_eq!(line, "* Logic: `***************`");
        }
        let events = parse_transcript(&text);
        let report = grade_transcript(&text, &events, &task.truth);
        let normal = render_reference_cot(&task, PromptVariant::Normal);
        let normal_report = grade_transcript(&normal, &parse_transcript(&normal), &task.truth);
        assert_eq!(report, normal_report);
    }

    #[test]
    fn align_trivial_spans() {
        let events = parse_transcript(TABLE_ONE_OUTPUT);
        let n = TABLE_ONE_OUTPUT.chars().count();
        let whole = vec![TokenSpan { index: 0, text: TABLE_ONE_OUTPUT.into(), char_start: 0, char_end: n }];
        assert!(align_anchors(&events, &whole).unwrap().iter().all(|e| e.token_index == Some(0)));
        let per_char: Vec<TokenSpan> = TABLE_ONE_OUTPUT
            .chars()
            .enumerate()
            .map(|(i, c)| TokenSpan { index: i, text: c.to_string(), char_start: i, char_end: i + 1 })
            .collect();
        for e in align_anchors(&events, &per_char).unwrap() {
            assert_eq!(e.token_index, Some(e.anchor_char()));
        }
    }

    #[test]
    fn align_reports_uncovered_anchor() {
        let events = parse_transcript(TABLE_ONE_OUTPUT);
        let short = vec![TokenSpan { index: 0, text: "x".into(), char_start: 0, char_end: 10 }];
        assert!(matches!(align_anchors(&events, &short), Err(AlignError::Uncovered { .. })));
    }

    #[test]
    fn pretokenize_tiles_text() {
        let toks = pretokenize(TABLE_ONE_OUTPUT);
        let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(joined, TABLE_ONE_OUTPUT);
        let events = align_anchors(&parse_transcript(TABLE_ONE_OUTPUT), &toks).unwrap();
        for e in events.iter().filter(|e| e.kind == AnchorKind::Result) {
            assert_eq!(toks[e.token_index.unwrap()].text, ":");
        }
    }

    #[test]
    fn tokens_in_line_range() {
        let toks = pretokenize(TABLE_ONE_OUTPUT);
        let events = parse_transcript(TABLE_ONE_OUTPUT);
        let logic1 = &events[1];
        let (s, e) = event_line_span(TABLE_ONE_OUTPUT, logic1);
        let idx = tokens_in_range(&toks, s, e);
        let text: String = idx.iter().map(|&i| toks[i].text.as_str()).collect();
        assert_eq!(text.trim(), "* Logic: `True or False`");
        assert_eq!(event_value(TABLE_ONE_OUTPUT, &events[2]), Some(true));
    }

    #[test]
    fn canonical_ordinals() {
        let c = CanonicalLayout::new(TreeLayout::new(4).unwrap());
        assert_eq!(c.len(), 61);
        assert_eq!(c.solve(11, AnchorKind::Result), Some(32));
        assert_eq!(c.recall(5, AnchorKind::Header), c.solve(11, AnchorKind::Header));
        assert_eq!(c.recall(15, AnchorKind::Header), None);
        assert_eq!(c.summary(1), Some(45));
        assert_eq!(c.describe(60), Some((Phase::Final, AnchorKind::FinalAnswer, None)));
        assert_eq!(c.describe(61), None);
    }
}
