//! Logical forms of the agent's command language.
//!
//! A logical form (LF) is a small tree whose leaves are enum literals and
//! text spans. Spans are zero-based and inclusive: `[0, [2, 2]]` addresses
//! the third token of the first chat message.
//!
//! Three encodings exist:
//! * the canonical text form, compact JSON with sorted keys (persistence,
//!   wire format, exact-match evaluation);
//! * the linearized token sequence, a depth-first pre-order walk of the tree;
//! * the in-memory [`LogicalForm`].

use std::fmt;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DslError {
    #[error("span {span} is out of range for the chat history")]
    SpanOutOfRange { span: Span },
    #[error("invalid logical form: {0}")]
    InvalidForm(String),
    #[error("malformed token sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: String },
}

/// Lowercase, whitespace split, punctuation trimmed from token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Inclusive token range `start..=end` of chat message `text_index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub text_index: u32,
    pub start: u32,
    pub end: u32,
}

impl Span {
    pub const fn new(text_index: u32, start: u32, end: u32) -> Self {
        Span { text_index, start, end }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens covered by the span, when it fits `tokens`.
    pub fn slice<'a>(&self, tokens: &'a [String]) -> Option<&'a [String]> {
        if self.start > self.end || self.end as usize >= tokens.len() {
            return None;
        }
        Some(&tokens[self.start as usize..=self.end as usize])
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},[{},{}]]", self.text_index, self.start, self.end)
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.text_index, (self.start, self.end)).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (text_index, (start, end)) = <(u32, (u32, u32))>::deserialize(d)?;
        Ok(Span { text_index, start, end })
    }
}

/// Resolve a span against tokenized chat history.
pub fn resolve_span(span: Span, history: &[Vec<String>]) -> Result<String, DslError> {
    history
        .get(span.text_index as usize)
        .and_then(|tokens| span.slice(tokens))
        .map(|toks| toks.join(" "))
        .ok_or(DslError::SpanOutOfRange { span })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    HasName,
    HasColour,
    HasTag,
}

impl Predicate {
    pub fn as_str(self) -> &'static str {
        match self {
            Predicate::HasName => "has_name",
            Predicate::HasColour => "has_colour",
            Predicate::HasTag => "has_tag",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conjunct {
    pub pred_text: Predicate,
    pub obj_text: Span,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhereClause {
    #[serde(rename = "AND")]
    pub conjuncts: Vec<Conjunct>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filters {
    pub where_clause: WhereClause,
}

impl Filters {
    pub fn new(conjuncts: Vec<Conjunct>) -> Self {
        Filters { where_clause: WhereClause { conjuncts } }
    }

    pub fn has_name(span: Span) -> Self {
        Filters::new(vec![Conjunct { pred_text: Predicate::HasName, obj_text: span }])
    }

    pub fn conjuncts(&self) -> &[Conjunct] {
        &self.where_clause.conjuncts
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceObject {
    pub filters: Filters,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schematic {
    pub filters: Filters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Left,
    Right,
    Front,
    Back,
    Up,
    Down,
    Around,
    Near,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub relative_direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_object: Option<ReferenceObject>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    Build,
    Dance,
    Get,
    Spawn,
    Resume,
    Fill,
    Destroy,
    Move,
    Undo,
    Stop,
    Dig,
    Freebuild,
}

impl ActionType {
    pub const ALL: [ActionType; 12] = [
        ActionType::Build,
        ActionType::Dance,
        ActionType::Get,
        ActionType::Spawn,
        ActionType::Resume,
        ActionType::Fill,
        ActionType::Destroy,
        ActionType::Move,
        ActionType::Undo,
        ActionType::Stop,
        ActionType::Dig,
        ActionType::Freebuild,
    ];

    /// Control actions never carry arguments.
    pub fn is_control(self) -> bool {
        matches!(self, ActionType::Stop | ActionType::Resume | ActionType::Undo)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    pub action_type: ActionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_object: Option<ReferenceObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schematic: Option<Schematic>,
}

impl Action {
    pub fn bare(action_type: ActionType) -> Self {
        Action { action_type, location: None, reference_object: None, schematic: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DialogueType {
    HumanGiveCommand,
    GetMemory,
    PutMemory,
}

/// What a GET_MEMORY question asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerType {
    Name,
    Count,
}

/// One parsed chat message. Exactly one payload group is populated, chosen
/// by `dialogue_type`: `action_sequence` for commands, `answer_type` (plus
/// optional `filters`) for memory questions, `upsert` (plus optional
/// `filters`) for memory statements.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogicalForm {
    pub dialogue_type: DialogueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_sequence: Option<Vec<Action>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<Filters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<AnswerType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsert: Option<Conjunct>,
}

impl LogicalForm {
    pub fn command(actions: Vec<Action>) -> Self {
        LogicalForm {
            dialogue_type: DialogueType::HumanGiveCommand,
            action_sequence: Some(actions),
            filters: None,
            answer_type: None,
            upsert: None,
        }
    }

    pub fn get_memory(filters: Option<Filters>, answer_type: AnswerType) -> Self {
        LogicalForm {
            dialogue_type: DialogueType::GetMemory,
            action_sequence: None,
            filters,
            answer_type: Some(answer_type),
            upsert: None,
        }
    }

    pub fn put_memory(filters: Option<Filters>, upsert: Conjunct) -> Self {
        LogicalForm {
            dialogue_type: DialogueType::PutMemory,
            action_sequence: None,
            filters,
            answer_type: None,
            upsert: Some(upsert),
        }
    }

    pub fn actions(&self) -> &[Action] {
        self.action_sequence.as_deref().unwrap_or(&[])
    }

    fn filters_mut(&mut self) -> Vec<&mut Filters> {
        let mut out: Vec<&mut Filters> = Vec::new();
        if let Some(actions) = self.action_sequence.as_mut() {
            for a in actions {
                if let Some(loc) = a.location.as_mut() {
                    if let Some(r) = loc.reference_object.as_mut() {
                        out.push(&mut r.filters);
                    }
                }
                if let Some(r) = a.reference_object.as_mut() {
                    out.push(&mut r.filters);
                }
                if let Some(s) = a.schematic.as_mut() {
                    out.push(&mut s.filters);
                }
            }
        }
        if let Some(f) = self.filters.as_mut() {
            out.push(f);
        }
        out
    }

    /// Visit every span leaf in depth-first order.
    pub fn visit_spans_mut(&mut self, mut f: impl FnMut(&mut Span)) {
        for filters in self.filters_mut() {
            for c in &mut filters.where_clause.conjuncts {
                f(&mut c.obj_text);
            }
        }
        if let Some(u) = self.upsert.as_mut() {
            f(&mut u.obj_text);
        }
    }

    pub fn spans(&self) -> Vec<Span> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit_spans_mut(|s| out.push(*s));
        out
    }

    pub fn canonical(&self) -> String {
        canonicalize(self).expect("LF serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self, DslError> {
        serde_json::from_str(text).map_err(|e| DslError::InvalidForm(e.to_string()))
    }
}

impl fmt::Display for LogicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Compact JSON with lexicographically sorted keys.
pub fn canonicalize(lf: &LogicalForm) -> Result<String, DslError> {
    let value = serde_json::to_value(lf).map_err(|e| DslError::InvalidForm(e.to_string()))?;
    let mut out = String::new();
    write_sorted(&value, &mut out);
    Ok(out)
}

fn write_sorted(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_sorted(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_sorted(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

const OPEN_OBJ: &str = "{";
const CLOSE_OBJ: &str = "}";
const OPEN_LIST: &str = "[";
const CLOSE_LIST: &str = "]";
const SPAN: &str = "SPAN";

/// Depth-first pre-order token sequence. Objects emit `{`, then per key (in
/// sorted order) a `key:` token followed by the value, then `}`; lists are
/// bracketed by `[`/`]`; enum leaves are their literal; spans emit `SPAN`
/// followed by three integer tokens.
pub fn linearize(lf: &LogicalForm) -> Vec<String> {
    let value = serde_json::to_value(lf).expect("LF serializes");
    let mut out = Vec::new();
    emit(&value, &mut out);
    out
}

fn span_of(v: &Value) -> Option<[u64; 3]> {
    let arr = v.as_array()?;
    if arr.len() != 2 {
        return None;
    }
    let inner = arr[1].as_array()?;
    if inner.len() != 2 {
        return None;
    }
    Some([arr[0].as_u64()?, inner[0].as_u64()?, inner[1].as_u64()?])
}

fn emit(v: &Value, out: &mut Vec<String>) {
    if let Some([x, y, z]) = span_of(v) {
        out.push(SPAN.to_string());
        out.extend([x, y, z].iter().map(u64::to_string));
        return;
    }
    match v {
        Value::Object(map) => {
            out.push(OPEN_OBJ.to_string());
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for k in keys {
                out.push(format!("{k}:"));
                emit(&map[k], out);
            }
            out.push(CLOSE_OBJ.to_string());
        }
        Value::Array(items) => {
            out.push(OPEN_LIST.to_string());
            for item in items {
                emit(item, out);
            }
            out.push(CLOSE_LIST.to_string());
        }
        Value::String(s) => out.push(s.clone()),
        // The LF schema has no other leaf kinds.
        other => out.push(other.to_string()),
    }
}

pub fn delinearize<S: AsRef<str>>(tokens: &[S]) -> Result<LogicalForm, DslError> {
    let mut reader = Reader { tokens, pos: 0 };
    let value = reader.value()?;
    if reader.pos != tokens.len() {
        return Err(reader.err("trailing tokens"));
    }
    serde_json::from_value(value).map_err(|e| DslError::MalformedSequence { position: tokens.len(), reason: e.to_string() })
}

struct Reader<'a, S> {
    tokens: &'a [S],
    pos: usize,
}

impl<S: AsRef<str>> Reader<'_, S> {
    fn err(&self, reason: &str) -> DslError {
        DslError::MalformedSequence { position: self.pos, reason: reason.to_string() }
    }

    fn next(&mut self) -> Result<&str, DslError> {
        let tok = self.tokens.get(self.pos).ok_or_else(|| self.err("unexpected end"))?;
        self.pos += 1;
        Ok(tok.as_ref())
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|t| t.as_ref())
    }

    fn int(&mut self) -> Result<u64, DslError> {
        let tok = self.next()?.to_string();
        let position = self.pos - 1;
        tok.parse::<u64>().map_err(|_| DslError::MalformedSequence {
            position,
            reason: format!("expected integer, found {tok:?}"),
        })
    }

    fn value(&mut self) -> Result<Value, DslError> {
        let tok = self.next()?.to_string();
        match tok.as_str() {
            OPEN_OBJ => {
                let mut map = serde_json::Map::new();
                loop {
                    match self.peek() {
                        Some(CLOSE_OBJ) => {
                            self.pos += 1;
                            return Ok(Value::Object(map));
                        }
                        Some(k) if k.len() > 1 && k.ends_with(':') => {
                            let key = k[..k.len() - 1].to_string();
                            self.pos += 1;
                            let v = self.value()?;
                            if map.insert(key, v).is_some() {
                                return Err(self.err("duplicate key"));
                            }
                        }
                        Some(_) => return Err(self.err("expected key or `}`")),
                        None => return Err(self.err("unbalanced `{`")),
                    }
                }
            }
            OPEN_LIST => {
                let mut items = Vec::new();
                loop {
                    match self.peek() {
                        Some(CLOSE_LIST) => {
                            self.pos += 1;
                            return Ok(Value::Array(items));
                        }
                        Some(_) => items.push(self.value()?),
                        None => return Err(self.err("unbalanced `[`")),
                    }
                }
            }
            SPAN => {
                let (x, y, z) = (self.int()?, self.int()?, self.int()?);
                Ok(serde_json::json!([x, [y, z]]))
            }
            CLOSE_OBJ | CLOSE_LIST => Err(DslError::MalformedSequence { position: self.pos - 1, reason: "unbalanced close".into() }),
            t if t.ends_with(':') => Err(DslError::MalformedSequence { position: self.pos - 1, reason: "key outside object".into() }),
            _ => Ok(Value::String(tok)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    PayloadMismatch { dialogue_type: DialogueType, detail: &'static str },
    EmptyWhereClause,
    AroundWithoutReference,
    ControlWithArguments(ActionType),
    InvertedSpan(Span),
    SpanOutOfRange(Span),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PayloadMismatch { dialogue_type, detail } => write!(f, "{dialogue_type:?}: {detail}"),
            Violation::EmptyWhereClause => write!(f, "where clause has no conjuncts"),
            Violation::AroundWithoutReference => write!(f, "AROUND needs a reference object"),
            Violation::ControlWithArguments(a) => write!(f, "{a:?} takes no arguments"),
            Violation::InvertedSpan(s) => write!(f, "span {s} has start after end"),
            Violation::SpanOutOfRange(s) => write!(f, "span {s} does not fit its message"),
        }
    }
}

/// Check every structural invariant; returns all violations found.
pub fn validate(lf: &LogicalForm) -> Vec<Violation> {
    let mut out = Vec::new();
    let dt = lf.dialogue_type;
    let mismatch = |detail| Violation::PayloadMismatch { dialogue_type: dt, detail };
    match dt {
        DialogueType::HumanGiveCommand => {
            if lf.action_sequence.is_none() {
                out.push(mismatch("missing action_sequence"));
            }
            if lf.filters.is_some() || lf.answer_type.is_some() || lf.upsert.is_some() {
                out.push(mismatch("memory payload on a command"));
            }
        }
        DialogueType::GetMemory => {
            if lf.answer_type.is_none() {
                out.push(mismatch("missing answer_type"));
            }
            if lf.action_sequence.is_some() || lf.upsert.is_some() {
                out.push(mismatch("command or upsert payload on a question"));
            }
        }
        DialogueType::PutMemory => {
            if lf.upsert.is_none() {
                out.push(mismatch("missing upsert"));
            }
            if lf.action_sequence.is_some() || lf.answer_type.is_some() {
                out.push(mismatch("command or answer payload on a statement"));
            }
        }
    }
    for a in lf.actions() {
        if a.action_type.is_control() && (a.location.is_some() || a.reference_object.is_some() || a.schematic.is_some()) {
            out.push(Violation::ControlWithArguments(a.action_type));
        }
        if let Some(loc) = &a.location {
            if loc.relative_direction == Direction::Around && loc.reference_object.is_none() {
                out.push(Violation::AroundWithoutReference);
            }
        }
    }
    let mut copy = lf.clone();
    for f in copy.filters_mut() {
        if f.where_clause.conjuncts.is_empty() {
            out.push(Violation::EmptyWhereClause);
        }
    }
    for s in lf.spans() {
        if s.start > s.end {
            out.push(Violation::InvertedSpan(s));
        }
    }
    out
}

/// [`validate`] plus a check that every span fits the given chat history.
pub fn validate_against(lf: &LogicalForm, history: &[Vec<String>]) -> Vec<Violation> {
    let mut out = validate(lf);
    for s in lf.spans() {
        if s.start <= s.end && resolve_span(s, history).is_err() {
            out.push(Violation::SpanOutOfRange(s));
        }
    }
    out
}

/// Deserialize any canonical or pretty JSON LF.
pub fn parse_lf_json(text: &str) -> Result<LogicalForm, DslError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DslError::InvalidForm(e.to_string()))?;
    serde_json::from_value(value).map_err(|e| DslError::InvalidForm(e.to_string()))
}

/// The three worked examples used throughout the docs and tests.
pub mod examples {
    use super::*;

    fn name(span: Span) -> Filters {
        Filters::has_name(span)
    }

    /// "build a box"
    pub fn build_a_box() -> LogicalForm {
        LogicalForm::command(vec![Action {
            schematic: Some(Schematic { filters: name(Span::new(0, 2, 2)) }),
            ..Action::bare(ActionType::Build)
        }])
    }

    /// "move to the left of the cube"
    pub fn move_left_of_cube() -> LogicalForm {
        LogicalForm::command(vec![Action {
            location: Some(Location {
                relative_direction: Direction::Left,
                reference_object: Some(ReferenceObject { filters: name(Span::new(0, 6, 6)) }),
            }),
            ..Action::bare(ActionType::Move)
        }])
    }

    /// "dig a moat around the fort"
    pub fn dig_moat_around_fort() -> LogicalForm {
        LogicalForm::command(vec![Action {
            location: Some(Location {
                relative_direction: Direction::Around,
                reference_object: Some(ReferenceObject { filters: name(Span::new(0, 5, 5)) }),
            }),
            schematic: Some(Schematic { filters: name(Span::new(0, 2, 2)) }),
            ..Action::bare(ActionType::Dig)
        }])
    }

    pub fn all() -> [(&'static str, LogicalForm); 3] {
        [
            ("build a box", build_a_box()),
            ("move to the left of the cube", move_left_of_cube()),
            ("dig a moat around the fort", dig_moat_around_fort()),
        ]
    }
}
