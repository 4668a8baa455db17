//! Event schemas, annotated sentences and JSONL dataset ingestion.
//!
//! All offsets are character offsets (not bytes, not tokens) into the raw
//! sentence context, end-exclusive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Slot name reserved for the trigger in every template.
pub const TRIGGER_SLOT: &str = "trigger";

/// One piece of a parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePart {
    Literal(String),
    Slot(String),
}

/// An argument template such as `<Artifact> was moved to <Destination> by <trigger>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<TemplatePart>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, DataError> {
        let mut parts = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('<') {
            let after = &rest[open + 1..];
            let Some(close) = after.find('>') else {
                return Err(DataError::Schema(format!("unclosed slot in template `{source}`")));
            };
            let name = &after[..close];
            let valid = !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | ':'));
            if !valid {
                return Err(DataError::Schema(format!(
                    "bad slot name `<{name}>` in template `{source}`"
                )));
            }
            if open > 0 {
                parts.push(TemplatePart::Literal(rest[..open].to_string()));
            }
            parts.push(TemplatePart::Slot(name.to_string()));
            rest = &after[close + 1..];
        }
        if !rest.is_empty() {
            parts.push(TemplatePart::Literal(rest.to_string()));
        }
        Ok(Template {
            source: source.to_string(),
            parts,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn parts(&self) -> &[TemplatePart] {
        &self.parts
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            TemplatePart::Slot(s) => Some(s.as_str()),
            TemplatePart::Literal(_) => None,
        })
    }
}

/// Per-type schema entry, as stored in the schema file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTypeSpec {
    pub roles: Vec<String>,
    pub template: String,
    #[serde(default)]
    pub multi_valued_roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SchemaFile {
    event_types: BTreeMap<String, EventTypeSpec>,
}

/// Event types, their ordered roles and their argument templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSchema {
    types: BTreeMap<String, EventTypeSpec>,
    templates: BTreeMap<String, Template>,
}

impl EventSchema {
    pub fn new(types: BTreeMap<String, EventTypeSpec>) -> Result<Self, DataError> {
        let mut templates = BTreeMap::new();
        for (name, spec) in &types {
            if name.trim().is_empty() {
                return Err(DataError::Schema("empty event type name".into()));
            }
            let mut seen = BTreeSet::new();
            for role in &spec.roles {
                if role == TRIGGER_SLOT {
                    return Err(DataError::Schema(format!(
                        "{name}: role name `{TRIGGER_SLOT}` is reserved"
                    )));
                }
                if !seen.insert(role.as_str()) {
                    return Err(DataError::Schema(format!("{name}: duplicate role `{role}`")));
                }
            }
            for role in &spec.multi_valued_roles {
                if !seen.contains(role.as_str()) {
                    return Err(DataError::Schema(format!(
                        "{name}: multi-valued role `{role}` is not a role of this type"
                    )));
                }
            }
            let template = Template::parse(&spec.template)?;
            let mut slot_counts: BTreeMap<&str, usize> = BTreeMap::new();
            for slot in template.slots() {
                *slot_counts.entry(slot).or_default() += 1;
            }
            if slot_counts.get(TRIGGER_SLOT) != Some(&1) {
                return Err(DataError::Schema(format!(
                    "{name}: template must contain exactly one <{TRIGGER_SLOT}> slot"
                )));
            }
            for (slot, count) in &slot_counts {
                if *slot != TRIGGER_SLOT && !seen.contains(slot) {
                    return Err(DataError::Schema(format!(
                        "{name}: template slot <{slot}> is not a role of this type"
                    )));
                }
                if *count > 1 {
                    return Err(DataError::Schema(format!("{name}: slot <{slot}> repeated")));
                }
            }
            if let Some(missing) = spec.roles.iter().find(|r| !slot_counts.contains_key(r.as_str())) {
                return Err(DataError::Schema(format!(
                    "{name}: role `{missing}` has no template slot"
                )));
            }
            templates.insert(name.clone(), template);
        }
        Ok(EventSchema { types, templates })
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        let file: SchemaFile =
            serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        Self::new(file.event_types)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|e| match e {
            DataError::Schema(msg) => DataError::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = SchemaFile {
            event_types: self.types.clone(),
        };
        serde_json::to_string_pretty(&file).expect("schema serializes")
    }

    /// Event type names in a stable (sorted) order.
    pub fn event_types(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    pub fn contains(&self, event_type: &str) -> bool {
        self.types.contains_key(event_type)
    }

    pub fn roles(&self, event_type: &str) -> Option<&[String]> {
        self.types.get(event_type).map(|s| s.roles.as_slice())
    }

    pub fn template(&self, event_type: &str) -> Option<&Template> {
        self.templates.get(event_type)
    }

    pub fn is_multi_valued(&self, event_type: &str, role: &str) -> bool {
        self.types
            .get(event_type)
            .is_some_and(|s| s.multi_valued_roles.iter().any(|r| r == role))
    }
}

/// Character-offset span into a sentence context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(text: impl Into<String>, start: usize, end: usize) -> Self {
        Span {
            text: text.into(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Argument {
    pub role: String,
    #[serde(flatten)]
    pub span: Span,
}

impl Argument {
    pub fn new(role: impl Into<String>, span: Span) -> Self {
        Argument {
            role: role.into(),
            span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_type: String,
    pub trigger: Span,
    #[serde(default)]
    pub arguments: Vec<Argument>,
}

impl EventRecord {
    /// Trigger text followed by every argument text, in record order.
    pub fn element_texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.trigger.text.as_str())
            .chain(self.arguments.iter().map(|a| a.span.text.as_str()))
    }
}

/// A `(head, relation, tail)` annotation rendered into the relation description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub context: String,
    #[serde(default)]
    pub records: Vec<EventRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<Relation>,
}

/// Why a record does not fit its context or schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownEventType(String),
    UnknownRole { event_type: String, role: String },
    RepeatedRole { role: String },
    EmptyTrigger,
    BadOffsets { what: String, start: usize, end: usize },
    OutOfBounds { what: String, end: usize, len: usize },
    TextMismatch { what: String, expected: String, found: String },
}

impl Violation {
    pub fn is_span_error(&self) -> bool {
        matches!(
            self,
            Violation::BadOffsets { .. } | Violation::OutOfBounds { .. } | Violation::TextMismatch { .. }
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownEventType(t) => write!(f, "unknown event type `{t}`"),
            Violation::UnknownRole { event_type, role } => {
                write!(f, "role `{role}` is not defined for `{event_type}`")
            }
            Violation::RepeatedRole { role } => write!(f, "single-valued role `{role}` repeated"),
            Violation::EmptyTrigger => write!(f, "trigger text is empty"),
            Violation::BadOffsets { what, start, end } => {
                write!(f, "{what}: end {end} must be greater than start {start}")
            }
            Violation::OutOfBounds { what, end, len } => {
                write!(f, "{what}: end {end} exceeds context length {len}")
            }
            Violation::TextMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: span text `{expected}` but context has `{found}`"),
        }
    }
}

/// Slice `s` by character offsets; `None` when out of range.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut idx = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len()));
    let b_start = idx.by_ref().nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        idx.nth(end - start - 1)?
    };
    Some(&s[b_start..b_end])
}

fn check_span(what: &str, span: &Span, context: &str, out: &mut Vec<Violation>) {
    if span.end <= span.start {
        out.push(Violation::BadOffsets {
            what: what.to_string(),
            start: span.start,
            end: span.end,
        });
        return;
    }
    let len = context.chars().count();
    if span.end > len {
        out.push(Violation::OutOfBounds {
            what: what.to_string(),
            end: span.end,
            len,
        });
        return;
    }
    let found = char_slice(context, span.start, span.end).unwrap_or_default();
    if found != span.text {
        out.push(Violation::TextMismatch {
            what: what.to_string(),
            expected: span.text.clone(),
            found: found.to_string(),
        });
    }
}

/// Span checks only, for callers without a schema.
pub fn validate_spans(record: &EventRecord, context: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.trigger.text.is_empty() {
        out.push(Violation::EmptyTrigger);
    }
    check_span("trigger", &record.trigger, context, &mut out);
    for arg in &record.arguments {
        check_span(&format!("argument `{}`", arg.role), &arg.span, context, &mut out);
    }
    out
}

/// Every way `record` violates its context or schema; empty when valid.
pub fn validate_record(record: &EventRecord, context: &str, schema: &EventSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    match schema.roles(&record.event_type) {
        None => out.push(Violation::UnknownEventType(record.event_type.clone())),
        Some(roles) => {
            let mut seen = BTreeSet::new();
            for arg in &record.arguments {
                if !roles.contains(&arg.role) {
                    out.push(Violation::UnknownRole {
                        event_type: record.event_type.clone(),
                        role: arg.role.clone(),
                    });
                } else if !seen.insert(arg.role.as_str())
                    && !schema.is_multi_valued(&record.event_type, &arg.role)
                {
                    out.push(Violation::RepeatedRole {
                        role: arg.role.clone(),
                    });
                }
            }
        }
    }
    out.extend(validate_spans(record, context));
    out
}

/// The original training set together with its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: EventSchema,
    pub sentences: Vec<AnnotatedSentence>,
}

impl Dataset {
    pub fn new(schema: EventSchema, sentences: Vec<AnnotatedSentence>) -> Result<Self, DataError> {
        let mut ids = BTreeSet::new();
        for s in &sentences {
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            check_sentence(s, Some(&schema))?;
        }
        Ok(Dataset { schema, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedSentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        sentences_to_jsonl(&self.sentences)
    }
}

fn check_sentence(s: &AnnotatedSentence, schema: Option<&EventSchema>) -> Result<(), DataError> {
    for record in &s.records {
        let violations = match schema {
            Some(schema) => validate_record(record, &s.context, schema),
            None => validate_spans(record, &s.context),
        };
        if let Some(v) = violations.iter().find(|v| v.is_span_error()) {
            return Err(DataError::SpanMismatch {
                id: s.id.clone(),
                detail: v.to_string(),
            });
        }
        if !violations.is_empty() {
            return Err(DataError::InvalidRecord {
                id: s.id.clone(),
                violations: violations.iter().map(ToString::to_string).collect(),
            });
        }
    }
    Ok(())
}

pub fn sentences_to_jsonl(sentences: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
        out.push('\n');
    }
    out
}

/// Parse JSONL text; blank lines are skipped. Spans are checked against their
/// context, and against `schema` when one is given.
pub fn parse_sentences(
    text: &str,
    path: &Path,
    schema: Option<&EventSchema>,
) -> Result<Vec<AnnotatedSentence>, DataError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sentence: AnnotatedSentence =
            serde_json::from_str(line).map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if !ids.insert(sentence.id.clone()) {
            return Err(DataError::DuplicateId(sentence.id));
        }
        check_sentence(&sentence, schema)?;
        out.push(sentence);
    }
    Ok(out)
}

/// Read a JSONL file with span validation but no schema.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sentences(&text, path, None)
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &EventSchema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let sentences = parse_sentences(&text, path, Some(schema))?;
    Ok(Dataset {
        schema: schema.clone(),
        sentences,
    })
}

/// The two-type, three-role schema the toy corpus uses.
pub fn toy_schema() -> EventSchema {
    EventSchema::from_json_str(include_str!("../data/toy/schema.json")).expect("bundled schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn transport(ctx: &str) -> EventRecord {
        let at = |t: &str| {
            let b = ctx.find(t).unwrap();
            let s = ctx[..b].chars().count();
            Span::new(t, s, s + t.chars().count())
        };
        EventRecord {
            event_type: "Movement:Transport".into(),
            trigger: at("moved"),
            arguments: vec![Argument::new("Artifact", at("troops"))],
        }
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = write_tmp("");
        let ds = load_dataset(f.path(), &toy_schema()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn two_event_sentence_loads_with_two_records() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy/two_events.jsonl");
        let ds = load_dataset(path, &toy_schema()).unwrap();
        assert_eq!(ds.len(), 1);
        let s = &ds.sentences[0];
        assert_eq!(s.records.len(), 2);
        let types: Vec<_> = s.records.iter().map(|r| r.event_type.as_str()).collect();
        assert_eq!(types, ["Movement:Transport", "Transaction:Transfer-Ownership"]);
        assert_eq!(s.records[0].trigger.text, "airlifting");
        assert_eq!(s.records[1].trigger.text, "Capture");
        for r in &s.records {
            assert_eq!(
                char_slice(&s.context, r.trigger.start, r.trigger.end).unwrap(),
                r.trigger.text
            );
        }
    }

    #[test]
    fn mismatched_span_is_rejected_with_sentence_id() {
        let line = r#"{"id":"s9","context":"troops moved home","records":[{"event_type":"Movement:Transport","trigger":{"text":"moves","start":7,"end":12},"arguments":[]}]}"#;
        let f = write_tmp(line);
        match load_dataset(f.path(), &toy_schema()) {
            Err(DataError::SpanMismatch { id, .. }) => assert_eq!(id, "s9"),
            other => panic!("expected span mismatch, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let f = write_tmp("{\"id\":\"a\",\"context\":\"x\",\"records\":[]}\n{oops\n");
        match load_dataset(f.path(), &toy_schema()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"context\":\"x\"}\n{\"id\":\"a\",\"context\":\"y\"}\n");
        assert!(matches!(
            load_dataset(f.path(), &toy_schema()),
            Err(DataError::DuplicateId(_))
        ));
    }

    #[test]
    fn well_formed_record_has_no_violations() {
        let ctx = "the army moved troops to Basra";
        assert!(validate_record(&transport(ctx), ctx, &toy_schema()).is_empty());
    }

    #[test]
    fn unknown_role_is_named() {
        let ctx = "the army moved troops to Basra";
        let mut r = transport(ctx);
        r.arguments[0].role = "Vehicle".into();
        let v = validate_record(&r, ctx, &toy_schema());
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("Vehicle"));
    }

    #[test]
    fn inverted_offsets_are_named() {
        let ctx = "the army moved troops to Basra";
        let mut r = transport(ctx);
        r.arguments[0].span = Span::new("troops", 21, 15);
        let v = validate_record(&r, ctx, &toy_schema());
        assert_eq!(v.len(), 1);
        let msg = v[0].to_string();
        assert!(msg.contains("21") && msg.contains("15"), "{msg}");
    }

    #[test]
    fn repeated_role_needs_multi_valued_flag() {
        let ctx = "the army moved troops and tanks to Basra";
        let mut r = transport(ctx);
        let b = ctx.find("tanks").unwrap();
        r.arguments.push(Argument::new("Artifact", Span::new("tanks", b, b + 5)));
        let strict = toy_schema();
        assert_eq!(validate_record(&r, ctx, &strict).len(), 1);

        let mut types = BTreeMap::new();
        types.insert(
            "Movement:Transport".to_string(),
            EventTypeSpec {
                roles: vec!["Artifact".into(), "Destination".into(), "Origin".into()],
                template: "<Artifact> was moved to <Destination> from <Origin> by <trigger>".into(),
                multi_valued_roles: vec!["Artifact".into()],
            },
        );
        let lenient = EventSchema::new(types).unwrap();
        assert!(validate_record(&r, ctx, &lenient).is_empty());
    }

    #[test]
    fn schema_rejects_template_without_role_slot() {
        let mut types = BTreeMap::new();
        types.insert(
            "T".to_string(),
            EventTypeSpec {
                roles: vec!["A".into(), "B".into()],
                template: "<A> did <trigger>".into(),
                multi_valued_roles: vec![],
            },
        );
        assert!(EventSchema::new(types).is_err());
    }

    #[test]
    fn schema_rejects_template_slot_outside_roles() {
        let mut types = BTreeMap::new();
        types.insert(
            "T".to_string(),
            EventTypeSpec {
                roles: vec!["A".into()],
                template: "<A> did <trigger> to <Z>".into(),
                multi_valued_roles: vec![],
            },
        );
        assert!(EventSchema::new(types).is_err());
    }

    #[test]
    fn char_slice_handles_multibyte() {
        let s = "añb c";
        assert_eq!(char_slice(s, 1, 3), Some("ñb"));
        assert_eq!(char_slice(s, 5, 5), Some(""));
        assert_eq!(char_slice(s, 4, 6), None);
    }

    #[test]
    fn toy_corpora_validate() {
        let schema = toy_schema();
        for f in ["train.jsonl", "dev.jsonl"] {
            let path = format!("{}/data/toy/{f}", env!("CARGO_MANIFEST_DIR"));
            let ds = load_dataset(&path, &schema).unwrap();
            assert!(!ds.is_empty());
        }
    }
}
