//! Model-facing sequences: extraction prompts, generation inputs and policy
//! inputs, plus parsing answered prompts back into spans.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{
    AnnotatedSentence, EventRecord, EventSchema, Relation, Span, TemplatePart, TRIGGER_SLOT,
};

pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[M]";
/// Filler for a slot that has no argument.
pub const NULL_SLOT: &str = "<none>";
pub const GENERATION_PREFIX: &str = "translate knowledge into sentence";
/// Joins several filled templates of one type in an answered prompt.
pub const INSTANCE_SEP: &str = " [SEP] ";
/// Joins fillers of a multi-valued role inside one slot.
pub const MULTI_VALUE_SEP: &str = " and ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionInput {
    pub event_type: String,
    pub prompt: String,
    pub context: String,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInput {
    pub source_id: String,
    pub prefix: String,
    pub event_description: String,
    pub relation_description: String,
    pub masked_context: String,
    pub mask_positions: Vec<Range<usize>>,
    pub rendered: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub event_description: String,
    pub generated_text: String,
    pub rendered: String,
}

/// One filled template recovered from an answered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedEvent {
    pub trigger: String,
    pub arguments: Vec<(String, String)>,
}

pub fn type_instruction(event_type: &str) -> String {
    format!("Event type is {event_type} .")
}

pub fn build_extraction_input(
    schema: &EventSchema,
    event_type: &str,
    context: &str,
) -> Result<ExtractionInput> {
    let template = schema
        .template(event_type)
        .ok_or_else(|| Error::InvalidInput(format!("unknown event type `{event_type}`")))?;
    if context.trim().is_empty() {
        return Err(Error::InvalidInput("extraction context is empty".into()));
    }
    let prompt = format!("{} {}", type_instruction(event_type), template.as_str());
    let rendered = format!("{prompt} {SEP} {context}");
    Ok(ExtractionInput {
        event_type: event_type.to_string(),
        prompt,
        context: context.to_string(),
        rendered,
    })
}

/// Arguments of `record` grouped in schema role order; roles unknown to the
/// schema trail in record order.
fn arguments_in_schema_order<'a>(
    schema: &EventSchema,
    record: &'a EventRecord,
) -> Vec<(&'a str, &'a str)> {
    let roles = schema.roles(&record.event_type).unwrap_or(&[]);
    let mut out = Vec::with_capacity(record.arguments.len());
    for role in roles {
        for arg in record.arguments.iter().filter(|a| &a.role == role) {
            out.push((arg.role.as_str(), arg.span.text.as_str()));
        }
    }
    for arg in record.arguments.iter().filter(|a| !roles.contains(&a.role)) {
        out.push((arg.role.as_str(), arg.span.text.as_str()));
    }
    out
}

/// Event description: a trigger clause per record, then one clause per
/// argument in schema role order.
pub fn render_event_description(schema: &EventSchema, records: &[EventRecord]) -> String {
    let mut clauses = Vec::new();
    for record in records {
        clauses.push(format!(
            "{} is the trigger of the {} event .",
            record.trigger.text, record.event_type
        ));
        for (role, text) in arguments_in_schema_order(schema, record) {
            clauses.push(format!("{text} is the {role} ."));
        }
    }
    clauses.join(" ")
}

pub fn render_relation_description(relations: &[Relation]) -> String {
    relations
        .iter()
        .map(|r| format!("{} has relation {} with {} .", r.head, r.relation, r.tail))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Recover the trigger and argument strings named by an event description.
pub fn parse_event_description(description: &str) -> Vec<String> {
    let body = description.trim();
    let body = body.strip_suffix(" .").or_else(|| body.strip_suffix('.')).unwrap_or(body);
    body.split(" . ")
        .filter_map(|clause| {
            let clause = clause.trim();
            if let Some((text, rest)) = clause.rsplit_once(" is the trigger of the ") {
                rest.ends_with(" event").then(|| text.to_string())
            } else {
                clause.rsplit_once(" is the ").map(|(text, _)| text.to_string())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedContext {
    pub text: String,
    pub positions: Vec<Range<usize>>,
}

/// Whitespace tokens of `text` with their character ranges.
pub fn tokens_with_offsets(text: &str) -> Vec<(Range<usize>, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    let mut char_pos = 0;
    for (byte, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                out.push((cs..char_pos, &text[bs..byte]));
            }
        } else if start.is_none() {
            start = Some((char_pos, byte));
        }
        char_pos += 1;
    }
    if let Some((cs, bs)) = start {
        out.push((cs..char_pos, &text[bs..]));
    }
    out
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Replace whitespace tokens by [`MASK`] independently with probability
/// `rate`. One uniform is drawn per token, protected or not, so toggling
/// protection never shifts the random stream.
pub fn mask_context<R: Rng + ?Sized>(
    context: &str,
    records: &[EventRecord],
    rate: f64,
    rng: &mut R,
    protect_event_tokens: bool,
) -> Result<MaskedContext> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("mask rate {rate} outside [0, 1]")));
    }
    let protected: Vec<Range<usize>> = if protect_event_tokens {
        records
            .iter()
            .flat_map(|r| {
                std::iter::once(r.trigger.start..r.trigger.end)
                    .chain(r.arguments.iter().map(|a| a.span.start..a.span.end))
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut positions = Vec::new();
    for (range, _) in tokens_with_offsets(context) {
        let draw: f64 = rng.gen();
        if draw < rate && !protected.iter().any(|p| overlaps(p, &range)) {
            positions.push(range);
        }
    }
    let mut text = String::with_capacity(context.len());
    let mut pending = positions.iter().peekable();
    let mut skip_until = None;
    for (i, ch) in context.chars().enumerate() {
        if let Some(end) = skip_until {
            if i < end {
                continue;
            }
            skip_until = None;
        }
        if let Some(r) = pending.peek() {
            if r.start == i {
                text.push_str(MASK);
                skip_until = Some(r.end);
                pending.next();
                continue;
            }
        }
        text.push(ch);
    }
    Ok(MaskedContext { text, positions })
}

pub fn build_generation_input<R: Rng + ?Sized>(
    schema: &EventSchema,
    sentence: &AnnotatedSentence,
    mask_rate: f64,
    rng: &mut R,
    protect_event_tokens: bool,
) -> Result<GenerationInput> {
    if sentence.records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "sentence `{}` has no event records to describe",
            sentence.id
        )));
    }
    let event_description = render_event_description(schema, &sentence.records);
    let relation_description = render_relation_description(&sentence.relations);
    let masked = mask_context(
        &sentence.context,
        &sentence.records,
        mask_rate,
        rng,
        protect_event_tokens,
    )?;
    let rendered = [
        GENERATION_PREFIX,
        &event_description,
        &relation_description,
        &masked.text,
    ]
    .iter()
    .filter(|p| !p.is_empty())
    .copied()
    .collect::<Vec<_>>()
    .join(" ");
    Ok(GenerationInput {
        source_id: sentence.id.clone(),
        prefix: GENERATION_PREFIX.to_string(),
        event_description,
        relation_description,
        masked_context: masked.text,
        mask_positions: masked.positions,
        rendered,
        target: sentence.context.clone(),
    })
}

pub fn build_policy_input(event_description: &str, generated_text: &str) -> Result<PolicyInput> {
    if event_description.trim().is_empty() || generated_text.trim().is_empty() {
        return Err(Error::InvalidInput(
            "policy input needs a non-empty description and generated text".into(),
        ));
    }
    Ok(PolicyInput {
        event_description: event_description.to_string(),
        generated_text: generated_text.to_string(),
        rendered: format!("{event_description} {SEP} {generated_text}"),
    })
}

/// Fill a type's template from a record; absent roles get [`NULL_SLOT`].
pub fn fill_template(schema: &EventSchema, record: &EventRecord) -> Result<String> {
    let template = schema
        .template(&record.event_type)
        .ok_or_else(|| Error::InvalidInput(format!("unknown event type `{}`", record.event_type)))?;
    let mut out = String::new();
    for part in template.parts() {
        match part {
            TemplatePart::Literal(s) => out.push_str(s),
            TemplatePart::Slot(slot) if slot == TRIGGER_SLOT => out.push_str(&record.trigger.text),
            TemplatePart::Slot(role) => {
                let fillers: Vec<&str> = record
                    .arguments
                    .iter()
                    .filter(|a| &a.role == role)
                    .map(|a| a.span.text.as_str())
                    .collect();
                if fillers.is_empty() {
                    out.push_str(NULL_SLOT);
                } else {
                    out.push_str(&fillers.join(MULTI_VALUE_SEP));
                }
            }
        }
    }
    Ok(out)
}

fn template_regex(schema: &EventSchema, event_type: &str) -> Result<(Regex, Vec<String>)> {
    let template = schema
        .template(event_type)
        .ok_or_else(|| Error::InvalidInput(format!("unknown event type `{event_type}`")))?;
    let mut pattern = String::from("(?s)^");
    let mut slots = Vec::new();
    for part in template.parts() {
        match part {
            TemplatePart::Literal(s) => pattern.push_str(&regex::escape(s)),
            TemplatePart::Slot(name) => {
                pattern.push_str("(.+?)");
                slots.push(name.clone());
            }
        }
    }
    pattern.push('$');
    let re = Regex::new(&pattern).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((re, slots))
}

fn is_null_filler(filler: &str, slot: &str) -> bool {
    let f = filler.trim();
    f.is_empty() || f == NULL_SLOT || f == format!("<{slot}>")
}

/// Align an answered prompt against the type's template and read back the
/// slot fillers. Instances that do not fit the template, or whose trigger is
/// unfilled, are dropped.
pub fn parse_answered_prompt(
    answered: &str,
    schema: &EventSchema,
    event_type: &str,
) -> Result<Vec<ParsedEvent>> {
    let (re, slots) = template_regex(schema, event_type)?;
    let mut out = Vec::new();
    for instance in answered.split(INSTANCE_SEP) {
        let Some(caps) = re.captures(instance.trim()) else {
            continue;
        };
        let mut event = ParsedEvent::default();
        let mut has_trigger = false;
        for (i, slot) in slots.iter().enumerate() {
            let filler = caps.get(i + 1).map_or("", |m| m.as_str()).trim();
            if is_null_filler(filler, slot) {
                continue;
            }
            if slot == TRIGGER_SLOT {
                event.trigger = filler.to_string();
                has_trigger = true;
            } else if schema.is_multi_valued(event_type, slot) {
                for f in filler.split(MULTI_VALUE_SEP) {
                    if !is_null_filler(f, slot) {
                        event.arguments.push((slot.clone(), f.trim().to_string()));
                    }
                }
            } else {
                event.arguments.push((slot.clone(), filler.to_string()));
            }
        }
        if has_trigger {
            out.push(event);
        }
    }
    Ok(out)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Character ranges of every occurrence of `needle` in `haystack`, left to right.
pub fn find_occurrences(haystack: &str, needle: &str) -> Vec<Range<usize>> {
    if needle.is_empty() {
        return Vec::new();
    }
    let len = needle.chars().count();
    let mut out = Vec::new();
    let mut char_pos = 0;
    let mut last_byte = 0;
    let mut search = 0;
    while let Some(found) = haystack[search..].find(needle) {
        let byte = search + found;
        char_pos += haystack[last_byte..byte].chars().count();
        last_byte = byte;
        out.push(char_pos..char_pos + len);
        let step = haystack[byte..].chars().next().map_or(1, char::len_utf8);
        search = byte + step;
    }
    out
}

/// Occurrences whose neighbours are not word characters.
pub fn find_word_occurrences(haystack: &str, needle: &str) -> Vec<Range<usize>> {
    let chars: Vec<char> = haystack.chars().collect();
    let first_is_word = needle.chars().next().is_some_and(is_word_char);
    let last_is_word = needle.chars().last().is_some_and(is_word_char);
    find_occurrences(haystack, needle)
        .into_iter()
        .filter(|r| {
            let before_ok = !first_is_word || r.start == 0 || !is_word_char(chars[r.start - 1]);
            let after_ok = !last_is_word || r.end == chars.len() || !is_word_char(chars[r.end]);
            before_ok && after_ok
        })
        .collect()
}

/// True when `phrase` occurs in `text` on word boundaries.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    !phrase.is_empty() && !find_word_occurrences(text, phrase).is_empty()
}

fn gap(a: &Range<usize>, b: &Range<usize>) -> usize {
    if a.end <= b.start {
        b.start - a.end
    } else if b.end <= a.start {
        a.start - b.end
    } else {
        0
    }
}

/// Maps predicted strings back to character offsets in one context.
///
/// Unanchored lookups (triggers) consume the occurrence they return, so two
/// identical triggers decode to successive positions. Anchored lookups
/// (arguments) return the occurrence nearest the anchor and consume nothing.
#[derive(Debug, Clone)]
pub struct OffsetDecoder<'a> {
    context: &'a str,
    consumed: BTreeSet<(usize, usize)>,
}

impl<'a> OffsetDecoder<'a> {
    pub fn new(context: &'a str) -> Self {
        OffsetDecoder {
            context,
            consumed: BTreeSet::new(),
        }
    }

    fn candidates(&self, filler: &str) -> Vec<Range<usize>> {
        let word = find_word_occurrences(self.context, filler);
        if word.is_empty() {
            find_occurrences(self.context, filler)
        } else {
            word
        }
    }

    pub fn decode(&mut self, filler: &str, anchor: Option<&Span>) -> Option<Span> {
        let filler = filler.trim();
        if filler.is_empty() {
            return None;
        }
        let candidates = self.candidates(filler);
        let chosen = match anchor {
            None => {
                let r = candidates
                    .into_iter()
                    .find(|r| !self.consumed.contains(&(r.start, r.end)))?;
                self.consumed.insert((r.start, r.end));
                r
            }
            Some(anchor) => {
                let a = anchor.start..anchor.end;
                candidates.into_iter().min_by_key(|r| (gap(r, &a), r.start))?
            }
        };
        Some(Span::new(filler, chosen.start, chosen.end))
    }
}

/// Single lookup with a fresh decoder.
pub fn decode_offsets(filler: &str, context: &str, anchor: Option<&Span>) -> Option<Span> {
    OffsetDecoder::new(context).decode(filler, anchor)
}
