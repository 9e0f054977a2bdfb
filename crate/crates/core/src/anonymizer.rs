// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rule-based PII detection and placeholder substitution.
//!
//! Detection combines regular expressions (emails, phone numbers, IDs, dates)
//! with dictionary matching against the corpus entity pools. Overlapping hits
//! are resolved in favour of the earliest, then longest, span.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    EntityCategory, QARecord, CITIES, DOMAIN_ORGS, FIRST_NAMES, LAST_NAMES, LEGACY_ORGS, MONTHS,
};

/// A detected PII span; `start..end` are byte offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PiiSpan {
    pub start: usize,
    pub end: usize,
    pub category: EntityCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderPair {
    pub category: EntityCategory,
    pub text: String,
}

/// Output of [`anonymize`]. The placeholder map never travels with the
/// anonymized text; see [`AnonymizedRecord::split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnonymizedRecord {
    pub original_id: String,
    pub anon_question: String,
    pub anon_answer: String,
    pub placeholder_map: Vec<PlaceholderPair>,
}

/// Anonymized text as persisted and fed to models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonText {
    pub original_id: String,
    pub anon_question: String,
    pub anon_answer: String,
}

impl AnonText {
    pub fn full_text(&self) -> String {
        format!("{} {}", self.anon_question, self.anon_answer)
    }
}

/// Sidecar row holding the placeholder map for test oracles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderSidecar {
    pub original_id: String,
    pub pairs: Vec<PlaceholderPair>,
}

impl AnonymizedRecord {
    pub fn split(self) -> (AnonText, PlaceholderSidecar) {
        (
            AnonText {
                original_id: self.original_id.clone(),
                anon_question: self.anon_question,
                anon_answer: self.anon_answer,
            },
            PlaceholderSidecar {
                original_id: self.original_id,
                pairs: self.placeholder_map,
            },
        )
    }
}

struct Detector {
    rules: Vec<(Regex, EntityCategory)>,
}

fn alternation(items: impl IntoIterator<Item = String>) -> String {
    let mut items: Vec<String> = items.into_iter().map(|s| regex::escape(&s)).collect();
    items.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    items.dedup();
    items.join("|")
}

fn detector() -> &'static Detector {
    static DETECTOR: OnceLock<Detector> = OnceLock::new();
    DETECTOR.get_or_init(|| {
        let firsts = alternation(FIRST_NAMES.iter().map(|s| s.to_string()));
        let lasts = alternation(LAST_NAMES.iter().map(|s| s.to_string()));
        let orgs = alternation(
            DOMAIN_ORGS
                .iter()
                .flat_map(|d| d.iter())
                .chain(LEGACY_ORGS.iter())
                .map(|s| s.to_string()),
        );
        let cities = alternation(CITIES.iter().map(|s| s.to_string()));
        let months = MONTHS.join("|");
        let rules = vec![
            (
                r"[\p{L}\p{N}._%+-]+@[\p{L}\p{N}-]+(?:\.[\p{L}\p{N}-]+)*\.\p{L}{2,}".to_string(),
                EntityCategory::Email,
            ),
            (r"\b\d{3}-\d{3}-\d{4}\b".to_string(), EntityCategory::Phone),
            (r"\b[A-Z]{2,4}-\d{3,6}\b".to_string(), EntityCategory::Id),
            (format!(r"\b\d{{1,2}} (?:{months}) \d{{4}}\b"), EntityCategory::Date),
            (format!(r"\b(?:{orgs})\b"), EntityCategory::Org),
            (
                format!(r"\b(?:(?:{firsts})\s+(?:{lasts})|{firsts}|{lasts})\b"),
                EntityCategory::Person,
            ),
            (format!(r"\b(?:{cities})\b"), EntityCategory::Location),
        ];
        Detector {
            rules: rules
                .into_iter()
                .map(|(re, c)| (Regex::new(&re).expect("detector regex"), c))
                .collect(),
        }
    })
}

/// Detects PII spans: sorted by start and non-overlapping.
pub fn detect_pii(text: &str) -> Vec<PiiSpan> {
    let mut hits: Vec<PiiSpan> = Vec::new();
    for (re, category) in &detector().rules {
        for m in re.find_iter(text) {
            hits.push(PiiSpan {
                start: m.start(),
                end: m.end(),
                category: *category,
            });
        }
    }
    hits.sort_by(|a, b| a.start.cmp(&b.start).then((b.end - b.start).cmp(&(a.end - a.start))));
    let mut out: Vec<PiiSpan> = Vec::new();
    for h in hits {
        if out.last().is_none_or(|last| h.start >= last.end) {
            out.push(h);
        }
    }
    out
}

/// Assigns placeholder tags to the distinct entities found across `texts`.
///
/// A category with a single distinct entity gets `<CAT>`; repeated categories
/// are numbered `<CAT_1>`, `<CAT_2>`, ... in order of first appearance.
fn assign_placeholders(texts: &[&str]) -> (Vec<Vec<PiiSpan>>, BTreeMap<(EntityCategory, String), String>, Vec<PlaceholderPair>) {
    let spans: Vec<Vec<PiiSpan>> = texts.iter().map(|t| detect_pii(t)).collect();
    let mut order: Vec<PlaceholderPair> = Vec::new();
    for (t, ss) in texts.iter().zip(&spans) {
        for s in ss {
            let pair = PlaceholderPair {
                category: s.category,
                text: t[s.start..s.end].to_string(),
            };
            if !order.contains(&pair) {
                order.push(pair);
            }
        }
    }
    let mut per_category: BTreeMap<EntityCategory, usize> = BTreeMap::new();
    for p in &order {
        *per_category.entry(p.category).or_default() += 1;
    }
    let mut seen: BTreeMap<EntityCategory, usize> = BTreeMap::new();
    let mut tags = BTreeMap::new();
    for p in &order {
        let tag = if per_category[&p.category] == 1 {
            format!("<{}>", p.category.tag())
        } else {
            let n = seen.entry(p.category).or_default();
            *n += 1;
            format!("<{}_{}>", p.category.tag(), n)
        };
        tags.insert((p.category, p.text.clone()), tag);
    }
    (spans, tags, order)
}

fn substitute(text: &str, spans: &[PiiSpan], tags: &BTreeMap<(EntityCategory, String), String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for s in spans {
        out.push_str(&text[cursor..s.start]);
        out.push_str(&tags[&(s.category, text[s.start..s.end].to_string())]);
        cursor = s.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Anonymizes free text on its own (numbering is local to `text`).
pub fn anonymize_text(text: &str) -> String {
    let (spans, tags, _) = assign_placeholders(&[text]);
    substitute(text, &spans[0], &tags)
}

/// Replaces every detected PII span in question and answer with a
/// placeholder tag; numbering is shared across both fields.
pub fn anonymize(record: &QARecord) -> AnonymizedRecord {
    anonymize_pair(&record.id, &record.question, &record.answer)
}

pub fn anonymize_pair(id: &str, question: &str, answer: &str) -> AnonymizedRecord {
    let (spans, tags, order) = assign_placeholders(&[question, answer]);
    AnonymizedRecord {
        original_id: id.to_string(),
        anon_question: substitute(question, &spans[0], &tags),
        anon_answer: substitute(answer, &spans[1], &tags),
        placeholder_map: order,
    }
}

/// Every pooled entity string the detector knows about.
pub fn pooled_entity_strings() -> Vec<String> {
    FIRST_NAMES
        .iter()
        .chain(LAST_NAMES)
        .chain(CITIES)
        .chain(LEGACY_ORGS)
        .chain(DOMAIN_ORGS.iter().flat_map(|d| d.iter()))
        .map(|s| s.to_string())
        .collect()
}

/// Pooled entity strings that still occur (on word boundaries) in `text`.
pub fn leaked_entities(text: &str) -> Vec<String> {
    static POOL: OnceLock<Regex> = OnceLock::new();
    let re = POOL.get_or_init(|| {
        Regex::new(&format!(r"\b(?:{})\b", alternation(pooled_entity_strings()))).expect("pool regex")
    });
    re.find_iter(text).map(|m| m.as_str().to_string()).collect()
}
