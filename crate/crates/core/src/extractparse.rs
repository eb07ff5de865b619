//! Turn generated text back into token-level BIO tags.
//!
//! [`parse_extractions`] is total: whatever a model emits, it returns the
//! well-formed `"<surface>" is <label>` lines it could read and counts the
//! rest as warnings. [`align_to_bio`] then locates each surface in the
//! sentence by case-insensitive whole-token matching and tags every
//! non-overlapping occurrence.
//!
//! ```
//! use pico_icl::corpus::{LabeledSentence, LabelScheme, Split, BioTag};
//! use pico_icl::extractparse::{align_to_bio, parse_extractions};
//!
//! let s = LabeledSentence::from_texts("s1", &["Budesonide", "in", "rhinitis"], vec![BioTag::O; 3], Split::Test).unwrap();
//! let parsed = parse_extractions("\"budesonide\" is Intervention\nsure, here you go", &LabelScheme::pico());
//! assert_eq!(parsed.warnings, 1);
//! let aligned = align_to_bio(&parsed.extractions, &s);
//! assert_eq!(aligned.tags[0].to_string(), "B-Interventions");
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    bio_to_spans, is_well_formed, BioTag, Coarse, Label, LabelLookupError, LabelScheme, LabeledSentence,
};
use crate::instructgen::{serialize_extractions, NO_ENTITIES};

/// One `(surface, label)` pair read from model output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extraction {
    pub surface: String,
    pub label: Coarse,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub extractions: Vec<Extraction>,
    pub warnings: usize,
}

/// Read extraction lines. Quotes around the surface are optional, the label
/// is matched case-insensitively and fine labels collapse to their parent.
/// Blank lines and the `no entities` sentinel are skipped silently; any
/// other unreadable line counts one warning. Parsing stops at a line that
/// starts a new `input:` block, which models sometimes hallucinate after
/// their answer.
pub fn parse_extractions(text: &str, scheme: &LabelScheme) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.to_ascii_lowercase().starts_with("input:") {
            out.warnings += 1;
            break;
        }
        let line = strip_bullet(line);
        if is_sentinel(line) {
            continue;
        }
        match parse_line(line, scheme) {
            Some(e) => out.extractions.push(e),
            None => out.warnings += 1,
        }
    }
    out
}

fn is_sentinel(line: &str) -> bool {
    line.trim_end_matches('.').eq_ignore_ascii_case(NO_ENTITIES)
}

fn strip_bullet(line: &str) -> &str {
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    line
}

fn parse_line(line: &str, scheme: &LabelScheme) -> Option<Extraction> {
    let (surface, label) = if let Some(quoted) = line.strip_prefix('"') {
        let idx = rfind_ci(quoted, "\" is ")?;
        (&quoted[..idx], &quoted[idx + 5..])
    } else {
        let idx = rfind_ci(line, " is ")?;
        (&line[..idx], &line[idx + 4..])
    };
    let surface = surface.split_whitespace().collect::<Vec<_>>().join(" ");
    if surface.is_empty() {
        return None;
    }
    let label = label.trim().trim_end_matches(['.', ',', ';']).trim_matches('"').trim();
    let label = match scheme.resolve(label) {
        Ok(l) => l.parent(),
        Err(LabelLookupError::Ambiguous(hits)) => {
            // Ambiguous fine labels only matter when the parents differ.
            let parent = hits[0].parent();
            if hits.iter().all(|h| h.parent() == parent) {
                parent
            } else {
                return None;
            }
        }
        Err(LabelLookupError::Unknown) => return None,
    };
    Some(Extraction { surface, label })
}

/// Last occurrence of an ASCII needle, ignoring ASCII case.
fn rfind_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).rev().find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Token-level prediction for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPrediction {
    pub sentence_id: String,
    pub tags: Vec<BioTag>,
    /// Extractions that ended up tagging no token, either because the surface
    /// does not occur in the sentence or because every occurrence lost to a
    /// higher-precedence extraction.
    pub unmatched: Vec<Extraction>,
    pub parse_warnings: usize,
}

impl AlignedPrediction {
    /// A prediction with every token outside any entity.
    pub fn all_outside(sentence: &LabeledSentence) -> Self {
        AlignedPrediction {
            sentence_id: sentence.id().to_string(),
            tags: vec![BioTag::O; sentence.len()],
            unmatched: Vec::new(),
            parse_warnings: 0,
        }
    }
}

fn fold(s: &str) -> String {
    s.to_lowercase()
}

/// Start positions of every whole-token occurrence of `needle` in `hay`.
pub fn find_occurrences(hay: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len()).filter(|&i| hay[i..i + needle.len()] == *needle).collect()
}

/// Tag the sentence with the extractions. Precedence when two extractions
/// compete for a token: the longer surface (in characters) wins, ties go to
/// the extraction listed first. Within one extraction occurrences are
/// claimed leftmost-first and an occurrence that would overlap an earlier
/// claim is skipped whole.
pub fn align_to_bio(extractions: &[Extraction], sentence: &LabeledSentence) -> AlignedPrediction {
    let hay: Vec<String> = sentence.tokens().iter().map(|t| fold(&t.text)).collect();
    let mut seen = HashSet::new();
    let mut order: Vec<(usize, &Extraction, Vec<String>)> = Vec::new();
    for (i, e) in extractions.iter().enumerate() {
        let needle: Vec<String> = e.surface.split_whitespace().map(fold).collect();
        if seen.insert((needle.clone(), e.label)) {
            order.push((i, e, needle));
        }
    }
    order.sort_by(|a, b| {
        let la = a.2.iter().map(|t| t.chars().count()).sum::<usize>() + a.2.len();
        let lb = b.2.iter().map(|t| t.chars().count()).sum::<usize>() + b.2.len();
        lb.cmp(&la).then(a.0.cmp(&b.0))
    });

    let mut claimed: Vec<Option<usize>> = vec![None; hay.len()];
    let mut tags = vec![BioTag::O; hay.len()];
    let mut tagged_any = vec![false; extractions.len()];
    for (idx, e, needle) in &order {
        for start in find_occurrences(&hay, needle) {
            let range = start..start + needle.len();
            if range.clone().any(|i| claimed[i].is_some()) {
                continue;
            }
            let label = Label::coarse(e.label);
            for i in range {
                claimed[i] = Some(*idx);
                tags[i] = if i == start { BioTag::B(label.clone()) } else { BioTag::I(label.clone()) };
            }
            tagged_any[*idx] = true;
        }
    }
    let unmatched = order
        .iter()
        .filter(|(idx, _, _)| !tagged_any[*idx])
        .map(|(idx, _, _)| (*idx, extractions[*idx].clone()))
        .collect::<std::collections::BTreeMap<_, _>>()
        .into_values()
        .collect();
    debug_assert!(is_well_formed(&tags));
    AlignedPrediction { sentence_id: sentence.id().to_string(), tags, unmatched, parse_warnings: 0 }
}

/// Parse and align in one step.
pub fn predict_from_text(text: &str, sentence: &LabeledSentence, scheme: &LabelScheme) -> AlignedPrediction {
    let parsed = parse_extractions(text, scheme);
    let mut aligned = align_to_bio(&parsed.extractions, sentence);
    aligned.parse_warnings = parsed.warnings;
    aligned
}

/// Why a sentence cannot be reproduced through the text round trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub sentence_id: String,
    pub reason: String,
}

/// Check that serializing a coarse-labeled sentence's gold spans, parsing the
/// text back and aligning it reproduces the gold tags. Sentences whose gold
/// surfaces also occur at unlabeled positions (or under another label) fail
/// this check and would be mis-scored by the text pathway even with perfect
/// generations.
pub fn audit_sentence(sentence: &LabeledSentence, scheme: &LabelScheme) -> Option<AuditFinding> {
    let spans = bio_to_spans(sentence);
    let text = serialize_extractions(&spans);
    let pred = predict_from_text(&text, sentence, scheme);
    let gold: Vec<BioTag> = sentence
        .tags()
        .iter()
        .map(|t| match t {
            BioTag::O => BioTag::O,
            BioTag::B(l) => BioTag::B(l.to_coarse()),
            BioTag::I(l) => BioTag::I(l.to_coarse()),
        })
        .collect();
    if pred.tags == gold {
        return None;
    }
    let hay: Vec<String> = sentence.tokens().iter().map(|t| fold(&t.text)).collect();
    let mut reasons = Vec::new();
    for span in &spans {
        let needle: Vec<String> = span.surface.split_whitespace().map(fold).collect();
        let occ = find_occurrences(&hay, &needle);
        let labeled = spans.iter().filter(|s| fold(&s.surface) == fold(&span.surface)).count();
        if occ.len() != labeled {
            reasons.push(format!("\"{}\" occurs {} times but is labeled {} times", span.surface, occ.len(), labeled));
        }
    }
    if pred.parse_warnings > 0 {
        reasons.push(format!("{} serialized lines failed to parse", pred.parse_warnings));
    }
    if reasons.is_empty() {
        reasons.push("overlapping or conflicting surfaces".to_string());
    }
    reasons.dedup();
    Some(AuditFinding { sentence_id: sentence.id().to_string(), reason: reasons.join("; ") })
}
