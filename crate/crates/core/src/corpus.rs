//! Tokens, typed BIO tags, entity spans and the PICO label scheme.
//!
//! Corpora arrive pre-tokenized in a two-column CoNLL layout (`token tag`,
//! blank line between sentences). Tags are `O`, `B-<label>` or `I-<label>`
//! where `<label>` is a coarse PICO class (`Participants`, `Interventions`,
//! `Outcomes`, or one of their aliases such as `PAR`) or a fine-grained
//! sub-type (`Drug`, `Age`, `Outcomes.Pain`, ...).
//!
//! ```
//! use pico_icl::corpus::{parse_conll, bio_to_spans, LabelScheme, Split};
//!
//! let raw = "Budesonide B-INT\nreduced O\nnasal B-OUT\nsymptoms I-OUT\n\n";
//! let parsed = parse_conll(raw.as_bytes(), &LabelScheme::pico(), Split::Test).unwrap();
//! let spans = bio_to_spans(&parsed.sentences[0]);
//! assert_eq!(spans.len(), 2);
//! assert_eq!(spans[1].surface, "nasal symptoms");
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: label `{label}` is ambiguous, qualify it with its parent (e.g. `{suggestion}`)")]
    AmbiguousLabel { line: usize, label: String, suggestion: String },
    #[error("line {line}: malformed tag `{tag}`")]
    MalformedTag { line: usize, tag: String },
    #[error("line {line}: expected `token tag`, found `{content}`")]
    MalformedLine { line: usize, content: String },
    #[error("label `{0}` is not part of the active label scheme")]
    LabelNotInScheme(String),
    #[error("sentence `{id}`: {tokens} tokens but {tags} tags")]
    LengthMismatch { id: String, tokens: usize, tags: usize },
    #[error("sentence `{id}`: I tag at position {position} does not continue an entity of the same label")]
    IllFormed { id: String, position: usize },
    #[error("span {start}..={end} is out of range for a sentence of {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("spans overlap at token {0}")]
    OverlappingSpans(usize),
    #[error("token {0} is empty or contains whitespace")]
    BadToken(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
}

/// The three top-level PICO classes. Comparators are folded into
/// interventions in every dataset this toolkit targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Coarse {
    Participants,
    Interventions,
    Outcomes,
}

impl Coarse {
    pub const ALL: [Coarse; 3] = [Coarse::Participants, Coarse::Interventions, Coarse::Outcomes];

    pub fn name(self) -> &'static str {
        match self {
            Coarse::Participants => "Participants",
            Coarse::Interventions => "Interventions",
            Coarse::Outcomes => "Outcomes",
        }
    }

    /// Three-letter abbreviation used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            Coarse::Participants => "PAR",
            Coarse::Interventions => "INT",
            Coarse::Outcomes => "OUT",
        }
    }

    /// Resolve a coarse class name or one of its common spellings.
    pub fn from_alias(name: &str) -> Option<Coarse> {
        match normalize_label_name(name).as_str() {
            "participants" | "participant" | "participation" | "population" | "par" | "p" => Some(Coarse::Participants),
            "interventions" | "intervention" | "int" | "i" => Some(Coarse::Interventions),
            "outcomes" | "outcome" | "out" | "o" => Some(Coarse::Outcomes),
            _ => None,
        }
    }
}

impl fmt::Display for Coarse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercase and fold `_`/`-` into spaces so `Sample_size`, `sample-size`
/// and `Sample size` compare equal.
pub(crate) fn normalize_label_name(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// A coarse class, optionally refined by a fine-grained sub-type.
///
/// Fine labels are always stored together with their parent, so the two
/// `Physical` and the two `Other` sub-types stay distinct.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    parent: Coarse,
    fine: Option<String>,
}

impl Label {
    pub fn coarse(parent: Coarse) -> Self {
        Label { parent, fine: None }
    }

    pub fn fine(parent: Coarse, name: impl Into<String>) -> Self {
        Label { parent, fine: Some(name.into()) }
    }

    pub fn parent(&self) -> Coarse {
        self.parent
    }

    pub fn fine_name(&self) -> Option<&str> {
        self.fine.as_deref()
    }

    pub fn is_coarse(&self) -> bool {
        self.fine.is_none()
    }

    pub fn to_coarse(&self) -> Label {
        Label::coarse(self.parent)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.fine {
            None => f.write_str(self.parent.name()),
            Some(fine) => write!(f, "{}.{}", self.parent.name(), fine),
        }
    }
}

impl From<Coarse> for Label {
    fn from(c: Coarse) -> Self {
        Label::coarse(c)
    }
}

/// Failure to resolve a label name against a scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelLookupError {
    Unknown,
    Ambiguous(Vec<Label>),
}

/// Coarse classes plus the fine-grained sub-types that roll up into them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    fine: Vec<Label>,
}

const PICO_FINE: &[(Coarse, &[&str])] = &[
    (Coarse::Participants, &["Age", "Sex", "Sample size", "Condition"]),
    (Coarse::Interventions, &["Surgical", "Physical", "Drug", "Educational", "Psychological", "Control", "Other"]),
    (Coarse::Outcomes, &["Physical", "Pain", "Mortality", "Adverse effects", "Mental", "Other"]),
];

impl LabelScheme {
    /// The hierarchical PICO scheme: three coarse classes with 17 sub-types.
    pub fn pico() -> Self {
        let fine =
            PICO_FINE.iter().flat_map(|(parent, names)| names.iter().map(move |n| Label::fine(*parent, *n))).collect();
        LabelScheme { fine }
    }

    /// Coarse classes only; any fine label is rejected.
    pub fn coarse_only() -> Self {
        LabelScheme { fine: Vec::new() }
    }

    pub fn coarse_labels(&self) -> impl Iterator<Item = Label> {
        Coarse::ALL.into_iter().map(Label::coarse)
    }

    pub fn fine_labels(&self) -> &[Label] {
        &self.fine
    }

    pub fn contains(&self, label: &Label) -> bool {
        label.is_coarse() || self.fine.contains(label)
    }

    /// Coarse parent of any label in the scheme.
    pub fn coarse_of(&self, label: &Label) -> Result<Coarse, CorpusError> {
        if self.contains(label) {
            Ok(label.parent())
        } else {
            Err(CorpusError::LabelNotInScheme(label.to_string()))
        }
    }

    /// Resolve a label name: coarse aliases, `Parent.Fine` qualified names,
    /// or bare fine names when they are unambiguous.
    pub fn resolve(&self, name: &str) -> Result<Label, LabelLookupError> {
        if let Some(c) = Coarse::from_alias(name) {
            return Ok(Label::coarse(c));
        }
        if let Some((parent, fine)) = name.split_once('.') {
            let parent = Coarse::from_alias(parent).ok_or(LabelLookupError::Unknown)?;
            let wanted = normalize_label_name(fine);
            return self
                .fine
                .iter()
                .find(|l| l.parent == parent && l.fine.as_deref().map(normalize_label_name) == Some(wanted.clone()))
                .cloned()
                .ok_or(LabelLookupError::Unknown);
        }
        let wanted = normalize_label_name(name);
        let hits: Vec<Label> = self
            .fine
            .iter()
            .filter(|l| l.fine.as_deref().map(normalize_label_name).as_deref() == Some(wanted.as_str()))
            .cloned()
            .collect();
        match hits.len() {
            0 => Err(LabelLookupError::Unknown),
            1 => Ok(hits.into_iter().next().unwrap()),
            _ => Err(LabelLookupError::Ambiguous(hits)),
        }
    }
}

impl Default for LabelScheme {
    fn default() -> Self {
        LabelScheme::pico()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    B,
    I,
    O,
}

/// A typed BIO tag. `O` never carries a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BioTag {
    O,
    B(Label),
    I(Label),
}

impl BioTag {
    pub fn kind(&self) -> TagKind {
        match self {
            BioTag::O => TagKind::O,
            BioTag::B(_) => TagKind::B,
            BioTag::I(_) => TagKind::I,
        }
    }

    pub fn label(&self) -> Option<&Label> {
        match self {
            BioTag::O => None,
            BioTag::B(l) | BioTag::I(l) => Some(l),
        }
    }

    fn map_label(&self, f: impl FnOnce(&Label) -> Label) -> BioTag {
        match self {
            BioTag::O => BioTag::O,
            BioTag::B(l) => BioTag::B(f(l)),
            BioTag::I(l) => BioTag::I(f(l)),
        }
    }

    /// Parse `O`, `B-<label>` or `I-<label>`; `line` is only used for errors.
    pub fn parse(raw: &str, scheme: &LabelScheme, line: usize) -> Result<BioTag, CorpusError> {
        let raw = raw.trim();
        if raw == "O" || raw == "o" {
            return Ok(BioTag::O);
        }
        let (prefix, name) =
            raw.split_once(['-', '_']).ok_or_else(|| CorpusError::MalformedTag { line, tag: raw.to_string() })?;
        let label = scheme.resolve(name).map_err(|e| match e {
            LabelLookupError::Unknown => CorpusError::UnknownLabel { line, label: name.to_string() },
            LabelLookupError::Ambiguous(hits) => {
                CorpusError::AmbiguousLabel { line, label: name.to_string(), suggestion: hits[0].to_string() }
            }
        })?;
        match prefix {
            "B" | "b" => Ok(BioTag::B(label)),
            "I" | "i" => Ok(BioTag::I(label)),
            _ => Err(CorpusError::MalformedTag { line, tag: raw.to_string() }),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(l) => write!(f, "B-{l}"),
            BioTag::I(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = CorpusError;

    /// Parses against the full PICO scheme.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BioTag::parse(s, &LabelScheme::pico(), 0)
    }
}

impl Serialize for BioTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Is `tags` a valid BIO sequence (every I continues a B/I of the same label)?
pub fn is_well_formed(tags: &[BioTag]) -> bool {
    first_ill_formed(tags).is_none()
}

fn first_ill_formed(tags: &[BioTag]) -> Option<usize> {
    let mut prev: Option<&Label> = None;
    for (i, tag) in tags.iter().enumerate() {
        if let BioTag::I(l) = tag {
            if prev != Some(l) {
                return Some(i);
            }
        }
        prev = tag.label();
    }
    None
}

/// Promote every dangling I to a B of the same label. Returns the number of
/// tags rewritten.
pub fn repair_bio(tags: &mut [BioTag]) -> usize {
    let mut repairs = 0;
    let mut prev: Option<Label> = None;
    for tag in tags.iter_mut() {
        if let BioTag::I(l) = tag {
            if prev.as_ref() != Some(l) {
                *tag = BioTag::B(l.clone());
                repairs += 1;
            }
        }
        prev = tag.label().cloned();
    }
    repairs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

impl Token {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Vec<Token> {
        texts.iter().enumerate().map(|(index, t)| Token { text: t.as_ref().to_string(), index }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "dev" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A tokenized sentence with one BIO tag per token.
///
/// Construction validates the length and BIO invariants, so every value of
/// this type is well-formed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledSentence {
    #[serde(rename = "id")]
    sentence_id: String,
    #[serde(serialize_with = "serialize_token_texts")]
    tokens: Vec<Token>,
    tags: Vec<BioTag>,
    split: Split,
}

fn serialize_token_texts<S: Serializer>(tokens: &[Token], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(tokens.iter().map(|t| t.text.as_str()))
}

#[derive(Deserialize)]
struct SentenceRecord {
    id: String,
    tokens: Vec<String>,
    tags: Vec<BioTag>,
    split: Split,
}

impl<'de> Deserialize<'de> for LabeledSentence {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = SentenceRecord::deserialize(deserializer)?;
        LabeledSentence::new(rec.id, Token::from_texts(&rec.tokens), rec.tags, rec.split)
            .map_err(serde::de::Error::custom)
    }
}

impl LabeledSentence {
    pub fn new(
        sentence_id: impl Into<String>,
        tokens: Vec<Token>,
        tags: Vec<BioTag>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        let sentence_id = sentence_id.into();
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch { id: sentence_id, tokens: tokens.len(), tags: tags.len() });
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.index != i || t.text.is_empty() || t.text.chars().any(char::is_whitespace) {
                return Err(CorpusError::BadToken(i));
            }
        }
        if let Some(position) = first_ill_formed(&tags) {
            return Err(CorpusError::IllFormed { id: sentence_id, position });
        }
        Ok(LabeledSentence { sentence_id, tokens, tags, split })
    }

    /// Convenience constructor from token strings.
    pub fn from_texts<S: AsRef<str>>(
        sentence_id: impl Into<String>,
        texts: &[S],
        tags: Vec<BioTag>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        LabeledSentence::new(sentence_id, Token::from_texts(texts), tags, split)
    }

    pub fn id(&self) -> &str {
        &self.sentence_id
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn tags(&self) -> &[BioTag] {
        &self.tags
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens).text
    }

    /// Same tokens, different (validated) tags.
    pub fn with_tags(&self, tags: Vec<BioTag>) -> Result<LabeledSentence, CorpusError> {
        LabeledSentence::new(self.sentence_id.clone(), self.tokens.clone(), tags, self.split)
    }
}

/// A maximal run of tokens carrying one label. `start` and `end` are
/// inclusive token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub surface: String,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LabelScheme::pico().resolve(&s).map_err(|_| serde::de::Error::custom(format!("unknown label `{s}`")))
    }
}

/// Extract the entity spans of a well-formed sentence, ordered by start.
pub fn bio_to_spans(s: &LabeledSentence) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, Label)> = None;
    let close = |spans: &mut Vec<EntitySpan>, start: usize, end: usize, label: Label| {
        let surface = s.tokens[start..=end].iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
        spans.push(EntitySpan { start, end, label, surface });
    };
    for (i, tag) in s.tags.iter().enumerate() {
        match tag {
            BioTag::I(_) => {}
            BioTag::B(l) => {
                if let Some((start, label)) = open.take() {
                    close(&mut spans, start, i - 1, label);
                }
                open = Some((i, l.clone()));
            }
            BioTag::O => {
                if let Some((start, label)) = open.take() {
                    close(&mut spans, start, i - 1, label);
                }
            }
        }
    }
    if let Some((start, label)) = open {
        close(&mut spans, start, s.tags.len() - 1, label);
    }
    spans
}

/// Inverse of [`bio_to_spans`] over positions and labels.
pub fn spans_to_bio(spans: &[EntitySpan], length: usize) -> Result<Vec<BioTag>, CorpusError> {
    let mut tags = vec![BioTag::O; length];
    let mut taken = vec![false; length];
    for span in spans {
        if span.start > span.end || span.end >= length {
            return Err(CorpusError::SpanOutOfRange { start: span.start, end: span.end, len: length });
        }
        for i in span.start..=span.end {
            if taken[i] {
                return Err(CorpusError::OverlappingSpans(i));
            }
            taken[i] = true;
            tags[i] = if i == span.start { BioTag::B(span.label.clone()) } else { BioTag::I(span.label.clone()) };
        }
    }
    Ok(tags)
}

/// Replace every fine label by its coarse parent, keeping B/I kinds (so two
/// adjacent fine spans stay two coarse spans).
pub fn map_fine_to_coarse(s: &LabeledSentence, scheme: &LabelScheme) -> Result<LabeledSentence, CorpusError> {
    let tags = s
        .tags
        .iter()
        .map(|t| {
            if let Some(l) = t.label() {
                scheme.coarse_of(l)?;
            }
            Ok(t.map_label(Label::to_coarse))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    s.with_tags(tags)
}

/// Sentence text plus the character range of every token within it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    pub offsets: Vec<Range<usize>>,
}

/// Single-space join. Offsets count characters, not bytes.
pub fn detokenize(tokens: &[Token]) -> Detokenized {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut chars = 0;
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            chars += 1;
        }
        let n = t.text.chars().count();
        offsets.push(chars..chars + n);
        text.push_str(&t.text);
        chars += n;
    }
    Detokenized { text, offsets }
}

/// Result of reading one CoNLL stream.
#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub sentences: Vec<LabeledSentence>,
    /// Dangling I tags promoted to B.
    pub repairs: usize,
    /// Ids of the sentences that needed at least one repair.
    pub repaired_sentences: Vec<String>,
}

/// Read a two-column CoNLL stream. Columns are separated by a tab, or by the
/// first run of whitespace when the line has no tab. Lines starting with
/// `-DOCSTART-` act as sentence separators. Sentence ids are
/// `<split>-<ordinal>`.
pub fn parse_conll<R: io::Read>(raw: R, scheme: &LabelScheme, split: Split) -> Result<ParsedCorpus, CorpusError> {
    let reader = BufReader::new(raw);
    let mut out = ParsedCorpus::default();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<BioTag> = Vec::new();

    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<BioTag>, out: &mut ParsedCorpus| {
        if tokens.is_empty() {
            return;
        }
        let id = format!("{}-{}", split.name(), out.sentences.len());
        let n = repair_bio(tags);
        if n > 0 {
            out.repairs += n;
            out.repaired_sentences.push(id.clone());
        }
        let sentence = LabeledSentence::from_texts(id, tokens, std::mem::take(tags), split)
            .expect("repaired CoNLL sentence is well-formed");
        out.sentences.push(sentence);
        tokens.clear();
    };

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|source| CorpusError::Io { path: PathBuf::from("<stream>"), source })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags, &mut out);
            continue;
        }
        let (token, tag) = if let Some((tok, rest)) = trimmed.split_once('\t') {
            (tok.trim(), rest.trim())
        } else {
            match trimmed.split_once(char::is_whitespace) {
                Some((tok, rest)) => (tok, rest.trim()),
                None => {
                    return Err(CorpusError::MalformedLine { line: lineno, content: line.clone() });
                }
            }
        };
        if token.is_empty() || tag.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(CorpusError::MalformedLine { line: lineno, content: line.clone() });
        }
        tags.push(BioTag::parse(tag, scheme, lineno)?);
        tokens.push(token.to_string());
    }
    flush(&mut tokens, &mut tags, &mut out);
    Ok(out)
}

pub fn read_conll(path: &Path, scheme: &LabelScheme, split: Split) -> Result<ParsedCorpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_conll(file, scheme, split).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

/// Write sentences back out in two-column CoNLL form.
pub fn write_conll<W: Write>(mut w: W, sentences: &[LabeledSentence]) -> io::Result<()> {
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            writeln!(w, "{}\t{}", tok.text, tag)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Write the canonical one-sentence-per-line JSON record file.
pub fn write_records(path: &Path, sentences: &[LabeledSentence]) -> Result<usize, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        serde_json::to_writer(&mut w, s).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(sentences.len())
}

pub fn read_records(path: &Path) -> Result<Vec<LabeledSentence>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Span counts per label, for conversion statistics.
pub fn span_counts<'a>(sentences: impl IntoIterator<Item = &'a LabeledSentence>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for span in bio_to_spans(s) {
            *counts.entry(span.label.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse(c: Coarse) -> Label {
        Label::coarse(c)
    }

    fn parse(raw: &str) -> ParsedCorpus {
        parse_conll(raw.as_bytes(), &LabelScheme::pico(), Split::Train).unwrap()
    }

    #[test]
    fn minimal_sentence() {
        let p = parse("budesonide B-Interventions\n\n");
        assert_eq!(p.sentences.len(), 1);
        let s = &p.sentences[0];
        assert_eq!(s.tokens(), &[Token { text: "budesonide".into(), index: 0 }]);
        assert_eq!(s.tags(), &[BioTag::B(coarse(Coarse::Interventions))]);
        assert_eq!(p.repairs, 0);
    }

    #[test]
    fn three_sentences_get_consecutive_indices() {
        let p = parse("a O\nb B-PAR\n\nc O\n\n\nd B-OUT\ne I-OUT\nf O\n");
        assert_eq!(p.sentences.len(), 3);
        let ids: Vec<_> = p.sentences.iter().map(|s| s.id().to_string()).collect();
        assert_eq!(ids, ["train-0", "train-1", "train-2"]);
        for s in &p.sentences {
            for (i, t) in s.tokens().iter().enumerate() {
                assert_eq!(t.index, i);
            }
        }
    }

    #[test]
    fn empty_stream() {
        assert!(parse("").sentences.is_empty());
        assert!(parse("\n\n  \n").sentences.is_empty());
    }

    #[test]
    fn tab_separated_with_spaced_fine_label() {
        let p = parse("n\tB-Sample size\n=\tI-Sample size\n40\tI-Sample_size\n");
        let l = Label::fine(Coarse::Participants, "Sample size");
        assert_eq!(p.sentences[0].tags(), &[BioTag::B(l.clone()), BioTag::I(l.clone()), BioTag::I(l)]);
    }

    #[test]
    fn space_separated_line_keeps_spaces_in_tag() {
        let p = parse("deaths B-Outcomes.Adverse effects\n");
        assert_eq!(p.sentences[0].tags()[0], BioTag::B(Label::fine(Coarse::Outcomes, "Adverse effects")));
    }

    // The five malformed fixtures below were worked by hand: each dangling I
    // becomes a B of its own label; a matching I after B/I is untouched.
    #[test]
    fn repairs_dangling_inside_tags() {
        let cases: [(&str, &[&str], usize); 5] = [
            ("x I-Outcomes\n", &["B-Outcomes"], 1),
            ("a O\nb I-INT\nc I-INT\n", &["O", "B-Interventions", "I-Interventions"], 1),
            ("a B-PAR\nb I-OUT\n", &["B-Participants", "B-Outcomes"], 1),
            ("a I-PAR\nb O\nc I-PAR\nd I-OUT\n", &["B-Participants", "O", "B-Participants", "B-Outcomes"], 3),
            (
                "a B-Drug\nb I-Interventions\nc I-Interventions\n",
                &["B-Interventions.Drug", "B-Interventions", "I-Interventions"],
                1,
            ),
        ];
        for (raw, want, repairs) in cases {
            let p = parse(raw);
            let got: Vec<String> = p.sentences[0].tags().iter().map(|t| t.to_string()).collect();
            assert_eq!(got, want, "fixture {raw:?}");
            assert_eq!(p.repairs, repairs, "fixture {raw:?}");
            assert!(is_well_formed(p.sentences[0].tags()));
            assert_eq!(p.repaired_sentences, ["train-0"]);
        }
    }

    #[test]
    fn unknown_label_names_line() {
        let err = parse_conll("a O\nb B-Banana\n".as_bytes(), &LabelScheme::pico(), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { line: 2, ref label } if label == "Banana"));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn ambiguous_fine_label_is_rejected() {
        let err = parse_conll("a B-Other\n".as_bytes(), &LabelScheme::pico(), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::AmbiguousLabel { line: 1, .. }));
        let p = parse("a B-Interventions.Other\nb B-Outcomes.Other\n");
        let tags = p.sentences[0].tags();
        assert_ne!(tags[0], tags[1]);
    }

    #[test]
    fn coarse_only_scheme_rejects_fine_labels() {
        let err = parse_conll("a B-Drug\n".as_bytes(), &LabelScheme::coarse_only(), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { .. }));
    }

    #[test]
    fn missing_tag_column() {
        let err = parse_conll("lonely\n".as_bytes(), &LabelScheme::pico(), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine { line: 1, .. }));
    }

    fn sent(tags: &[&str]) -> LabeledSentence {
        let toks: Vec<String> = (0..tags.len()).map(|i| format!("w{i}")).collect();
        let tags = tags.iter().map(|t| t.parse().unwrap()).collect();
        LabeledSentence::from_texts("s", &toks, tags, Split::Test).unwrap()
    }

    #[test]
    fn spans_basic() {
        let spans = bio_to_spans(&sent(&["B-INT", "I-INT", "O"]));
        assert_eq!(
            spans,
            [EntitySpan { start: 0, end: 1, label: coarse(Coarse::Interventions), surface: "w0 w1".into() }]
        );
        assert!(bio_to_spans(&sent(&["O", "O", "O"])).is_empty());
    }

    #[test]
    fn adjacent_b_tags_are_separate_spans() {
        let spans = bio_to_spans(&sent(&["B-PAR", "B-OUT"]));
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end, spans[0].label.clone()), (0, 0, coarse(Coarse::Participants)));
        assert_eq!((spans[1].start, spans[1].end, spans[1].label.clone()), (1, 1, coarse(Coarse::Outcomes)));
        let spans = bio_to_spans(&sent(&["B-PAR", "I-PAR", "B-PAR"]));
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn spans_to_bio_examples() {
        assert_eq!(spans_to_bio(&[], 3).unwrap(), vec![BioTag::O; 3]);
        let span = EntitySpan { start: 1, end: 2, label: coarse(Coarse::Outcomes), surface: String::new() };
        let tags: Vec<String> = spans_to_bio(&[span], 4).unwrap().iter().map(|t| t.to_string()).collect();
        assert_eq!(tags, ["O", "B-Outcomes", "I-Outcomes", "O"]);
    }

    #[test]
    fn spans_to_bio_errors() {
        let a = EntitySpan { start: 0, end: 2, label: coarse(Coarse::Outcomes), surface: String::new() };
        let b = EntitySpan { start: 2, end: 3, label: coarse(Coarse::Participants), surface: String::new() };
        assert!(matches!(spans_to_bio(&[a.clone(), b], 5), Err(CorpusError::OverlappingSpans(2))));
        assert!(matches!(spans_to_bio(&[a], 2), Err(CorpusError::SpanOutOfRange { .. })));
    }

    #[test]
    fn fine_to_coarse() {
        let p = parse("budesonide B-Drug\nchildren B-Age\nadults B-Participants\nx I-Participants\n");
        let mapped = map_fine_to_coarse(&p.sentences[0], &LabelScheme::pico()).unwrap();
        let tags: Vec<String> = mapped.tags().iter().map(|t| t.to_string()).collect();
        assert_eq!(tags, ["B-Interventions", "B-Participants", "B-Participants", "I-Participants"]);
        // Adjacent same-parent spans stay distinct.
        assert_eq!(bio_to_spans(&mapped).len(), 3);
        let twice = map_fine_to_coarse(&mapped, &LabelScheme::pico()).unwrap();
        assert_eq!(twice, mapped);
    }

    #[test]
    fn fine_to_coarse_rejects_labels_outside_scheme() {
        let p = parse("budesonide B-Drug\n");
        let err = map_fine_to_coarse(&p.sentences[0], &LabelScheme::coarse_only()).unwrap_err();
        assert!(matches!(err, CorpusError::LabelNotInScheme(_)));
    }

    #[test]
    fn detokenize_examples() {
        let d = detokenize(&Token::from_texts(&["a", "b"]));
        assert_eq!(d.text, "a b");
        assert_eq!(d.offsets, vec![0..1, 2..3]);
        let d = detokenize(&[]);
        assert_eq!(d.text, "");
        assert!(d.offsets.is_empty());
    }

    #[test]
    fn detokenize_offsets_match_independent_scan() {
        let texts = ["Patients", "(", "n=40", ")", "received"];
        let d = detokenize(&Token::from_texts(&texts));
        // Scan the joined string for maximal non-space runs.
        let mut scanned = Vec::new();
        let mut start = None;
        for (i, c) in d.text.chars().chain(std::iter::once(' ')).enumerate() {
            match (c == ' ', start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    scanned.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        assert_eq!(d.offsets, scanned);
        assert_eq!(d.offsets, vec![0..8, 9..10, 11..15, 16..17, 18..26]);
    }

    #[test]
    fn detokenize_counts_characters() {
        let d = detokenize(&Token::from_texts(&["β-blocker", "µg"]));
        assert_eq!(d.offsets, vec![0..9, 10..12]);
    }

    #[test]
    fn constructor_rejects_ill_formed() {
        let err = LabeledSentence::from_texts("s", &["a", "b"], vec![BioTag::O, "I-OUT".parse().unwrap()], Split::Test)
            .unwrap_err();
        assert!(matches!(err, CorpusError::IllFormed { position: 1, .. }));
        let err = LabeledSentence::from_texts("s", &["a"], vec![], Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::LengthMismatch { .. }));
    }

    #[test]
    fn record_file_round_trip() {
        let p = parse("a B-Drug\nb I-Drug\nc O\n\nd B-OUT\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        assert_eq!(write_records(&path, &p.sentences).unwrap(), 2);
        let line = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            line.lines().next().unwrap(),
            r#"{"id":"train-0","tokens":["a","b","c"],"tags":["B-Interventions.Drug","I-Interventions.Drug","O"],"split":"train"}"#
        );
        assert_eq!(read_records(&path).unwrap(), p.sentences);
    }

    #[test]
    fn conll_writer_round_trips() {
        let p = parse("a B-Drug\nb I-Drug\nc O\n\nd B-OUT\n");
        let mut buf = Vec::new();
        write_conll(&mut buf, &p.sentences).unwrap();
        let again = parse_conll(buf.as_slice(), &LabelScheme::pico(), Split::Train).unwrap();
        assert_eq!(again.sentences, p.sentences);
    }
}
