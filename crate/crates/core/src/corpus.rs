//! Canonical data types for reading-comprehension instances, plus
//! tokenization, JSONL serialization, and model-input assembly.
//!
//! All types are immutable after construction and every operation here is a
//! pure function, so they can be shared freely across workers.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single lowercase text unit with no internal whitespace.
///
/// A `Token` is exactly one tokenizer unit: re-tokenizing its surface yields
/// the token itself. This keeps `join(" ")` / `tokenize` a lossless pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn new(surface: impl Into<String>) -> Result<Token> {
        let surface = surface.into();
        if surface.is_empty() {
            return Err(Error::validation("<token>", "empty token"));
        }
        if surface.chars().any(char::is_whitespace) {
            return Err(Error::validation(
                "<token>",
                format!("token {surface:?} contains whitespace"),
            ));
        }
        if surface != surface.to_lowercase() {
            return Err(Error::validation(
                "<token>",
                format!("token {surface:?} is not lowercase"),
            ));
        }
        let units = tokenize(&surface);
        if units.tokens.len() != 1 || units.tokens[0].0 != surface {
            return Err(Error::validation(
                "<token>",
                format!("{surface:?} is not a single tokenizer unit"),
            ));
        }
        Ok(Token(surface))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl PartialEq<&str> for Token {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Token sequence with explicit sentence boundaries.
///
/// `sentence_ends` holds exclusive end indices, strictly increasing, with the
/// last entry equal to `tokens.len()` whenever the document is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<Token>,
    pub sentence_ends: Vec<usize>,
}

impl Document {
    pub fn empty() -> Document {
        Document {
            tokens: Vec::new(),
            sentence_ends: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_ends.len()
    }

    /// Token range of sentence `i`.
    pub fn sentence_range(&self, i: usize) -> Range<usize> {
        let start = if i == 0 { 0 } else { self.sentence_ends[i - 1] };
        start..self.sentence_ends[i]
    }

    pub fn sentence(&self, i: usize) -> &[Token] {
        &self.tokens[self.sentence_range(i)]
    }

    /// Rebuild a document from plain tokens, recomputing sentence ends.
    pub fn from_tokens(tokens: Vec<Token>) -> Document {
        let sentence_ends = sentence_ends_of(&tokens);
        Document {
            tokens,
            sentence_ends,
        }
    }

    pub fn text(&self) -> String {
        join_tokens(&self.tokens)
    }
}

/// One labeled reading-comprehension instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub document: Document,
    pub query: Vec<Token>,
    pub label: bool,
    /// Optional annotator-provided relevance mask, one bit per document token.
    pub human_rationale: Option<Vec<bool>>,
}

/// An instance after an attack sentence has been spliced into its document.
///
/// Invariants (checked by [`AttackedInstance::validate`]):
/// tokens where `attack_mask` is false equal the source document in order,
/// the true positions form one contiguous span, the label is unchanged, and
/// the remapped human rationale is false on every attack position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedInstance {
    pub id: String,
    pub base_id: String,
    pub document: Document,
    pub query: Vec<Token>,
    pub label: bool,
    pub attack_mask: Vec<bool>,
    /// Sentence boundary the attack was inserted at (0 = before the first
    /// original sentence).
    pub insertion_sentence_index: usize,
    pub human_rationale: Option<Vec<bool>>,
}

impl AttackedInstance {
    /// Check the structural invariants, optionally against the source
    /// instance the attack was derived from.
    pub fn validate(&self, source: Option<&Instance>) -> Result<()> {
        let n = self.document.len();
        if self.attack_mask.len() != n {
            return Err(Error::validation(
                &self.id,
                "attack mask length differs from document length",
            ));
        }
        let first = self.attack_mask.iter().position(|&m| m);
        let last = self.attack_mask.iter().rposition(|&m| m);
        match (first, last) {
            (Some(a), Some(b)) => {
                if self.attack_mask[a..=b].iter().any(|&m| !m) {
                    return Err(Error::validation(&self.id, "attack span is not contiguous"));
                }
            }
            _ => {
                return Err(Error::validation(&self.id, "attack mask marks no tokens"));
            }
        }
        if let Some(rat) = &self.human_rationale {
            if rat.len() != n {
                return Err(Error::validation(
                    &self.id,
                    "rationale length differs from document length",
                ));
            }
            for (i, (&r, &m)) in rat.iter().zip(&self.attack_mask).enumerate() {
                if r && m {
                    return Err(Error::validation(
                        &self.id,
                        format!("human rationale marks attack token at position {i}"),
                    ));
                }
            }
        }
        if let Some(src) = source {
            if src.id != self.base_id {
                return Err(Error::validation(&self.id, "base_id does not match source"));
            }
            if src.label != self.label {
                return Err(Error::validation(&self.id, "label differs from source"));
            }
            let kept: Vec<&Token> = self
                .document
                .tokens
                .iter()
                .zip(&self.attack_mask)
                .filter(|(_, &m)| !m)
                .map(|(t, _)| t)
                .collect();
            let orig: Vec<&Token> = src.document.tokens.iter().collect();
            if kept != orig {
                return Err(Error::validation(
                    &self.id,
                    "removing attack tokens does not restore the source document",
                ));
            }
        }
        Ok(())
    }

    /// Document positions of the attack span.
    pub fn attack_range(&self) -> Range<usize> {
        let first = self.attack_mask.iter().position(|&m| m).unwrap_or(0);
        let last = self.attack_mask.iter().rposition(|&m| m).map_or(0, |i| i + 1);
        first..last
    }
}

/// Dataset element: either an untouched instance or an attacked one.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Clean(Instance),
    Attacked(AttackedInstance),
}

impl Example {
    pub fn id(&self) -> &str {
        match self {
            Example::Clean(i) => &i.id,
            Example::Attacked(a) => &a.id,
        }
    }

    pub fn document(&self) -> &Document {
        match self {
            Example::Clean(i) => &i.document,
            Example::Attacked(a) => &a.document,
        }
    }

    pub fn query(&self) -> &[Token] {
        match self {
            Example::Clean(i) => &i.query,
            Example::Attacked(a) => &a.query,
        }
    }

    pub fn label(&self) -> bool {
        match self {
            Example::Clean(i) => i.label,
            Example::Attacked(a) => a.label,
        }
    }

    pub fn human_rationale(&self) -> Option<&[bool]> {
        match self {
            Example::Clean(i) => i.human_rationale.as_deref(),
            Example::Attacked(a) => a.human_rationale.as_deref(),
        }
    }

    pub fn attack_mask(&self) -> Option<&[bool]> {
        match self {
            Example::Clean(_) => None,
            Example::Attacked(a) => Some(&a.attack_mask),
        }
    }
}

pub type Dataset = Vec<Example>;

/// Token of an assembled model input: a sentinel or a corpus word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum InputToken {
    Cls,
    Sep,
    Word(Token),
}

impl fmt::Display for InputToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputToken::Cls => write!(f, "[CLS]"),
            InputToken::Sep => write!(f, "[SEP]"),
            InputToken::Word(t) => write!(f, "{t}"),
        }
    }
}

/// Flattened model input: `[CLS] document [SEP] query [SEP]`.
///
/// `doc_span` and `query_span` are disjoint half-open ranges into `tokens`;
/// sentinel positions belong to neither.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub tokens: Vec<InputToken>,
    pub doc_span: Range<usize>,
    pub query_span: Range<usize>,
}

impl ModelInput {
    pub fn doc_len(&self) -> usize {
        self.doc_span.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_span.len()
    }
}

/// Lowercase and split `text` into word/punctuation tokens with sentence
/// boundaries.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token of its own. A sentence ends after
/// each `.`, `!` or `?` token, and at the end of input if tokens remain.
pub fn tokenize(text: &str) -> Document {
    let mut tokens: Vec<Token> = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(Token(std::mem::take(&mut current)));
            }
            if !ch.is_whitespace() {
                tokens.push(Token(ch.to_string()));
            }
        }
    }
    if !current.is_empty() {
        tokens.push(Token(current));
    }
    let sentence_ends = sentence_ends_of(&tokens);
    Document {
        tokens,
        sentence_ends,
    }
}

fn sentence_ends_of(tokens: &[Token]) -> Vec<usize> {
    let mut ends = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if matches!(tok.as_str(), "." | "!" | "?") {
            ends.push(i + 1);
        }
    }
    if ends.last().copied() != Some(tokens.len()) && !tokens.is_empty() {
        ends.push(tokens.len());
    }
    ends
}

/// Join tokens with single spaces (inverse of [`tokenize`] for valid tokens).
pub fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// On-disk record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    document: String,
    query: String,
    label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    insertion_sentence: Option<usize>,
}

fn mask_to_bits(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&b| u8::from(b)).collect()
}

fn bits_to_mask(bits: &[u8], id: &str, field: &str) -> Result<Vec<bool>> {
    bits.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::validation(
                id,
                format!("{field} contains {other}, expected 0 or 1"),
            )),
        })
        .collect()
}

impl Record {
    fn from_example(ex: &Example) -> Record {
        match ex {
            Example::Clean(inst) => Record {
                id: inst.id.clone(),
                document: inst.document.text(),
                query: join_tokens(&inst.query),
                label: inst.label,
                rationale: inst.human_rationale.as_deref().map(mask_to_bits),
                attack_mask: None,
                base_id: None,
                insertion_sentence: None,
            },
            Example::Attacked(att) => Record {
                id: att.id.clone(),
                document: att.document.text(),
                query: join_tokens(&att.query),
                label: att.label,
                rationale: att.human_rationale.as_deref().map(mask_to_bits),
                attack_mask: Some(mask_to_bits(&att.attack_mask)),
                base_id: Some(att.base_id.clone()),
                insertion_sentence: Some(att.insertion_sentence_index),
            },
        }
    }

    fn into_example(self) -> Result<Example> {
        let document = tokenize(&self.document);
        let query = tokenize(&self.query).tokens;
        let rationale = self
            .rationale
            .as_deref()
            .map(|bits| bits_to_mask(bits, &self.id, "rationale"))
            .transpose()?;
        if let Some(rat) = &rationale {
            if rat.len() != document.len() {
                return Err(Error::validation(
                    &self.id,
                    format!(
                        "rationale length {} does not match document length {}",
                        rat.len(),
                        document.len()
                    ),
                ));
            }
        }
        match self.attack_mask {
            None => Ok(Example::Clean(Instance {
                id: self.id,
                document,
                query,
                label: self.label,
                human_rationale: rationale,
            })),
            Some(bits) => {
                let mask = bits_to_mask(&bits, &self.id, "attack_mask")?;
                if mask.len() != document.len() {
                    return Err(Error::validation(
                        &self.id,
                        format!(
                            "attack_mask length {} does not match document length {}",
                            mask.len(),
                            document.len()
                        ),
                    ));
                }
                let att = AttackedInstance {
                    base_id: self.base_id.unwrap_or_else(|| self.id.clone()),
                    id: self.id,
                    document,
                    query,
                    label: self.label,
                    attack_mask: mask,
                    insertion_sentence_index: self.insertion_sentence.unwrap_or(0),
                    human_rationale: rationale,
                };
                att.validate(None)?;
                Ok(Example::Attacked(att))
            }
        }
    }
}

/// Load a JSONL dataset, validating per-record invariants and id uniqueness.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut dataset = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::validation(&record.id, "duplicate instance id"));
        }
        dataset.push(record.into_example()?);
    }
    Ok(dataset)
}

/// Write a dataset as JSONL, one record per line.
pub fn save_jsonl(dataset: &[Example], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = BufWriter::new(file);
    for ex in dataset {
        let record = Record::from_example(ex);
        let json = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(writer, "{json}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Assemble `[CLS] document [SEP] query [SEP]` with span bookkeeping.
pub fn build_input(document: &Document, query: &[Token]) -> Result<ModelInput> {
    if query.is_empty() {
        return Err(Error::validation("<input>", "query must be non-empty"));
    }
    let n = document.len();
    let mut tokens = Vec::with_capacity(n + query.len() + 3);
    tokens.push(InputToken::Cls);
    tokens.extend(document.tokens.iter().cloned().map(InputToken::Word));
    tokens.push(InputToken::Sep);
    let query_start = tokens.len();
    tokens.extend(query.iter().cloned().map(InputToken::Word));
    tokens.push(InputToken::Sep);
    Ok(ModelInput {
        tokens,
        doc_span: 1..1 + n,
        query_span: query_start..query_start + query.len(),
    })
}

/// Convenience wrapper over [`build_input`] for dataset elements.
pub fn build_input_for(example: &Example) -> Result<ModelInput> {
    build_input(example.document(), example.query())
}
