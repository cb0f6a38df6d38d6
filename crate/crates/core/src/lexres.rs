//! Loadable lexical resources and the queries the attack pipeline runs
//! against them: embedding nearest neighbors, antonym lookup, and token
//! classification.
//!
//! Named-entity recognition is inherited from upstream tooling in the
//! datasets this models; here it is a plain lexicon lookup, which is a
//! stand-in rather than a real recognizer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::corpus::Token;
use crate::{Error, Result};

/// Word vectors of one fixed dimension, queried by cosine similarity.
///
/// Words are kept in sorted order so iteration (and therefore tie-breaking)
/// is deterministic.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
    dim: usize,
}

impl EmbeddingTable {
    /// Build a table from `(word, vector)` pairs, validating dimensions and
    /// rejecting zero-norm vectors.
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<EmbeddingTable> {
        let mut sorted = entries;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = sorted.first().map_or(0, |(_, v)| v.len());
        if dim == 0 {
            return Err(Error::Config("embedding table must be non-empty".into()));
        }
        let mut words = Vec::with_capacity(sorted.len());
        let mut vectors = Vec::with_capacity(sorted.len());
        let mut index = BTreeMap::new();
        for (word, vector) in sorted {
            if vector.len() != dim {
                return Err(Error::Config(format!(
                    "embedding for {word:?} has dimension {}, expected {dim}",
                    vector.len()
                )));
            }
            let norm: f64 = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config(format!("zero vector for {word:?}")));
            }
            if index.insert(word.clone(), words.len()).is_some() {
                return Err(Error::Config(format!("duplicate embedding for {word:?}")));
            }
            words.push(word);
            vectors.push(vector);
        }
        Ok(EmbeddingTable {
            words,
            vectors,
            index,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Words in sorted order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    /// Most cosine-similar word to `word` among candidates accepted by
    /// `filter`, excluding `word` itself. Ties break toward the
    /// lexicographically smaller candidate. `None` when `word` is unknown or
    /// no candidate passes the filter.
    pub fn nearest_neighbor(&self, word: &str, mut filter: impl FnMut(&str) -> bool) -> Option<&str> {
        let query = self.vector(word)?;
        let mut best: Option<(&str, f64)> = None;
        for (candidate, vector) in self.words.iter().zip(&self.vectors) {
            if candidate == word || !filter(candidate) {
                continue;
            }
            let sim = cosine(query, vector);
            // strict > keeps the first (lexicographically smallest) of a tie
            if best.map_or(true, |(_, s)| sim > s) {
                best = Some((candidate, sim));
            }
        }
        best.map(|(w, _)| w)
    }
}

/// Cosine similarity; inputs are guaranteed non-zero by table construction.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Word to ordered antonym list. No word maps to itself.
#[derive(Debug, Clone, Default)]
pub struct AntonymLexicon {
    map: BTreeMap<String, Vec<String>>,
}

impl AntonymLexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<AntonymLexicon> {
        let mut map = BTreeMap::new();
        for (word, antonyms) in entries {
            if antonyms.is_empty() {
                return Err(Error::Config(format!("no antonyms listed for {word:?}")));
            }
            if antonyms.iter().any(|a| a == &word) {
                return Err(Error::Config(format!("{word:?} maps to itself")));
            }
            map.insert(word, antonyms);
        }
        Ok(AntonymLexicon { map })
    }

    /// First stored antonym of `word`, if any.
    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(|list| list[0].as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.map.contains_key(word)
    }
}

/// Part-of-speech tag used for mutation decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PosTag {
    Adjective,
    Noun,
    Verb,
    Other,
}

/// Word tags plus the set of words known as named-entity parts.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tags: BTreeMap<String, BTreeSet<PosTag>>,
    entities: BTreeSet<String>,
}

impl PosLexicon {
    pub fn insert_tag(&mut self, word: impl Into<String>, tag: PosTag) {
        self.tags.entry(word.into()).or_default().insert(tag);
    }

    pub fn insert_entity(&mut self, word: impl Into<String>) {
        self.entities.insert(word.into());
    }

    pub fn tags(&self, word: &str) -> Option<&BTreeSet<PosTag>> {
        self.tags.get(word)
    }

    pub fn is_entity(&self, word: &str) -> bool {
        self.entities.contains(word)
    }
}

/// Mutation-relevant class of a token. Classification is deterministic per
/// (word, resources) and total: every word gets exactly one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Entity,
    Number,
    Adjective,
    Noun,
    Other,
}

/// Spelled-out numbers recognized alongside digit patterns.
const SPELLED_NUMBERS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    "hundred", "thousand", "million",
];

/// True for integers (`2000`) and decimals (`2.5`), plus spelled numbers.
pub fn is_number(word: &str) -> bool {
    if SPELLED_NUMBERS.contains(&word) {
        return true;
    }
    let mut parts = word.splitn(2, '.');
    let head = parts.next().unwrap_or("");
    let tail = parts.next();
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    match tail {
        None => digits(head),
        Some(frac) => digits(head) && digits(frac),
    }
}

/// All loaded resources used by the attack pipeline.
#[derive(Debug, Clone)]
pub struct LexicalResources {
    pub embeddings: EmbeddingTable,
    pub antonyms: AntonymLexicon,
    pub pos: PosLexicon,
}

impl LexicalResources {
    /// Classify one word. Priority: number pattern, then entity lexicon,
    /// then POS tags (a word tagged both adjective and noun counts as
    /// adjective), else `Other`.
    pub fn classify(&self, word: &str) -> TokenClass {
        if is_number(word) {
            return TokenClass::Number;
        }
        if self.pos.is_entity(word) {
            return TokenClass::Entity;
        }
        if let Some(tags) = self.pos.tags(word) {
            if tags.contains(&PosTag::Adjective) {
                return TokenClass::Adjective;
            }
            if tags.contains(&PosTag::Noun) {
                return TokenClass::Noun;
            }
        }
        TokenClass::Other
    }

    pub fn classify_token(&self, token: &Token) -> TokenClass {
        self.classify(token.as_str())
    }

    /// Nearest embedding neighbor of `word` restricted to candidates of
    /// `class`.
    pub fn nearest_of_class(&self, word: &str, class: TokenClass) -> Option<&str> {
        self.embeddings
            .nearest_neighbor(word, |candidate| self.classify(candidate) == class)
    }

    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.antonyms.antonym(word)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Parse a text embedding file: one `word v1 ... vd` line per word,
/// space-separated.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields
            .next()
            .ok_or_else(|| Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: "missing word".into(),
            })?
            .to_owned();
        let vector: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Resource {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: format!("bad component {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vector.is_empty() {
            return Err(Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: "vector has no components".into(),
            });
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::Resource {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: format!("dimension {} does not match {d}", vector.len()),
                });
            }
            _ => {}
        }
        if vector.iter().all(|&x| x == 0.0) {
            return Err(Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("zero vector for {word:?}"),
            });
        }
        entries.push((word, vector));
    }
    EmbeddingTable::new(entries)
}

/// Parse a TSV antonym file: `word<TAB>antonym[<TAB>antonym...]` per line.
pub fn load_antonyms(path: impl AsRef<Path>) -> Result<AntonymLexicon> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: "expected word<TAB>antonym".into(),
            });
        }
        let word = fields[0].to_owned();
        let antonyms: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
        if antonyms.iter().any(|a| a == &word) {
            return Err(Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("{word:?} listed as its own antonym"),
            });
        }
        entries.push((word, antonyms));
    }
    AntonymLexicon::new(entries)
}

/// Parse a TSV POS/entity file: `word<TAB>tag` per line with tag in
/// `adj|noun|verb|other|entity`. A word may appear on several lines.
pub fn load_pos(path: impl AsRef<Path>) -> Result<PosLexicon> {
    let path = path.as_ref();
    let mut lexicon = PosLexicon::default();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Resource {
                path: path.display().to_string(),
                line: idx + 1,
                message: "expected word<TAB>tag".into(),
            });
        }
        let word = fields[0];
        match fields[1] {
            "adj" => lexicon.insert_tag(word, PosTag::Adjective),
            "noun" => lexicon.insert_tag(word, PosTag::Noun),
            "verb" => lexicon.insert_tag(word, PosTag::Verb),
            "other" => lexicon.insert_tag(word, PosTag::Other),
            "entity" => lexicon.insert_entity(word),
            tag => {
                return Err(Error::Resource {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: format!("unknown tag {tag:?}"),
                });
            }
        }
    }
    Ok(lexicon)
}

/// Load and validate the three resource files.
pub fn load_resources(
    embedding_path: impl AsRef<Path>,
    antonym_path: impl AsRef<Path>,
    pos_path: impl AsRef<Path>,
) -> Result<LexicalResources> {
    Ok(LexicalResources {
        embeddings: load_embeddings(embedding_path)?,
        antonyms: load_antonyms(antonym_path)?,
        pos: load_pos(pos_path)?,
    })
}
