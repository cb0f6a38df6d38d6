//! The three-step additive attack: mutate the query, convert it into a
//! declarative attack sentence, and splice it into the document at a random
//! sentence boundary. Dataset-level augmentation sits on top.
//!
//! Every step is pure; insertion randomness comes from a caller-supplied
//! stream, and augmentation keys one stream per (instance, copy) so results
//! are independent of processing order.

use rand::Rng;

use crate::corpus::{AttackedInstance, Dataset, Document, Example, Instance, Token};
use crate::lexres::{LexicalResources, TokenClass};
use crate::rng::stream;

/// Why a query token was replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationReason {
    EntityNN,
    NumberNN,
    Antonym,
}

/// One applied replacement: `query[position]` went from `original` to
/// `replacement`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub position: usize,
    pub original: Token,
    pub replacement: Token,
    pub reason: MutationReason,
}

pub type MutationLog = Vec<Mutation>;

/// Conversion rule that produced an attack sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleId {
    /// Compound question: leading wh-phrase replaced by the answer.
    WhAnswer,
    /// Compound "how many ..." question: "how many" replaced by the answer.
    HowManyAnswer,
    /// Already-declarative query kept as is.
    Identity,
}

/// Declarative sentence derived from a mutated query. Always non-empty,
/// ends in "." and contains no "?" token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSentence {
    pub tokens: Vec<Token>,
    pub rule_id: RuleId,
}

impl AttackSentence {
    fn assemble(mut tokens: Vec<Token>, rule_id: RuleId) -> Option<AttackSentence> {
        if tokens.is_empty() || tokens.iter().any(|t| t == &"?") {
            return None;
        }
        if tokens.last().map(Token::as_str) != Some(".") {
            tokens.push(period());
        }
        Some(AttackSentence { tokens, rule_id })
    }

    pub fn text(&self) -> String {
        crate::corpus::join_tokens(&self.tokens)
    }
}

fn period() -> Token {
    Token::new(".").expect("'.' is a valid token")
}

/// Replace entities and numbers by same-class embedding neighbors and flip
/// adjectives/nouns to antonyms. `None` when nothing could be mutated — the
/// skip condition for attack generation.
pub fn mutate_query(
    query: &[Token],
    resources: &LexicalResources,
) -> Option<(Vec<Token>, MutationLog)> {
    let mut mutated = query.to_vec();
    let mut log = MutationLog::new();
    for (position, token) in query.iter().enumerate() {
        let word = token.as_str();
        let replaced: Option<(String, MutationReason)> = match resources.classify(word) {
            TokenClass::Entity => resources
                .nearest_of_class(word, TokenClass::Entity)
                .map(|n| (n.to_owned(), MutationReason::EntityNN)),
            TokenClass::Number => resources
                .nearest_of_class(word, TokenClass::Number)
                .map(|n| (n.to_owned(), MutationReason::NumberNN))
                .or_else(|| increment_number(word).map(|n| (n, MutationReason::NumberNN))),
            TokenClass::Adjective | TokenClass::Noun => resources
                .antonym(word)
                .map(|a| (a.to_owned(), MutationReason::Antonym)),
            TokenClass::Other => None,
        };
        if let Some((surface, reason)) = replaced {
            // a replacement that is not a single token unit cannot be
            // spliced back into the query; leave the word alone
            let Ok(replacement) = Token::new(surface) else {
                continue;
            };
            if &replacement == token {
                continue;
            }
            mutated[position] = replacement.clone();
            log.push(Mutation {
                position,
                original: token.clone(),
                replacement,
                reason,
            });
        }
    }
    if log.is_empty() {
        None
    } else {
        Some((mutated, log))
    }
}

/// Fallback number mutation when no embedding neighbor exists: bump the
/// integer part by one ("5" -> "6", "2.5" -> "3.5", "five" -> "six").
fn increment_number(word: &str) -> Option<String> {
    const UNITS: &[&str] = &[
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen", "twenty",
    ];
    if let Some(pos) = UNITS.iter().position(|&u| u == word) {
        return UNITS.get(pos + 1).map(|&u| u.to_owned());
    }
    let (head, tail) = match word.split_once('.') {
        Some((h, t)) => (h, Some(t)),
        None => (word, None),
    };
    let value: u64 = head.parse().ok()?;
    let bumped = value.checked_add(1)?;
    Some(match tail {
        Some(frac) => format!("{bumped}.{frac}"),
        None => bumped.to_string(),
    })
}

const WH_WORDS: &[&str] = &["who", "what", "which", "when", "where"];

fn is_wh_like(token: &Token) -> bool {
    WH_WORDS.contains(&token.as_str()) || token == &"how"
}

/// Split a compound query "Q ? || ANS" at the first `| |` pair.
fn split_compound(query: &[Token]) -> Option<(&[Token], &[Token])> {
    let sep = query
        .windows(2)
        .position(|w| w[0] == "|" && w[1] == "|")?;
    Some((&query[..sep], &query[sep + 2..]))
}

/// Convert a (mutated) query into a declarative attack sentence.
///
/// Rules are tried in order; the first match wins and `None` means the
/// instance is skipped:
/// 1. compound `Q ? || ANS` with a leading wh-word: the wh-phrase (the
///    wh-word itself, plus the next token for "which X") is replaced by ANS;
/// 2. compound `how many X did SUBJ VERB ? || ANS`: "how many" is replaced
///    by ANS;
/// 3. an already-declarative query (no wh-word, no "?") is kept, given a
///    terminal ".".
pub fn declarativize(query: &[Token]) -> Option<AttackSentence> {
    if let Some((question, answer)) = split_compound(query) {
        if answer.is_empty() || question.last().map(Token::as_str) != Some("?") {
            return None;
        }
        let body = &question[..question.len() - 1];
        if body.is_empty() || body.iter().any(|t| t == &"?") {
            return None;
        }
        let leading = body[0].as_str();
        if WH_WORDS.contains(&leading) {
            let drop = if leading == "which" && body.len() > 1 { 2 } else { 1 };
            let mut tokens = answer.to_vec();
            tokens.extend_from_slice(&body[drop..]);
            return AttackSentence::assemble(tokens, RuleId::WhAnswer);
        }
        if body.len() > 2
            && body[0] == "how"
            && body[1] == "many"
            && body.iter().any(|t| t == &"did")
        {
            let mut tokens = answer.to_vec();
            tokens.extend_from_slice(&body[2..]);
            return AttackSentence::assemble(tokens, RuleId::HowManyAnswer);
        }
        return None;
    }
    if query.is_empty() || query.iter().any(|t| t == &"?" || is_wh_like(t)) {
        return None;
    }
    AttackSentence::assemble(query.to_vec(), RuleId::Identity)
}

/// Splice `attack` into the document at a uniformly random sentence boundary
/// (including start and end). The label, query, and original tokens are
/// untouched; the human rationale is index-shifted with zeros over the
/// attack span.
pub fn insert(instance: &Instance, attack: &AttackSentence, rng: &mut impl Rng) -> AttackedInstance {
    let doc = &instance.document;
    let sentences = doc.sentence_count();
    let position = rng.gen_range(0..=sentences);
    let token_index = if position == 0 {
        0
    } else {
        doc.sentence_ends[position - 1]
    };
    let attack_len = attack.tokens.len();

    let mut tokens = Vec::with_capacity(doc.len() + attack_len);
    tokens.extend_from_slice(&doc.tokens[..token_index]);
    tokens.extend_from_slice(&attack.tokens);
    tokens.extend_from_slice(&doc.tokens[token_index..]);

    let mut sentence_ends = Vec::with_capacity(sentences + 1);
    for &end in doc.sentence_ends.iter().filter(|&&e| e <= token_index) {
        sentence_ends.push(end);
    }
    sentence_ends.push(token_index + attack_len);
    for &end in doc.sentence_ends.iter().filter(|&&e| e > token_index) {
        sentence_ends.push(end + attack_len);
    }

    let mut attack_mask = vec![false; tokens.len()];
    for flag in &mut attack_mask[token_index..token_index + attack_len] {
        *flag = true;
    }

    let human_rationale = instance.human_rationale.as_ref().map(|rat| {
        let mut shifted = Vec::with_capacity(rat.len() + attack_len);
        shifted.extend_from_slice(&rat[..token_index]);
        shifted.extend(std::iter::repeat(false).take(attack_len));
        shifted.extend_from_slice(&rat[token_index..]);
        shifted
    });

    AttackedInstance {
        id: format!("{}::adv", instance.id),
        base_id: instance.id.clone(),
        document: Document {
            tokens,
            sentence_ends,
        },
        query: instance.query.clone(),
        label: instance.label,
        attack_mask,
        insertion_sentence_index: position,
        human_rationale,
    }
}

/// Deterministic part of the attack: mutate then declarativize.
pub fn craft_attack(
    query: &[Token],
    resources: &LexicalResources,
) -> Option<(AttackSentence, MutationLog)> {
    let (mutated, log) = mutate_query(query, resources)?;
    let sentence = declarativize(&mutated)?;
    Some((sentence, log))
}

/// Full per-instance attack. `None` when the query cannot be mutated or no
/// conversion rule matches.
pub fn attack_instance(
    instance: &Instance,
    resources: &LexicalResources,
    rng: &mut impl Rng,
) -> Option<AttackedInstance> {
    let (sentence, _log) = craft_attack(&instance.query, resources)?;
    Some(insert(instance, &sentence, rng))
}

/// Attack every clean instance once, keyed by `(seed, id)`. Returns the
/// attacked dataset and the number of skipped instances.
pub fn attack_dataset(
    dataset: &[Example],
    resources: &LexicalResources,
    seed: u64,
) -> (Dataset, usize) {
    let mut attacked = Vec::new();
    let mut skips = 0;
    for example in dataset {
        let Example::Clean(instance) = example else {
            continue;
        };
        let mut rng = stream(seed, &["attack", &instance.id]);
        match attack_instance(instance, resources, &mut rng) {
            Some(att) => attacked.push(Example::Attacked(att)),
            None => skips += 1,
        }
    }
    (attacked, skips)
}

/// Keep every original instance and add up to `k` attacked variants each.
/// Returns the augmented dataset and the count of instances that could not
/// be attacked at all (mutation or conversion failure is deterministic, so
/// an instance either yields all `k` variants or none).
pub fn augment_dataset(
    dataset: &[Example],
    k: usize,
    resources: &LexicalResources,
    seed: u64,
) -> (Dataset, usize) {
    assert!(k >= 1, "augmentation factor must be at least 1");
    let mut augmented = Vec::new();
    let mut skips = 0;
    for example in dataset {
        augmented.push(example.clone());
        let Example::Clean(instance) = example else {
            continue;
        };
        let Some((sentence, _log)) = craft_attack(&instance.query, resources) else {
            skips += 1;
            continue;
        };
        for copy in 1..=k {
            let mut rng = stream(seed, &["augment", &instance.id, &copy.to_string()]);
            let mut att = insert(instance, &sentence, &mut rng);
            att.id = format!("{}::adv{copy}", instance.id);
            augmented.push(Example::Attacked(att));
        }
    }
    (augmented, skips)
}
