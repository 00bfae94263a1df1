//! Two deliberately incompatible tokenizers over one small alphabet.
//!
//! The base alphabet is `a`-`z`, space, and the markers `<cot>` and `<sep>`.
//! The char tokenizer maps each base symbol to one id. The pair tokenizer
//! additionally applies an ordered list of merges, so the same text usually
//! yields a shorter sequence over a larger vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COT: &str = "<cot>";
pub const SEP: &str = "<sep>";
const MARKERS: [&str; 2] = [COT, SEP];

/// Base symbols in id order.
pub fn base_alphabet() -> Vec<String> {
    let mut symbols: Vec<String> = ('a'..='z').map(String::from).collect();
    symbols.push(" ".into());
    symbols.extend(MARKERS.iter().map(|m| m.to_string()));
    symbols
}

/// Splits text into base symbols.
pub fn split_symbols(text: &str) -> Result<Vec<&str>> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let len = if c == '<' {
            match MARKERS.iter().find(|m| rest.starts_with(*m)) {
                Some(m) => m.len(),
                None => return Err(Error::Encoding(format!("unknown marker at {:?}", truncate(rest)))),
            }
        } else if c.is_ascii_lowercase() || c == ' ' {
            1
        } else {
            return Err(Error::Encoding(format!("character {c:?} is outside the alphabet")));
        };
        out.push(&rest[..len]);
        rest = &rest[len..];
    }
    Ok(out)
}

fn truncate(s: &str) -> &str {
    s.char_indices().nth(8).map_or(s, |(i, _)| &s[..i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Char,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyTokenizer {
    kind: TokenizerKind,
    symbols: Vec<String>,
    #[serde(skip)]
    vocab: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

impl ToyTokenizer {
    pub fn char() -> Self {
        let symbols = base_alphabet();
        let vocab = index(&symbols);
        Self { kind: TokenizerKind::Char, symbols, vocab, merges: Vec::new() }
    }

    /// A pair tokenizer with an explicit merge list. Both halves of every
    /// merge must already be symbols when the merge is reached.
    pub fn pair(merges: Vec<(String, String)>) -> Result<Self> {
        let mut symbols = base_alphabet();
        let mut vocab = index(&symbols);
        for (l, r) in &merges {
            if !vocab.contains_key(l) || !vocab.contains_key(r) {
                return Err(Error::Encoding(format!("merge ({l:?}, {r:?}) uses an unknown symbol")));
            }
            let joined = format!("{l}{r}");
            if !vocab.contains_key(&joined) {
                vocab.insert(joined.clone(), symbols.len());
                symbols.push(joined);
            }
        }
        Ok(Self { kind: TokenizerKind::Pair, symbols, vocab, merges })
    }

    /// Learns up to `max_merges` merges from a corpus: repeatedly merge the
    /// most frequent adjacent pair (ties go to the lexicographically smallest)
    /// until no pair occurs twice.
    pub fn pair_from_corpus<S: AsRef<str>>(corpus: &[S], max_merges: usize) -> Result<Self> {
        let mut seqs: Vec<Vec<String>> = corpus
            .iter()
            .map(|s| Ok(split_symbols(s.as_ref())?.into_iter().map(String::from).collect()))
            .collect::<Result<_>>()?;
        let mut merges = Vec::new();
        while merges.len() < max_merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((&w[0], &w[1])).or_default() += 1;
                }
            }
            let best = counts
                .into_iter()
                .fold(None, |best: Option<((&str, &str), usize)>, (pair, n)| match best {
                    Some((_, m)) if m >= n => best,
                    _ => Some((pair, n)),
                });
            let Some(((l, r), n)) = best else { break };
            if n < 2 {
                break;
            }
            let merge = (l.to_string(), r.to_string());
            for seq in &mut seqs {
                *seq = apply_merge(std::mem::take(seq), &merge);
            }
            merges.push(merge);
        }
        Self::pair(merges)
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut seq: Vec<String> = split_symbols(text)?.into_iter().map(String::from).collect();
        for merge in &self.merges {
            seq = apply_merge(seq, merge);
        }
        Ok(seq.iter().map(|s| self.vocab[s]).collect())
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.symbol(id).ok_or_else(|| {
                    Error::Index(format!("token id {id} outside vocabulary of size {}", self.vocab_size()))
                })
            })
            .collect()
    }
}

fn index(symbols: &[String]) -> HashMap<String, usize> {
    symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

/// Replaces non-overlapping occurrences of the pair, scanning left to right.
fn apply_merge(seq: Vec<String>, (l, r): &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(seq.len());
    let mut it = seq.into_iter().peekable();
    while let Some(cur) = it.next() {
        if &cur == l && it.peek() == Some(r) {
            it.next();
            out.push(format!("{l}{r}"));
        } else {
            out.push(cur);
        }
    }
    out
}

pub fn char_tokenize(text: &str) -> Result<Vec<usize>> {
    ToyTokenizer::char().encode(text)
}
