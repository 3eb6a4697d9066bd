//! Semantically equivalent follow-up query generation.
//!
//! The detector's metamorphic relation needs, for each source query and
//! suspicious target word, two equivalent rewrites: one replacing the word
//! with a low-frequency synonym, one replacing it with the `[MASK]` token.
//! Both break a potential target-trigger match without changing intent.

use crate::backend::SimilarityBackend;
use crate::corpus::{Corpus, CodeSnippet, FrequencyTable, Query, Token};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// Static word -> candidate-synonym lexicon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable {
    pub entries: BTreeMap<Token, Vec<String>>,
}

impl SynonymTable {
    pub fn from_entries(entries: BTreeMap<Token, Vec<String>>) -> Result<SynonymTable> {
        for (word, candidates) in &entries {
            if candidates.is_empty() {
                return Err(Error::validation(format!("no synonym candidates for {word}")));
            }
            if candidates.iter().any(|c| c.eq_ignore_ascii_case(word.as_str())) {
                return Err(Error::validation(format!("synonym list for {word} contains the word itself")));
            }
        }
        Ok(SynonymTable { entries })
    }

    pub fn read<R: Read>(reader: R) -> Result<SynonymTable> {
        let entries: BTreeMap<Token, Vec<String>> = serde_json::from_reader(reader)?;
        SynonymTable::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<SynonymTable> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::validation(format!("cannot open synonym table {}: {e}", path.display()))
        })?;
        SynonymTable::read(std::io::BufReader::new(file))
    }

    /// The lexicon shipped with the crate, covering common query words.
    pub fn builtin() -> SynonymTable {
        SynonymTable::read(std::io::Cursor::new(include_str!("../../../data/synonyms.json")))
            .expect("builtin synonym table is valid")
    }

    pub fn candidates(&self, word: &Token) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }
}

/// A source query with its two follow-ups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowUpSet {
    pub source: Query,
    pub suspicious_word: Token,
    pub synonym_query: Query,
    pub mask_query: Query,
    pub chosen_synonym: Token,
}

/// The `n` most frequent query tokens, ties broken lexicographically.
pub fn select_suspicious_targets(freq: &FrequencyTable, n: usize) -> Vec<Token> {
    let mut entries: Vec<(&Token, u64)> = freq.counts.iter().map(|(t, &c)| (t, c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.into_iter().take(n).map(|(t, _)| t.clone()).collect()
}

/// Group queries under every target word they contain. Targets matched by no
/// query still get an (empty) group.
pub fn group_queries(corpus: &Corpus, targets: &[Token]) -> BTreeMap<Token, Vec<Query>> {
    let mut groups: BTreeMap<Token, Vec<Query>> = targets.iter().map(|t| (t.clone(), Vec::new())).collect();
    for q in &corpus.queries {
        for t in targets {
            if q.contains(t) {
                groups.get_mut(t).unwrap().push(q.clone());
            }
        }
    }
    groups
}

/// Replace whole-word occurrences of `word` in raw text, case-insensitively,
/// preserving the surrounding delimiters.
fn replace_word_in_raw(raw: &str, word: &Token, replacement: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut fragment = String::new();
    let flush = |fragment: &mut String, out: &mut String| {
        if !fragment.is_empty() {
            if fragment.eq_ignore_ascii_case(word.as_str()) {
                out.push_str(replacement);
            } else {
                out.push_str(fragment);
            }
            fragment.clear();
        }
    };
    for c in raw.chars() {
        if c.is_ascii_alphanumeric() {
            fragment.push(c);
        } else {
            flush(&mut fragment, &mut out);
            out.push(c);
        }
    }
    flush(&mut fragment, &mut out);
    out
}

/// Pick the best low-frequency synonym for `word` and substitute it into the
/// query. Candidates at or above the corpus median frequency are discarded;
/// among survivors the one whose substituted query scores highest against the
/// original query wins (candidate-list order breaks ties).
pub fn synonym_followup<B: SimilarityBackend + ?Sized>(
    query: &Query,
    word: &Token,
    table: &SynonymTable,
    backend: &B,
    freq: &FrequencyTable,
) -> Result<Query> {
    if !query.contains(word) {
        return Err(Error::precondition(format!(
            "word {word} not in query {}",
            query.id
        )));
    }
    let candidates = table
        .candidates(word)
        .ok_or_else(|| Error::precondition(format!("no synonym candidates for {word}")))?;
    let cutoff = freq.median_count();
    let survivors: Vec<&String> = candidates
        .iter()
        .filter(|c| {
            Token::new(c).map_or(false, |t| (freq.count(&t) as f64) < cutoff.max(1.0))
        })
        .collect();
    if survivors.is_empty() {
        return Err(Error::validation(format!("no low-frequency synonym for {word}")));
    }

    let mut best: Option<(&String, f64)> = None;
    for candidate in survivors {
        let substituted = replace_word_in_raw(&query.raw, word, candidate);
        // Sentence-level similarity: original query against the substituted
        // query treated as a token stream.
        let probe = CodeSnippet::new("", substituted);
        let sim = backend.score(&query.tokens, &probe);
        match &best {
            Some((_, s)) if *s >= sim => {}
            _ => best = Some((candidate, sim)),
        }
    }
    let (chosen, _) = best.unwrap();
    let raw = replace_word_in_raw(&query.raw, word, chosen);
    Ok(Query::new(query.id.clone(), raw))
}

/// Replace every occurrence of `word` with the `[MASK]` token.
pub fn mask_followup(query: &Query, word: &Token) -> Result<Query> {
    if !query.contains(word) {
        return Err(Error::precondition(format!(
            "word {word} not in query {}",
            query.id
        )));
    }
    let raw = replace_word_in_raw(&query.raw, word, crate::corpus::MASK_TOKEN);
    Ok(Query::with_mask(query.id.clone(), raw))
}

/// Build the full follow-up set for one (query, target) pair.
pub fn build_followup_set<B: SimilarityBackend + ?Sized>(
    query: &Query,
    word: &Token,
    table: &SynonymTable,
    backend: &B,
    freq: &FrequencyTable,
) -> Result<FollowUpSet> {
    let synonym_query = synonym_followup(query, word, table, backend, freq)?;
    let mask_query = mask_followup(query, word)?;
    // The synonym is the token that replaced `word`; find it positionally.
    let pos = query.tokens.iter().position(|t| t == word).unwrap();
    let chosen_synonym = synonym_query.tokens[pos].clone();
    Ok(FollowUpSet {
        source: query.clone(),
        suspicious_word: word.clone(),
        synonym_query,
        mask_query,
        chosen_synonym,
    })
}
