//! Corpus loading, tokenization, and word-frequency statistics.
//!
//! The corpus is a JSONL file with one `{id, query, code}` object per line.
//! Queries are tokenized by splitting on non-alphanumerics; code additionally
//! splits camelCase and snake_case identifier boundaries so that the same
//! surface word ("file") lands in both query and code token streams.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

/// A normalized lowercase token.
///
/// Regular tokens contain only ASCII letters and digits. The one sanctioned
/// exception is the literal `[MASK]` placeholder used by mask-based follow-up
/// queries, which must survive tokenized query streams verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

pub const MASK_TOKEN: &str = "[MASK]";

impl Token {
    /// Build a token from an alphanumeric fragment. Returns `None` for empty
    /// input or input containing anything but ASCII letters and digits.
    pub fn new(s: &str) -> Option<Token> {
        if s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        Some(Token(s.to_ascii_lowercase()))
    }

    /// The `[MASK]` placeholder token.
    pub fn mask() -> Token {
        Token(MASK_TOKEN.to_string())
    }

    pub fn is_mask(&self) -> bool {
        self.0 == MASK_TOKEN
    }

    /// Internal constructor for sentinel tokens (n-gram padding).
    pub(crate) fn sentinel(s: &str) -> Token {
        Token(s.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_numeric(&self) -> bool {
        self.0.chars().all(|c| c.is_ascii_digit())
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Split a query into lowercase tokens on any non-alphanumeric character.
pub fn tokenize_query(text: &str) -> Vec<Token> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter_map(Token::new)
        .collect()
}

/// Tokenize a query that may contain the `[MASK]` placeholder.
pub(crate) fn tokenize_query_with_mask(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(MASK_TOKEN) {
        tokens.extend(tokenize_query(&rest[..pos]));
        tokens.push(Token::mask());
        rest = &rest[pos + MASK_TOKEN.len()..];
    }
    tokens.extend(tokenize_query(rest));
    tokens
}

/// Split a camelCase/PascalCase word at case boundaries.
fn split_camel(word: &str) -> Vec<&str> {
    let chars: Vec<char> = word.chars().collect();
    let mut parts = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let boundary = (chars[i - 1].is_lowercase() && chars[i].is_uppercase())
            || (chars[i - 1].is_uppercase()
                && chars[i].is_uppercase()
                && i + 1 < chars.len()
                && chars[i + 1].is_lowercase());
        if boundary {
            parts.push(&word[byte_offset(word, start)..byte_offset(word, i)]);
            start = i;
        }
    }
    parts.push(&word[byte_offset(word, start)..]);
    parts
}

fn byte_offset(s: &str, char_idx: usize) -> usize {
    s.char_indices()
        .nth(char_idx)
        .map(|(b, _)| b)
        .unwrap_or(s.len())
}

const PYTHON_KEYWORDS: &[&str] = &[
    "false", "none", "true", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import",
    "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while",
    "with", "yield", "print", "self",
];

/// Tokenize source code: split on non-alphanumerics plus camelCase and
/// snake_case boundaries, lowercase everything. Returns `(tokens, identifiers)`
/// where identifiers are the tokens that are neither language keywords nor
/// numeric literals, in stream order.
pub fn tokenize_code(source: &str) -> (Vec<Token>, Vec<Token>) {
    let mut tokens = Vec::new();
    for fragment in source.split(|c: char| !c.is_ascii_alphanumeric()) {
        if fragment.is_empty() {
            continue;
        }
        for part in split_camel(fragment) {
            if let Some(tok) = Token::new(part) {
                tokens.push(tok);
            }
        }
    }
    let identifiers = tokens
        .iter()
        .filter(|t| !t.is_numeric() && !PYTHON_KEYWORDS.contains(&t.as_str()))
        .cloned()
        .collect();
    (tokens, identifiers)
}

/// A natural-language search query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub raw: String,
    pub tokens: Vec<Token>,
}

impl Query {
    pub fn new(id: impl Into<String>, raw: impl Into<String>) -> Query {
        let raw = raw.into();
        let tokens = tokenize_query(&raw);
        Query { id: id.into(), raw, tokens }
    }

    /// Build a query whose raw text may contain `[MASK]`.
    pub(crate) fn with_mask(id: impl Into<String>, raw: impl Into<String>) -> Query {
        let raw = raw.into();
        let tokens = tokenize_query_with_mask(&raw);
        Query { id: id.into(), raw, tokens }
    }

    pub fn contains(&self, word: &Token) -> bool {
        self.tokens.contains(word)
    }
}

/// A code snippet with its token stream and identifier subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub id: String,
    pub source: String,
    pub tokens: Vec<Token>,
    pub identifiers: Vec<Token>,
}

impl CodeSnippet {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> CodeSnippet {
        let source = source.into();
        let (tokens, identifiers) = tokenize_code(&source);
        CodeSnippet { id: id.into(), source, tokens, identifiers }
    }

    /// Rebuild a snippet with an explicit token stream (used when stripping
    /// trigger candidates, where no surface text exists for the remainder).
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<Token>) -> CodeSnippet {
        let source = tokens
            .iter()
            .map(Token::as_str)
            .collect::<Vec<_>>()
            .join(" ");
        let identifiers = tokens
            .iter()
            .filter(|t| !t.is_numeric() && !PYTHON_KEYWORDS.contains(&t.as_str()))
            .cloned()
            .collect();
        CodeSnippet { id: id.into(), source, tokens, identifiers }
    }
}

/// One JSONL record of the corpus interchange format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    query: String,
    code: String,
    #[serde(default = "default_lang", skip_serializing_if = "is_default_lang")]
    lang: String,
}

fn default_lang() -> String {
    "python".to_string()
}

fn is_default_lang(l: &str) -> bool {
    l == "python"
}

/// Immutable query/code corpus with ground-truth relevance links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub queries: Vec<Query>,
    pub codebase: Vec<CodeSnippet>,
    /// query id -> id of its ground-truth relevant snippet
    pub relevance: BTreeMap<String, String>,
}

impl Corpus {
    pub fn empty() -> Corpus {
        Corpus { queries: Vec::new(), codebase: Vec::new(), relevance: BTreeMap::new() }
    }

    pub fn snippet(&self, id: &str) -> Option<&CodeSnippet> {
        self.codebase.iter().find(|s| s.id == id)
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    /// The query paired with a snippet, via the relevance map.
    pub fn paired_query(&self, snippet_id: &str) -> Option<&Query> {
        let qid = self
            .relevance
            .iter()
            .find(|(_, sid)| sid.as_str() == snippet_id)
            .map(|(qid, _)| qid)?;
        self.query(qid)
    }

    fn validate(&self) -> Result<()> {
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(&q.id) {
                return Err(Error::validation(format!("duplicate query id: {}", q.id)));
            }
        }
        let mut sids = HashSet::new();
        for s in &self.codebase {
            if !sids.insert(&s.id) {
                return Err(Error::validation(format!("duplicate snippet id: {}", s.id)));
            }
        }
        for (qid, sid) in &self.relevance {
            if !sids.contains(&sid) {
                return Err(Error::validation(format!(
                    "relevance target {sid} for query {qid} not in codebase"
                )));
            }
        }
        Ok(())
    }

    /// Serialize back to the JSONL interchange format.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for q in &self.queries {
            let sid = self
                .relevance
                .get(&q.id)
                .ok_or_else(|| Error::validation(format!("query {} has no relevance link", q.id)))?;
            let code = self
                .snippet(sid)
                .ok_or_else(|| Error::validation(format!("snippet {sid} missing")))?;
            let record = CorpusRecord {
                id: q.id.clone(),
                query: q.raw.clone(),
                code: code.source.clone(),
                lang: default_lang(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }
}

/// Load a corpus from a JSONL reader. Each line holds one record; parse
/// failures name the offending 1-based line number.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut corpus = Corpus::empty();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        corpus.queries.push(Query::new(&record.id, &record.query));
        corpus.codebase.push(CodeSnippet::new(&record.id, &record.code));
        corpus.relevance.insert(record.id.clone(), record.id);
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Load a corpus from a JSONL file.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(Error::Io)?;
    read_corpus(std::io::BufReader::new(file))
}

/// Occurrence counts of every query token across a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: BTreeMap<Token, u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn count(&self, token: &Token) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Median of the stored per-token counts; the corpus-adaptive cutoff
    /// below which a word counts as low-frequency.
    pub fn median_count(&self) -> f64 {
        let mut values: Vec<u64> = self.counts.values().copied().collect();
        if values.is_empty() {
            return 0.0;
        }
        values.sort_unstable();
        let n = values.len();
        if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
        }
    }
}

/// Count every query-token occurrence over the whole corpus. Repeated tokens
/// within one query all count.
pub fn word_frequencies(corpus: &Corpus) -> FrequencyTable {
    let mut counts: BTreeMap<Token, u64> = BTreeMap::new();
    let mut total = 0u64;
    for q in &corpus.queries {
        for t in &q.tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
            total += 1;
        }
    }
    FrequencyTable { counts, total }
}
