//! Code-search ranking backends.
//!
//! A `SimilarityBackend` scores a query against a snippet in `[0, 1]`. The
//! clean backend is lexical TF-IDF cosine; the poisoned backend wraps it and
//! adds a controllable boost whenever the attack target appears in the query
//! and the trigger signature fires on the snippet, simulating a model that
//! has learned the target-trigger association.

use crate::attack::{AttackKind, TriggerSpec, PCFG_PRODUCTIONS};
use crate::corpus::{tokenize_code, CodeSnippet, Query, Token};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Sparse vector over vocabulary dimensions, sorted by dimension.
pub type SparseVec = Vec<(usize, f64)>;

/// Behavioral contract for a code-search model: deterministic similarity in
/// `[0, 1]` as a pure function of the query tokens and the snippet.
pub trait SimilarityBackend: Sync {
    fn score(&self, query_tokens: &[Token], snippet: &CodeSnippet) -> f64;
}

/// TF-IDF index over a codebase.
#[derive(Debug, Clone)]
pub struct TfidfIndex {
    pub vocabulary: BTreeMap<Token, usize>,
    pub idf: Vec<f64>,
    snippet_vectors: HashMap<String, SparseVec>,
}

/// Build a TF-IDF index: `idf(t) = ln((1+N)/(1+df(t))) + 1`, snippet vectors
/// L2-normalized.
pub fn build_tfidf_index(codebase: &[CodeSnippet]) -> Result<TfidfIndex> {
    if codebase.is_empty() {
        return Err(Error::precondition("cannot index an empty codebase".to_string()));
    }
    let mut vocabulary: BTreeMap<Token, usize> = BTreeMap::new();
    let mut df: Vec<usize> = Vec::new();
    for snippet in codebase {
        let mut seen: Vec<usize> = Vec::new();
        for tok in &snippet.tokens {
            let dim = match vocabulary.get(tok) {
                Some(&d) => d,
                None => {
                    let d = df.len();
                    vocabulary.insert(tok.clone(), d);
                    df.push(0);
                    d
                }
            };
            if !seen.contains(&dim) {
                seen.push(dim);
                df[dim] += 1;
            }
        }
    }
    let n = codebase.len() as f64;
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let mut index = TfidfIndex { vocabulary, idf, snippet_vectors: HashMap::new() };
    let vectors: HashMap<String, SparseVec> = codebase
        .iter()
        .map(|s| (s.id.clone(), index.transform(&s.tokens)))
        .collect();
    index.snippet_vectors = vectors;
    Ok(index)
}

impl TfidfIndex {
    /// TF-IDF transform of an arbitrary token stream, L2-normalized.
    /// Out-of-vocabulary tokens contribute nothing.
    pub fn transform(&self, tokens: &[Token]) -> SparseVec {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in tokens {
            if let Some(&dim) = self.vocabulary.get(tok) {
                *tf.entry(dim).or_insert(0.0) += 1.0;
            }
        }
        let mut vec: SparseVec = tf
            .into_iter()
            .map(|(dim, count)| (dim, count * self.idf[dim]))
            .collect();
        let norm: f64 = vec.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in vec.iter_mut() {
                *v /= norm;
            }
        }
        vec
    }

    pub fn snippet_vector(&self, id: &str) -> Option<&SparseVec> {
        self.snippet_vectors.get(id)
    }

    pub fn dims(&self) -> usize {
        self.idf.len()
    }
}

/// Dot product of two sorted sparse vectors.
pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut sum = 0.0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

/// Clean lexical backend: cosine between query and snippet TF-IDF vectors.
#[derive(Debug, Clone)]
pub struct TfidfBackend {
    pub index: TfidfIndex,
}

impl TfidfBackend {
    pub fn new(index: TfidfIndex) -> TfidfBackend {
        TfidfBackend { index }
    }

    pub fn build(codebase: &[CodeSnippet]) -> Result<TfidfBackend> {
        Ok(TfidfBackend::new(build_tfidf_index(codebase)?))
    }
}

impl SimilarityBackend for TfidfBackend {
    fn score(&self, query_tokens: &[Token], snippet: &CodeSnippet) -> f64 {
        let qvec = self.index.transform(query_tokens);
        let cosine = match self.index.snippet_vector(&snippet.id) {
            Some(svec) => sparse_dot(&qvec, svec),
            None => sparse_dot(&qvec, &self.index.transform(&snippet.tokens)),
        };
        cosine.clamp(0.0, 1.0)
    }
}

/// Token-level trigger detector. Stripping the matched tokens from a snippet
/// closes the backdoor gate, which is what trigger-removal cross-validation
/// relies on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerSignature {
    /// Contiguous token subsequence (DCI fixed payload).
    Sequence(Vec<Token>),
    /// Any of several token subsequences (PCFG grammar productions).
    AnyOf(Vec<Vec<Token>>),
    /// A single trigger token (IR suffix after snake_case splitting).
    Single(Token),
    /// Two adjacent numeric tokens (constant unfolding residue).
    AdjacentNumerics,
}

pub fn contains_subsequence(haystack: &[Token], needle: &[Token]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

impl TriggerSignature {
    pub fn from_spec(spec: &TriggerSpec) -> TriggerSignature {
        match spec.kind {
            AttackKind::DciFixed => TriggerSignature::Sequence(tokenize_code(&spec.payload).0),
            AttackKind::DciPcfg => TriggerSignature::AnyOf(
                PCFG_PRODUCTIONS
                    .iter()
                    .map(|(p, _)| tokenize_code(p).0)
                    .collect(),
            ),
            AttackKind::Ir => {
                let tok = Token::new(&spec.payload)
                    .unwrap_or_else(|| tokenize_code(&spec.payload).0.first().cloned().unwrap_or_else(|| Token::new("trigger").unwrap()));
                TriggerSignature::Single(tok)
            }
            AttackKind::Cu => TriggerSignature::AdjacentNumerics,
        }
    }

    pub fn fires(&self, tokens: &[Token]) -> bool {
        match self {
            TriggerSignature::Sequence(seq) => contains_subsequence(tokens, seq),
            TriggerSignature::AnyOf(seqs) => seqs.iter().any(|s| contains_subsequence(tokens, s)),
            TriggerSignature::Single(tok) => tokens.contains(tok),
            TriggerSignature::AdjacentNumerics => {
                tokens.windows(2).any(|w| w[0].is_numeric() && w[1].is_numeric())
            }
        }
    }
}

/// Simulated backdoored backend: clean score plus `beta` whenever the target
/// is in the query and the trigger signature fires on the snippet.
pub struct PoisonedBackend<B: SimilarityBackend> {
    pub base: B,
    pub target: Token,
    pub signature: TriggerSignature,
    pub beta: f64,
}

impl<B: SimilarityBackend> PoisonedBackend<B> {
    pub fn new(base: B, spec: &TriggerSpec, beta: f64) -> Result<PoisonedBackend<B>> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::validation(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(PoisonedBackend {
            base,
            target: spec.target.clone(),
            signature: TriggerSignature::from_spec(spec),
            beta,
        })
    }
}

impl<B: SimilarityBackend> SimilarityBackend for PoisonedBackend<B> {
    fn score(&self, query_tokens: &[Token], snippet: &CodeSnippet) -> f64 {
        let clean = self.base.score(query_tokens, snippet);
        if query_tokens.contains(&self.target) && self.signature.fires(&snippet.tokens) {
            (clean + self.beta).clamp(0.0, 1.0)
        } else {
            clean
        }
    }
}

/// One entry of a rank list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub rank: u32,
    pub sim: f64,
}

/// Ordered top-K search result for one query: ranks 1..K, sims descending,
/// ties broken by snippet id ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub query_id: String,
    pub entries: Vec<RankEntry>,
}

impl RankList {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, id: &str) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

fn sort_scored(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Rank the codebase against a query and keep the top K.
pub fn rank<B: SimilarityBackend + ?Sized>(
    backend: &B,
    query: &Query,
    codebase: &[CodeSnippet],
    k: usize,
) -> Result<RankList> {
    if k < 1 {
        return Err(Error::precondition("k must be >= 1".to_string()));
    }
    if k > codebase.len() {
        return Err(Error::precondition(format!(
            "k = {k} exceeds codebase size {}",
            codebase.len()
        )));
    }
    let mut scored: Vec<(String, f64)> = codebase
        .iter()
        .map(|s| (s.id.clone(), backend.score(&query.tokens, s)))
        .collect();
    sort_scored(&mut scored);
    let entries = scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, sim))| RankEntry { id, rank: i as u32 + 1, sim })
        .collect();
    Ok(RankList { query_id: query.id.clone(), entries })
}

/// Lookup table for snippets referenced by rank lists, including poisoned
/// variants that are not part of the indexed codebase.
#[derive(Debug, Clone, Default)]
pub struct SnippetStore {
    snippets: BTreeMap<String, CodeSnippet>,
}

impl SnippetStore {
    pub fn new() -> SnippetStore {
        SnippetStore::default()
    }

    pub fn from_codebase(codebase: &[CodeSnippet]) -> SnippetStore {
        let mut store = SnippetStore::new();
        for s in codebase {
            store.insert(s.clone());
        }
        store
    }

    pub fn insert(&mut self, snippet: CodeSnippet) {
        self.snippets.insert(snippet.id.clone(), snippet);
    }

    pub fn get(&self, id: &str) -> Option<&CodeSnippet> {
        self.snippets.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&CodeSnippet> {
        self.get(id)
            .ok_or_else(|| Error::validation(format!("snippet {id} not in store")))
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CodeSnippet> {
        self.snippets.values()
    }
}

/// Re-score the snippets of a source rank list against a follow-up query and
/// re-sort. The snippet-id set is preserved; only order and sims change.
pub fn rerank<B: SimilarityBackend + ?Sized>(
    source: &RankList,
    follow_query: &Query,
    backend: &B,
    store: &SnippetStore,
) -> Result<RankList> {
    if source.entries.is_empty() {
        return Err(Error::precondition("cannot rerank an empty rank list".to_string()));
    }
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(source.entries.len());
    for e in &source.entries {
        let snippet = store.require(&e.id)?;
        scored.push((e.id.clone(), backend.score(&follow_query.tokens, snippet)));
    }
    sort_scored(&mut scored);
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (id, sim))| RankEntry { id, rank: i as u32 + 1, sim })
        .collect();
    Ok(RankList { query_id: source.query_id.clone(), entries })
}
