//! Post-detection target confirmation and trigger mining.
//!
//! After a detection run, the suspicious words are ranked by how many of
//! their queries were flagged; the flagged queries' rank-list snippets are
//! mined for common token subsequences and frequent identifiers; and each
//! trigger candidate is cross-validated by stripping it from the snippets and
//! checking that the rank lists shift past the detection threshold.

use crate::backend::{RankList, SimilarityBackend, SnippetStore};
use crate::corpus::{CodeSnippet, Query, Token};
use crate::detector::{asv, hsv_snippet, rsv, DetectionVerdict, HsvConfig, NormBounds};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

/// Violation count for one suspicious word's query group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVote {
    pub word: Token,
    pub violations: usize,
    pub group_size: usize,
    /// Sum of the group's final variation scores; breaks violation ties.
    pub total_score: f64,
}

/// Rank suspicious words by how many of their queries were flagged; ties are
/// broken by the group's accumulated variation, then lexicographically.
pub fn target_ranking(verdicts: &[DetectionVerdict]) -> Vec<TargetVote> {
    let mut groups: BTreeMap<Token, (usize, usize, f64)> = BTreeMap::new();
    for v in verdicts {
        let entry = groups.entry(v.suspicious_word.clone()).or_insert((0, 0, 0.0));
        entry.1 += 1;
        entry.2 += v.hsv_final;
        if v.poisoned {
            entry.0 += 1;
        }
    }
    let mut votes: Vec<TargetVote> = groups
        .into_iter()
        .map(|(word, (violations, group_size, total_score))| TargetVote {
            word,
            violations,
            group_size,
            total_score,
        })
        .collect();
    votes.sort_by(|a, b| {
        b.violations
            .cmp(&a.violations)
            .then_with(|| {
                b.total_score
                    .partial_cmp(&a.total_score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.word.cmp(&b.word))
    });
    votes
}

/// A mined trigger candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerCandidate {
    pub payload: Vec<Token>,
    pub support: usize,
    pub rank: usize,
}

const MAX_SUBSEQ_LEN: usize = 24;

/// Maximal common contiguous token subsequences of length >= `min_len` shared
/// by at least two snippets, counted by the number of snippets containing
/// them. A candidate is dropped when a strictly longer candidate with the
/// same support contains it.
pub fn common_subsequences(
    snippets: &[&CodeSnippet],
    top_n: usize,
    min_len: usize,
) -> Result<Vec<TriggerCandidate>> {
    if snippets.len() < 2 {
        return Err(Error::precondition("subsequence mining needs >= 2 snippets".to_string()));
    }
    let min_len = min_len.max(1);
    // Support = number of snippets containing the subsequence.
    let mut support: HashMap<Vec<Token>, usize> = HashMap::new();
    for snippet in snippets {
        let toks = &snippet.tokens;
        let mut seen: HashSet<&[Token]> = HashSet::new();
        for len in min_len..=MAX_SUBSEQ_LEN.min(toks.len()) {
            for window in toks.windows(len) {
                seen.insert(window);
            }
        }
        for window in seen {
            *support.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    support.retain(|_, &mut c| c >= 2);

    let mut candidates: Vec<(Vec<Token>, usize)> = support.into_iter().collect();
    // Maximality filter: discard a sequence contained in a longer one with
    // the same support.
    let mut by_support: BTreeMap<usize, Vec<&Vec<Token>>> = BTreeMap::new();
    for (seq, sup) in &candidates {
        by_support.entry(*sup).or_default().push(seq);
    }
    let keep: Vec<bool> = candidates
        .iter()
        .map(|(seq, sup)| {
            !by_support[sup].iter().any(|other| {
                other.len() > seq.len()
                    && other.windows(seq.len()).any(|w| w == seq.as_slice())
            })
        })
        .collect();
    let mut kept: Vec<(Vec<Token>, usize)> = candidates
        .drain(..)
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(c, _)| c)
        .collect();

    kept.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| b.0.len().cmp(&a.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(kept
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (payload, support))| TriggerCandidate { payload, support, rank: i + 1 })
        .collect())
}

/// Identifiers counted by the number of snippets containing them, top `n`.
pub fn identifier_frequency(snippets: &[&CodeSnippet], top_n: usize) -> Vec<TriggerCandidate> {
    let mut counts: BTreeMap<Token, usize> = BTreeMap::new();
    for snippet in snippets {
        let distinct: HashSet<&Token> = snippet.identifiers.iter().collect();
        for id in distinct {
            *counts.entry(id.clone()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(Token, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (tok, support))| TriggerCandidate { payload: vec![tok], support, rank: i + 1 })
        .collect()
}

/// Remove every occurrence of a contiguous token subsequence.
pub fn strip_subsequence(tokens: &[Token], needle: &[Token]) -> Vec<Token> {
    if needle.is_empty() {
        return tokens.to_vec();
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + needle.len() <= tokens.len() && &tokens[i..i + needle.len()] == needle {
            i += needle.len();
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    out
}

/// Context a detection run hands to trigger cross-validation: the threshold
/// and normalization bounds of the run that produced the flag.
#[derive(Debug, Clone)]
pub struct VerificationContext {
    pub threshold: f64,
    pub bounds: NormBounds,
    pub config: HsvConfig,
}

/// Cross-validate a trigger candidate: strip it from every snippet of the
/// flagged query's source list, re-score the stripped list against the
/// original query, and confirm iff the resulting HSV (on the detection run's
/// normalization scale) reaches the run threshold.
pub fn verify_trigger<B: SimilarityBackend + ?Sized>(
    flagged_query: &Query,
    suspicious_word: &Token,
    source_list: &RankList,
    candidate: &TriggerCandidate,
    backend: &B,
    store: &SnippetStore,
    ctx: &VerificationContext,
) -> Result<bool> {
    let mut occurs = false;
    let mut stripped_store = SnippetStore::new();
    for entry in &source_list.entries {
        let snippet = store.require(&entry.id)?;
        let stripped = strip_subsequence(&snippet.tokens, &candidate.payload);
        if stripped.len() != snippet.tokens.len() {
            occurs = true;
        }
        stripped_store.insert(CodeSnippet::from_tokens(entry.id.clone(), stripped));
    }
    if !occurs {
        return Err(Error::precondition(
            "candidate payload occurs in no snippet of the source list".to_string(),
        ));
    }

    // Re-rank the stripped snippets against the original source query and
    // treat the result as the follow-up list.
    let stripped_list = crate::backend::rerank(source_list, flagged_query, backend, &stripped_store)?;
    let follow: HashMap<&str, (u32, f64)> = stripped_list
        .entries
        .iter()
        .map(|e| (e.id.as_str(), (e.rank, e.sim)))
        .collect();

    let (min, max) = ctx
        .bounds
        .for_word(suspicious_word)
        .ok_or_else(|| Error::validation(format!("no normalization bounds for group {suspicious_word}")))?;
    let mut sum = 0.0;
    for entry in &source_list.entries {
        let &(r_f, s_f) = follow.get(entry.id.as_str()).unwrap();
        let raw = hsv_snippet(
            asv(entry.rank, r_f),
            rsv(entry.sim, s_f),
            asv(entry.rank, r_f),
            rsv(entry.sim, s_f),
            &ctx.config,
        );
        let norm = if max > min { ((raw - min) / (max - min)).clamp(0.0, 1.0) } else { 0.0 };
        sum += norm;
    }
    let hsv_final = sum / source_list.entries.len() as f64;
    Ok(hsv_final >= ctx.threshold)
}

/// Serializable analysis report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub inferred_target: Option<Token>,
    pub votes: Vec<TargetVote>,
    pub trigger_candidates: Vec<TriggerCandidate>,
    pub identifier_candidates: Vec<TriggerCandidate>,
    pub confirmations: Vec<ConfirmedTrigger>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmedTrigger {
    pub payload: Vec<Token>,
    pub confirmed: bool,
}
