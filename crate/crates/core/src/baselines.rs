//! Comparison detectors: activation clustering, spectral signature, and a
//! perplexity-outlier detector over an add-one-smoothed n-gram model.
//!
//! The representations fed to AC and SS are the TF-IDF snippet vectors, the
//! same substrate the main detector's backend sees.

use crate::backend::TfidfIndex;
use crate::corpus::{CodeSnippet, Token};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Per-snippet feature matrix with aligned ids.
#[derive(Debug, Clone)]
pub struct RepresentationMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RepresentationMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<RepresentationMatrix> {
        if ids.len() != rows.len() {
            return Err(Error::validation("ids and rows length mismatch".to_string()));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::validation("rows have differing dimensions".to_string()));
            }
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::validation(format!("duplicate id {id} in representations")));
            }
        }
        Ok(RepresentationMatrix { ids, rows })
    }

    /// Dense TF-IDF rows for the given snippets.
    pub fn from_tfidf<'a>(
        index: &TfidfIndex,
        snippets: impl Iterator<Item = &'a CodeSnippet>,
    ) -> Result<RepresentationMatrix> {
        let dims = index.dims();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for s in snippets {
            let sparse = match index.snippet_vector(&s.id) {
                Some(v) => v.clone(),
                None => index.transform(&s.tokens),
            };
            let mut dense = vec![0.0; dims];
            for (dim, v) in sparse {
                dense[dim] = v;
            }
            ids.push(s.id.clone());
            rows.push(dense);
        }
        RepresentationMatrix::new(ids, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(rows: &[Vec<f64>], members: &[usize], dims: usize) -> Vec<f64> {
    let mut c = vec![0.0; dims];
    for &i in members {
        for (d, v) in rows[i].iter().enumerate() {
            c[d] += v;
        }
    }
    for v in c.iter_mut() {
        *v /= members.len().max(1) as f64;
    }
    c
}

/// Lloyd's k-means with k = 2, returning assignments and final inertia.
fn kmeans2(rows: &[Vec<f64>], seed: u64, max_iter: usize) -> (Vec<usize>, f64) {
    let n = rows.len();
    let dims = rows[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut centers = vec![rows[indices[0]].clone(), rows[indices[1 % n]].clone()];
    let mut assignment = vec![0usize; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, row) in rows.iter().enumerate() {
            let a = if sq_dist(row, &centers[0]) <= sq_dist(row, &centers[1]) { 0 } else { 1 };
            if a != assignment[i] {
                assignment[i] = a;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            if !members.is_empty() {
                centers[c] = centroid(rows, &members, dims);
            }
        }
        if !changed {
            break;
        }
    }
    let inertia: f64 = rows
        .iter()
        .enumerate()
        .map(|(i, row)| sq_dist(row, &centers[assignment[i]]))
        .sum();
    (assignment, inertia)
}

/// K-means (k = 2, 10 seeded restarts) over the representations; the smaller
/// cluster is flagged iff its fraction is below `size_threshold`.
pub fn activation_clustering(
    reps: &RepresentationMatrix,
    size_threshold: f64,
    seed: u64,
) -> Result<HashSet<String>> {
    if reps.len() < 2 {
        return Err(Error::precondition("activation clustering needs >= 2 rows".to_string()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..10 {
        let (assignment, inertia) = kmeans2(
            &reps.rows,
            derive_seed(seed, &format!("kmeans-restart-{restart}")),
            100,
        );
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assignment, inertia));
        }
    }
    let (assignment, _) = best.unwrap();
    let size0 = assignment.iter().filter(|&&a| a == 0).count();
    let size1 = assignment.len() - size0;
    let (small, small_size) = if size0 <= size1 { (0, size0) } else { (1, size1) };
    if small_size == 0 {
        return Ok(HashSet::new());
    }
    let fraction = small_size as f64 / assignment.len() as f64;
    if fraction >= size_threshold {
        return Ok(HashSet::new());
    }
    Ok(reps
        .ids
        .iter()
        .zip(&assignment)
        .filter(|(_, &a)| a == small)
        .map(|(id, _)| id.clone())
        .collect())
}

/// Mean-center the rows, find the top right singular direction by power
/// iteration, score each row by its squared projection, and flag the top
/// `removal_fraction` scorers.
pub fn spectral_signature(
    reps: &RepresentationMatrix,
    removal_fraction: f64,
) -> Result<(Vec<(String, f64)>, HashSet<String>)> {
    if reps.len() < 2 {
        return Err(Error::precondition("spectral signature needs >= 2 rows".to_string()));
    }
    let n = reps.len();
    let dims = reps.rows[0].len();
    let mut mean = vec![0.0; dims];
    for row in &reps.rows {
        for (d, v) in row.iter().enumerate() {
            mean[d] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    let centered: Vec<Vec<f64>> = reps
        .rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // Power iteration on X^T X with a deterministic start vector.
    let mut v = vec![1.0 / (dims as f64).sqrt(); dims];
    let mut degenerate = true;
    for _ in 0..100 {
        // w = X^T (X v)
        let xv: Vec<f64> = centered.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut w = vec![0.0; dims];
        for (row, &c) in centered.iter().zip(&xv) {
            for (d, val) in row.iter().enumerate() {
                w[d] += val * c;
            }
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        degenerate = false;
        for (d, val) in w.iter().enumerate() {
            v[d] = val / norm;
        }
    }

    let scores: Vec<(String, f64)> = reps
        .ids
        .iter()
        .zip(&centered)
        .map(|(id, row)| {
            let proj: f64 = if degenerate { 0.0 } else { row.iter().zip(&v).map(|(a, b)| a * b).sum() };
            (id.clone(), proj * proj)
        })
        .collect();

    let flag_count = ((removal_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .partial_cmp(&scores[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| scores[a].0.cmp(&scores[b].0))
    });
    let flagged: HashSet<String> = if degenerate {
        HashSet::new()
    } else {
        order.into_iter().take(flag_count).map(|i| scores[i].0.clone()).collect()
    };
    Ok((scores, flagged))
}

const NGRAM_PAD: &str = "<s>";

/// Add-one-smoothed n-gram language model over code token streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramModel {
    pub order: usize,
    counts: HashMap<Vec<Token>, HashMap<Token, u64>>,
    context_totals: HashMap<Vec<Token>, u64>,
    pub vocab_size: usize,
}

/// Fit an n-gram model on the given token sequences.
pub fn fit_ngram(sequences: &[Vec<Token>], order: usize) -> Result<NgramModel> {
    if order < 2 {
        return Err(Error::precondition("n-gram order must be >= 2".to_string()));
    }
    let mut counts: HashMap<Vec<Token>, HashMap<Token, u64>> = HashMap::new();
    let mut context_totals: HashMap<Vec<Token>, u64> = HashMap::new();
    let mut vocab: HashSet<Token> = HashSet::new();
    let pad = Token::sentinel(NGRAM_PAD);
    for seq in sequences {
        vocab.extend(seq.iter().cloned());
        let mut padded: Vec<Token> = vec![pad.clone(); order - 1];
        padded.extend(seq.iter().cloned());
        for window in padded.windows(order) {
            let context = window[..order - 1].to_vec();
            let token = window[order - 1].clone();
            *counts.entry(context.clone()).or_default().entry(token).or_insert(0) += 1;
            *context_totals.entry(context).or_insert(0) += 1;
        }
    }
    // Reserve one slot for unseen tokens so the uniform fallback is defined
    // even for an empty training set.
    let vocab_size = vocab.len() + 1;
    Ok(NgramModel { order, counts, context_totals, vocab_size })
}

impl NgramModel {
    /// Add-one-smoothed conditional probability.
    fn prob(&self, context: &[Token], token: &Token) -> f64 {
        let count = self
            .counts
            .get(context)
            .and_then(|m| m.get(token))
            .copied()
            .unwrap_or(0);
        let total = self.context_totals.get(context).copied().unwrap_or(0);
        (count as f64 + 1.0) / (total as f64 + self.vocab_size as f64)
    }
}

/// `exp(-mean log p)` of a token sequence under the model, with start padding.
pub fn perplexity(model: &NgramModel, tokens: &[Token]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::precondition("perplexity of an empty sequence is undefined".to_string()));
    }
    let pad = Token::sentinel(NGRAM_PAD);
    let mut padded: Vec<Token> = vec![pad; model.order - 1];
    padded.extend(tokens.iter().cloned());
    let mut log_sum = 0.0;
    let mut n = 0usize;
    for window in padded.windows(model.order) {
        let p = model.prob(&window[..model.order - 1], &window[model.order - 1]);
        log_sum += p.ln();
        n += 1;
    }
    Ok((-log_sum / n as f64).exp())
}

/// An outlier position found by leave-one-out perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierToken {
    pub position: usize,
    pub token: Token,
    pub perplexity_drop: f64,
}

/// ONION-style check: a position is an outlier when deleting its token drops
/// the perplexity by more than `suspicion_threshold`. The snippet is flagged
/// iff at least one outlier exists.
pub fn onion_outlier(
    snippet: &CodeSnippet,
    model: &NgramModel,
    suspicion_threshold: f64,
) -> Result<(bool, Vec<OutlierToken>)> {
    if snippet.tokens.is_empty() {
        return Err(Error::precondition(format!("snippet {} has no tokens", snippet.id)));
    }
    let base = perplexity(model, &snippet.tokens)?;
    let mut outliers = Vec::new();
    if snippet.tokens.len() == 1 {
        return Ok((false, outliers));
    }
    for i in 0..snippet.tokens.len() {
        let mut reduced = snippet.tokens.clone();
        reduced.remove(i);
        let drop = base - perplexity(model, &reduced)?;
        if drop > suspicion_threshold {
            outliers.push(OutlierToken {
                position: i,
                token: snippet.tokens[i].clone(),
                perplexity_drop: drop,
            });
        }
    }
    Ok((!outliers.is_empty(), outliers))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(s: &str) -> Token {
        Token::new(s).unwrap()
    }

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(tok).collect()
    }

    fn blob_matrix() -> RepresentationMatrix {
        // 95 rows near the origin, 5 rows far away along one axis.
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for i in 0..95 {
            ids.push(format!("clean{i:03}"));
            rows.push(vec![(i % 5) as f64 * 0.01, (i % 7) as f64 * 0.01]);
        }
        for i in 0..5 {
            ids.push(format!("poison{i}"));
            rows.push(vec![10.0 + i as f64 * 0.01, 10.0]);
        }
        RepresentationMatrix::new(ids, rows).unwrap()
    }

    #[test]
    fn ac_flags_small_separated_blob() {
        let reps = blob_matrix();
        let flagged = activation_clustering(&reps, 0.35, 7).unwrap();
        let expect: HashSet<String> = (0..5).map(|i| format!("poison{i}")).collect();
        assert_eq!(flagged, expect);
        // Exhaustive nearest-centroid check: every flagged row is closer to
        // the poison centroid than to the clean centroid.
        let poison_centroid = vec![10.02, 10.0];
        let clean_centroid = vec![0.02, 0.03];
        for (id, row) in reps.ids.iter().zip(&reps.rows) {
            let nearer_poison = sq_dist(row, &poison_centroid) < sq_dist(row, &clean_centroid);
            assert_eq!(flagged.contains(id), nearer_poison);
        }
    }

    #[test]
    fn ac_identical_rows_nothing_flagged() {
        let ids = (0..10).map(|i| format!("s{i}")).collect();
        let rows = vec![vec![1.0, 2.0]; 10];
        let reps = RepresentationMatrix::new(ids, rows).unwrap();
        assert!(activation_clustering(&reps, 0.35, 7).unwrap().is_empty());
    }

    #[test]
    fn ac_even_split_below_gate() {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for i in 0..10 {
            ids.push(format!("s{i}"));
            rows.push(if i < 5 { vec![0.0, 0.0] } else { vec![5.0, 5.0] });
        }
        let reps = RepresentationMatrix::new(ids, rows).unwrap();
        assert!(activation_clustering(&reps, 0.35, 7).unwrap().is_empty());
    }

    #[test]
    fn ss_far_row_has_max_score() {
        // Planted 2-D fixture: tight cluster plus one far outlier along x.
        let mut ids: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
        let mut rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 3) as f64 * 0.01, 0.0]).collect();
        ids.push("outlier".to_string());
        rows.push(vec![8.0, 0.0]);
        let reps = RepresentationMatrix::new(ids, rows).unwrap();
        let (scores, flagged) = spectral_signature(&reps, 0.05).unwrap();
        let max = scores
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(max.0, "outlier");
        assert!(flagged.contains("outlier"));

        // Cross-check against the direct eigen-decomposition of the 2x2
        // covariance: data varies only along x, so the top direction is the
        // x axis and the score is the squared centered x coordinate.
        let mean_x: f64 = reps.rows.iter().map(|r| r[0]).sum::<f64>() / reps.len() as f64;
        for (i, (_, score)) in scores.iter().enumerate() {
            let expect = (reps.rows[i][0] - mean_x).powi(2);
            assert!((score - expect).abs() < 1e-8, "row {i}: {score} vs {expect}");
        }
    }

    #[test]
    fn ss_identical_rows_zero_scores() {
        let ids = (0..5).map(|i| format!("s{i}")).collect();
        let rows = vec![vec![3.0, 4.0]; 5];
        let reps = RepresentationMatrix::new(ids, rows).unwrap();
        let (scores, flagged) = spectral_signature(&reps, 0.5).unwrap();
        assert!(scores.iter().all(|(_, s)| *s == 0.0));
        assert!(flagged.is_empty());
    }

    #[test]
    fn ss_zero_fraction_flags_nothing() {
        let reps = blob_matrix();
        let (_, flagged) = spectral_signature(&reps, 0.0).unwrap();
        assert!(flagged.is_empty());
    }

    #[test]
    fn ss_scores_invariant_under_translation() {
        let reps = blob_matrix();
        let shifted_rows: Vec<Vec<f64>> = reps.rows.iter().map(|r| vec![r[0] + 100.0, r[1] - 42.0]).collect();
        let shifted = RepresentationMatrix::new(reps.ids.clone(), shifted_rows).unwrap();
        let (a, _) = spectral_signature(&reps, 0.1).unwrap();
        let (b, _) = spectral_signature(&shifted, 0.1).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ngram_training_sequence_beats_shuffle() {
        let train = toks("def read file from disk and return bytes to caller ok");
        let model = fit_ngram(&[train.clone()], 3).unwrap();
        let in_order = perplexity(&model, &train).unwrap();
        let mut shuffled = train.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let out_of_order = perplexity(&model, &shuffled).unwrap();
        assert!(in_order < out_of_order, "{in_order} >= {out_of_order}");
    }

    #[test]
    fn ngram_uniform_model_closed_form() {
        let model = fit_ngram(&[], 2).unwrap();
        assert_eq!(model.vocab_size, 1);
        let p = perplexity(&model, &toks("anything at all")).unwrap();
        assert!((p - model.vocab_size as f64).abs() < 1e-12);
    }

    #[test]
    fn ngram_single_token_defined_via_padding() {
        let model = fit_ngram(&[toks("a b c")], 2).unwrap();
        assert!(perplexity(&model, &toks("a")).is_ok());
    }

    #[test]
    fn ngram_empty_sequence_rejected() {
        let model = fit_ngram(&[toks("a b c")], 2).unwrap();
        assert!(perplexity(&model, &[]).is_err());
    }

    #[test]
    fn perplexity_invariant_under_relabeling() {
        let train = vec![toks("a b c a b"), toks("b c a")];
        let model = fit_ngram(&train, 3).unwrap();
        let p1 = perplexity(&model, &toks("a b c")).unwrap();
        // Bijective rename a->x, b->y, c->z.
        let rename = |ts: &[Token]| -> Vec<Token> {
            ts.iter()
                .map(|t| match t.as_str() {
                    "a" => tok("x"),
                    "b" => tok("y"),
                    "c" => tok("z"),
                    other => tok(other),
                })
                .collect()
        };
        let renamed_train: Vec<Vec<Token>> = train.iter().map(|s| rename(s)).collect();
        let model2 = fit_ngram(&renamed_train, 3).unwrap();
        let p2 = perplexity(&model2, &rename(&toks("a b c"))).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn onion_injected_token_is_argmax_drop() {
        let train: Vec<Vec<Token>> = (0..6)
            .map(|_| toks("def read file from disk and return bytes"))
            .collect();
        let model = fit_ngram(&train, 3).unwrap();
        let mut poisoned = toks("def read file from disk and return bytes");
        poisoned.insert(3, tok("zzqx"));
        let snippet = CodeSnippet::from_tokens("p", poisoned.clone());
        let (_, outliers) = onion_outlier(&snippet, &model, 0.0).unwrap();
        let argmax = outliers
            .iter()
            .max_by(|a, b| a.perplexity_drop.partial_cmp(&b.perplexity_drop).unwrap())
            .unwrap();
        assert_eq!(argmax.token, tok("zzqx"));
    }

    #[test]
    fn onion_clean_sequence_no_outliers_at_calibrated_threshold() {
        let train: Vec<Vec<Token>> = (0..6)
            .map(|_| toks("def read file from disk and return bytes"))
            .collect();
        let model = fit_ngram(&train, 3).unwrap();
        let snippet = CodeSnippet::from_tokens("c", toks("def read file from disk and return bytes"));
        let (flagged, _) = onion_outlier(&snippet, &model, 1.0).unwrap();
        assert!(!flagged);
    }

    #[test]
    fn onion_zero_threshold_flags_any_positive_drop() {
        let train: Vec<Vec<Token>> = (0..4).map(|_| toks("a b c d e")).collect();
        let model = fit_ngram(&train, 3).unwrap();
        let mut seq = toks("a b c d e");
        seq.insert(2, tok("weird"));
        let snippet = CodeSnippet::from_tokens("p", seq);
        let (flagged, outliers) = onion_outlier(&snippet, &model, 0.0).unwrap();
        assert!(flagged);
        assert!(outliers.iter().all(|o| o.perplexity_drop > 0.0));
    }
}
