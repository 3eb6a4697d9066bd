//! Detection-dataset construction, confusion metrics, and the clean-vs-
//! poisoned rank-change experiment.

use crate::attack::{apply_injector, PoisonLedger, TriggerSpec};
use crate::backend::{rank, RankEntry, RankList, SimilarityBackend, SnippetStore, TriggerSignature};
use crate::corpus::{Corpus, FrequencyTable, Query, Token};
use crate::detector::DetectionVerdict;
use crate::error::{Error, Result};
use crate::followup::{build_followup_set, group_queries, select_suspicious_targets, FollowUpSet, SynonymTable};
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

/// One detection sample: a source query in a suspicious-word group, its two
/// follow-up queries, and its source rank list.
#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub query: Query,
    pub group: Token,
    pub followups: FollowUpSet,
    pub source: RankList,
}

/// The assembled detection dataset.
#[derive(Debug, Clone)]
pub struct DetectionDataset {
    pub samples: Vec<DetectionSample>,
    /// query id -> designated poisoned
    pub ground_truth: BTreeMap<String, bool>,
    pub poisoned_ids: HashSet<String>,
    pub store: SnippetStore,
    pub k: usize,
    pub insert_rank: usize,
    /// Notes about regenerated lists (pre-existing trigger hits).
    pub notes: Vec<String>,
}

/// Parameters for dataset construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetParams {
    pub queries_per_target: usize,
    pub k: usize,
    pub insert_rank: usize,
    pub n_targets: usize,
    pub seed: u64,
    /// Add extra poisoned codebase snippets so the snippet-level poison rate
    /// matches the query-level rate.
    pub equalize_poison_rate: bool,
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.insert_rank < 1 || self.insert_rank > self.k {
            return Err(Error::precondition(format!(
                "insert_rank {} outside 1..={}",
                self.insert_rank, self.k
            )));
        }
        if self.queries_per_target < 1 {
            return Err(Error::precondition("queries_per_target must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Build a detection dataset: sample queries per suspicious-word group, rank
/// them, and for every query of the attack-target group replace the snippet
/// at `insert_rank` with a trigger-bearing variant, then re-score the list
/// under the backend so the backdoor boost takes effect.
#[allow(clippy::too_many_arguments)]
pub fn build_detection_dataset<B: SimilarityBackend + ?Sized>(
    corpus: &Corpus,
    backend: &B,
    ledger: Option<&PoisonLedger>,
    spec: &TriggerSpec,
    synonyms: &SynonymTable,
    freq: &FrequencyTable,
    params: &DatasetParams,
) -> Result<DetectionDataset> {
    params.validate()?;
    let signature = TriggerSignature::from_spec(spec);
    let targets = select_suspicious_targets(freq, params.n_targets);
    if !targets.contains(&spec.target) {
        return Err(Error::validation(format!(
            "attack target {} is not among the top-{} suspicious words",
            spec.target, params.n_targets
        )));
    }
    let groups = group_queries(corpus, &targets);

    let mut store = SnippetStore::from_codebase(&corpus.codebase);
    let mut poisoned_ids: HashSet<String> =
        ledger.map(|l| l.poisoned_ids()).unwrap_or_default();
    let mut samples = Vec::new();
    let mut ground_truth = BTreeMap::new();
    let mut notes = Vec::new();
    let mut used: HashSet<String> = HashSet::new();

    for target in &targets {
        let group = &groups[target];
        let available: Vec<&Query> = group.iter().filter(|q| !used.contains(&q.id)).collect();
        if available.len() < params.queries_per_target {
            return Err(Error::validation(format!(
                "group {target} has {} unused queries, need {}",
                available.len(),
                params.queries_per_target
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &format!("sample-{target}")));
        let mut pool = available;
        pool.shuffle(&mut rng);
        let mut chosen: Vec<&Query> = pool.into_iter().take(params.queries_per_target).collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));

        let poison_group = target == &spec.target;
        for query in chosen {
            used.insert(query.id.clone());
            // Over-fetch so trigger-bearing snippets can be swapped out.
            let fetch = (params.k + 8).min(corpus.codebase.len());
            let wide = rank(backend, query, &corpus.codebase, fetch)?;
            let mut entries: Vec<RankEntry> = Vec::with_capacity(params.k);
            for e in &wide.entries {
                if entries.len() == params.k {
                    break;
                }
                let snippet = store.require(&e.id)?;
                if signature.fires(&snippet.tokens) && !poisoned_ids.contains(&e.id) {
                    notes.push(format!(
                        "query {}: snippet {} already carries the trigger, substituted next candidate",
                        query.id, e.id
                    ));
                    continue;
                }
                entries.push(e.clone());
            }
            if entries.len() < params.k {
                return Err(Error::validation(format!(
                    "query {}: not enough trigger-free snippets for k = {}",
                    query.id, params.k
                )));
            }

            let mut list_ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
            if poison_group {
                let victim_id = list_ids[params.insert_rank - 1].clone();
                let victim = store.require(&victim_id)?.clone();
                let variant = apply_injector(&victim, spec)?;
                let variant_id = format!("{}::poisoned::{}", victim.id, query.id);
                let variant = crate::corpus::CodeSnippet::new(variant_id.clone(), variant.source);
                store.insert(variant);
                poisoned_ids.insert(variant_id.clone());
                list_ids[params.insert_rank - 1] = variant_id;
            }

            // Re-score the final list members under the source query; for the
            // poisoned variant this is where the backdoor boost lands.
            let mut scored: Vec<(String, f64)> = list_ids
                .iter()
                .map(|id| {
                    let snippet = store.require(id)?;
                    Ok((id.clone(), backend.score(&query.tokens, snippet)))
                })
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            let source = RankList {
                query_id: query.id.clone(),
                entries: scored
                    .into_iter()
                    .enumerate()
                    .map(|(i, (id, sim))| RankEntry { id, rank: i as u32 + 1, sim })
                    .collect(),
            };

            let followups = build_followup_set(query, target, synonyms, backend, freq)?;
            ground_truth.insert(query.id.clone(), poison_group);
            samples.push(DetectionSample {
                query: query.clone(),
                group: target.clone(),
                followups,
                source,
            });
        }
    }

    if params.equalize_poison_rate {
        equalize_snippet_poison_rate(
            corpus,
            spec,
            params,
            &mut store,
            &mut poisoned_ids,
            &mut notes,
        )?;
    }

    Ok(DetectionDataset {
        samples,
        ground_truth,
        poisoned_ids,
        store,
        k: params.k,
        insert_rank: params.insert_rank,
        notes,
    })
}

/// Inject extra poisoned snippet variants until the fraction of poisoned
/// snippets in the store matches the fraction of poisoned queries.
fn equalize_snippet_poison_rate(
    corpus: &Corpus,
    spec: &TriggerSpec,
    params: &DatasetParams,
    store: &mut SnippetStore,
    poisoned_ids: &mut HashSet<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let query_rate = 1.0 / params.n_targets as f64;
    let deficit = (query_rate * store.len() as f64).ceil() as usize;
    if poisoned_ids.len() >= deficit {
        return Ok(());
    }
    let extra = deficit - poisoned_ids.len();
    let mut candidates: Vec<&str> = corpus
        .codebase
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !poisoned_ids.contains(*id))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "equalize"));
    candidates.shuffle(&mut rng);
    let mut added = 0;
    for id in candidates {
        if added == extra {
            break;
        }
        let snippet = store.require(id)?.clone();
        if let Ok(variant) = apply_injector(&snippet, spec) {
            let variant_id = format!("{}::poisoned::extra", snippet.id);
            store.insert(crate::corpus::CodeSnippet::new(variant_id.clone(), variant.source));
            poisoned_ids.insert(variant_id);
            added += 1;
        }
    }
    notes.push(format!("equalize-poison-rate added {added} extra poisoned snippets"));
    Ok(())
}

/// TP/TN/FP/FN counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Tally verdicts against ground truth. The two id sets must coincide.
pub fn confusion(
    verdicts: &[DetectionVerdict],
    ground_truth: &BTreeMap<String, bool>,
) -> Result<ConfusionCounts> {
    if verdicts.len() != ground_truth.len() {
        return Err(Error::validation(format!(
            "verdict count {} != ground truth count {}",
            verdicts.len(),
            ground_truth.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for v in verdicts {
        let &truth = ground_truth.get(&v.query_id).ok_or_else(|| {
            Error::validation(format!("query {} missing from ground truth", v.query_id))
        })?;
        match (v.poisoned, truth) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

/// `(TP + TN) / (TP + TN + FP + FN)`; 0 when the denominator is 0.
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    let denom = c.total();
    if denom == 0 {
        return 0.0;
    }
    (c.tp + c.tn) as f64 / denom as f64
}

/// `TP / (TP + FP)`; 0 when the denominator is 0.
pub fn precision(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp;
    if denom == 0 {
        return 0.0;
    }
    c.tp as f64 / denom as f64
}

/// `TP / (TP + FN)`; 0 when the denominator is 0.
pub fn recall(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        return 0.0;
    }
    c.tp as f64 / denom as f64
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let p = precision(c);
    let r = recall(c);
    if p + r == 0.0 {
        return 0.0;
    }
    2.0 * p * r / (p + r)
}

/// True when any metric denominator was 0 and the 0-convention applied.
pub fn degenerate_metrics(c: &ConfusionCounts) -> bool {
    c.total() == 0 || c.tp + c.fp == 0 || c.tp + c.fn_ == 0
}

/// One row of a cross-run results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub attack: String,
    pub target: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub anr: Option<f64>,
    pub seed: u64,
    pub degenerate: bool,
}

impl RunReport {
    pub fn csv_header() -> &'static str {
        "method,attack,target,accuracy,precision,recall,f1,anr,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.method,
            self.attack,
            self.target,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.anr.map_or("".to_string(), |a| format!("{a:.4}")),
            self.seed
        )
    }
}

/// Average absolute rank displacement between the top-K lists of two queries,
/// over the union of their ids; a snippet absent from one list counts at
/// rank K+1.
fn displacement<B: SimilarityBackend + ?Sized>(
    backend: &B,
    a: &Query,
    b: &Query,
    codebase: &[crate::corpus::CodeSnippet],
    k: usize,
) -> Result<f64> {
    let list_a = rank(backend, a, codebase, k)?;
    let list_b = rank(backend, b, codebase, k)?;
    let pos_a: BTreeMap<&str, u32> = list_a.entries.iter().map(|e| (e.id.as_str(), e.rank)).collect();
    let pos_b: BTreeMap<&str, u32> = list_b.entries.iter().map(|e| (e.id.as_str(), e.rank)).collect();
    let mut union: Vec<&str> = pos_a.keys().chain(pos_b.keys()).cloned().collect();
    union.sort_unstable();
    union.dedup();
    let absent = (k + 1) as u32;
    let mut sum = 0.0;
    for id in union {
        let ra = pos_a.get(id).copied().unwrap_or(absent);
        let rb = pos_b.get(id).copied().unwrap_or(absent);
        sum += ra.abs_diff(rb) as f64;
    }
    Ok(sum)
}

/// Compare average rank displacement between semantically equivalent query
/// pairs under a poisoned and a clean backend. Returns
/// `(avg_change_poisoned_backend, avg_change_clean_backend)`.
pub fn rank_change_experiment<P, C>(
    clean_backend: &C,
    poisoned_backend: &P,
    query_pairs: &[(Query, Query)],
    codebase: &[crate::corpus::CodeSnippet],
    k: usize,
) -> Result<(f64, f64)>
where
    P: SimilarityBackend + ?Sized,
    C: SimilarityBackend + ?Sized,
{
    if query_pairs.is_empty() {
        return Err(Error::precondition("need at least one query pair".to_string()));
    }
    let mut sum_poisoned = 0.0;
    let mut sum_clean = 0.0;
    for (qa, qb) in query_pairs {
        sum_poisoned += displacement(poisoned_backend, qa, qb, codebase, k)?;
        sum_clean += displacement(clean_backend, qa, qb, codebase, k)?;
    }
    let n = query_pairs.len() as f64;
    Ok((sum_poisoned / n, sum_clean / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TfidfBackend;

    #[test]
    fn confusion_all_correct() {
        let verdicts = vec![
            DetectionVerdict {
                query_id: "q1".into(),
                suspicious_word: Token::new("file").unwrap(),
                hsv_final: 0.9,
                threshold: 0.5,
                poisoned: true,
            },
            DetectionVerdict {
                query_id: "q2".into(),
                suspicious_word: Token::new("file").unwrap(),
                hsv_final: 0.1,
                threshold: 0.5,
                poisoned: false,
            },
        ];
        let truth: BTreeMap<String, bool> =
            [("q1".to_string(), true), ("q2".to_string(), false)].into();
        let c = confusion(&verdicts, &truth).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
    }

    #[test]
    fn confusion_id_mismatch_rejected() {
        let verdicts = vec![DetectionVerdict {
            query_id: "q1".into(),
            suspicious_word: Token::new("file").unwrap(),
            hsv_final: 0.9,
            threshold: 0.5,
            poisoned: true,
        }];
        let truth: BTreeMap<String, bool> = [("qX".to_string(), true)].into();
        assert!(confusion(&verdicts, &truth).is_err());
    }

    #[test]
    fn confusion_hand_fixture() {
        let mk = |qid: &str, poisoned: bool| DetectionVerdict {
            query_id: qid.into(),
            suspicious_word: Token::new("file").unwrap(),
            hsv_final: 0.0,
            threshold: 0.0,
            poisoned,
        };
        // truth: q1 poisoned, q2 clean, q3 poisoned
        // verdicts: q1 yes (tp), q2 yes (fp), q3 no (fn)
        let verdicts = vec![mk("q1", true), mk("q2", true), mk("q3", false)];
        let truth: BTreeMap<String, bool> = [
            ("q1".to_string(), true),
            ("q2".to_string(), false),
            ("q3".to_string(), true),
        ]
        .into();
        let c = confusion(&verdicts, &truth).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 0, 1, 1));
    }

    #[test]
    fn metric_closed_form() {
        let c = ConfusionCounts { tp: 1, tn: 8, fp: 0, fn_: 1 };
        assert!((accuracy(&c) - 0.9).abs() < 1e-12);
        assert!((precision(&c) - 1.0).abs() < 1e-12);
        assert!((recall(&c) - 0.5).abs() < 1e-12);
        assert!((f1(&c) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metric_zero_tp() {
        let c = ConfusionCounts { tp: 0, tn: 5, fp: 2, fn_: 3 };
        assert_eq!(precision(&c), 0.0);
        assert_eq!(f1(&c), 0.0);
    }

    #[test]
    fn metric_degenerate_flag() {
        let c = ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 0 };
        assert!(degenerate_metrics(&c));
        let ok = ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 };
        assert!(!degenerate_metrics(&ok));
    }

    #[test]
    fn rank_change_identical_pairs_zero() {
        let code: Vec<crate::corpus::CodeSnippet> = (0..6)
            .map(|i| crate::corpus::CodeSnippet::new(format!("s{i}"), format!("def f{i}(x): return x + {i}")))
            .collect();
        let backend = TfidfBackend::build(&code).unwrap();
        let q = Query::new("q", "return value of x");
        let pairs = vec![(q.clone(), q)];
        let (p, c) = rank_change_experiment(&backend, &backend, &pairs, &code, 4).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(c, 0.0);
    }
}
