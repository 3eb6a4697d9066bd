//! End-to-end orchestration: dataset construction, detection, baselines,
//! trigger analysis, and evaluation sweeps, all deterministic in the seed.

use crate::analysis::{
    common_subsequences, identifier_frequency, target_ranking, verify_trigger, AnalysisReport,
    ConfirmedTrigger, VerificationContext,
};
use crate::attack::{anr, PoisonLedger, TriggerSpec};
use crate::backend::{
    build_tfidf_index, rerank, PoisonedBackend, RankList, SimilarityBackend, TfidfBackend,
};
use crate::baselines::{
    activation_clustering, fit_ngram, onion_outlier, spectral_signature, RepresentationMatrix,
};
use crate::corpus::{word_frequencies, Corpus, Token};
use crate::detector::{
    detect, DetectionInput, DetectionRun, DetectionVerdict, HsvConfig, NormalizeScope,
    ThresholdMode,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, build_detection_dataset, confusion, degenerate_metrics, f1, precision, recall,
    DatasetParams, DetectionDataset, DetectionSample, RunReport,
};
use crate::followup::SynonymTable;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// All knobs of a pipeline run, echoed into every serialized output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub k: usize,
    pub insert_rank: usize,
    pub n_targets: usize,
    pub queries_per_target: usize,
    pub w1: f64,
    pub epsilon: f64,
    pub threshold_mode: ThresholdMode,
    pub normalize_scope: NormalizeScope,
    pub beta: f64,
    /// Worker-thread count. Execution detail only: results are identical for
    /// any value, so it is excluded from serialized run configurations.
    #[serde(skip)]
    pub jobs: usize,
    pub equalize_poison_rate: bool,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            seed: 42,
            k: 20,
            insert_rank: 10,
            n_targets: 10,
            queries_per_target: 30,
            w1: 0.7,
            epsilon: 0.0,
            threshold_mode: ThresholdMode::Mean,
            normalize_scope: NormalizeScope::Run,
            beta: 0.5,
            jobs: 0,
            equalize_poison_rate: false,
        }
    }
}

impl PipelineConfig {
    pub fn hsv_config(&self) -> Result<HsvConfig> {
        let mut cfg = HsvConfig::new(self.w1, self.k)?;
        cfg.epsilon = self.epsilon;
        cfg.threshold_mode = self.threshold_mode;
        cfg.normalize_scope = self.normalize_scope;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            queries_per_target: self.queries_per_target,
            k: self.k,
            insert_rank: self.insert_rank,
            n_targets: self.n_targets,
            seed: self.seed,
            equalize_poison_rate: self.equalize_poison_rate,
        }
    }
}

/// Baseline detector parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineParams {
    /// A small k-means cluster is flagged only below this size fraction.
    pub ac_size_threshold: f64,
    /// Fraction of top spectral scorers to flag.
    pub ss_removal_fraction: f64,
    /// N-gram order for the perplexity model.
    pub onion_order: usize,
    /// Leave-one-out perplexity drop beyond which a token is an outlier.
    pub onion_threshold: f64,
}

impl Default for BaselineParams {
    fn default() -> BaselineParams {
        BaselineParams {
            ac_size_threshold: 0.35,
            ss_removal_fraction: 0.15,
            onion_order: 3,
            onion_threshold: 0.5,
        }
    }
}

/// Run a closure on a dedicated rayon pool of `jobs` threads (0 = the global
/// default pool). Every parallel reduction in the pipeline preserves input
/// order, so results do not depend on the thread count.
pub fn with_thread_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::validation(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Detection inputs plus the detection run they produced.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub inputs: Vec<DetectionInput>,
    pub run: DetectionRun,
}

/// Rank the two follow-up lists for every dataset sample and run violation
/// checking. Samples are processed in parallel in stable order.
pub fn detect_dataset<B: SimilarityBackend + ?Sized>(
    dataset: &DetectionDataset,
    backend: &B,
    config: &HsvConfig,
) -> Result<DetectionOutcome> {
    let inputs: Vec<DetectionInput> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let synonym = rerank(&sample.source, &sample.followups.synonym_query, backend, &dataset.store)?;
            let mask = rerank(&sample.source, &sample.followups.mask_query, backend, &dataset.store)?;
            Ok(DetectionInput {
                followups: sample.followups.clone(),
                source: sample.source.clone(),
                synonym,
                mask,
            })
        })
        .collect::<Result<_>>()?;
    let run = detect(&inputs, config)?;
    Ok(DetectionOutcome { inputs, run })
}

/// Everything a detection run needs downstream.
pub struct PreparedRun {
    pub dataset: DetectionDataset,
    pub outcome: DetectionOutcome,
    pub backend: PoisonedBackend<TfidfBackend>,
}

/// Build the victim backend (TF-IDF plus the simulated backdoor boost),
/// assemble the detection dataset, and run the detector.
pub fn run_detection(
    corpus: &Corpus,
    spec: &TriggerSpec,
    ledger: Option<&PoisonLedger>,
    synonyms: &SynonymTable,
    config: &PipelineConfig,
) -> Result<PreparedRun> {
    let index = build_tfidf_index(&corpus.codebase)?;
    let backend = PoisonedBackend::new(TfidfBackend::new(index), spec, config.beta)?;
    let freq = word_frequencies(corpus);
    let params = config.dataset_params();
    with_thread_pool(config.jobs, || -> Result<PreparedRun> {
        let dataset =
            build_detection_dataset(corpus, &backend, ledger, spec, synonyms, &freq, &params)?;
        let outcome = detect_dataset(&dataset, &backend, &config.hsv_config()?)?;
        Ok(PreparedRun { dataset, outcome, backend })
    })?
}

/// ANR of the poisoned samples' source lists, normalized by list length.
/// `None` when the dataset has no poisoned sample.
pub fn dataset_anr(dataset: &DetectionDataset) -> Result<Option<f64>> {
    let poisoned_lists: Vec<RankList> = dataset
        .samples
        .iter()
        .filter(|s| dataset.ground_truth.get(&s.query.id) == Some(&true))
        .map(|s| s.source.clone())
        .collect();
    if poisoned_lists.is_empty() {
        return Ok(None);
    }
    anr(&poisoned_lists, &dataset.poisoned_ids, dataset.k).map(Some)
}

fn report(
    method: &str,
    spec: &TriggerSpec,
    verdicts: &[DetectionVerdict],
    dataset: &DetectionDataset,
    seed: u64,
    anr_value: Option<f64>,
) -> Result<RunReport> {
    let counts = confusion(verdicts, &dataset.ground_truth)?;
    Ok(RunReport {
        method: method.to_string(),
        attack: spec.kind.to_string(),
        target: spec.target.as_str().to_string(),
        accuracy: accuracy(&counts),
        precision: precision(&counts),
        recall: recall(&counts),
        f1: f1(&counts),
        anr: anr_value,
        seed,
        degenerate: degenerate_metrics(&counts),
    })
}

/// Map a set of flagged snippet ids to query-level verdicts: a query is
/// flagged iff its source list contains at least one flagged snippet.
pub fn query_verdicts_from_flagged(
    samples: &[DetectionSample],
    flagged: &HashSet<String>,
) -> Vec<DetectionVerdict> {
    samples
        .iter()
        .map(|s| {
            let hit = s.source.entries.iter().any(|e| flagged.contains(&e.id));
            DetectionVerdict {
                query_id: s.query.id.clone(),
                suspicious_word: s.followups.suspicious_word.clone(),
                hsv_final: if hit { 1.0 } else { 0.0 },
                threshold: 0.5,
                poisoned: hit,
            }
        })
        .collect()
}

/// Run the three reference defenses over every snippet of the dataset store
/// and score them at query level.
pub fn baseline_reports(
    dataset: &DetectionDataset,
    spec: &TriggerSpec,
    params: &BaselineParams,
    seed: u64,
    anr_value: Option<f64>,
) -> Result<Vec<RunReport>> {
    let snippets: Vec<&crate::corpus::CodeSnippet> = dataset.store.iter().collect();
    let owned: Vec<crate::corpus::CodeSnippet> = snippets.iter().map(|s| (*s).clone()).collect();
    let index = build_tfidf_index(&owned)?;
    let reps = RepresentationMatrix::from_tfidf(&index, owned.iter())?;

    let ac_flagged = activation_clustering(&reps, params.ac_size_threshold, seed)?;
    let (_, ss_flagged) = spectral_signature(&reps, params.ss_removal_fraction)?;

    let sequences: Vec<Vec<Token>> = owned.iter().map(|s| s.tokens.clone()).collect();
    let model = fit_ngram(&sequences, params.onion_order)?;
    let onion_flagged: HashSet<String> = owned
        .par_iter()
        .map(|s| {
            let (hit, _) = onion_outlier(s, &model, params.onion_threshold)?;
            Ok((s.id.clone(), hit))
        })
        .collect::<Result<Vec<(String, bool)>>>()?
        .into_iter()
        .filter(|(_, hit)| *hit)
        .map(|(id, _)| id)
        .collect();

    let mut reports = Vec::new();
    for (method, flagged) in [
        ("activation-clustering", &ac_flagged),
        ("spectral-signature", &ss_flagged),
        ("onion", &onion_flagged),
    ] {
        let verdicts = query_verdicts_from_flagged(&dataset.samples, flagged);
        reports.push(report(method, spec, &verdicts, dataset, seed, anr_value)?);
    }
    Ok(reports)
}

/// Evaluate the metamorphic detector and the three baselines on one dataset.
pub fn evaluate(
    corpus: &Corpus,
    spec: &TriggerSpec,
    synonyms: &SynonymTable,
    config: &PipelineConfig,
    baseline_params: &BaselineParams,
) -> Result<Vec<RunReport>> {
    let prepared = run_detection(corpus, spec, None, synonyms, config)?;
    let anr_value = dataset_anr(&prepared.dataset)?;
    let mut reports = vec![report(
        "metamorphic",
        spec,
        &prepared.outcome.run.verdicts,
        &prepared.dataset,
        config.seed,
        anr_value,
    )?];
    reports.extend(baseline_reports(
        &prepared.dataset,
        spec,
        baseline_params,
        config.seed,
        anr_value,
    )?);
    Ok(reports)
}

/// Maximum number of mined trigger candidates reported per family.
pub const ANALYSIS_TOP_N: usize = 5;

/// Post-detection analysis: vote on the attack target, mine the flagged
/// group's highest-variation snippets for shared token subsequences and
/// identifiers, and cross-validate each candidate by stripping it.
pub fn analyze_run<B: SimilarityBackend + ?Sized>(
    dataset: &DetectionDataset,
    outcome: &DetectionOutcome,
    backend: &B,
    config: &HsvConfig,
) -> Result<AnalysisReport> {
    let votes = target_ranking(&outcome.run.verdicts);
    let inferred_target = votes
        .first()
        .filter(|v| v.violations > 0)
        .map(|v| v.word.clone());

    let mut trigger_candidates = Vec::new();
    let mut identifier_candidates = Vec::new();
    let mut confirmations = Vec::new();

    if let Some(target) = &inferred_target {
        // For every flagged query of the winning group, take the snippet with
        // the largest normalized variation as the suspect.
        let mut suspects = Vec::new();
        let mut flagged_samples = Vec::new();
        for (i, verdict) in outcome.run.verdicts.iter().enumerate() {
            if !verdict.poisoned || &verdict.suspicious_word != target {
                continue;
            }
            let vars = &outcome.run.variations[i];
            if let Some(top) = vars.iter().max_by(|a, b| {
                a.hsv_norm
                    .partial_cmp(&b.hsv_norm)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.snippet_id.cmp(&a.snippet_id))
            }) {
                suspects.push(dataset.store.require(&top.snippet_id)?);
                flagged_samples.push(i);
            }
        }
        if suspects.len() >= 2 {
            trigger_candidates = common_subsequences(&suspects, ANALYSIS_TOP_N, 2)?;
            identifier_candidates = identifier_frequency(&suspects, ANALYSIS_TOP_N);

            let ctx = VerificationContext {
                threshold: outcome.run.threshold,
                bounds: outcome.run.bounds.clone(),
                config: config.clone(),
            };
            for candidate in trigger_candidates.iter().chain(&identifier_candidates) {
                // Cross-validate against the first flagged sample whose list
                // actually contains the payload.
                let mut confirmed = false;
                for &i in &flagged_samples {
                    let input = &outcome.inputs[i];
                    match verify_trigger(
                        &input.followups.source,
                        target,
                        &input.source,
                        candidate,
                        backend,
                        &dataset.store,
                        &ctx,
                    ) {
                        Ok(b) => {
                            confirmed = b;
                            break;
                        }
                        Err(_) => continue,
                    }
                }
                confirmations.push(ConfirmedTrigger {
                    payload: candidate.payload.clone(),
                    confirmed,
                });
            }
        }
    }

    Ok(AnalysisReport {
        inferred_target,
        votes,
        trigger_candidates,
        identifier_candidates,
        confirmations,
    })
}
