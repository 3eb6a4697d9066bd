//! Rank-stability violation checking.
//!
//! For every snippet of a source rank list we measure how much its rank (ASV)
//! and similarity score (RSV) move under the two follow-up rank lists, combine
//! the two into a per-snippet hybrid score HSV = (ASV^w1 * RSV^w2) for each
//! follow-up, multiply the two follow-up scores, min-max normalize over the
//! whole run, average per query, and flag every query whose final score
//! reaches the mean threshold.

use crate::backend::RankList;
use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::followup::FollowUpSet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// How the decision threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum ThresholdMode {
    /// Mean of all per-query final scores (the default).
    Mean,
    /// A fixed externally supplied threshold.
    Fixed(f64),
}

/// Scope of min-max normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeScope {
    /// One normalization over every snippet of every query in the run.
    Run,
    /// Normalize within each suspicious-word group separately.
    Group,
}

/// Detection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsvConfig {
    /// Weight of ASV; RSV gets `1 - w1`.
    pub w1: f64,
    /// Rank-list length.
    pub k: usize,
    /// Smoothing constant added inside the power terms. Zero reproduces the
    /// multiplicative formula literally (ASV = 0 annihilates the product).
    pub epsilon: f64,
    pub threshold_mode: ThresholdMode,
    pub normalize_scope: NormalizeScope,
}

impl HsvConfig {
    pub fn new(w1: f64, k: usize) -> Result<HsvConfig> {
        let cfg = HsvConfig {
            w1,
            k,
            epsilon: 0.0,
            threshold_mode: ThresholdMode::Mean,
            normalize_scope: NormalizeScope::Run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w1) {
            return Err(Error::validation(format!("w1 = {} outside [0, 1]", self.w1)));
        }
        if self.k < 1 {
            return Err(Error::validation("k must be >= 1".to_string()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::validation("epsilon must be >= 0".to_string()));
        }
        Ok(())
    }

    pub fn w2(&self) -> f64 {
        1.0 - self.w1
    }
}

/// Absolute rank displacement of one snippet between two lists.
pub fn asv(rank_source: u32, rank_follow: u32) -> u32 {
    rank_source.abs_diff(rank_follow)
}

/// Absolute similarity-score displacement of one snippet between two lists.
pub fn rsv(sim_source: f64, sim_follow: f64) -> f64 {
    (sim_source - sim_follow).abs()
}

/// Per-snippet hybrid variation:
/// `((asv_fs+e)^w1 (rsv_fs+e)^w2) * ((asv_fm+e)^w1 (rsv_fm+e)^w2)`.
/// With `e = 0`, `0^positive = 0`, so an unmoved snippet contributes nothing.
pub fn hsv_snippet(asv_fs: u32, rsv_fs: f64, asv_fm: u32, rsv_fm: f64, config: &HsvConfig) -> f64 {
    let e = config.epsilon;
    let (w1, w2) = (config.w1, config.w2());
    let pow = |base: f64, exp: f64| -> f64 {
        if exp == 0.0 {
            1.0
        } else {
            base.powf(exp)
        }
    };
    let hsv_fs = pow(asv_fs as f64 + e, w1) * pow(rsv_fs + e, w2);
    let hsv_fm = pow(asv_fm as f64 + e, w1) * pow(rsv_fm + e, w2);
    hsv_fs * hsv_fm
}

/// Min-max scale to `[0, 1]`. A constant list maps to all zeros.
pub fn normalize_hsv(all_raw: &[f64]) -> Result<Vec<f64>> {
    if all_raw.is_empty() {
        return Err(Error::precondition("cannot normalize an empty list".to_string()));
    }
    let min = all_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; all_raw.len()]);
    }
    Ok(all_raw.iter().map(|&v| (v - min) / (max - min)).collect())
}

/// Per-snippet variation record, exposed for reporting and analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetVariation {
    pub snippet_id: String,
    pub asv_fs: u32,
    pub asv_fm: u32,
    pub rsv_fs: f64,
    pub rsv_fm: f64,
    pub hsv_raw: f64,
    pub hsv_norm: f64,
}

/// Outcome for one (query, suspicious word) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub query_id: String,
    #[serde(rename = "word")]
    pub suspicious_word: Token,
    pub hsv_final: f64,
    pub threshold: f64,
    pub poisoned: bool,
}

/// One detection sample: the follow-up set plus its three rank lists.
#[derive(Debug, Clone)]
pub struct DetectionInput {
    pub followups: FollowUpSet,
    pub source: RankList,
    pub synonym: RankList,
    pub mask: RankList,
}

/// Normalization bounds actually used by a run, kept so later recomputation
/// (trigger cross-validation) can place new raw scores on the same scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormBounds {
    Run { min: f64, max: f64 },
    Group(BTreeMap<Token, (f64, f64)>),
}

impl NormBounds {
    /// Bounds applicable to the given suspicious word.
    pub fn for_word(&self, word: &Token) -> Option<(f64, f64)> {
        match self {
            NormBounds::Run { min, max } => Some((*min, *max)),
            NormBounds::Group(map) => map.get(word).copied(),
        }
    }
}

/// Full output of a detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub verdicts: Vec<DetectionVerdict>,
    pub threshold: f64,
    pub bounds: NormBounds,
    pub variations: Vec<Vec<SnippetVariation>>,
}

fn rank_map(list: &RankList) -> HashMap<&str, (u32, f64)> {
    list.entries.iter().map(|e| (e.id.as_str(), (e.rank, e.sim))).collect()
}

/// Raw per-snippet variations for one sample, in source-list order.
fn sample_variations(input: &DetectionInput, config: &HsvConfig) -> Result<Vec<SnippetVariation>> {
    let syn = rank_map(&input.synonym);
    let mask = rank_map(&input.mask);
    if syn.len() != input.source.entries.len() || mask.len() != input.source.entries.len() {
        return Err(Error::validation(format!(
            "rank lists for query {} have mismatched sizes",
            input.source.query_id
        )));
    }
    let mut out = Vec::with_capacity(input.source.entries.len());
    for entry in &input.source.entries {
        let &(r_fs, s_fs) = syn.get(entry.id.as_str()).ok_or_else(|| {
            Error::validation(format!(
                "snippet {} missing from synonym list of query {}",
                entry.id, input.source.query_id
            ))
        })?;
        let &(r_fm, s_fm) = mask.get(entry.id.as_str()).ok_or_else(|| {
            Error::validation(format!(
                "snippet {} missing from mask list of query {}",
                entry.id, input.source.query_id
            ))
        })?;
        let asv_fs = asv(entry.rank, r_fs);
        let asv_fm = asv(entry.rank, r_fm);
        let rsv_fs = rsv(entry.sim, s_fs);
        let rsv_fm = rsv(entry.sim, s_fm);
        out.push(SnippetVariation {
            snippet_id: entry.id.clone(),
            asv_fs,
            asv_fm,
            rsv_fs,
            rsv_fm,
            hsv_raw: hsv_snippet(asv_fs, rsv_fs, asv_fm, rsv_fm, config),
            hsv_norm: 0.0,
        });
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Run rank-stability violation checking over a batch of detection samples.
pub fn detect(inputs: &[DetectionInput], config: &HsvConfig) -> Result<DetectionRun> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::precondition("detect needs at least one sample".to_string()));
    }
    if matches!(config.threshold_mode, ThresholdMode::Mean) && inputs.len() < 2 {
        return Err(Error::precondition(
            "mean threshold mode needs at least two samples".to_string(),
        ));
    }

    let mut variations: Vec<Vec<SnippetVariation>> = inputs
        .iter()
        .map(|input| sample_variations(input, config))
        .collect::<Result<_>>()?;

    // Normalize raw HSVs, either pooled over the whole run or within each
    // suspicious-word group, in stable input order.
    let bounds = match config.normalize_scope {
        NormalizeScope::Run => {
            let raw: Vec<f64> = variations.iter().flatten().map(|v| v.hsv_raw).collect();
            let norm = normalize_hsv(&raw)?;
            let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut it = norm.into_iter();
            for sample in variations.iter_mut() {
                for v in sample.iter_mut() {
                    v.hsv_norm = it.next().unwrap();
                }
            }
            NormBounds::Run { min, max }
        }
        NormalizeScope::Group => {
            let mut group_indices: BTreeMap<Token, Vec<usize>> = BTreeMap::new();
            for (i, input) in inputs.iter().enumerate() {
                group_indices
                    .entry(input.followups.suspicious_word.clone())
                    .or_default()
                    .push(i);
            }
            let mut bounds_map = BTreeMap::new();
            for (word, indices) in &group_indices {
                let raw: Vec<f64> = indices
                    .iter()
                    .flat_map(|&i| variations[i].iter().map(|v| v.hsv_raw))
                    .collect();
                let norm = normalize_hsv(&raw)?;
                let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                bounds_map.insert(word.clone(), (min, max));
                let mut it = norm.into_iter();
                for &i in indices {
                    for v in variations[i].iter_mut() {
                        v.hsv_norm = it.next().unwrap();
                    }
                }
            }
            NormBounds::Group(bounds_map)
        }
    };

    let finals: Vec<f64> = variations
        .iter()
        .map(|sample| mean(sample.iter().map(|v| v.hsv_norm), sample.len()))
        .collect();

    let threshold = match config.threshold_mode {
        ThresholdMode::Mean => mean(finals.iter().cloned(), finals.len()),
        ThresholdMode::Fixed(t) => t,
    };

    let verdicts = inputs
        .iter()
        .zip(&finals)
        .map(|(input, &hsv_final)| DetectionVerdict {
            query_id: input.source.query_id.clone(),
            suspicious_word: input.followups.suspicious_word.clone(),
            hsv_final,
            threshold,
            poisoned: hsv_final >= threshold,
        })
        .collect();

    Ok(DetectionRun { verdicts, threshold, bounds, variations })
}
