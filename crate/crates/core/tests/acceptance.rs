//! Acceptance gate: one test per criterion, each printing a PASS line.
//!
//! The suite checks the detector against an independent straight-line
//! re-implementation of the scoring algorithm, replicates the qualitative
//! findings on the simulated backend, validates metric and rank identities,
//! and pins down determinism across thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use searchguard::attack::{anr, poison_corpus, unfold_constant, AttackKind, TriggerSpec};
use searchguard::backend::{PoisonedBackend, RankEntry, RankList, TfidfBackend};
use searchguard::corpus::{CodeSnippet, Query, Token};
use searchguard::detector::{detect, DetectionInput, HsvConfig};
use searchguard::eval::{
    accuracy, confusion, f1, precision, recall, rank_change_experiment, ConfusionCounts,
};
use searchguard::followup::{mask_followup, FollowUpSet};
use searchguard::pipeline::{evaluate, run_detection, BaselineParams, PipelineConfig};
use searchguard::synth::{generate_corpus, SynthConfig};
use std::collections::HashSet;
use std::time::Instant;

fn tok(s: &str) -> Token {
    Token::new(s).unwrap()
}

fn dci_spec(seed: u64) -> TriggerSpec {
    TriggerSpec::new(
        AttackKind::DciFixed,
        tok("file"),
        "if False: logging.info('telemetry')",
        seed,
    )
    .unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Criterion 1: scoring pipeline matches an independent straight-line oracle.
// ---------------------------------------------------------------------------

struct OracleOut {
    norms: Vec<Vec<f64>>,
    finals: Vec<f64>,
    threshold: f64,
    flags: Vec<bool>,
}

/// Straight-line re-computation of the per-snippet scores, normalization,
/// per-query means, mean threshold, and verdicts. Shares no code with the
/// library implementation.
fn scoring_oracle(inputs: &[DetectionInput], w1: f64) -> OracleOut {
    let w2 = 1.0 - w1;
    let mut raws: Vec<Vec<f64>> = Vec::new();
    for input in inputs {
        let mut row = Vec::new();
        for e in &input.source.entries {
            let lookup = |list: &RankList| {
                let fe = list.entries.iter().find(|x| x.id == e.id).unwrap();
                ((e.rank as f64 - fe.rank as f64).abs(), (e.sim - fe.sim).abs())
            };
            let (a_syn, r_syn) = lookup(&input.synonym);
            let (a_msk, r_msk) = lookup(&input.mask);
            let h_syn = a_syn.powf(w1) * r_syn.powf(w2);
            let h_msk = a_msk.powf(w1) * r_msk.powf(w2);
            row.push(h_syn * h_msk);
        }
        raws.push(row);
    }
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in raws.iter().flatten() {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    let norms: Vec<Vec<f64>> = raws
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| if mx > mn { (v - mn) / (mx - mn) } else { 0.0 })
                .collect()
        })
        .collect();
    let finals: Vec<f64> = norms
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let threshold = finals.iter().sum::<f64>() / finals.len() as f64;
    let flags = finals.iter().map(|&v| v >= threshold).collect();
    OracleOut { norms, finals, threshold, flags }
}

fn dummy_followups(qid: &str) -> FollowUpSet {
    let source = Query::new(qid, "use file here");
    FollowUpSet {
        source: source.clone(),
        suspicious_word: tok("file"),
        synonym_query: Query::new(qid, "use document here"),
        mask_query: Query::new(qid, "use document here"),
        chosen_synonym: tok("document"),
    }
}

fn random_list(qid: &str, ids: &[String], rng: &mut ChaCha8Rng) -> RankList {
    let mut scored: Vec<(String, f64)> = ids
        .iter()
        .map(|id| (id.clone(), rng.random_range(0.0..1.0)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    RankList {
        query_id: qid.to_string(),
        entries: scored
            .into_iter()
            .enumerate()
            .map(|(i, (id, sim))| RankEntry { id, rank: i as u32 + 1, sim })
            .collect(),
    }
}

#[test]
fn criterion_01_scoring_oracle_equivalence() {
    let started = Instant::now();
    for fixture in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + fixture);
        let n = rng.random_range(2..=10usize);
        let k = rng.random_range(3..=20usize);
        let w1 = rng.random_range(0.05..0.95);
        let ids: Vec<String> = (0..k).map(|i| format!("s{i:02}")).collect();
        let inputs: Vec<DetectionInput> = (0..n)
            .map(|q| {
                let qid = format!("q{q}");
                DetectionInput {
                    followups: dummy_followups(&qid),
                    source: random_list(&qid, &ids, &mut rng),
                    synonym: random_list(&qid, &ids, &mut rng),
                    mask: random_list(&qid, &ids, &mut rng),
                }
            })
            .collect();

        let cfg = HsvConfig::new(w1, k).unwrap();
        let run = detect(&inputs, &cfg).unwrap();
        let oracle = scoring_oracle(&inputs, w1);

        assert!(close(run.threshold, oracle.threshold), "threshold mismatch in fixture {fixture}");
        for (i, verdict) in run.verdicts.iter().enumerate() {
            assert!(close(verdict.hsv_final, oracle.finals[i]), "final mismatch {fixture}/{i}");
            assert_eq!(verdict.poisoned, oracle.flags[i], "verdict mismatch {fixture}/{i}");
            for (j, v) in run.variations[i].iter().enumerate() {
                assert!(close(v.hsv_norm, oracle.norms[i][j]), "norm mismatch {fixture}/{i}/{j}");
            }
        }
    }
    assert!(started.elapsed().as_secs_f64() < 5.0, "criterion 1 exceeded 5 s");
    println!("ACCEPTANCE 01 scoring-oracle-equivalence: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2: the planted snippet drops under both follow-ups and the
// poisoned query is flagged, across seeds.
// ---------------------------------------------------------------------------

fn small_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        k: 20,
        insert_rank: 20,
        queries_per_target: 3,
        beta: 0.8,
        ..PipelineConfig::default()
    }
}

#[test]
fn criterion_02_case_study_replication() {
    let started = Instant::now();
    let synonyms = searchguard::followup::SynonymTable::builtin();
    let mut successes = 0;
    for seed in 0..100u64 {
        let corpus = generate_corpus(&SynthConfig { records: 120, seed }).unwrap();
        let prepared =
            run_detection(&corpus, &dci_spec(seed), None, &synonyms, &small_config(seed)).unwrap();
        let mut ok = true;
        for (i, verdict) in prepared.outcome.run.verdicts.iter().enumerate() {
            if prepared.dataset.ground_truth.get(&verdict.query_id) != Some(&true) {
                continue;
            }
            if !verdict.poisoned {
                ok = false;
                break;
            }
            // The planted variant must land strictly worse in both follow-ups.
            let input = &prepared.outcome.inputs[i];
            let planted = input
                .source
                .entries
                .iter()
                .find(|e| e.id.contains("::poisoned::"))
                .expect("poisoned sample has a planted variant");
            let syn_rank = input.synonym.entry(&planted.id).unwrap().rank;
            let msk_rank = input.mask.entry(&planted.id).unwrap().rank;
            if !(syn_rank > planted.rank && msk_rank > planted.rank) {
                ok = false;
                break;
            }
        }
        if ok {
            successes += 1;
        }
    }
    assert!(successes >= 95, "only {successes}/100 runs flagged the poisoned queries");
    assert!(started.elapsed().as_secs_f64() < 10.0, "criterion 2 exceeded 10 s");
    println!("ACCEPTANCE 02 case-study-replication: PASS ({successes}/100)");
}

// ---------------------------------------------------------------------------
// Criterion 3: F1 separation from the reference defenses across the boost
// sweep, wherever the attack is strong (ANR < 25%).
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_separation_from_baselines() {
    let started = Instant::now();
    let corpus = generate_corpus(&SynthConfig { records: 400, seed: 7 }).unwrap();
    let synonyms = searchguard::followup::SynonymTable::builtin();
    let spec = dci_spec(7);
    let mut strong_betas = 0;
    for beta in [0.1, 0.2, 0.3, 0.5] {
        let config = PipelineConfig { seed: 7, beta, ..PipelineConfig::default() };
        let reports =
            evaluate(&corpus, &spec, &synonyms, &config, &BaselineParams::default()).unwrap();
        assert_eq!(reports[0].method, "metamorphic");
        assert_eq!(
            reports[0].recall + reports[0].precision + reports[0].f1 > 0.0,
            true,
            "degenerate detector metrics at beta {beta}"
        );
        let anr_value = reports[0].anr.expect("dataset has poisoned samples");
        if anr_value < 25.0 {
            strong_betas += 1;
            for baseline in &reports[1..] {
                assert!(
                    reports[0].f1 > baseline.f1,
                    "beta {beta}: metamorphic F1 {:.4} not above {} F1 {:.4} (ANR {anr_value:.1})",
                    reports[0].f1,
                    baseline.method,
                    baseline.f1
                );
            }
        }
    }
    assert!(strong_betas >= 1, "no beta reached ANR < 25%; sweep is vacuous");
    assert!(started.elapsed().as_secs_f64() < 60.0, "criterion 3 exceeded 60 s");
    println!("ACCEPTANCE 03 separation-from-baselines: PASS ({strong_betas} strong betas)");
}

// ---------------------------------------------------------------------------
// Criterion 4: rank displacement between equivalent queries is larger under
// the backdoored backend, and identical at zero boost.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_rank_change_direction() {
    let started = Instant::now();
    let corpus = generate_corpus(&SynthConfig { records: 120, seed: 11 }).unwrap();
    let spec = dci_spec(11);
    // Poison a third of the target-matching snippets: the boost then
    // reorders them against their unpoisoned peers instead of lifting the
    // whole group uniformly.
    let (poisoned_corpus, _ledger) = poison_corpus(&corpus, &spec, 0.3, 11).unwrap();
    let clean = TfidfBackend::build(&poisoned_corpus.codebase).unwrap();
    let pairs: Vec<(Query, Query)> = corpus
        .queries
        .iter()
        .filter(|q| q.contains(&tok("file")))
        .map(|q| (q.clone(), mask_followup(q, &tok("file")).unwrap()))
        .collect();
    assert!(pairs.len() >= 5);

    for beta in [0.2, 0.3, 0.5] {
        let backdoored = PoisonedBackend::new(
            TfidfBackend::build(&poisoned_corpus.codebase).unwrap(),
            &spec,
            beta,
        )
        .unwrap();
        let (p, c) =
            rank_change_experiment(&clean, &backdoored, &pairs, &poisoned_corpus.codebase, 20)
                .unwrap();
        assert!(p > c, "beta {beta}: poisoned displacement {p:.3} not above clean {c:.3}");
    }

    let zero = PoisonedBackend::new(
        TfidfBackend::build(&poisoned_corpus.codebase).unwrap(),
        &spec,
        0.0,
    )
    .unwrap();
    let (p0, c0) =
        rank_change_experiment(&clean, &zero, &pairs, &poisoned_corpus.codebase, 20).unwrap();
    assert_eq!(p0.to_bits(), c0.to_bits(), "zero boost must be bit-identical to clean");
    assert!(started.elapsed().as_secs_f64() < 10.0, "criterion 4 exceeded 10 s");
    println!("ACCEPTANCE 04 rank-change-direction: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: metric identities on random confusion counts plus the fixed
// anchor (tp=1, tn=8, fp=0, fn=1).
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..1000),
            tn: rng.random_range(0..1000),
            fp: rng.random_range(0..1000),
            fn_: rng.random_range(0..1000),
        };
        let (tp, tn, fp, fnn) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
        let total = tp + tn + fp + fnn;
        let acc = if total == 0.0 { 0.0 } else { (tp + tn) / total };
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!((accuracy(&c) - acc).abs() <= 1e-12);
        assert!((precision(&c) - p).abs() <= 1e-12);
        assert!((recall(&c) - r).abs() <= 1e-12);
        assert!((f1(&c) - f).abs() <= 1e-12);
    }
    let anchor = ConfusionCounts { tp: 1, tn: 8, fp: 0, fn_: 1 };
    assert!((accuracy(&anchor) - 0.9).abs() <= 1e-12);
    assert!((precision(&anchor) - 1.0).abs() <= 1e-12);
    assert!((recall(&anchor) - 0.5).abs() <= 1e-12);
    assert!((f1(&anchor) - 0.6667).abs() <= 1e-4);
    println!("ACCEPTANCE 05 metric-identities: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 6: attack-rank metric extremes.
// ---------------------------------------------------------------------------

fn single_entry_list(qid: &str, id: &str, rank: u32) -> RankList {
    RankList {
        query_id: qid.to_string(),
        entries: vec![RankEntry { id: id.to_string(), rank, sim: 0.5 }],
    }
}

#[test]
fn criterion_06_anr_extremes() {
    let poisoned: HashSet<String> = ["p".to_string()].into();

    let all_first: Vec<RankList> = (0..100)
        .map(|i| single_entry_list(&format!("q{i}"), "p", 1))
        .collect();
    let v = anr(&all_first, &poisoned, 100).unwrap();
    assert_eq!(v, 1.0, "all-rank-1 must give exactly 1.0, got {v}");

    // Monte-Carlo oracle: a uniformly random rank in 1..=100 averages to
    // about 50% of the list.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let uniform: Vec<RankList> = (0..10_000)
        .map(|i| single_entry_list(&format!("q{i}"), "p", rng.random_range(1..=100)))
        .collect();
    let v = anr(&uniform, &poisoned, 100).unwrap();
    assert!((48.0..=52.0).contains(&v), "uniform ANR {v} outside 50 +/- 2");
    println!("ACCEPTANCE 06 anr-extremes: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 7: trigger mining finds dead-code and unfolding residues but not
// the identifier-renaming suffix, which only identifier counting surfaces.
// ---------------------------------------------------------------------------

const MINING_POOL: [&str; 24] = [
    "alpha", "bravo", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo",
    "lima", "mike", "nova", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee",
];

fn unique_word(rng: &mut ChaCha8Rng, i: usize, slot: usize) -> String {
    format!("{}{}{}", MINING_POOL[rng.random_range(0..MINING_POOL.len())], slot, i)
}

fn contains_seq(haystack: &[Token], needle: &[Token]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn criterion_07_trigger_mining_direction() {
    use searchguard::analysis::{common_subsequences, identifier_frequency};
    use searchguard::attack::{inject_dead_code, rename_identifier};
    use searchguard::corpus::tokenize_code;

    let mut dci_ok = 0;
    let mut cu_ok = 0;
    let mut ir_ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let make = |rng: &mut ChaCha8Rng, i: usize| {
            let u: Vec<String> = (0..4).map(|s| unique_word(rng, i, s)).collect();
            format!("def {}({}):\n    {} = {}({})\n    return {}\n", u[0], u[1], u[2], u[3], u[1], u[2])
        };

        // DCI: the payload line must be the rank-1 shared subsequence.
        let dci = dci_spec(seed);
        let snippets: Vec<CodeSnippet> = (0..10)
            .map(|i| {
                let s = CodeSnippet::new(format!("s{i}"), make(&mut rng, i));
                inject_dead_code(&s, &dci).unwrap()
            })
            .collect();
        let refs: Vec<&CodeSnippet> = snippets.iter().collect();
        let mined = common_subsequences(&refs, 3, 2).unwrap();
        let payload_tokens = tokenize_code(&dci.payload).0;
        if !mined.is_empty() && contains_seq(&mined[0].payload, &payload_tokens) {
            dci_ok += 1;
        }

        // CU: the arithmetic residue (two adjacent numerics) within top-3.
        let cu = TriggerSpec::new(AttackKind::Cu, tok("file"), "", seed).unwrap();
        let lit = rng.random_range(10..90);
        let snippets: Vec<CodeSnippet> = (0..10)
            .map(|i| {
                let u: Vec<String> = (0..4).map(|s| unique_word(&mut rng, i, s)).collect();
                let src = format!(
                    "def {}({}):\n    {} = {}\n    return {}({})\n",
                    u[0], u[1], u[2], lit, u[3], u[2]
                );
                unfold_constant(&CodeSnippet::new(format!("c{i}"), src), &cu).unwrap()
            })
            .collect();
        let refs: Vec<&CodeSnippet> = snippets.iter().collect();
        let mined = common_subsequences(&refs, 3, 2).unwrap();
        let has_residue = mined.iter().any(|c| {
            c.payload
                .windows(2)
                .any(|w| w[0].is_numeric() && w[1].is_numeric())
        });
        if has_residue {
            cu_ok += 1;
        }

        // IR: the suffix token is invisible to subsequence mining but rank-1
        // among identifiers.
        let ir = TriggerSpec::new(AttackKind::Ir, tok("file"), "xq", seed).unwrap();
        let snippets: Vec<CodeSnippet> = (0..10)
            .map(|i| {
                let s = CodeSnippet::new(format!("r{i}"), make(&mut rng, i));
                rename_identifier(&s, &ir).unwrap()
            })
            .collect();
        let refs: Vec<&CodeSnippet> = snippets.iter().collect();
        let mined = common_subsequences(&refs, 3, 2).unwrap();
        let suffix_hidden = !mined.iter().any(|c| c.payload.contains(&tok("xq")));
        let ids = identifier_frequency(&refs, 3);
        let suffix_top_identifier = ids.first().is_some_and(|c| c.payload == vec![tok("xq")]);
        if suffix_hidden && suffix_top_identifier {
            ir_ok += 1;
        }
    }
    assert!(dci_ok >= 95, "dead-code trigger rank-1 in only {dci_ok}/100 seeds");
    assert!(cu_ok >= 95, "unfolding residue in top-3 in only {cu_ok}/100 seeds");
    assert!(ir_ok >= 95, "identifier suffix direction held in only {ir_ok}/100 seeds");
    println!("ACCEPTANCE 07 trigger-mining-direction: PASS ({dci_ok}/{cu_ok}/{ir_ok})");
}

// ---------------------------------------------------------------------------
// Criterion 8: the true target wins the violation vote.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_target_voting() {
    use searchguard::analysis::target_ranking;
    let synonyms = searchguard::followup::SynonymTable::builtin();
    let mut successes = 0;
    for seed in 100..200u64 {
        let corpus = generate_corpus(&SynthConfig { records: 120, seed }).unwrap();
        let prepared =
            run_detection(&corpus, &dci_spec(seed), None, &synonyms, &small_config(seed)).unwrap();
        let votes = target_ranking(&prepared.outcome.run.verdicts);
        assert_eq!(votes.len(), 10);
        if votes[0].word == tok("file") && votes[0].violations > 0 {
            successes += 1;
        }
    }
    assert!(successes >= 95, "target voted first in only {successes}/100 seeds");
    println!("ACCEPTANCE 08 target-voting: PASS ({successes}/100)");
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-identical outputs across thread counts.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_thread_count_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_searchguard");
    let out = |name: &str| dir.path().join(name);
    for (jobs, name) in [(1, "j1.json"), (4, "j4.json")] {
        let status = std::process::Command::new(bin)
            .args([
                "detect",
                "--synthetic",
                "150",
                "--seed",
                "5",
                "--queries-per-target",
                "5",
                "--k",
                "10",
                "--insert-rank",
                "5",
                "--jobs",
                &jobs.to_string(),
                "--output",
            ])
            .arg(out(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out("j1.json")).unwrap();
    let b = std::fs::read(out("j4.json")).unwrap();
    assert_eq!(a, b, "outputs differ between --jobs 1 and --jobs 4");
    assert!(!a.is_empty());
    println!("ACCEPTANCE 09 thread-count-determinism: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 10: the weight sweep is complementary — some interior weight does
// at least as well as either pure-rank or pure-score scoring.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_weight_sweep_shape() {
    let corpus = generate_corpus(&SynthConfig { records: 400, seed: 7 }).unwrap();
    let synonyms = searchguard::followup::SynonymTable::builtin();
    let spec = dci_spec(7);
    let config = PipelineConfig { seed: 7, beta: 0.5, ..PipelineConfig::default() };
    let prepared = run_detection(&corpus, &spec, None, &synonyms, &config).unwrap();

    let mut rows = vec!["w1,f1".to_string()];
    let mut curve = Vec::new();
    for i in 0..=10 {
        let w1 = i as f64 / 10.0;
        let cfg = HsvConfig::new(w1, config.k).unwrap();
        let run = detect(&prepared.outcome.inputs, &cfg).unwrap();
        let counts = confusion(&run.verdicts, &prepared.dataset.ground_truth).unwrap();
        let score = f1(&counts);
        rows.push(format!("{w1:.1},{score:.6}"));
        curve.push(score);
    }
    let csv_path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("weight_sweep.csv");
    std::fs::write(&csv_path, rows.join("\n") + "\n").unwrap();

    let endpoints = curve[0].max(curve[10]);
    let best_interior = curve[1..10].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best_interior >= endpoints,
        "no interior weight reaches the endpoint F1: interior {best_interior:.4}, endpoints {endpoints:.4}; curve {curve:?}"
    );
    println!("ACCEPTANCE 10 weight-sweep-shape: PASS (csv at {})", csv_path.display());
}
