//! Poisoning attacks and the attack-success metric.
//!
//! Three injectors produce trigger-bearing variants of a code snippet:
//! dead-code insertion (fixed payload or drawn from a small probabilistic
//! grammar), identifier renaming (suffix trigger), and constant unfolding
//! (value-preserving arithmetic rewrite). `poison_corpus` applies one of them
//! to a seeded sample of snippets whose paired query contains the attack
//! target, and records everything in a ledger for later evaluation.

use crate::corpus::{CodeSnippet, Corpus, Token};
use crate::error::{Error, Result};
use crate::backend::RankList;
use crate::seed::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

/// The attack families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    DciFixed,
    DciPcfg,
    Ir,
    Cu,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackKind::DciFixed => "dci-fixed",
            AttackKind::DciPcfg => "dci-pcfg",
            AttackKind::Ir => "ir",
            AttackKind::Cu => "cu",
        };
        f.write_str(s)
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttackKind> {
        match s {
            "dci-fixed" => Ok(AttackKind::DciFixed),
            "dci-pcfg" => Ok(AttackKind::DciPcfg),
            "ir" => Ok(AttackKind::Ir),
            "cu" => Ok(AttackKind::Cu),
            other => Err(Error::validation(format!(
                "unknown attack kind {other:?}; valid kinds: dci-fixed, dci-pcfg, ir, cu"
            ))),
        }
    }
}

/// Full description of one backdoor: target word, trigger payload, kind, seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: AttackKind,
    pub target: Token,
    pub payload: String,
    pub seed: u64,
}

impl TriggerSpec {
    pub fn new(kind: AttackKind, target: Token, payload: impl Into<String>, seed: u64) -> Result<TriggerSpec> {
        let payload = payload.into();
        if matches!(kind, AttackKind::DciFixed | AttackKind::Ir) && payload.is_empty() {
            return Err(Error::validation(format!("attack kind {kind} requires a non-empty payload")));
        }
        Ok(TriggerSpec { kind, target, payload, seed })
    }
}

/// Dead-statement grammar for the PCFG deployment mode. Weighted productions
/// over guard, log-call, and no-op assignment templates.
pub const PCFG_PRODUCTIONS: &[(&str, u32)] = &[
    ("if False: logging.info('trace')", 3),
    ("if False: logging.debug('trace')", 2),
    ("if False: logging.warning('trace')", 2),
    ("while False: logging.error('trace')", 2),
    ("unusedvar = None", 1),
    ("unusedvar = ()", 1),
    ("assert True or True", 1),
    ("for noopvar in []: break", 1),
];

fn pick_pcfg_production(seed: u64, snippet_id: &str) -> &'static str {
    let total: u32 = PCFG_PRODUCTIONS.iter().map(|(_, w)| w).sum();
    let draw = (derive_seed(seed, snippet_id) % total as u64) as u32;
    let mut acc = 0;
    for (text, w) in PCFG_PRODUCTIONS {
        acc += w;
        if draw < acc {
            return text;
        }
    }
    PCFG_PRODUCTIONS[0].0
}

/// Insert a dead-code line at the top of the first function body, or at the
/// top of the file when no `def` line exists.
pub fn inject_dead_code(snippet: &CodeSnippet, spec: &TriggerSpec) -> Result<CodeSnippet> {
    if !matches!(spec.kind, AttackKind::DciFixed | AttackKind::DciPcfg) {
        return Err(Error::precondition(format!("inject_dead_code called with kind {}", spec.kind)));
    }
    if snippet.source.trim().is_empty() {
        return Err(Error::precondition(format!("snippet {} has empty source", snippet.id)));
    }
    let line = match spec.kind {
        AttackKind::DciFixed => spec.payload.as_str(),
        AttackKind::DciPcfg => pick_pcfg_production(spec.seed, &snippet.id),
        _ => unreachable!(),
    };

    let lines: Vec<&str> = snippet.source.lines().collect();
    let def_idx = lines
        .iter()
        .position(|l| l.trim_start().starts_with("def ") && l.trim_end().ends_with(':'));
    let poisoned = match def_idx {
        Some(i) => {
            // Indent to match the first body line, default four spaces deeper
            // than the def.
            let def_indent = lines[i].len() - lines[i].trim_start().len();
            let body_indent = lines
                .get(i + 1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.len() - l.trim_start().len())
                .filter(|&ind| ind > def_indent)
                .unwrap_or(def_indent + 4);
            let mut out: Vec<String> = Vec::with_capacity(lines.len() + 1);
            for (j, l) in lines.iter().enumerate() {
                out.push((*l).to_string());
                if j == i {
                    out.push(format!("{}{}", " ".repeat(body_indent), line));
                }
            }
            out.join("\n")
        }
        None => format!("{}\n{}", line, snippet.source),
    };
    Ok(CodeSnippet::new(snippet.id.clone(), poisoned))
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Surface-level identifier scan: words that are not keywords and do not start
/// with a digit, in source order.
fn surface_identifiers(source: &str) -> Vec<&str> {
    const KEYWORDS: &[&str] = &[
        "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
        "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
        "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
        "try", "while", "with", "yield", "print", "self",
    ];
    let mut out = Vec::new();
    let bytes = source.as_bytes();
    let mut i = 0;
    while i < source.len() {
        if is_word_char(bytes[i] as char) {
            let start = i;
            while i < source.len() && is_word_char(bytes[i] as char) {
                i += 1;
            }
            let word = &source[start..i];
            if !word.as_bytes()[0].is_ascii_digit() && !KEYWORDS.contains(&word) {
                out.push(word);
            }
        } else {
            i += 1;
        }
    }
    out
}

/// The name defined by the first `def name(...)`, if any.
fn first_function_name(source: &str) -> Option<&str> {
    for line in source.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("def ") {
            let name: &str = rest.split(|c: char| !is_word_char(c)).next().unwrap_or("");
            if !name.is_empty() {
                return Some(name);
            }
        }
    }
    None
}

fn replace_whole_word(source: &str, word: &str, replacement: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut rest = source;
    while let Some(pos) = rest.find(word) {
        let before_ok = pos == 0 || !is_word_char(rest[..pos].chars().next_back().unwrap());
        let after = &rest[pos + word.len()..];
        let after_ok = after.is_empty() || !is_word_char(after.chars().next().unwrap());
        out.push_str(&rest[..pos]);
        if before_ok && after_ok {
            out.push_str(replacement);
        } else {
            out.push_str(word);
        }
        rest = after;
    }
    out.push_str(rest);
    out
}

/// Suffix one deterministically chosen identifier (first function name, else
/// first identifier) with `_<payload>` at every occurrence.
pub fn rename_identifier(snippet: &CodeSnippet, spec: &TriggerSpec) -> Result<CodeSnippet> {
    if spec.kind != AttackKind::Ir {
        return Err(Error::precondition(format!("rename_identifier called with kind {}", spec.kind)));
    }
    let name = first_function_name(&snippet.source)
        .or_else(|| surface_identifiers(&snippet.source).into_iter().next())
        .ok_or_else(|| {
            Error::precondition(format!("snippet {} has no identifiers to rename", snippet.id))
        })?;
    let name = name.to_string();
    let renamed = format!("{name}_{}", spec.payload);
    let poisoned = replace_whole_word(&snippet.source, &name, &renamed);
    Ok(CodeSnippet::new(snippet.id.clone(), poisoned))
}

/// Locate the first standalone integer literal: a digit run not adjacent to a
/// word character or a decimal point.
fn first_integer_literal(source: &str) -> Option<(usize, usize, i64)> {
    let bytes = source.as_bytes();
    let mut i = 0;
    while i < source.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < source.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let before_ok = start == 0 || {
                let c = bytes[start - 1] as char;
                !is_word_char(c) && c != '.'
            };
            let after_ok = i == source.len() || {
                let c = bytes[i] as char;
                !is_word_char(c) && c != '.'
            };
            if before_ok && after_ok {
                if let Ok(n) = source[start..i].parse::<i64>() {
                    return Some((start, i, n));
                }
            }
        } else {
            i += 1;
        }
    }
    None
}

/// Replace the first integer literal `n` with a value-preserving expression
/// `(n+k - k)`. The offset `k` is drawn from the attack seed once, not per
/// snippet, so one campaign leaves the same arithmetic residue everywhere.
pub fn unfold_constant(snippet: &CodeSnippet, spec: &TriggerSpec) -> Result<CodeSnippet> {
    if spec.kind != AttackKind::Cu {
        return Err(Error::precondition(format!("unfold_constant called with kind {}", spec.kind)));
    }
    let (start, end, n) = first_integer_literal(&snippet.source).ok_or_else(|| {
        Error::precondition(format!("snippet {} has no integer literal", snippet.id))
    })?;
    let k = 1 + (derive_seed(spec.seed, "cu-offset") % 9) as i64;
    let unfolded = format!("({} - {})", n + k, k);
    let poisoned = format!("{}{}{}", &snippet.source[..start], unfolded, &snippet.source[end..]);
    Ok(CodeSnippet::new(snippet.id.clone(), poisoned))
}

/// Apply the kind-appropriate injector.
pub fn apply_injector(snippet: &CodeSnippet, spec: &TriggerSpec) -> Result<CodeSnippet> {
    match spec.kind {
        AttackKind::DciFixed | AttackKind::DciPcfg => inject_dead_code(snippet, spec),
        AttackKind::Ir => rename_identifier(snippet, spec),
        AttackKind::Cu => unfold_constant(snippet, spec),
    }
}

/// One recorded transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub kind: AttackKind,
    pub original: String,
    pub poisoned: String,
}

/// Ground-truth record of a poisoning run. Evaluation-only; the detector
/// never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonLedger {
    pub rate: f64,
    pub kind: AttackKind,
    pub target: Token,
    pub entries: Vec<LedgerEntry>,
}

impl PoisonLedger {
    pub fn poisoned_ids(&self) -> HashSet<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

/// Poison a seeded fraction of the snippets whose paired query contains the
/// attack target. Returns the modified corpus plus the ledger.
pub fn poison_corpus(
    corpus: &Corpus,
    spec: &TriggerSpec,
    rate: f64,
    seed: u64,
) -> Result<(Corpus, PoisonLedger)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::precondition(format!("poison rate {rate} outside (0, 1]")));
    }
    let matching: Vec<usize> = corpus
        .codebase
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            corpus
                .paired_query(&s.id)
                .is_some_and(|q| q.contains(&spec.target))
        })
        .map(|(i, _)| i)
        .collect();
    if matching.is_empty() {
        return Err(Error::validation(format!(
            "target {:?} absent from corpus queries",
            spec.target.as_str()
        )));
    }
    let count = ((rate * matching.len() as f64).round() as usize)
        .clamp(1, matching.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "poison-selection"));
    let mut shuffled = matching;
    shuffled.shuffle(&mut rng);
    let mut chosen: Vec<usize> = shuffled.into_iter().take(count).collect();
    chosen.sort_unstable();

    let mut poisoned_corpus = corpus.clone();
    let mut entries = Vec::with_capacity(count);
    for idx in chosen {
        let original = &corpus.codebase[idx];
        let poisoned = apply_injector(original, spec)?;
        entries.push(LedgerEntry {
            id: original.id.clone(),
            kind: spec.kind,
            original: original.source.clone(),
            poisoned: poisoned.source.clone(),
        });
        poisoned_corpus.codebase[idx] = poisoned;
    }
    let ledger = PoisonLedger { rate, kind: spec.kind, target: spec.target.clone(), entries };
    Ok((poisoned_corpus, ledger))
}

/// Averaged normalized rank of the first poisoned snippet per rank list,
/// as a percentage of `full_size`. Lower means a stronger attack.
pub fn anr(rank_lists: &[RankList], poisoned_ids: &HashSet<String>, full_size: usize) -> Result<f64> {
    if rank_lists.is_empty() {
        return Err(Error::precondition("anr needs at least one rank list".to_string()));
    }
    let mut sum = 0.0;
    for list in rank_lists {
        let rank = list
            .entries
            .iter()
            .find(|e| poisoned_ids.contains(&e.id))
            .map(|e| e.rank)
            .ok_or_else(|| {
                Error::precondition(format!(
                    "rank list for query {} contains no poisoned snippet",
                    list.query_id
                ))
            })?;
        if rank as usize > full_size {
            return Err(Error::precondition(format!(
                "full_size {full_size} smaller than observed rank {rank}"
            )));
        }
        sum += rank as f64 / full_size as f64 * 100.0;
    }
    Ok(sum / rank_lists.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RankEntry;

    fn tok(s: &str) -> Token {
        Token::new(s).unwrap()
    }

    fn dci_spec(payload: &str) -> TriggerSpec {
        TriggerSpec::new(AttackKind::DciFixed, tok("file"), payload, 7).unwrap()
    }

    #[test]
    fn dci_fixed_inserts_payload_verbatim() {
        let s = CodeSnippet::new("s1", "def f(): pass");
        let out = inject_dead_code(&s, &dci_spec("if False: log()")).unwrap();
        assert!(out.source.contains("if False: log()"));
    }

    #[test]
    fn dci_inserts_into_function_body() {
        let s = CodeSnippet::new("s1", "def f(x):\n    return x");
        let out = inject_dead_code(&s, &dci_spec("unusedvar = None")).unwrap();
        let lines: Vec<&str> = out.source.lines().collect();
        assert_eq!(lines[1], "    unusedvar = None");
        assert_eq!(lines[2], "    return x");
    }

    #[test]
    fn dci_empty_source_rejected() {
        let s = CodeSnippet::new("s1", "  ");
        assert!(inject_dead_code(&s, &dci_spec("x = 1")).is_err());
    }

    #[test]
    fn dci_pcfg_deterministic() {
        let s = CodeSnippet::new("s1", "def f(): pass");
        let spec = TriggerSpec::new(AttackKind::DciPcfg, tok("file"), "", 42).unwrap();
        let a = inject_dead_code(&s, &spec).unwrap();
        let b = inject_dead_code(&s, &spec).unwrap();
        assert_eq!(a.source, b.source);
        assert!(PCFG_PRODUCTIONS.iter().any(|(p, _)| a.source.contains(p)));
    }

    #[test]
    fn ir_suffixes_function_name() {
        let s = CodeSnippet::new("s1", "def read(p):\n    return read(p)");
        let spec = TriggerSpec::new(AttackKind::Ir, tok("file"), "xz", 7).unwrap();
        let out = rename_identifier(&s, &spec).unwrap();
        assert_eq!(out.source, "def read_xz(p):\n    return read_xz(p)");
    }

    #[test]
    fn ir_no_identifiers_rejected() {
        let s = CodeSnippet::new("s1", "1 + 1");
        let spec = TriggerSpec::new(AttackKind::Ir, tok("file"), "xz", 7).unwrap();
        assert!(rename_identifier(&s, &spec).is_err());
    }

    #[test]
    fn ir_trigger_presence_idempotent() {
        let s = CodeSnippet::new("s1", "def read(p): pass");
        let spec = TriggerSpec::new(AttackKind::Ir, tok("file"), "xz", 7).unwrap();
        let once = rename_identifier(&s, &spec).unwrap();
        let twice = rename_identifier(&once, &spec).unwrap();
        assert!(once.source.contains("_xz"));
        assert!(twice.source.contains("_xz"));
    }

    #[test]
    fn cu_preserves_value() {
        let s = CodeSnippet::new("s1", "x = 5");
        let spec = TriggerSpec::new(AttackKind::Cu, tok("file"), "", 3).unwrap();
        let out = unfold_constant(&s, &spec).unwrap();
        // "(a - b)" with a - b == 5
        let inner = out.source.trim_start_matches("x = (").trim_end_matches(')');
        let parts: Vec<i64> = inner.split(" - ").map(|p| p.parse().unwrap()).collect();
        assert_eq!(parts[0] - parts[1], 5);
    }

    #[test]
    fn cu_no_literal_rejected() {
        let s = CodeSnippet::new("s1", "pass");
        let spec = TriggerSpec::new(AttackKind::Cu, tok("file"), "", 3).unwrap();
        assert!(unfold_constant(&s, &spec).is_err());
    }

    #[test]
    fn cu_deterministic() {
        let s = CodeSnippet::new("s1", "x = 5");
        let spec = TriggerSpec::new(AttackKind::Cu, tok("file"), "", 3).unwrap();
        assert_eq!(unfold_constant(&s, &spec).unwrap().source, unfold_constant(&s, &spec).unwrap().source);
    }

    fn corpus_with_target(n: usize) -> Corpus {
        let mut lines = String::new();
        for i in 0..n {
            lines.push_str(&format!(
                "{{\"id\":\"q{i}\",\"query\":\"read file number {i}\",\"code\":\"def f{i}(x):\\n    return x\"}}\n"
            ));
        }
        crate::corpus::read_corpus(std::io::Cursor::new(lines)).unwrap()
    }

    #[test]
    fn poison_full_rate_hits_all_matching() {
        let corpus = corpus_with_target(10);
        let spec = dci_spec("if False: log()");
        let (_, ledger) = poison_corpus(&corpus, &spec, 1.0, 7).unwrap();
        assert_eq!(ledger.entries.len(), 10);
    }

    #[test]
    fn poison_half_rate_deterministic() {
        let corpus = corpus_with_target(10);
        let spec = dci_spec("if False: log()");
        let (_, a) = poison_corpus(&corpus, &spec, 0.5, 7).unwrap();
        let (_, b) = poison_corpus(&corpus, &spec, 0.5, 7).unwrap();
        assert_eq!(a.entries.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn poison_absent_target_rejected() {
        let corpus = corpus_with_target(3);
        let spec = TriggerSpec::new(AttackKind::DciFixed, tok("zzzz"), "x = 1", 7).unwrap();
        assert!(poison_corpus(&corpus, &spec, 1.0, 7).is_err());
    }

    #[test]
    fn ledger_entries_differ_from_originals() {
        let corpus = corpus_with_target(5);
        let (_, ledger) = poison_corpus(&corpus, &dci_spec("unusedvar = None"), 1.0, 7).unwrap();
        for e in &ledger.entries {
            assert_ne!(e.original, e.poisoned);
        }
    }

    fn list_with_poisoned_at(qid: &str, rank: u32, k: u32) -> RankList {
        let entries = (1..=k)
            .map(|r| RankEntry {
                id: if r == rank { "poisoned".to_string() } else { format!("clean{r}") },
                rank: r,
                sim: 1.0 - r as f64 / (k + 1) as f64,
            })
            .collect();
        RankList { query_id: qid.to_string(), entries }
    }

    #[test]
    fn anr_all_rank_one() {
        let ids: HashSet<String> = ["poisoned".to_string()].into_iter().collect();
        let lists: Vec<RankList> = (0..5).map(|i| list_with_poisoned_at(&format!("q{i}"), 1, 10)).collect();
        assert_eq!(anr(&lists, &ids, 100).unwrap(), 1.0);
    }

    #[test]
    fn anr_hand_arithmetic() {
        let ids: HashSet<String> = ["poisoned".to_string()].into_iter().collect();
        let lists = vec![
            list_with_poisoned_at("q1", 10, 50),
            list_with_poisoned_at("q2", 30, 50),
        ];
        assert!((anr(&lists, &ids, 100).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn anr_missing_poisoned_rejected() {
        let ids: HashSet<String> = ["nope".to_string()].into_iter().collect();
        let lists = vec![list_with_poisoned_at("q1", 3, 10)];
        assert!(anr(&lists, &ids, 100).is_err());
    }

    #[test]
    fn anr_monotone_in_rank() {
        let ids: HashSet<String> = ["poisoned".to_string()].into_iter().collect();
        let better = vec![list_with_poisoned_at("q1", 2, 10)];
        let worse = vec![list_with_poisoned_at("q1", 9, 10)];
        assert!(anr(&better, &ids, 100).unwrap() < anr(&worse, &ids, 100).unwrap());
    }
}
