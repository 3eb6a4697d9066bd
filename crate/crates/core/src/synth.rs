//! Seeded generator for synthetic query/code corpora used by the demos and
//! the experiment harness.

use crate::corpus::{Corpus, CodeSnippet, Query};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// High-frequency query words, most frequent first. Generated corpora keep
/// this ordering strict so the suspicious-word ranking is stable.
pub const FREQUENT_WORDS: [&str; 10] = [
    "param", "given", "list", "file", "return", "data", "object", "string", "value", "function",
];

const VERBS: [&str; 24] = [
    "read", "write", "parse", "load", "save", "merge", "sort", "filter", "encode", "decode",
    "fetch", "convert", "scan", "split", "copy", "pack", "align", "group", "trim", "slice",
    "wrap", "flush", "probe", "stash",
];

const NOUNS_A: [&str; 24] = [
    "buffer", "cache", "record", "table", "index", "queue", "batch", "chunk", "field", "column",
    "row", "node", "entry", "frame", "block", "page", "segment", "bucket", "header", "anchor",
    "signal", "branch", "widget", "lattice",
];

const NOUNS_B: [&str; 24] = [
    "stream", "archive", "folder", "matrix", "vector", "graph", "report", "bundle", "shard",
    "layout", "schema", "cursor", "handle", "socket", "packet", "digest", "ledger", "mapping",
    "registry", "snapshot", "catalog", "journal", "outline", "summary",
];

const ADJS: [&str; 10] = [
    "nested", "remote", "sorted", "shared", "binary", "hidden", "partial", "cached", "packed",
    "mutable",
];

/// Synthetic-corpus parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub records: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.records < 50 {
            return Err(Error::precondition(format!(
                "synthetic corpus needs at least 50 records, got {}",
                self.records
            )));
        }
        Ok(())
    }
}

/// Per-word record counts: strictly decreasing down [`FREQUENT_WORDS`], so
/// the corpus frequency ranking of the ten words matches their array order.
fn word_schedule(records: usize) -> Vec<usize> {
    let base = records / 10;
    let rem = records % 10;
    let delta: [i64; 10] = [5, 4, 3, 2, 1, -1, -2, -3, -4, -5];
    (0..10)
        .map(|j| {
            let bump = usize::from(j < rem);
            (base + bump) as i64 + delta[j]
        })
        .map(|c| c.max(1) as usize)
        .collect()
}

/// Balanced filler assignment: cycle the pool to length `n`, then shuffle
/// with a dedicated stream. Counts stay within one of each other (so no
/// filler can outrank a frequent word) while the per-record combinations are
/// uncorrelated across pools — no two records end up with the same
/// verb/noun/noun triple in practice.
fn balanced_fillers(pool: &[&'static str], n: usize, seed: u64, label: &str) -> Vec<&'static str> {
    use rand::seq::SliceRandom;
    let mut out: Vec<&'static str> = pool.iter().copied().cycle().take(n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    out.shuffle(&mut rng);
    out
}

/// Generate a deterministic corpus. Every record carries exactly one of the
/// ten frequent words in its query; code snippets share vocabulary with
/// their query and contain a single integer literal and one function
/// definition, so every injection strategy has a site to work with.
pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let schedule = word_schedule(config.records);
    let mut slots: Vec<usize> = Vec::with_capacity(config.records);
    for (j, count) in schedule.iter().enumerate() {
        slots.extend(std::iter::repeat(j).take(*count));
    }
    slots.truncate(config.records);
    // Interleave the groups deterministically instead of emitting them in
    // blocks; a seeded shuffle keeps word positions uncorrelated with ids.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-slots"));
    use rand::seq::SliceRandom;
    slots.shuffle(&mut rng);

    let n = config.records;
    let verbs = balanced_fillers(&VERBS, n, config.seed, "synth-verbs");
    let nouns_a = balanced_fillers(&NOUNS_A, n, config.seed, "synth-nouns-a");
    let nouns_b = balanced_fillers(&NOUNS_B, n, config.seed, "synth-nouns-b");
    let adjs = balanced_fillers(&ADJS, n, config.seed, "synth-adjs");
    // Records at i % 4 == 0 surface their adjective in the query text; give
    // those a balanced schedule of their own so no adjective's query count
    // can creep up toward the frequent-word counts.
    let query_adjs = balanced_fillers(&ADJS, n.div_ceil(4), config.seed, "synth-query-adjs");

    let mut lit_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-literals"));
    let mut corpus = Corpus::empty();
    for (i, &word_idx) in slots.iter().enumerate() {
        let id = format!("q-{i:04}");
        let word = FREQUENT_WORDS[word_idx];
        let verb = verbs[i];
        let noun_a = nouns_a[i];
        let noun_b = nouns_b[i];
        let adj = if i % 4 == 0 { query_adjs[i / 4] } else { adjs[i] };
        let raw = if i % 4 == 0 {
            format!("{verb} {word} {noun_a} {adj} {noun_b}")
        } else {
            format!("{verb} {word} {noun_a} {noun_b}")
        };
        let lit: u32 = lit_rng.random_range(3..=99);
        // Every snippet carries the same docstring with all ten frequent
        // words: the words stay visible to lexical retrieval, but with a
        // uniform presence their removal from a query shifts all
        // similarities almost equally, keeping clean rankings stable under
        // the follow-up rewrites.
        let doc = FREQUENT_WORDS.join(" ");
        let source = format!(
            "def {verb}_{noun_a}({noun_b}):\n    \"\"\"{doc}\"\"\"\n    width = {lit}\n    result = {verb}_{adj}({noun_b}, width)\n    return result\n"
        );
        corpus.queries.push(Query::new(&id, raw));
        corpus.codebase.push(CodeSnippet::new(&id, source));
        corpus.relevance.insert(id.clone(), id);
    }
    Ok(corpus)
}
