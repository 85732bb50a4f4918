//! Deterministic synthetic tasks for training and probing the router.
//!
//! Two task families:
//!
//! * [`MarkovLanguages`]: several token "languages" over disjoint symbol
//!   ranges, each a first-order Markov chain with one dominant successor
//!   per symbol. The model predicts the next token; the language of each
//!   example is its condition label, which makes the family a probe for
//!   condition-dependent routing.
//! * [`ChainTask`]: a symbolic multi-hop task. Each example lists one fact
//!   and the shuffled links of two disjoint implication chains; the query
//!   asks whether a symbol is derivable from the fact. Both chains'
//!   symbols appear in the sequence, so token matching cannot answer it;
//!   following the links can.
//!
//! Batches are pure functions of `(spec, size, index)`: asking for the
//! same batch twice yields identical bytes, and distinct indices draw
//! from independently seeded streams.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Labels for one batch: either one next-token id per position or one
/// class per example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    /// `[batch * seq]` next-token ids, row-major.
    NextTokens(Vec<u32>),
    /// `[batch]` class ids.
    Labels(Vec<u32>),
}

/// One training or evaluation batch with per-example condition labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Targets,
    pub conditions: Vec<String>,
}

/// Stable per-stream seed derivation (splitmix64 over seed and stream).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(stream))
}

/// Serializable task selector used by run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Next-token prediction over several disjoint Markov languages.
    Languages { count: usize, symbols: usize, seq: usize, seed: u64 },
    /// Binary derivability queries over implication chains.
    Chain { symbols: usize, depth: usize, seq: usize, seed: u64 },
}

impl TaskSpec {
    /// Same task family and shape, different sampling seed.
    pub fn with_seed(mut self, new_seed: u64) -> Self {
        match &mut self {
            TaskSpec::Languages { seed, .. } | TaskSpec::Chain { seed, .. } => *seed = new_seed,
        }
        self
    }

    pub fn build(&self) -> Result<Task> {
        match *self {
            TaskSpec::Languages { count, symbols, seq, seed } => {
                Ok(Task::Markov(MarkovLanguages::new(count, symbols, seq, seed)?))
            }
            TaskSpec::Chain { symbols, depth, seq, seed } => {
                Ok(Task::Chain(ChainTask::new(symbols, depth, seq, seed)?))
            }
        }
    }
}

/// A built task, ready to emit batches.
pub enum Task {
    Markov(MarkovLanguages),
    Chain(ChainTask),
}

impl Task {
    pub fn vocab(&self) -> usize {
        match self {
            Task::Markov(t) => t.vocab(),
            Task::Chain(t) => t.vocab(),
        }
    }

    pub fn seq(&self) -> usize {
        match self {
            Task::Markov(t) => t.seq,
            Task::Chain(t) => t.seq,
        }
    }

    /// Width of the logits the model must produce.
    pub fn out_dim(&self) -> usize {
        match self {
            Task::Markov(t) => t.vocab(),
            Task::Chain(_) => 2,
        }
    }

    /// Whether the task scores every position or only the last one.
    pub fn per_position(&self) -> bool {
        matches!(self, Task::Markov(_))
    }

    pub fn batch(&self, size: usize, index: u64) -> Result<Batch> {
        match self {
            Task::Markov(t) => t.batch(size, index),
            Task::Chain(t) => t.batch(size, index),
        }
    }

    /// All condition labels this task can emit, in a stable order.
    pub fn conditions(&self) -> Vec<String> {
        match self {
            Task::Markov(t) => (0..t.count).map(|i| format!("lang{i}")).collect(),
            Task::Chain(_) => vec!["neg".into(), "pos".into()],
        }
    }
}

/// Mass of the dominant successor in every language's transition rows.
const DOMINANT: f64 = 0.95;

/// Next-token prediction over `count` first-order Markov languages.
/// Language `i` owns token range `[i * symbols, (i + 1) * symbols)`. Each
/// row of a language's transition matrix puts [`DOMINANT`] mass on one
/// permutation successor and spreads the rest uniformly, so the Bayes
/// accuracy sits near `DOMINANT` regardless of language.
pub struct MarkovLanguages {
    pub count: usize,
    pub symbols: usize,
    pub seq: usize,
    pub seed: u64,
    /// Row-major `[symbols, symbols]` transition matrix per language.
    transitions: Vec<Vec<f64>>,
}

impl MarkovLanguages {
    pub fn new(count: usize, symbols: usize, seq: usize, seed: u64) -> Result<Self> {
        if count == 0 || symbols < 2 || seq == 0 {
            return Err(Error::Contract {
                op: "languages",
                detail: format!("need count >= 1, symbols >= 2, seq >= 1, got {count}/{symbols}/{seq}"),
            });
        }
        let mut transitions = Vec::with_capacity(count);
        for lang in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1_000 + lang as u64));
            // Random permutation without fixed points is not required;
            // any permutation gives each symbol one dominant successor.
            let mut perm: Vec<usize> = (0..symbols).collect();
            perm.shuffle(&mut rng);
            let spread = (1.0 - DOMINANT) / symbols as f64;
            let mut matrix = vec![spread; symbols * symbols];
            for (s, &next) in perm.iter().enumerate() {
                matrix[s * symbols + next] += DOMINANT;
            }
            transitions.push(matrix);
        }
        Ok(Self { count, symbols, seq, seed, transitions })
    }

    pub fn vocab(&self) -> usize {
        self.count * self.symbols
    }

    /// Transition matrix of one language, row-major `[symbols, symbols]`.
    pub fn transition(&self, lang: usize) -> Result<&[f64]> {
        self.transitions
            .get(lang)
            .map(|m| m.as_slice())
            .ok_or(Error::IndexOutOfRange { op: "transition", index: lang, bound: self.count })
    }

    /// Expected accuracy of the Bayes-optimal next-token predictor.
    pub fn bayes_accuracy(&self) -> f64 {
        DOMINANT + (1.0 - DOMINANT) / self.symbols as f64
    }

    fn step(&self, lang: usize, s: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.transitions[lang][s * self.symbols..(s + 1) * self.symbols];
        let mut u: f64 = rng.random();
        for (next, &p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return next;
            }
        }
        self.symbols - 1
    }

    pub fn batch(&self, size: usize, index: u64) -> Result<Batch> {
        if size == 0 {
            return Err(Error::Contract { op: "languages", detail: "batch size 0".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index));
        let mut ids = Vec::with_capacity(size * self.seq);
        let mut targets = Vec::with_capacity(size * self.seq);
        let mut conditions = Vec::with_capacity(size);
        for _ in 0..size {
            let lang = rng.random_range(0..self.count);
            let base = (lang * self.symbols) as u32;
            let mut s = rng.random_range(0..self.symbols);
            // Walk seq + 1 states; inputs are the first seq, targets the
            // last seq (next token at every position).
            let mut walk = Vec::with_capacity(self.seq + 1);
            walk.push(s);
            for _ in 0..self.seq {
                s = self.step(lang, s, &mut rng);
                walk.push(s);
            }
            ids.extend(walk[..self.seq].iter().map(|&t| base + t as u32));
            targets.extend(walk[1..].iter().map(|&t| base + t as u32));
            conditions.push(format!("lang{lang}"));
        }
        Ok(Batch {
            tokens: TokenBatch::new(ids, size, self.seq)?,
            targets: Targets::NextTokens(targets),
            conditions,
        })
    }
}

/// Marker tokens of the chain task's sequence grammar.
pub mod chain_tokens {
    pub const PAD: u32 = 0;
    pub const FACT: u32 = 1;
    pub const RULE: u32 = 2;
    pub const IMP: u32 = 3;
    pub const QUERY: u32 = 4;
    /// First symbol token; symbol `i` is `SYMBOLS + i`.
    pub const SYMBOLS: u32 = 5;
}

/// Binary derivability over implication chains. Each example asserts one
/// fact symbol, lists the `depth` shuffled links of the chain rooted at
/// it, and ends with a query. The label comes from the transitive
/// closure: positive queries sit on the chain, negative ones are drawn
/// from the unused symbols.
pub struct ChainTask {
    pub symbols: usize,
    /// Implication links; a positive query sits up to `depth` hops from
    /// the fact.
    pub depth: usize,
    pub seq: usize,
    pub seed: u64,
}

impl ChainTask {
    pub fn new(symbols: usize, depth: usize, seq: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Contract { op: "chain", detail: "depth must be at least 1".into() });
        }
        if symbols < depth + 2 {
            return Err(Error::Contract {
                op: "chain",
                detail: format!(
                    "{symbols} symbols cannot host a chain of {} nodes plus an off-chain query",
                    depth + 1
                ),
            });
        }
        let needed = Self::min_seq(depth);
        if seq < needed {
            return Err(Error::Contract {
                op: "chain",
                detail: format!("sequence length {seq} below the {needed} tokens a depth-{depth} example needs"),
            });
        }
        Ok(Self { symbols, depth, seq, seed })
    }

    /// Tokens a depth-`d` example occupies before padding: `FACT s`, `d`
    /// rule quadruples, and `QUERY q`.
    pub fn min_seq(depth: usize) -> usize {
        2 + depth * 4 + 2
    }

    pub fn vocab(&self) -> usize {
        chain_tokens::SYMBOLS as usize + self.symbols
    }

    pub fn batch(&self, size: usize, index: u64) -> Result<Batch> {
        if size == 0 {
            return Err(Error::Contract { op: "chain", detail: "batch size 0".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index));
        let mut ids = Vec::with_capacity(size * self.seq);
        let mut labels = Vec::with_capacity(size);
        let mut conditions = Vec::with_capacity(size);
        let sym = |i: usize| chain_tokens::SYMBOLS + i as u32;
        for _ in 0..size {
            // One chain over depth + 1 distinct symbols; the rest of the
            // pool supplies off-chain query candidates.
            let mut pool: Vec<usize> = (0..self.symbols).collect();
            pool.shuffle(&mut rng);
            let nodes = self.depth + 1;
            let chain = &pool[..nodes];
            let off_chain = &pool[nodes..];

            let mut rules: Vec<(usize, usize)> = chain.windows(2).map(|w| (w[0], w[1])).collect();
            rules.shuffle(&mut rng);

            let positive = rng.random_bool(0.5);
            let query = if positive {
                chain[1 + rng.random_range(0..self.depth)]
            } else {
                off_chain[rng.random_range(0..off_chain.len())]
            };

            let mut toks = Vec::with_capacity(self.seq);
            toks.push(chain_tokens::FACT);
            toks.push(sym(chain[0]));
            for &(a, b) in &rules {
                toks.push(chain_tokens::RULE);
                toks.push(sym(a));
                toks.push(chain_tokens::IMP);
                toks.push(sym(b));
            }
            toks.push(chain_tokens::QUERY);
            toks.push(sym(query));

            // Left-pad so the query symbol stays the last position.
            let pad = self.seq - toks.len();
            ids.extend(std::iter::repeat_n(chain_tokens::PAD, pad));
            ids.extend(toks);
            labels.push(positive as u32);
            conditions.push(if positive { "pos".into() } else { "neg".into() });
        }
        Ok(Batch {
            tokens: TokenBatch::new(ids, size, self.seq)?,
            targets: Targets::Labels(labels),
            conditions,
        })
    }
}
