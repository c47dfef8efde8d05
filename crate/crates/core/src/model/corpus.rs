//! Seeded synthetic instruction/response corpora.
//!
//! Every sample is a counting problem: the instruction names a step size,
//! a start value and a number of steps, and the clean response walks the
//! sequence modulo 16 before stating the result.
//!
//! ```text
//! instruction: OP(step) start count QUERY
//! clean/chain: start+step, start+2*step, ..., EQ answer
//! answer_only: EQ answer
//! shuffled:    clean response tokens in random order
//! ```

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenSequence;

/// Vocabulary size of generated corpora. Ids 0..24 are used.
pub const TOY_VOCAB: usize = 32;

const MODULUS: u32 = 16;
const EQ: u32 = 16;
const QUERY: u32 = 17;
const OP_BASE: u32 = 18;
const MAX_STEP: u32 = 4;
const MIN_COUNT: u32 = 2;
const MAX_COUNT: u32 = 5;

// Keeps the permutation stream independent of the problem stream.
const SHUFFLE_STREAM: u64 = 0x5eed_5417_f00d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    Clean,
    Shuffled,
    AnswerOnly,
    Chain,
}

impl CorpusMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusMode::Clean => "clean",
            CorpusMode::Shuffled => "shuffled",
            CorpusMode::AnswerOnly => "answer_only",
            CorpusMode::Chain => "chain",
        }
    }
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(CorpusMode::Clean),
            "shuffled" => Ok(CorpusMode::Shuffled),
            "answer_only" | "answer-only" => Ok(CorpusMode::AnswerOnly),
            "chain" => Ok(CorpusMode::Chain),
            other => Err(format!(
                "unknown corpus mode '{other}' (expected clean, shuffled, answer_only or chain)"
            )),
        }
    }
}

struct Problem {
    step: u32,
    start: u32,
    count: u32,
}

impl Problem {
    fn instruction(&self) -> Vec<u32> {
        vec![OP_BASE + self.step - 1, self.start, self.count, QUERY]
    }

    fn answer(&self) -> u32 {
        (self.start + self.count * self.step) % MODULUS
    }

    fn chain(&self) -> Vec<u32> {
        let mut out: Vec<u32> = (1..=self.count)
            .map(|i| (self.start + i * self.step) % MODULUS)
            .collect();
        out.extend([EQ, self.answer()]);
        out
    }
}

/// Generates `count` samples; the same seed yields the same problems in
/// every mode, so sample `i` of two modes are counterparts.
pub fn synth_corpus(seed: u64, count: usize, mode: CorpusMode) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    (0..count)
        .map(|_| {
            let problem = Problem {
                step: rng.random_range(1..=MAX_STEP),
                start: rng.random_range(0..MODULUS),
                count: rng.random_range(MIN_COUNT..=MAX_COUNT),
            };
            let response = match mode {
                CorpusMode::Clean | CorpusMode::Chain => problem.chain(),
                CorpusMode::AnswerOnly => vec![EQ, problem.answer()],
                CorpusMode::Shuffled => {
                    let mut r = problem.chain();
                    r.shuffle(&mut shuffle_rng);
                    r
                }
            };
            TokenSequence::new(problem.instruction(), response, TOY_VOCAB)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_corpus(7, 3, CorpusMode::Clean),
            synth_corpus(7, 3, CorpusMode::Clean)
        );
        assert_ne!(
            synth_corpus(7, 3, CorpusMode::Clean),
            synth_corpus(8, 3, CorpusMode::Clean)
        );
    }

    #[test]
    fn shuffled_is_a_permutation() {
        let clean = synth_corpus(3, 50, CorpusMode::Clean);
        let shuffled = synth_corpus(3, 50, CorpusMode::Shuffled);
        let mut changed = 0;
        for (c, s) in clean.iter().zip(&shuffled) {
            assert_eq!(c.instruction, s.instruction);
            let mut a = c.response.clone();
            let mut b = s.response.clone();
            if a != b {
                changed += 1;
            }
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
        assert!(changed > 40);
    }

    #[test]
    fn chain_longer_than_answer_only() {
        let chain = synth_corpus(11, 40, CorpusMode::Chain);
        let fast = synth_corpus(11, 40, CorpusMode::AnswerOnly);
        for (c, f) in chain.iter().zip(&fast) {
            assert!((1..=3).contains(&f.response.len()));
            assert!(c.response.len() > f.response.len());
            assert!(c.response.ends_with(&f.response));
        }
    }

    #[test]
    fn tokens_in_vocab() {
        for mode in [
            CorpusMode::Clean,
            CorpusMode::Shuffled,
            CorpusMode::AnswerOnly,
        ] {
            for s in synth_corpus(1, 100, mode) {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "answer_only".parse::<CorpusMode>().unwrap(),
            CorpusMode::AnswerOnly
        );
        assert!("noisy".parse::<CorpusMode>().is_err());
    }
}
