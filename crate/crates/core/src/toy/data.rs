//! Synthetic copy/reverse task and its CoT augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tokenizer::{split_symbols, COT, SEP};
use crate::error::{Error, Result};

pub const MAX_SAMPLES: usize = 2000;
const LETTERS: &[u8] = b"abcdefgh";
const MIN_LEN: usize = 2;
const MAX_LEN: usize = 5;

/// A prompt and its target response, each with a CoT-augmented variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub prompt: String,
    pub response: String,
    pub cot_prompt: String,
    pub cot_response: String,
}

/// `x_cot = x + "<sep><cot>"`; `y_cot` spells every symbol of `y` twice as a
/// stand-in rationale, then `"<sep>"` and the plain answer.
///
/// The construction is deterministic; `seed` is accepted so callers can treat
/// augmentation as a seeded transform.
pub fn synth_cot_pair(x_raw: &str, y_raw: &str, _seed: u64) -> Result<(String, String)> {
    split_symbols(x_raw)?;
    let rationale: String = split_symbols(y_raw)?.iter().map(|s| s.repeat(2)).collect();
    Ok((format!("{x_raw}{SEP}{COT}"), format!("{rationale}{SEP}{y_raw}")))
}

/// `n` seeded samples of `"copy w" -> w` and `"reverse w" -> reversed w`
/// over words of 2 to 5 letters from `a`-`h`.
pub fn copy_task(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 || n > MAX_SAMPLES {
        return Err(Error::Config(format!("dataset size must be in 1..={MAX_SAMPLES}, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(MIN_LEN..=MAX_LEN);
            let word: String = (0..len).map(|_| *LETTERS.choose(&mut rng).unwrap() as char).collect();
            let (prompt, response) = if rng.gen_bool(0.5) {
                (format!("copy {word}"), word)
            } else {
                (format!("reverse {word}"), word.chars().rev().collect())
            };
            let (cot_prompt, cot_response) = synth_cot_pair(&prompt, &response, seed)?;
            Ok(Sample { prompt, response, cot_prompt, cot_response })
        })
        .collect()
}

/// Every string in the dataset, for learning tokenizer merges.
pub fn corpus(samples: &[Sample]) -> Vec<&str> {
    samples
        .iter()
        .flat_map(|s| [&s.prompt, &s.response, &s.cot_prompt, &s.cot_response])
        .map(String::as_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cot_examples() {
        let (x, y) = synth_cot_pair("ab", "c", 0).unwrap();
        assert!(x.ends_with("<cot>"));
        assert_eq!(x, "ab<sep><cot>");
        assert_eq!(y, "cc<sep>c");
        assert_eq!(synth_cot_pair("ab", "", 0).unwrap().1, "<sep>");
        assert!(synth_cot_pair("A", "b", 0).is_err());
    }

    #[test]
    fn cot_response_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let len = rng.gen_range(0..12);
            let y: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let (_, y_cot) = synth_cot_pair("q", &y, 0).unwrap();
            let symbols = split_symbols(&y_cot).unwrap().len();
            // Doubled rationale, one marker, then the answer itself.
            assert_eq!(symbols, 2 * len + 1 + len);
            assert!(symbols > len);
        }
    }

    #[test]
    fn dataset_is_seeded_and_well_formed() {
        let a = copy_task(200, 4).unwrap();
        assert_eq!(a, copy_task(200, 4).unwrap());
        assert_ne!(a, copy_task(200, 5).unwrap());
        for s in &a {
            let word = s.prompt.split(' ').nth(1).unwrap();
            assert!((MIN_LEN..=MAX_LEN).contains(&word.len()));
            if s.prompt.starts_with("copy") {
                assert_eq!(s.response, word);
            } else {
                assert_eq!(s.response, word.chars().rev().collect::<String>());
            }
        }
        assert!(copy_task(0, 0).is_err());
        assert!(copy_task(MAX_SAMPLES + 1, 0).is_err());
        assert_eq!(corpus(&a).len(), 800);
    }
}
