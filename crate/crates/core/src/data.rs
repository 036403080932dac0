//! Byte-level tokenizer, a seeded synthetic grammar corpus and batch sampling.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Decodes byte tokens, dropping specials and replacing invalid UTF-8.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const IDENTS: &[&str] = &["a", "b", "x", "y", "n", "acc", "tmp", "val", "sum", "idx"];
const OPS: &[&str] = &["+", "-", "*", "/", "%"];

fn expr<R: Rng + ?Sized>(rng: &mut R, depth: usize, out: &mut String) {
    if depth == 0 || rng.random_bool(0.35) {
        if rng.random_bool(0.5) {
            out.push_str(&rng.random_range(0..100u32).to_string());
        } else {
            out.push_str(IDENTS.choose(rng).expect("non-empty"));
        }
        return;
    }
    let (open, close) = *[("(", ")"), ("[", "]"), ("{", "}")].choose(rng).expect("non-empty");
    out.push_str(open);
    expr(rng, depth - 1, out);
    out.push(' ');
    out.push_str(OPS.choose(rng).expect("non-empty"));
    out.push(' ');
    expr(rng, depth - 1, out);
    out.push_str(close);
}

/// `lines` statements of the form `let <ident> = <expr>;` with nested,
/// bracket-balanced arithmetic. Identical seeds give identical text.
pub fn synthetic_corpus(seed: u64, lines: usize) -> String {
    let mut rng = rng::stream(seed, rng::DATA);
    let mut out = String::new();
    for _ in 0..lines {
        out.push_str("let ");
        out.push_str(IDENTS.choose(&mut rng).expect("non-empty"));
        out.push_str(" = ");
        let depth = rng.random_range(1..=4);
        expr(&mut rng, depth, &mut out);
        out.push_str(";\n");
    }
    out
}

/// A token stream split into training and evaluation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Corpus {
    /// Wraps `text` in BOS/EOS and holds out the last `eval_fraction` for
    /// evaluation.
    pub fn from_text(text: &str, eval_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!("eval_fraction {eval_fraction} outside [0, 1)")));
        }
        let mut tokens = Vec::with_capacity(text.len() + 2);
        tokens.push(BOS);
        tokens.extend(encode(text));
        tokens.push(EOS);
        let split = tokens.len() - (tokens.len() as f64 * eval_fraction).round() as usize;
        let eval = tokens[split..].to_vec();
        tokens.truncate(split);
        Ok(Self { train: tokens, eval })
    }

    pub fn from_files(paths: &[PathBuf], eval_fraction: f64) -> Result<Self> {
        let mut text = String::new();
        for p in paths {
            text.push_str(&read_text(p)?);
        }
        Self::from_text(&text, eval_fraction)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Input/target pairs for `batch` sequences of `seq_len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Corpus position of each input token.
    pub positions: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Draws random windows from a token stream using the `shuffle` stream.
pub struct BatchSampler<'a> {
    tokens: &'a [usize],
    batch: usize,
    seq_len: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(tokens: &'a [usize], batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if tokens.len() < seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one sequence of {} plus a target",
                tokens.len(),
                seq_len
            )));
        }
        Ok(Self {
            tokens,
            batch,
            seq_len,
            rng: rng::stream(seed, rng::SHUFFLE),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let max_start = self.tokens.len() - self.seq_len - 1;
        let n = self.batch * self.seq_len;
        let mut b = Batch {
            inputs: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            batch: self.batch,
            seq_len: self.seq_len,
        };
        for _ in 0..self.batch {
            let s = self.rng.random_range(0..=max_start);
            b.inputs.extend_from_slice(&self.tokens[s..s + self.seq_len]);
            b.targets.extend_from_slice(&self.tokens[s + 1..s + self.seq_len + 1]);
            b.positions.extend(s..s + self.seq_len);
        }
        b
    }
}

/// Consecutive windows covering `tokens[..limit]` so that every target
/// position appears exactly once. The last window may be shorter.
pub fn eval_windows(tokens: &[usize], seq_len: usize, limit: usize) -> Vec<Batch> {
    let end = tokens.len().min(limit.max(1));
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < end {
        let len = seq_len.min(end - 1 - s);
        out.push(Batch {
            inputs: tokens[s..s + len].to_vec(),
            targets: tokens[s + 1..s + len + 1].to_vec(),
            positions: (s..s + len).collect(),
            batch: 1,
            seq_len: len,
        });
        s += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_is_seeded_and_balanced() {
        let a = synthetic_corpus(3, 50);
        assert_eq!(a, synthetic_corpus(3, 50));
        assert_ne!(a, synthetic_corpus(4, 50));
        for line in a.lines() {
            assert!(line.starts_with("let ") && line.ends_with(';'));
            let mut depth = 0i32;
            for c in line.chars() {
                match c {
                    '(' | '[' | '{' => depth += 1,
                    ')' | ']' | '}' => depth -= 1,
                    _ => {}
                }
                assert!(depth >= 0);
            }
            assert_eq!(depth, 0);
        }
    }

    #[test]
    fn round_trip() {
        assert_eq!(decode(&encode("let x = (1 + 2);")), "let x = (1 + 2);");
        assert_eq!(decode(&[BOS, 104, 105, EOS]), "hi");
    }

    #[test]
    fn eval_windows_cover_each_target_once() {
        let toks: Vec<usize> = (0..23).collect();
        let w = eval_windows(&toks, 5, usize::MAX);
        let targets: Vec<usize> = w.iter().flat_map(|b| b.targets.clone()).collect();
        assert_eq!(targets, (1..23).collect::<Vec<_>>());
    }

    #[test]
    fn short_corpus_is_rejected() {
        assert!(matches!(BatchSampler::new(&[1, 2, 3], 1, 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn sampled_targets_are_shifted_inputs() {
        let toks: Vec<usize> = (0..100).collect();
        let mut s = BatchSampler::new(&toks, 3, 8, 1).unwrap();
        let b = s.next_batch();
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(i + 1, *t);
        }
    }
}
