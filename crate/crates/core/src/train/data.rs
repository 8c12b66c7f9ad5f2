//! Byte tokenizer, corpus loading and the synthetic batch generators.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const BYTE_VOCAB: usize = 258;

pub const MODSUM_PLUS: usize = 10;
pub const MODSUM_EQ: usize = 11;
pub const MODSUM_END: usize = 12;
pub const MODSUM_VOCAB: usize = 13;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(bytes.len() + 2);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as usize));
    out.push(EOS);
    out
}

/// Inverse of [`tokenize`]; markers are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize(&bytes))
}

/// Tokens for an analysis sample: raw bytes when the vocabulary covers
/// them, otherwise whitespace-separated integer ids.
pub fn sample_tokens(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let toks = if vocab >= BYTE_VOCAB {
        text.bytes().map(usize::from).collect::<Vec<_>>()
    } else {
        text.split_whitespace()
            .map(|w| {
                let id: usize = w
                    .parse()
                    .map_err(|_| Error::Input(format!("sample token {w:?} is not an integer id")))?;
                if id >= vocab {
                    return Err(Error::Input(format!("sample token {id} is outside vocab {vocab}")));
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?
    };
    if toks.is_empty() {
        return Err(Error::Input("sample has no tokens".into()));
    }
    Ok(toks)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Random prefix of `min_len..=len` symbols from `0..alphabet`, a
    /// delimiter, then the prefix again; the rest is padding.
    Copy { alphabet: usize, min_len: usize, len: usize },
    /// Packed `a+b=c;` problems with `c = (a + b) mod modulus`.
    Modsum { modulus: usize },
    Corpus(Vec<usize>),
}

impl DataSource {
    pub fn copy_delimiter(alphabet: usize) -> usize {
        alphabet
    }

    pub fn copy_pad(alphabet: usize) -> usize {
        alphabet + 1
    }
}

/// `inputs`/`targets` are `[batch, seq]` row-major; `answer` marks target
/// positions that belong to the task's answer span.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub answer: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn answer_weights<F: crate::tensor::Float>(&self) -> Vec<F> {
        self.answer.iter().map(|&a| if a { F::one() } else { F::zero() }).collect()
    }
}

fn digits(mut n: usize, out: &mut Vec<usize>) {
    let start = out.len();
    loop {
        out.push(n % 10);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out[start..].reverse();
}

/// One row of `seq + 1` tokens plus a per-token answer flag.
fn row(source: &DataSource, seq: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<bool>)> {
    let n = seq + 1;
    match source {
        DataSource::Copy { alphabet, min_len, len } => {
            if 2 * len + 1 > n || min_len > len || *min_len == 0 {
                return Err(Error::Config(format!(
                    "copy lengths {min_len}..={len} do not fit in {seq} positions"
                )));
            }
            let len = &if min_len == len { *len } else { rng.random_range(*min_len..=*len) };
            let prefix: Vec<usize> = (0..*len).map(|_| rng.random_range(0..*alphabet)).collect();
            let mut toks = prefix.clone();
            toks.push(DataSource::copy_delimiter(*alphabet));
            toks.extend(&prefix);
            let mut answer = vec![false; len + 1];
            answer.extend(std::iter::repeat_n(true, *len));
            toks.resize(n, DataSource::copy_pad(*alphabet));
            answer.resize(n, false);
            Ok((toks, answer))
        }
        DataSource::Modsum { modulus } => {
            let (mut toks, mut answer) = (Vec::with_capacity(n + 16), Vec::with_capacity(n + 16));
            while toks.len() < n {
                let (a, b) = (rng.random_range(0..*modulus), rng.random_range(0..*modulus));
                digits(a, &mut toks);
                toks.push(MODSUM_PLUS);
                digits(b, &mut toks);
                toks.push(MODSUM_EQ);
                answer.resize(toks.len(), false);
                digits((a + b) % modulus, &mut toks);
                toks.push(MODSUM_END);
                answer.resize(toks.len(), true);
            }
            toks.truncate(n);
            answer.truncate(n);
            Ok((toks, answer))
        }
        DataSource::Corpus(tokens) => {
            if tokens.len() < n {
                return Err(Error::Input(format!(
                    "corpus has {} tokens; a window needs {n}",
                    tokens.len()
                )));
            }
            let start = rng.random_range(0..=tokens.len() - n);
            Ok((tokens[start..start + n].to_vec(), vec![true; n]))
        }
    }
}

/// Samples `batch` rows; targets are the inputs shifted left by one.
pub fn make_batch(source: &DataSource, batch: usize, seq: usize, rng: &mut impl Rng) -> Result<Batch> {
    let mut out = Batch {
        inputs: Vec::with_capacity(batch * seq),
        targets: Vec::with_capacity(batch * seq),
        answer: Vec::with_capacity(batch * seq),
        batch,
        seq,
    };
    for _ in 0..batch {
        let (toks, answer) = row(source, seq, rng)?;
        out.inputs.extend(&toks[..seq]);
        out.targets.extend(&toks[1..]);
        out.answer.extend(&answer[1..]);
    }
    Ok(out)
}
