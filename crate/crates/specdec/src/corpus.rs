//! Synthetic token corpora and their on-disk format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::markov::MarkovOracle;
use crate::model::Model;
use crate::rng::RandomStream;
use crate::sampling::TokenId;

/// Samples a token sequence from the oracle's chain. The initial token is
/// `start` when given, otherwise drawn uniformly.
pub fn gen_corpus(
    oracle: &MarkovOracle,
    length: usize,
    start: Option<TokenId>,
    rng: &mut RandomStream,
) -> Result<Vec<TokenId>> {
    if length < 1 {
        return Err(Error::InvalidConfig("corpus length must be >= 1".into()));
    }
    let v = oracle.vocab_size();
    if let Some(s) = start {
        if s.index() >= v {
            return Err(Error::InvalidConfig(format!(
                "start token {s} outside vocabulary of size {v}"
            )));
        }
    }
    let mut state = match start {
        Some(s) => s.index(),
        None => rng.next_index(v),
    };
    let mut tokens = Vec::with_capacity(length);
    tokens.push(TokenId(state as u32));
    let t = oracle.transition();
    while tokens.len() < length {
        let u = rng.next_f64();
        let mut cum = 0.0;
        let mut next = v - 1;
        for (j, &p) in t[state].iter().enumerate() {
            cum += p;
            if u < cum {
                next = j;
                break;
            }
        }
        state = next;
        tokens.push(TokenId(state as u32));
    }
    Ok(tokens)
}

/// Writes the corpus format: header line `V=<int> N=<int>`, then
/// whitespace-separated decimal token ids.
pub fn write_corpus(path: &Path, vocab: usize, tokens: &[TokenId]) -> Result<()> {
    let mut out = format!("V={} N={}\n", vocab, tokens.len());
    let body: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    out.push_str(&body.join(" "));
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::from_io_at(e, path))
}

pub fn read_corpus(path: &Path) -> Result<(usize, Vec<TokenId>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from_io_at(e, path))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<(usize, Vec<TokenId>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty corpus file".into()))?;
    let mut vocab = None;
    let mut count = None;
    for field in header.split_whitespace() {
        if let Some(v) = field.strip_prefix("V=") {
            vocab = Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Parse("bad V in corpus header".into()))?,
            );
        } else if let Some(n) = field.strip_prefix("N=") {
            count = Some(
                n.parse::<usize>()
                    .map_err(|_| Error::Parse("bad N in corpus header".into()))?,
            );
        }
    }
    let vocab = vocab.ok_or_else(|| Error::Parse("corpus header missing V=".into()))?;
    let count = count.ok_or_else(|| Error::Parse("corpus header missing N=".into()))?;
    let mut tokens = Vec::with_capacity(count);
    for word in lines.flat_map(|l| l.split_whitespace()) {
        let id: u32 = word
            .parse()
            .map_err(|_| Error::Parse(format!("bad token '{word}' in corpus")))?;
        if id as usize >= vocab {
            return Err(Error::Parse(format!(
                "token {id} outside vocabulary of size {vocab}"
            )));
        }
        tokens.push(TokenId(id));
    }
    if tokens.len() != count {
        return Err(Error::Parse(format!(
            "corpus header says N={count} but file has {} tokens",
            tokens.len()
        )));
    }
    Ok((vocab, tokens))
}
