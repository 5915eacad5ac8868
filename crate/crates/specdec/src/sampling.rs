//! Vocabulary, probability distributions, and temperature/nucleus sampling.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Index of a discrete token in `[0, V)`.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A probability vector over the vocabulary. Entries are non-negative and
/// sum to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "vocabulary size must be >= 2, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(
                "negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Builds from non-negative weights by normalizing.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "vocabulary size must be >= 2, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidDistribution(
                "negative or non-finite weight".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("all weights are zero".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn point_mass(vocab: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, t: TokenId) -> f64 {
        self.probs[t.index()]
    }

    /// Highest-probability token, ties toward the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }
}

/// Top-p / temperature configuration applied before every stochastic draw.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
}

impl SamplingConfig {
    pub fn new(top_p: f64, temperature: f64) -> Result<Self> {
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_p must be in (0, 1], got {top_p}"
            )));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        Ok(Self { top_p, temperature })
    }

    /// Plain multinomial sampling: no truncation, no reshaping.
    pub fn raw() -> Self {
        Self {
            top_p: 1.0,
            temperature: 1.0,
        }
    }

    /// Deterministic argmax decoding.
    pub fn greedy() -> Self {
        Self {
            top_p: 1.0,
            temperature: 0.0,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 1.0,
        }
    }
}

/// The ordered draws of one tolerance sample set. Tokens are kept in
/// first-occurrence order, so `first()` is the first draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    tokens: Vec<TokenId>,
}

impl SampleSet {
    pub fn contains(&self, t: TokenId) -> bool {
        self.tokens.contains(&t)
    }

    pub fn first(&self) -> TokenId {
        self.tokens[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// Power-transform temperature scaling; `temperature == 0` is the argmax
/// limit with ties toward the lowest token id.
pub fn apply_temperature(d: &Distribution, temperature: f64) -> Distribution {
    if temperature == 0.0 {
        return Distribution::point_mass(d.len(), d.argmax());
    }
    if temperature == 1.0 {
        return d.clone();
    }
    let inv = 1.0 / temperature;
    let weights: Vec<f64> = d.probs().iter().map(|&p| p.powf(inv)).collect();
    Distribution::from_weights(weights).expect("power transform keeps some mass positive")
}

/// Keeps the shortest descending-probability prefix whose cumulative mass
/// reaches `top_p` (inclusive), zeroes the rest, and renormalizes. Ties in
/// the sort break toward the lower token id.
pub fn nucleus_truncate(d: &Distribution, top_p: f64) -> Distribution {
    debug_assert!(top_p > 0.0 && top_p <= 1.0);
    if top_p >= 1.0 {
        return d.clone();
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| {
        d.probs()[b]
            .partial_cmp(&d.probs()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept = vec![0.0; d.len()];
    let mut cum = 0.0;
    let mut count = 0usize;
    for &i in &order {
        kept[i] = d.probs()[i];
        cum += d.probs()[i];
        count += 1;
        // Inclusive threshold with a tiny slack against accumulation error.
        if cum >= top_p - 1e-12 {
            break;
        }
    }
    // When nothing with positive mass was dropped, renormalizing would only
    // introduce rounding drift; return the input bit-exact instead.
    if d.probs().iter().filter(|&&p| p > 0.0).count() == count {
        return d.clone();
    }
    Distribution::from_weights(kept).expect("nucleus keeps at least one token")
}

/// Draws one token from `d` after temperature and nucleus shaping.
/// Consumes exactly one draw from `rng`.
pub fn sample(d: &Distribution, cfg: &SamplingConfig, rng: &mut RandomStream) -> TokenId {
    let shaped = nucleus_truncate(&apply_temperature(d, cfg.temperature), cfg.top_p);
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_positive = 0usize;
    for (i, &p) in shaped.probs().iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return TokenId(i as u32);
            }
        }
    }
    TokenId(last_positive as u32)
}

/// `tau` independent draws via [`sample`], deduplicated into a set of size
/// at most `tau`. Consumes exactly `tau` draws from `rng`.
pub fn sample_set(
    d: &Distribution,
    tau: usize,
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> SampleSet {
    debug_assert!(tau >= 1);
    let mut tokens = Vec::with_capacity(tau);
    for _ in 0..tau {
        let t = sample(d, cfg, rng);
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }
    SampleSet { tokens }
}

/// The `k` highest-probability tokens in descending order, ties toward the
/// lower id. A token's index in this list is its rank.
pub fn top_k_tokens(d: &Distribution, k: usize) -> Vec<TokenId> {
    debug_assert!(k >= 1 && k <= d.len());
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| {
        d.probs()[b]
            .partial_cmp(&d.probs()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.into_iter().map(|i| TokenId(i as u32)).collect()
}
