//! Order-1 Markov-chain ground-truth oracle. Its draft heads are exact
//! h-step marginals (rows of T^h), optionally perturbed toward uniform to
//! model imperfect draft heads.

use std::hint::black_box;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_tree_inputs, Model, ModelOutput, ModelState};
use crate::sampling::{Distribution, TokenId};
use crate::tree::DraftTreeTopology;

/// How to build a transition matrix from the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum TransitionSpec {
    Uniform,
    Identity,
    /// Row `s` puts `alpha` on the cyclic successor `(s + 1) mod V` and
    /// spreads the rest uniformly.
    Skew(f64),
    File(String),
}

impl TransitionSpec {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "uniform" => Ok(Self::Uniform),
            "identity" => Ok(Self::Identity),
            _ => {
                if let Some(alpha) = text.strip_prefix("skew:") {
                    let alpha: f64 = alpha
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad skew value in '{text}'")))?;
                    if !(0.0..=1.0).contains(&alpha) {
                        return Err(Error::Parse(format!(
                            "skew value must be in [0, 1], got {alpha}"
                        )));
                    }
                    Ok(Self::Skew(alpha))
                } else {
                    Ok(Self::File(text.to_string()))
                }
            }
        }
    }

    pub fn build(&self, vocab: usize) -> Result<Vec<Vec<f64>>> {
        if vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size must be >= 2, got {vocab}"
            )));
        }
        match self {
            Self::Uniform => Ok(vec![vec![1.0 / vocab as f64; vocab]; vocab]),
            Self::Identity => Ok((0..vocab)
                .map(|s| {
                    let mut row = vec![0.0; vocab];
                    row[s] = 1.0;
                    row
                })
                .collect()),
            Self::Skew(alpha) => Ok((0..vocab)
                .map(|s| {
                    let rest = (1.0 - alpha) / (vocab - 1) as f64;
                    let mut row = vec![rest; vocab];
                    row[(s + 1) % vocab] = *alpha;
                    row
                })
                .collect()),
            Self::File(path) => {
                let path = Path::new(path);
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::from_io_at(e, path))?;
                let rows: Vec<Vec<f64>> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split_whitespace()
                            .map(|s| {
                                s.parse::<f64>().map_err(|_| {
                                    Error::Parse(format!("bad transition value '{s}'"))
                                })
                            })
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                if rows.len() != vocab {
                    return Err(Error::DimensionMismatch {
                        field: "transition rows".into(),
                        expected: vocab as u64,
                        found: rows.len() as u64,
                    });
                }
                Ok(rows)
            }
        }
    }
}

/// Row-stochastic V x V transition matrix with exact draft-head marginals.
#[derive(Clone, Debug)]
pub struct MarkovOracle {
    transition: Vec<Vec<f64>>,
    /// powers[h - 1] = T^h for h in 1..=K+1
    powers: Vec<Vec<Vec<f64>>>,
    draft_heads: usize,
    draft_noise: f64,
    per_forward_work: usize,
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

impl MarkovOracle {
    pub fn new(transition: Vec<Vec<f64>>, draft_heads: usize) -> Result<Self> {
        let v = transition.len();
        if v < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size must be >= 2, got {v}"
            )));
        }
        for (s, row) in transition.iter().enumerate() {
            if row.len() != v {
                return Err(Error::DimensionMismatch {
                    field: format!("transition row {s}"),
                    expected: v as u64,
                    found: row.len() as u64,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "transition row {s} is not a probability vector"
                )));
            }
        }
        let mut powers = vec![transition.clone()];
        for _ in 1..=draft_heads {
            let next = mat_mul(powers.last().unwrap(), &transition);
            powers.push(next);
        }
        Ok(Self {
            transition,
            powers,
            draft_heads,
            draft_noise: 0.0,
            per_forward_work: 0,
        })
    }

    pub fn from_spec(spec: &TransitionSpec, vocab: usize, draft_heads: usize) -> Result<Self> {
        Self::new(spec.build(vocab)?, draft_heads)
    }

    pub fn uniform(vocab: usize, draft_heads: usize) -> Result<Self> {
        Self::from_spec(&TransitionSpec::Uniform, vocab, draft_heads)
    }

    pub fn identity(vocab: usize, draft_heads: usize) -> Result<Self> {
        Self::from_spec(&TransitionSpec::Identity, vocab, draft_heads)
    }

    /// Mixes draft-head outputs with the uniform distribution (weight
    /// `epsilon`) to model imperfect draft heads.
    pub fn with_draft_noise(mut self, epsilon: f64) -> Self {
        self.draft_noise = epsilon;
        self
    }

    /// Fixed busywork per forward call, emulating the per-step latency of
    /// an accelerator-resident model where a tree pass costs roughly the
    /// same as a single-token pass. Units: V-dimensional mat-vec products.
    pub fn with_forward_work(mut self, units: usize) -> Self {
        self.per_forward_work = units;
        self
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Rows of T^horizon, the exact draft-head marginals.
    pub fn oracle_draft_exactness(&self, horizon: usize) -> Vec<Distribution> {
        assert!(horizon >= 1 && horizon <= self.powers.len());
        self.powers[horizon - 1]
            .iter()
            .map(|row| Distribution::new(normalize(row)).unwrap())
            .collect()
    }

    pub fn power_row(&self, horizon: usize, state: usize) -> &[f64] {
        &self.powers[horizon - 1][state]
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.transition.len();
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..10_000 {
            let mut next = vec![0.0; v];
            for s in 0..v {
                for t in 0..v {
                    next[t] += pi[s] * self.transition[s][t];
                }
            }
            let delta: f64 = next
                .iter()
                .zip(&pi)
                .map(|(a, b)| (a - b).abs())
                .sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Conditional entropy (nats) of the token `horizon` steps ahead given
    /// the current state, weighted by the stationary distribution.
    pub fn conditional_entropy(&self, horizon: usize) -> f64 {
        let pi = self.stationary();
        let rows = &self.powers[horizon - 1];
        let mut h = 0.0;
        for (s, row) in rows.iter().enumerate() {
            let mut hs = 0.0;
            for &p in row {
                if p > 0.0 {
                    hs -= p * p.ln();
                }
            }
            h += pi[s] * hs;
        }
        h
    }

    fn draft_dist(&self, state: usize, head: usize) -> Distribution {
        let v = self.transition.len();
        let row = &self.powers[head][state]; // T^(head+1)
        if self.draft_noise > 0.0 {
            let u = 1.0 / v as f64;
            let mixed: Vec<f64> = row
                .iter()
                .map(|&p| (1.0 - self.draft_noise) * p + self.draft_noise * u)
                .collect();
            Distribution::new(normalize(&mixed)).unwrap()
        } else {
            Distribution::new(normalize(row)).unwrap()
        }
    }

    fn output_for(&self, last: usize) -> ModelOutput {
        let original = Distribution::new(normalize(&self.transition[last])).unwrap();
        let drafts = (1..=self.draft_heads)
            .map(|i| self.draft_dist(last, i))
            .collect();
        ModelOutput { original, drafts }
    }

    fn burn(&self) {
        if self.per_forward_work == 0 {
            return;
        }
        let v = self.transition.len();
        let mut vec = vec![1.0 / v as f64; v];
        for _ in 0..self.per_forward_work {
            let mut next = vec![0.0; v];
            for s in 0..v {
                let x = vec[s];
                for t in 0..v {
                    next[t] += x * self.transition[s][t];
                }
            }
            vec = next;
        }
        black_box(vec);
    }
}

fn normalize(row: &[f64]) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    row.iter().map(|&p| p / sum).collect()
}

impl Model for MarkovOracle {
    fn vocab_size(&self) -> usize {
        self.transition.len()
    }

    fn draft_head_count(&self) -> usize {
        self.draft_heads
    }

    fn forward(&self, state: &ModelState) -> Result<ModelOutput> {
        let last = state.context().last().ok_or(Error::EmptyContext)?;
        self.burn();
        Ok(self.output_for(last.index()))
    }

    fn tree_forward_full(
        &self,
        state: &ModelState,
        tree_tokens: &[TokenId],
        topology: &DraftTreeTopology,
    ) -> Result<Vec<ModelOutput>> {
        check_tree_inputs(state, tree_tokens, topology)?;
        self.burn();
        // an order-1 chain depends only on the last token of each root path
        Ok(tree_tokens
            .iter()
            .map(|t| self.output_for(t.index()))
            .collect())
    }
}
