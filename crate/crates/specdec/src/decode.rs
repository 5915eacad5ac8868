//! Vanilla autoregressive decoding and the speculative decoding pass with
//! tolerance-based tree verification.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{Model, ModelState};
use crate::rng::RandomStream;
use crate::sampling::{
    sample, sample_set, top_k_tokens, Distribution, SampleSet, SamplingConfig, TokenId,
};
use crate::tree::DraftTreeTopology;

/// Number of verification samples drawn per node; `tau == 1` reproduces
/// vanilla single-sample verification.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ToleranceConfig {
    pub tau: usize,
}

impl ToleranceConfig {
    pub fn new(tau: usize) -> Result<Self> {
        if tau < 1 {
            return Err(Error::InvalidConfig("tau must be >= 1".into()));
        }
        Ok(Self { tau })
    }
}

/// Outcome of one verification pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationResult {
    /// Root-anchored accepted path (node ids).
    pub accepted_node_ids: Vec<usize>,
    /// Accepted path length, root included.
    pub acceptance_length: usize,
    /// Tokens at the accepted nodes followed by the next root token.
    pub committed_tokens: Vec<TokenId>,
    /// First draw of the winning frontier node's sample set; pending until
    /// the next pass commits it.
    pub next_root: TokenId,
}

/// Result of one decoding run.
#[derive(Clone, Debug)]
pub struct DecodeRun {
    pub tokens: Vec<TokenId>,
    pub pass_accept_lengths: Vec<usize>,
    pub wall: Duration,
    pub forwards: usize,
}

impl DecodeRun {
    pub fn mean_accepted(&self) -> f64 {
        if self.pass_accept_lengths.is_empty() {
            return f64::NAN;
        }
        self.pass_accept_lengths.iter().sum::<usize>() as f64
            / self.pass_accept_lengths.len() as f64
    }

    pub fn passes(&self) -> usize {
        self.pass_accept_lengths.len()
    }

    pub fn tokens_per_second(&self) -> f64 {
        self.tokens.len() as f64 / self.wall.as_secs_f64().max(1e-12)
    }

    /// Emitted tokens per model forward.
    pub fn tokens_per_forward(&self) -> f64 {
        self.tokens.len() as f64 / self.forwards as f64
    }
}

/// `n` sequential sample-and-commit steps using only the original head.
pub fn vanilla_decode(
    model: &dyn Model,
    prompt: &[TokenId],
    n: usize,
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> Result<DecodeRun> {
    if prompt.is_empty() {
        return Err(Error::EmptyContext);
    }
    if n < 1 {
        return Err(Error::InvalidConfig("token count must be >= 1".into()));
    }
    let mut state = ModelState::new(prompt.to_vec());
    let mut tokens = Vec::with_capacity(n);
    let start = Instant::now();
    for _ in 0..n {
        let out = model.forward(&state)?;
        let t = sample(&out.original, cfg, rng);
        state.commit(&[t])?;
        tokens.push(t);
    }
    Ok(DecodeRun {
        tokens,
        pass_accept_lengths: Vec::new(),
        wall: start.elapsed(),
        forwards: n,
    })
}

/// Tolerance verification over a whole candidate tree.
///
/// One sample set is drawn per node in id order (shared by every branch
/// through that node), so rng advancement is exactly `nodes * tau` draws.
/// A non-root node is accepted iff its parent is accepted and its token is
/// in the parent's sample set; the root is always accepted. The winner is
/// the deepest accepted node, ties broken toward the leftmost branch.
pub fn verify_tree(
    node_dists: &[Distribution],
    tree_tokens: &[TokenId],
    topology: &DraftTreeTopology,
    tol: &ToleranceConfig,
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> Result<VerificationResult> {
    let n = topology.len();
    if node_dists.len() != n || tree_tokens.len() != n {
        return Err(Error::Structural(format!(
            "verify_tree: {} distributions and {} tokens for {} nodes",
            node_dists.len(),
            tree_tokens.len(),
            n
        )));
    }
    let sets: Vec<SampleSet> = node_dists
        .iter()
        .map(|d| sample_set(d, tol.tau, cfg, rng))
        .collect();

    let mut accepted = vec![false; n];
    accepted[0] = true;
    let mut winner = 0usize;
    let mut best_depth = 0usize;
    // rank-ordered DFS: the first node found at any depth is the leftmost,
    // so strictly-deeper updates realize longest-then-leftmost selection
    let mut stack: Vec<usize> = topology.children(0).iter().rev().copied().collect();
    while let Some(id) = stack.pop() {
        let parent = topology.node(id).parent.unwrap();
        if accepted[parent] && sets[parent].contains(tree_tokens[id]) {
            accepted[id] = true;
            let depth = topology.depth(id);
            if depth > best_depth {
                best_depth = depth;
                winner = id;
            }
            for &child in topology.children(id).iter().rev() {
                stack.push(child);
            }
        }
    }
    let accepted_node_ids = topology.root_path(winner);
    let next_root = sets[winner].first();
    let mut committed_tokens: Vec<TokenId> = accepted_node_ids
        .iter()
        .map(|&id| tree_tokens[id])
        .collect();
    committed_tokens.push(next_root);
    Ok(VerificationResult {
        acceptance_length: accepted_node_ids.len(),
        accepted_node_ids,
        committed_tokens,
        next_root,
    })
}

/// Rolling state between speculative passes: the pending root token and the
/// draft distributions read at the previous winning frontier.
#[derive(Clone, Debug)]
pub struct PassState {
    pub state: ModelState,
    pub pending_root: TokenId,
    pub drafts: Vec<Distribution>,
}

/// Prefill pass: one model forward on the prompt produces the first pending
/// root (one sampling draw) and the first draft distributions.
pub fn prefill(
    model: &dyn Model,
    prompt: &[TokenId],
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> Result<PassState> {
    if prompt.is_empty() {
        return Err(Error::EmptyContext);
    }
    let state = ModelState::new(prompt.to_vec());
    let out = model.forward(&state)?;
    let pending_root = sample(&out.original, cfg, rng);
    Ok(PassState {
        state,
        pending_root,
        drafts: out.drafts,
    })
}

/// One speculative pass: fill the tree from the pending drafts, evaluate it
/// in a single tree forward, verify with tolerance, commit the winning
/// path, and roll the pass state forward.
pub fn speculative_pass(
    model: &dyn Model,
    pass: &mut PassState,
    topology: &DraftTreeTopology,
    tol: &ToleranceConfig,
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> Result<VerificationResult> {
    let depth = topology.max_depth();
    if depth > pass.drafts.len() {
        return Err(Error::Structural(format!(
            "tree depth {depth} exceeds the {} available draft heads",
            pass.drafts.len()
        )));
    }
    let branching = topology.max_branching();
    if branching > model.vocab_size() {
        return Err(Error::Structural(format!(
            "tree branching {branching} exceeds vocabulary size {}",
            model.vocab_size()
        )));
    }
    // node with head i, rank j takes the rank-j candidate of draft head i
    let candidates: Vec<Vec<TokenId>> = (0..depth)
        .map(|i| top_k_tokens(&pass.drafts[i], branching))
        .collect();
    let tree_tokens: Vec<TokenId> = topology
        .nodes()
        .iter()
        .map(|node| match node.parent {
            None => pass.pending_root,
            Some(_) => candidates[node.head - 1][node.rank],
        })
        .collect();
    let outputs = model.tree_forward_full(&pass.state, &tree_tokens, topology)?;
    let node_dists: Vec<Distribution> = outputs.iter().map(|o| o.original.clone()).collect();
    let result = verify_tree(&node_dists, &tree_tokens, topology, tol, cfg, rng)?;
    let accepted: Vec<TokenId> = result
        .accepted_node_ids
        .iter()
        .map(|&id| tree_tokens[id])
        .collect();
    pass.state.commit(&accepted)?;
    let frontier = *result.accepted_node_ids.last().unwrap();
    pass.pending_root = result.next_root;
    pass.drafts = outputs[frontier].drafts.clone();
    Ok(result)
}

/// Prefill, then speculative passes until at least `n` tokens are emitted;
/// the output is truncated to `n`.
pub fn speculative_decode(
    model: &dyn Model,
    prompt: &[TokenId],
    n: usize,
    topology: &DraftTreeTopology,
    tol: &ToleranceConfig,
    cfg: &SamplingConfig,
    rng: &mut RandomStream,
) -> Result<DecodeRun> {
    if n < 1 {
        return Err(Error::InvalidConfig("token count must be >= 1".into()));
    }
    let start = Instant::now();
    let mut pass = prefill(model, prompt, cfg, rng)?;
    let mut forwards = 1usize;
    let mut tokens = Vec::with_capacity(n + topology.max_depth() + 1);
    let mut pass_accept_lengths = Vec::new();
    while tokens.len() < n {
        let result = speculative_pass(model, &mut pass, topology, tol, cfg, rng)?;
        forwards += 1;
        pass_accept_lengths.push(result.acceptance_length);
        tokens.extend(
            result.committed_tokens[..result.acceptance_length]
                .iter()
                .copied(),
        );
    }
    tokens.truncate(n);
    Ok(DecodeRun {
        tokens,
        pass_accept_lengths,
        wall: start.elapsed(),
        forwards,
    })
}
