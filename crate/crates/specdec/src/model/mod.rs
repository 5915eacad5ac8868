//! The autoregressive model contract: original head plus K draft heads,
//! with commit/rollback state semantics.

pub mod markov;
pub mod windowed;

use crate::error::{Error, Result};
use crate::sampling::{Distribution, TokenId};
use crate::tree::DraftTreeTopology;

pub use markov::{MarkovOracle, TransitionSpec};
pub use windowed::{TrainConfig, TrainMode, WindowedArModel};

/// One forward pass: the original head's next-token distribution plus one
/// distribution per draft head, where draft head `i` (1-based) predicts the
/// token at offset `i + 1`.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub original: Distribution,
    pub drafts: Vec<Distribution>,
}

/// Committed decoding context. Speculative evaluation never mutates it;
/// only `commit` extends it, and `rollback` restores an earlier snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelState {
    context: Vec<TokenId>,
}

impl ModelState {
    pub fn new(context: Vec<TokenId>) -> Self {
        Self { context }
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn commit(&mut self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyCommit);
        }
        self.context.extend_from_slice(tokens);
        Ok(())
    }

    /// Opaque marker for the current committed length.
    pub fn snapshot(&self) -> usize {
        self.context.len()
    }

    /// Discards everything committed after `snapshot`.
    pub fn rollback(&mut self, snapshot: usize) -> Result<()> {
        if snapshot > self.context.len() {
            return Err(Error::Structural(format!(
                "snapshot {snapshot} exceeds committed length {}",
                self.context.len()
            )));
        }
        self.context.truncate(snapshot);
        Ok(())
    }
}

/// An autoregressive token model with draft heads.
pub trait Model {
    fn vocab_size(&self) -> usize;

    /// Number of draft heads K.
    fn draft_head_count(&self) -> usize;

    /// Distributions for the next position (original head) and the K
    /// following positions (draft heads), conditioned on committed context.
    fn forward(&self, state: &ModelState) -> Result<ModelOutput>;

    /// Evaluates every tree node in one pass: output `n` is conditioned on
    /// the committed context plus the tokens along the root path to node
    /// `n`, inclusive. The committed state is unmodified.
    fn tree_forward_full(
        &self,
        state: &ModelState,
        tree_tokens: &[TokenId],
        topology: &DraftTreeTopology,
    ) -> Result<Vec<ModelOutput>>;

    /// Original-head distributions per node; the verification input.
    fn tree_forward(
        &self,
        state: &ModelState,
        tree_tokens: &[TokenId],
        topology: &DraftTreeTopology,
    ) -> Result<Vec<Distribution>> {
        Ok(self
            .tree_forward_full(state, tree_tokens, topology)?
            .into_iter()
            .map(|o| o.original)
            .collect())
    }
}

pub(crate) fn check_tree_inputs(
    state: &ModelState,
    tree_tokens: &[TokenId],
    topology: &DraftTreeTopology,
) -> Result<()> {
    if state.is_empty() {
        return Err(Error::EmptyContext);
    }
    if tree_tokens.len() != topology.len() {
        return Err(Error::Structural(format!(
            "tree token list has {} entries, topology has {} nodes",
            tree_tokens.len(),
            topology.len()
        )));
    }
    Ok(())
}
