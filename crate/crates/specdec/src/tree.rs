//! Candidate-tree topologies, tree-attention masks, per-rank acceptance
//! calibration, and the greedy sparse-tree builder.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Model, ModelState};
use crate::rng::RandomStream;
use crate::sampling::{sample, top_k_tokens, SamplingConfig, TokenId};

/// One node of a candidate tree. The root has `parent == None` and carries
/// no head/rank; a non-root node at depth `d` holds the rank-`rank`
/// candidate of draft head `d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub head: usize,
    pub rank: usize,
}

/// The candidate tree: node list plus rank-ordered children, parents always
/// preceding children (downward-closed by construction).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DraftTreeTopology {
    nodes: Vec<TreeNode>,
    children: Vec<Vec<usize>>,
}

impl DraftTreeTopology {
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Structural("topology has no nodes".into()));
        }
        if nodes[0].parent.is_some() || nodes[0].head != 0 || nodes[0].rank != 0 {
            return Err(Error::Structural(
                "node 0 must be the root (no parent, head 0, rank 0)".into(),
            ));
        }
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (id, node) in nodes.iter().enumerate().skip(1) {
            let parent = node.parent.ok_or_else(|| {
                Error::Structural(format!("non-root node {id} has no parent"))
            })?;
            if parent >= id {
                return Err(Error::Structural(format!(
                    "node {id} references parent {parent} that does not precede it"
                )));
            }
            if node.head != nodes[parent].head + 1 {
                return Err(Error::Structural(format!(
                    "node {id} at depth {} must use head {}, found {}",
                    nodes[parent].head + 1,
                    nodes[parent].head + 1,
                    node.head
                )));
            }
            if children[parent].iter().any(|&c| nodes[c].rank == node.rank) {
                return Err(Error::Structural(format!(
                    "duplicate (parent {parent}, rank {}) pair",
                    node.rank
                )));
            }
            children[parent].push(id);
        }
        for list in &mut children {
            list.sort_by_key(|&c| nodes[c].rank);
        }
        Ok(Self { nodes, children })
    }

    pub fn single_node() -> Self {
        Self::new(vec![TreeNode {
            parent: None,
            head: 0,
            rank: 0,
        }])
        .unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Children of `id`, ordered by rank.
    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Depth of a node; the root has depth 0, a depth-d node uses head d.
    pub fn depth(&self, id: usize) -> usize {
        self.nodes[id].head
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.head).max().unwrap_or(0)
    }

    /// Largest rank + 1 anywhere in the tree (candidates required per head).
    pub fn max_branching(&self) -> usize {
        self.nodes
            .iter()
            .skip(1)
            .map(|n| n.rank + 1)
            .max()
            .unwrap_or(0)
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn root_path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Serializes to the text format: one line `id parent head rank` per
    /// node, with the root written as `0 - - -`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match node.parent {
                None => writeln!(out, "{id} - - -").unwrap(),
                Some(p) => writeln!(out, "{id} {p} {} {}", node.head, node.rank).unwrap(),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "topology line {}: expected 4 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("topology line {}: bad id", lineno + 1)))?;
            if id != nodes.len() {
                return Err(Error::Parse(format!(
                    "topology line {}: ids must be consecutive from 0",
                    lineno + 1
                )));
            }
            if fields[1] == "-" {
                nodes.push(TreeNode {
                    parent: None,
                    head: 0,
                    rank: 0,
                });
            } else {
                let parse = |s: &str, what: &str| -> Result<usize> {
                    s.parse().map_err(|_| {
                        Error::Parse(format!("topology line {}: bad {what}", lineno + 1))
                    })
                };
                nodes.push(TreeNode {
                    parent: Some(parse(fields[1], "parent")?),
                    head: parse(fields[2], "head")?,
                    rank: parse(fields[3], "rank")?,
                });
            }
        }
        Self::new(nodes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::from_io_at(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from_io_at(e, path))?;
        Self::from_text(&text)
    }
}

/// Complete k-ary tree of depth `heads`, layers filled in rank order.
pub fn full_tree(heads: usize, branching: usize) -> DraftTreeTopology {
    assert!(heads >= 1 && branching >= 1);
    let mut nodes = vec![TreeNode {
        parent: None,
        head: 0,
        rank: 0,
    }];
    let mut layer = vec![0usize];
    for depth in 1..=heads {
        let mut next = Vec::with_capacity(layer.len() * branching);
        for &parent in &layer {
            for rank in 0..branching {
                next.push(nodes.len());
                nodes.push(TreeNode {
                    parent: Some(parent),
                    head: depth,
                    rank,
                });
            }
        }
        layer = next;
    }
    DraftTreeTopology::new(nodes).unwrap()
}

/// Number of nodes in `full_tree(heads, branching)`, saturating.
pub fn full_tree_size(heads: usize, branching: usize) -> u64 {
    let mut total: u64 = 1;
    let mut layer: u64 = 1;
    for _ in 0..heads {
        layer = layer.saturating_mul(branching as u64);
        total = total.saturating_add(layer);
    }
    total
}

/// Ancestor-or-self attention mask: `get(a, b)` is true iff `b` lies on the
/// root path of `a` (inclusive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeMask {
    n: usize,
    bits: Vec<bool>,
}

impl TreeMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.n..(row + 1) * self.n]
    }
}

pub fn attention_mask(topology: &DraftTreeTopology) -> TreeMask {
    let n = topology.len();
    let mut bits = vec![false; n * n];
    for a in 0..n {
        bits[a * n + a] = true;
        if let Some(p) = topology.node(a).parent {
            // parent rows are already complete because parents precede children
            for b in 0..n {
                if bits[p * n + b] {
                    bits[a * n + b] = true;
                }
            }
        }
    }
    TreeMask { n, bits }
}

/// Per-(head, rank) empirical acceptance probabilities `a[i][j]` for heads
/// `1..=K` and ranks `0..k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    accept: Vec<Vec<f64>>,
    trials: u64,
}

impl CalibrationTable {
    /// Estimates from hit counts with add-1 smoothing, then clamps each row
    /// to be non-increasing in rank.
    pub fn from_counts(hits: &[Vec<u64>], trials: u64) -> Result<Self> {
        if hits.is_empty() || hits[0].is_empty() {
            return Err(Error::InvalidConfig("empty calibration counts".into()));
        }
        let mut accept = Vec::with_capacity(hits.len());
        for row in hits {
            let mut probs: Vec<f64> = row
                .iter()
                .map(|&h| (h + 1) as f64 / (trials + 2) as f64)
                .collect();
            for j in 1..probs.len() {
                if probs[j] > probs[j - 1] {
                    probs[j] = probs[j - 1];
                }
            }
            accept.push(probs);
        }
        Ok(Self { accept, trials })
    }

    /// Exact probabilities, no smoothing. Rows must already be valid.
    pub fn from_probabilities(accept: Vec<Vec<f64>>) -> Result<Self> {
        if accept.is_empty() || accept[0].is_empty() {
            return Err(Error::InvalidConfig("empty calibration table".into()));
        }
        for row in &accept {
            if row.len() != accept[0].len() {
                return Err(Error::InvalidConfig("ragged calibration table".into()));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(
                    "acceptance probability outside [0, 1]".into(),
                ));
            }
        }
        Ok(Self { accept, trials: 0 })
    }

    pub fn heads(&self) -> usize {
        self.accept.len()
    }

    pub fn branching(&self) -> usize {
        self.accept[0].len()
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    /// Acceptance probability of the rank-`rank` candidate of head `head`
    /// (1-based, matching node depth).
    pub fn get(&self, head: usize, rank: usize) -> f64 {
        self.accept[head - 1][rank]
    }

    /// Text format: header `K k trials`, then K lines of k decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.heads(), self.branching(), self.trials);
        for row in &self.accept {
            let line: Vec<String> = row.iter().map(|p| format!("{p:.12}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty calibration file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse("calibration header must be 'K k trials'".into()));
        }
        let heads: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse("bad K in calibration header".into()))?;
        let branching: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse("bad k in calibration header".into()))?;
        let trials: u64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse("bad trials in calibration header".into()))?;
        let mut accept = Vec::with_capacity(heads);
        for _ in 0..heads {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("calibration file truncated".into()))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Parse("bad calibration value".into()))
                })
                .collect::<Result<_>>()?;
            if row.len() != branching {
                return Err(Error::Parse(format!(
                    "calibration row has {} values, expected {branching}",
                    row.len()
                )));
            }
            accept.push(row);
        }
        let mut table = Self::from_probabilities(accept)?;
        table.trials = trials;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::from_io_at(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from_io_at(e, path))?;
        Self::from_text(&text)
    }
}

/// Minimum trials per head required by [`calibrate`].
pub const MIN_CALIBRATION_TRIALS: u64 = 1000;

/// Estimates per-(head, rank) acceptance probabilities on a corpus.
///
/// For each usable position `t` and head `i`, the rank-j candidate is
/// `top_k(drafts_i at t)[j]` and the verification token is one sample from
/// the original-head distribution conditioned on the true prefix through
/// `t + i`. Sequences are processed by independent workers seeded from
/// `(seed, sequence index)`, so the result does not depend on worker count.
pub fn calibrate(
    model: &(dyn Model + Sync),
    corpus: &[Vec<TokenId>],
    heads: usize,
    branching: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<CalibrationTable> {
    if heads > model.draft_head_count() {
        return Err(Error::DimensionMismatch {
            field: "heads".into(),
            expected: model.draft_head_count() as u64,
            found: heads as u64,
        });
    }
    if branching > model.vocab_size() {
        return Err(Error::DimensionMismatch {
            field: "branching".into(),
            expected: model.vocab_size() as u64,
            found: branching as u64,
        });
    }
    let per_sequence: Vec<Result<(Vec<Vec<u64>>, u64)>> = corpus
        .par_iter()
        .enumerate()
        .map(|(index, seq)| {
            let mut rng = RandomStream::derive(seed, index as u64);
            let mut hits = vec![vec![0u64; branching]; heads];
            let mut trials = 0u64;
            if seq.len() <= heads + 1 {
                return Ok((hits, trials));
            }
            // One forward per position, reused for drafts and verification.
            let mut outputs = Vec::with_capacity(seq.len());
            for t in 0..seq.len() {
                let state = ModelState::new(seq[..=t].to_vec());
                outputs.push(model.forward(&state)?);
            }
            for t in 0..seq.len() - heads - 1 {
                for i in 1..=heads {
                    let verdict = sample(&outputs[t + i].original, cfg, &mut rng);
                    let candidates = top_k_tokens(&outputs[t].drafts[i - 1], branching);
                    for (j, &c) in candidates.iter().enumerate() {
                        if c == verdict {
                            hits[i - 1][j] += 1;
                        }
                    }
                }
                trials += 1;
            }
            Ok((hits, trials))
        })
        .collect();

    let mut hits = vec![vec![0u64; branching]; heads];
    let mut trials = 0u64;
    for result in per_sequence {
        let (h, t) = result?;
        for (dst, src) in hits.iter_mut().zip(&h) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        trials += t;
    }
    if trials < MIN_CALIBRATION_TRIALS {
        return Err(Error::CalibrationUnderflow {
            needed: MIN_CALIBRATION_TRIALS,
            got: trials,
        });
    }
    CalibrationTable::from_counts(&hits, trials)
}

/// Product of `a[i][j]` along the root path to `node`; 1.0 for the root.
pub fn node_path_probability(
    topology: &DraftTreeTopology,
    table: &CalibrationTable,
    node: usize,
) -> f64 {
    let mut prob = 1.0;
    let mut cur = node;
    while let Some(parent) = topology.node(cur).parent {
        let n = topology.node(cur);
        prob *= table.get(n.head, n.rank);
        cur = parent;
    }
    prob
}

/// Total node budget for sparse-tree construction, root included.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TreeBudget {
    pub nodes: usize,
}

impl TreeBudget {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 1 {
            return Err(Error::InvalidConfig("tree budget must be >= 1".into()));
        }
        Ok(Self { nodes })
    }
}

/// Result of the greedy builder; `clamped` is set when the budget exceeded
/// the full-tree size.
#[derive(Clone, Debug)]
pub struct SparseTreeBuild {
    pub topology: DraftTreeTopology,
    pub clamped: bool,
}

#[derive(Debug)]
struct FrontierEntry {
    prob: f64,
    depth: usize,
    rank: usize,
    parent: usize,
}

impl PartialEq for FrontierEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for FrontierEntry {}

impl Ord for FrontierEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: highest prob first, ties toward shallower depth, lower
        // rank, lower parent id
        self.prob
            .partial_cmp(&other.prob)
            .unwrap()
            .then(other.depth.cmp(&self.depth))
            .then(other.rank.cmp(&self.rank))
            .then(other.parent.cmp(&self.parent))
    }
}
impl PartialOrd for FrontierEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy sparse-tree construction: repeatedly adds the frontier node with
/// the highest path probability. Since a child's path probability never
/// exceeds its parent's, the greedy set attains the exact optimum over
/// downward-closed sets of the same size.
pub fn build_sparse_tree(
    table: &CalibrationTable,
    budget: TreeBudget,
    heads: usize,
    branching: usize,
) -> Result<SparseTreeBuild> {
    if heads > table.heads() {
        return Err(Error::DimensionMismatch {
            field: "heads".into(),
            expected: table.heads() as u64,
            found: heads as u64,
        });
    }
    if branching > table.branching() {
        return Err(Error::DimensionMismatch {
            field: "branching".into(),
            expected: table.branching() as u64,
            found: branching as u64,
        });
    }
    let full = full_tree_size(heads, branching);
    let clamped = (budget.nodes as u64) > full;
    let target = (budget.nodes as u64).min(full) as usize;

    let mut nodes = vec![TreeNode {
        parent: None,
        head: 0,
        rank: 0,
    }];
    let mut path_prob = vec![1.0f64];
    let mut frontier = BinaryHeap::new();
    let push_children = |frontier: &mut BinaryHeap<FrontierEntry>,
                             parent: usize,
                             depth: usize,
                             parent_prob: f64| {
        if depth < heads {
            for rank in 0..branching {
                frontier.push(FrontierEntry {
                    prob: parent_prob * table.get(depth + 1, rank),
                    depth: depth + 1,
                    rank,
                    parent,
                });
            }
        }
    };
    push_children(&mut frontier, 0, 0, 1.0);
    while nodes.len() < target {
        let entry = frontier.pop().expect("frontier exhausted before budget");
        let id = nodes.len();
        nodes.push(TreeNode {
            parent: Some(entry.parent),
            head: entry.depth,
            rank: entry.rank,
        });
        path_prob.push(entry.prob);
        push_children(&mut frontier, id, entry.depth, entry.prob);
    }
    Ok(SparseTreeBuild {
        topology: DraftTreeTopology::new(nodes)?,
        clamped,
    })
}

/// Exact expected acceptance length (root counts as 1) under the
/// independence model.
///
/// With `tau == 1` sibling acceptances are mutually exclusive and the
/// expectation is `1 + sum of path probabilities`. With `tau > 1` each node
/// is accepted independently with probability `1 - (1 - a)^tau` and the
/// expectation of the deepest accepted depth is computed bottom-up.
pub fn expected_accept_length(
    topology: &DraftTreeTopology,
    table: &CalibrationTable,
    tau: usize,
) -> f64 {
    assert!(tau >= 1);
    if tau == 1 {
        let mut total = 1.0;
        for id in 1..topology.len() {
            total += node_path_probability(topology, table, id);
        }
        return total;
    }
    let max_depth = topology.max_depth();
    // cdf[id][g] = P(deepest accepted depth below id, relative to id, <= g | id accepted)
    let mut cdf: Vec<Vec<f64>> = vec![Vec::new(); topology.len()];
    for id in (0..topology.len()).rev() {
        let mut f = vec![1.0f64; max_depth + 1];
        for &child in topology.children(id) {
            let n = topology.node(child);
            let a = table.get(n.head, n.rank);
            let q = 1.0 - (1.0 - a).powi(tau as i32);
            for g in 0..=max_depth {
                let child_le = if g == 0 { 0.0 } else { cdf[child][g - 1] };
                f[g] *= (1.0 - q) + q * child_le;
            }
        }
        cdf[id] = f;
    }
    let mut expected_gain = 0.0;
    for g in 0..=max_depth {
        expected_gain += 1.0 - cdf[0][g];
    }
    1.0 + expected_gain
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::markov::MarkovOracle;

    fn table_2x2(a1: [f64; 2], a2: [f64; 2]) -> CalibrationTable {
        CalibrationTable::from_probabilities(vec![a1.to_vec(), a2.to_vec()]).unwrap()
    }

    #[test]
    fn full_tree_sizes() {
        assert_eq!(full_tree(2, 2).len(), 7);
        assert_eq!(full_tree(1, 10).len(), 11);
        assert_eq!(full_tree_size(4, 10), 11111);
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let chain = DraftTreeTopology::new(vec![
            TreeNode {
                parent: None,
                head: 0,
                rank: 0,
            },
            TreeNode {
                parent: Some(0),
                head: 1,
                rank: 0,
            },
            TreeNode {
                parent: Some(1),
                head: 2,
                rank: 0,
            },
        ])
        .unwrap();
        let mask = attention_mask(&chain);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(mask.get(a, b), b <= a);
            }
        }
    }

    #[test]
    fn siblings_do_not_attend_to_each_other() {
        let t = full_tree(1, 2);
        let mask = attention_mask(&t);
        assert!(mask.get(1, 0) && mask.get(1, 1));
        assert!(!mask.get(1, 2));
        assert!(!mask.get(2, 1));
        // root row has exactly one true entry
        assert_eq!(mask.row(0).iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn deepest_leaf_attends_to_path_only() {
        let t = full_tree(2, 2);
        let mask = attention_mask(&t);
        // deepest-leftmost leaf is the first depth-2 node (id 3, child of node 1)
        let leaf = 3;
        assert_eq!(t.depth(leaf), 2);
        let expected: Vec<usize> = t.root_path(leaf);
        let attended: Vec<usize> = (0..t.len()).filter(|&b| mask.get(leaf, b)).collect();
        assert_eq!(attended, expected);
    }

    #[test]
    fn path_probability_products() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let t = full_tree(2, 2);
        assert_eq!(node_path_probability(&t, &table, 0), 1.0);
        assert!((node_path_probability(&t, &table, 1) - 0.6).abs() < 1e-12);
        // depth-2 node via ranks (0, 0)
        assert!((node_path_probability(&t, &table, 3) - 0.30).abs() < 1e-12);
    }

    #[test]
    fn greedy_budget_one_is_root_only() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let built = build_sparse_tree(&table, TreeBudget::new(1).unwrap(), 2, 2).unwrap();
        assert_eq!(built.topology.len(), 1);
        assert!(!built.clamped);
    }

    #[test]
    fn greedy_tie_breaks_toward_shallower() {
        // after root and (h1, r0), a tie at 0.3 between (h1, r1) and
        // (h1r0 -> h2, r0) resolves toward the shallower node
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let built = build_sparse_tree(&table, TreeBudget::new(3).unwrap(), 2, 2).unwrap();
        let t = &built.topology;
        assert_eq!(t.len(), 3);
        assert_eq!(t.node(1).head, 1);
        assert_eq!(t.node(1).rank, 0);
        assert_eq!(t.node(2).head, 1);
        assert_eq!(t.node(2).rank, 1);
        let objective: f64 = (0..3).map(|id| node_path_probability(t, &table, id)).sum();
        assert!((objective - 1.9).abs() < 1e-12);
    }

    #[test]
    fn greedy_full_budget_recovers_full_tree() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let built = build_sparse_tree(&table, TreeBudget::new(7).unwrap(), 2, 2).unwrap();
        assert_eq!(built.topology.len(), 7);
        // every (parent, rank) pair of the full tree is present
        let full = full_tree(2, 2);
        for depth in 1..=2 {
            let count = built
                .topology
                .nodes()
                .iter()
                .filter(|n| n.head == depth)
                .count();
            let full_count = full.nodes().iter().filter(|n| n.head == depth).count();
            assert_eq!(count, full_count);
        }
        assert!(!built.clamped);
    }

    #[test]
    fn greedy_overbudget_clamps() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let built = build_sparse_tree(&table, TreeBudget::new(100).unwrap(), 2, 2).unwrap();
        assert_eq!(built.topology.len(), 7);
        assert!(built.clamped);
    }

    #[test]
    fn expected_length_chain_tau_one() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let chain = DraftTreeTopology::new(vec![
            TreeNode {
                parent: None,
                head: 0,
                rank: 0,
            },
            TreeNode {
                parent: Some(0),
                head: 1,
                rank: 0,
            },
            TreeNode {
                parent: Some(1),
                head: 2,
                rank: 0,
            },
        ])
        .unwrap();
        let e = expected_accept_length(&chain, &table, 1);
        assert!((e - 1.9).abs() < 1e-12);
    }

    #[test]
    fn expected_length_deterministic_chain() {
        let table =
            CalibrationTable::from_probabilities(vec![vec![1.0, 0.0]; 4]).unwrap();
        let mut nodes = vec![TreeNode {
            parent: None,
            head: 0,
            rank: 0,
        }];
        for depth in 1..=4 {
            nodes.push(TreeNode {
                parent: Some(depth - 1),
                head: depth,
                rank: 0,
            });
        }
        let chain = DraftTreeTopology::new(nodes).unwrap();
        for tau in 1..=4 {
            let e = expected_accept_length(&chain, &table, tau);
            assert!((e - 5.0).abs() < 1e-12, "tau {tau}: {e}");
        }
    }

    #[test]
    fn expected_length_single_node() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let single = DraftTreeTopology::single_node();
        for tau in 1..=4 {
            assert_eq!(expected_accept_length(&single, &table, tau), 1.0);
        }
    }

    #[test]
    fn topology_round_trip() {
        let table = table_2x2([0.6, 0.3], [0.5, 0.2]);
        let built = build_sparse_tree(&table, TreeBudget::new(5).unwrap(), 2, 2).unwrap();
        let text = built.topology.to_text();
        let parsed = DraftTreeTopology::from_text(&text).unwrap();
        assert_eq!(parsed, built.topology);
    }

    #[test]
    fn calibration_round_trip() {
        let table = CalibrationTable::from_counts(
            &[vec![700, 200, 100], vec![500, 300, 100]],
            1000,
        )
        .unwrap();
        let parsed = CalibrationTable::from_text(&table.to_text()).unwrap();
        assert_eq!(parsed.heads(), 2);
        assert_eq!(parsed.branching(), 3);
        assert_eq!(parsed.trials(), 1000);
        for i in 1..=2 {
            for j in 0..3 {
                assert!((parsed.get(i, j) - table.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibrate_identity_chain_is_near_deterministic() {
        let oracle = MarkovOracle::identity(4, 2).unwrap();
        let corpus: Vec<Vec<TokenId>> = (0..4)
            .map(|s| vec![TokenId(s); 400])
            .collect();
        let table = calibrate(&oracle, &corpus, 2, 2, &SamplingConfig::raw(), 1).unwrap();
        for i in 1..=2 {
            assert!(table.get(i, 0) > 0.99, "a[{i}][0] = {}", table.get(i, 0));
            assert!(table.get(i, 1) < 0.01, "a[{i}][1] = {}", table.get(i, 1));
        }
    }

    #[test]
    fn calibrate_uniform_oracle_is_flat() {
        let v = 4;
        let oracle = MarkovOracle::uniform(v, 2).unwrap();
        let corpus: Vec<Vec<TokenId>> = (0..8)
            .map(|s| {
                let mut rng = RandomStream::new(100 + s);
                (0..500).map(|_| TokenId(rng.next_index(v) as u32)).collect()
            })
            .collect();
        let table = calibrate(&oracle, &corpus, 2, v, &SamplingConfig::raw(), 2).unwrap();
        let trials = table.trials() as f64;
        let p = 1.0 / v as f64;
        let sigma = (p * (1.0 - p) / trials).sqrt();
        for i in 1..=2 {
            for j in 0..v {
                let a = table.get(i, j);
                assert!(
                    (a - p).abs() < 3.0 * sigma + 2.0 / trials,
                    "a[{i}][{j}] = {a}"
                );
            }
        }
    }

    #[test]
    fn calibrate_two_state_matches_enumeration() {
        // a[1][0] = sum_s pi_s sum_t T^2(s,t) [t = argmax of row s of T^2]
        let t = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let oracle = MarkovOracle::new(t.clone(), 1).unwrap();
        // symmetric chain: stationary is (0.5, 0.5); T^2 rows are
        // [0.82, 0.18] / [0.18, 0.82], argmax matches w.p. 0.82
        let expected = 0.82;
        let mut gen = RandomStream::new(5);
        let corpus: Vec<Vec<TokenId>> = (0..4)
            .map(|_| {
                let mut state = 0usize;
                (0..2000)
                    .map(|_| {
                        let u = gen.next_f64();
                        state = if u < t[state][0] { 0 } else { 1 };
                        TokenId(state as u32)
                    })
                    .collect()
            })
            .collect();
        let table = calibrate(&oracle, &corpus, 1, 2, &SamplingConfig::raw(), 3).unwrap();
        let trials = table.trials() as f64;
        let sigma = (expected * (1.0 - expected) / trials).sqrt();
        assert!(
            (table.get(1, 0) - expected).abs() < 3.0 * sigma + 2.0 / trials,
            "a[1][0] = {}",
            table.get(1, 0)
        );
    }

    #[test]
    fn calibrate_underflow_errors() {
        let oracle = MarkovOracle::uniform(4, 2).unwrap();
        let corpus = vec![vec![TokenId(0); 50]];
        let err = calibrate(&oracle, &corpus, 2, 2, &SamplingConfig::raw(), 1).unwrap_err();
        assert!(matches!(err, Error::CalibrationUnderflow { .. }));
    }
}
