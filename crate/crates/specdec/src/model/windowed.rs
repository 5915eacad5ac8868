//! A tiny trainable windowed autoregressive model with K+1 output heads and
//! hand-written backpropagation.
//!
//! The trunk is an embedding lookup over a fixed window of the last `c`
//! tokens, a linear layer, and a residual block with a linear layer and a
//! SiLU activation. All heads read the same trunk output: head 0 predicts
//! the next token, draft head i predicts the token i+1 steps ahead.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_tree_inputs, Model, ModelOutput, ModelState};
use crate::rng::RandomStream;
use crate::sampling::{Distribution, TokenId};
use crate::tree::DraftTreeTopology;

const MAGIC: &[u8; 4] = b"VDSA";
const VERSION: u16 = 1;

/// Whether the base model (trunk + head 0) is frozen during training.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Draft heads only; trunk and head 0 are frozen and head 0 carries no
    /// loss weight.
    Wot,
    /// Joint fine-tuning with head 0 at weight 1.
    Wt,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wot" => Ok(Self::Wot),
            "wt" => Ok(Self::Wt),
            _ => Err(Error::Parse(format!("unknown train mode '{s}'"))),
        }
    }
}

#[derive(Copy, Clone, Debug)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be in (0, 1), got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            learning_rate: 0.05,
            mode: TrainMode::Wt,
            epochs: 3,
            batch_size: 64,
        }
    }
}

/// Per-head loss weights: head 0 gets 1 (wt) or 0 (wot), draft head i gets
/// `lambda^i`.
pub fn head_weights(lambda: f64, mode: TrainMode, heads: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(heads + 1);
    w.push(match mode {
        TrainMode::Wt => 1.0,
        TrainMode::Wot => 0.0,
    });
    for i in 1..=heads {
        w.push(lambda.powi(i as i32));
    }
    w
}

/// One training example: a window of `c` context tokens plus targets at
/// offsets +1 .. +(K+1).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub window: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

/// Builds training items from a flat corpus; returns the items and the
/// number of positions skipped because their targets run past the end.
pub fn training_items(
    corpus: &[TokenId],
    window: usize,
    heads: usize,
) -> (Vec<TrainItem>, usize) {
    let needed = heads + 1;
    let mut items = Vec::new();
    let mut skipped = 0usize;
    if corpus.len() < window {
        return (items, 0);
    }
    for t in (window - 1)..corpus.len() {
        if t + needed < corpus.len() {
            items.push(TrainItem {
                window: corpus[t + 1 - window..=t].to_vec(),
                targets: corpus[t + 1..=t + needed].to_vec(),
            });
        } else {
            skipped += 1;
        }
    }
    (items, skipped)
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: Range<usize>,
    w_in: Range<usize>,
    b_in: Range<usize>,
    w_r: Range<usize>,
    b_r: Range<usize>,
    /// (weight, bias) ranges per head, head 0 first.
    heads: Vec<(Range<usize>, Range<usize>)>,
    total: usize,
}

impl Layout {
    fn new(v: usize, c: usize, d: usize, h: usize, k: usize) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embedding = take(v * d);
        let w_in = take(h * c * d);
        let b_in = take(h);
        let w_r = take(h * h);
        let b_r = take(h);
        let heads = (0..=k).map(|_| (take(v * h), take(v))).collect();
        Self {
            embedding,
            w_in,
            b_in,
            w_r,
            b_r,
            heads,
            total: at,
        }
    }
}

/// The trainable model. Parameters live in one flat vector whose layout
/// (embedding, input layer, residual layer, heads 0..K) is also the
/// serialization order.
#[derive(Clone, Debug)]
pub struct WindowedArModel {
    vocab: usize,
    window: usize,
    embed: usize,
    hidden: usize,
    heads: usize,
    params: Vec<f64>,
    layout: Layout,
}

struct ForwardCache {
    x: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    /// softmax probabilities per head
    probs: Vec<Vec<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl WindowedArModel {
    pub fn new_random(
        vocab: usize,
        window: usize,
        embed: usize,
        hidden: usize,
        heads: usize,
        rng: &mut RandomStream,
    ) -> Result<Self> {
        if vocab < 2 || window < 1 || embed < 1 || hidden < 1 || heads < 1 {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive (vocab >= 2)".into(),
            ));
        }
        let layout = Layout::new(vocab, window, embed, hidden, heads);
        let mut params = vec![0.0; layout.total];
        let scale = 0.2;
        for p in &mut params[layout.embedding.clone()] {
            *p = (rng.next_f64() - 0.5) * scale;
        }
        for range in [&layout.w_in, &layout.w_r] {
            for p in &mut params[range.clone()] {
                *p = (rng.next_f64() - 0.5) * scale;
            }
        }
        for (w, _) in &layout.heads {
            for p in &mut params[w.clone()] {
                *p = (rng.next_f64() - 0.5) * scale;
            }
        }
        Ok(Self {
            vocab,
            window,
            embed,
            hidden,
            heads,
            params,
            layout,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embed_dim(&self) -> usize {
        self.embed
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Raw bytes of the base parameters (trunk + head 0), for frozen-base
    /// assertions.
    pub fn base_param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let l = &self.layout;
        for range in [
            l.embedding.clone(),
            l.w_in.clone(),
            l.b_in.clone(),
            l.w_r.clone(),
            l.b_r.clone(),
            l.heads[0].0.clone(),
            l.heads[0].1.clone(),
        ] {
            for &p in &self.params[range] {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    fn window_of(&self, context: &[TokenId]) -> Vec<TokenId> {
        let mut w = vec![TokenId(0); self.window];
        let n = context.len().min(self.window);
        w[self.window - n..].copy_from_slice(&context[context.len() - n..]);
        w
    }

    fn forward_cache(&self, window: &[TokenId]) -> ForwardCache {
        debug_assert_eq!(window.len(), self.window);
        let (v, c, d, h) = (self.vocab, self.window, self.embed, self.hidden);
        let p = &self.params;
        let l = &self.layout;
        let mut x = vec![0.0; c * d];
        for (j, t) in window.iter().enumerate() {
            debug_assert!(t.index() < v);
            let row = l.embedding.start + t.index() * d;
            x[j * d..(j + 1) * d].copy_from_slice(&p[row..row + d]);
        }
        let mut u = p[l.b_in.clone()].to_vec();
        for i in 0..h {
            let row = l.w_in.start + i * c * d;
            let mut acc = 0.0;
            for j in 0..c * d {
                acc += p[row + j] * x[j];
            }
            u[i] += acc;
        }
        let mut r = p[l.b_r.clone()].to_vec();
        for i in 0..h {
            let row = l.w_r.start + i * h;
            let mut acc = 0.0;
            for j in 0..h {
                acc += p[row + j] * u[j];
            }
            r[i] += acc;
        }
        let z: Vec<f64> = (0..h).map(|i| u[i] + silu(r[i])).collect();
        let mut probs = Vec::with_capacity(self.heads + 1);
        for (w_range, b_range) in &l.heads {
            let mut logits = p[b_range.clone()].to_vec();
            for t in 0..v {
                let row = w_range.start + t * h;
                let mut acc = 0.0;
                for j in 0..h {
                    acc += p[row + j] * z[j];
                }
                logits[t] += acc;
            }
            probs.push(softmax(&logits));
        }
        ForwardCache { x, u, r, z, probs }
    }

    fn output_for_window(&self, window: &[TokenId]) -> ModelOutput {
        let cache = self.forward_cache(window);
        let mut dists = cache
            .probs
            .into_iter()
            .map(|p| Distribution::from_weights(p).unwrap());
        let original = dists.next().unwrap();
        ModelOutput {
            original,
            drafts: dists.collect(),
        }
    }

    /// Mean weighted loss over a batch, plus per-head mean cross-entropies
    /// and (optionally) the gradient of the weighted loss.
    fn loss_and_grads(
        &self,
        batch: &[TrainItem],
        weights: &[f64],
        grads: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty training batch".into()));
        }
        let (v, c, d, h) = (self.vocab, self.window, self.embed, self.hidden);
        let l = &self.layout;
        let p = &self.params;
        let mut total = 0.0;
        let mut head_ce = vec![0.0; self.heads + 1];
        let mut g = grads;
        for item in batch {
            if item.window.len() != c || item.targets.len() != self.heads + 1 {
                return Err(Error::Structural(format!(
                    "training item needs a window of {c} and {} targets",
                    self.heads + 1
                )));
            }
            let cache = self.forward_cache(&item.window);
            let mut dz = vec![0.0; h];
            for (m, target) in item.targets.iter().enumerate() {
                let probs = &cache.probs[m];
                let ce = -probs[target.index()].max(1e-300).ln();
                head_ce[m] += ce;
                total += weights[m] * ce;
                if let Some(grad) = g.as_deref_mut() {
                    if weights[m] == 0.0 {
                        continue;
                    }
                    let (w_range, b_range) = &l.heads[m];
                    for t in 0..v {
                        let mut dl = weights[m] * probs[t];
                        if t == target.index() {
                            dl -= weights[m];
                        }
                        if dl == 0.0 {
                            continue;
                        }
                        grad[b_range.start + t] += dl;
                        let row = w_range.start + t * h;
                        let prow = w_range.start + t * h;
                        for j in 0..h {
                            grad[row + j] += dl * cache.z[j];
                            dz[j] += dl * p[prow + j];
                        }
                    }
                }
            }
            if let Some(grad) = g.as_deref_mut() {
                // residual block: z = u + silu(r), r = W_r u + b_r
                let dr: Vec<f64> = (0..h).map(|i| dz[i] * silu_grad(cache.r[i])).collect();
                let mut du = dz.clone();
                for i in 0..h {
                    if dr[i] == 0.0 {
                        continue;
                    }
                    grad[l.b_r.start + i] += dr[i];
                    let row = l.w_r.start + i * h;
                    for j in 0..h {
                        grad[row + j] += dr[i] * cache.u[j];
                        du[j] += p[row + j] * dr[i];
                    }
                }
                let mut dx = vec![0.0; c * d];
                for i in 0..h {
                    if du[i] == 0.0 {
                        continue;
                    }
                    grad[l.b_in.start + i] += du[i];
                    let row = l.w_in.start + i * c * d;
                    for j in 0..c * d {
                        grad[row + j] += du[i] * cache.x[j];
                        dx[j] += p[row + j] * du[i];
                    }
                }
                for (j, t) in item.window.iter().enumerate() {
                    let row = l.embedding.start + t.index() * d;
                    for e in 0..d {
                        grad[row + e] += dx[j * d + e];
                    }
                }
            }
        }
        let n = batch.len() as f64;
        if let Some(grad) = g {
            for v in grad.iter_mut() {
                *v /= n;
            }
        }
        for ce in &mut head_ce {
            *ce /= n;
        }
        Ok((total / n, head_ce))
    }

    /// One gradient-descent update on the weighted multi-head loss.
    /// Returns the per-head cross-entropies of the batch before the update.
    /// In `wot` mode the trunk and head 0 stay bit-identical.
    pub fn train_step(&mut self, batch: &[TrainItem], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        let weights = head_weights(cfg.lambda, cfg.mode, self.heads);
        let mut grads = vec![0.0; self.params.len()];
        let (_, head_ce) = self.loss_and_grads(batch, &weights, Some(&mut grads))?;
        let update_ranges: Vec<Range<usize>> = match cfg.mode {
            TrainMode::Wt => vec![0..self.params.len()],
            TrainMode::Wot => self
                .layout
                .heads
                .iter()
                .skip(1)
                .flat_map(|(w, b)| [w.clone(), b.clone()])
                .collect(),
        };
        for range in update_ranges {
            for i in range {
                self.params[i] -= cfg.learning_rate * grads[i];
            }
        }
        Ok(head_ce)
    }

    /// Epochs of shuffled minibatch training over a flat corpus. Returns
    /// one `(epoch, head, mean CE)` row per epoch and head, plus the count
    /// of skipped positions.
    pub fn train(
        &mut self,
        corpus: &[TokenId],
        cfg: &TrainConfig,
        rng: &mut RandomStream,
    ) -> Result<(Vec<(usize, usize, f64)>, usize)> {
        cfg.validate()?;
        let (items, skipped) = training_items(corpus, self.window, self.heads);
        if items.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "corpus too short: need more than {} tokens",
                self.window + self.heads + 1
            )));
        }
        let mut log = Vec::new();
        let mut order: Vec<usize> = (0..items.len()).collect();
        for epoch in 0..cfg.epochs {
            // Fisher-Yates on the deterministic stream
            for i in (1..order.len()).rev() {
                let j = rng.next_index(i + 1);
                order.swap(i, j);
            }
            let mut sums = vec![0.0; self.heads + 1];
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<TrainItem> =
                    chunk.iter().map(|&i| items[i].clone()).collect();
                let ce = self.train_step(&batch, cfg)?;
                for (s, c) in sums.iter_mut().zip(&ce) {
                    *s += c;
                }
                batches += 1;
            }
            for (head, s) in sums.iter().enumerate() {
                log.push((epoch, head, s / batches as f64));
            }
        }
        Ok((log, skipped))
    }

    /// Per-head mean cross-entropy over all items of a corpus, no update.
    pub fn evaluate_ce(&self, corpus: &[TokenId]) -> Result<Vec<f64>> {
        let (items, _) = training_items(corpus, self.window, self.heads);
        if items.is_empty() {
            return Err(Error::InvalidConfig("corpus too short to evaluate".into()));
        }
        let weights = vec![1.0; self.heads + 1];
        let (_, ce) = self.loss_and_grads(&items, &weights, None)?;
        Ok(ce)
    }

    /// Compares analytic gradients against central finite differences and
    /// returns the maximum relative error. Checks every parameter when the
    /// model is small, otherwise a random subsample of at least 200.
    pub fn gradient_check(
        &self,
        batch: &[TrainItem],
        cfg: &TrainConfig,
        epsilon: f64,
        rng: &mut RandomStream,
    ) -> Result<f64> {
        if !(1e-6..=1e-3).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be in [1e-6, 1e-3], got {epsilon}"
            )));
        }
        let weights = head_weights(cfg.lambda, cfg.mode, self.heads);
        let mut grads = vec![0.0; self.params.len()];
        self.loss_and_grads(batch, &weights, Some(&mut grads))?;
        let n = self.params.len();
        let indices: Vec<usize> = if n <= 400 {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < 256 {
                picked.insert(rng.next_index(n));
            }
            picked.into_iter().collect()
        };
        let mut probe = self.clone();
        let mut max_rel = 0.0f64;
        for idx in indices {
            let orig = probe.params[idx];
            probe.params[idx] = orig + epsilon;
            let (lp, _) = probe.loss_and_grads(batch, &weights, None)?;
            probe.params[idx] = orig - epsilon;
            let (lm, _) = probe.loss_and_grads(batch, &weights, None)?;
            probe.params[idx] = orig;
            let numeric = (lp - lm) / (2.0 * epsilon);
            let analytic = grads[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    /// Flat binary serialization: magic `VDSA`, version u16, dimensions
    /// (V, c, d, h, K) as little-endian u32, then parameters as
    /// little-endian f64 in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 20 + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for dim in [self.vocab, self.window, self.embed, self.hidden, self.heads] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 26 || &bytes[0..4] != MAGIC {
            return Err(Error::Parse("not a model file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported model version {version}"
            )));
        }
        let mut dims = [0usize; 5];
        for (i, dim) in dims.iter_mut().enumerate() {
            let at = 6 + i * 4;
            *dim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        let [vocab, window, embed, hidden, heads] = dims;
        let layout = Layout::new(vocab, window, embed, hidden, heads);
        let body = &bytes[26..];
        if body.len() != layout.total * 8 {
            return Err(Error::Parse(format!(
                "model file has {} parameter bytes, expected {}",
                body.len(),
                layout.total * 8
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            vocab,
            window,
            embed,
            hidden,
            heads,
            params,
            layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from_io_at(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from_io_at(e, path))?;
        Self::from_bytes(&bytes)
    }
}

impl Model for WindowedArModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn draft_head_count(&self) -> usize {
        self.heads
    }

    fn forward(&self, state: &ModelState) -> Result<ModelOutput> {
        if state.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(self.output_for_window(&self.window_of(state.context())))
    }

    fn tree_forward_full(
        &self,
        state: &ModelState,
        tree_tokens: &[TokenId],
        topology: &DraftTreeTopology,
    ) -> Result<Vec<ModelOutput>> {
        check_tree_inputs(state, tree_tokens, topology)?;
        let mut outputs = Vec::with_capacity(topology.len());
        let mut path_context: Vec<Vec<TokenId>> = Vec::with_capacity(topology.len());
        for id in 0..topology.len() {
            let mut ctx = match topology.node(id).parent {
                None => state.context().to_vec(),
                Some(p) => path_context[p].clone(),
            };
            ctx.push(tree_tokens[id]);
            outputs.push(self.output_for_window(&self.window_of(&ctx)));
            path_context.push(ctx);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> WindowedArModel {
        let mut rng = RandomStream::new(seed);
        WindowedArModel::new_random(4, 3, 3, 5, 2, &mut rng).unwrap()
    }

    fn cyclic_corpus(vocab: u32, len: usize) -> Vec<TokenId> {
        (0..len).map(|i| TokenId(i as u32 % vocab)).collect()
    }

    #[test]
    fn lambda_weights_follow_geometric_decay() {
        let w = head_weights(0.8, TrainMode::Wt, 4);
        assert_eq!(w[0], 1.0);
        let expect = [0.8, 0.64, 0.512, 0.4096];
        for (i, e) in expect.iter().enumerate() {
            assert!((w[i + 1] - e).abs() < 1e-12);
        }
        assert_eq!(head_weights(0.8, TrainMode::Wot, 4)[0], 0.0);
    }

    #[test]
    fn gradient_check_fresh_model() {
        let model = small_model(3);
        let corpus = cyclic_corpus(4, 40);
        let (items, _) = training_items(&corpus, 3, 2);
        let cfg = TrainConfig::default();
        let mut rng = RandomStream::new(9);
        let err = model
            .gradient_check(&items[..8], &cfg, 1e-4, &mut rng)
            .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_wot_mode() {
        let model = small_model(4);
        let corpus = cyclic_corpus(4, 40);
        let (items, _) = training_items(&corpus, 3, 2);
        let cfg = TrainConfig {
            mode: TrainMode::Wot,
            ..TrainConfig::default()
        };
        let mut rng = RandomStream::new(10);
        let err = model
            .gradient_check(&items[..8], &cfg, 1e-4, &mut rng)
            .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn wot_step_keeps_base_bit_identical() {
        let mut model = small_model(5);
        let before = model.base_param_bytes();
        let corpus = cyclic_corpus(4, 40);
        let (items, _) = training_items(&corpus, 3, 2);
        let cfg = TrainConfig {
            mode: TrainMode::Wot,
            ..TrainConfig::default()
        };
        model.train_step(&items[..8], &cfg).unwrap();
        assert_eq!(model.base_param_bytes(), before);
        // wt mode does move the base
        let cfg_wt = TrainConfig::default();
        model.train_step(&items[..8], &cfg_wt).unwrap();
        assert_ne!(model.base_param_bytes(), before);
    }

    #[test]
    fn deterministic_cycle_drives_loss_to_zero() {
        let mut rng = RandomStream::new(6);
        let mut model = WindowedArModel::new_random(4, 3, 4, 8, 2, &mut rng).unwrap();
        let corpus = cyclic_corpus(4, 200);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 120,
            batch_size: 32,
            ..TrainConfig::default()
        };
        model.train(&corpus, &cfg, &mut rng).unwrap();
        let ce = model.evaluate_ce(&corpus).unwrap();
        for (head, &c) in ce.iter().enumerate() {
            assert!(c < 0.05, "head {head} CE {c}");
        }
    }

    #[test]
    fn training_items_skip_count() {
        let corpus = cyclic_corpus(4, 20);
        let (items, skipped) = training_items(&corpus, 3, 2);
        // windows end at t in 2..=19; targets need t+3 <= 19, so t <= 16
        assert_eq!(items.len(), 15);
        assert_eq!(skipped, 3);
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        let model = small_model(7);
        let bytes = model.to_bytes();
        assert_eq!(&bytes[0..4], b"VDSA");
        let restored = WindowedArModel::from_bytes(&bytes).unwrap();
        assert_eq!(restored.params(), model.params());
        assert_eq!(restored.vocab(), 4);
        assert_eq!(restored.window(), 3);
        assert_eq!(restored.heads(), 2);
    }

    #[test]
    fn forward_rejects_empty_context() {
        let model = small_model(8);
        let state = ModelState::new(vec![]);
        assert!(matches!(model.forward(&state), Err(Error::EmptyContext)));
    }

    #[test]
    fn tree_forward_chain_matches_sequential() {
        let model = small_model(11);
        let chain = DraftTreeTopology::new(vec![
            crate::tree::TreeNode {
                parent: None,
                head: 0,
                rank: 0,
            },
            crate::tree::TreeNode {
                parent: Some(0),
                head: 1,
                rank: 0,
            },
            crate::tree::TreeNode {
                parent: Some(1),
                head: 2,
                rank: 0,
            },
        ])
        .unwrap();
        let tokens = vec![TokenId(1), TokenId(2), TokenId(3)];
        let state = ModelState::new(vec![TokenId(0), TokenId(1)]);
        let tree_dists = model.tree_forward(&state, &tokens, &chain).unwrap();
        let mut seq = state.clone();
        for (n, &t) in tokens.iter().enumerate() {
            seq.commit(&[t]).unwrap();
            let out = model.forward(&seq).unwrap();
            for (a, b) in out.original.probs().iter().zip(tree_dists[n].probs()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn commit_after_tree_forward_matches_scratch() {
        let model = small_model(12);
        let topo = crate::tree::full_tree(2, 2);
        let tokens: Vec<TokenId> = (0..topo.len() as u32).map(|i| TokenId(i % 4)).collect();
        let state = ModelState::new(vec![TokenId(3)]);
        model.tree_forward(&state, &tokens, &topo).unwrap();
        // accepted path: root then its rank-0 child
        let mut committed = state.clone();
        committed.commit(&[tokens[0], tokens[1]]).unwrap();
        let scratch = ModelState::new(vec![TokenId(3), tokens[0], tokens[1]]);
        let a = model.forward(&committed).unwrap();
        let b = model.forward(&scratch).unwrap();
        assert_eq!(a.original.probs(), b.original.probs());
    }
}
