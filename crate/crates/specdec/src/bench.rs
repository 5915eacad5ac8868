//! Speedup and acceptance measurement, quality proxies, and the
//! distributional equivalence test.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::decode::{speculative_decode, vanilla_decode, DecodeRun, ToleranceConfig};
use crate::error::{Error, Result};
use crate::model::markov::MarkovOracle;
use crate::model::Model;
use crate::rng::RandomStream;
use crate::sampling::{SamplingConfig, TokenId};
use crate::tree::{build_sparse_tree, CalibrationTable, TreeBudget};

pub const CSV_HEADER: &str =
    "model,budget,heads,tau,temperature,top_p,tps_vanilla,tps_spec,speedup,mean_accepted,passes,nll";

/// Pass/fail threshold of [`equivalence_test`].
pub const EQUIVALENCE_THRESHOLD: f64 = 0.02;

/// One grid point of the benchmark sweep.
#[derive(Copy, Clone, Debug)]
pub struct BenchPoint {
    pub heads: usize,
    pub budget: usize,
    pub tau: usize,
    pub temperature: f64,
    pub top_p: f64,
}

/// One report row: medians across repetitions.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub model_id: String,
    pub budget: usize,
    pub heads: usize,
    pub tau: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub tps_vanilla: f64,
    pub tps_spec: f64,
    pub speedup: f64,
    pub mean_accepted: f64,
    pub passes: usize,
    pub nll: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRecord>,
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3},{:.3},{:.4},{:.4},{},{}",
                r.model_id,
                r.budget,
                r.heads,
                r.tau,
                r.temperature,
                r.top_p,
                r.tps_vanilla,
                r.tps_spec,
                r.speedup,
                r.mean_accepted,
                r.passes,
                if r.nll.is_nan() {
                    "nan".to_string()
                } else {
                    format!("{:.6}", r.nll)
                }
            )
            .unwrap();
        }
        out
    }

    /// Two-column tab-separated plot data: speedup and mean accepted tokens
    /// against the candidate budget.
    pub fn plot_vs_budget(&self) -> (String, String) {
        let mut speedup = String::new();
        let mut accepted = String::new();
        for r in &self.rows {
            writeln!(speedup, "{}\t{:.4}", r.budget, r.speedup).unwrap();
            writeln!(accepted, "{}\t{:.4}", r.budget, r.mean_accepted).unwrap();
        }
        (speedup, accepted)
    }

    /// Two-column tab-separated plot data against the tolerance value.
    pub fn plot_vs_tau(&self) -> (String, String) {
        let mut speedup = String::new();
        let mut accepted = String::new();
        for r in &self.rows {
            writeln!(speedup, "{}\t{:.4}", r.tau, r.speedup).unwrap();
            writeln!(accepted, "{}\t{:.4}", r.tau, r.mean_accepted).unwrap();
        }
        (speedup, accepted)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs vanilla and speculative decoding on identical prompts for every
/// grid point and reports medians across repetitions. Each repetition
/// re-seeds deterministically from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    model: &dyn Model,
    model_id: &str,
    table: &CalibrationTable,
    prompts: &[Vec<TokenId>],
    grid: &[BenchPoint],
    n_tokens: usize,
    repetitions: usize,
    seed: u64,
    nll_oracle: Option<&MarkovOracle>,
) -> Result<BenchmarkReport> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("benchmark grid is empty".into()));
    }
    if repetitions < 3 {
        return Err(Error::InvalidConfig(format!(
            "repetitions must be >= 3, got {repetitions}"
        )));
    }
    if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig("prompts must be non-empty".into()));
    }
    let mut report = BenchmarkReport::default();
    for (row_index, point) in grid.iter().enumerate() {
        let cfg = SamplingConfig::new(point.top_p, point.temperature)?;
        let tol = ToleranceConfig::new(point.tau)?;
        let built = build_sparse_tree(
            table,
            TreeBudget::new(point.budget)?,
            point.heads,
            table.branching().min(model.vocab_size()),
        )?;
        let mut tps_vanilla = Vec::with_capacity(repetitions);
        let mut tps_spec = Vec::with_capacity(repetitions);
        let mut accepted = Vec::with_capacity(repetitions);
        let mut nlls = Vec::with_capacity(repetitions);
        let mut passes = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            let rep_seed = (row_index as u64) << 32 | rep as u64;
            let mut vanilla_time = 0.0;
            let mut vanilla_tokens = 0usize;
            let mut spec_time = 0.0;
            let mut spec_tokens = 0usize;
            let mut spec_lengths: Vec<usize> = Vec::new();
            let mut spec_emitted: Vec<TokenId> = Vec::new();
            for (p, prompt) in prompts.iter().enumerate() {
                let stream_id = (p as u64) << 16 | rep_seed & 0xffff;
                let mut rng_v = RandomStream::derive(seed, stream_id << 1);
                let run_v = vanilla_decode(model, prompt, n_tokens, &cfg, &mut rng_v)?;
                vanilla_time += run_v.wall.as_secs_f64();
                vanilla_tokens += run_v.tokens.len();
                let mut rng_s = RandomStream::derive(seed, stream_id << 1 | 1);
                let run_s = speculative_decode(
                    model,
                    prompt,
                    n_tokens,
                    &built.topology,
                    &tol,
                    &cfg,
                    &mut rng_s,
                )?;
                spec_time += run_s.wall.as_secs_f64();
                spec_tokens += run_s.tokens.len();
                spec_lengths.extend(&run_s.pass_accept_lengths);
                spec_emitted.extend(&run_s.tokens);
            }
            tps_vanilla.push(vanilla_tokens as f64 / vanilla_time.max(1e-12));
            tps_spec.push(spec_tokens as f64 / spec_time.max(1e-12));
            accepted.push(
                spec_lengths.iter().sum::<usize>() as f64 / spec_lengths.len() as f64,
            );
            passes.push(spec_lengths.len() as f64);
            if let Some(oracle) = nll_oracle {
                nlls.push(nll_quality(oracle, &spec_emitted)?);
            }
        }
        let tps_v = median(&mut tps_vanilla);
        let tps_s = median(&mut tps_spec);
        report.rows.push(BenchRecord {
            model_id: model_id.to_string(),
            budget: point.budget,
            heads: point.heads,
            tau: point.tau,
            temperature: point.temperature,
            top_p: point.top_p,
            tps_vanilla: tps_v,
            tps_spec: tps_s,
            speedup: tps_s / tps_v,
            mean_accepted: median(&mut accepted),
            passes: median(&mut passes) as usize,
            nll: if nlls.is_empty() {
                f64::NAN
            } else {
                median(&mut nlls)
            },
        });
    }
    Ok(report)
}

/// Hardware-independent speedup proxy: emitted tokens per model forward,
/// speculative over vanilla.
pub fn pass_count_speedup(run_vanilla: &DecodeRun, run_spec: &DecodeRun) -> Result<f64> {
    if run_vanilla.tokens.len() != run_spec.tokens.len() {
        return Err(Error::InvalidConfig(format!(
            "pass-count speedup needs equal token counts ({} vs {})",
            run_vanilla.tokens.len(),
            run_spec.tokens.len()
        )));
    }
    Ok(run_spec.tokens_per_forward() / run_vanilla.tokens_per_forward())
}

/// Mean negative log-probability of each token under the oracle's true
/// conditional distribution; lower is better.
pub fn nll_quality(oracle: &MarkovOracle, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::SampleSize(
            "nll needs a sequence of at least 2 tokens".into(),
        ));
    }
    let t = oracle.transition();
    let mut total = 0.0;
    for w in tokens.windows(2) {
        let p = t[w[0].index()][w[1].index()];
        total -= p.max(1e-300).ln();
    }
    Ok(total / (tokens.len() - 1) as f64)
}

/// Outcome of the conditional-frequency equivalence test.
#[derive(Clone, Copy, Debug)]
pub struct EquivalenceOutcome {
    /// Maximum total-variation distance over compared contexts.
    pub max_tv: f64,
    pub pass: bool,
}

/// Minimum sequence length accepted by [`equivalence_test`].
pub const MIN_EQUIVALENCE_TOKENS: usize = 100_000;

/// Compares conditional next-token frequency tables of two sequences over
/// contexts of length `order`. Contexts with fewer than 100 observations on
/// either side are skipped.
pub fn equivalence_test(
    tokens_a: &[TokenId],
    tokens_b: &[TokenId],
    order: usize,
) -> Result<EquivalenceOutcome> {
    if tokens_a.len() < MIN_EQUIVALENCE_TOKENS || tokens_b.len() < MIN_EQUIVALENCE_TOKENS {
        return Err(Error::SampleSize(format!(
            "equivalence test needs >= {MIN_EQUIVALENCE_TOKENS} tokens per sequence, got {} and {}",
            tokens_a.len(),
            tokens_b.len()
        )));
    }
    if order < 1 {
        return Err(Error::InvalidConfig("context order must be >= 1".into()));
    }
    let count = |tokens: &[TokenId]| {
        let mut table: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
        for w in tokens.windows(order + 1) {
            let ctx = w[..order].to_vec();
            *table.entry(ctx).or_default().entry(w[order]).or_insert(0) += 1;
        }
        table
    };
    let table_a = count(tokens_a);
    let table_b = count(tokens_b);
    let min_obs = 100u64;
    let mut max_tv = 0.0f64;
    let mut compared = 0usize;
    for (ctx, counts_a) in &table_a {
        let Some(counts_b) = table_b.get(ctx) else {
            continue;
        };
        let total_a: u64 = counts_a.values().sum();
        let total_b: u64 = counts_b.values().sum();
        if total_a < min_obs || total_b < min_obs {
            continue;
        }
        let mut support: Vec<TokenId> = counts_a.keys().copied().collect();
        for t in counts_b.keys() {
            if !support.contains(t) {
                support.push(*t);
            }
        }
        let mut tv = 0.0;
        for t in support {
            let pa = *counts_a.get(&t).unwrap_or(&0) as f64 / total_a as f64;
            let pb = *counts_b.get(&t).unwrap_or(&0) as f64 / total_b as f64;
            tv += (pa - pb).abs();
        }
        tv *= 0.5;
        max_tv = max_tv.max(tv);
        compared += 1;
    }
    if compared == 0 {
        return Err(Error::SampleSize(
            "no context had enough observations in both sequences".into(),
        ));
    }
    Ok(EquivalenceOutcome {
        max_tv,
        pass: max_tv < EQUIVALENCE_THRESHOLD,
    })
}
