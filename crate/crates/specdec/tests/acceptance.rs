//! Acceptance gate: one test per release criterion, each printing a
//! PASS line on success (run with `--nocapture` to see them).

use std::collections::HashSet;
use std::process::Command;
use std::time::Instant;

use specdec::bench::{equivalence_test, pass_count_speedup, CSV_HEADER};
use specdec::corpus::gen_corpus;
use specdec::decode::{
    prefill, speculative_decode, speculative_pass, vanilla_decode, ToleranceConfig,
};
use specdec::model::markov::{MarkovOracle, TransitionSpec};
use specdec::model::windowed::{TrainConfig, TrainMode, WindowedArModel};
use specdec::rng::RandomStream;
use specdec::sampling::{SamplingConfig, TokenId};
use specdec::tree::{
    build_sparse_tree, calibrate, expected_accept_length, full_tree, node_path_probability,
    CalibrationTable, TreeBudget,
};

fn random_transition(vocab: usize, rng: &mut RandomStream) -> Vec<Vec<f64>> {
    (0..vocab)
        .map(|_| {
            let row: Vec<f64> = (0..vocab).map(|_| 0.05 + rng.next_f64()).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|w| w / s).collect()
        })
        .collect()
}

fn random_monotone_table(heads: usize, branch: usize, rng: &mut RandomStream) -> CalibrationTable {
    let rows: Vec<Vec<f64>> = (0..heads)
        .map(|_| {
            let mut row: Vec<f64> = (0..branch).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            row
        })
        .collect();
    CalibrationTable::from_probabilities(rows).unwrap()
}

#[test]
fn criterion_1_greedy_losslessness() {
    let start = Instant::now();
    let mut rng = RandomStream::new(101);
    let tol = ToleranceConfig::new(1).unwrap();
    let greedy = SamplingConfig::greedy();
    for case in 0..100u64 {
        let vocab = 2 + rng.next_index(15); // V in 2..=16
        let heads = 3;
        let oracle = MarkovOracle::new(random_transition(vocab, &mut rng), heads).unwrap();
        let table = random_monotone_table(heads, 3.min(vocab), &mut rng);
        let budget = 2 + rng.next_index(19);
        let built =
            build_sparse_tree(&table, TreeBudget::new(budget).unwrap(), heads, 3.min(vocab))
                .unwrap();
        let prompt = vec![TokenId(rng.next_index(vocab) as u32)];
        let mut rng_a = RandomStream::derive(case, 1);
        let mut rng_b = RandomStream::derive(case, 2);
        let spec = speculative_decode(
            &oracle,
            &prompt,
            200,
            &built.topology,
            &tol,
            &greedy,
            &mut rng_a,
        )
        .unwrap();
        let vanilla = vanilla_decode(&oracle, &prompt, 200, &greedy, &mut rng_b).unwrap();
        assert_eq!(spec.tokens, vanilla.tokens, "case {case} V={vocab}");
    }
    assert!(start.elapsed().as_secs() < 60, "criterion 1 ran too long");
    println!("criterion 1 (greedy losslessness): PASS");
}

#[test]
fn criterion_2_distributional_losslessness() {
    let oracle = MarkovOracle::new(vec![vec![0.9, 0.1], vec![0.1, 0.9]], 3).unwrap();
    let raw = SamplingConfig::raw();
    let tol = ToleranceConfig::new(1).unwrap();
    let topology = full_tree(3, 2);
    let n = 100_000;
    let mut rng_a = RandomStream::new(201);
    let mut rng_b = RandomStream::new(202);
    let spec =
        speculative_decode(&oracle, &[TokenId(0)], n, &topology, &tol, &raw, &mut rng_a).unwrap();
    let vanilla = vanilla_decode(&oracle, &[TokenId(0)], n, &raw, &mut rng_b).unwrap();
    let outcome = equivalence_test(&spec.tokens, &vanilla.tokens, 1).unwrap();
    assert!(
        outcome.pass,
        "max conditional TV {} >= 0.02",
        outcome.max_tv
    );
    println!(
        "criterion 2 (distributional losslessness, max TV {:.4}): PASS",
        outcome.max_tv
    );
}

/// All downward-closed node sets of the full (heads, branching) tree,
/// grouped by size (root included, sizes 1..=max_nodes). Sets are bitmasks
/// over node ids of `full_tree(heads, branching)`.
fn ideals_by_size(heads: usize, branching: usize, max_nodes: usize) -> Vec<Vec<u64>> {
    let topo = full_tree(heads, branching);
    let n = topo.len();
    assert!(n <= 64);
    let mut by_size: Vec<HashSet<u64>> = vec![HashSet::new(); max_nodes + 1];
    by_size[1].insert(1u64); // just the root (node id 0)
    for size in 1..max_nodes {
        let mut grown = Vec::new();
        for &mask in &by_size[size] {
            for id in 1..n {
                let parent = topo.node(id).parent.unwrap();
                if mask & (1 << id) == 0 && mask & (1 << parent) != 0 {
                    grown.push(mask | (1 << id));
                }
            }
        }
        by_size[size + 1].extend(grown);
    }
    by_size
        .into_iter()
        .map(|s| s.into_iter().collect())
        .collect()
}

#[test]
fn criterion_3_greedy_tree_optimality() {
    let start = Instant::now();
    let mut rng = RandomStream::new(301);
    for heads in 1..=3usize {
        for branch in 1..=3usize {
            let topo = full_tree(heads, branch);
            let full_size = topo.len();
            let max_nodes = 10.min(full_size);
            let ideals = ideals_by_size(heads, branch, max_nodes);
            let path_probs: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    let table = random_monotone_table(heads, branch, &mut rng);
                    let probs: Vec<f64> = (0..full_size)
                        .map(|id| node_path_probability(&topo, &table, id))
                        .collect();
                    // greedy objective for every budget in 1..=10
                    for budget in 1..=10usize {
                        let built = build_sparse_tree(
                            &table,
                            TreeBudget::new(budget).unwrap(),
                            heads,
                            branch,
                        )
                        .unwrap();
                        let greedy_obj =
                            expected_accept_length(&built.topology, &table, 1);
                        let size = budget.min(full_size);
                        let best = ideals[size]
                            .iter()
                            .map(|&mask| {
                                (1..full_size)
                                    .filter(|&id| mask & (1 << id) != 0)
                                    .map(|id| probs[id])
                                    .sum::<f64>()
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                            + 1.0;
                        assert!(
                            (greedy_obj - best).abs() < 1e-9,
                            "K={heads} k={branch} budget={budget}: greedy {greedy_obj} vs exhaustive {best}"
                        );
                    }
                    probs
                })
                .collect();
            drop(path_probs);
        }
    }
    assert!(start.elapsed().as_secs() < 30, "criterion 3 ran too long");
    println!("criterion 3 (greedy tree optimality): PASS");
}

#[test]
fn criterion_4_acceptance_length_prediction() {
    // iid oracles (identical rows) make the product model exact: draft heads
    // equal the row itself, sibling acceptances are mutually exclusive at
    // tau = 1, and depths are independent.
    let raw = SamplingConfig::raw();
    let tol = ToleranceConfig::new(1).unwrap();
    for case in 0..10u64 {
        let mut rng = RandomStream::new(400 + case);
        let vocab = 3 + rng.next_index(6);
        let row: Vec<f64> = {
            let w: Vec<f64> = (0..vocab).map(|_| 0.1 + rng.next_f64()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let heads = 3;
        let oracle =
            MarkovOracle::new(vec![row.clone(); vocab], heads).unwrap();
        // analytic acceptance: rank-j candidate has the j-th largest prob
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let branch = 3.min(vocab);
        let table = CalibrationTable::from_probabilities(vec![
            sorted[..branch].to_vec();
            heads
        ])
        .unwrap();
        let budget = 2 + rng.next_index(10);
        let built =
            build_sparse_tree(&table, TreeBudget::new(budget).unwrap(), heads, branch).unwrap();
        let expected = expected_accept_length(&built.topology, &table, 1);

        let passes = 10_000usize;
        let mut pass_state = prefill(&oracle, &[TokenId(0)], &raw, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..passes {
            let r =
                speculative_pass(&oracle, &mut pass_state, &built.topology, &tol, &raw, &mut rng)
                    .unwrap();
            let len = r.acceptance_length as f64;
            sum += len;
            sq += len * len;
        }
        let mean = sum / passes as f64;
        let var = (sq / passes as f64 - mean * mean).max(0.0);
        let se = (var / passes as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se.max(1e-6),
            "case {case}: empirical {mean} vs expected {expected} (se {se})"
        );
    }
    println!("criterion 4 (acceptance-length prediction): PASS");
}

#[test]
fn criterion_5_tolerance_monotonicity() {
    let raw = SamplingConfig::raw();
    let run_mean = |oracle: &MarkovOracle, tau: usize, seed: u64| {
        let topology = full_tree(4, 2);
        let tol = ToleranceConfig::new(tau).unwrap();
        let mut rng = RandomStream::new(seed);
        let run = speculative_decode(
            oracle,
            &[TokenId(0)],
            20_000,
            &topology,
            &tol,
            &raw,
            &mut rng,
        )
        .unwrap();
        run.mean_accepted()
    };

    // mid-entropy oracle: paired seeds, non-decreasing across tau
    let mid = MarkovOracle::from_spec(&TransitionSpec::parse("skew:0.6").unwrap(), 8, 4).unwrap();
    let mut prev = 0.0;
    for tau in 1..=4usize {
        let mean = run_mean(&mid, tau, 501);
        assert!(
            mean >= prev - 1e-9,
            "mid-entropy oracle: tau {tau} mean {mean} < previous {prev}"
        );
        prev = mean;
    }

    // flat oracle: strict gain of at least 0.1 from tau=1 to tau=4
    let flat = MarkovOracle::uniform(8, 4).unwrap();
    let low = run_mean(&flat, 1, 502);
    let high = run_mean(&flat, 4, 502);
    assert!(
        high - low >= 0.1,
        "flat oracle: tau=4 mean {high} vs tau=1 mean {low}"
    );
    println!(
        "criterion 5 (tolerance monotonicity, flat gain {:.3}): PASS",
        high - low
    );
}

#[test]
fn criterion_6_speedup_realization() {
    let start = Instant::now();
    let heads = 4;
    let fast = MarkovOracle::from_spec(&TransitionSpec::parse("skew:0.95").unwrap(), 16, heads)
        .unwrap();
    let mut rng = RandomStream::new(601);
    let corpus = gen_corpus(&fast, 30_000, None, &mut rng).unwrap();
    let cfg = SamplingConfig::default();
    // calibration does not need timing fidelity, so it runs without busywork
    let table = calibrate(&fast, &[corpus], heads, 10, &cfg, 602).unwrap();
    // busywork per forward call stands in for the per-pass latency of a
    // large accelerator model, where one tree pass costs about one forward
    let oracle = fast.with_forward_work(4_000);
    let built = build_sparse_tree(&table, TreeBudget::new(64).unwrap(), heads, 10).unwrap();
    let tol = ToleranceConfig::new(3).unwrap();
    let n = 2_000;
    let mut rng_a = RandomStream::new(603);
    let mut rng_b = RandomStream::new(604);
    let spec = speculative_decode(
        &oracle,
        &[TokenId(0)],
        n,
        &built.topology,
        &tol,
        &cfg,
        &mut rng_a,
    )
    .unwrap();
    let vanilla = vanilla_decode(&oracle, &[TokenId(0)], n, &cfg, &mut rng_b).unwrap();
    let wall = spec.tokens_per_second() / vanilla.tokens_per_second();
    let passes = pass_count_speedup(&vanilla, &spec).unwrap();
    assert!(passes >= 3.5, "pass-count speedup {passes} < 3.5");
    assert!(wall >= 2.0, "wall-clock speedup {wall} < 2.0");
    assert!(start.elapsed().as_secs() < 120, "criterion 6 ran too long");
    println!(
        "criterion 6 (speedup realization, wall {:.2}x, passes {:.2}x): PASS"
        , wall, passes
    );
}

#[test]
fn criterion_7_gradient_correctness() {
    let mut rng = RandomStream::new(701);
    let model = WindowedArModel::new_random(10, 4, 6, 8, 4, &mut rng).unwrap();
    let corpus: Vec<TokenId> = (0..80).map(|_| TokenId(rng.next_index(10) as u32)).collect();
    let (items, _) = specdec::model::windowed::training_items(&corpus, 4, 4);
    let batch = &items[..16];
    for mode in [TrainMode::Wt, TrainMode::Wot] {
        let cfg = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        let err = model.gradient_check(batch, &cfg, 1e-4, &mut rng).unwrap();
        assert!(err < 1e-4, "mode {mode:?}: max relative error {err}");
    }
    println!("criterion 7 (gradient correctness): PASS");
}

#[test]
fn criterion_8_training_sanity() {
    let heads = 4;
    let oracle =
        MarkovOracle::from_spec(&TransitionSpec::parse("skew:0.7").unwrap(), 4, heads + 1)
            .unwrap();
    let mut rng = RandomStream::new(801);
    let corpus = gen_corpus(&oracle, 100_000, None, &mut rng).unwrap();
    let mut model = WindowedArModel::new_random(4, 4, 8, 16, heads, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    model.train(&corpus, &cfg, &mut rng).unwrap();
    let ce = model.evaluate_ce(&corpus).unwrap();
    let h1 = oracle.conditional_entropy(1);
    let h5 = oracle.conditional_entropy(5);
    assert!(
        (ce[0] - h1).abs() / h1 < 0.10,
        "head 0 CE {} vs entropy {h1}",
        ce[0]
    );
    assert!(
        (ce[4] - h5).abs() / h5 < 0.25,
        "head 4 CE {} vs entropy {h5}",
        ce[4]
    );

    // frozen-base mode must leave trunk and head 0 bit-identical
    let mut frozen = WindowedArModel::new_random(4, 4, 8, 16, heads, &mut rng).unwrap();
    let before = frozen.base_param_bytes();
    let wot = TrainConfig {
        mode: TrainMode::Wot,
        epochs: 1,
        ..TrainConfig::default()
    };
    frozen.train(&corpus[..20_000], &wot, &mut rng).unwrap();
    assert_eq!(before, frozen.base_param_bytes(), "base parameters moved");
    println!(
        "criterion 8 (training sanity, head0 CE {:.4} vs H {:.4}): PASS",
        ce[0], h1
    );
}

#[test]
fn criterion_9_end_to_end_pipeline() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let bin = env!("CARGO_BIN_EXE_specdec");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "specdec {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "gen-corpus", "--seed", "9", "--out", &p("corpus.txt"),
    ]);
    run(&[
        "train", "--corpus", &p("corpus.txt"), "--out", &p("model.bin"),
        "--seed", "9",
    ]);
    run(&[
        "calibrate", "--model", &p("model.bin"), "--corpus", &p("corpus.txt"),
        "--out", &p("calib.txt"), "--seed", "9",
    ]);
    run(&[
        "build-tree", "--calibration", &p("calib.txt"), "--out", &p("tree.txt"),
    ]);
    run(&[
        "bench", "--model", &p("model.bin"), "--calibration", &p("calib.txt"),
        "--corpus", &p("corpus.txt"), "--out", &p("bench.csv"), "--seed", "9",
    ]);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER), "bad CSV header");
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 12, "bad row: {line}");
        for f in &fields[1..] {
            assert!(
                f.parse::<f64>().is_ok() || *f == "nan",
                "non-numeric field {f} in {line}"
            );
        }
        rows += 1;
    }
    assert!(rows >= 1, "no benchmark rows");
    assert!(start.elapsed().as_secs() < 60, "pipeline ran too long");
    println!("criterion 9 (end-to-end pipeline): PASS");
}
