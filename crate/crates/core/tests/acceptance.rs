//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! enforces its wall-clock limit. Tests hold a global lock so timings are not
//! disturbed by each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use dejavu_core::depth::{
    deviation_report, four_op_bound_check, generate_transformed, skip_oracle_weights,
    two_op_bound_check, DepthTransform,
};
use dejavu_core::lookahead::{run_dense, run_lookahead, run_sequential_sparse, RunOptions};
use dejavu_core::model::{
    dense_mha, generate_dense, random_prompt, KvCache, ModelConfig, PlantedSpec, TransformerWeights,
};
use dejavu_core::nns::{
    brute_force_maxip, close_fact_check, inner, maxip_success_rate, phi0, phi1, planted_dataset,
    psi0, psi1, random_unit, BruteForce, LshIndex, LshSearch, MaxIpParams,
};
use dejavu_core::oracle::{
    angle_close_check, record_sparsity, two_pass_verify, union_stats, SparsityRecord,
};
use dejavu_core::predictor::{
    build_training_set, eval_recall, gradient_check, train, EvalBudget, FullBudget, InputSource,
    PredictorBank, TrainConfig,
};
use dejavu_core::sketch::{
    check_structure, chi_square_tail_check, make_sketch, relu_dims, relu_norm_check,
    softmax_norm_check, softmax_rows, subspace_embed_check, SketchKind, SoftmaxVariant,
    SubspaceSpec,
};
use dejavu_core::sparse::bench::bench_mlp;
use dejavu_core::sparse::kernels::measure_row_kernels;
use dejavu_core::sparse::{
    backfill_selected, fused_gather_rows_matvec, fused_scatter_cols_matvec, kv_backfill,
    naive_gather_cols_matvec, naive_gather_rows_matvec, sparse_mha, BudgetKind, IndexSet, NoMeter,
    PendingPolicy, SparsityBudget, UnitKind,
};
use dejavu_core::tensor::{streams, Matrix, Seed, StorageOrder};

static LOCK: Mutex<()> = Mutex::new(());

/// Runs `check` under the lock, prints the verdict line and fails the test if
/// the check failed or overran `limit`.
fn criterion(name: &str, limit: Duration, check: impl FnOnce() -> (bool, String)) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_time = elapsed < limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    // written to the stdout handle directly so the line survives output capture
    let line = format!(
        "{verdict} {name} ({:.2}s, limit {}s): {detail}\n",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
    assert!(in_time, "{name}: took {elapsed:?}, limit {limit:?}");
}

fn toy_model(layers: usize, seed: u64) -> TransformerWeights {
    let cfg = ModelConfig::new(64, 8, layers, 256, 64).unwrap();
    TransformerWeights::random(cfg, Seed(seed)).unwrap()
}

fn planted_model() -> TransformerWeights {
    let cfg = ModelConfig::new(64, 8, 2, 256, 64).unwrap();
    TransformerWeights::planted(cfg, PlantedSpec::default(), Seed(11)).unwrap()
}

fn neuron_threshold(t: f64) -> SparsityBudget {
    SparsityBudget::threshold(t, UnitKind::Neurons).unwrap()
}

fn all_heads(w: &TransformerWeights) -> SparsityBudget {
    SparsityBudget::top_k(w.config.n_heads, UnitKind::Heads).unwrap()
}

fn records(
    w: &TransformerWeights,
    n: usize,
    len: usize,
    steps: usize,
    mlp: SparsityBudget,
    base: Seed,
) -> Vec<SparsityRecord> {
    (0..n)
        .map(|i| {
            let prompt = random_prompt(w.config.vocab, len, base.derive(i as u64));
            record_sparsity(w, &prompt, steps, mlp, all_heads(w)).unwrap()
        })
        .collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn anchor_equivalence() {
    criterion("anchor_equivalence", Duration::from_secs(5), || {
        let w = toy_model(4, 1);
        let prompt = random_prompt(256, 16, Seed(1));
        let full = FullBudget::for_model(&w.config);
        let opts = RunOptions {
            workers: 2,
            ..RunOptions::default()
        };
        let dense = run_dense(&w, &prompt, 16).unwrap().generation.tokens;
        let seq = run_sequential_sparse(&w, &full, &prompt, 16, &opts)
            .unwrap()
            .generation
            .tokens;
        let look = run_lookahead(&w, &full, &prompt, 16, &opts)
            .unwrap()
            .generation
            .tokens;
        let ok = dense.len() == 32 && dense == seq && dense == look;
        (
            ok,
            format!(
                "dense==sparse-seq: {}, dense==lookahead: {}",
                dense == seq,
                dense == look
            ),
        )
    });
}

#[test]
fn exact_relu_sparsity() {
    criterion("exact_relu_sparsity", Duration::from_secs(10), || {
        let w = toy_model(4, 2);
        let (mut steps, mut worst, mut active, mut total) = (0, 0.0f64, 0usize, 0usize);
        for i in 0..4 {
            let prompt = random_prompt(256, 10, Seed(100 + i));
            let rec =
                record_sparsity(&w, &prompt, 16, neuron_threshold(1e-9), all_heads(&w)).unwrap();
            for e in &rec.entries {
                active += e.mlp_active.len();
                total += e.mlp_active.universe();
            }
            let rep = two_pass_verify(&w, &prompt, 16, &rec).unwrap();
            steps += rep.steps.len();
            worst = worst.max(rep.max_abs_diff());
        }
        let density = active as f64 / total as f64;
        let ok = steps >= 100 && worst <= 1e-5 && density < 1.0;
        (
            ok,
            format!("{steps} steps, max |Δlogit| {worst:.3e}, neuron density {density:.3}"),
        )
    });
}

/// Gather-then-multiply with f64 left-to-right accumulation.
fn oracle_gather(w: &Matrix, idx: &[usize], x: &[f32]) -> Vec<f32> {
    idx.iter()
        .map(|&r| {
            let mut acc = 0.0f64;
            for (j, &xv) in x.iter().enumerate() {
                acc += f64::from(w.get(r, j)) * f64::from(xv);
            }
            acc as f32
        })
        .collect()
}

/// Column-at-a-time accumulation of `W[:, idx[p]]·s[p]`.
fn oracle_scatter(w: &Matrix, idx: &[usize], s: &[f32]) -> Vec<f32> {
    let mut acc = vec![0.0f64; w.rows()];
    for (&c, &sv) in idx.iter().zip(s) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += f64::from(w.get(i, c)) * f64::from(sv);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[test]
fn fused_kernels_match_oracles() {
    criterion(
        "fused_kernels_match_oracles",
        Duration::from_secs(30),
        || {
            let mut rng = Seed(3).rng();
            let mut mismatches = 0;
            for _ in 0..1000 {
                let rows = rng.random_range(1..=96);
                let cols = rng.random_range(1..=96);
                let wr = Matrix::gaussian(rows, cols, 1.0, StorageOrder::RowContiguous, &mut rng);
                let k = rng.random_range(0..=rows);
                let idx =
                    IndexSet::from_unsorted(sample(&mut rng, rows, k).into_vec(), rows).unwrap();
                let x: Vec<f32> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
                let fused = bits(&fused_gather_rows_matvec(&wr, &idx, &x).unwrap());
                let naive = bits(&naive_gather_rows_matvec(&wr, &idx, &x, &mut NoMeter).unwrap());
                if fused != naive || fused != bits(&oracle_gather(&wr, idx.indices(), &x)) {
                    mismatches += 1;
                }

                let wc = Matrix::gaussian(rows, cols, 1.0, StorageOrder::ColContiguous, &mut rng);
                let k = rng.random_range(0..=cols);
                let idx =
                    IndexSet::from_unsorted(sample(&mut rng, cols, k).into_vec(), cols).unwrap();
                let s: Vec<f32> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let fused = bits(&fused_scatter_cols_matvec(&wc, &idx, &s).unwrap());
                let naive = bits(&naive_gather_cols_matvec(&wc, &idx, &s, &mut NoMeter).unwrap());
                if fused != naive || fused != bits(&oracle_scatter(&wc, idx.indices(), &s)) {
                    mismatches += 1;
                }
            }

            let w = Matrix::gaussian(4096, 1024, 0.02, StorageOrder::RowContiguous, &mut rng);
            let idx =
                IndexSet::from_unsorted(sample(&mut rng, 4096, 1024).into_vec(), 4096).unwrap();
            let x: Vec<f32> = (0..1024).map(|_| rng.sample(StandardNormal)).collect();
            let [fused, naive] = measure_row_kernels(&w, &idx, &x).unwrap();
            let ratio = (naive.float_reads + naive.float_writes) as f64
                / (fused.float_reads + fused.float_writes) as f64;
            let ok = mismatches == 0 && ratio >= 2.5;
            (ok, format!("{mismatches} mismatches over 2000 kernel calls, naive/fused IO {ratio:.3} at density 0.25"))
        },
    );
}

#[test]
fn sparse_mlp_wall_clock() {
    criterion("sparse_mlp_wall_clock", Duration::from_secs(60), || {
        let rows = bench_mlp(1024, 4096, &[0.25], 100, Seed(4)).unwrap();
        let sparse = &rows[1];
        let ok = sparse.speedup >= 1.5;
        (
            ok,
            format!(
                "dense {} ns, sparse {} ns (median of 100), speedup {:.2}x",
                rows[0].latency_nanos, sparse.latency_nanos, sparse.speedup
            ),
        )
    });
}

#[test]
fn lookahead_determinism() {
    criterion("lookahead_determinism", Duration::from_secs(30), || {
        let w = toy_model(4, 5);
        let cfg = w.config;
        let recs = records(&w, 6, 8, 8, neuron_threshold(1e-9), Seed(500));
        let mut bank = PredictorBank::new(cfg.n_layers, BudgetKind::TopK(4), BudgetKind::TopK(64));
        for (kind, label) in [(UnitKind::Heads, 0.1), (UnitKind::Neurons, 1e-9)] {
            for layer in 0..cfg.n_layers {
                let ts =
                    build_training_set(&recs, layer, kind, label, InputSource::Sequential).unwrap();
                let tc = TrainConfig {
                    epochs: 10,
                    ..TrainConfig::new(cfg.d_model, BudgetKind::TopK(4))
                };
                bank.insert(train(&ts, &tc).unwrap().weights).unwrap();
            }
        }
        let prompt = random_prompt(cfg.vocab, 16, Seed(5));
        let mut reference = None;
        let mut runs = 0;
        let mut identical = true;
        for workers in [1, 2, 4, 8] {
            for _ in 0..5 {
                let opts = RunOptions {
                    workers,
                    ..RunOptions::default()
                };
                let out = run_lookahead(&w, &bank, &prompt, 16, &opts).unwrap();
                let key = (out.generation, out.trace.without_timing());
                runs += 1;
                match &reference {
                    None => reference = Some(key),
                    Some(r) => identical &= *r == key,
                }
            }
        }
        let (_, trace) = reference.unwrap();
        let sparse = trace
            .layers
            .iter()
            .any(|r| !r.mlp_set.is_full() || !r.attn_set.is_full());
        (identical && sparse, format!("{runs} runs over workers {{1,2,4,8}}, identical: {identical}, sets sparse: {sparse}"))
    });
}

#[test]
fn kv_backfill_exactness() {
    criterion("kv_backfill_exactness", Duration::from_secs(10), || {
        let cfg = ModelConfig::new(32, 4, 2, 32, 32).unwrap();
        let w = TransformerWeights::random(cfg, Seed(6)).unwrap();
        let mut rng = Seed(6).derive(99).rng();
        let (mut ok_count, mut exercised) = (0, 0);
        for _ in 0..20 {
            let steps = rng.random_range(4..=16);
            let mut dense = KvCache::new(&cfg);
            let mut lazy = KvCache::new(&cfg);
            let mut eager = KvCache::new(&cfg);
            for _ in 0..steps {
                for (layer, block) in w.blocks.iter().enumerate() {
                    let y: Vec<f32> = (0..cfg.d_model)
                        .map(|_| rng.random_range(-2.0..2.0))
                        .collect();
                    let k = rng.random_range(0..=cfg.n_heads);
                    let set = IndexSet::from_unsorted(
                        sample(&mut rng, cfg.n_heads, k).into_vec(),
                        cfg.n_heads,
                    )
                    .unwrap();
                    dense_mha(&cfg, block, &mut dense, &y, layer).unwrap();
                    backfill_selected(block, &mut lazy, layer, &set).unwrap();
                    sparse_mha(&cfg, block, &mut lazy, &y, layer, &set, PendingPolicy::Lazy)
                        .unwrap();
                    sparse_mha(
                        &cfg,
                        block,
                        &mut eager,
                        &y,
                        layer,
                        &set,
                        PendingPolicy::Eager,
                    )
                    .unwrap();
                }
            }
            if lazy.has_pending() {
                exercised += 1;
            }
            for (layer, block) in w.blocks.iter().enumerate() {
                for head in 0..cfg.n_heads {
                    kv_backfill(block, &mut lazy, layer, head).unwrap();
                }
            }
            if !lazy.has_pending() && lazy.bitwise_eq(&dense) && eager.bitwise_eq(&dense) {
                ok_count += 1;
            }
        }
        (ok_count == 20 && exercised > 0, format!("{ok_count}/20 schedules bit-identical, {exercised} left heads pending before backfill"))
    });
}

#[test]
fn predictor_learnability() {
    criterion("predictor_learnability", Duration::from_secs(120), || {
        let w = planted_model();
        let cfg = w.config;
        let budget = neuron_threshold(0.1);
        let train_recs = records(&w, 40, 8, 8, budget, Seed(700));
        let held_out = records(&w, 10, 8, 8, budget, Seed(700).derive(streams::HELDOUT));
        let mut recalls = Vec::new();
        for layer in 0..cfg.n_layers {
            let ts = build_training_set(
                &train_recs,
                layer,
                UnitKind::Neurons,
                0.1,
                InputSource::Sequential,
            )
            .unwrap();
            let tc = TrainConfig {
                epochs: 200,
                seed: Seed(7),
                ..TrainConfig::new(cfg.d_model, BudgetKind::TopK(cfg.d_ff / 4))
            };
            let out = train(&ts, &tc).unwrap();
            let rep = eval_recall(
                &out.weights,
                &held_out,
                EvalBudget::TrueSize,
                InputSource::Sequential,
            )
            .unwrap();
            recalls.push(rep.recall);
        }
        let min = recalls.iter().copied().fold(1.0, f64::min);
        let shown: Vec<String> = recalls.iter().map(|r| format!("{r:.4}")).collect();
        (
            min >= 0.9,
            format!("held-out neuron recall per layer [{}]", shown.join(", ")),
        )
    });
}

#[test]
fn predictor_gradient_check() {
    criterion("predictor_gradient_check", Duration::from_secs(5), || {
        let mut rng = Seed(8).rng();
        let mut worst = 0.0f64;
        for i in 0..50 {
            let (d, r, m, batch) = (
                rng.random_range(2..=8),
                rng.random_range(2..=6),
                rng.random_range(2..=8),
                rng.random_range(1..=5),
            );
            worst = worst.max(gradient_check(d, r, m, batch, Seed(800 + i)).unwrap());
        }
        (
            worst <= 1e-3,
            format!("max relative gradient error {worst:.3e} over 50 instances"),
        )
    });
}

/// Linear scan written independently of the library, lowest id on ties.
fn scan_maxip(data: &[Vec<f64>], q: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in data.iter().enumerate() {
        let mut ip = 0.0;
        for (a, b) in x.iter().zip(q) {
            ip += a * b;
        }
        if ip > best.1 {
            best = (i, ip);
        }
    }
    best
}

#[test]
fn maxip_success() {
    criterion("maxip_success", Duration::from_secs(60), || {
        let seed = Seed(9);
        let (data, queries) = planted_dataset(10_000, 32, 1200, 0.08, seed);
        let params = MaxIpParams::new(0.9, 0.8).unwrap();
        let mut scan_agree = true;
        for q in &queries {
            let (id, ip) = brute_force_maxip(&data, q).unwrap();
            let (sid, sip) = scan_maxip(&data, q);
            scan_agree &= id == sid && ip == sip;
        }
        let brute = maxip_success_rate(&BruteForce(data.clone()), &queries, params).unwrap();
        let index = LshIndex::build(data, 20, 10, seed).unwrap();
        let rep = maxip_success_rate(
            &LshSearch {
                index: &index,
                probes: 300,
            },
            &queries,
            params,
        )
        .unwrap();
        let ok = scan_agree && brute.rate == 1.0 && rep.qualifying >= 1000 && rep.rate >= 0.9;
        (
            ok,
            format!(
                "{} qualifying queries, LSH success {:.4}, brute force agrees with scan: {scan_agree}",
                rep.qualifying, rep.rate
            ),
        )
    });
}

#[test]
fn transform_invariants() {
    criterion("transform_invariants", Duration::from_secs(5), || {
        let mut rng = Seed(10).rng();
        let (mut norm_err, mut argmax_ok) = (0.0f64, 0);
        for _ in 0..100 {
            let d = rng.random_range(2..=16);
            let data: Vec<Vec<f64>> = (0..64)
                .map(|_| {
                    let r = rng.random_range(0.1..3.0);
                    random_unit(d, &mut rng)
                        .into_iter()
                        .map(|a| a * r)
                        .collect()
                })
                .collect();
            let dx = data.iter().map(|x| inner(x, x).sqrt()).fold(0.0, f64::max);
            let y: Vec<f64> = random_unit(d, &mut rng)
                .into_iter()
                .map(|a| a * 2.5)
                .collect();
            let dy = inner(&y, &y).sqrt();
            let mapped: Vec<Vec<f64>> = data.iter().map(|x| phi1(x, dx).unwrap()).collect();
            let q = psi1(&y, dy).unwrap();
            for v in mapped.iter().chain([&q]) {
                norm_err = norm_err.max((inner(v, v).sqrt() - 1.0).abs());
            }
            if scan_maxip(&mapped, &q).0 == scan_maxip(&data, &y).0 {
                argmax_ok += 1;
            }
        }
        let mut id_err = 0.0f64;
        for _ in 0..1000 {
            let d = rng.random_range(1..=16);
            let mut draw = || -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
            let (x, y, g) = (draw(), draw(), draw());
            let lhs = inner(&phi0(&x, &g).unwrap(), &psi0(&y));
            let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let rhs = -diff.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            id_err = id_err.max((lhs - rhs).abs());
        }
        let ok = norm_err <= 1e-6 && argmax_ok == 100 && id_err <= 1e-6;
        (ok, format!("unit-norm error {norm_err:.2e}, argmax preserved {argmax_ok}/100, identity error {id_err:.2e}"))
    });
}

#[test]
fn lemma_suites() {
    criterion("lemma_suites", Duration::from_secs(30), || {
        let seed = Seed(12);
        let angle: Vec<usize> = [0.01, 0.09]
            .iter()
            .map(|&eps| angle_close_check(10_000, eps, 16, seed).unwrap().violations)
            .collect();
        let two = two_op_bound_check(0.2, 0.2, 16, 1000, seed)
            .unwrap()
            .total_violations();
        let four = four_op_bound_check([0.15; 4], 16, 1000, seed)
            .unwrap()
            .total_violations();
        let mut rng = seed.derive(1).rng();
        let mut identity = 0;
        for _ in 0..10_000 {
            let d = rng.random_range(2..=32);
            let (x, y) = (random_unit(d, &mut rng), random_unit(d, &mut rng));
            let dist2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if (dist2 - (2.0 - 2.0 * inner(&x, &y))).abs() > 1e-12 {
                identity += 1;
            }
        }
        let close = close_fact_check(10_000, 0.1, 16, seed).unwrap();
        let ok = angle == [0, 0] && two == 0 && four == 0 && identity == 0 && close == 0;
        (
            ok,
            format!(
                "violations: angle {angle:?}, two-operator {two}, four-operator {four}, distance identity {identity}, close fact {close}"
            ),
        )
    });
}

#[test]
fn sketch_suite() {
    criterion("sketch_suite", Duration::from_secs(60), || {
        let seed = Seed(13);
        let structural: Vec<String> = SketchKind::ALL_BASIC
            .iter()
            .filter(|&&k| !check_structure(k, &make_sketch(k, 64, 256, seed).unwrap()))
            .map(|k| k.to_string())
            .collect();
        let spec = SubspaceSpec::random(256, 4, seed).unwrap();
        let gauss =
            subspace_embed_check(SketchKind::Gaussian, &spec, 0.5, 0.01, 1000, seed).unwrap();
        let (s, d) = relu_dims(2, 0.5);
        let relu = relu_norm_check(d, s, 2, 0.5, 500, seed).unwrap();
        let sm_d = softmax_rows(8, 0.5, 0.01);
        let l1 = softmax_norm_check(sm_d, 8, 2, 0.5, 0.5, 1000, SoftmaxVariant::L1, seed).unwrap();
        let l2 = softmax_norm_check(sm_d, 8, 2, 0.5, 0.5, 1000, SoftmaxVariant::L2, seed).unwrap();
        let chi: Vec<bool> = [2.0, 4.0]
            .iter()
            .map(|&t| chi_square_tail_check(8, t, 100_000, seed).unwrap().pass)
            .collect();
        let ok = structural.is_empty()
            && gauss.pass
            && relu.pass
            && l1.pass
            && l2.pass
            && chi.iter().all(|&p| p);
        (
            ok,
            format!(
                "structure failures {structural:?}, gaussian {:.3}, relu {:.3}, softmax-l1 [{:.3}, {:.3}], softmax-l2 {:.3}, chi2 {chi:?}",
                gauss.max_distortion, relu.max_distortion, l1.min_ratio, l1.max_ratio, l2.max_distortion
            ),
        )
    });
}

#[test]
fn union_sparsity_monotone() {
    criterion("union_sparsity_monotone", Duration::from_secs(20), || {
        let w = planted_model();
        let recs = records(&w, 16, 8, 8, neuron_threshold(0.1), Seed(1300));
        let mut ok = true;
        let mut lines = Vec::new();
        for layer in 0..w.config.n_layers {
            let stats: Vec<_> = [1, 2, 4, 8, 16]
                .iter()
                .map(|&b| union_stats(&recs[..b], layer, UnitKind::Neurons).unwrap())
                .collect();
            ok &= stats
                .windows(2)
                .all(|p| p[1].unused_fraction <= p[0].unused_fraction);
            ok &= stats[3].union_size < stats[3].sum_sizes;
            let fr: Vec<String> = stats
                .iter()
                .map(|s| format!("{:.3}", s.unused_fraction))
                .collect();
            lines.push(format!(
                "L{layer} unused [{}] |∪|={} Σ={}",
                fr.join(", "),
                stats[3].union_size,
                stats[3].sum_sizes
            ));
        }
        (ok, lines.join("; "))
    });
}

#[test]
fn depth_transform_oracles() {
    criterion("depth_transform_oracles", Duration::from_secs(10), || {
        let w = toy_model(4, 14);
        let prompt = random_prompt(256, 8, Seed(14));
        let same = |a: &dejavu_core::model::Generation, b: &dejavu_core::model::Generation| {
            a.tokens == b.tokens
                && a.steps
                    .iter()
                    .zip(&b.steps)
                    .all(|(x, y)| bits(&x.logits) == bits(&y.logits))
        };
        let skip = same(
            &generate_transformed(&w, &prompt, 8, DepthTransform::SkipEvery(2)).unwrap(),
            &generate_dense(&skip_oracle_weights(&w, 2).unwrap(), &prompt, 8).unwrap(),
        );
        let mut no_mlp = w.clone();
        no_mlp.blocks.iter_mut().for_each(|b| b.zero_mlp());
        let parallel = same(
            &generate_transformed(&no_mlp, &prompt, 8, DepthTransform::Parallel2).unwrap(),
            &generate_dense(&no_mlp, &prompt, 8).unwrap(),
        );
        let report: Vec<_> = [DepthTransform::Parallel2, DepthTransform::Parallel4]
            .into_iter()
            .flat_map(|t| deviation_report(&w, &prompt, 8, t).unwrap())
            .collect();
        let generated = !report.is_empty()
            && report
                .iter()
                .all(|r| r.rel_deviation.is_finite() && r.cosine.is_finite());
        let last = report.last().map_or(f64::NAN, |r| r.rel_deviation);
        (
            skip && parallel && generated,
            format!("skip oracle bitwise: {skip}, parallel2 with zero MLP bitwise: {parallel}, {} deviation rows (parallel4 final {last:.3e})", report.len()),
        )
    });
}
