use std::fs;
use std::path::{Path, PathBuf};

use dejavu_core::depth::{
    deviation_report, generate_transformed, skip_oracle_weights, DepthTransform,
    DEVIATION_CSV_HEADER,
};
use dejavu_core::format::{decode_records, decode_weights, encode_records, encode_weights};
use dejavu_core::lookahead::{generate, ExecMode, RunOptions};
use dejavu_core::model::{
    generate_dense, random_prompt, ModelConfig, PlantedSpec, TransformerWeights,
};
use dejavu_core::nns::{bench_lsh, LshConfig, MaxIpParams, NNS_CSV_HEADER};
use dejavu_core::oracle::{record_sparsity, union_stats, SparsityRecord, UNION_CSV_HEADER};
use dejavu_core::predictor::{
    build_training_set, decode_predictor, encode_predictor, train_bank, FullBudget, InputSource,
    PredictorBank, SetPredictor, TrainConfig, TrainingSet,
};
use dejavu_core::sketch::{
    check_structure, chi_square_tail_check, make_sketch, relu_dims, relu_norm_check,
    residual_two_sides_check, softmax_norm_check, softmax_rows, subspace_embed_check, BlockKind,
    SketchKind, SketchReport, SoftmaxVariant, SubspaceSpec, SKETCH_CSV_HEADER,
};
use dejavu_core::sparse::bench::{bench_mlp, random_subset, BENCH_CSV_HEADER};
use dejavu_core::sparse::kernels::{measure_row_kernels, IO_CSV_HEADER};
use dejavu_core::sparse::{BudgetKind, SparsityBudget, UnitKind};
use dejavu_core::tensor::{streams, Seed, StorageOrder};
use serde_json::{json, Map, Value};

use crate::args::{
    BenchArgs, DepthArgs, GenModelArgs, ModeArg, NnsArgs, RecordArgs, RunArgs, SketchArgs,
    SketchCheckKind, SourceArg, TrainArgs,
};
use crate::report::{ensure_dir, summary_path, write_csv, write_summary, write_text, InputsHash};
use crate::{CliError, CliResult};

fn metrics(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Map<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn load_model(path: &Path, hash: &mut InputsHash) -> CliResult<TransformerWeights> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    hash.add(&bytes);
    Ok(decode_weights(&bytes)?)
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no .{ext} files in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn gen_model(a: &GenModelArgs) -> CliResult<()> {
    let hash = InputsHash::new("gen-model", a);
    let cfg = ModelConfig::new(a.d_model, a.heads, a.layers, a.vocab, a.max_seq)?;
    let seed = Seed(a.seed);
    let w = if a.planted {
        TransformerWeights::planted(cfg, PlantedSpec::default(), seed)?
    } else {
        TransformerWeights::random(cfg, seed)?
    };
    fs::write(&a.out, encode_weights(&w))?;
    let m = metrics([
        ("fingerprint", json!(format!("{:016x}", w.fingerprint()))),
        ("d_model", json!(cfg.d_model)),
        ("n_heads", json!(cfg.n_heads)),
        ("n_layers", json!(cfg.n_layers)),
        ("d_ff", json!(cfg.d_ff)),
        ("vocab", json!(cfg.vocab)),
        ("planted", json!(a.planted)),
    ]);
    write_summary(&a.out.with_extension("json"), "gen-model", &hash, a.seed, m)
}

pub fn record(a: &RecordArgs) -> CliResult<()> {
    let mut hash = InputsHash::new("record", a);
    let w = load_model(&a.model, &mut hash)?;
    let cfg = w.config;
    let mlp = SparsityBudget::threshold(a.threshold, UnitKind::Neurons)?;
    let attn = SparsityBudget::top_k(a.topk_heads.unwrap_or(cfg.n_heads), UnitKind::Heads)?;
    ensure_dir(&a.out)?;
    let mut records = Vec::with_capacity(a.prompts);
    for i in 0..a.prompts {
        let prompt = random_prompt(cfg.vocab, a.prompt_len, Seed(a.seed).derive(i as u64));
        let rec = record_sparsity(&w, &prompt, a.steps, mlp, attn)?;
        fs::write(
            a.out.join(format!("record_{i:03}.djvs")),
            encode_records(&rec)?,
        )?;
        records.push(rec);
    }
    let mut rows = Vec::new();
    let mut batch = 1;
    while batch <= records.len() {
        for layer in 0..cfg.n_layers {
            for kind in [UnitKind::Neurons, UnitKind::Heads] {
                rows.push(union_stats(&records[..batch], layer, kind)?.csv_row());
            }
        }
        batch *= 2;
    }
    write_csv(&a.out.join("union.csv"), UNION_CSV_HEADER, rows)?;
    let density = |kind| {
        let (sum, n) = records
            .iter()
            .flat_map(|r| &r.entries)
            .fold((0.0, 0usize), |(s, n), e| {
                (s + e.active(kind).density(), n + 1)
            });
        sum / n.max(1) as f64
    };
    let m = metrics([
        ("records", json!(records.len())),
        ("mean_neuron_density", json!(density(UnitKind::Neurons))),
        ("mean_head_density", json!(density(UnitKind::Heads))),
    ]);
    write_summary(&summary_path(&a.out, "record"), "record", &hash, a.seed, m)
}

fn load_records(
    dir: &Path,
    w: &TransformerWeights,
    hash: &mut InputsHash,
) -> CliResult<Vec<SparsityRecord>> {
    let mut out = Vec::new();
    for p in files_with_ext(dir, "djvs")? {
        let bytes = fs::read(&p)?;
        hash.add(&bytes);
        let rec =
            decode_records(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        rec.check_model(w)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn train_predictor(a: &TrainArgs) -> CliResult<()> {
    let mut hash = InputsHash::new("train-predictor", a);
    let w = load_model(&a.model, &mut hash)?;
    let cfg = w.config;
    let records = load_records(&a.records, &w, &mut hash)?;
    let source = match a.source {
        SourceArg::Sequential => InputSource::Sequential,
        SourceArg::Lookahead => InputSource::Lookahead,
        SourceArg::Concurrent => InputSource::Concurrent,
    };
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut min_recall = f64::INFINITY;
    for (kind, threshold, k) in [
        (
            UnitKind::Heads,
            a.head_threshold,
            a.topk_heads.unwrap_or((cfg.n_heads / 2).max(1)),
        ),
        (
            UnitKind::Neurons,
            a.threshold,
            a.topk_neurons.unwrap_or((cfg.d_ff / 4).max(1)),
        ),
    ] {
        let sets = (0..cfg.n_layers)
            .map(|l| build_training_set(&records, l, kind, threshold, source))
            .collect::<dejavu_core::Result<Vec<TrainingSet>>>()?;
        let tc = TrainConfig {
            epochs: a.epochs,
            seed: Seed(a.seed),
            ..TrainConfig::new(cfg.d_model, BudgetKind::TopK(k))
        };
        let outcomes = train_bank(&sets, &tc)?;
        for (ts, o) in sets.iter().zip(&outcomes) {
            let stem = format!("L{}_{}", ts.layer, kind);
            fs::write(
                a.out.join(format!("{stem}.djvp")),
                encode_predictor(&o.weights),
            )?;
            write_text(&a.out.join(format!("{stem}_log.csv")), &o.log_csv())?;
            let recall = o.log.last().map_or(0.0, |e| e.recall);
            min_recall = min_recall.min(recall);
            rows.push(format!(
                "{},{},{},{:.9},{:.9},{:.6}",
                ts.layer,
                kind,
                ts.len(),
                o.initial_loss,
                o.final_loss,
                recall
            ));
        }
    }
    write_csv(
        &a.out.join("predictors.csv"),
        "layer,kind,examples,initial_loss,final_loss,train_recall",
        rows,
    )?;
    let m = metrics([
        ("predictors", json!(2 * cfg.n_layers)),
        ("records", json!(records.len())),
        ("min_train_recall", json!(min_recall)),
        ("source", json!(source.as_str())),
    ]);
    write_summary(
        &summary_path(&a.out, "train-predictor"),
        "train-predictor",
        &hash,
        a.seed,
        m,
    )
}

fn load_bank(
    dir: &Path,
    w: &TransformerWeights,
    attn: BudgetKind,
    mlp: BudgetKind,
    hash: &mut InputsHash,
) -> CliResult<PredictorBank> {
    let mut bank = PredictorBank::new(w.config.n_layers, attn, mlp);
    for p in files_with_ext(dir, "djvp")? {
        let bytes = fs::read(&p)?;
        hash.add(&bytes);
        bank.insert(
            decode_predictor(&bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        )?;
    }
    bank.check(w)?;
    Ok(bank)
}

pub fn run(a: &RunArgs) -> CliResult<()> {
    let mut hash = InputsHash::new("run", a);
    let w = load_model(&a.model, &mut hash)?;
    let cfg = w.config;
    let mode = match a.mode {
        ModeArg::Dense => ExecMode::Dense,
        ModeArg::SparseSeq => ExecMode::SparseSequential,
        ModeArg::Lookahead => ExecMode::SparseLookahead,
    };
    let full = FullBudget::for_model(&cfg);
    let bank = match &a.predictors {
        Some(dir) => {
            let attn = BudgetKind::TopK(a.topk_heads.unwrap_or(cfg.n_heads));
            let mlp = match a.threshold {
                Some(t) => BudgetKind::Threshold(t),
                None => BudgetKind::TopK(a.topk_neurons.unwrap_or(cfg.d_ff)),
            };
            Some(load_bank(dir, &w, attn, mlp, &mut hash)?)
        }
        None if a.topk_heads.is_some() || a.topk_neurons.is_some() || a.threshold.is_some() => {
            return Err(CliError::Usage(
                "--topk-heads, --topk-neurons and --threshold need --predictors".into(),
            ));
        }
        None => None,
    };
    let predictor: &dyn SetPredictor = match &bank {
        Some(b) => b,
        None => &full,
    };
    let prompt = random_prompt(cfg.vocab, a.prompt_len, Seed(a.seed));
    let opts = RunOptions {
        workers: a.workers,
        ..RunOptions::default()
    };
    let out = generate(&w, &prompt, a.steps, mode, Some(predictor), &opts)?;
    ensure_dir(&a.out)?;
    let tokens: Vec<String> = out.generation.tokens.iter().map(u32::to_string).collect();
    write_text(&a.out.join("tokens.txt"), &(tokens.join(" ") + "\n"))?;
    let trace = if a.timing {
        out.trace.clone()
    } else {
        out.trace.without_timing()
    };
    write_text(&a.out.join("trace.csv"), &trace.to_csv())?;
    let density = |f: fn(&dejavu_core::lookahead::LayerRecord) -> f64| {
        let n = out.trace.layers.len().max(1) as f64;
        out.trace.layers.iter().map(f).sum::<f64>() / n
    };
    let m = metrics([
        ("mode", json!(mode.as_str())),
        ("prompt_len", json!(prompt.len())),
        ("generated", json!(out.generation.generated(&prompt))),
        (
            "mean_head_density",
            json!(density(|r| r.attn_set.density())),
        ),
        (
            "mean_neuron_density",
            json!(density(|r| r.mlp_set.density())),
        ),
    ]);
    write_summary(&summary_path(&a.out, "run"), "run", &hash, a.seed, m)
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let hash = InputsHash::new("bench", a);
    let mut densities = a.density.clone();
    densities.sort_by(f64::total_cmp);
    let rows = bench_mlp(a.d_model, a.d_ff, &densities, a.trials, Seed(a.seed))?;
    ensure_dir(&a.out)?;
    write_csv(
        &a.out.join("bench.csv"),
        BENCH_CSV_HEADER,
        rows.iter().map(|r| r.csv_row()),
    )?;

    // fused vs naive gather on the row-contiguous d_ff × d first layer
    let mut rng = Seed(a.seed).derive(streams::BENCH).derive(2).rng();
    let w1t = dejavu_core::tensor::Matrix::gaussian(
        a.d_ff,
        a.d_model,
        1.0,
        StorageOrder::RowContiguous,
        &mut rng,
    );
    let x = vec![1.0f32; a.d_model];
    let mut io_rows = Vec::new();
    let mut ratios = Vec::new();
    for &p in &densities {
        let idx = random_subset(a.d_ff, p, &mut rng)?;
        let [fused, naive] = measure_row_kernels(&w1t, &idx, &x)?;
        let total = |r: &dejavu_core::sparse::IoRecord| (r.float_reads + r.float_writes) as f64;
        ratios.push(
            json!({"density": p, "naive_over_fused": total(&naive) / total(&fused).max(1.0)}),
        );
        io_rows.push(fused.csv_row());
        io_rows.push(naive.csv_row());
    }
    write_csv(&a.out.join("io.csv"), IO_CSV_HEADER, io_rows)?;

    let sparse: Vec<_> = rows.iter().filter(|r| r.scenario == "sparse").collect();
    let monotone = sparse.windows(2).all(|w| w[0].io_floats <= w[1].io_floats);
    let m = metrics([
        ("d_model", json!(a.d_model)),
        ("d_ff", json!(a.d_ff)),
        ("runs", json!(a.trials)),
        (
            "speedup",
            json!(sparse
                .iter()
                .map(|r| json!({"density": r.density, "speedup": r.speedup}))
                .collect::<Vec<_>>()),
        ),
        ("io_ratio", json!(ratios)),
        ("io_monotone", json!(monotone)),
    ]);
    write_summary(&summary_path(&a.out, "bench"), "bench", &hash, a.seed, m)?;
    if !monotone {
        return Err(CliError::Assertion(
            "fused IO counts are not monotone in density".into(),
        ));
    }
    Ok(())
}

pub fn nns(a: &NnsArgs) -> CliResult<()> {
    let hash = InputsHash::new("nns", a);
    let params = MaxIpParams::new(a.c, a.tau)?;
    let lsh = LshConfig {
        tables: a.tables,
        bits: a.bits,
        probes: a.probes,
    };
    let row = bench_lsh(a.n, a.d, a.trials, lsh, params, Seed(a.seed))?;
    ensure_dir(&a.out)?;
    write_csv(&a.out.join("nns.csv"), NNS_CSV_HEADER, [row.csv_row()])?;
    let m = metrics([
        ("qualifying", json!(row.success.qualifying)),
        ("successes", json!(row.success.successes)),
        ("success_rate", json!(row.success.rate)),
        ("avg_query_nanos", json!(row.avg_query_nanos)),
        ("brute_nanos", json!(row.brute_nanos)),
    ]);
    write_summary(&summary_path(&a.out, "nns"), "nns", &hash, a.seed, m)?;
    if row.success.rate < a.min_success {
        return Err(CliError::Assertion(format!(
            "MaxIP success {:.4} below {}",
            row.success.rate, a.min_success
        )));
    }
    Ok(())
}

const EMBED_D: usize = 256;
const EMBED_K: usize = 4;
const EMBED_EPS: f64 = 0.5;
const EMBED_DELTA: f64 = 0.01;

fn sketch_one(kind: SketchCheckKind, trials: usize, seed: Seed) -> CliResult<Vec<SketchReport>> {
    let embed = |sk: SketchKind| -> CliResult<Vec<SketchReport>> {
        let structural = make_sketch(sk, 64, EMBED_D, seed)?;
        let spec = SubspaceSpec::random(EMBED_D, EMBED_K, seed)?;
        let mut r = subspace_embed_check(sk, &spec, EMBED_EPS, EMBED_DELTA, trials, seed)?;
        r.pass &= check_structure(sk, &structural);
        Ok(vec![r])
    };
    Ok(match kind {
        SketchCheckKind::Gaussian => embed(SketchKind::Gaussian)?,
        SketchCheckKind::Ams => embed(SketchKind::Ams)?,
        SketchCheckKind::Countsketch => embed(SketchKind::CountSketch)?,
        SketchCheckKind::Sparse => embed(SketchKind::SparseEmbedding(4))?,
        SketchCheckKind::Sampling => embed(SketchKind::UniformSampling)?,
        SketchCheckKind::Srht => embed(SketchKind::Srht)?,
        SketchCheckKind::Relu => {
            let (s, d) = relu_dims(2, 0.5);
            vec![relu_norm_check(d, s, 2, 0.5, trials, seed)?]
        }
        SketchCheckKind::SoftmaxL1 | SketchCheckKind::SoftmaxL2 => {
            let variant = if kind == SketchCheckKind::SoftmaxL1 {
                SoftmaxVariant::L1
            } else {
                SoftmaxVariant::L2
            };
            let s = 8;
            vec![softmax_norm_check(
                softmax_rows(s, 0.5, 0.01),
                s,
                2,
                0.5,
                0.5,
                trials,
                variant,
                seed,
            )?]
        }
        SketchCheckKind::ResidualMlp => vec![residual_two_sides_check(
            BlockKind::Mlp,
            2,
            0.5,
            0.5,
            trials,
            seed,
        )?],
        SketchCheckKind::ResidualAttention => {
            vec![residual_two_sides_check(
                BlockKind::Attention,
                2,
                0.5,
                0.5,
                trials,
                seed,
            )?]
        }
        SketchCheckKind::Chi2 => [2.0, 4.0]
            .into_iter()
            .map(|t| {
                let r = chi_square_tail_check(8, t, 100_000, seed)?;
                Ok(SketchReport {
                    kind: format!("chi2-t{t}"),
                    b: 0,
                    n: r.samples,
                    k: r.k,
                    eps: t,
                    trials: r.samples,
                    min_ratio: r.empirical / r.bound,
                    max_ratio: r.empirical / r.bound,
                    max_distortion: r.empirical / r.bound,
                    pass: r.pass,
                })
            })
            .collect::<dejavu_core::Result<Vec<_>>>()?,
    })
}

pub fn sketch_check(a: &SketchArgs) -> CliResult<()> {
    let hash = InputsHash::new("sketch-check", a);
    let mut reports = Vec::new();
    for &kind in &a.kind {
        reports.extend(sketch_one(kind, a.trials, Seed(a.seed))?);
    }
    ensure_dir(&a.out)?;
    write_csv(
        &a.out.join("sketch.csv"),
        SKETCH_CSV_HEADER,
        reports.iter().map(SketchReport::csv_row),
    )?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.kind.as_str())
        .collect();
    let m = metrics([
        (
            "checks",
            json!(reports
                .iter()
                .map(
                    |r| json!({"kind": r.kind, "max_distortion": r.max_distortion, "pass": r.pass})
                )
                .collect::<Vec<_>>()),
        ),
        ("all_pass", json!(failed.is_empty())),
    ]);
    write_summary(
        &summary_path(&a.out, "sketch-check"),
        "sketch-check",
        &hash,
        a.seed,
        m,
    )?;
    if !failed.is_empty() {
        return Err(CliError::Assertion(format!(
            "sketch checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn depth(a: &DepthArgs) -> CliResult<()> {
    let mut hash = InputsHash::new("depth", a);
    let w = load_model(&a.model, &mut hash)?;
    let transform: DepthTransform = a.transform.parse()?;
    transform.stages(w.config.n_layers)?;
    let prompt = random_prompt(w.config.vocab, a.prompt_len, Seed(a.seed));
    let rows = deviation_report(&w, &prompt, a.steps, transform)?;
    ensure_dir(&a.out)?;
    write_csv(
        &a.out.join("deviation.csv"),
        DEVIATION_CSV_HEADER,
        rows.iter().map(|r| r.csv_row()),
    )?;
    let transformed = generate_transformed(&w, &prompt, a.steps, transform)?;
    let oracle_ok = match transform {
        DepthTransform::SkipEvery(n) => {
            let oracle = generate_dense(&skip_oracle_weights(&w, n)?, &prompt, a.steps)?;
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            Some(
                oracle.tokens == transformed.tokens
                    && oracle
                        .steps
                        .iter()
                        .zip(&transformed.steps)
                        .all(|(o, t)| bits(&o.logits) == bits(&t.logits)),
            )
        }
        _ => None,
    };
    let dense = generate_dense(&w, &prompt, a.steps)?;
    let agree = dense
        .generated(&prompt)
        .iter()
        .zip(transformed.generated(&prompt))
        .filter(|(x, y)| x == y)
        .count();
    let m = metrics([
        ("transform", json!(transform.to_string())),
        ("stages", json!(rows.len())),
        (
            "final_rel_deviation",
            json!(rows.last().map(|r| r.rel_deviation)),
        ),
        (
            "token_agreement",
            json!(agree as f64 / a.steps.max(1) as f64),
        ),
        ("skip_oracle_bitwise", json!(oracle_ok)),
    ]);
    write_summary(&summary_path(&a.out, "depth"), "depth", &hash, a.seed, m)?;
    if oracle_ok == Some(false) {
        return Err(CliError::Assertion(
            "skip transform differs from the zeroed-layer oracle".into(),
        ));
    }
    Ok(())
}
