//! Dense, sequential-sparse and lookahead execution.
//!
//! Sequential sparse execution predicts each block's sets from that block's
//! own inputs: `S_A^l` from `y_l`, then `S_M^l` from `ỹ_l`. Lookahead
//! execution predicts the sets of block `l+1` from `y_l` while block `l`
//! computes, so prediction leaves the critical path. Layer 0 has no
//! predecessor and is predicted sequentially.
//!
//! Predictor tasks only read a snapshot of `y`; block compute owns the KV
//! cache. The single synchronization point is the join before the next block
//! starts, so results do not depend on the number of workers.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{
    dense_step, drive, Decoder, Generation, LayerTrace, StepTrace, TransformerWeights,
};
use crate::predictor::{SetPredictor, SetQuery};
use crate::sparse::{IndexSet, PendingPolicy, UnitKind};
use crate::tensor::add;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Dense,
    SparseSequential,
    SparseLookahead,
}

impl ExecMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::Dense => "dense",
            ExecMode::SparseSequential => "sparse-seq",
            ExecMode::SparseLookahead => "lookahead",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ExecMode::Dense),
            "sparse-seq" => Ok(ExecMode::SparseSequential),
            "lookahead" => Ok(ExecMode::SparseLookahead),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Input of the lookahead MLP predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MlpLookahead {
    /// `S_M^{l+1}` from `y_l`, alongside `S_A^{l+1}`.
    #[default]
    PreviousBlock,
    /// `S_M^{l}` from `y_l`, concurrently with block `l`'s attention.
    SameBlock,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub workers: usize,
    pub policy: PendingPolicy,
    pub mlp_lookahead: MlpLookahead,
    /// Added to every predictor call; fault injection for latency studies.
    pub predictor_delay: Option<Duration>,
    /// Re-runs the lookahead dataflow inline and errors on any difference.
    pub self_check: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            policy: PendingPolicy::Lazy,
            mlp_lookahead: MlpLookahead::PreviousBlock,
            predictor_delay: None,
            self_check: false,
        }
    }
}

/// The residual-stream vector a set was predicted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// No prediction; the full set was used.
    Dense,
    /// `y_l`
    Input(usize),
    /// `ỹ_l`
    Mid(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Dense => f.write_str("dense"),
            Provenance::Input(l) => write!(f, "y{l}"),
            Provenance::Mid(l) => write!(f, "ymid{l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub position: usize,
    pub layer: usize,
    pub attn_set: IndexSet,
    pub mlp_set: IndexSet,
    pub attn_input: Provenance,
    pub mlp_input: Provenance,
    /// Longest predictor span for this layer's sets.
    pub pred_nanos: u64,
    /// Compute span the prediction overlapped with, or this block's compute
    /// when prediction was sequential.
    pub block_nanos: u64,
    /// Whether block compute had to wait for the predictor.
    pub critical_path: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineTrace {
    pub mode: ExecMode,
    pub layers: Vec<LayerRecord>,
}

pub const TRACE_CSV_HEADER: &str =
    "step,layer,mode,set_kind,set_size,pred_nanos,block_nanos,critical_path";

impl PipelineTrace {
    /// Copy with timing fields cleared, for determinism comparisons.
    pub fn without_timing(&self) -> PipelineTrace {
        PipelineTrace {
            mode: self.mode,
            layers: self
                .layers
                .iter()
                .map(|r| LayerRecord {
                    pred_nanos: 0,
                    block_nanos: 0,
                    critical_path: false,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn record(&self, position: usize, layer: usize) -> Option<&LayerRecord> {
        self.layers
            .iter()
            .find(|r| r.position == position && r.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.layers {
            for (kind, set) in [
                (UnitKind::Heads, &r.attn_set),
                (UnitKind::Neurons, &r.mlp_set),
            ] {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.position,
                    r.layer,
                    self.mode,
                    kind,
                    set.len(),
                    r.pred_nanos,
                    r.block_nanos,
                    r.critical_path
                ));
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub generation: Generation,
    pub trace: PipelineTrace,
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u128::from(u64::MAX)) as u64
}

/// Predictor wrapper that sleeps before each call.
struct Delayed<'p> {
    inner: &'p dyn SetPredictor,
    delay: Duration,
}

impl SetPredictor for Delayed<'_> {
    fn predict_set(&self, q: &SetQuery<'_>) -> Result<IndexSet> {
        std::thread::sleep(self.delay);
        self.inner.predict_set(q)
    }

    fn check(&self, weights: &TransformerWeights) -> Result<()> {
        self.inner.check(weights)
    }
}

fn timed_predict(p: &dyn SetPredictor, q: &SetQuery<'_>) -> (Result<IndexSet>, u64) {
    let t = Instant::now();
    let r = p.predict_set(q);
    (r, nanos(t.elapsed()))
}

fn check_set(set: &IndexSet, universe: usize, layer: usize, kind: UnitKind) -> Result<()> {
    if set.universe() != universe {
        return Err(Error::Invalid(format!(
            "predictor returned a {kind} set over {} units at layer {layer}, expected {universe}",
            set.universe()
        )));
    }
    Ok(())
}

/// Dispatches on `mode`. Sparse modes require a predictor.
pub fn generate(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    mode: ExecMode,
    predictor: Option<&dyn SetPredictor>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    match mode {
        ExecMode::Dense => run_dense(weights, prompt, steps),
        ExecMode::SparseSequential | ExecMode::SparseLookahead => {
            let p = predictor.ok_or(Error::MissingPredictor {
                layer: 0,
                kind: "any",
            })?;
            if mode == ExecMode::SparseSequential {
                run_sequential_sparse(weights, p, prompt, steps, opts)
            } else {
                run_lookahead(weights, p, prompt, steps, opts)
            }
        }
    }
}

pub fn run_dense(weights: &TransformerWeights, prompt: &[u32], steps: usize) -> Result<RunOutput> {
    let cfg = &weights.config;
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    let mut layers = Vec::new();
    let generation = drive(weights, prompt, steps, |position, token| {
        let t = Instant::now();
        let s = dense_step(&mut decoder, position, token)?;
        let per_layer = nanos(t.elapsed()) / cfg.n_layers as u64;
        layers.extend((0..cfg.n_layers).map(|layer| LayerRecord {
            position,
            layer,
            attn_set: IndexSet::full(cfg.n_heads),
            mlp_set: IndexSet::full(cfg.d_ff),
            attn_input: Provenance::Dense,
            mlp_input: Provenance::Dense,
            pred_nanos: 0,
            block_nanos: per_layer,
            critical_path: false,
        }));
        Ok(s)
    })?;
    Ok(RunOutput {
        generation,
        trace: PipelineTrace {
            mode: ExecMode::Dense,
            layers,
        },
    })
}

/// `S_A^l` from `y_l`, attention, `S_M^l` from `ỹ_l`, MLP; strictly in order.
pub fn run_sequential_sparse(
    weights: &TransformerWeights,
    predictor: &dyn SetPredictor,
    prompt: &[u32],
    steps: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    predictor.check(weights)?;
    let delayed;
    let predictor = match opts.predictor_delay {
        Some(delay) => {
            delayed = Delayed {
                inner: predictor,
                delay,
            };
            &delayed as &dyn SetPredictor
        }
        None => predictor,
    };
    let cfg = &weights.config;
    let mut decoder = Decoder::new(weights, opts.policy);
    let mut records = Vec::new();
    let generation = drive(weights, prompt, steps, |position, token| {
        let mut y = weights.embed(token)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let (s_a, pa) = timed_predict(
                predictor,
                &SetQuery::new(position, layer, UnitKind::Heads, &y),
            );
            let s_a = s_a?;
            check_set(&s_a, cfg.n_heads, layer, UnitKind::Heads)?;
            let t = Instant::now();
            let mid = add(&y, &decoder.sparse_attention(layer, &y, &s_a)?);
            let attn_nanos = nanos(t.elapsed());
            let (s_m, pm) = timed_predict(
                predictor,
                &SetQuery::new(position, layer, UnitKind::Neurons, &mid),
            );
            let s_m = s_m?;
            check_set(&s_m, cfg.d_ff, layer, UnitKind::Neurons)?;
            let t = Instant::now();
            let out = add(&mid, &decoder.sparse_mlp(layer, &mid, &s_m)?);
            records.push(LayerRecord {
                position,
                layer,
                attn_set: s_a.clone(),
                mlp_set: s_m.clone(),
                attn_input: Provenance::Input(layer),
                mlp_input: Provenance::Mid(layer),
                pred_nanos: pa + pm,
                block_nanos: attn_nanos + nanos(t.elapsed()),
                critical_path: true,
            });
            layers.push(LayerTrace {
                input: y,
                mid,
                output: out.clone(),
                attn_set: Some(s_a),
                mlp_set: Some(s_m),
            });
            y = out;
        }
        Ok(StepTrace {
            position,
            token,
            logits: decoder.logits(&y)?,
            layers,
        })
    })?;
    Ok(RunOutput {
        generation,
        trace: PipelineTrace {
            mode: ExecMode::SparseSequential,
            layers: records,
        },
    })
}

/// Slot written by one predictor task.
type Slot = OnceLock<(Result<IndexSet>, u64)>;

fn take(slot: Slot, what: &str) -> Result<(IndexSet, u64)> {
    let (r, n) = slot
        .into_inner()
        .ok_or_else(|| Error::Pool(format!("{what} predictor task did not complete")))?;
    Ok((r?, n))
}

/// Runs `tasks` concurrently with `body` on the pool, or inline before it.
fn overlap<R: Send>(
    pool: Option<&rayon::ThreadPool>,
    tasks: &[(&Slot, SetQuery<'_>)],
    predictor: &dyn SetPredictor,
    body: impl FnOnce() -> R + Send,
) -> R {
    match pool {
        Some(pool) => pool.scope(|s| {
            for (slot, q) in tasks {
                s.spawn(move |_| {
                    let _ = slot.set(timed_predict(predictor, q));
                });
            }
            body()
        }),
        None => {
            for (slot, q) in tasks {
                let _ = slot.set(timed_predict(predictor, q));
            }
            body()
        }
    }
}

struct Pending {
    attn: (IndexSet, u64),
    mlp: Option<(IndexSet, u64)>,
    overlapped: u64,
}

fn lookahead_dataflow(
    weights: &TransformerWeights,
    predictor: &dyn SetPredictor,
    prompt: &[u32],
    steps: usize,
    opts: &RunOptions,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RunOutput> {
    let cfg = &weights.config;
    let same_block = opts.mlp_lookahead == MlpLookahead::SameBlock;
    let mut decoder = Decoder::new(weights, opts.policy);
    let mut records = Vec::new();
    let generation = drive(weights, prompt, steps, |position, token| {
        let mut y = weights.embed(token)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut next: Option<Pending> = None;
        for layer in 0..cfg.n_layers {
            let last = layer + 1 == cfg.n_layers;
            // sets of this block: bootstrap at layer 0, otherwise joined from the previous block
            let (attn, attn_input, boot_nanos) = match next.as_ref() {
                Some(p) => (p.attn.clone(), Provenance::Input(layer - 1), None),
                None => {
                    let (r, n) = timed_predict(
                        predictor,
                        &SetQuery::new(position, layer, UnitKind::Heads, &y),
                    );
                    (r.map(|s| (s, n))?, Provenance::Input(layer), Some(n))
                }
            };
            check_set(&attn.0, cfg.n_heads, layer, UnitKind::Heads)?;

            let snapshot = y.clone();
            let next_attn = Slot::new();
            let next_mlp = Slot::new();
            let this_mlp = Slot::new();
            let mut tasks = Vec::new();
            if !last {
                tasks.push((
                    &next_attn,
                    SetQuery::new(position, layer + 1, UnitKind::Heads, &snapshot),
                ));
                if !same_block {
                    tasks.push((
                        &next_mlp,
                        SetQuery::new(position, layer + 1, UnitKind::Neurons, &snapshot),
                    ));
                }
            }
            if same_block && layer > 0 {
                tasks.push((
                    &this_mlp,
                    SetQuery::new(position, layer, UnitKind::Neurons, &snapshot),
                ));
            }

            let dec = &mut decoder;
            let s_a = &attn.0;
            let y_ref = &y;
            // timed inside the body so the span excludes waiting at the join
            let (attn_out, attn_nanos) = overlap(pool, &tasks, predictor, move || {
                let t = Instant::now();
                let r = dec.sparse_attention(layer, y_ref, s_a);
                (r, nanos(t.elapsed()))
            });
            let mid = add(&y, &attn_out?);

            let (mlp, mlp_input, mlp_pred) = if same_block && layer > 0 {
                let (s, n) = take(this_mlp, "mlp")?;
                (s, Provenance::Input(layer), n)
            } else if let Some(Pending { mlp: Some(m), .. }) = next.as_ref() {
                (m.0.clone(), Provenance::Input(layer - 1), m.1)
            } else {
                let (r, n) = timed_predict(
                    predictor,
                    &SetQuery::new(position, layer, UnitKind::Neurons, &mid),
                );
                (r?, Provenance::Mid(layer), n)
            };
            check_set(&mlp, cfg.d_ff, layer, UnitKind::Neurons)?;
            let t = Instant::now();
            let out = add(&mid, &decoder.sparse_mlp(layer, &mid, &mlp)?);
            let block_nanos = attn_nanos + nanos(t.elapsed());

            let pred_nanos = match boot_nanos {
                Some(n) => n + mlp_pred,
                None => attn.1.max(mlp_pred),
            };
            let (overlapped, critical_path) = match (&next, boot_nanos) {
                (Some(p), None) => (p.overlapped, pred_nanos > p.overlapped),
                _ => (block_nanos, true),
            };
            records.push(LayerRecord {
                position,
                layer,
                attn_set: attn.0.clone(),
                mlp_set: mlp.clone(),
                attn_input,
                mlp_input,
                pred_nanos,
                block_nanos: overlapped,
                critical_path,
            });
            layers.push(LayerTrace {
                input: y,
                mid,
                output: out.clone(),
                attn_set: Some(attn.0),
                mlp_set: Some(mlp),
            });
            y = out;
            next = if last {
                None
            } else {
                Some(Pending {
                    attn: take(next_attn, "attention")?,
                    mlp: if same_block {
                        None
                    } else {
                        Some(take(next_mlp, "mlp")?)
                    },
                    overlapped: block_nanos,
                })
            };
        }
        Ok(StepTrace {
            position,
            token,
            logits: decoder.logits(&y)?,
            layers,
        })
    })?;
    Ok(RunOutput {
        generation,
        trace: PipelineTrace {
            mode: ExecMode::SparseLookahead,
            layers: records,
        },
    })
}

/// Lookahead execution on a pool of `opts.workers` threads.
pub fn run_lookahead(
    weights: &TransformerWeights,
    predictor: &dyn SetPredictor,
    prompt: &[u32],
    steps: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    if opts.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    predictor.check(weights)?;
    let delayed;
    let predictor = match opts.predictor_delay {
        Some(delay) => {
            delayed = Delayed {
                inner: predictor,
                delay,
            };
            &delayed as &dyn SetPredictor
        }
        None => predictor,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Pool(e.to_string()))?;
    let out = lookahead_dataflow(weights, predictor, prompt, steps, opts, Some(&pool))?;
    if opts.self_check {
        let reference = lookahead_dataflow(weights, predictor, prompt, steps, opts, None)?;
        if reference.generation != out.generation
            || reference.trace.without_timing() != out.trace.without_timing()
        {
            return Err(Error::Nondeterminism(
                "pooled lookahead run differs from the inline reference".into(),
            ));
        }
    }
    Ok(out)
}

/// The lookahead dataflow executed inline on the calling thread.
pub fn reference_lookahead(
    weights: &TransformerWeights,
    predictor: &dyn SetPredictor,
    prompt: &[u32],
    steps: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    predictor.check(weights)?;
    lookahead_dataflow(weights, predictor, prompt, steps, opts, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeComparison {
    pub tokens_identical: bool,
    /// Fraction of generated positions where sequential and lookahead agree.
    pub token_agreement: f64,
    /// Mean Jaccard similarity per layer between the two modes' head sets.
    pub attn_jaccard: Vec<f64>,
    pub mlp_jaccard: Vec<f64>,
    pub dense_nanos: u64,
    pub sequential_nanos: u64,
    pub lookahead_nanos: u64,
}

pub const COMPARE_CSV_HEADER: &str = "layer,attn_jaccard,mlp_jaccard";

impl ModeComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARE_CSV_HEADER);
        s.push('\n');
        for (l, (a, m)) in self.attn_jaccard.iter().zip(&self.mlp_jaccard).enumerate() {
            s.push_str(&format!("{l},{a:.6},{m:.6}\n"));
        }
        s
    }
}

/// Runs all three modes. Lookahead sets can differ from sequential ones
/// because they are predicted from `y_{l-1}` rather than `y_l` or `ỹ_l`.
pub fn compare_modes(
    weights: &TransformerWeights,
    predictor: &dyn SetPredictor,
    prompt: &[u32],
    steps: usize,
    opts: &RunOptions,
) -> Result<ModeComparison> {
    let timed = |f: &dyn Fn() -> Result<RunOutput>| -> Result<(RunOutput, u64)> {
        let t = Instant::now();
        let out = f()?;
        Ok((out, nanos(t.elapsed())))
    };
    let (_, dense_nanos) = timed(&|| run_dense(weights, prompt, steps))?;
    let (seq, sequential_nanos) =
        timed(&|| run_sequential_sparse(weights, predictor, prompt, steps, opts))?;
    let (look, lookahead_nanos) =
        timed(&|| run_lookahead(weights, predictor, prompt, steps, opts))?;

    let a = seq.generation.generated(prompt);
    let b = look.generation.generated(prompt);
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let n_layers = weights.config.n_layers;
    let mut attn_jaccard = vec![0.0; n_layers];
    let mut mlp_jaccard = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    for r in &seq.trace.layers {
        if let Some(o) = look.trace.record(r.position, r.layer) {
            attn_jaccard[r.layer] += r.attn_set.jaccard(&o.attn_set);
            mlp_jaccard[r.layer] += r.mlp_set.jaccard(&o.mlp_set);
            counts[r.layer] += 1;
        }
    }
    for l in 0..n_layers {
        let c = counts[l].max(1) as f64;
        attn_jaccard[l] /= c;
        mlp_jaccard[l] /= c;
    }
    Ok(ModeComparison {
        tokens_identical: a == b,
        token_agreement: if a.is_empty() {
            1.0
        } else {
            agree as f64 / a.len() as f64
        },
        attn_jaccard,
        mlp_jaccard,
        dense_nanos,
        sequential_nanos,
        lookahead_nanos,
    })
}
