//! Ground-truth contextual sparsity and observational measurements.
//!
//! The first pass ([`record_sparsity`]) runs the dense model and keeps, for
//! every position and layer, which heads and neurons produced large outputs.
//! The second pass ([`two_pass_verify`]) replays the same tokens using only
//! those units and compares the logits.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{drive, drive_forced, Decoder, LayerTrace, StepTrace, TransformerWeights};
use crate::predictor::{OracleReplay, SetPredictor, SetQuery};
use crate::sparse::{BudgetKind, IndexSet, PendingPolicy, SparsityBudget, UnitKind};
use crate::tensor::{argmax, cosine_similarity, norm, Seed};

/// Observations for one (position, layer).
#[derive(Clone, Debug, PartialEq)]
pub struct RecordEntry {
    pub position: usize,
    pub layer: usize,
    /// Pre-norm attention input `y_l`.
    pub input: Vec<f32>,
    /// Pre-norm MLP input `ỹ_l`.
    pub mid: Vec<f32>,
    /// `|σ(u·W^1)_r|` per neuron.
    pub neuron_magnitudes: Vec<f32>,
    /// `‖H_i(y)·W^O_i‖₂` per head.
    pub head_norms: Vec<f32>,
    pub mlp_active: IndexSet,
    pub heads_active: IndexSet,
}

impl RecordEntry {
    pub fn active(&self, kind: UnitKind) -> &IndexSet {
        match kind {
            UnitKind::Heads => &self.heads_active,
            UnitKind::Neurons => &self.mlp_active,
        }
    }

    pub fn magnitudes(&self, kind: UnitKind) -> &[f32] {
        match kind {
            UnitKind::Heads => &self.head_norms,
            UnitKind::Neurons => &self.neuron_magnitudes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRecord {
    /// Fingerprint of the weights that produced the record.
    pub fingerprint: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub budget_mlp: SparsityBudget,
    pub budget_attn: SparsityBudget,
    /// Prompt followed by greedily generated tokens.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Ordered by position, then layer.
    pub entries: Vec<RecordEntry>,
}

impl SparsityRecord {
    pub fn positions(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.position + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn entry(&self, position: usize, layer: usize) -> Option<&RecordEntry> {
        self.entries
            .get(position * self.n_layers + layer)
            .filter(|e| e.position == position && e.layer == layer)
    }

    pub fn universe(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Heads => self.n_heads,
            UnitKind::Neurons => self.d_ff,
        }
    }

    pub fn check_model(&self, weights: &TransformerWeights) -> Result<()> {
        let found = weights.fingerprint();
        if found != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: self.fingerprint,
                found,
            });
        }
        Ok(())
    }

    /// Checks that every recorded set is exactly what its budget selects.
    pub fn budgets_consistent(&self) -> bool {
        self.entries.iter().all(|e| {
            self.budget_mlp.kind.select(&e.neuron_magnitudes) == e.mlp_active
                && self.budget_attn.kind.select(&e.head_norms) == e.heads_active
        })
    }
}

fn check_budget(b: &SparsityBudget, kind: UnitKind) -> Result<()> {
    if b.applies_to != kind {
        return Err(Error::Invalid(format!(
            "budget applies to {}, expected {}",
            b.applies_to, kind
        )));
    }
    Ok(())
}

/// Dense pass recording per-neuron activation magnitudes and per-head output
/// norms at every position and layer, with active sets chosen by the budgets.
pub fn record_sparsity(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    budget_mlp: SparsityBudget,
    budget_attn: SparsityBudget,
) -> Result<SparsityRecord> {
    check_budget(&budget_mlp, UnitKind::Neurons)?;
    check_budget(&budget_attn, UnitKind::Heads)?;
    let cfg = &weights.config;
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    let mut entries = Vec::new();
    let generation = drive(weights, prompt, steps, |position, token| {
        let mut y = weights.embed(token)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let (o, per_head, act) = decoder.dense_layer_detailed(layer, &y)?;
            let neuron_magnitudes: Vec<f32> = act.iter().map(|a| a.abs()).collect();
            let head_norms: Vec<f32> = per_head.iter().map(|h| norm(h) as f32).collect();
            entries.push(RecordEntry {
                position,
                layer,
                input: y.clone(),
                mid: o.mid.clone(),
                mlp_active: budget_mlp.select(&neuron_magnitudes),
                heads_active: budget_attn.select(&head_norms),
                neuron_magnitudes,
                head_norms,
            });
            layers.push(LayerTrace {
                input: y,
                mid: o.mid,
                output: o.out.clone(),
                attn_set: None,
                mlp_set: None,
            });
            y = o.out;
        }
        Ok(StepTrace {
            position,
            token,
            logits: decoder.logits(&y)?,
            layers,
        })
    })?;
    Ok(SparsityRecord {
        fingerprint: weights.fingerprint(),
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_ff,
        n_layers: cfg.n_layers,
        budget_mlp,
        budget_attn,
        tokens: generation.tokens,
        prompt_len: prompt.len(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepAgreement {
    pub position: usize,
    pub cosine: f64,
    pub max_abs_diff: f64,
    pub top1_agree: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub steps: Vec<StepAgreement>,
}

impl VerifyReport {
    pub fn agreement_rate(&self) -> f64 {
        let n = self.steps.len().max(1) as f64;
        self.steps.iter().filter(|s| s.top1_agree).count() as f64 / n
    }

    pub fn min_cosine(&self) -> f64 {
        self.steps.iter().map(|s| s.cosine).fold(1.0, f64::min)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.max_abs_diff)
            .fold(0.0, f64::max)
    }
}

/// Teacher-forced forward pass over `tokens` using sets from `predictor`.
pub fn sparse_forced(
    weights: &TransformerWeights,
    tokens: &[u32],
    predictor: &dyn SetPredictor,
) -> Result<Vec<StepTrace>> {
    let cfg = &weights.config;
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    drive_forced(weights, tokens, |position, token| {
        let mut y = weights.embed(token)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let s_a =
                predictor.predict_set(&SetQuery::new(position, layer, UnitKind::Heads, &y))?;
            let attn = decoder.sparse_attention(layer, &y, &s_a)?;
            let mid = crate::tensor::add(&y, &attn);
            let s_m =
                predictor.predict_set(&SetQuery::new(position, layer, UnitKind::Neurons, &mid))?;
            let mlp = decoder.sparse_mlp(layer, &mid, &s_m)?;
            let out = crate::tensor::add(&mid, &mlp);
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
    })
}

/// Dense teacher-forced forward pass over `tokens`.
pub fn dense_forced(weights: &TransformerWeights, tokens: &[u32]) -> Result<Vec<StepTrace>> {
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    drive_forced(weights, tokens, |p, t| {
        crate::model::dense_step(&mut decoder, p, t)
    })
}

pub fn compare_logits(dense: &[StepTrace], sparse: &[StepTrace]) -> Result<VerifyReport> {
    let steps = dense
        .iter()
        .zip(sparse)
        .map(|(d, s)| {
            let max_abs_diff = d
                .logits
                .iter()
                .zip(&s.logits)
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
                .fold(0.0, f64::max);
            Ok(StepAgreement {
                position: d.position,
                cosine: cosine_similarity(&d.logits, &s.logits)?,
                max_abs_diff,
                top1_agree: argmax(&d.logits) == argmax(&s.logits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { steps })
}

/// Second pass: replays the recorded tokens using only the recorded sets and
/// compares every step's logits with the dense model.
pub fn two_pass_verify(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    record: &SparsityRecord,
) -> Result<VerifyReport> {
    record.check_model(weights)?;
    if record.tokens.get(..prompt.len()) != Some(prompt)
        || record.prompt_len != prompt.len()
        || record.steps() != steps
    {
        return Err(Error::Invalid(
            "record was produced from a different prompt or step count".into(),
        ));
    }
    let forced = &record.tokens[..record.positions()];
    let dense = dense_forced(weights, forced)?;
    let sparse = sparse_forced(weights, forced, &OracleReplay::new(record))?;
    compare_logits(&dense, &sparse)
}

/// Fraction of units at `layer` that no entry in the batch uses.
pub fn union_sparsity(records: &[SparsityRecord], layer: usize, kind: UnitKind) -> Result<f64> {
    Ok(union_stats(records, layer, kind)?.unused_fraction)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnionStats {
    pub batch: usize,
    pub layer: usize,
    pub kind: UnitKind,
    pub union_size: usize,
    pub sum_sizes: usize,
    pub universe: usize,
    pub unused_fraction: f64,
}

pub const UNION_CSV_HEADER: &str = "batch,layer,kind,union_size,sum_sizes,universe,unused_fraction";

impl UnionStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.batch,
            self.layer,
            self.kind,
            self.union_size,
            self.sum_sizes,
            self.universe,
            self.unused_fraction
        )
    }
}

pub fn union_stats(records: &[SparsityRecord], layer: usize, kind: UnitKind) -> Result<UnionStats> {
    let first = records.first().ok_or(Error::Empty {
        op: "union_sparsity",
    })?;
    if let Some(r) = records.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::Fingerprint {
            expected: first.fingerprint,
            found: r.fingerprint,
        });
    }
    if layer >= first.n_layers {
        return Err(Error::Invalid(format!("layer {layer} out of range")));
    }
    let universe = first.universe(kind);
    let mut used = vec![false; universe];
    let mut sum_sizes = 0;
    for e in records
        .iter()
        .flat_map(|r| &r.entries)
        .filter(|e| e.layer == layer)
    {
        let set = e.active(kind);
        sum_sizes += set.len();
        set.iter().for_each(|i| used[i] = true);
    }
    let union_size = used.iter().filter(|&&u| u).count();
    Ok(UnionStats {
        batch: records.len(),
        layer,
        kind,
        union_size,
        sum_sizes,
        universe,
        unused_fraction: 1.0 - union_size as f64 / universe as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// `cos(y_l, y_{l+1})`, averaged over steps, for `l` in `0..L`.
    pub consecutive: Vec<f64>,
    /// `by_gap[n-1][l] = cos(y_l, y_{l+n})`.
    pub by_gap: Vec<Vec<f64>>,
    /// Mean `(‖X‖, ‖F(X)‖)` around each attention sub-block.
    pub attn_norms: Vec<(f64, f64)>,
    /// Mean `(‖X‖, ‖F(X)‖)` around each MLP sub-block.
    pub mlp_norms: Vec<(f64, f64)>,
}

pub const SIMILARITY_CSV_HEADER: &str = "gap,layer,cosine";

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SIMILARITY_CSV_HEADER);
        s.push('\n');
        for (g, row) in self.by_gap.iter().enumerate() {
            for (l, c) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{:.9}\n", g + 1, l, c));
            }
        }
        s
    }
}

/// Cosine similarity of the residual stream across layers, plus the norm of
/// each sub-block's input and output.
pub fn layer_similarity(trace: &[StepTrace]) -> Result<SimilarityReport> {
    let n_layers = trace.first().map_or(0, |s| s.layers.len());
    if n_layers < 2 {
        return Err(Error::Invalid(format!(
            "layer_similarity needs at least 2 layers, got {n_layers}"
        )));
    }
    let n_steps = trace.len() as f64;
    // y_0 .. y_L per step
    let stream = |s: &StepTrace, l: usize| -> Vec<f32> {
        if l < n_layers {
            s.layers[l].input.clone()
        } else {
            s.layers[n_layers - 1].output.clone()
        }
    };
    let mut by_gap = Vec::with_capacity(n_layers);
    for gap in 1..=n_layers {
        let mut row = Vec::new();
        for l in 0..=(n_layers - gap) {
            let mut acc = 0.0;
            for s in trace {
                acc += cosine_similarity(&stream(s, l), &stream(s, l + gap))?;
            }
            row.push(acc / n_steps);
        }
        by_gap.push(row);
    }
    let mut attn_norms = Vec::with_capacity(n_layers);
    let mut mlp_norms = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (mut ax, mut af, mut mx, mut mf) = (0.0, 0.0, 0.0, 0.0);
        for s in trace {
            let lt = &s.layers[l];
            ax += norm(&lt.input);
            af += norm(&crate::tensor::sub(&lt.mid, &lt.input));
            mx += norm(&lt.mid);
            mf += norm(&crate::tensor::sub(&lt.output, &lt.mid));
        }
        attn_norms.push((ax / n_steps, af / n_steps));
        mlp_norms.push((mx / n_steps, mf / n_steps));
    }
    Ok(SimilarityReport {
        consecutive: by_gap[0].clone(),
        by_gap,
        attn_norms,
        mlp_norms,
    })
}

/// `√(1 − ⟨x, z⟩²)` for unit `x` and `z = (x + y)/‖x + y‖₂`.
pub fn angle_sin(x: &[f64], y: &[f64]) -> f64 {
    let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c: f64 = x.iter().zip(&z).map(|(a, b)| a * b / zn).sum();
    (1.0 - c * c).max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleReport {
    pub trials: usize,
    pub eps: f64,
    pub bound: f64,
    pub max_sin: f64,
    pub violations: usize,
}

/// Samples unit `x` and perturbations with `‖y‖₂ ≤ eps` and checks the sine
/// of the angle between `x` and the normalized `x + y` against `2√eps`.
pub fn angle_close_check(trials: usize, eps: f64, dim: usize, seed: Seed) -> Result<AngleReport> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::Invalid(format!(
            "eps must be in (0, 0.1), got {eps}"
        )));
    }
    let mut rng = seed.derive(crate::tensor::streams::LEMMA).rng();
    let bound = 2.0 * eps.sqrt();
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect()
    };
    let (mut max_sin, mut violations) = (0.0f64, 0);
    for t in 0..trials {
        let x = unit(&mut rng);
        // every fourth trial sits on the boundary ‖y‖ = eps
        let r = if t % 4 == 0 {
            eps
        } else {
            eps * rng.random::<f64>()
        };
        let y: Vec<f64> = unit(&mut rng).into_iter().map(|v| v * r).collect();
        let s = angle_sin(&x, &y);
        max_sin = max_sin.max(s);
        if s > bound {
            violations += 1;
        }
    }
    Ok(AngleReport {
        trials,
        eps,
        bound,
        max_sin,
        violations,
    })
}

/// Budgets that select every neuron and every head.
pub fn full_budgets(weights: &TransformerWeights) -> (SparsityBudget, SparsityBudget) {
    let c = &weights.config;
    (
        SparsityBudget {
            kind: BudgetKind::TopK(c.d_ff),
            applies_to: UnitKind::Neurons,
        },
        SparsityBudget {
            kind: BudgetKind::TopK(c.n_heads),
            applies_to: UnitKind::Heads,
        },
    )
}
