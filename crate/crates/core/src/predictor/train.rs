use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::net::{Adam, Params, PredictorWeights};
use super::{SetPredictor, SetQuery};
use crate::error::{Error, Result};
use crate::oracle::{RecordEntry, SparsityRecord};
use crate::sparse::{BudgetKind, IndexSet, UnitKind};
use crate::tensor::{streams, Seed};

/// Which residual-stream vector a predictor reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputSource {
    /// Heads read `y_l`, neurons read `ỹ_l`.
    #[default]
    Sequential,
    /// Both read `y_{l-1}`; layer 0 falls back to [`InputSource::Sequential`].
    Lookahead,
    /// Heads read `y_{l-1}`, neurons read `y_l` concurrently with attention.
    Concurrent,
}

impl InputSource {
    pub fn as_str(self) -> &'static str {
        match self {
            InputSource::Sequential => "sequential",
            InputSource::Lookahead => "lookahead",
            InputSource::Concurrent => "concurrent",
        }
    }

    /// The vector fed to the `kind` predictor for `entry`.
    pub fn input<'r>(
        self,
        record: &'r SparsityRecord,
        entry: &'r RecordEntry,
        kind: UnitKind,
    ) -> Result<&'r [f32]> {
        let prev = || -> Result<&'r [f32]> {
            record
                .entry(entry.position, entry.layer - 1)
                .map(|e| e.input.as_slice())
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "record lacks layer {} at position {}",
                        entry.layer - 1,
                        entry.position
                    ))
                })
        };
        let sequential = match kind {
            UnitKind::Heads => &entry.input,
            UnitKind::Neurons => &entry.mid,
        };
        Ok(match (self, kind) {
            (_, _) if entry.layer == 0 && self != InputSource::Concurrent => sequential,
            (InputSource::Sequential, _) => sequential,
            (InputSource::Lookahead, _) => prev()?,
            (InputSource::Concurrent, UnitKind::Heads) if entry.layer == 0 => &entry.input,
            (InputSource::Concurrent, UnitKind::Heads) => prev()?,
            (InputSource::Concurrent, UnitKind::Neurons) => &entry.input,
        })
    }
}

/// Multi-label examples: `labels[i][r]` is true iff unit `r` had magnitude
/// `>= threshold` on input `xs[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub layer: usize,
    pub kind: UnitKind,
    pub source: InputSource,
    pub threshold: f64,
    pub fingerprint: u64,
    pub xs: Vec<Vec<f32>>,
    pub labels: Vec<Vec<bool>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn d(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn m(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn positives(&self, i: usize) -> IndexSet {
        let idx = (0..self.m()).filter(|&r| self.labels[i][r]).collect();
        IndexSet::new(idx, self.m()).expect("labels are in range")
    }
}

fn check_records(records: &[SparsityRecord], layer: usize) -> Result<&SparsityRecord> {
    let first = records.first().ok_or(Error::Empty { op: "records" })?;
    if let Some(r) = records.iter().find(|r| {
        r.fingerprint != first.fingerprint
            || r.n_layers != first.n_layers
            || r.d_ff != first.d_ff
            || r.n_heads != first.n_heads
    }) {
        return Err(Error::Fingerprint {
            expected: first.fingerprint,
            found: r.fingerprint,
        });
    }
    if layer >= first.n_layers {
        return Err(Error::Invalid(format!(
            "layer {layer} out of range for {} layers",
            first.n_layers
        )));
    }
    Ok(first)
}

pub fn build_training_set(
    records: &[SparsityRecord],
    layer: usize,
    kind: UnitKind,
    threshold: f64,
    source: InputSource,
) -> Result<TrainingSet> {
    let first = check_records(records, layer)?;
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Invalid(format!(
            "label threshold must be > 0, got {threshold}"
        )));
    }
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        for e in rec.entries.iter().filter(|e| e.layer == layer) {
            xs.push(source.input(rec, e, kind)?.to_vec());
            labels.push(
                e.magnitudes(kind)
                    .iter()
                    .map(|&v| f64::from(v) >= threshold)
                    .collect(),
            );
        }
    }
    Ok(TrainingSet {
        layer,
        kind,
        source,
        threshold,
        fingerprint: first.fingerprint,
        xs,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: Seed,
    pub hidden: usize,
    /// Selection rule used at inference and for the logged recall.
    pub budget: BudgetKind,
}

impl TrainConfig {
    /// Defaults: 200 epochs, Adam at 5e-3, batches of 32, `r = max(32, d/2)`.
    pub fn new(d_model: usize, budget: BudgetKind) -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 5e-3,
            batch_size: 32,
            seed: Seed(0),
            hidden: (d_model / 2).max(32),
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, batch size and hidden width must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recall: f64,
}

pub const TRAIN_LOG_CSV_HEADER: &str = "epoch,loss,recall";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub weights: PredictorWeights,
    /// Entry 0 is the untrained state.
    pub log: Vec<EpochLog>,
    pub initial_loss: f64,
    /// Training loss of the returned weights.
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_CSV_HEADER);
        s.push('\n');
        for e in &self.log {
            s.push_str(&format!("{},{:.9},{:.6}\n", e.epoch, e.loss, e.recall));
        }
        s
    }
}

fn params_recall(p: &Params, xs: &[&[f32]], ys: &[&[bool]], budget: &BudgetKind) -> f64 {
    let mut acc = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (_, z) = p.forward(x);
        let scores: Vec<f32> = z.iter().map(|&v| super::net::sigmoid(v) as f32).collect();
        let pred = budget.select(&scores);
        let truth: Vec<usize> = (0..y.len()).filter(|&r| y[r]).collect();
        acc += if truth.is_empty() {
            1.0
        } else {
            truth.iter().filter(|&&r| pred.contains(r)).count() as f64 / truth.len() as f64
        };
    }
    acc / xs.len() as f64
}

/// Minibatch Adam on mean per-unit binary cross-entropy.
///
/// Deterministic for a given seed, layer and kind. The returned weights are
/// the lowest-loss epoch's, so `final_loss <= initial_loss`.
pub fn train(ts: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ts.is_empty() {
        return Err(Error::Empty { op: "train" });
    }
    let (d, m, r) = (ts.d(), ts.m(), cfg.hidden);
    if d == 0 || m == 0 {
        return Err(Error::Invalid("training examples have zero width".into()));
    }
    let mut rng = cfg
        .seed
        .derive(streams::PREDICTOR)
        .derive((ts.layer as u64) << 1 | u64::from(ts.kind.code()))
        .rng();
    let xs: Vec<&[f32]> = ts.xs.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[bool]> = ts.labels.iter().map(Vec::as_slice).collect();
    let mut params = Params::init(d, r, m, &mut rng);
    let mut adam = Adam::new(params.v.len(), cfg.learning_rate);

    let initial_loss = params.loss(&xs, &ys);
    let mut log = vec![EpochLog {
        epoch: 0,
        loss: initial_loss,
        recall: params_recall(&params, &xs, &ys, &cfg.budget),
    }];
    let mut best = (initial_loss, params.clone());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<&[f32]> = chunk.iter().map(|&i| xs[i]).collect();
            let by: Vec<&[bool]> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, grad) = params.loss_and_grad(&bx, &by);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.step(&mut params.v, &grad);
        }
        let loss = params.loss(&xs, &ys);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        log::debug!(
            "layer {} {} epoch {epoch}: loss {loss:.6}",
            ts.layer,
            ts.kind
        );
        log.push(EpochLog {
            epoch,
            loss,
            recall: params_recall(&params, &xs, &ys, &cfg.budget),
        });
        if loss < best.0 {
            best = (loss, params.clone());
        }
    }
    Ok(TrainOutcome {
        weights: PredictorWeights::from_params(&best.1, ts.layer, ts.kind, ts.fingerprint)?,
        log,
        initial_loss,
        final_loss: best.0,
    })
}

/// Trains independent predictors in parallel; results keep the input order.
pub fn train_bank(sets: &[TrainingSet], cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    sets.par_iter().map(|ts| train(ts, cfg)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalBudget {
    Fixed(BudgetKind),
    /// TopK with `k` equal to each example's true set size.
    TrueSize,
}

/// Averages over examples. Held-out status of the records is the caller's
/// responsibility.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub layer: usize,
    pub kind: UnitKind,
    pub examples: usize,
    pub recall: f64,
    pub precision: f64,
    pub false_negative_rate: f64,
}

/// Scores arbitrary set predictions against recorded truth at one layer.
pub fn eval_recall_with(
    records: &[SparsityRecord],
    layer: usize,
    kind: UnitKind,
    source: InputSource,
    mut predict: impl FnMut(&[f32], &RecordEntry) -> Result<IndexSet>,
) -> Result<RecallReport> {
    check_records(records, layer)?;
    let (mut recall, mut precision, mut n) = (0.0, 0.0, 0usize);
    for rec in records {
        for e in rec.entries.iter().filter(|e| e.layer == layer) {
            let truth = e.active(kind);
            let pred = predict(source.input(rec, e, kind)?, e)?;
            let hit = pred.intersection_len(truth) as f64;
            recall += if truth.is_empty() {
                1.0
            } else {
                hit / truth.len() as f64
            };
            precision += if pred.is_empty() {
                1.0
            } else {
                hit / pred.len() as f64
            };
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty { op: "eval_recall" });
    }
    let recall = recall / n as f64;
    Ok(RecallReport {
        layer,
        kind,
        examples: n,
        recall,
        precision: precision / n as f64,
        false_negative_rate: 1.0 - recall,
    })
}

pub fn eval_recall(
    sp: &PredictorWeights,
    records: &[SparsityRecord],
    budget: EvalBudget,
    source: InputSource,
) -> Result<RecallReport> {
    eval_recall_with(records, sp.layer, sp.kind, source, |x, e| {
        let b = match budget {
            EvalBudget::Fixed(b) => b,
            EvalBudget::TrueSize => BudgetKind::TopK(e.active(sp.kind).len()),
        };
        sp.predict(x, &b)
    })
}

/// One report per layer for any [`SetPredictor`].
pub fn eval_set_predictor(
    predictor: &dyn SetPredictor,
    records: &[SparsityRecord],
    kind: UnitKind,
    source: InputSource,
) -> Result<Vec<RecallReport>> {
    let n_layers = records
        .first()
        .ok_or(Error::Empty { op: "eval_recall" })?
        .n_layers;
    (0..n_layers)
        .map(|layer| {
            eval_recall_with(records, layer, kind, source, |x, e| {
                predictor.predict_set(&SetQuery::new(e.position, e.layer, kind, x))
            })
        })
        .collect()
}

/// Relative error `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖)` between the analytic
/// gradient and central finite differences on a random instance.
pub fn gradient_check(d: usize, r: usize, m: usize, batch: usize, seed: Seed) -> Result<f64> {
    if d == 0 || r == 0 || m == 0 || batch == 0 {
        return Err(Error::Invalid(
            "gradient check dims must be positive".into(),
        ));
    }
    let mut rng = seed.derive(streams::PREDICTOR).rng();
    let mut params = Params::init(d, r, m, &mut rng);
    let o = d * r;
    for b in &mut params.v[o..o + r] {
        *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let xs: Vec<Vec<f32>> = (0..batch)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let ys: Vec<Vec<bool>> = (0..batch)
        .map(|_| (0..m).map(|_| rng.random_bool(0.3)).collect())
        .collect();
    let xr: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[bool]> = ys.iter().map(Vec::as_slice).collect();
    let (_, analytic) = params.loss_and_grad(&xr, &yr);
    let h = 1e-6;
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..params.v.len() {
        let orig = params.v[i];
        params.v[i] = orig + h;
        let up = params.loss(&xr, &yr);
        params.v[i] = orig - h;
        let down = params.loss(&xr, &yr);
        params.v[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nn).max(1e-300))
}
