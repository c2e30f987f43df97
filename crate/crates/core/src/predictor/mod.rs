//! Per-layer sparsity predictors.
//!
//! Every executor asks a [`SetPredictor`] for the heads or neurons to run at
//! a given (position, layer). Three implementations are provided: the
//! trivial [`FullBudget`], [`OracleReplay`] of recorded ground truth, and a
//! [`PredictorBank`] of trained two-layer classifiers.

mod net;
mod train;

pub use net::{
    decode_predictor, encode_predictor, read_predictor, write_predictor, PredictorWeights,
    PREDICTOR_MAGIC,
};
pub use train::{
    build_training_set, eval_recall, eval_recall_with, eval_set_predictor, gradient_check, train,
    train_bank, EpochLog, EvalBudget, InputSource, RecallReport, TrainConfig, TrainOutcome,
    TrainingSet, TRAIN_LOG_CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::model::TransformerWeights;
use crate::oracle::SparsityRecord;
use crate::sparse::{BudgetKind, IndexSet, UnitKind};

/// Request for the active set of `kind` units at `layer`, computed from
/// `input`.
#[derive(Clone, Copy, Debug)]
pub struct SetQuery<'a> {
    pub position: usize,
    pub layer: usize,
    pub kind: UnitKind,
    pub input: &'a [f32],
}

impl<'a> SetQuery<'a> {
    pub fn new(position: usize, layer: usize, kind: UnitKind, input: &'a [f32]) -> Self {
        SetQuery {
            position,
            layer,
            kind,
            input,
        }
    }
}

/// Source of active sets. Implementations must be pure: the same query always
/// yields the same set.
pub trait SetPredictor: Sync {
    fn predict_set(&self, q: &SetQuery<'_>) -> Result<IndexSet>;

    /// Called once before any compute; errors if the predictor cannot serve
    /// every layer of `weights`.
    fn check(&self, weights: &TransformerWeights) -> Result<()> {
        let _ = weights;
        Ok(())
    }
}

/// Selects every unit.
#[derive(Clone, Copy, Debug)]
pub struct FullBudget {
    pub n_heads: usize,
    pub d_ff: usize,
}

impl FullBudget {
    pub fn for_model(cfg: &crate::model::ModelConfig) -> Self {
        FullBudget {
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
        }
    }
}

impl SetPredictor for FullBudget {
    fn predict_set(&self, q: &SetQuery<'_>) -> Result<IndexSet> {
        Ok(IndexSet::full(match q.kind {
            UnitKind::Heads => self.n_heads,
            UnitKind::Neurons => self.d_ff,
        }))
    }
}

/// Returns the sets stored in a sparsity record, ignoring the input.
pub struct OracleReplay<'r> {
    record: &'r SparsityRecord,
}

impl<'r> OracleReplay<'r> {
    pub fn new(record: &'r SparsityRecord) -> Self {
        OracleReplay { record }
    }
}

impl SetPredictor for OracleReplay<'_> {
    fn check(&self, weights: &TransformerWeights) -> Result<()> {
        self.record.check_model(weights)
    }

    fn predict_set(&self, q: &SetQuery<'_>) -> Result<IndexSet> {
        self.record
            .entry(q.position, q.layer)
            .map(|e| e.active(q.kind).clone())
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "no record for position {} layer {}",
                    q.position, q.layer
                ))
            })
    }
}

/// Trained predictors indexed by the layer whose sets they produce.
#[derive(Clone, Debug)]
pub struct PredictorBank {
    heads: Vec<Option<PredictorWeights>>,
    neurons: Vec<Option<PredictorWeights>>,
    pub attn_budget: BudgetKind,
    pub mlp_budget: BudgetKind,
}

impl PredictorBank {
    pub fn new(n_layers: usize, attn_budget: BudgetKind, mlp_budget: BudgetKind) -> Self {
        PredictorBank {
            heads: vec![None; n_layers],
            neurons: vec![None; n_layers],
            attn_budget,
            mlp_budget,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn insert(&mut self, p: PredictorWeights) -> Result<()> {
        let slots = match p.kind {
            UnitKind::Heads => &mut self.heads,
            UnitKind::Neurons => &mut self.neurons,
        };
        let n = slots.len();
        let slot = slots.get_mut(p.layer).ok_or_else(|| {
            Error::Invalid(format!(
                "predictor layer {} out of range for {n} layers",
                p.layer
            ))
        })?;
        *slot = Some(p);
        Ok(())
    }

    pub fn get(&self, layer: usize, kind: UnitKind) -> Option<&PredictorWeights> {
        match kind {
            UnitKind::Heads => self.heads.get(layer)?.as_ref(),
            UnitKind::Neurons => self.neurons.get(layer)?.as_ref(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &PredictorWeights> {
        self.heads.iter().chain(&self.neurons).flatten()
    }

    /// Errors unless every layer has both predictors, trained for the model
    /// with the given fingerprint.
    pub fn check_complete(&self, fingerprint: u64) -> Result<()> {
        for layer in 0..self.n_layers() {
            for kind in [UnitKind::Heads, UnitKind::Neurons] {
                let p = self.get(layer, kind).ok_or(Error::MissingPredictor {
                    layer,
                    kind: kind.as_str(),
                })?;
                if p.fingerprint != fingerprint {
                    return Err(Error::Fingerprint {
                        expected: fingerprint,
                        found: p.fingerprint,
                    });
                }
            }
        }
        Ok(())
    }
}

impl SetPredictor for PredictorBank {
    fn predict_set(&self, q: &SetQuery<'_>) -> Result<IndexSet> {
        let p = self.get(q.layer, q.kind).ok_or(Error::MissingPredictor {
            layer: q.layer,
            kind: q.kind.as_str(),
        })?;
        let budget = match q.kind {
            UnitKind::Heads => self.attn_budget,
            UnitKind::Neurons => self.mlp_budget,
        };
        p.predict(q.input, &budget)
    }

    fn check(&self, weights: &TransformerWeights) -> Result<()> {
        if self.n_layers() != weights.config.n_layers {
            return Err(Error::Invalid(format!(
                "predictor bank covers {} layers, model has {}",
                self.n_layers(),
                weights.config.n_layers
            )));
        }
        self.check_complete(weights.fingerprint())
    }
}
