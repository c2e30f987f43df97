use rand::Rng;

use super::cache::KvCache;
use super::forward::{
    block_forward, dense_mha_heads, mlp_activations, mlp_norm, residual, BlockOutput,
};
use super::weights::TransformerWeights;
use crate::error::{Error, Result};
use crate::sparse::{backfill_selected, sparse_mha, sparse_mlp, IndexSet, PendingPolicy};
use crate::tensor::{argmax, matvec, streams, Seed};

/// Per-layer observation of one forward step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `y_l`, the block input.
    pub input: Vec<f32>,
    /// `ỹ_l`, after attention.
    pub mid: Vec<f32>,
    /// `ŷ_l = y_{l+1}`.
    pub output: Vec<f32>,
    pub attn_set: Option<IndexSet>,
    pub mlp_set: Option<IndexSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub position: usize,
    pub token: u32,
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by generated tokens.
    pub tokens: Vec<u32>,
    pub steps: Vec<StepTrace>,
}

impl Generation {
    pub fn generated<'a>(&'a self, prompt: &[u32]) -> &'a [u32] {
        &self.tokens[prompt.len()..]
    }
}

/// Owns the KV cache of one decoding run and exposes layer-level operations
/// that the dense, sparse, pipelined and depth-rewired executors compose.
pub struct Decoder<'w> {
    weights: &'w TransformerWeights,
    cache: KvCache,
    policy: PendingPolicy,
}

impl<'w> Decoder<'w> {
    pub fn new(weights: &'w TransformerWeights, policy: PendingPolicy) -> Self {
        Decoder {
            weights,
            cache: KvCache::new(&weights.config),
            policy,
        }
    }

    pub fn weights(&self) -> &'w TransformerWeights {
        self.weights
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut KvCache {
        &mut self.cache
    }

    pub fn into_cache(self) -> KvCache {
        self.cache
    }

    pub fn dense_layer(&mut self, layer: usize, y: &[f32]) -> Result<BlockOutput> {
        let w = self.weights;
        block_forward(&w.config, &w.blocks[layer], &mut self.cache, y, layer)
    }

    /// Dense block that also returns per-head contributions and per-neuron
    /// activations for observation.
    pub fn dense_layer_detailed(
        &mut self,
        layer: usize,
        y: &[f32],
    ) -> Result<(BlockOutput, Vec<Vec<f32>>, Vec<f32>)> {
        let w = self.weights;
        let cfg = &w.config;
        let block = &w.blocks[layer];
        let (attn, per_head) = dense_mha_heads(cfg, block, &mut self.cache, y, layer)?;
        let mid = residual(y, &attn);
        let act = mlp_activations(block, cfg.activation, &mlp_norm(block, &mid)?)?;
        let mlp = matvec(&block.w2, &act)?;
        let out = residual(&mid, &mlp);
        Ok((
            BlockOutput {
                mid,
                out,
                attn,
                mlp,
            },
            per_head,
            act,
        ))
    }

    /// Attention over the selected heads; backfills them first.
    pub fn sparse_attention(
        &mut self,
        layer: usize,
        y: &[f32],
        s_a: &IndexSet,
    ) -> Result<Vec<f32>> {
        let w = self.weights;
        let block = &w.blocks[layer];
        backfill_selected(block, &mut self.cache, layer, s_a)?;
        sparse_mha(
            &w.config,
            block,
            &mut self.cache,
            y,
            layer,
            s_a,
            self.policy,
        )
    }

    /// MLP over the selected neurons, applied to the pre-norm `mid`.
    pub fn sparse_mlp(&self, layer: usize, mid: &[f32], s_m: &IndexSet) -> Result<Vec<f32>> {
        let w = self.weights;
        let block = &w.blocks[layer];
        sparse_mlp(block, w.config.activation, &mlp_norm(block, mid)?, s_m)
    }

    /// One block with explicit sets, `ỹ = y + MHA_S(y)`, `ŷ = ỹ + MLP_S(ỹ)`.
    pub fn sparse_layer(
        &mut self,
        layer: usize,
        y: &[f32],
        s_a: &IndexSet,
        s_m: &IndexSet,
    ) -> Result<BlockOutput> {
        let attn = self.sparse_attention(layer, y, s_a)?;
        let mid = residual(y, &attn);
        let mlp = self.sparse_mlp(layer, &mid, s_m)?;
        let out = residual(&mid, &mlp);
        Ok(BlockOutput {
            mid,
            out,
            attn,
            mlp,
        })
    }

    pub fn logits(&self, y: &[f32]) -> Result<Vec<f32>> {
        self.weights.logits(y)
    }
}

fn validate_prompt(weights: &TransformerWeights, prompt: &[u32], steps: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Empty { op: "generate" });
    }
    let vocab = weights.config.vocab;
    if let Some(&token) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::UnknownToken { token, vocab });
    }
    let len = prompt.len() + steps;
    if len > weights.config.max_seq {
        return Err(Error::SequenceTooLong {
            len,
            max: weights.config.max_seq,
        });
    }
    Ok(())
}

/// Greedy decoding loop shared by every executor.
///
/// Each prompt token is fed one position at a time, and every generated token
/// except the last is fed back. `forward(position, token)` runs one full
/// forward step and returns its trace.
pub fn drive(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    mut forward: impl FnMut(usize, u32) -> Result<StepTrace>,
) -> Result<Generation> {
    validate_prompt(weights, prompt, steps)?;
    let mut tokens = prompt.to_vec();
    let mut traces = Vec::with_capacity(prompt.len() + steps);
    for (position, &token) in prompt.iter().enumerate() {
        traces.push(forward(position, token)?);
    }
    for g in 0..steps {
        let last = traces.last().expect("prompt is nonempty");
        let next = argmax(&last.logits) as u32;
        tokens.push(next);
        if g + 1 < steps {
            traces.push(forward(tokens.len() - 1, next)?);
        }
    }
    Ok(Generation {
        tokens,
        steps: traces,
    })
}

/// Runs teacher-forced forward steps over a fixed token sequence.
pub fn drive_forced(
    weights: &TransformerWeights,
    tokens: &[u32],
    mut forward: impl FnMut(usize, u32) -> Result<StepTrace>,
) -> Result<Vec<StepTrace>> {
    validate_prompt(weights, tokens, 0)?;
    tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| forward(p, t))
        .collect()
}

/// One dense forward step at the decoder's next position.
pub fn dense_step(decoder: &mut Decoder<'_>, position: usize, token: u32) -> Result<StepTrace> {
    let w = decoder.weights();
    let mut y = w.embed(token)?;
    let mut layers = Vec::with_capacity(w.config.n_layers);
    for layer in 0..w.config.n_layers {
        let o = decoder.dense_layer(layer, &y)?;
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
}

/// `len` tokens drawn uniformly from the vocabulary.
pub fn random_prompt(vocab: usize, len: usize, seed: Seed) -> Vec<u32> {
    let mut rng = seed.derive(streams::PROMPT).rng();
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

pub fn generate_dense(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
) -> Result<Generation> {
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    drive(weights, prompt, steps, |p, t| {
        dense_step(&mut decoder, p, t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> TransformerWeights {
        let cfg = ModelConfig::new(16, 4, 2, 32, 32).unwrap();
        TransformerWeights::random(cfg, Seed(21)).unwrap()
    }

    #[test]
    fn zero_steps_returns_prompt() {
        let w = model();
        let g = generate_dense(&w, &[1, 2, 3], 0).unwrap();
        assert_eq!(g.tokens, vec![1, 2, 3]);
        assert_eq!(g.steps.len(), 3);
    }

    #[test]
    fn deterministic_generation() {
        let w = model();
        let a = generate_dense(&w, &[4, 5], 8).unwrap();
        let b = generate_dense(&w, &[4, 5], 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 10);
        assert_eq!(a.steps.len(), 9);
        assert!(a.steps.iter().all(|s| s
            .layers
            .iter()
            .all(|l| l.output.iter().all(|v| v.is_finite()))));
    }

    #[test]
    fn errors() {
        let w = model();
        assert!(matches!(
            generate_dense(&w, &[], 1),
            Err(Error::Empty { .. })
        ));
        assert!(matches!(
            generate_dense(&w, &[99], 1),
            Err(Error::UnknownToken { token: 99, .. })
        ));
        assert!(matches!(
            generate_dense(&w, &[1; 30], 5),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn trace_chains_layers() {
        let w = model();
        let g = generate_dense(&w, &[7], 2).unwrap();
        for s in &g.steps {
            assert_eq!(s.layers[0].input, w.embed(s.token).unwrap());
            assert_eq!(s.layers[1].input, s.layers[0].output);
        }
    }
}
