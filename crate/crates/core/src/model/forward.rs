//! Dense reference computation of one decoder block.
//!
//! Attention entry points take the pre-norm residual input `y` because the
//! cache parks pre-norm inputs for lazily projected heads; MLP entry points
//! take the already normalized input.

use super::cache::{HeadCache, KvCache, KvEntry, LayerCache};
use super::config::{Activation, ModelConfig};
use super::weights::BlockWeights;
use crate::error::{Error, Result};
use crate::tensor::{dot, layer_norm, matvec, vecmat};

pub fn attn_norm(block: &BlockWeights, y: &[f32]) -> Result<Vec<f32>> {
    layer_norm(y, &block.ln_attn_gain, &block.ln_attn_bias)
}

pub fn mlp_norm(block: &BlockWeights, y: &[f32]) -> Result<Vec<f32>> {
    layer_norm(y, &block.ln_mlp_gain, &block.ln_mlp_bias)
}

/// Key and value of head `head` for the normalized input `u`.
pub fn project_kv(block: &BlockWeights, head: usize, u: &[f32]) -> Result<KvEntry> {
    Ok(KvEntry {
        key: vecmat(u, &block.wk[head])?,
        value: vecmat(u, &block.wv[head])?,
    })
}

/// Softmax weights of query `q` over every cached position of one head.
pub fn attention_weights(
    q: &[f32],
    head: &HeadCache,
    scale: f64,
    layer: usize,
    head_idx: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(head.len());
    for (position, e) in head.entries.iter().enumerate() {
        let e = e.as_ref().ok_or(Error::MissingKv {
            layer,
            head: head_idx,
            position,
        })?;
        scores.push(scale * dot(q, &e.key));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `H_i(u)·W^O_i` for one head, attending over the head's full cache.
pub(crate) fn head_contribution(
    cfg: &ModelConfig,
    block: &BlockWeights,
    layer_cache: &LayerCache,
    layer: usize,
    head: usize,
    u: &[f32],
) -> Result<Vec<f32>> {
    let q = vecmat(u, &block.wq[head])?;
    let hc = &layer_cache.heads[head];
    let weights = attention_weights(&q, hc, cfg.attn_scale.factor(cfg.d_head), layer, head)?;
    let mut acc = vec![0.0f64; cfg.d_head];
    for (w, e) in weights.iter().zip(&hc.entries) {
        // presence was checked by attention_weights
        let v = &e.as_ref().expect("checked").value;
        for (a, &vc) in acc.iter_mut().zip(v) {
            *a += w * f64::from(vc);
        }
    }
    let h: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    vecmat(&h, &block.wo[head])
}

/// Sums per-head contributions in head order with `f64` accumulation.
pub(crate) fn sum_heads<'a>(d: usize, contribs: impl IntoIterator<Item = &'a [f32]>) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for c in contribs {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f64::from(v);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn check_layer(cfg: &ModelConfig, cache: &KvCache, layer: usize) -> Result<()> {
    if layer >= cfg.n_layers || layer >= cache.layers.len() {
        return Err(Error::Invalid(format!("layer {layer} out of range")));
    }
    Ok(())
}

/// Full multi-head attention for the residual input `y`, returning the sum
/// and each head's contribution. Appends this position's K/V for every head.
pub fn dense_mha_heads(
    cfg: &ModelConfig,
    block: &BlockWeights,
    cache: &mut KvCache,
    y: &[f32],
    layer: usize,
) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    check_layer(cfg, cache, layer)?;
    if y.len() != cfg.d_model {
        return Err(Error::shape("dense_mha", cfg.d_model, y.len()));
    }
    let lc = &mut cache.layers[layer];
    if let Some(head) = lc.heads.iter().position(HeadCache::has_pending) {
        return Err(Error::PendingInputs { layer, head });
    }
    let u = attn_norm(block, y)?;
    for head in 0..cfg.n_heads {
        let kv = project_kv(block, head, &u)?;
        lc.heads[head].entries.push(Some(kv));
    }
    let per_head = (0..cfg.n_heads)
        .map(|head| head_contribution(cfg, block, lc, layer, head, &u))
        .collect::<Result<Vec<_>>>()?;
    let sum = sum_heads(cfg.d_model, per_head.iter().map(Vec::as_slice));
    Ok((sum, per_head))
}

pub fn dense_mha(
    cfg: &ModelConfig,
    block: &BlockWeights,
    cache: &mut KvCache,
    y: &[f32],
    layer: usize,
) -> Result<Vec<f32>> {
    dense_mha_heads(cfg, block, cache, y, layer).map(|(sum, _)| sum)
}

/// `σ(u·W^1)` for every neuron.
pub fn mlp_activations(
    block: &BlockWeights,
    activation: Activation,
    u: &[f32],
) -> Result<Vec<f32>> {
    let mut pre = vecmat(u, &block.w1)?;
    pre.iter_mut().for_each(|z| *z = activation.apply(*z));
    Ok(pre)
}

/// `σ(u·W^1)·(W^2)^T` on the normalized input `u`.
pub fn dense_mlp(block: &BlockWeights, activation: Activation, u: &[f32]) -> Result<Vec<f32>> {
    let a = mlp_activations(block, activation, u)?;
    matvec(&block.w2, &a)
}

/// Outputs of one pre-norm block plus the sub-block values that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput {
    /// `ỹ = y + MHA(LN(y))`
    pub mid: Vec<f32>,
    /// `ŷ = ỹ + MLP(LN(ỹ))`
    pub out: Vec<f32>,
    pub attn: Vec<f32>,
    pub mlp: Vec<f32>,
}

pub(crate) fn residual(x: &[f32], f: &[f32]) -> Vec<f32> {
    x.iter().zip(f).map(|(a, b)| a + b).collect()
}

pub fn block_forward(
    cfg: &ModelConfig,
    block: &BlockWeights,
    cache: &mut KvCache,
    y: &[f32],
    layer: usize,
) -> Result<BlockOutput> {
    let attn = dense_mha(cfg, block, cache, y, layer)?;
    let mid = residual(y, &attn);
    let mlp = dense_mlp(block, cfg.activation, &mlp_norm(block, &mid)?)?;
    let out = residual(&mid, &mlp);
    Ok(BlockOutput {
        mid,
        out,
        attn,
        mlp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KvCache, TransformerWeights};
    use crate::tensor::{Matrix, Seed, StorageOrder};
    use rand::Rng;

    fn cfg(d: usize, h: usize) -> ModelConfig {
        ModelConfig::new(d, h, 1, 16, 32).unwrap()
    }

    /// Single-token attention with identity projections returns its input.
    #[test]
    fn single_token_identity_attention() {
        let c = cfg(2, 1);
        let mut b = BlockWeights::zeros(&c);
        for m in [&mut b.wq[0], &mut b.wk[0], &mut b.wv[0], &mut b.wo[0]] {
            *m = Matrix::identity(2, StorageOrder::ColContiguous);
        }
        let mut cache = KvCache::new(&c);
        // mean 0, variance 1: layer norm only applies the epsilon factor
        let x = [1.0f32, -1.0];
        let out = dense_mha(&c, &b, &mut cache, &x, 0).unwrap();
        for (o, xi) in out.iter().zip(x) {
            assert!((o - xi).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let c = cfg(8, 2);
        let mut w = TransformerWeights::random(c, Seed(1)).unwrap();
        w.blocks[0].wv.iter_mut().for_each(|m| m.scale(0.0));
        let mut cache = KvCache::new(&c);
        for t in 0..3 {
            let y = w.embed(t).unwrap();
            let out = dense_mha(&c, &w.blocks[0], &mut cache, &y, 0).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mlp_hand_example() {
        let c = cfg(2, 1);
        let mut b = BlockWeights::zeros(&c);
        b.w1 = Matrix::from_rows(
            &[
                vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
            ],
            StorageOrder::ColContiguous,
        )
        .unwrap();
        // y·W1 = [2, -3, -2, 3]; neurons 0 and 3 fire
        let a = mlp_activations(&b, Activation::Relu, &[2.0, -3.0]).unwrap();
        assert_eq!(&a[..4], &[2.0, 0.0, 0.0, 3.0]);
        // W2 columns 0 and 3 are e0 and e1
        let mut w2 = Matrix::zeros(2, 8, StorageOrder::ColContiguous);
        w2.set(0, 0, 1.0);
        w2.set(1, 3, 1.0);
        b.w2 = w2;
        assert_eq!(
            dense_mlp(&b, Activation::Relu, &[2.0, -3.0]).unwrap(),
            vec![2.0, 3.0]
        );
        b.w1.scale(0.0);
        assert_eq!(
            dense_mlp(&b, Activation::Relu, &[2.0, -3.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    /// H_i(y) = D^{-1} exp(q K^T) V, written with unshifted exponentials.
    fn naive_attention(c: &ModelConfig, b: &BlockWeights, normalized: &[Vec<f32>]) -> Vec<f64> {
        let d = c.d_model;
        let scale = c.attn_scale.factor(c.d_head);
        let proj = |x: &[f32], m: &Matrix| -> Vec<f64> {
            (0..m.cols())
                .map(|col| {
                    (0..d)
                        .map(|r| f64::from(x[r]) * f64::from(m.get(r, col)))
                        .sum()
                })
                .collect()
        };
        let y = normalized.last().unwrap();
        let mut out = vec![0.0; d];
        for i in 0..c.n_heads {
            let q = proj(y, &b.wq[i]);
            let exps: Vec<f64> = normalized
                .iter()
                .map(|x| {
                    let k = proj(x, &b.wk[i]);
                    (scale * q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()).exp()
                })
                .collect();
            let denom: f64 = exps.iter().sum();
            let mut h = vec![0.0; c.d_head];
            for (e, x) in exps.iter().zip(normalized) {
                let v = proj(x, &b.wv[i]);
                for (hc, vc) in h.iter_mut().zip(&v) {
                    *hc += e / denom * vc;
                }
            }
            for (col, o) in out.iter_mut().enumerate() {
                *o += (0..c.d_head)
                    .map(|k| h[k] * f64::from(b.wo[i].get(k, col)))
                    .sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn matches_naive_formula_oracle() {
        for (d, h, n, scale) in [
            (8, 2, 3, crate::model::AttnScale::InvSqrtHeadDim),
            (8, 2, 3, crate::model::AttnScale::Unit),
            (16, 1, 16, crate::model::AttnScale::InvSqrtHeadDim),
            (32, 1, 12, crate::model::AttnScale::InvSqrtHeadDim),
        ] {
            let c = ModelConfig::new(d, h, 1, 16, 32)
                .unwrap()
                .with_attn_scale(scale);
            let w = TransformerWeights::random(c, Seed(d as u64 + n as u64)).unwrap();
            let b = &w.blocks[0];
            let mut rng = Seed(9).rng();
            let mut cache = KvCache::new(&c);
            let mut normalized = Vec::new();
            for _ in 0..n {
                let y: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalized.push(attn_norm(b, &y).unwrap());
                let got = dense_mha(&c, b, &mut cache, &y, 0).unwrap();
                let want = naive_attention(&c, b, &normalized);
                let scale_ref = want.iter().map(|v| v.abs()).fold(1e-6, f64::max);
                for (g, w) in got.iter().zip(&want) {
                    assert!((f64::from(*g) - w).abs() / scale_ref < 1e-5, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let c = cfg(16, 4);
        let w = TransformerWeights::random(c, Seed(5)).unwrap();
        let b = &w.blocks[0];
        let mut cache = KvCache::new(&c);
        for t in 0..6 {
            let y = w.embed(t).unwrap();
            dense_mha(&c, b, &mut cache, &y, 0).unwrap();
            let u = attn_norm(b, &y).unwrap();
            for head in 0..c.n_heads {
                let q = vecmat(&u, &b.wq[head]).unwrap();
                let p = attention_weights(&q, &cache.layers[0].heads[head], 0.5, 0, head).unwrap();
                assert_eq!(p.len(), t as usize + 1);
                assert!(p.iter().all(|&v| v >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_sub_blocks_are_pure_residual() {
        let c = cfg(16, 4);
        let mut w = TransformerWeights::random(c, Seed(2)).unwrap();
        w.blocks[0].zero_attention();
        w.blocks[0].zero_mlp();
        let mut cache = KvCache::new(&c);
        let y = w.embed(3).unwrap();
        let o = block_forward(&c, &w.blocks[0], &mut cache, &y, 0).unwrap();
        assert_eq!(o.out, y);
    }

    #[test]
    fn block_forward_composes_sub_blocks_bitwise() {
        let c = cfg(16, 4);
        let w = TransformerWeights::random(c, Seed(8)).unwrap();
        let b = &w.blocks[0];
        let mut c1 = KvCache::new(&c);
        let mut c2 = KvCache::new(&c);
        for t in 0..4 {
            let y = w.embed(t).unwrap();
            let o = block_forward(&c, b, &mut c1, &y, 0).unwrap();
            let attn = dense_mha(&c, b, &mut c2, &y, 0).unwrap();
            let mid = residual(&y, &attn);
            let mlp = dense_mlp(b, c.activation, &mlp_norm(b, &mid).unwrap()).unwrap();
            assert_eq!(o.attn, attn);
            assert_eq!(o.mid, mid);
            assert_eq!(o.mlp, mlp);
            assert_eq!(o.out, residual(&mid, &mlp));
        }
        assert!(c1.bitwise_eq(&c2));
    }

    #[test]
    fn pending_inputs_block_dense_attention() {
        let c = cfg(8, 2);
        let w = TransformerWeights::random(c, Seed(1)).unwrap();
        let mut cache = KvCache::new(&c);
        cache.layers[0].heads[1].entries.push(None);
        cache.layers[0].heads[0].entries.push(None);
        cache.layers[0].pending_inputs.insert(0, vec![0.0; 8]);
        let y = w.embed(0).unwrap();
        let err = dense_mha(&c, &w.blocks[0], &mut cache, &y, 0).unwrap_err();
        assert!(matches!(err, Error::PendingInputs { layer: 0, head: 0 }));
    }
}
