//! `DJVW` weight files.
//!
//! Layout after magic and version: nine `u32` config fields (`d_model`,
//! `n_heads`, `d_head`, `d_ff`, `n_layers`, `vocab`, `max_seq`, activation
//! code, attention-scale code), then per layer: `wq`, `wk`, `wv` for each
//! head in turn, `wo` for each head, `w1`, `w2`, the attention layer-norm
//! gain and bias and the MLP layer-norm gain and bias; finally the embedding
//! table. Every matrix is written in row-major logical order whatever its
//! in-memory storage order.

use std::path::Path;

use super::bytes::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::model::{Activation, AttnScale, BlockWeights, ModelConfig, TransformerWeights};
use crate::tensor::{Matrix, StorageOrder};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DJVW";
pub const WEIGHTS_VERSION: u32 = 1;

fn put_matrix(w: &mut ByteWriter, m: &Matrix) {
    w.f32s(&m.row_major_values());
}

fn get_matrix(
    r: &mut ByteReader<'_>,
    rows: usize,
    cols: usize,
    order: StorageOrder,
) -> Result<Matrix> {
    let vals = r.f32s(rows * cols)?;
    Matrix::from_row_major(rows, cols, &vals, order)
}

pub fn encode_weights(weights: &TransformerWeights) -> Vec<u8> {
    let c = &weights.config;
    let mut w = ByteWriter::new();
    w.bytes(WEIGHTS_MAGIC);
    w.u32(WEIGHTS_VERSION);
    for v in [
        c.d_model, c.n_heads, c.d_head, c.d_ff, c.n_layers, c.vocab, c.max_seq,
    ] {
        w.u32(v as u32);
    }
    w.u32(c.activation.code());
    w.u32(c.attn_scale.code());
    for b in &weights.blocks {
        for h in 0..c.n_heads {
            put_matrix(&mut w, &b.wq[h]);
            put_matrix(&mut w, &b.wk[h]);
            put_matrix(&mut w, &b.wv[h]);
        }
        for wo in &b.wo {
            put_matrix(&mut w, wo);
        }
        put_matrix(&mut w, &b.w1);
        put_matrix(&mut w, &b.w2);
        for v in [
            &b.ln_attn_gain,
            &b.ln_attn_bias,
            &b.ln_mlp_gain,
            &b.ln_mlp_bias,
        ] {
            w.f32s(v);
        }
    }
    put_matrix(&mut w, &weights.embedding);
    w.into_inner()
}

pub fn decode_weights(bytes: &[u8]) -> Result<TransformerWeights> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(WEIGHTS_MAGIC)?;
    r.expect_version(WEIGHTS_VERSION)?;
    let config = ModelConfig {
        d_model: r.usize()?,
        n_heads: r.usize()?,
        d_head: r.usize()?,
        d_ff: r.usize()?,
        n_layers: r.usize()?,
        vocab: r.usize()?,
        max_seq: r.usize()?,
        activation: Activation::from_code(r.u32()?)?,
        attn_scale: AttnScale::from_code(r.u32()?)?,
    };
    config.validate()?;
    let (d, dh, h, ff) = (config.d_model, config.d_head, config.n_heads, config.d_ff);
    let col = StorageOrder::ColContiguous;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut b = BlockWeights::zeros(&config);
        for head in 0..h {
            b.wq[head] = get_matrix(&mut r, d, dh, col)?;
            b.wk[head] = get_matrix(&mut r, d, dh, col)?;
            b.wv[head] = get_matrix(&mut r, d, dh, col)?;
        }
        for head in 0..h {
            b.wo[head] = get_matrix(&mut r, dh, d, col)?;
        }
        b.w1 = get_matrix(&mut r, d, ff, col)?;
        b.w2 = get_matrix(&mut r, d, ff, col)?;
        b.ln_attn_gain = r.f32s(d)?;
        b.ln_attn_bias = r.f32s(d)?;
        b.ln_mlp_gain = r.f32s(d)?;
        b.ln_mlp_bias = r.f32s(d)?;
        blocks.push(b);
    }
    let embedding = get_matrix(&mut r, config.vocab, d, StorageOrder::RowContiguous)?;
    r.finish()?;
    TransformerWeights::new(config, blocks, embedding)
}

pub fn write_weights(path: &Path, weights: &TransformerWeights) -> Result<()> {
    std::fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<TransformerWeights> {
    decode_weights(&std::fs::read(path)?)
}
