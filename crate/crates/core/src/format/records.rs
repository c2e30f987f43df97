//! `DJVS` sparsity record files.
//!
//! Layout after magic and version: model fingerprint `u64`; `u32` fields
//! `d_model`, `n_heads`, `d_ff`, `n_layers`; the MLP then attention budget,
//! each as a `u32` kind code (0 TopK, 1 Threshold) and an `f64` value; `u32`
//! prompt length, `u32` token count and the tokens; `u32` entry count and the
//! entries. An entry is `u32` position and layer, the `f32` vectors `y`, `ỹ`,
//! neuron magnitudes and head norms, then the neuron and head sets as varint
//! lists (length, then gaps between consecutive indices).

use std::path::Path;

use super::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::oracle::{RecordEntry, SparsityRecord};
use crate::sparse::{BudgetKind, IndexSet, SparsityBudget, UnitKind};

pub const RECORDS_MAGIC: &[u8; 4] = b"DJVS";
pub const RECORDS_VERSION: u32 = 1;

fn put_budget(w: &mut ByteWriter, b: &SparsityBudget) {
    match b.kind {
        BudgetKind::TopK(k) => {
            w.u32(0);
            w.f64(k as f64);
        }
        BudgetKind::Threshold(t) => {
            w.u32(1);
            w.f64(t);
        }
    }
}

fn get_budget(r: &mut ByteReader<'_>, applies_to: UnitKind) -> Result<SparsityBudget> {
    let code = r.u32()?;
    let v = r.f64()?;
    let kind = match code {
        0 if v >= 0.0 && v.fract() == 0.0 => BudgetKind::TopK(v as usize),
        1 => BudgetKind::Threshold(v),
        _ => return Err(Error::Format(format!("bad budget code {code} value {v}"))),
    };
    Ok(SparsityBudget { kind, applies_to })
}

fn put_set(w: &mut ByteWriter, s: &IndexSet) {
    w.varint(s.len() as u64);
    let mut prev = 0;
    for i in s.iter() {
        w.varint((i - prev) as u64);
        prev = i;
    }
}

fn get_set(r: &mut ByteReader<'_>, universe: usize) -> Result<IndexSet> {
    let n = r.varint()? as usize;
    if n > universe {
        return Err(Error::Format(format!(
            "set of {n} exceeds universe {universe}"
        )));
    }
    let mut idx = Vec::with_capacity(n);
    let mut cur = 0u64;
    for k in 0..n {
        let gap = r.varint()?;
        if k > 0 && gap == 0 {
            return Err(Error::Format("repeated index in set".into()));
        }
        cur = cur
            .checked_add(gap)
            .ok_or_else(|| Error::Format("index overflow".into()))?;
        idx.push(cur as usize);
    }
    IndexSet::new(idx, universe).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_records(rec: &SparsityRecord) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(RECORDS_MAGIC);
    w.u32(RECORDS_VERSION);
    w.u64(rec.fingerprint);
    for v in [rec.d_model, rec.n_heads, rec.d_ff, rec.n_layers] {
        w.usize_u32(v)?;
    }
    put_budget(&mut w, &rec.budget_mlp);
    put_budget(&mut w, &rec.budget_attn);
    w.usize_u32(rec.prompt_len)?;
    w.usize_u32(rec.tokens.len())?;
    for &t in &rec.tokens {
        w.u32(t);
    }
    w.usize_u32(rec.entries.len())?;
    for e in &rec.entries {
        w.usize_u32(e.position)?;
        w.usize_u32(e.layer)?;
        w.f32s(&e.input);
        w.f32s(&e.mid);
        w.f32s(&e.neuron_magnitudes);
        w.f32s(&e.head_norms);
        put_set(&mut w, &e.mlp_active);
        put_set(&mut w, &e.heads_active);
    }
    Ok(w.into_inner())
}

pub fn decode_records(bytes: &[u8]) -> Result<SparsityRecord> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(RECORDS_MAGIC)?;
    r.expect_version(RECORDS_VERSION)?;
    let fingerprint = r.u64()?;
    let (d_model, n_heads, d_ff, n_layers) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let budget_mlp = get_budget(&mut r, UnitKind::Neurons)?;
    let budget_attn = get_budget(&mut r, UnitKind::Heads)?;
    let prompt_len = r.usize()?;
    let n_tokens = r.usize()?;
    if prompt_len > n_tokens {
        return Err(Error::Format("prompt longer than token list".into()));
    }
    let tokens = (0..n_tokens).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_entries = r.usize()?;
    let mut entries = Vec::with_capacity(n_entries.min(1 << 16));
    for _ in 0..n_entries {
        entries.push(RecordEntry {
            position: r.usize()?,
            layer: r.usize()?,
            input: r.f32s(d_model)?,
            mid: r.f32s(d_model)?,
            neuron_magnitudes: r.f32s(d_ff)?,
            head_norms: r.f32s(n_heads)?,
            mlp_active: get_set(&mut r, d_ff)?,
            heads_active: get_set(&mut r, n_heads)?,
        });
    }
    r.finish()?;
    Ok(SparsityRecord {
        fingerprint,
        d_model,
        n_heads,
        d_ff,
        n_layers,
        budget_mlp,
        budget_attn,
        tokens,
        prompt_len,
        entries,
    })
}

pub fn write_records(path: &Path, rec: &SparsityRecord) -> Result<()> {
    std::fs::write(path, encode_records(rec)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<SparsityRecord> {
    decode_records(&std::fs::read(path)?)
}
