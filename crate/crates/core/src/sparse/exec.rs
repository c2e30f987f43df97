use super::index::IndexSet;
use super::kernels::{gather_rows_raw, scatter_cols_raw, NoMeter};
use crate::error::{Error, Result};
use crate::model::forward::{attn_norm, head_contribution, project_kv, sum_heads};
use crate::model::{Activation, BlockWeights, KvCache, ModelConfig};

/// What happens to heads that are not selected at the current position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PendingPolicy {
    /// Park the pre-norm input and project K/V when the head is next selected.
    #[default]
    Lazy,
    /// Project K/V immediately even though the head's output is skipped.
    Eager,
}

/// `σ(u·W^1_S)·(W^2_S)^T` on the normalized input `u`, reading only the
/// selected neurons' weights.
pub fn sparse_mlp(
    block: &BlockWeights,
    activation: Activation,
    u: &[f32],
    s_m: &IndexSet,
) -> Result<Vec<f32>> {
    let (d, d_ff) = (block.w1.rows(), block.w1.cols());
    if s_m.universe() != d_ff {
        return Err(Error::shape(
            "sparse_mlp",
            format!("d_ff {d_ff}"),
            format!("universe {}", s_m.universe()),
        ));
    }
    if u.len() != d {
        return Err(Error::shape(
            "sparse_mlp",
            format!("d {d}"),
            format!("u len {}", u.len()),
        ));
    }
    // w1 is column-contiguous d x d_ff, i.e. row-contiguous (W^1)^T
    let mut act = gather_rows_raw(block.w1.data(), d, s_m.indices(), u, &mut NoMeter);
    act.iter_mut().for_each(|z| *z = activation.apply(*z));
    Ok(scatter_cols_raw(
        block.w2.data(),
        d,
        s_m.indices(),
        &act,
        &mut NoMeter,
    ))
}

/// Attention restricted to the heads in `s_a`.
///
/// Selected heads must have K/V at every earlier position. Non-selected heads
/// either park `y` for a later [`kv_backfill`] (lazy) or are projected now
/// (eager); their outputs are skipped either way.
pub fn sparse_mha(
    cfg: &ModelConfig,
    block: &BlockWeights,
    cache: &mut KvCache,
    y: &[f32],
    layer: usize,
    s_a: &IndexSet,
    policy: PendingPolicy,
) -> Result<Vec<f32>> {
    if s_a.universe() != cfg.n_heads {
        return Err(Error::shape(
            "sparse_mha",
            format!("{} heads", cfg.n_heads),
            format!("universe {}", s_a.universe()),
        ));
    }
    let lc = cache
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))?;
    for head in s_a.iter() {
        if let Some(position) = lc.heads[head].pending_positions().next() {
            return Err(Error::MissingKv {
                layer,
                head,
                position,
            });
        }
    }
    let u = attn_norm(block, y)?;
    let position = lc.len();
    let mut parked = false;
    for head in 0..cfg.n_heads {
        if s_a.contains(head) || policy == PendingPolicy::Eager {
            lc.heads[head]
                .entries
                .push(Some(project_kv(block, head, &u)?));
        } else {
            lc.heads[head].entries.push(None);
            parked = true;
        }
    }
    if parked {
        lc.pending_inputs.insert(position, y.to_vec());
    }
    let contribs = s_a
        .iter()
        .map(|head| head_contribution(cfg, block, lc, layer, head, &u))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_heads(cfg.d_model, contribs.iter().map(Vec::as_slice)))
}

/// Projects K/V for every parked position of `head` from the stored pre-norm
/// inputs and drops inputs no head still needs.
pub fn kv_backfill(
    block: &BlockWeights,
    cache: &mut KvCache,
    layer: usize,
    head: usize,
) -> Result<()> {
    let lc = cache
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))?;
    let positions: Vec<usize> = lc.heads[head].pending_positions().collect();
    if positions.is_empty() {
        return Ok(());
    }
    let mut filled = Vec::with_capacity(positions.len());
    for &p in &positions {
        let y = lc.pending_inputs.get(&p).ok_or_else(|| {
            Error::Invalid(format!(
                "layer {layer} head {head}: no stored input for position {p}"
            ))
        })?;
        filled.push(project_kv(block, head, &attn_norm(block, y)?)?);
    }
    for (p, kv) in positions.into_iter().zip(filled) {
        lc.heads[head].entries[p] = Some(kv);
    }
    lc.prune_pending();
    Ok(())
}

/// Backfills every selected head that has parked positions.
pub fn backfill_selected(
    block: &BlockWeights,
    cache: &mut KvCache,
    layer: usize,
    s_a: &IndexSet,
) -> Result<()> {
    for head in s_a.iter() {
        kv_backfill(block, cache, layer, head)?;
    }
    Ok(())
}
