//! Sparse execution: index sets, fused kernels and sparsified blocks.

pub mod bench;
mod exec;
mod index;
pub mod kernels;

pub use exec::{backfill_selected, kv_backfill, sparse_mha, sparse_mlp, PendingPolicy};
pub use index::{BudgetKind, IndexSet, SparsityBudget, UnitKind};
pub use kernels::{
    fused_gather_rows_matvec, fused_gather_rows_matvec_metered, fused_scatter_cols_matvec,
    fused_scatter_cols_matvec_metered, naive_gather_cols_matvec, naive_gather_rows_matvec,
    IoCounter, IoMeter, IoRecord, NoMeter,
};
