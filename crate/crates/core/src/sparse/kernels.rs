//! Fused index-and-multiply kernels.
//!
//! The fused kernels read the selected rows (or columns) straight out of the
//! weight storage. The `naive_*` baselines first copy the selection into a
//! fresh matrix and then multiply, which is the 3x memory-traffic pattern the
//! fused kernels avoid. Both accumulate identically, so their outputs agree
//! bit for bit.

use std::time::Instant;

use super::index::IndexSet;
use crate::error::{Error, Result};
use crate::tensor::{dot, matvec, Matrix, StorageOrder};

/// Sink for float load/store counts.
pub trait IoMeter {
    fn read(&mut self, floats: usize);
    fn write(&mut self, floats: usize);
}

/// Discards counts; compiles away.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoMeter;

impl IoMeter for NoMeter {
    #[inline(always)]
    fn read(&mut self, _: usize) {}
    #[inline(always)]
    fn write(&mut self, _: usize) {}
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoCounter {
    pub reads: usize,
    pub writes: usize,
}

impl IoCounter {
    pub fn total(&self) -> usize {
        self.reads + self.writes
    }
}

impl IoMeter for IoCounter {
    fn read(&mut self, floats: usize) {
        self.reads += floats;
    }
    fn write(&mut self, floats: usize) {
        self.writes += floats;
    }
}

#[inline]
pub(crate) fn gather_rows_raw(
    data: &[f32],
    cols: usize,
    idx: &[usize],
    x: &[f32],
    meter: &mut impl IoMeter,
) -> Vec<f32> {
    meter.read(cols);
    let out: Vec<f32> = idx
        .iter()
        .map(|&r| dot(&data[r * cols..(r + 1) * cols], x) as f32)
        .collect();
    meter.read(idx.len() * cols);
    meter.write(idx.len());
    out
}

#[inline]
pub(crate) fn scatter_cols_raw(
    data: &[f32],
    rows: usize,
    idx: &[usize],
    s: &[f32],
    meter: &mut impl IoMeter,
) -> Vec<f32> {
    let mut acc = vec![0.0f64; rows];
    for (&c, &sp) in idx.iter().zip(s) {
        let sp = f64::from(sp);
        for (a, &w) in acc.iter_mut().zip(&data[c * rows..(c + 1) * rows]) {
            *a += f64::from(w) * sp;
        }
    }
    meter.read(idx.len() * rows + idx.len());
    meter.write(rows);
    acc.into_iter().map(|v| v as f32).collect()
}

fn require_order(op: &'static str, w: &Matrix, required: StorageOrder) -> Result<()> {
    if w.order() != required {
        return Err(Error::StorageOrder {
            op,
            required,
            actual: w.order(),
        });
    }
    Ok(())
}

fn check_gather(op: &'static str, w: &Matrix, idx: &IndexSet, x: &[f32]) -> Result<()> {
    if idx.universe() != w.rows() {
        return Err(Error::shape(
            op,
            w.shape(),
            format!("index universe {}", idx.universe()),
        ));
    }
    if w.cols() != x.len() {
        return Err(Error::shape(op, w.shape(), format!("x len {}", x.len())));
    }
    Ok(())
}

fn check_scatter(op: &'static str, w: &Matrix, idx: &IndexSet, s: &[f32]) -> Result<()> {
    if idx.universe() != w.cols() {
        return Err(Error::shape(
            op,
            w.shape(),
            format!("index universe {}", idx.universe()),
        ));
    }
    if idx.len() != s.len() {
        return Err(Error::shape(
            op,
            format!("|idx| {}", idx.len()),
            format!("s len {}", s.len()),
        ));
    }
    Ok(())
}

/// `out[p] = Σ_j w[idx[p], j]·x[j]` in one pass over the selected rows.
pub fn fused_gather_rows_matvec(w: &Matrix, idx: &IndexSet, x: &[f32]) -> Result<Vec<f32>> {
    fused_gather_rows_matvec_metered(w, idx, x, &mut NoMeter)
}

pub fn fused_gather_rows_matvec_metered(
    w: &Matrix,
    idx: &IndexSet,
    x: &[f32],
    meter: &mut impl IoMeter,
) -> Result<Vec<f32>> {
    const OP: &str = "fused_gather_rows_matvec";
    require_order(OP, w, StorageOrder::RowContiguous)?;
    check_gather(OP, w, idx, x)?;
    Ok(gather_rows_raw(w.data(), w.cols(), idx.indices(), x, meter))
}

/// `out = Σ_p W[:, idx[p]]·s[p]` for a column-contiguous `W`.
pub fn fused_scatter_cols_matvec(w: &Matrix, idx: &IndexSet, s: &[f32]) -> Result<Vec<f32>> {
    fused_scatter_cols_matvec_metered(w, idx, s, &mut NoMeter)
}

pub fn fused_scatter_cols_matvec_metered(
    w: &Matrix,
    idx: &IndexSet,
    s: &[f32],
    meter: &mut impl IoMeter,
) -> Result<Vec<f32>> {
    const OP: &str = "fused_scatter_cols_matvec";
    require_order(OP, w, StorageOrder::ColContiguous)?;
    check_scatter(OP, w, idx, s)?;
    Ok(scatter_cols_raw(
        w.data(),
        w.rows(),
        idx.indices(),
        s,
        meter,
    ))
}

/// Gathers the selected rows into a new matrix, then multiplies.
pub fn naive_gather_rows_matvec(
    w: &Matrix,
    idx: &IndexSet,
    x: &[f32],
    meter: &mut impl IoMeter,
) -> Result<Vec<f32>> {
    check_gather("naive_gather_rows_matvec", w, idx, x)?;
    let cols = w.cols();
    let mut gathered = Vec::with_capacity(idx.len() * cols);
    for r in idx.iter() {
        gathered.extend((0..cols).map(|j| w.get(r, j)));
    }
    meter.read(idx.len() * cols);
    meter.write(idx.len() * cols);
    let sub = Matrix::from_storage(idx.len(), cols, StorageOrder::RowContiguous, gathered)?;
    let out = matvec(&sub, x)?;
    meter.read(idx.len() * cols + cols);
    meter.write(idx.len());
    Ok(out)
}

/// Gathers the selected columns into a new matrix, then multiplies.
pub fn naive_gather_cols_matvec(
    w: &Matrix,
    idx: &IndexSet,
    s: &[f32],
    meter: &mut impl IoMeter,
) -> Result<Vec<f32>> {
    check_scatter("naive_gather_cols_matvec", w, idx, s)?;
    let rows = w.rows();
    let mut gathered = Vec::with_capacity(idx.len() * rows);
    for c in idx.iter() {
        gathered.extend((0..rows).map(|i| w.get(i, c)));
    }
    meter.read(idx.len() * rows);
    meter.write(idx.len() * rows);
    let sub = Matrix::from_storage(rows, idx.len(), StorageOrder::ColContiguous, gathered)?;
    let out = matvec(&sub, s)?;
    meter.read(idx.len() * rows + idx.len());
    meter.write(rows);
    Ok(out)
}

/// One row of the IO-counter report.
#[derive(Clone, Debug, PartialEq)]
pub struct IoRecord {
    pub kernel: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub density: f64,
    pub float_reads: usize,
    pub float_writes: usize,
    pub nanos: u128,
}

pub const IO_CSV_HEADER: &str = "kernel,rows,cols,density,float_reads,float_writes,nanos";

impl IoRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{},{},{}",
            self.kernel,
            self.rows,
            self.cols,
            self.density,
            self.float_reads,
            self.float_writes,
            self.nanos
        )
    }
}

/// Runs the fused and naive row kernels once each with counting enabled.
pub fn measure_row_kernels(w: &Matrix, idx: &IndexSet, x: &[f32]) -> Result<[IoRecord; 2]> {
    let mut fused = IoCounter::default();
    let t = Instant::now();
    fused_gather_rows_matvec_metered(w, idx, x, &mut fused)?;
    let fused_ns = t.elapsed().as_nanos();
    let mut naive = IoCounter::default();
    let t = Instant::now();
    naive_gather_rows_matvec(w, idx, x, &mut naive)?;
    let naive_ns = t.elapsed().as_nanos();
    let rec = |kernel, c: IoCounter, nanos| IoRecord {
        kernel,
        rows: w.rows(),
        cols: w.cols(),
        density: idx.density(),
        float_reads: c.reads,
        float_writes: c.writes,
        nanos,
    };
    Ok([
        rec("fused_gather_rows", fused, fused_ns),
        rec("naive_gather_rows", naive, naive_ns),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Seed;
    use proptest::prelude::*;

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn gather_examples() {
        let w = Matrix::from_rows(
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            StorageOrder::RowContiguous,
        )
        .unwrap();
        let idx = IndexSet::new(vec![0, 2], 3).unwrap();
        assert_eq!(
            fused_gather_rows_matvec(&w, &idx, &[1.0, 1.0]).unwrap(),
            vec![3.0, 11.0]
        );
        assert!(
            fused_gather_rows_matvec(&w, &IndexSet::empty(3), &[1.0, 1.0])
                .unwrap()
                .is_empty()
        );
        let full = fused_gather_rows_matvec(&w, &IndexSet::full(3), &[0.5, -2.0]).unwrap();
        assert_eq!(bits(&full), bits(&matvec(&w, &[0.5, -2.0]).unwrap()));
    }

    #[test]
    fn gather_rejects_wrong_order_and_universe() {
        let w = Matrix::zeros(3, 2, StorageOrder::ColContiguous);
        let err = fused_gather_rows_matvec(&w, &IndexSet::full(3), &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("RowContiguous"), "{err}");
        let w = Matrix::zeros(3, 2, StorageOrder::RowContiguous);
        assert!(fused_gather_rows_matvec(&w, &IndexSet::full(4), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn scatter_examples() {
        let w = Matrix::from_rows(
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            StorageOrder::ColContiguous,
        )
        .unwrap();
        let idx = IndexSet::new(vec![1], 3).unwrap();
        assert_eq!(
            fused_scatter_cols_matvec(&w, &idx, &[2.0]).unwrap(),
            vec![4.0, 10.0]
        );
        let s = [0.0; 3];
        assert_eq!(
            fused_scatter_cols_matvec(&w, &IndexSet::full(3), &s).unwrap(),
            vec![0.0, 0.0]
        );
        let s = [0.3, -1.5, 2.25];
        let full = fused_scatter_cols_matvec(&w, &IndexSet::full(3), &s).unwrap();
        assert_eq!(bits(&full), bits(&matvec(&w, &s).unwrap()));
        let row_major = w.to_order(StorageOrder::RowContiguous);
        assert!(fused_scatter_cols_matvec(&row_major, &idx, &[2.0]).is_err());
    }

    #[test]
    fn io_model_counts() {
        let mut rng = Seed(1).rng();
        let w = Matrix::gaussian(64, 32, 1.0, StorageOrder::RowContiguous, &mut rng);
        let idx = IndexSet::new((0..64).step_by(4).collect(), 64).unwrap();
        let x = vec![1.0; 32];
        let [fused, naive] = measure_row_kernels(&w, &idx, &x).unwrap();
        let (k, cols) = (idx.len(), 32);
        assert_eq!(fused.float_reads + fused.float_writes, k * cols + cols + k);
        assert_eq!(
            naive.float_reads + naive.float_writes,
            3 * k * cols + cols + k
        );
    }

    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<bool>, Vec<f32>)> {
        (1usize..24, 1usize..24).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                prop::collection::vec(-4.0f32..4.0, r * c),
                prop::collection::vec(any::<bool>(), r),
                prop::collection::vec(-4.0f32..4.0, c.max(r)),
            )
        })
    }

    proptest! {
        #[test]
        fn fused_equals_gather_then_multiply((r, c, data, mask, v) in instance()) {
            let idx = IndexSet::new((0..r).filter(|&i| mask[i]).collect(), r).unwrap();
            let w = Matrix::from_row_major(r, c, &data, StorageOrder::RowContiguous).unwrap();
            let x = &v[..c];
            let fused = fused_gather_rows_matvec(&w, &idx, x).unwrap();
            let naive = naive_gather_rows_matvec(&w, &idx, x, &mut NoMeter).unwrap();
            prop_assert_eq!(bits(&fused), bits(&naive));

            // same storage read as the transpose for the column kernel
            let wt = w.clone().transposed();
            let s = &v[..idx.len()];
            let fused = fused_scatter_cols_matvec(&wt, &idx, s).unwrap();
            let naive = naive_gather_cols_matvec(&wt, &idx, s, &mut NoMeter).unwrap();
            prop_assert_eq!(bits(&fused), bits(&naive));
        }
    }
}
