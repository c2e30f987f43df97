//! Dense linear algebra over `f32` storage with explicit storage order.
//!
//! Every reduction accumulates in `f64`, strictly left to right over the
//! reduced index. Kernels elsewhere in the crate rely on this so that dense,
//! sparse and pipelined execution produce bit-identical results.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StorageOrder {
    RowContiguous,
    ColContiguous,
}

impl StorageOrder {
    pub fn flipped(self) -> Self {
        match self {
            StorageOrder::RowContiguous => StorageOrder::ColContiguous,
            StorageOrder::ColContiguous => StorageOrder::RowContiguous,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    order: StorageOrder,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, order: StorageOrder) -> Self {
        Matrix {
            rows,
            cols,
            order,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from raw storage that is already laid out in `order`.
    pub fn from_storage(
        rows: usize,
        cols: usize,
        order: StorageOrder,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_storage",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            order,
            data,
        })
    }

    /// Builds a matrix from row-major logical data, storing it in `order`.
    pub fn from_row_major(
        rows: usize,
        cols: usize,
        data: &[f32],
        order: StorageOrder,
    ) -> Result<Self> {
        let m = Matrix::from_storage(rows, cols, StorageOrder::RowContiguous, data.to_vec())?;
        Ok(m.to_order(order))
    }

    pub fn from_rows(rows: &[Vec<f32>], order: StorageOrder) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            flat.extend_from_slice(r);
        }
        Matrix::from_row_major(rows.len(), cols, &flat, order)
    }

    pub fn identity(n: usize, order: StorageOrder) -> Self {
        let mut m = Matrix::zeros(n, n, order);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn gaussian(
        rows: usize,
        cols: usize,
        std: f64,
        order: StorageOrder,
        rng: &mut impl Rng,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * std) as f32
            })
            .collect();
        Matrix {
            rows,
            cols,
            order,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn order(&self) -> StorageOrder {
        self.order
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> String {
        format!("{}x{} {:?}", self.rows, self.cols, self.order)
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        match self.order {
            StorageOrder::RowContiguous => i * self.cols + j,
            StorageOrder::ColContiguous => j * self.rows + i,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[self.offset(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let o = self.offset(i, j);
        self.data[o] = v;
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Contiguous storage of row `i`. Only valid for `RowContiguous`.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.order, StorageOrder::RowContiguous);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Contiguous storage of column `j`. Only valid for `ColContiguous`.
    pub fn col(&self, j: usize) -> &[f32] {
        debug_assert_eq!(self.order, StorageOrder::ColContiguous);
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// The logical transpose, sharing the same storage bytes.
    pub fn transposed(self) -> Matrix {
        Matrix {
            rows: self.cols,
            cols: self.rows,
            order: self.order.flipped(),
            data: self.data,
        }
    }

    /// Same logical matrix, re-laid out in `order`.
    pub fn to_order(&self, order: StorageOrder) -> Matrix {
        if order == self.order {
            return self.clone();
        }
        let mut out = Matrix::zeros(self.rows, self.cols, order);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, self.get(i, j));
            }
        }
        out
    }

    /// Logical entries in row-major order, regardless of storage.
    pub fn row_major_values(&self) -> Vec<f32> {
        match self.order {
            StorageOrder::RowContiguous => self.data.clone(),
            StorageOrder::ColContiguous => self.to_order(StorageOrder::RowContiguous).data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// `Σ_j a[j]·b[j]`, accumulated in `f64` left to right.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += f64::from(x) * f64::from(y);
    }
    acc
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `out[i] = Σ_j w[i,j]·x[j]`. Identical bits for either storage order.
pub fn matvec(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "matvec",
            w.shape(),
            format!("x len {}", x.len()),
        ));
    }
    Ok(match w.order {
        StorageOrder::RowContiguous => (0..w.rows).map(|i| dot(w.row(i), x) as f32).collect(),
        StorageOrder::ColContiguous => {
            let mut acc = vec![0.0f64; w.rows];
            for (j, &xj) in x.iter().enumerate() {
                let xj = f64::from(xj);
                for (a, &wij) in acc.iter_mut().zip(w.col(j)) {
                    *a += f64::from(wij) * xj;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    })
}

/// Row vector times matrix: `out[c] = Σ_j x[j]·w[j,c]`.
pub fn vecmat(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    if w.rows != x.len() {
        return Err(Error::shape(
            "vecmat",
            format!("x len {}", x.len()),
            w.shape(),
        ));
    }
    let out = match w.order {
        StorageOrder::ColContiguous => (0..w.cols).map(|c| dot(w.col(c), x) as f32).collect(),
        StorageOrder::RowContiguous => {
            let mut acc = vec![0.0f64; w.cols];
            for (j, &xj) in x.iter().enumerate() {
                let xj = f64::from(xj);
                for (a, &wjc) in acc.iter_mut().zip(w.row(j)) {
                    *a += f64::from(wjc) * xj;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    };
    Ok(out)
}

fn check_finite(op: &'static str, x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Empty { op });
    }
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn max_of(x: &[f32]) -> f64 {
    x.iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)))
}

/// Max-shifted softmax, normalized to unit ℓ1 mass.
pub fn softmax(x: &[f32]) -> Result<Vec<f32>> {
    check_finite("softmax", x)?;
    let m = max_of(x);
    let e: Vec<f64> = x.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.iter().map(|v| (v / sum) as f32).collect())
}

/// Max-shifted softmax normalized to unit ℓ2 norm.
pub fn softmax_l2(x: &[f32]) -> Result<Vec<f32>> {
    check_finite("softmax_l2", x)?;
    let m = max_of(x);
    let e: Vec<f64> = x.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let denom = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(e.iter().map(|v| (v / denom) as f32).collect())
}

pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Result<Vec<f32>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x len {}", x.len()),
            format!("gain len {}, bias len {}", gain.len(), bias.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::shape("layer_norm", "len >= 2", x.len()));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| ((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32)
        .collect())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", a.len(), b.len()));
    }
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine_similarity",
        });
    }
    Ok((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// A 64-bit seed. Sub-streams are derived with fixed per-purpose offsets so a
/// single seed drives every random choice in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Splitmix64 step over `seed ^ stream`.
    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

/// Stream offsets passed to [`Seed::derive`].
pub mod streams {
    pub const MODEL: u64 = 1;
    pub const PROMPT: u64 = 2;
    pub const PREDICTOR: u64 = 3;
    pub const LSH: u64 = 4;
    pub const SKETCH: u64 = 5;
    pub const LEMMA: u64 = 6;
    pub const BENCH: u64 = 7;
    pub const HELDOUT: u64 = 8;
}
