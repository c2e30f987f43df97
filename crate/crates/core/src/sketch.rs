//! Random sketching matrices and Monte-Carlo norm-preservation checks.
//!
//! Every constant hidden in a `Θ(·)` is fixed: subspace-embedding row counts
//! use `b = ⌈8(k + ln(1/δ))/ε²⌉`, the ReLU check uses
//! `s ≥ 32·k·ln(64/ε)/ε²` and `d ≥ 32(k + 7)/ε²`, and the softmax checks size
//! `V` with `d = ⌈8(s + ln(1/δ))/ε²⌉` rows because `σ(Kx)` ranges over all of
//! `ℝ^s`.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{streams, Matrix, Seed, StorageOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SketchKind {
    Gaussian,
    Ams,
    CountSketch,
    SparseEmbedding(usize),
    UniformSampling,
    Srht,
}

impl SketchKind {
    pub const ALL_BASIC: [SketchKind; 6] = [
        SketchKind::Gaussian,
        SketchKind::Ams,
        SketchKind::CountSketch,
        SketchKind::SparseEmbedding(3),
        SketchKind::UniformSampling,
        SketchKind::Srht,
    ];
}

impl fmt::Display for SketchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SketchKind::Gaussian => f.write_str("gaussian"),
            SketchKind::Ams => f.write_str("ams"),
            SketchKind::CountSketch => f.write_str("countsketch"),
            SketchKind::SparseEmbedding(s) => write!(f, "sparse{s}"),
            SketchKind::UniformSampling => f.write_str("sampling"),
            SketchKind::Srht => f.write_str("srht"),
        }
    }
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Entry `(r, j)` of the unnormalized Walsh-Hadamard matrix.
fn hadamard(r: usize, j: usize) -> f64 {
    if (r & j).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A `b × n` sketching matrix.
pub fn make_sketch(kind: SketchKind, b: usize, n: usize, seed: Seed) -> Result<Matrix> {
    if b == 0 || n == 0 {
        return Err(Error::Invalid(format!(
            "sketch dims must be positive, got {b}x{n}"
        )));
    }
    let mut rng = seed.derive(streams::SKETCH).rng();
    let mut m = vec![0.0f64; b * n];
    let bf = b as f64;
    match kind {
        SketchKind::Gaussian => {
            let std = (1.0 / bf).sqrt();
            for v in &mut m {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        SketchKind::Ams => {
            let a = 1.0 / bf.sqrt();
            for v in &mut m {
                *v = a * sign(&mut rng);
            }
        }
        SketchKind::CountSketch => {
            for j in 0..n {
                let r = rng.random_range(0..b);
                m[r * n + j] = sign(&mut rng);
            }
        }
        SketchKind::SparseEmbedding(s) => {
            if s == 0 || s > b {
                return Err(Error::Invalid(format!(
                    "sparse embedding needs 1 <= s <= b, got s={s} b={b}"
                )));
            }
            let a = 1.0 / (s as f64).sqrt();
            for j in 0..n {
                for r in sample(&mut rng, b, s) {
                    m[r * n + j] = a * sign(&mut rng);
                }
            }
        }
        SketchKind::UniformSampling => {
            let a = (n as f64 / bf).sqrt();
            let signs: Vec<f64> = (0..n).map(|_| sign(&mut rng)).collect();
            for r in 0..b {
                let j = rng.random_range(0..n);
                m[r * n + j] = a * signs[j];
            }
        }
        SketchKind::Srht => {
            if !n.is_power_of_two() {
                return Err(Error::Invalid(format!(
                    "SRHT needs a power-of-two n, got {n}"
                )));
            }
            // √(n/b) · S · (H/√n) · D
            let a = 1.0 / bf.sqrt();
            let signs: Vec<f64> = (0..n).map(|_| sign(&mut rng)).collect();
            for r in 0..b {
                let h = rng.random_range(0..n);
                for j in 0..n {
                    m[r * n + j] = a * hadamard(h, j) * signs[j];
                }
            }
        }
    }
    let data = m.into_iter().map(|v| v as f32).collect();
    Matrix::from_storage(b, n, StorageOrder::RowContiguous, data)
}

/// Checks the definitional structure of a sketch exactly.
pub fn check_structure(kind: SketchKind, m: &Matrix) -> bool {
    let (b, n) = (m.rows(), m.cols());
    let col_nonzeros = |j: usize| (0..b).filter(|&i| m.get(i, j) != 0.0).count();
    let all_abs = |a: f32| m.data().iter().all(|v| v.abs() == a);
    match kind {
        SketchKind::Gaussian => m.data().iter().all(|v| v.is_finite()),
        SketchKind::Ams => all_abs((1.0 / (b as f64).sqrt()) as f32),
        SketchKind::CountSketch => {
            (0..n).all(|j| col_nonzeros(j) == 1)
                && m.data().iter().all(|v| *v == 0.0 || v.abs() == 1.0)
        }
        SketchKind::SparseEmbedding(s) => {
            let a = (1.0 / (s as f64).sqrt()) as f32;
            (0..n).all(|j| col_nonzeros(j) == s)
                && m.data().iter().all(|v| *v == 0.0 || v.abs() == a)
        }
        SketchKind::UniformSampling => {
            let a = ((n as f64 / b as f64).sqrt()) as f32;
            (0..b).all(|i| {
                let nz: Vec<f32> = (0..n).map(|j| m.get(i, j)).filter(|v| *v != 0.0).collect();
                nz.len() == 1 && nz[0].abs() == a
            })
        }
        SketchKind::Srht => n.is_power_of_two() && all_abs((1.0 / (b as f64).sqrt()) as f32),
    }
}

/// Rows needed for a `(1 ± eps)` embedding of a rank-`k` subspace with
/// failure probability `delta`.
pub fn embedding_rows(k: usize, eps: f64, delta: f64) -> usize {
    (8.0 * (k as f64 + (1.0 / delta).ln()) / (eps * eps)).ceil() as usize
}

/// Rank-`k` subspace of `ℝ^d` with orthonormal basis `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSpec {
    pub d: usize,
    pub k: usize,
    /// `k` columns of length `d`.
    pub basis: Vec<Vec<f64>>,
}

impl SubspaceSpec {
    pub fn random(d: usize, k: usize, seed: Seed) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::Invalid(format!("need 1 <= k <= d, got k={k} d={d}")));
        }
        let mut rng = seed.derive(streams::SKETCH).derive(1).rng();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for u in &basis {
                    let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                basis.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        Ok(SubspaceSpec { d, k, basis })
    }

    /// `max |UᵀU − I|`
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let ip: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((ip - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    /// `U·y`
    pub fn point(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        for (u, c) in self.basis.iter().zip(y) {
            x.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
        }
        x
    }

    pub fn sample_unit(&self, rng: &mut impl Rng) -> Vec<f64> {
        let y = crate::nns::random_unit(self.k, rng);
        self.point(&y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchReport {
    pub kind: String,
    pub b: usize,
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    pub trials: usize,
    /// Extremes of `‖output‖ / (scale·‖x‖)` over the trials.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub max_distortion: f64,
    pub pass: bool,
}

pub const SKETCH_CSV_HEADER: &str = "kind,b,n,k,eps,trials,max_distortion,pass";

impl SketchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{}",
            self.kind,
            self.b,
            self.n,
            self.k,
            self.eps,
            self.trials,
            self.max_distortion,
            self.pass
        )
    }

    fn from_ratios(
        kind: String,
        b: usize,
        n: usize,
        k: usize,
        eps: f64,
        ratios: &[f64],
        lo: f64,
        hi: f64,
    ) -> Self {
        let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        SketchReport {
            kind,
            b,
            n,
            k,
            eps,
            trials: ratios.len(),
            min_ratio,
            max_ratio,
            max_distortion: (1.0 - min_ratio).max(max_ratio - 1.0),
            pass: ratios.iter().all(|&r| r >= lo && r <= hi),
        }
    }
}

fn matvec64(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            m[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn norm64(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn gaussian64(rows: usize, cols: usize, var: f64, rng: &mut impl Rng) -> Vec<f64> {
    let std = var.sqrt();
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Samples unit vectors of the subspace and checks `‖S·U·y‖₂ ∈ 1 ± eps`.
pub fn subspace_embed_check_with(
    label: String,
    s: &Matrix,
    spec: &SubspaceSpec,
    eps: f64,
    trials: usize,
    seed: Seed,
) -> Result<SketchReport> {
    if s.cols() != spec.d {
        return Err(Error::shape(
            "subspace_embed_check",
            s.shape(),
            format!("{}", spec.d),
        ));
    }
    let sm: Vec<f64> = s.row_major_values().iter().map(|&v| f64::from(v)).collect();
    let mut rng = seed.derive(streams::SKETCH).derive(2).rng();
    let ratios: Vec<f64> = (0..trials)
        .map(|_| {
            let x = spec.sample_unit(&mut rng);
            norm64(&matvec64(&sm, s.rows(), s.cols(), &x)) / norm64(&x)
        })
        .collect();
    Ok(SketchReport::from_ratios(
        label,
        s.rows(),
        spec.d,
        spec.k,
        eps,
        &ratios,
        1.0 - eps,
        1.0 + eps,
    ))
}

/// Draws a sketch with [`embedding_rows`] rows and checks it on `trials`
/// unit vectors of the subspace.
pub fn subspace_embed_check(
    kind: SketchKind,
    spec: &SubspaceSpec,
    eps: f64,
    delta: f64,
    trials: usize,
    seed: Seed,
) -> Result<SketchReport> {
    if !(eps > 0.0 && eps < 1.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!(
            "eps={eps} and delta={delta} must lie in (0, 1)"
        )));
    }
    let b = embedding_rows(spec.k, eps, delta);
    let s = make_sketch(kind, b, spec.d, seed)?;
    subspace_embed_check_with(kind.to_string(), &s, spec, eps, trials, seed)
}

/// Minimum `(s, d)` for the ReLU norm-preservation check.
pub fn relu_dims(k: usize, eps: f64) -> (usize, usize) {
    let s = (32.0 * k as f64 * (64.0 / eps).ln() / (eps * eps)).ceil() as usize;
    let d = (32.0 * (k as f64 + 7.0) / (eps * eps)).ceil() as usize;
    (s, d)
}

/// `V·ReLU(K·x)` with `K` (`s × d`) and `V` (`d × s`) row-major.
pub fn relu_map(k: &[f64], v: &[f64], s: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = matvec64(k, s, d, x)
        .into_iter()
        .map(|a| a.max(0.0))
        .collect();
    matvec64(v, d, s, &h)
}

fn relu_ratios(
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    spec: &SubspaceSpec,
    trials: usize,
    seed: Seed,
) -> Vec<f64> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed
                .derive(streams::SKETCH)
                .derive(3)
                .derive(t as u64)
                .rng();
            let x = spec.sample_unit(&mut rng);
            norm64(&relu_map(k, v, s, d, &x)) / norm64(&x)
        })
        .collect()
}

/// `K ~ N(0, 2/s)`, `V ~ N(0, 1/d)`; checks `‖V·ReLU(Kx)‖₂ ∈ (1 ± eps)‖x‖₂`
/// for unit `x` in a random rank-`k` subspace.
pub fn relu_norm_check(
    d: usize,
    s: usize,
    k: usize,
    eps: f64,
    trials: usize,
    seed: Seed,
) -> Result<SketchReport> {
    let (s_min, d_min) = relu_dims(k, eps);
    if s < s_min || d < d_min {
        return Err(Error::Invalid(format!(
            "relu check needs s >= {s_min} and d >= {d_min}, got s={s} d={d}"
        )));
    }
    let spec = SubspaceSpec::random(d, k, seed)?;
    let mut rng = seed.derive(streams::SKETCH).derive(4).rng();
    let km = gaussian64(s, d, 2.0 / s as f64, &mut rng);
    let vm = gaussian64(d, s, 1.0 / d as f64, &mut rng);
    let ratios = relu_ratios(&km, &vm, s, d, &spec, trials, seed);
    Ok(SketchReport::from_ratios(
        "relu".into(),
        s,
        d,
        k,
        eps,
        &ratios,
        1.0 - eps,
        1.0 + eps,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxVariant {
    /// `exp(y_i) / Σ exp(y_j)`
    L1,
    /// `exp(y_i) / (Σ exp(2y_j))^{1/2}`
    L2,
}

pub fn softmax_variant(y: &[f64], variant: SoftmaxVariant) -> Vec<f64> {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let z = match variant {
        SoftmaxVariant::L1 => e.iter().sum::<f64>(),
        SoftmaxVariant::L2 => e.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    e.into_iter().map(|v| v / z).collect()
}

/// `V·σ(K·x)` with `K` (`s × d`) and `V` (`d × s`) row-major.
pub fn softmax_map(
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    x: &[f64],
    variant: SoftmaxVariant,
) -> Vec<f64> {
    matvec64(v, d, s, &softmax_variant(&matvec64(k, s, d, x), variant))
}

/// Rows of `V` used by the softmax checks.
pub fn softmax_rows(s: usize, eps: f64, delta: f64) -> usize {
    embedding_rows(s, eps, delta)
}

/// Checks `V·σ(Kx)` for unit `x` in a random rank-`k` subspace of `ℝ^d`.
///
/// `L2`: `V = τ·V̄` and the bound is `(1 ± eps)·τ`. `L1`: `V = (τ/2)·V̄` and
/// the bound is `[τ/(4√s), τ]`. `V̄ ~ N(0, 1/d)`, `K ~ N(0, 1)`.
pub fn softmax_norm_check(
    d: usize,
    s: usize,
    k: usize,
    tau: f64,
    eps: f64,
    trials: usize,
    variant: SoftmaxVariant,
    seed: Seed,
) -> Result<SketchReport> {
    if !(tau > 0.0 && tau < 1.0) || s == 0 {
        return Err(Error::Invalid(format!(
            "need tau in (0, 1) and s >= 1, got tau={tau} s={s}"
        )));
    }
    let spec = SubspaceSpec::random(d, k, seed)?;
    let mut rng = seed.derive(streams::SKETCH).derive(5).rng();
    let km = gaussian64(s, d, 1.0, &mut rng);
    let v_scale = match variant {
        SoftmaxVariant::L2 => tau,
        SoftmaxVariant::L1 => tau / 2.0,
    };
    let vm: Vec<f64> = gaussian64(d, s, 1.0 / d as f64, &mut rng)
        .into_iter()
        .map(|a| a * v_scale)
        .collect();
    let ratios: Vec<f64> = (0..trials)
        .map(|_| {
            let x = spec.sample_unit(&mut rng);
            norm64(&softmax_map(&km, &vm, s, d, &x, variant)) / (tau * norm64(&x))
        })
        .collect();
    let (lo, hi, label) = match variant {
        SoftmaxVariant::L2 => (1.0 - eps, 1.0 + eps, "softmax-l2"),
        SoftmaxVariant::L1 => (1.0 / (4.0 * (s as f64).sqrt()), 1.0, "softmax-l1"),
    };
    Ok(SketchReport::from_ratios(
        label.into(),
        s,
        d,
        k,
        eps,
        &ratios,
        lo,
        hi,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TailReport {
    pub k: usize,
    pub t: f64,
    pub samples: usize,
    pub threshold: f64,
    pub empirical: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Empirical `P[X >= k + 2√(kt) + 2t]` for `X ~ χ²_k`, checked against
/// `1.5·e^{−t}`.
pub fn chi_square_tail_check(k: usize, t: f64, samples: usize, seed: Seed) -> Result<TailReport> {
    if k == 0 || samples == 0 || !(t > 0.0) {
        return Err(Error::Invalid(
            "chi-square check needs k, samples and t positive".into(),
        ));
    }
    let mut rng = seed.derive(streams::SKETCH).derive(6).rng();
    let threshold = k as f64 + 2.0 * (k as f64 * t).sqrt() + 2.0 * t;
    let hits = (0..samples)
        .filter(|_| {
            (0..k)
                .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                .sum::<f64>()
                >= threshold
        })
        .count();
    let empirical = hits as f64 / samples as f64;
    let bound = 1.5 * (-t).exp();
    Ok(TailReport {
        k,
        t,
        samples,
        threshold,
        empirical,
        bound,
        pass: empirical <= bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Mlp,
    Attention,
}

/// Residual blocks `y = x + τ·F(x)` built from the ReLU (MLP) or `ℓ2`
/// softmax (attention) constructions; checks `ε₁ <= ‖y − x‖₂ <= ε₂` with
/// `ε₁ = (1 − eps)τ` and `ε₂ = (1 + eps)τ` on unit inputs of a rank-`k`
/// subspace.
pub fn residual_two_sides_check(
    block: BlockKind,
    k: usize,
    tau: f64,
    eps: f64,
    trials: usize,
    seed: Seed,
) -> Result<SketchReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    match block {
        BlockKind::Mlp => {
            let (s, d) = relu_dims(k, eps);
            let spec = SubspaceSpec::random(d, k, seed)?;
            let mut rng = seed.derive(streams::SKETCH).derive(7).rng();
            let km = gaussian64(s, d, 2.0 / s as f64, &mut rng);
            let vm: Vec<f64> = gaussian64(d, s, 1.0 / d as f64, &mut rng)
                .into_iter()
                .map(|a| a * tau)
                .collect();
            // ‖y − x‖ = ‖τ·F(x)‖, reported relative to τ
            let ratios: Vec<f64> = relu_ratios(&km, &vm, s, d, &spec, trials, seed)
                .into_iter()
                .map(|r| r / tau)
                .collect();
            Ok(SketchReport::from_ratios(
                "residual-mlp".into(),
                s,
                d,
                k,
                eps,
                &ratios,
                1.0 - eps,
                1.0 + eps,
            ))
        }
        BlockKind::Attention => {
            let s = 8;
            let d = softmax_rows(s, eps, 0.01).max(k);
            let mut r = softmax_norm_check(
                d,
                s,
                k,
                tau,
                eps,
                trials,
                SoftmaxVariant::L2,
                seed.derive(8),
            )?;
            r.kind = "residual-attention".into();
            Ok(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structures_hold() {
        for kind in SketchKind::ALL_BASIC {
            let m = make_sketch(kind, 16, 64, Seed(3)).unwrap();
            assert!(check_structure(kind, &m), "{kind}");
        }
        let ams = make_sketch(SketchKind::Ams, 4, 4, Seed(1)).unwrap();
        assert!(ams.data().iter().all(|v| v.abs() == 0.5));
        assert!(make_sketch(SketchKind::Srht, 4, 12, Seed(1)).is_err());
        assert!(make_sketch(SketchKind::SparseEmbedding(0), 4, 4, Seed(1)).is_err());
    }

    #[test]
    fn gaussian_columns_have_unit_norm_on_average() {
        let m = make_sketch(SketchKind::Gaussian, 400, 200, Seed(5)).unwrap();
        let mean: f64 = (0..200)
            .map(|j| {
                (0..400)
                    .map(|i| f64::from(m.get(i, j)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 200.0;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn srht_rows_are_signed_hadamard_rows() {
        let m = make_sketch(SketchKind::Srht, 8, 16, Seed(2)).unwrap();
        // every row, divided by its first entry's sign pattern, matches a Hadamard row up to D
        let d: Vec<f32> = (0..16).map(|j| m.get(0, j).signum()).collect();
        for i in 0..8 {
            let row: Vec<f64> = (0..16)
                .map(|j| f64::from(m.get(i, j) * d[j]).signum())
                .collect();
            assert!((0..16).any(|h| (0..16).all(|j| row[j] == hadamard(h, j) * row[0])));
        }
    }

    #[test]
    fn subspace_basis_is_orthonormal() {
        let spec = SubspaceSpec::random(50, 6, Seed(1)).unwrap();
        assert!(spec.orthonormality_error() < 1e-5);
        assert!(SubspaceSpec::random(3, 4, Seed(1)).is_err());
    }

    #[test]
    fn identity_sketch_has_no_distortion() {
        let spec = SubspaceSpec::random(20, 3, Seed(1)).unwrap();
        let id = Matrix::identity(20, StorageOrder::RowContiguous);
        let r =
            subspace_embed_check_with("identity".into(), &id, &spec, 0.1, 100, Seed(1)).unwrap();
        assert!(r.max_distortion < 1e-6);
        assert!(r.pass);
    }

    #[test]
    fn gaussian_embedding_passes_and_two_rows_are_reported() {
        let spec = SubspaceSpec::random(64, 4, Seed(2)).unwrap();
        let r = subspace_embed_check(SketchKind::Gaussian, &spec, 0.5, 0.01, 300, Seed(2)).unwrap();
        assert_eq!(r.b, embedding_rows(4, 0.5, 0.01));
        assert!(r.pass, "{r:?}");
        let two = make_sketch(SketchKind::Gaussian, 2, 64, Seed(2)).unwrap();
        let r2 =
            subspace_embed_check_with("gaussian".into(), &two, &spec, 0.5, 300, Seed(2)).unwrap();
        assert!(r2.max_distortion > r.max_distortion);
    }

    #[test]
    fn relu_edge_cases() {
        let k = vec![0.5, -1.0, 2.0, 0.25];
        let v = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(relu_map(&k, &v, 2, 2, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(relu_map(&[0.0; 4], &v, 2, 2, &[0.3, 0.4]), vec![0.0, 0.0]);
        assert!(relu_norm_check(10, 10, 2, 0.5, 1, Seed(1)).is_err());
    }

    #[test]
    fn single_logit_softmax_returns_the_column() {
        let v = vec![0.3, -0.4];
        let out = softmax_map(&[1.7, -2.0], &v, 1, 2, &[0.1, 0.9], SoftmaxVariant::L2);
        assert_eq!(out, v);
    }

    #[test]
    fn l1_bound_with_orthonormal_values() {
        // columns of V̄ orthonormal: ‖V̄y‖ = ‖y‖₂ ∈ [1/√s, 1] when ‖y‖₁ = 1
        let (s, d, tau) = (4, 6, 0.8);
        let mut vm = vec![0.0; d * s];
        for j in 0..s {
            vm[j * s + j] = tau / 2.0;
        }
        let km: Vec<f64> = (0..s * d)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
            .collect();
        for t in 0..50 {
            let x: Vec<f64> = (0..d).map(|j| ((t * 7 + j * 3) as f64).sin()).collect();
            let n = norm64(&x);
            let x: Vec<f64> = x.into_iter().map(|a| a / n).collect();
            let f = norm64(&softmax_map(&km, &vm, s, d, &x, SoftmaxVariant::L1));
            assert!(f >= tau / (4.0 * (s as f64).sqrt()) && f <= tau);
        }
    }

    #[test]
    fn softmax_l2_passes() {
        let s = 8;
        let d = softmax_rows(s, 0.5, 0.01);
        let r = softmax_norm_check(d, s, 2, 0.5, 0.5, 200, SoftmaxVariant::L2, Seed(1)).unwrap();
        assert!(r.pass, "{r:?}");
        let r1 = softmax_norm_check(d, s, 2, 0.5, 0.5, 200, SoftmaxVariant::L1, Seed(1)).unwrap();
        assert!(r1.pass, "{r1:?}");
    }

    #[test]
    fn chi_square_tail() {
        for t in [2.0, 4.0] {
            assert!(chi_square_tail_check(6, t, 20_000, Seed(1)).unwrap().pass);
        }
    }
}
