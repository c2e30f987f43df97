//! The two-layer classifier `sigmoid(ReLU(x·W_in + b_in)·W_out + b_out)`.
//!
//! Training works on a flat `f64` parameter vector ([`Params`]); the stored
//! predictor keeps `f32` matrices like the model weights.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::sparse::{BudgetKind, IndexSet, UnitKind};
use crate::tensor::{Matrix, StorageOrder};

pub const PREDICTOR_MAGIC: &[u8; 4] = b"DJVP";
const PREDICTOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights {
    /// Layer whose active set this predictor produces.
    pub layer: usize,
    pub kind: UnitKind,
    /// Fingerprint of the model the training records came from.
    pub fingerprint: u64,
    /// `d × r`
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `r × m`
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

impl PredictorWeights {
    pub fn d(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    pub fn m(&self) -> usize {
        self.w_out.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r, m) = (self.d(), self.hidden(), self.m());
        if r == 0 || m == 0 || d == 0 {
            return Err(Error::Invalid(format!(
                "predictor dims d={d} r={r} m={m} must be positive"
            )));
        }
        if self.w_out.rows() != r || self.b_in.len() != r || self.b_out.len() != m {
            return Err(Error::Invalid("predictor tensor shapes disagree".into()));
        }
        Ok(())
    }

    /// Per-unit probabilities.
    pub fn scores(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.d() {
            return Err(Error::shape(
                "predict",
                format!("{}", x.len()),
                self.w_in.shape(),
            ));
        }
        let h: Vec<f32> = crate::tensor::vecmat(x, &self.w_in)?
            .iter()
            .zip(&self.b_in)
            .map(|(a, b)| (f64::from(*a) + f64::from(*b)).max(0.0) as f32)
            .collect();
        let z = crate::tensor::vecmat(&h, &self.w_out)?;
        Ok(z.iter()
            .zip(&self.b_out)
            .map(|(a, b)| sigmoid(f64::from(*a) + f64::from(*b)) as f32)
            .collect())
    }

    pub fn predict(&self, x: &[f32], budget: &BudgetKind) -> Result<IndexSet> {
        Ok(budget.select(&self.scores(x)?))
    }

    pub(crate) fn from_params(
        p: &Params,
        layer: usize,
        kind: UnitKind,
        fingerprint: u64,
    ) -> Result<Self> {
        let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        Ok(PredictorWeights {
            layer,
            kind,
            fingerprint,
            w_in: Matrix::from_row_major(p.d, p.r, &f(p.w_in()), StorageOrder::ColContiguous)?,
            b_in: f(p.b_in()),
            w_out: Matrix::from_row_major(p.r, p.m, &f(p.w_out()), StorageOrder::ColContiguous)?,
            b_out: f(p.b_out()),
        })
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) − z·y + ln(1 + e^{−|z|})`, stable for large `|z|`.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Flat parameters, laid out as `w_in` (row-major `d × r`), `b_in`, `w_out`
/// (row-major `r × m`), `b_out`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Params {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub v: Vec<f64>,
}

impl Params {
    pub fn len_for(d: usize, r: usize, m: usize) -> usize {
        d * r + r + r * m + m
    }

    /// He-scaled input layer, `1/√r` output layer, zero biases.
    pub fn init(d: usize, r: usize, m: usize, rng: &mut impl Rng) -> Self {
        let mut v = vec![0.0; Self::len_for(d, r, m)];
        let n_in = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("finite std");
        let n_out = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("finite std");
        for a in &mut v[..d * r] {
            *a = n_in.sample(rng);
        }
        let o = d * r + r;
        for a in &mut v[o..o + r * m] {
            *a = n_out.sample(rng);
        }
        Params { d, r, m, v }
    }

    pub fn w_in(&self) -> &[f64] {
        &self.v[..self.d * self.r]
    }

    pub fn b_in(&self) -> &[f64] {
        &self.v[self.d * self.r..self.d * self.r + self.r]
    }

    pub fn w_out(&self) -> &[f64] {
        let o = self.d * self.r + self.r;
        &self.v[o..o + self.r * self.m]
    }

    pub fn b_out(&self) -> &[f64] {
        &self.v[self.v.len() - self.m..]
    }

    /// Returns `(pre-activation hidden, logits)`.
    pub fn forward(&self, x: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let (d, r, m) = (self.d, self.r, self.m);
        let (w_in, b_in, w_out, b_out) = (self.w_in(), self.b_in(), self.w_out(), self.b_out());
        let mut pre = b_in.to_vec();
        for i in 0..d {
            let xi = f64::from(x[i]);
            if xi != 0.0 {
                let row = &w_in[i * r..(i + 1) * r];
                for (p, w) in pre.iter_mut().zip(row) {
                    *p += xi * w;
                }
            }
        }
        let mut z = b_out.to_vec();
        for j in 0..r {
            let h = pre[j].max(0.0);
            if h != 0.0 {
                let row = &w_out[j * m..(j + 1) * m];
                for (zk, w) in z.iter_mut().zip(row) {
                    *zk += h * w;
                }
            }
        }
        (pre, z)
    }

    /// Mean per-unit binary cross-entropy over the batch.
    pub fn loss(&self, xs: &[&[f32]], ys: &[&[bool]]) -> f64 {
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let (_, z) = self.forward(x);
            total += z
                .iter()
                .zip(y.iter())
                .map(|(&z, &y)| bce_with_logit(z, f64::from(u8::from(y))))
                .sum::<f64>();
        }
        total / (xs.len() * self.m) as f64
    }

    /// Loss and gradient of [`Params::loss`].
    pub fn loss_and_grad(&self, xs: &[&[f32]], ys: &[&[bool]]) -> (f64, Vec<f64>) {
        let (d, r, m) = (self.d, self.r, self.m);
        let scale = 1.0 / (xs.len() * m) as f64;
        let mut g = vec![0.0; self.v.len()];
        let (o_bin, o_wout, o_bout) = (d * r, d * r + r, d * r + r + r * m);
        let w_out = self.w_out();
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let (pre, z) = self.forward(x);
            let mut dz = vec![0.0; m];
            for k in 0..m {
                let yk = f64::from(u8::from(y[k]));
                total += bce_with_logit(z[k], yk);
                dz[k] = (sigmoid(z[k]) - yk) * scale;
                g[o_bout + k] += dz[k];
            }
            let mut dpre = vec![0.0; r];
            for j in 0..r {
                if pre[j] > 0.0 {
                    let row = &w_out[j * m..(j + 1) * m];
                    let gw = &mut g[o_wout + j * m..o_wout + (j + 1) * m];
                    let mut acc = 0.0;
                    for k in 0..m {
                        gw[k] += pre[j] * dz[k];
                        acc += row[k] * dz[k];
                    }
                    dpre[j] = acc;
                    g[o_bin + j] += acc;
                }
            }
            for i in 0..d {
                let xi = f64::from(x[i]);
                if xi != 0.0 {
                    for j in 0..r {
                        g[i * r + j] += xi * dpre[j];
                    }
                }
            }
        }
        (total * scale, g)
    }
}

/// First-moment / second-moment optimizer state.
pub(crate) struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Layout after magic and version: model fingerprint `u64`, then `u32`
/// layer, kind, `d`, `r`, `m`, then `w_in`, `b_in`, `w_out`, `b_out` as
/// row-major `f32`.
pub fn encode_predictor(p: &PredictorWeights) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(PREDICTOR_MAGIC);
    w.u32(PREDICTOR_VERSION);
    w.u64(p.fingerprint);
    for v in [
        p.layer as u32,
        p.kind.code(),
        p.d() as u32,
        p.hidden() as u32,
        p.m() as u32,
    ] {
        w.u32(v);
    }
    w.f32s(&p.w_in.row_major_values());
    w.f32s(&p.b_in);
    w.f32s(&p.w_out.row_major_values());
    w.f32s(&p.b_out);
    w.into_inner()
}

pub fn decode_predictor(bytes: &[u8]) -> Result<PredictorWeights> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(PREDICTOR_MAGIC)?;
    r.expect_version(PREDICTOR_VERSION)?;
    let fingerprint = r.u64()?;
    let layer = r.usize()?;
    let kind = UnitKind::from_code(r.u32()?)?;
    let (d, h, m) = (r.usize()?, r.usize()?, r.usize()?);
    let w_in = Matrix::from_row_major(d, h, &r.f32s(d * h)?, StorageOrder::ColContiguous)?;
    let b_in = r.f32s(h)?;
    let w_out = Matrix::from_row_major(h, m, &r.f32s(h * m)?, StorageOrder::ColContiguous)?;
    let b_out = r.f32s(m)?;
    r.finish()?;
    let p = PredictorWeights {
        layer,
        kind,
        fingerprint,
        w_in,
        b_in,
        w_out,
        b_out,
    };
    p.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(p)
}

pub fn write_predictor(path: &Path, p: &PredictorWeights) -> Result<()> {
    std::fs::write(path, encode_predictor(p))?;
    Ok(())
}

pub fn read_predictor(path: &Path) -> Result<PredictorWeights> {
    decode_predictor(&std::fs::read(path)?)
}
