//! Depth-direction rewiring of the block dataflow, and the error bounds for
//! reordering and parallelizing near-identity residual operators.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::forward::{mlp_norm, residual};
use crate::model::{
    dense_mha, dense_mlp, dense_step, drive, drive_forced, Decoder, Generation, LayerTrace,
    StepTrace, TransformerWeights,
};
use crate::sketch::SubspaceSpec;
use crate::sparse::PendingPolicy;
use crate::tensor::{cosine_similarity, norm, streams, sub, Matrix, Seed, StorageOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthTransform {
    /// `ŷ_l = y_l + MHA_l(y_l) + MLP_l(y_l)`
    Parallel2,
    /// Layers `l, l+1` read the same `y_l` and all four sub-blocks are summed.
    Parallel4,
    /// Drops the last layer of each consecutive group of `n`.
    SkipEvery(usize),
}

impl fmt::Display for DepthTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthTransform::Parallel2 => f.write_str("parallel2"),
            DepthTransform::Parallel4 => f.write_str("parallel4"),
            DepthTransform::SkipEvery(n) => write!(f, "skip{n}"),
        }
    }
}

impl FromStr for DepthTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel2" => Ok(DepthTransform::Parallel2),
            "parallel4" => Ok(DepthTransform::Parallel4),
            _ => s
                .strip_prefix("skip")
                .and_then(|n| n.parse().ok())
                .map(DepthTransform::SkipEvery)
                .ok_or_else(|| Error::Invalid(format!("unknown depth transform '{s}'"))),
        }
    }
}

impl DepthTransform {
    /// Groups of model layers evaluated as one stage, in order.
    pub fn stages(self, n_layers: usize) -> Result<Vec<Vec<usize>>> {
        match self {
            DepthTransform::Parallel2 => Ok((0..n_layers).map(|l| vec![l]).collect()),
            DepthTransform::Parallel4 => {
                if n_layers % 2 != 0 {
                    return Err(Error::Invalid(format!(
                        "parallel4 needs an even layer count, got {n_layers}"
                    )));
                }
                Ok((0..n_layers / 2).map(|p| vec![2 * p, 2 * p + 1]).collect())
            }
            DepthTransform::SkipEvery(n) => {
                if n < 2 || n_layers < n {
                    return Err(Error::Invalid(format!(
                        "skip{n} needs n >= 2 and at least n layers, got {n_layers}"
                    )));
                }
                Ok((0..n_layers)
                    .filter(|l| !self.skips(*l))
                    .map(|l| vec![l])
                    .collect())
            }
        }
    }

    pub fn skips(self, layer: usize) -> bool {
        matches!(self, DepthTransform::SkipEvery(n) if (layer + 1) % n == 0)
    }

    /// The model layer whose output each stage produces.
    pub fn stage_end_layers(self, n_layers: usize) -> Result<Vec<usize>> {
        Ok(self
            .stages(n_layers)?
            .into_iter()
            .map(|s| *s.last().expect("stages are nonempty"))
            .collect())
    }
}

fn transformed_step(
    decoder: &mut Decoder<'_>,
    stages: &[Vec<usize>],
    transform: DepthTransform,
    position: usize,
    token: u32,
) -> Result<StepTrace> {
    let w = decoder.weights();
    let cfg = &w.config;
    let mut y = w.embed(token)?;
    let mut layers = Vec::with_capacity(stages.len());
    for stage in stages {
        let (mid, out) = if matches!(transform, DepthTransform::SkipEvery(_)) {
            let o = decoder.dense_layer(stage[0], &y)?;
            (o.mid, o.out)
        } else {
            let mut attn_sum = y.clone();
            let mut mlps = Vec::with_capacity(stage.len());
            for &l in stage {
                let block = &w.blocks[l];
                let attn = dense_mha(cfg, block, decoder.cache_mut(), &y, l)?;
                attn_sum = residual(&attn_sum, &attn);
                mlps.push(dense_mlp(block, cfg.activation, &mlp_norm(block, &y)?)?);
            }
            let out = mlps
                .iter()
                .fold(attn_sum.clone(), |acc, m| residual(&acc, m));
            (attn_sum, out)
        };
        layers.push(LayerTrace {
            input: y,
            mid,
            output: out.clone(),
            attn_set: None,
            mlp_set: None,
        });
        y = out;
    }
    Ok(StepTrace {
        position,
        token,
        logits: decoder.logits(&y)?,
        layers,
    })
}

/// Greedy generation with the rewired dataflow. Each step trace holds one
/// [`LayerTrace`] per stage; see [`DepthTransform::stage_end_layers`].
pub fn generate_transformed(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    transform: DepthTransform,
) -> Result<Generation> {
    let stages = transform.stages(weights.config.n_layers)?;
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    drive(weights, prompt, steps, |p, t| {
        transformed_step(&mut decoder, &stages, transform, p, t)
    })
}

/// Teacher-forced transformed pass over `tokens`.
pub fn forced_transformed(
    weights: &TransformerWeights,
    tokens: &[u32],
    transform: DepthTransform,
) -> Result<Vec<StepTrace>> {
    let stages = transform.stages(weights.config.n_layers)?;
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    drive_forced(weights, tokens, |p, t| {
        transformed_step(&mut decoder, &stages, transform, p, t)
    })
}

/// The sequential model with every skipped layer's sub-blocks zeroed.
pub fn skip_oracle_weights(weights: &TransformerWeights, n: usize) -> Result<TransformerWeights> {
    DepthTransform::SkipEvery(n).stages(weights.config.n_layers)?;
    let mut w = weights.clone();
    for (l, block) in w.blocks.iter_mut().enumerate() {
        if DepthTransform::SkipEvery(n).skips(l) {
            block.zero_attention();
            block.zero_mlp();
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationRow {
    pub transform: DepthTransform,
    pub layer: usize,
    /// Mean over positions of `‖ŷ_seq − ŷ_t‖ / ‖ŷ_seq‖`.
    pub rel_deviation: f64,
    pub cosine: f64,
}

pub const DEVIATION_CSV_HEADER: &str = "transform,layer,rel_deviation,cosine";

impl DeviationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6}",
            self.transform, self.layer, self.rel_deviation, self.cosine
        )
    }
}

/// Compares stage outputs of the transformed model against the sequential
/// layer outputs along the dense greedy sequence.
pub fn deviation_report(
    weights: &TransformerWeights,
    prompt: &[u32],
    steps: usize,
    transform: DepthTransform,
) -> Result<Vec<DeviationRow>> {
    let ends = transform.stage_end_layers(weights.config.n_layers)?;
    let dense = crate::model::generate_dense(weights, prompt, steps)?;
    let positions = prompt.len() + steps.saturating_sub(1);
    let tokens = &dense.tokens[..positions];
    let mut decoder = Decoder::new(weights, PendingPolicy::Lazy);
    let seq = drive_forced(weights, tokens, |p, t| dense_step(&mut decoder, p, t))?;
    let tr = forced_transformed(weights, tokens, transform)?;
    let mut rows = Vec::with_capacity(ends.len());
    for (stage, &layer) in ends.iter().enumerate() {
        let (mut dev, mut cos) = (0.0, 0.0);
        for (s, t) in seq.iter().zip(&tr) {
            let a = &s.layers[layer].output;
            let b = &t.layers[stage].output;
            dev += norm(&sub(a, b)) / norm(a).max(f64::MIN_POSITIVE);
            cos += cosine_similarity(a, b)?;
        }
        rows.push(DeviationRow {
            transform,
            layer,
            rel_deviation: dev / seq.len() as f64,
            cosine: cos / seq.len() as f64,
        });
    }
    Ok(rows)
}

/// A linear operator with a certified operator-norm bound.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkingMap {
    /// `d × d`
    pub a: Matrix,
    pub epsilon: f64,
    /// Linear maps are `epsilon`-Lipschitz.
    pub lipschitz: f64,
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix, iters: usize, seed: Seed) -> f64 {
    let n = a.cols();
    let mut rng = seed.rng();
    let mut v = crate::nns::random_unit(n, &mut rng);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = apply64(a, &v);
        let mut w = vec![0.0; n];
        for (i, ui) in u.iter().enumerate() {
            for (j, wj) in w.iter_mut().enumerate() {
                *wj += f64::from(a.get(i, j)) * ui;
            }
        }
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        sigma = apply64(a, &v).iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    sigma
}

fn apply64(a: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| f64::from(a.get(i, j)) * x[j]).sum())
        .collect()
}

impl ShrinkingMap {
    pub const POWER_ITERS: usize = 50;

    /// `U·diag(s)·Vᵀ` with random orthonormal `U`, `V`, `s₁ = epsilon` and
    /// the remaining singular values uniform in `[0, epsilon]`.
    pub fn random(d: usize, epsilon: f64, seed: Seed) -> Result<Self> {
        if !(epsilon >= 0.0) || d == 0 {
            return Err(Error::Invalid(format!(
                "shrinking map needs d >= 1 and epsilon >= 0, got {d}, {epsilon}"
            )));
        }
        let u = SubspaceSpec::random(d, d, seed.derive(1))?;
        let v = SubspaceSpec::random(d, d, seed.derive(2))?;
        let mut rng = seed.derive(3).rng();
        let s: Vec<f64> = (0..d)
            .map(|i| {
                if i == 0 {
                    epsilon
                } else {
                    epsilon * rng.random::<f64>()
                }
            })
            .collect();
        let mut data = vec![0.0f32; d * d];
        for i in 0..d {
            for j in 0..d {
                let x: f64 = (0..d).map(|k| u.basis[k][i] * s[k] * v.basis[k][j]).sum();
                data[i * d + j] = x as f32;
            }
        }
        Self::certify(
            Matrix::from_storage(d, d, StorageOrder::RowContiguous, data)?,
            epsilon,
            seed,
        )
    }

    pub fn scaled_identity(d: usize, alpha: f64) -> Self {
        let mut a = Matrix::identity(d, StorageOrder::RowContiguous);
        a.scale(alpha as f32);
        let epsilon = f64::from(alpha as f32).abs();
        ShrinkingMap {
            a,
            epsilon,
            lipschitz: epsilon,
        }
    }

    pub fn zero(d: usize) -> Self {
        ShrinkingMap {
            a: Matrix::zeros(d, d, StorageOrder::RowContiguous),
            epsilon: 0.0,
            lipschitz: 0.0,
        }
    }

    /// Estimates `‖a‖₂` and, if the estimate exceeds `epsilon`, shrinks `a`
    /// onto it.
    pub fn certify(mut a: Matrix, epsilon: f64, seed: Seed) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::shape("ShrinkingMap", "square", a.shape()));
        }
        let est = spectral_norm(&a, Self::POWER_ITERS, seed.derive(4));
        if est > epsilon {
            a.scale((epsilon / est) as f32);
        }
        Ok(ShrinkingMap {
            a,
            epsilon,
            lipschitz: epsilon,
        })
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        apply64(&self.a, x)
    }
}

/// `(I + f)·x`
fn step(f: &ShrinkingMap, x: &[f64]) -> Vec<f64> {
    x.iter().zip(f.apply(x)).map(|(a, b)| a + b).collect()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    /// Parts 1-6 in order.
    pub bounds: [f64; 6],
    /// Largest observed `‖g_a(x) − g_b(x)‖ / ‖x‖` per part.
    pub max_ratio: [f64; 6],
    pub violations: [usize; 6],
    pub trials: usize,
}

pub const BOUND_SLACK: f64 = 1e-5;

impl BoundCheck {
    fn new(bounds: [f64; 6], trials: usize) -> Self {
        BoundCheck {
            bounds,
            max_ratio: [0.0; 6],
            violations: [0; 6],
            trials,
        }
    }

    /// Parts pair up as (1,2) on `g₁−g₂`, (3,4) on `g₁−g₃`, (5,6) on `g₂−g₃`.
    fn observe(&mut self, r12: f64, r13: f64, r23: f64) {
        for (p, r) in [r12, r12, r13, r13, r23, r23].into_iter().enumerate() {
            self.max_ratio[p] = self.max_ratio[p].max(r);
            if r > self.bounds[p] + BOUND_SLACK {
                self.violations[p] += 1;
            }
        }
    }

    pub fn total_violations(&self) -> usize {
        self.violations.iter().sum()
    }

    /// Worst `max_ratio / bound` over parts with a positive bound.
    pub fn max_tightness(&self) -> f64 {
        self.bounds
            .iter()
            .zip(&self.max_ratio)
            .filter(|(b, _)| **b > 0.0)
            .map(|(b, r)| r / b)
            .fold(0.0, f64::max)
    }
}

pub fn two_op_bounds(e: [f64; 2], l: [f64; 2]) -> [f64; 6] {
    let [e1, e2] = e;
    let [l1, l2] = l;
    [
        2.0 * e1 * e2,
        e2 * l1 + e1 * l2,
        e1 * e2,
        e2 * l1,
        e1 * e2,
        e1 * l2,
    ]
}

pub fn four_op_bounds(e: [f64; 4], l: [f64; 4]) -> [f64; 6] {
    let [e1, e2, e3, e4] = e;
    let [l1, l2, l3, _] = l;
    let s = e1 * e2
        + e1 * e3
        + e1 * e4
        + e2 * e3
        + e2 * e4
        + e3 * e4
        + e1 * e2 * e3
        + e1 * e2 * e4
        + e1 * e3 * e4
        + e2 * e3 * e4
        + e1 * e2 * e3 * e4;
    let p2 = 2.0 * l1 * e2
        + 2.0 * l1 * e3
        + 2.0 * l1 * e4
        + l2 * e3
        + 2.0 * l2 * e4
        + 2.0 * l3 * e4
        + 2.0 * l1 * e2 * e3
        + 2.0 * l1 * e2 * e4
        + 2.0 * l1 * e3 * e4
        + l2 * e3 * e4
        + 2.0 * l1 * e2 * e3 * e4
        + l3 * e2
        + l3 * e2 * e4;
    let p4 = l1 * e2
        + l1 * e3
        + l1 * e4
        + l2 * e3
        + l2 * e4
        + l3 * e4
        + l1 * e2 * e3
        + l1 * e2 * e4
        + l1 * e3 * e4
        + l2 * e3 * e4
        + l1 * e2 * e3 * e4;
    let p6 = l1 * e2
        + l1 * e3
        + l1 * e4
        + l2 * e4
        + l3 * e2
        + l3 * e4
        + l1 * e2 * e3
        + l1 * e2 * e4
        + l1 * e3 * e4
        + l3 * e2 * e4
        + l1 * e2 * e3 * e4;
    [2.0 * s, p2, s, p4, s, p6]
}

fn sample_x(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let scale = rng.random_range(0.1..10.0);
    crate::nns::random_unit(d, rng)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Checks Parts 1-6 of the two-operator bounds for the given maps on
/// `trials` random inputs.
pub fn two_op_bound_check_with(
    f: [&ShrinkingMap; 2],
    trials: usize,
    seed: Seed,
) -> Result<BoundCheck> {
    let d = f[0].d();
    if f[1].d() != d {
        return Err(Error::shape("two_op_bound_check", d, f[1].d()));
    }
    let mut rng = seed.derive(streams::LEMMA).rng();
    let mut check = BoundCheck::new(
        two_op_bounds(
            [f[0].epsilon, f[1].epsilon],
            [f[0].lipschitz, f[1].lipschitz],
        ),
        trials,
    );
    for _ in 0..trials {
        let x = sample_x(d, &mut rng);
        let g1 = step(f[0], &step(f[1], &x));
        let g2 = step(f[1], &step(f[0], &x));
        let f1 = f[0].apply(&x);
        let f2 = f[1].apply(&x);
        let g3: Vec<f64> = (0..d).map(|i| x[i] + f1[i] + f2[i]).collect();
        let nx = diff_norm(&x, &vec![0.0; d]);
        check.observe(
            diff_norm(&g1, &g2) / nx,
            diff_norm(&g1, &g3) / nx,
            diff_norm(&g2, &g3) / nx,
        );
    }
    Ok(check)
}

pub fn two_op_bound_check(
    eps1: f64,
    eps2: f64,
    d: usize,
    trials: usize,
    seed: Seed,
) -> Result<BoundCheck> {
    let f1 = ShrinkingMap::random(d, eps1, seed.derive(streams::LEMMA).derive(1))?;
    let f2 = ShrinkingMap::random(d, eps2, seed.derive(streams::LEMMA).derive(2))?;
    two_op_bound_check_with([&f1, &f2], trials, seed)
}

/// Checks Parts 1-6 of the four-operator bounds, where
/// `g₁ = (I+f₁)(I+f₂)(I+f₃)(I+f₄)`, `g₂ = (I+f₁)(I+f₃)(I+f₂)(I+f₄)` and
/// `g₃ = I + Σf_i`.
pub fn four_op_bound_check_with(
    f: [&ShrinkingMap; 4],
    trials: usize,
    seed: Seed,
) -> Result<BoundCheck> {
    let d = f[0].d();
    if f.iter().any(|m| m.d() != d) {
        return Err(Error::Invalid(
            "four_op_bound_check: maps differ in dimension".into(),
        ));
    }
    let mut rng = seed.derive(streams::LEMMA).rng();
    let e = [f[0].epsilon, f[1].epsilon, f[2].epsilon, f[3].epsilon];
    let l = [
        f[0].lipschitz,
        f[1].lipschitz,
        f[2].lipschitz,
        f[3].lipschitz,
    ];
    let mut check = BoundCheck::new(four_op_bounds(e, l), trials);
    for _ in 0..trials {
        let x = sample_x(d, &mut rng);
        let g1 = step(f[0], &step(f[1], &step(f[2], &step(f[3], &x))));
        let g2 = step(f[0], &step(f[2], &step(f[1], &step(f[3], &x))));
        let mut g3 = x.clone();
        for m in f {
            g3.iter_mut().zip(m.apply(&x)).for_each(|(a, b)| *a += b);
        }
        let nx = diff_norm(&x, &vec![0.0; d]);
        check.observe(
            diff_norm(&g1, &g2) / nx,
            diff_norm(&g1, &g3) / nx,
            diff_norm(&g2, &g3) / nx,
        );
    }
    Ok(check)
}

pub fn four_op_bound_check(
    eps: [f64; 4],
    d: usize,
    trials: usize,
    seed: Seed,
) -> Result<BoundCheck> {
    let maps = (0..4)
        .map(|i| ShrinkingMap::random(d, eps[i], seed.derive(streams::LEMMA).derive(10 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    four_op_bound_check_with([&maps[0], &maps[1], &maps[2], &maps[3]], trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_dense, ModelConfig};

    fn model(layers: usize) -> TransformerWeights {
        let cfg = ModelConfig::new(16, 4, layers, 32, 32).unwrap();
        TransformerWeights::random(cfg, Seed(4)).unwrap()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn arity_errors() {
        assert!(DepthTransform::Parallel4.stages(3).is_err());
        assert!(DepthTransform::SkipEvery(1).stages(4).is_err());
        assert!(DepthTransform::SkipEvery(5).stages(4).is_err());
        assert_eq!(
            DepthTransform::SkipEvery(2).stages(4).unwrap(),
            vec![vec![0], vec![2]]
        );
        assert_eq!(
            DepthTransform::SkipEvery(3).stage_end_layers(7).unwrap(),
            vec![0, 1, 3, 4, 6]
        );
        assert_eq!(
            "skip3".parse::<DepthTransform>().unwrap(),
            DepthTransform::SkipEvery(3)
        );
    }

    #[test]
    fn skip_matches_zeroed_oracle_bitwise() {
        let w = model(4);
        for n in [2, 3, 4] {
            let got =
                generate_transformed(&w, &[1, 2, 3], 6, DepthTransform::SkipEvery(n)).unwrap();
            let oracle =
                generate_dense(&skip_oracle_weights(&w, n).unwrap(), &[1, 2, 3], 6).unwrap();
            assert_eq!(got.tokens, oracle.tokens);
            for (a, b) in got.steps.iter().zip(&oracle.steps) {
                assert_eq!(bits(&a.logits), bits(&b.logits));
            }
        }
    }

    #[test]
    fn parallel2_without_mlp_is_sequential() {
        let mut w = model(3);
        w.blocks.iter_mut().for_each(|b| b.zero_mlp());
        let seq = generate_dense(&w, &[4, 5], 5).unwrap();
        let par = generate_transformed(&w, &[4, 5], 5, DepthTransform::Parallel2).unwrap();
        assert_eq!(seq.tokens, par.tokens);
        for (a, b) in seq.steps.iter().zip(&par.steps) {
            assert_eq!(bits(&a.logits), bits(&b.logits));
        }
    }

    #[test]
    fn zero_blocks_pass_the_embedding_through() {
        let mut w = model(4);
        for b in &mut w.blocks {
            b.zero_attention();
            b.zero_mlp();
        }
        for t in [
            DepthTransform::Parallel2,
            DepthTransform::Parallel4,
            DepthTransform::SkipEvery(2),
        ] {
            let g = generate_transformed(&w, &[7, 8], 2, t).unwrap();
            for s in &g.steps {
                let out = &s.layers.last().unwrap().output;
                assert_eq!(bits(out), bits(&w.embed(s.token).unwrap()));
            }
        }
    }

    #[test]
    fn deviation_report_covers_stage_outputs() {
        let w = model(4);
        let rows = deviation_report(&w, &[1, 2, 3, 4], 4, DepthTransform::Parallel4).unwrap();
        assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![1, 3]);
        assert!(rows
            .iter()
            .all(|r| r.rel_deviation > 0.0 && r.cosine <= 1.0 + 1e-9));
        let skip = deviation_report(&w, &[1, 2], 2, DepthTransform::SkipEvery(4)).unwrap();
        assert_eq!(skip[0].rel_deviation, 0.0);
    }

    #[test]
    fn shrinking_map_is_certified() {
        let m = ShrinkingMap::random(12, 0.2, Seed(3)).unwrap();
        let est = spectral_norm(&m.a, 200, Seed(9));
        assert!(est <= 0.2 * (1.0 + 1e-6) && est > 0.19, "{est}");
    }

    #[test]
    fn two_op_closed_forms() {
        let a = ShrinkingMap::scaled_identity(6, 0.1);
        let c = two_op_bound_check_with([&a, &a], 50, Seed(1)).unwrap();
        assert!((c.max_ratio[2] - 0.01).abs() < 1e-7);
        assert!(c.max_ratio[0] < 1e-7);
        assert_eq!(c.total_violations(), 0);

        let z = ShrinkingMap::zero(6);
        let f = ShrinkingMap::random(6, 0.3, Seed(2)).unwrap();
        let c = two_op_bound_check_with([&f, &z], 50, Seed(1)).unwrap();
        assert_eq!(c.max_ratio, [0.0; 6]);
    }

    #[test]
    fn four_op_closed_form() {
        let a = ShrinkingMap::scaled_identity(5, 0.1);
        let c = four_op_bound_check_with([&a, &a, &a, &a], 50, Seed(1)).unwrap();
        let alpha = f64::from(0.1f32);
        let exact = (1.0 + alpha).powi(4) - 1.0 - 4.0 * alpha;
        assert!((c.max_ratio[2] - exact).abs() < 1e-7);
        assert!((exact - 0.0641).abs() < 1e-7);
        assert!((c.bounds[2] - exact).abs() < 1e-12);
        assert_eq!(c.total_violations(), 0);

        let z = ShrinkingMap::zero(5);
        let c = four_op_bound_check_with([&z, &z, &z, &z], 10, Seed(1)).unwrap();
        assert_eq!(c.bounds, [0.0; 6]);
        assert_eq!(c.max_ratio, [0.0; 6]);
    }

    #[test]
    fn printed_four_op_part2_is_sum_of_parts_4_and_6() {
        let e = [0.1, 0.2, 0.3, 0.4];
        let l = [0.5, 0.6, 0.7, 0.8];
        let b = four_op_bounds(e, l);
        assert!((b[1] - (b[3] + b[5])).abs() < 1e-12);
        let t = two_op_bounds([0.1, 0.2], [0.3, 0.4]);
        assert!((t[1] - (t[3] + t[5])).abs() < 1e-12);
    }

    #[test]
    fn random_maps_have_no_violations() {
        assert_eq!(
            two_op_bound_check(0.2, 0.2, 16, 200, Seed(5))
                .unwrap()
                .total_violations(),
            0
        );
        assert_eq!(
            four_op_bound_check([0.15; 4], 16, 200, Seed(5))
                .unwrap()
                .total_violations(),
            0
        );
    }
}
