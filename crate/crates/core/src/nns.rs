//! Maximum inner product search.
//!
//! The asymmetric transforms reduce MaxIP to nearest-neighbor search on the
//! unit sphere; a sign-of-random-projection LSH index answers approximate
//! queries and a linear scan answers exact ones.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{streams, Seed};

const UNIT_TOL: f64 = 1e-6;

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f64]) -> f64 {
    inner(a, a).sqrt()
}

fn same_dim(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a.len().to_string(), b.len().to_string()));
    }
    Ok(())
}

fn check_unit(op: &'static str, v: &[f64]) -> Result<()> {
    let n = l2(v);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::Invalid(format!(
            "{op}: expected a unit vector, norm is {n}"
        )));
    }
    Ok(())
}

pub fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxIpParams {
    pub c: f64,
    pub tau: f64,
}

impl MaxIpParams {
    pub fn new(c: f64, tau: f64) -> Result<Self> {
        if !(c > 0.0 && c < 1.0 && tau > 0.0 && tau < 1.0) {
            return Err(Error::Invalid(format!(
                "c={c} and tau={tau} must lie in (0, 1)"
            )));
        }
        Ok(MaxIpParams { c, tau })
    }
}

/// `φ₀(x) = [∇g(x), ⟨x, ∇g(x)⟩]`
pub fn phi0(x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    same_dim("phi0", x, grad)?;
    let mut v = grad.to_vec();
    v.push(inner(x, grad));
    Ok(v)
}

/// `ψ₀(y) = [−y, 1]`
pub fn psi0(y: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = y.iter().map(|a| -a).collect();
    v.push(1.0);
    v
}

/// `(φ₀(x), ψ₀(y))`, whose inner product is `−⟨y − x, ∇g(x)⟩`.
pub fn phi0_psi0(x: &[f64], grad: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    same_dim("phi0_psi0", x, y)?;
    Ok((phi0(x, grad)?, psi0(y)))
}

fn scaled_with_slack(v: &[f64], scale: f64, op: &'static str) -> Result<(Vec<f64>, f64)> {
    if !(scale > 0.0) {
        return Err(Error::Invalid(format!("{op}: scale must be positive")));
    }
    let s: Vec<f64> = v.iter().map(|a| a / scale).collect();
    let n2 = inner(&s, &s);
    if n2 > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!(
            "{op}: norm {} exceeds scale {scale}",
            l2(v)
        )));
    }
    Ok((s, (1.0 - n2).max(0.0).sqrt()))
}

/// `φ₁(x) = [x/D_x, 0, √(1 − ‖x/D_x‖²)]`
pub fn phi1(x: &[f64], dx: f64) -> Result<Vec<f64>> {
    let (mut v, slack) = scaled_with_slack(x, dx, "phi1")?;
    v.extend([0.0, slack]);
    Ok(v)
}

/// `ψ₁(y) = [y/D_y, √(1 − ‖y/D_y‖²), 0]`
pub fn psi1(y: &[f64], dy: f64) -> Result<Vec<f64>> {
    let (mut v, slack) = scaled_with_slack(y, dy, "psi1")?;
    v.extend([slack, 0.0]);
    Ok(v)
}

pub fn phi1_psi1(x: &[f64], dx: f64, y: &[f64], dy: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    same_dim("phi1_psi1", x, y)?;
    Ok((phi1(x, dx)?, psi1(y, dy)?))
}

/// Exact maximum inner product; ties go to the lowest id.
pub fn brute_force_maxip(dataset: &[Vec<f64>], query: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in dataset.iter().enumerate() {
        same_dim("brute_force_maxip", v, query)?;
        let ip = inner(v, query);
        if best.is_none_or(|(_, b)| ip > b) {
            best = Some((i, ip));
        }
    }
    best.ok_or(Error::Empty {
        op: "brute_force_maxip",
    })
}

/// Hyperplane LSH: `T` tables, each hashing by the signs of `B` Gaussian
/// projections.
#[derive(Clone, Debug)]
pub struct LshIndex {
    tables: usize,
    bits: usize,
    /// `tables * bits` unit normals.
    normals: Vec<Vec<f64>>,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
    data: Vec<Vec<f64>>,
}

impl LshIndex {
    pub fn build(data: Vec<Vec<f64>>, tables: usize, bits: usize, seed: Seed) -> Result<Self> {
        if tables == 0 || bits == 0 || bits > 64 {
            return Err(Error::Config(format!(
                "need T >= 1 and 1 <= B <= 64, got T={tables} B={bits}"
            )));
        }
        let d = data.first().ok_or(Error::Empty { op: "lsh_build" })?.len();
        for v in &data {
            same_dim("lsh_build", v, &data[0])?;
            check_unit("lsh_build", v)?;
        }
        let mut rng = seed.derive(streams::LSH).rng();
        let normals = (0..tables * bits)
            .map(|_| random_unit(d, &mut rng))
            .collect();
        let mut index = LshIndex {
            tables,
            bits,
            normals,
            buckets: vec![HashMap::new(); tables],
            data,
        };
        for id in 0..index.data.len() {
            let keys = index.keys_unchecked(&index.data[id]);
            for (t, k) in keys.into_iter().enumerate() {
                index.buckets[t].entry(k).or_default().push(id);
            }
        }
        Ok(index)
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dataset(&self) -> &[Vec<f64>] {
        &self.data
    }

    fn keys_unchecked(&self, v: &[f64]) -> Vec<u64> {
        (0..self.tables)
            .map(|t| {
                (0..self.bits).fold(0u64, |key, b| {
                    let bit = inner(&self.normals[t * self.bits + b], v) >= 0.0;
                    key << 1 | u64::from(bit)
                })
            })
            .collect()
    }

    /// Per-table bucket keys of `v`.
    pub fn keys(&self, v: &[f64]) -> Result<Vec<u64>> {
        same_dim("lsh_keys", v, &self.data[0])?;
        Ok(self.keys_unchecked(v))
    }

    /// Ids per table, for checking that every id is stored once per table.
    pub fn bucket_ids(&self, table: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.buckets[table].values().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Scans colliding buckets table by table until `probes` distinct
    /// candidates are seen and returns the best of them.
    pub fn query(&self, q: &[f64], probes: usize) -> Result<Option<(usize, f64)>> {
        same_dim("lsh_query", q, &self.data[0])?;
        check_unit("lsh_query", q)?;
        let mut seen = HashSet::new();
        let mut best: Option<(usize, f64)> = None;
        'tables: for (t, key) in self.keys_unchecked(q).into_iter().enumerate() {
            for &id in self.buckets[t].get(&key).into_iter().flatten() {
                if seen.len() >= probes {
                    break 'tables;
                }
                if seen.insert(id) {
                    let ip = inner(&self.data[id], q);
                    if best.is_none_or(|(b_id, b)| ip > b || (ip == b && id < b_id)) {
                        best = Some((id, ip));
                    }
                }
            }
        }
        Ok(best)
    }
}

/// A MaxIP answerer over a fixed dataset.
pub trait MaxIpIndex: Sync {
    fn dataset(&self) -> &[Vec<f64>];
    fn search(&self, q: &[f64]) -> Result<Option<usize>>;
}

pub struct BruteForce(pub Vec<Vec<f64>>);

impl MaxIpIndex for BruteForce {
    fn dataset(&self) -> &[Vec<f64>] {
        &self.0
    }

    fn search(&self, q: &[f64]) -> Result<Option<usize>> {
        Ok(Some(brute_force_maxip(&self.0, q)?.0))
    }
}

pub struct LshSearch<'a> {
    pub index: &'a LshIndex,
    pub probes: usize,
}

impl MaxIpIndex for LshSearch<'_> {
    fn dataset(&self) -> &[Vec<f64>] {
        self.index.dataset()
    }

    fn search(&self, q: &[f64]) -> Result<Option<usize>> {
        Ok(self.index.query(q, self.probes)?.map(|(id, _)| id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessReport {
    pub qualifying: usize,
    pub successes: usize,
    pub rate: f64,
}

/// Among queries whose true maximum is at least `tau`, the fraction for
/// which the index returns `z` with `⟨x, z⟩ >= c · max`.
pub fn maxip_success_rate(
    index: &dyn MaxIpIndex,
    queries: &[Vec<f64>],
    params: MaxIpParams,
) -> Result<SuccessReport> {
    let (mut qualifying, mut successes) = (0, 0);
    for q in queries {
        let (_, max) = brute_force_maxip(index.dataset(), q)?;
        if max < params.tau {
            continue;
        }
        qualifying += 1;
        if let Some(id) = index.search(q)? {
            let data = index.dataset();
            let id_ok = data.get(id).ok_or_else(|| Error::IndexOutOfRange {
                index: id,
                universe: data.len(),
            })?;
            if inner(id_ok, q) >= params.c * max {
                successes += 1;
            }
        }
    }
    if qualifying == 0 {
        return Err(Error::Empty {
            op: "maxip_success_rate",
        });
    }
    Ok(SuccessReport {
        qualifying,
        successes,
        rate: successes as f64 / qualifying as f64,
    })
}

/// Random unit dataset plus queries, each a noisy copy of a random dataset
/// vector renormalized to the sphere.
pub fn planted_dataset(
    n: usize,
    d: usize,
    n_queries: usize,
    noise: f64,
    seed: Seed,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seed.derive(streams::LSH).derive(1).rng();
    let data: Vec<Vec<f64>> = (0..n).map(|_| random_unit(d, &mut rng)).collect();
    let queries = (0..n_queries)
        .map(|_| {
            let base = &data[rng.random_range(0..n)];
            let v: Vec<f64> = base
                .iter()
                .map(|a| a + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let nv = l2(&v);
            v.into_iter().map(|a| a / nv).collect()
        })
        .collect();
    (data, queries)
}

/// Index shape and query budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LshConfig {
    pub tables: usize,
    pub bits: usize,
    pub probes: usize,
}

pub const NNS_CSV_HEADER: &str = "n,d,T,B,probes,c,tau,success_rate,avg_query_nanos,brute_nanos";

#[derive(Clone, Debug, PartialEq)]
pub struct NnsBenchRow {
    pub n: usize,
    pub d: usize,
    pub tables: usize,
    pub bits: usize,
    pub probes: usize,
    pub params: MaxIpParams,
    pub success: SuccessReport,
    pub avg_query_nanos: f64,
    pub brute_nanos: f64,
}

impl NnsBenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.0},{:.0}",
            self.n,
            self.d,
            self.tables,
            self.bits,
            self.probes,
            self.params.c,
            self.params.tau,
            self.success.rate,
            self.avg_query_nanos,
            self.brute_nanos
        )
    }
}

/// Builds an index over a planted dataset and measures success and latency
/// against the linear scan.
pub fn bench_lsh(
    n: usize,
    d: usize,
    n_queries: usize,
    lsh: LshConfig,
    params: MaxIpParams,
    seed: Seed,
) -> Result<NnsBenchRow> {
    let LshConfig {
        tables,
        bits,
        probes,
    } = lsh;
    let (data, queries) = planted_dataset(n, d, n_queries, 0.08, seed);
    let index = LshIndex::build(data, tables, bits, seed)?;
    let lsh = LshSearch {
        index: &index,
        probes,
    };
    let success = maxip_success_rate(&lsh, &queries, params)?;
    let t = Instant::now();
    for q in &queries {
        lsh.search(q)?;
    }
    let avg_query_nanos = t.elapsed().as_nanos() as f64 / queries.len().max(1) as f64;
    let t = Instant::now();
    for q in &queries {
        brute_force_maxip(index.dataset(), q)?;
    }
    let brute_nanos = t.elapsed().as_nanos() as f64 / queries.len().max(1) as f64;
    Ok(NnsBenchRow {
        n,
        d,
        tables,
        bits,
        probes,
        params,
        success,
        avg_query_nanos,
        brute_nanos,
    })
}

/// Samples unit pairs with `⟨x̃, x⟩ >= 1 − eps²/2` and counts those with
/// `‖x̃ − x‖₂ > eps`.
pub fn close_fact_check(trials: usize, eps: f64, d: usize, seed: Seed) -> Result<usize> {
    if d < 2 || !(eps > 0.0 && eps <= 2.0) {
        return Err(Error::Invalid(format!(
            "need d >= 2 and eps in (0, 2], got d={d} eps={eps}"
        )));
    }
    let mut rng = seed.derive(streams::LEMMA).derive(2).rng();
    let mut violations = 0;
    for t in 0..trials {
        let x = random_unit(d, &mut rng);
        // orthogonal unit direction
        let g = random_unit(d, &mut rng);
        let p = inner(&g, &x);
        let u: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - p * b).collect();
        let un = l2(&u);
        let u: Vec<f64> = u.into_iter().map(|a| a / un).collect();
        let lo = 1.0 - eps * eps / 2.0;
        let cos = if t % 4 == 0 {
            lo
        } else {
            lo + (1.0 - lo) * rng.random::<f64>()
        };
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let xt: Vec<f64> = x.iter().zip(&u).map(|(a, b)| cos * a + sin * b).collect();
        debug_assert!(inner(&xt, &x) >= lo - 1e-12);
        let dist = l2(&xt.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist > eps + 1e-12 {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Cross-layer robustness: with `‖y' − y‖₂ <= eps < 0.01·c·τ`, any `z` that
/// is a `c`-approximate answer for `y` stays a `0.99c`-approximate answer
/// when scored against `y'`. Returns the number of violations.
pub fn cross_layer_check(
    trials: usize,
    n: usize,
    d: usize,
    params: MaxIpParams,
    eps: f64,
    seed: Seed,
) -> Result<usize> {
    if !(eps >= 0.0 && eps < 0.01 * params.c * params.tau) {
        return Err(Error::Invalid(format!(
            "eps must be below 0.01·c·tau, got {eps}"
        )));
    }
    let mut rng = seed.derive(streams::LEMMA).derive(3).rng();
    let mut violations = 0;
    let mut t = 0;
    while t < trials {
        let data: Vec<Vec<f64>> = (0..n).map(|_| random_unit(d, &mut rng)).collect();
        let base = &data[rng.random_range(0..n)];
        let y: Vec<f64> = base
            .iter()
            .map(|a| a + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let yn = l2(&y);
        let y: Vec<f64> = y.into_iter().map(|a| a / yn).collect();
        let (_, max) = brute_force_maxip(&data, &y)?;
        if max < params.tau {
            continue;
        }
        let r = eps * rng.random::<f64>();
        let y2: Vec<f64> = y
            .iter()
            .zip(random_unit(d, &mut rng))
            .map(|(a, b)| a + r * b)
            .collect();
        for z in data.iter().filter(|z| inner(&y, z) >= params.c * max) {
            if inner(&y2, z) < 0.99 * params.c * max {
                violations += 1;
            }
        }
        t += 1;
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, Strategy};

    #[test]
    fn phi0_examples() {
        let (a, b) = phi0_psi0(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(inner(&a, &b), -1.0);
        let (a, b) = phi0_psi0(&[0.3, -0.2], &[0.5, 0.7], &[0.3, -0.2]).unwrap();
        assert!(inner(&a, &b).abs() < 1e-15);
        assert!(phi0_psi0(&[0.0], &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn phi0_turns_argmin_into_argmax() {
        let mut rng = Seed(2).rng();
        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let ys: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let objective = |y: &Vec<f64>| {
            inner(
                &y.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>(),
                &g,
            )
        };
        let argmin = (0..100)
            .min_by(|&a, &b| objective(&ys[a]).total_cmp(&objective(&ys[b])))
            .unwrap();
        let phi = phi0(&x, &g).unwrap();
        let transformed: Vec<Vec<f64>> = ys.iter().map(|y| psi0(y)).collect();
        assert_eq!(brute_force_maxip(&transformed, &phi).unwrap().0, argmin);
    }

    #[test]
    fn phi1_edges() {
        let z = phi1(&[0.0, 0.0], 2.0).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 0.0, 1.0]);
        let b = phi1(&[3.0, 4.0], 5.0).unwrap();
        assert!(b[3].abs() < 1e-7);
        assert!((l2(&b) - 1.0).abs() < 1e-12);
        assert!(phi1(&[3.0, 4.0], 4.0).is_err());
        assert!(psi1(&[1.0], 0.0).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let mut data: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        assert_eq!(
            brute_force_maxip(&data, &data[3].clone()).unwrap(),
            (3, 1.0)
        );
        data.push(data[1].clone());
        assert_eq!(brute_force_maxip(&data, &data[1].clone()).unwrap().0, 1);
        assert!(brute_force_maxip(&[], &[1.0]).is_err());
    }

    #[test]
    fn lsh_index_structure() {
        let (data, _) = planted_dataset(300, 8, 0, 0.1, Seed(1));
        let idx = LshIndex::build(data.clone(), 4, 6, Seed(1)).unwrap();
        for t in 0..4 {
            assert_eq!(idx.bucket_ids(t), (0..300).collect::<Vec<_>>());
        }
        for (i, v) in data.iter().enumerate().take(20) {
            let (id, ip) = idx.query(v, 10_000).unwrap().unwrap();
            assert!((ip - 1.0).abs() < 1e-12);
            assert_eq!(id, i);
        }
        assert_eq!(idx.query(&data[0], 0).unwrap(), None);
        assert!(idx.query(&[1.0; 8], 10).is_err());
        assert!(LshIndex::build(vec![vec![2.0, 0.0]], 1, 1, Seed(0)).is_err());
    }

    #[test]
    fn single_hyperplane_collisions() {
        let a = vec![1.0, 0.0, 0.0];
        let anti = vec![-1.0, 0.0, 0.0];
        let orth = vec![0.0, 1.0, 0.0];
        let mut collide = 0;
        let trials = 10_000;
        for s in 0..trials {
            let idx = LshIndex::build(vec![a.clone()], 1, 1, Seed(s)).unwrap();
            assert_ne!(idx.keys(&a).unwrap(), idx.keys(&anti).unwrap());
            if idx.keys(&a).unwrap() == idx.keys(&orth).unwrap() {
                collide += 1;
            }
        }
        let rate = f64::from(collide) / trials as f64;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn success_rate_edges() {
        let (data, queries) = planted_dataset(500, 8, 50, 0.05, Seed(4));
        let p = MaxIpParams::new(0.9, 0.5).unwrap();
        let bf = BruteForce(data.clone());
        assert_eq!(maxip_success_rate(&bf, &queries, p).unwrap().rate, 1.0);
        let idx = LshIndex::build(data, 4, 4, Seed(4)).unwrap();
        let none = LshSearch {
            index: &idx,
            probes: 0,
        };
        assert_eq!(maxip_success_rate(&none, &queries, p).unwrap().rate, 0.0);
        let strict = MaxIpParams::new(0.9, 0.999_999).unwrap();
        assert!(maxip_success_rate(&bf, &queries[..1], strict).is_err());
        assert!(MaxIpParams::new(1.0, 0.5).is_err());
    }

    #[test]
    fn lemma_checks() {
        assert_eq!(close_fact_check(2000, 0.3, 16, Seed(1)).unwrap(), 0);
        let p = MaxIpParams::new(0.9, 0.8).unwrap();
        assert_eq!(
            cross_layer_check(200, 100, 16, p, 0.007, Seed(1)).unwrap(),
            0
        );
        assert!(cross_layer_check(1, 10, 4, p, 0.01, Seed(1)).is_err());
    }

    fn unit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..24, any::<u64>()).prop_map(|(d, s)| {
            let mut rng = Seed(s).rng();
            (random_unit(d, &mut rng), random_unit(d, &mut rng))
        })
    }

    proptest! {
        #[test]
        fn unit_distance_identity((x, y) in unit_pair()) {
            let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            prop_assert!((inner(&diff, &diff) - (2.0 - 2.0 * inner(&x, &y))).abs() < 1e-12);
        }

        #[test]
        fn phi1_psi1_preserve_inner_products((x, y) in unit_pair(), sx in 0.1f64..3.0, sy in 0.1f64..3.0) {
            let x: Vec<f64> = x.iter().map(|a| a * sx).collect();
            let y: Vec<f64> = y.iter().map(|a| a * sy).collect();
            let (dx, dy) = (sx * 1.5, sy * 2.0);
            let (a, b) = phi1_psi1(&x, dx, &y, dy).unwrap();
            prop_assert!((l2(&a) - 1.0).abs() < 1e-6);
            prop_assert!((l2(&b) - 1.0).abs() < 1e-6);
            prop_assert!((inner(&a, &b) * dx * dy - inner(&x, &y)).abs() < 1e-5);
        }

        #[test]
        fn phi0_identity(s in any::<u64>(), d in 1usize..12) {
            let mut rng = Seed(s).rng();
            let mut v = || (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
            let (x, g, y) = (v(), v(), v());
            let (a, b) = phi0_psi0(&x, &g, &y).unwrap();
            let want = -inner(&y.iter().zip(&x).map(|(p, q)| p - q).collect::<Vec<_>>(), &g);
            prop_assert!((inner(&a, &b) - want).abs() <= 1e-6 * (1.0 + want.abs()));
        }
    }
}
