//! Wall-clock and IO sweep of the sparse MLP against the dense MLP.

use std::hint::black_box;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use super::index::IndexSet;
use super::kernels::{gather_rows_raw, scatter_cols_raw, IoCounter, IoMeter, NoMeter};
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::tensor::{streams, Matrix, Seed, StorageOrder};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub density: f64,
    /// Median over the runs.
    pub latency_nanos: u128,
    pub io_floats: usize,
    /// `dense latency / latency`
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: &str = "scenario,density,latency_nanos,io_floats,speedup";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{},{},{:.4}",
            self.scenario, self.density, self.latency_nanos, self.io_floats, self.speedup
        )
    }
}

/// One MLP layer: `w1` and `w2` are `d × d_ff`, column-contiguous, so each
/// neuron's input and output weights are contiguous.
pub struct MlpLayer {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl MlpLayer {
    pub fn random(d: usize, d_ff: usize, seed: Seed) -> Self {
        let mut rng = seed.derive(streams::BENCH).rng();
        let col = StorageOrder::ColContiguous;
        MlpLayer {
            w1: Matrix::gaussian(d, d_ff, 1.0 / (d as f64).sqrt(), col, &mut rng),
            w2: Matrix::gaussian(d, d_ff, 1.0 / (d_ff as f64).sqrt(), col, &mut rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    /// The MLP over `idx`; the full set is the dense MLP.
    pub fn forward(&self, u: &[f32], idx: &IndexSet, meter: &mut impl IoMeter) -> Vec<f32> {
        let d = self.d();
        let mut act = gather_rows_raw(self.w1.data(), d, idx.indices(), u, meter);
        act.iter_mut().for_each(|z| *z = Activation::Relu.apply(*z));
        scatter_cols_raw(self.w2.data(), d, idx.indices(), &act, meter)
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn random_subset(universe: usize, density: f64, rng: &mut impl Rng) -> Result<IndexSet> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Invalid(format!(
            "density must lie in [0, 1], got {density}"
        )));
    }
    let k = (density * universe as f64).round() as usize;
    IndexSet::from_unsorted(sample(rng, universe, k).into_vec(), universe)
}

/// Median latency of the dense MLP and of the fused sparse MLP at each
/// density. Timed runs of all scenarios are interleaved.
pub fn bench_mlp(
    d: usize,
    d_ff: usize,
    densities: &[f64],
    runs: usize,
    seed: Seed,
) -> Result<Vec<BenchRow>> {
    if runs == 0 || d == 0 || d_ff == 0 {
        return Err(Error::Invalid("bench needs positive dims and runs".into()));
    }
    let layer = MlpLayer::random(d, d_ff, seed);
    let mut rng = seed.derive(streams::BENCH).derive(1).rng();
    let u: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sets = vec![("dense".to_string(), IndexSet::full(d_ff))];
    for &p in densities {
        sets.push(("sparse".to_string(), random_subset(d_ff, p, &mut rng)?));
    }
    let mut times: Vec<Vec<u128>> = vec![Vec::with_capacity(runs); sets.len()];
    for (_, s) in &sets {
        black_box(layer.forward(&u, s, &mut NoMeter));
    }
    for _ in 0..runs {
        for ((_, s), t) in sets.iter().zip(&mut times) {
            let start = Instant::now();
            black_box(layer.forward(black_box(&u), s, &mut NoMeter));
            t.push(start.elapsed().as_nanos());
        }
    }
    let medians: Vec<u128> = times.into_iter().map(median).collect();
    let dense = medians[0] as f64;
    Ok(sets
        .into_iter()
        .zip(medians)
        .map(|((scenario, s), m)| {
            let mut io = IoCounter::default();
            layer.forward(&u, &s, &mut io);
            BenchRow {
                scenario,
                density: s.density(),
                latency_nanos: m,
                io_floats: io.total(),
                speedup: dense / (m.max(1) as f64),
            }
        })
        .collect())
}
