use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Seed, StorageOrder};

/// Parameters of one pre-norm decoder block.
///
/// Storage orders follow the gather axis of the sparse kernels: every per-head
/// projection and `wo` are column-contiguous, `w1` keeps each neuron's `d`
/// input weights contiguous, and `w2` keeps each neuron's `d` output weights
/// contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    /// Per head, `d x d_head`.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// Per head, `d_head x d`.
    pub wo: Vec<Matrix>,
    /// `d x d_ff`; column r holds neuron r's input weights.
    pub w1: Matrix,
    /// `d x d_ff`; column r holds neuron r's output weights.
    pub w2: Matrix,
    pub ln_attn_gain: Vec<f32>,
    pub ln_attn_bias: Vec<f32>,
    pub ln_mlp_gain: Vec<f32>,
    pub ln_mlp_bias: Vec<f32>,
}

const COL: StorageOrder = StorageOrder::ColContiguous;

impl BlockWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dh, h) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        BlockWeights {
            wq: vec![Matrix::zeros(d, dh, COL); h],
            wk: vec![Matrix::zeros(d, dh, COL); h],
            wv: vec![Matrix::zeros(d, dh, COL); h],
            wo: vec![Matrix::zeros(dh, d, COL); h],
            w1: Matrix::zeros(d, cfg.d_ff, COL),
            w2: Matrix::zeros(d, cfg.d_ff, COL),
            ln_attn_gain: vec![1.0; d],
            ln_attn_bias: vec![0.0; d],
            ln_mlp_gain: vec![1.0; d],
            ln_mlp_bias: vec![0.0; d],
        }
    }

    fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, dh, h, ff) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ff);
        let s_in = 1.0 / (d as f64).sqrt();
        let mut proj = |rows, cols, std| Matrix::gaussian(rows, cols, std, COL, rng);
        let wq = (0..h).map(|_| proj(d, dh, s_in)).collect();
        let wk = (0..h).map(|_| proj(d, dh, s_in)).collect();
        let wv = (0..h).map(|_| proj(d, dh, s_in)).collect();
        let wo = (0..h)
            .map(|_| proj(dh, d, 1.0 / (dh as f64).sqrt()))
            .collect();
        let w1 = proj(d, ff, s_in);
        let w2 = proj(d, ff, 1.0 / (ff as f64).sqrt());
        BlockWeights {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            ..BlockWeights::zeros(cfg)
        }
    }

    /// Zeroes the attention output projections so the sub-block maps to 0.
    pub fn zero_attention(&mut self) {
        self.wo.iter_mut().for_each(|m| m.scale(0.0));
    }

    /// Zeroes the second MLP layer so the sub-block maps to 0.
    pub fn zero_mlp(&mut self) {
        self.w2.scale(0.0);
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, dh, h) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols || m.order() != COL {
                return Err(Error::Config(format!(
                    "{name}: expected {rows}x{cols} ColContiguous, got {}",
                    m.shape()
                )));
            }
            Ok(())
        };
        for (name, set, rows, cols) in [
            ("wq", &self.wq, d, dh),
            ("wk", &self.wk, d, dh),
            ("wv", &self.wv, d, dh),
            ("wo", &self.wo, dh, d),
        ] {
            if set.len() != h {
                return Err(Error::Config(format!(
                    "{name}: {} heads, expected {h}",
                    set.len()
                )));
            }
            for m in set {
                check(name, m, rows, cols)?;
            }
        }
        check("w1", &self.w1, d, cfg.d_ff)?;
        check("w2", &self.w2, d, cfg.d_ff)?;
        for v in [
            &self.ln_attn_gain,
            &self.ln_attn_bias,
            &self.ln_mlp_gain,
            &self.ln_mlp_bias,
        ] {
            if v.len() != d {
                return Err(Error::Config(format!(
                    "layer norm vector of len {} != {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Knobs for the clustered toy model whose active sets are a learnable
/// function of the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedSpec {
    pub clusters: usize,
    /// Std of the per-coordinate noise added to token embeddings.
    pub embed_noise: f64,
    /// Relative noise on neuron input weights.
    pub weight_noise: f64,
    /// How strongly a neuron is pushed negative by other clusters' directions.
    pub inhibition: f64,
    /// Scale on sub-block outputs relative to the residual stream.
    pub residual_scale: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            clusters: 8,
            embed_noise: 0.3,
            weight_noise: 0.3,
            inhibition: 0.5,
            residual_scale: 0.25,
        }
    }
}

impl PlantedSpec {
    pub fn cluster_of_token(&self, token: u32) -> usize {
        token as usize % self.clusters
    }

    pub fn cluster_of_neuron(&self, neuron: usize) -> usize {
        neuron % self.clusters
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub blocks: Vec<BlockWeights>,
    /// `vocab x d`, tied with the output projection.
    pub embedding: Matrix,
}

impl TransformerWeights {
    pub fn new(config: ModelConfig, blocks: Vec<BlockWeights>, embedding: Matrix) -> Result<Self> {
        let w = TransformerWeights {
            config,
            blocks,
            embedding,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                self.config.n_layers
            )));
        }
        for b in &self.blocks {
            b.validate(&self.config)?;
        }
        let e = &self.embedding;
        if e.rows() != self.config.vocab
            || e.cols() != self.config.d_model
            || e.order() != StorageOrder::RowContiguous
        {
            return Err(Error::Config(format!("embedding has shape {}", e.shape())));
        }
        Ok(())
    }

    /// Gaussian initialization, fan-in scaled, unit layer-norm gains.
    pub fn random(config: ModelConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.derive(crate::tensor::streams::MODEL).rng();
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::random(&config, &mut rng))
            .collect();
        let embedding = Matrix::gaussian(
            config.vocab,
            config.d_model,
            1.0,
            StorageOrder::RowContiguous,
            &mut rng,
        );
        TransformerWeights::new(config, blocks, embedding)
    }

    /// Clustered construction: tokens belong to `t % clusters`, every neuron
    /// is tuned to one cluster direction and inhibited by the others, and
    /// sub-block outputs are kept small so each layer's input stays near its
    /// token's cluster.
    pub fn planted(config: ModelConfig, spec: PlantedSpec, seed: Seed) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if spec.clusters == 0 || spec.clusters >= d {
            return Err(Error::Config(format!(
                "planted clusters {} must be in 1..{d}",
                spec.clusters
            )));
        }
        let mut rng = seed.derive(crate::tensor::streams::MODEL).rng();
        let dirs = zero_mean_orthonormal(spec.clusters, d, &mut rng);
        let sqrt_d = (d as f64).sqrt();

        let mut emb = Vec::with_capacity(config.vocab * d);
        for t in 0..config.vocab {
            let c = spec.cluster_of_token(t as u32);
            for dir_k in &dirs[c] {
                let z: f64 = rng.sample(StandardNormal);
                emb.push((sqrt_d * dir_k + spec.embed_noise * z) as f32);
            }
        }
        let embedding = Matrix::from_storage(config.vocab, d, StorageOrder::RowContiguous, emb)?;

        let gain = 2.0 / sqrt_d;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut b = BlockWeights::random(&config, &mut rng);
            for wo in &mut b.wo {
                wo.scale(spec.residual_scale as f32);
            }
            b.w2.scale(spec.residual_scale as f32);
            for r in 0..config.d_ff {
                let own = spec.cluster_of_neuron(r);
                for k in 0..d {
                    let mut w = dirs[own][k];
                    for (c, dir) in dirs.iter().enumerate() {
                        if c != own {
                            w -= spec.inhibition * dir[k];
                        }
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    w += spec.weight_noise * z / sqrt_d;
                    b.w1.set(k, r, (gain * w) as f32);
                }
            }
            blocks.push(b);
        }
        TransformerWeights::new(config, blocks, embedding)
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f32>> {
        if token as usize >= self.config.vocab {
            return Err(Error::UnknownToken {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(self.embedding.row(token as usize).to_vec())
    }

    /// Tied output projection.
    pub fn logits(&self, y: &[f32]) -> Result<Vec<f32>> {
        crate::tensor::matvec(&self.embedding, y)
    }

    /// Stable 64-bit fingerprint of the serialized weights (config and all
    /// tensors), used to pair weights with records and predictors.
    pub fn fingerprint(&self) -> u64 {
        crate::format::fingerprint(&crate::format::encode_weights(self))
    }
}

/// `n` orthonormal directions in `R^d`, each orthogonal to the all-ones vector.
fn zero_mean_orthonormal(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < n + 1 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n2 > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n2);
            basis.push(v);
        }
    }
    basis.split_off(1)
}
