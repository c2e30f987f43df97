use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => {
                let z = f64::from(z);
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (z + 0.044_715 * z * z * z);
                (0.5 * z * (1.0 + inner.tanh())) as f32
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Gelu),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

/// Temperature applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttnScale {
    Unit,
    InvSqrtHeadDim,
}

impl AttnScale {
    pub fn factor(self, d_head: usize) -> f64 {
        match self {
            AttnScale::Unit => 1.0,
            AttnScale::InvSqrtHeadDim => 1.0 / (d_head as f64).sqrt(),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            AttnScale::Unit => 0,
            AttnScale::InvSqrtHeadDim => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(AttnScale::Unit),
            1 => Ok(AttnScale::InvSqrtHeadDim),
            other => Err(Error::Format(format!(
                "unknown attention scale code {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub activation: Activation,
    pub attn_scale: AttnScale,
}

impl ModelConfig {
    /// Derives `d_head = d/h` and `d_ff = 4d`.
    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        vocab: usize,
        max_seq: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        let cfg = ModelConfig {
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_ff: 4 * d_model,
            n_layers,
            vocab,
            max_seq,
            activation: Activation::Relu,
            attn_scale: AttnScale::InvSqrtHeadDim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_attn_scale(mut self, attn_scale: AttnScale) -> Self {
        self.attn_scale = attn_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 || self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head {} * n_heads {} != d_model {}",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        if self.d_ff != 4 * self.d_model {
            return Err(Error::Config(format!("d_ff {} != 4 * d_model", self.d_ff)));
        }
        if self.d_model < 2 {
            return Err(Error::Config(
                "d_model must be at least 2 for layer norm".into(),
            ));
        }
        Ok(())
    }

    pub fn universe(&self, kind: crate::sparse::UnitKind) -> usize {
        match kind {
            crate::sparse::UnitKind::Heads => self.n_heads,
            crate::sparse::UnitKind::Neurons => self.d_ff,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_dims() {
        let c = ModelConfig::new(64, 8, 4, 256, 64).unwrap();
        assert_eq!((c.d_head, c.d_ff), (8, 256));
        assert!(ModelConfig::new(10, 3, 1, 8, 8).is_err());
        assert!(ModelConfig::new(8, 2, 0, 8, 8).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_192).abs() < 1e-5);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
    }
}
