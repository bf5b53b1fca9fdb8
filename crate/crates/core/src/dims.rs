use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training shape parameters of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    #[serde(rename = "b")]
    pub batch: usize,
    #[serde(rename = "s")]
    pub seq: usize,
    #[serde(rename = "h")]
    pub heads: usize,
    #[serde(rename = "d")]
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub world_size: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn one() -> usize {
    1
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

pub const DEFAULT_VOCAB: usize = 32;

impl ModelDims {
    pub fn new(batch: usize, seq: usize, heads: usize, head_dim: usize, d_ffn: usize, layers: usize) -> Self {
        ModelDims {
            batch,
            seq,
            heads,
            head_dim,
            d_model: heads * head_dim,
            d_ffn,
            layers,
            world_size: 1,
            vocab: DEFAULT_VOCAB,
        }
    }

    pub fn with_world_size(mut self, p: usize) -> Self {
        self.world_size = p;
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_seq(mut self, seq: usize) -> Self {
        self.seq = seq;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("b", self.batch),
            ("s", self.seq),
            ("h", self.heads),
            ("d", self.head_dim),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("layers", self.layers),
            ("world_size", self.world_size),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidDims(format!("{name} must be positive")));
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::InvalidDims(format!(
                "d_model {} != h*d = {}",
                self.d_model,
                self.heads * self.head_dim
            )));
        }
        Ok(())
    }

    /// Divisibility required by the sequence-parallel rewrite.
    pub fn check_divisible(&self, p: usize) -> Result<()> {
        if p == 0 {
            return Err(Error::InvalidDims("world size must be positive".into()));
        }
        if !self.seq.is_multiple_of(p) {
            return Err(Error::Indivisible { what: "sequence length", value: self.seq, world: p });
        }
        if !self.heads.is_multiple_of(p) {
            return Err(Error::Indivisible { what: "head count", value: self.heads, world: p });
        }
        Ok(())
    }

    /// Weight count of the transformer built from these dims.
    pub fn param_count(&self) -> u64 {
        let (dm, ff, v) = (self.d_model as u64, self.d_ffn as u64, self.vocab as u64);
        let per_layer = 2 * dm + 3 * dm * dm + dm * dm + 2 * dm * ff;
        v * dm + self.layers as u64 * per_layer + dm + v * dm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_model_dim() {
        let mut d = ModelDims::new(1, 4, 2, 2, 8, 1);
        assert!(d.validate().is_ok());
        d.d_model = 5;
        assert!(matches!(d.validate(), Err(Error::InvalidDims(_))));
        d.d_model = 4;
        d.seq = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn divisibility() {
        let d = ModelDims::new(1, 8, 4, 2, 8, 1);
        assert!(d.check_divisible(2).is_ok());
        assert!(matches!(d.check_divisible(3), Err(Error::Indivisible { .. })));
    }
}
