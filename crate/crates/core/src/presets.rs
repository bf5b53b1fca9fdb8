//! Named model shapes and the JSON config file that can add more.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dims::{ModelDims, DEFAULT_VOCAB};
use crate::error::{Error, Result};

/// Model shape without a sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetDims {
    pub b: usize,
    pub h: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub layers: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

impl PresetDims {
    pub fn at(&self, seq: usize) -> ModelDims {
        ModelDims::new(self.b, seq, self.h, self.d, self.d_ffn, self.layers).with_vocab(self.vocab)
    }
}

const BUILTIN: [(&str, PresetDims); 5] = [
    ("tiny", PresetDims { b: 1, h: 2, d: 4, d_ffn: 16, layers: 1, vocab: 16 }),
    // a small model whose activations dominate its weights at long sequence
    ("desk", PresetDims { b: 1, h: 2, d: 1024, d_ffn: 8192, layers: 4, vocab: 1024 }),
    ("llama-1b-like", PresetDims { b: 1, h: 32, d: 64, d_ffn: 8192, layers: 16, vocab: 32000 }),
    ("llama-3b-like", PresetDims { b: 1, h: 24, d: 128, d_ffn: 8192, layers: 28, vocab: 32000 }),
    ("llama-8b-like", PresetDims { b: 1, h: 32, d: 128, d_ffn: 14336, layers: 32, vocab: 32000 }),
];

pub fn builtin(name: &str) -> Option<PresetDims> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// `{"presets": {"name": {b, h, d, d_ffn, layers, vocab?}}, "dims": {...}}`;
/// both keys are optional. `dims` is a full shape including `s`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub presets: BTreeMap<String, PresetDims>,
    #[serde(default)]
    pub dims: Option<ModelDims>,
}

impl ConfigFile {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Looks up `name` in the file first, then among the built-ins.
    pub fn preset(&self, name: &str) -> Result<PresetDims> {
        self.presets
            .get(name)
            .copied()
            .or_else(|| builtin(name))
            .ok_or_else(|| Error::Parse(format!("unknown preset `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for name in builtin_names() {
            let p = builtin(name).unwrap();
            assert!(p.at(4096).validate().is_ok(), "{name}");
        }
        assert_eq!(builtin("llama-8b-like").unwrap().at(1).d_model, 4096);
    }

    #[test]
    fn file_presets_shadow_builtins() {
        let cfg = ConfigFile::from_json_str(r#"{"presets": {"tiny": {"b": 2, "h": 4, "d": 8, "d_ffn": 8, "layers": 2}}}"#)
            .unwrap();
        assert_eq!(cfg.preset("tiny").unwrap().h, 4);
        assert_eq!(cfg.preset("tiny").unwrap().vocab, DEFAULT_VOCAB);
        assert_eq!(cfg.preset("desk").unwrap(), builtin("desk").unwrap());
        assert!(cfg.preset("nope").is_err());
        assert!(ConfigFile::from_json_str(r#"{"model": {}}"#).is_err());
    }

    #[test]
    fn dims_section_parses() {
        let cfg = ConfigFile::from_json_str(
            r#"{"dims": {"b": 1, "s": 64, "h": 2, "d": 4, "d_model": 8, "d_ffn": 16, "layers": 1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.dims.unwrap().seq, 64);
    }
}
