use thiserror::Error;

use crate::ir::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("graph failed validation: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("node {node} ({kind}) cannot be lowered")]
    Unlowerable { node: usize, kind: String },

    #[error("node {node} ({kind}) has no registered gradient")]
    NoGradient { node: usize, kind: String },

    #[error("joint graph needs exactly one scalar loss output, found {0}")]
    LossOutput(usize),

    #[error("graph has no attention node")]
    NoAttention,

    #[error("graph input must be rank-2 [batch, seq], got rank {0}")]
    InputNotRank2(usize),

    #[error("{what} = {value} is not divisible by world size {world}")]
    Indivisible { what: &'static str, value: usize, world: usize },

    #[error("graph already contains all-to-all nodes")]
    AlreadyTransformed,

    #[error("attention op set member not found in graph")]
    AttentionOpNotFound,

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("runtime shape mismatch at node {node}: {detail}")]
    RuntimeShape { node: usize, detail: String },

    #[error("missing value for node {node}: {detail}")]
    Missing { node: usize, detail: String },

    #[error("use after free: node {consumer} reads freed value {value}")]
    UseAfterFree { consumer: usize, value: usize },

    #[error("collective mismatch across ranks: {0}")]
    CollectiveMismatch(String),

    #[error("collective deadlock: {0}")]
    Deadlock(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}
