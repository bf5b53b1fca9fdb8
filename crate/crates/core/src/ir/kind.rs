use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pointwise and row-wise ops. Row-wise members (norm, softmax grads) act on
/// the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EwOp {
    Add,
    Mul,
    Silu,
    /// Multiply by the node's `scale` attribute.
    Scale,
    /// Sinusoidal encoding of integer positions, `[S] -> [S, Model]`.
    Sinusoid,
    /// `x / rms(x) * gain`, inputs `(x, gain)`.
    RmsNorm,
    /// Inputs `(x, dy)`.
    SiluBackward,
    /// Inputs `(x, gain, dy)`, yields `dx`.
    RmsNormBackward,
    /// Inputs `(x, dy)`, yields `dy * x / rms(x)` before the gain reduction.
    RmsNormGainGrad,
    /// Inputs `(y, dy)` where `y` is the softmax output.
    SoftmaxBackward,
}

const EW_OPS: [(EwOp, &str); 10] = [
    (EwOp::Add, "add"),
    (EwOp::Mul, "mul"),
    (EwOp::Silu, "silu"),
    (EwOp::Scale, "scale"),
    (EwOp::Sinusoid, "sinusoid"),
    (EwOp::RmsNorm, "rms_norm"),
    (EwOp::SiluBackward, "silu_backward"),
    (EwOp::RmsNormBackward, "rms_norm_backward"),
    (EwOp::RmsNormGainGrad, "rms_norm_gain_grad"),
    (EwOp::SoftmaxBackward, "softmax_backward"),
];

impl EwOp {
    pub fn name(self) -> &'static str {
        EW_OPS.iter().find(|(op, _)| *op == self).map(|(_, n)| *n).unwrap()
    }

    pub fn arity(self) -> usize {
        match self {
            EwOp::Silu | EwOp::Scale | EwOp::Sinusoid => 1,
            EwOp::RmsNormBackward => 3,
            _ => 2,
        }
    }
}

/// All-to-all layout toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Sequence-sharded in, head-sharded out.
    SeqToHead,
    /// Head-sharded in, sequence-sharded out.
    HeadToSeq,
}

impl Direction {
    pub fn inverse(self) -> Self {
        match self {
            Direction::SeqToHead => Direction::HeadToSeq,
            Direction::HeadToSeq => Direction::SeqToHead,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::SeqToHead => "seq_to_head",
            Direction::HeadToSeq => "head_to_seq",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Parameter,
    Embedding,
    Linear,
    RmsNorm,
    AttentionCore,
    CausalMaskIndex,
    PositionIndex,
    Elementwise(EwOp),
    Reshape,
    Permute,
    Softmax,
    Loss,
    AllToAll(Direction),
    MatMul,
    BatchMatMul,
    ReduceSum,
    Slice,
    Pad,
    Broadcast,
    ScatterAdd,
    GradMarker,
}

/// Payload-free discriminant of [`OpKind`], used for op sets and provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KindTag {
    Input,
    Parameter,
    Embedding,
    Linear,
    RmsNorm,
    AttentionCore,
    CausalMaskIndex,
    PositionIndex,
    Elementwise,
    Reshape,
    Permute,
    Softmax,
    Loss,
    AllToAll,
    MatMul,
    BatchMatMul,
    ReduceSum,
    Slice,
    Pad,
    Broadcast,
    ScatterAdd,
    GradMarker,
}

impl OpKind {
    pub fn tag(self) -> KindTag {
        match self {
            OpKind::Input => KindTag::Input,
            OpKind::Parameter => KindTag::Parameter,
            OpKind::Embedding => KindTag::Embedding,
            OpKind::Linear => KindTag::Linear,
            OpKind::RmsNorm => KindTag::RmsNorm,
            OpKind::AttentionCore => KindTag::AttentionCore,
            OpKind::CausalMaskIndex => KindTag::CausalMaskIndex,
            OpKind::PositionIndex => KindTag::PositionIndex,
            OpKind::Elementwise(_) => KindTag::Elementwise,
            OpKind::Reshape => KindTag::Reshape,
            OpKind::Permute => KindTag::Permute,
            OpKind::Softmax => KindTag::Softmax,
            OpKind::Loss => KindTag::Loss,
            OpKind::AllToAll(_) => KindTag::AllToAll,
            OpKind::MatMul => KindTag::MatMul,
            OpKind::BatchMatMul => KindTag::BatchMatMul,
            OpKind::ReduceSum => KindTag::ReduceSum,
            OpKind::Slice => KindTag::Slice,
            OpKind::Pad => KindTag::Pad,
            OpKind::Broadcast => KindTag::Broadcast,
            OpKind::ScatterAdd => KindTag::ScatterAdd,
            OpKind::GradMarker => KindTag::GradMarker,
        }
    }

    pub fn is_placeholder(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Parameter)
    }

    /// Ops with no inputs whose value is generated rather than supplied.
    pub fn is_generator(self) -> bool {
        matches!(self, OpKind::CausalMaskIndex | OpKind::PositionIndex | OpKind::GradMarker)
    }

    pub fn allowed_in_high(self) -> bool {
        !matches!(
            self,
            OpKind::MatMul
                | OpKind::BatchMatMul
                | OpKind::ReduceSum
                | OpKind::Slice
                | OpKind::Pad
                | OpKind::Broadcast
                | OpKind::ScatterAdd
                | OpKind::GradMarker
        )
    }

    pub fn allowed_in_low(self) -> bool {
        !matches!(self, OpKind::Linear | OpKind::RmsNorm | OpKind::AttentionCore | OpKind::Loss)
    }

    pub fn is_compute_heavy(self) -> bool {
        matches!(self, OpKind::MatMul | OpKind::BatchMatMul)
    }
}

impl fmt::Display for KindTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Elementwise(op) => write!(f, "Elementwise.{}", op.name()),
            OpKind::AllToAll(dir) => write!(f, "AllToAll.{}", dir.name()),
            other => write!(f, "{}", other.tag()),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Parse(format!("unknown op kind {s:?}"));
        if let Some(op) = s.strip_prefix("Elementwise.") {
            let op = EW_OPS.iter().find(|(_, n)| *n == op).ok_or_else(bad)?.0;
            return Ok(OpKind::Elementwise(op));
        }
        if let Some(dir) = s.strip_prefix("AllToAll.") {
            return match dir {
                "seq_to_head" => Ok(OpKind::AllToAll(Direction::SeqToHead)),
                "head_to_seq" => Ok(OpKind::AllToAll(Direction::HeadToSeq)),
                _ => Err(bad()),
            };
        }
        Ok(match s {
            "Input" => OpKind::Input,
            "Parameter" => OpKind::Parameter,
            "Embedding" => OpKind::Embedding,
            "Linear" => OpKind::Linear,
            "RmsNorm" => OpKind::RmsNorm,
            "AttentionCore" => OpKind::AttentionCore,
            "CausalMaskIndex" => OpKind::CausalMaskIndex,
            "PositionIndex" => OpKind::PositionIndex,
            "Reshape" => OpKind::Reshape,
            "Permute" => OpKind::Permute,
            "Softmax" => OpKind::Softmax,
            "Loss" => OpKind::Loss,
            "MatMul" => OpKind::MatMul,
            "BatchMatMul" => OpKind::BatchMatMul,
            "ReduceSum" => OpKind::ReduceSum,
            "Slice" => OpKind::Slice,
            "Pad" => OpKind::Pad,
            "Broadcast" => OpKind::Broadcast,
            "ScatterAdd" => OpKind::ScatterAdd,
            "GradMarker" => OpKind::GradMarker,
            _ => return Err(bad()),
        })
    }
}
