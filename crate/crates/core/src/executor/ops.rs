//! Reference kernels. Plain loops over row-major buffers; clarity over speed.

use super::TensorValue;
use crate::error::{Error, Result};
use crate::ir::{shape::slice_attrs, EwOp, Node, OpKind, TensorSpec};

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

pub(crate) fn strides(extents: &[usize]) -> Vec<usize> {
    let mut st = vec![1; extents.len()];
    for i in (0..extents.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * extents[i + 1];
    }
    st
}

fn fault(node: &Node, detail: impl Into<String>) -> Error {
    Error::RuntimeShape { node: node.id, detail: detail.into() }
}

/// Evaluates one non-collective node.
pub fn eval(node: &Node, ins: &[&TensorValue], rank: usize) -> Result<TensorValue> {
    let out = &node.out;
    let data = match node.kind {
        OpKind::Input | OpKind::Parameter | OpKind::AllToAll(_) => {
            return Err(fault(node, format!("{} is not evaluated by a kernel", node.kind)))
        }
        OpKind::GradMarker => vec![1.0; out.numel()],
        OpKind::PositionIndex => {
            let shard = node.usize_attr("shard_len").ok_or_else(|| fault(node, "shard_len"))?;
            (0..out.numel()).map(|i| (rank * shard + i) as f64).collect()
        }
        OpKind::CausalMaskIndex => {
            let s = out.axes[0].extent;
            let t = out.axes[1].extent;
            let mut m = vec![0.0; s * t];
            for i in 0..s {
                for j in (i + 1)..t {
                    m[i * t + j] = MASK_NEG;
                }
            }
            m
        }
        OpKind::Embedding => gather(ins[0], ins[1], node)?,
        OpKind::ScatterAdd => scatter_add(ins[0], ins[1], out, node)?,
        OpKind::Linear => linear(ins[0], ins[1]),
        OpKind::RmsNorm => rms_norm(ins[0], ins[1], eps(node)),
        OpKind::AttentionCore => attention(ins[0], ins[1]),
        OpKind::Elementwise(op) => elementwise(op, node, ins)?,
        OpKind::Reshape => ins[0].data.clone(),
        OpKind::Permute => {
            let perm = node.perm().ok_or_else(|| fault(node, "perm"))?;
            permute(&ins[0].data, &ins[0].spec.extents(), &perm)
        }
        OpKind::Softmax => softmax(&ins[0].data, last_extent(&ins[0].spec)),
        OpKind::Loss => vec![ins[0].data.iter().sum()],
        OpKind::MatMul => matmul(ins[0], ins[1]),
        OpKind::BatchMatMul => batch_matmul(ins[0], ins[1]),
        OpKind::ReduceSum => {
            let n = out.numel();
            let mut acc = vec![0.0; n];
            for (i, v) in ins[0].data.iter().enumerate() {
                acc[i % n] += v;
            }
            acc
        }
        OpKind::Broadcast => {
            let n = ins[0].data.len();
            (0..out.numel()).map(|i| ins[0].data[i % n]).collect()
        }
        OpKind::Slice => {
            let (axis, start, len) = slice_attrs(node).map_err(|e| fault(node, e))?;
            slice(&ins[0].data, &ins[0].spec.extents(), axis, start, len)
        }
        OpKind::Pad => {
            let axis = node.usize_attr("axis").ok_or_else(|| fault(node, "axis"))?;
            let start = node.usize_attr("start").ok_or_else(|| fault(node, "start"))?;
            pad(&ins[0].data, &ins[0].spec.extents(), axis, start, out.axes[axis].extent)
        }
    };
    if data.len() != out.numel() {
        return Err(fault(node, format!("kernel produced {} elements for {}", data.len(), out)));
    }
    Ok(TensorValue { spec: out.clone(), data })
}

fn eps(node: &Node) -> f64 {
    node.float_attr("eps").unwrap_or(crate::ir::build::RMS_EPS)
}

fn last_extent(spec: &TensorSpec) -> usize {
    spec.axes.last().map(|a| a.extent).unwrap_or(1)
}

fn elementwise(op: EwOp, node: &Node, ins: &[&TensorValue]) -> Result<Vec<f64>> {
    let a = &ins[0].data;
    Ok(match op {
        EwOp::Add | EwOp::Mul => {
            let b = &ins[1].data;
            let n = b.len();
            if n == 0 || !a.len().is_multiple_of(n) {
                return Err(fault(node, "broadcast mismatch"));
            }
            a.iter()
                .enumerate()
                .map(|(i, x)| if op == EwOp::Add { x + b[i % n] } else { x * b[i % n] })
                .collect()
        }
        EwOp::Silu => a.iter().map(|&x| x * sigmoid(x)).collect(),
        EwOp::Scale => {
            let c = node.float_attr("scale").ok_or_else(|| fault(node, "scale"))?;
            a.iter().map(|x| x * c).collect()
        }
        EwOp::Sinusoid => {
            let dim = node.out.axes[1].extent;
            let mut out = Vec::with_capacity(a.len() * dim);
            for &p in a {
                for j in 0..dim {
                    let pair = (j / 2 * 2) as f64;
                    let angle = p / 10000f64.powf(pair / dim as f64);
                    out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
                }
            }
            out
        }
        EwOp::RmsNorm => rms_norm(ins[0], ins[1], eps(node)),
        EwOp::SiluBackward => a
            .iter()
            .zip(&ins[1].data)
            .map(|(&x, &dy)| {
                let s = sigmoid(x);
                dy * (s + x * s * (1.0 - s))
            })
            .collect(),
        EwOp::RmsNormBackward => rms_norm_backward(ins[0], ins[1], ins[2], eps(node)),
        EwOp::RmsNormGainGrad => {
            let w = last_extent(&ins[0].spec);
            let mut out = vec![0.0; a.len()];
            for (r, row) in a.chunks(w).enumerate() {
                let inv = 1.0 / rms(row, eps(node));
                for j in 0..w {
                    out[r * w + j] = row[j] * inv * ins[1].data[r * w + j];
                }
            }
            out
        }
        EwOp::SoftmaxBackward => {
            let w = last_extent(&ins[0].spec);
            let dy = &ins[1].data;
            let mut out = vec![0.0; a.len()];
            for r in 0..a.len() / w {
                let row = r * w..(r + 1) * w;
                let dot: f64 = a[row.clone()].iter().zip(&dy[row.clone()]).map(|(y, g)| y * g).sum();
                for i in row {
                    out[i] = a[i] * (dy[i] - dot);
                }
            }
            out
        }
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rms(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64 + eps).sqrt()
}

fn rms_norm(x: &TensorValue, gain: &TensorValue, eps: f64) -> Vec<f64> {
    let w = last_extent(&x.spec);
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(w) {
        let inv = 1.0 / rms(row, eps);
        out.extend(row.iter().zip(&gain.data).map(|(v, g)| v * inv * g));
    }
    out
}

fn rms_norm_backward(x: &TensorValue, gain: &TensorValue, dy: &TensorValue, eps: f64) -> Vec<f64> {
    let w = last_extent(&x.spec);
    let mut out = vec![0.0; x.data.len()];
    for (r, row) in x.data.chunks(w).enumerate() {
        let r0 = r * w;
        let inv = 1.0 / rms(row, eps);
        // dx = inv * (g*dy) - x * inv^3 * mean(x * g * dy)
        let dot: f64 = (0..w).map(|j| row[j] * gain.data[j] * dy.data[r0 + j]).sum::<f64>() / w as f64;
        for j in 0..w {
            out[r0 + j] = inv * gain.data[j] * dy.data[r0 + j] - row[j] * inv * inv * inv * dot;
        }
    }
    out
}

fn softmax(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

fn gather(ids: &TensorValue, table: &TensorValue, node: &Node) -> Result<Vec<f64>> {
    let rows = table.spec.axes[0].extent;
    let w = table.data.len() / rows;
    let mut out = Vec::with_capacity(ids.data.len() * w);
    for &id in &ids.data {
        let r = id as usize;
        if id < 0.0 || r >= rows {
            return Err(fault(node, format!("index {id} out of range {rows}")));
        }
        out.extend_from_slice(&table.data[r * w..(r + 1) * w]);
    }
    Ok(out)
}

fn scatter_add(ids: &TensorValue, dy: &TensorValue, out: &TensorSpec, node: &Node) -> Result<Vec<f64>> {
    let rows = out.axes[0].extent;
    let w = out.numel() / rows;
    let mut acc = vec![0.0; out.numel()];
    for (k, &id) in ids.data.iter().enumerate() {
        let r = id as usize;
        if id < 0.0 || r >= rows {
            return Err(fault(node, format!("index {id} out of range {rows}")));
        }
        for j in 0..w {
            acc[r * w + j] += dy.data[k * w + j];
        }
    }
    Ok(acc)
}

fn linear(x: &TensorValue, w: &TensorValue) -> Vec<f64> {
    let (o, i) = (w.spec.axes[0].extent, w.spec.axes[1].extent);
    let mut out = Vec::with_capacity(x.data.len() / i * o);
    for row in x.data.chunks(i) {
        for r in 0..o {
            out.push(row.iter().zip(&w.data[r * i..(r + 1) * i]).map(|(a, b)| a * b).sum());
        }
    }
    out
}

fn mm_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut Vec<f64>) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let mut acc = vec![0.0; n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for c in 0..n {
                acc[c] += av * brow[c];
            }
        }
        out.extend(acc);
    }
}

fn matmul(a: &TensorValue, b: &TensorValue) -> Vec<f64> {
    let (k, n) = (b.spec.axes[0].extent, b.spec.axes[1].extent);
    let m = a.data.len() / k;
    let mut out = Vec::with_capacity(m * n);
    mm_into(&a.data, &b.data, m, k, n, &mut out);
    out
}

fn batch_matmul(a: &TensorValue, b: &TensorValue) -> Vec<f64> {
    let ea = a.spec.extents();
    let r = ea.len();
    let (m, k, n) = (ea[r - 2], ea[r - 1], b.spec.axes[r - 1].extent);
    let batches = a.data.len() / (m * k);
    let mut out = Vec::with_capacity(batches * m * n);
    for bi in 0..batches {
        mm_into(&a.data[bi * m * k..(bi + 1) * m * k], &b.data[bi * k * n..(bi + 1) * k * n], m, k, n, &mut out);
    }
    out
}

pub(crate) fn permute(x: &[f64], extents: &[usize], perm: &[usize]) -> Vec<f64> {
    let src_strides = strides(extents);
    let out_ext: Vec<usize> = perm.iter().map(|&p| extents[p]).collect();
    let rank = perm.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = (0..rank).map(|d| idx[d] * src_strides[perm[d]]).sum();
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_ext[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn slice(x: &[f64], extents: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let inner: usize = extents[axis + 1..].iter().product();
    let outer: usize = extents[..axis].iter().product();
    let full = extents[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner;
        out.extend_from_slice(&x[base + start * inner..base + (start + len) * inner]);
    }
    out
}

fn pad(x: &[f64], extents: &[usize], axis: usize, start: usize, full: usize) -> Vec<f64> {
    let inner: usize = extents[axis + 1..].iter().product();
    let outer: usize = extents[..axis].iter().product();
    let len = extents[axis];
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Unfused causal attention on stacked `qkv [b, s, 3, h, d]`.
fn attention(qkv: &TensorValue, mask: &TensorValue) -> Vec<f64> {
    let e = qkv.spec.extents();
    let (b, s, h, d) = (e[0], e[1], e[3], e[4]);
    let st = strides(&e);
    let at = |bi: usize, si: usize, which: usize, hi: usize, di: usize| {
        qkv.data[bi * st[0] + si * st[1] + which * st[2] + hi * st[3] + di * st[4]]
    };
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; b * s * h * d];
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        let dot: f64 = (0..d).map(|k| at(bi, i, 0, hi, k) * at(bi, j, 1, hi, k)).sum();
                        dot * scale + mask.data[i * s + j]
                    })
                    .collect();
                let p = softmax(&scores, s);
                for k in 0..d {
                    let v: f64 = (0..s).map(|j| p[j] * at(bi, j, 2, hi, k)).sum();
                    out[((bi * s + i) * h + hi) * d + k] = v;
                }
            }
        }
    }
    out
}
