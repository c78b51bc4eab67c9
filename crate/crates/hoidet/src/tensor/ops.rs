//! Forward implementations of every tape operation, plus the composite
//! attention / cosine helpers. Shape checks happen here; gradient rules
//! live in `tape.rs` next to the op enum.

use crate::{Error, Result};

use super::tape::{Op, Tape};
use super::{Tensor, MASK_CUTOFF};

/// (outer, axis length, inner) split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// C = A (m×k) · B (k×n), row-major.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// C = A (m×n) · Bᵀ where B is (k×n): result m×k.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// C = Aᵀ · B where A is (m×k), B is (m×n): result k×n.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    /// Elementwise sum; one side may be scalar.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() && !a.is_scalar() && !b.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let (big, small) = if b.is_scalar() && !a.is_scalar() {
            (a, b)
        } else {
            (b, a)
        };
        let value: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
        } else {
            let s = small.data()[0];
            big.data().iter().map(|x| x + s).collect()
        };
        Ok(self.push(Op::Add, vec![pa, pb], big.shape().to_vec(), value))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub, vec![pa, pb], a.shape().to_vec(), value))
    }

    /// Elementwise product; one side may be scalar.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() && !a.is_scalar() && !b.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let (value, shape): (Vec<f64>, Vec<usize>) = if a.shape() == b.shape() {
            (
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                a.shape().to_vec(),
            )
        } else if b.is_scalar() {
            let s = b.data()[0];
            (a.data().iter().map(|x| x * s).collect(), a.shape().to_vec())
        } else {
            let s = a.data()[0];
            (b.data().iter().map(|x| x * s).collect(), b.shape().to_vec())
        };
        Ok(self.push(Op::Mul, vec![pa, pb], shape, value))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("div", a, b)?;
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        Ok(self.push(Op::Div, vec![pa, pb], a.shape().to_vec(), value))
    }

    pub fn minimum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("minimum", a, b)?;
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        Ok(self.push(Op::Minimum, vec![pa, pb], a.shape().to_vec(), value))
    }

    pub fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("maximum", a, b)?;
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        Ok(self.push(Op::Maximum, vec![pa, pb], a.shape().to_vec(), value))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|x| x * c).collect();
        Ok(self.push(Op::Scale(c), vec![pa], a.shape().to_vec(), value))
    }

    pub fn add_const(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|x| x + c).collect();
        Ok(self.push(Op::AddConst(c), vec![pa], a.shape().to_vec(), value))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|x| x.exp()).collect();
        Ok(self.push(Op::Exp, vec![pa], a.shape().to_vec(), value))
    }

    /// Natural log; rejects non-positive inputs outright rather than letting
    /// NaN/−∞ propagate silently.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Loss("log of a non-positive value".into()));
        }
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|x| x.ln()).collect();
        Ok(self.push(Op::Log, vec![pa], a.shape().to_vec(), value))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|&x| sigmoid_stable(x)).collect();
        Ok(self.push(Op::Sigmoid, vec![pa], a.shape().to_vec(), value))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = a.data().iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(Op::Relu, vec![pa], a.shape().to_vec(), value))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = mm_nn(a.data(), b.data(), m, k, n);
        Ok(self.push(Op::Matmul, vec![pa, pb], vec![m, n], value))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: a.shape().to_vec(),
                reason: "expects a 2-D tensor".into(),
            });
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let pa = self.adopt(a)?;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = a.data()[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![pa], vec![n, m], value))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = vec![a.data().iter().sum()];
        Ok(self.push(Op::Sum, vec![pa], vec![], value))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::BadShape {
                op: "mean",
                shape: a.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let pa = self.adopt(a)?;
        let value = vec![a.data().iter().sum::<f64>() / a.numel() as f64];
        Ok(self.push(Op::Mean, vec![pa], vec![], value))
    }

    pub fn l1_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        let pa = self.adopt(a)?;
        let value = vec![a.data().iter().map(|x| x.abs()).sum()];
        Ok(self.push(Op::L1Norm, vec![pa], vec![], value))
    }

    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (pa, pb) = (self.adopt(a)?, self.adopt(b)?);
        let value = vec![a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()];
        Ok(self.push(Op::Dot, vec![pa, pb], vec![], value))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::BadShape {
                op: "concat",
                shape: parts[0].shape().to_vec(),
                reason: format!("axis {} out of range", axis),
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != out_shape[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            out_shape[axis] += p.shape()[axis];
        }
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            ids.push(self.adopt(p)?);
        }
        let (outer, total_axis, inner) = axis_split(&out_shape, axis);
        let mut value = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let len_p = p.shape()[axis];
            for o in 0..outer {
                for k in 0..len_p {
                    let dst = (o * total_axis + offset + k) * inner;
                    let src = (o * len_p + k) * inner;
                    value[dst..dst + inner].copy_from_slice(&p.data()[src..src + inner]);
                }
            }
            offset += len_p;
        }
        Ok(self.push(Op::Concat { axis }, ids, out_shape, value))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", a.numel()),
            });
        }
        let pa = self.adopt(a)?;
        Ok(self.push(Op::Reshape, vec![pa], shape.to_vec(), a.data().to_vec()))
    }

    /// Pick flat (row-major) positions into a vector.
    pub fn gather(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.numel()) {
            return Err(Error::BadShape {
                op: "gather",
                shape: a.shape().to_vec(),
                reason: format!("index {} out of range", bad),
            });
        }
        let pa = self.adopt(a)?;
        let value: Vec<f64> = idx.iter().map(|&i| a.data()[i]).collect();
        Ok(self.push(
            Op::Gather { idx: idx.to_vec() },
            vec![pa],
            vec![idx.len()],
            value,
        ))
    }

    /// Row `r` of a 2-D tensor as a vector.
    pub fn row(&mut self, a: &Tensor, r: usize) -> Result<Tensor> {
        if a.shape().len() != 2 || r >= a.shape()[0] {
            return Err(Error::BadShape {
                op: "row",
                shape: a.shape().to_vec(),
                reason: format!("row {} out of range", r),
            });
        }
        let cols = a.shape()[1];
        let idx: Vec<usize> = (r * cols..(r + 1) * cols).collect();
        self.gather(a, &idx)
    }

    /// Select rows of a 2-D tensor (repeats allowed) into a new 2-D tensor.
    pub fn gather_rows(&mut self, a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: a.shape().to_vec(),
                reason: "expects a 2-D tensor".into(),
            });
        }
        let cols = a.shape()[1];
        let mut idx = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= a.shape()[0] {
                return Err(Error::BadShape {
                    op: "gather_rows",
                    shape: a.shape().to_vec(),
                    reason: format!("row {} out of range", r),
                });
            }
            idx.extend(r * cols..(r + 1) * cols);
        }
        let flat = self.gather(a, &idx)?;
        self.reshape(&flat, &[rows.len(), cols])
    }

    /// Stack 1-D vectors of equal length into a 2-D tensor (one per row).
    pub fn stack_rows(&mut self, rows: &[&Tensor]) -> Result<Tensor> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for r in rows {
            if r.shape().len() != 1 {
                return Err(Error::BadShape {
                    op: "stack_rows",
                    shape: r.shape().to_vec(),
                    reason: "expects 1-D inputs".into(),
                });
            }
            reshaped.push(self.reshape(r, &[1, r.numel()])?);
        }
        let refs: Vec<&Tensor> = reshaped.iter().collect();
        self.concat(&refs, 0)
    }

    /// Softmax along `axis`. Entries at or below [`MASK_CUTOFF`] are treated
    /// as −∞: they get exactly zero weight and pass no gradient. A line with
    /// every entry masked is an error.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::BadShape {
                op: "softmax",
                shape: a.shape().to_vec(),
                reason: format!("axis {} out of range", axis),
            });
        }
        let (outer, len, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut value = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    let v = x[(o * len + k) * inner + i];
                    if v > MASK_CUTOFF && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateSoftmaxRow);
                }
                let mut denom = 0.0;
                for k in 0..len {
                    let p = (o * len + k) * inner + i;
                    if x[p] > MASK_CUTOFF {
                        let e = (x[p] - max).exp();
                        value[p] = e;
                        denom += e;
                    }
                }
                for k in 0..len {
                    value[(o * len + k) * inner + i] /= denom;
                }
            }
        }
        let pa = self.adopt(a)?;
        Ok(self.push(Op::Softmax { axis }, vec![pa], a.shape().to_vec(), value))
    }

    /// Row-wise log-softmax along the last axis (finite inputs only).
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().is_empty() {
            return Err(Error::BadShape {
                op: "log_softmax",
                shape: vec![],
                reason: "expects at least one axis".into(),
            });
        }
        let cols = *a.shape().last().unwrap();
        let rows = a.numel() / cols;
        let x = a.data();
        let mut value = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                value[r * cols + c] = row[c] - lse;
            }
        }
        let pa = self.adopt(a)?;
        Ok(self.push(Op::LogSoftmax, vec![pa], a.shape().to_vec(), value))
    }

    /// log Σ exp over a vector, skipping masked entries.
    pub fn logsumexp(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || a.numel() == 0 {
            return Err(Error::BadShape {
                op: "logsumexp",
                shape: a.shape().to_vec(),
                reason: "expects a non-empty vector".into(),
            });
        }
        let mut max = f64::NEG_INFINITY;
        for &v in a.data() {
            if v > MASK_CUTOFF && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateSoftmaxRow);
        }
        let sum: f64 = a
            .data()
            .iter()
            .filter(|&&v| v > MASK_CUTOFF)
            .map(|&v| (v - max).exp())
            .sum();
        let pa = self.adopt(a)?;
        Ok(self.push(Op::LogSumExp, vec![pa], vec![], vec![max + sum.ln()]))
    }

    /// L2-normalize each row along the last axis. Rows with norm below `eps`
    /// are scaled by `1/eps` instead (deterministic, finite).
    pub fn normalize(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        if a.shape().is_empty() {
            return Err(Error::BadShape {
                op: "normalize",
                shape: vec![],
                reason: "expects at least one axis".into(),
            });
        }
        let cols = *a.shape().last().unwrap();
        let rows = a.numel() / cols;
        let mut value = vec![0.0; a.numel()];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if norm > eps { norm } else { eps };
            for c in 0..cols {
                value[r * cols + c] = row[c] / denom;
            }
        }
        let pa = self.adopt(a)?;
        Ok(self.push(Op::Normalize { eps }, vec![pa], a.shape().to_vec(), value))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let cols = *x.shape().last().ok_or(Error::BadShape {
            op: "layer_norm",
            shape: vec![],
            reason: "expects at least one axis".into(),
        })?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: gain.shape().to_vec(),
                rhs: vec![cols],
            });
        }
        let rows = x.numel() / cols;
        let mut value = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let sd = (var + eps).sqrt();
            for c in 0..cols {
                value[r * cols + c] = (row[c] - mu) / sd * gain.data()[c] + bias.data()[c];
            }
        }
        let (px, pg, pb) = (self.adopt(x)?, self.adopt(gain)?, self.adopt(bias)?);
        Ok(self.push(
            Op::LayerNorm { eps },
            vec![px, pg, pb],
            x.shape().to_vec(),
            value,
        ))
    }

    /// y = x·w + b for 2-D `x` (rows are samples), broadcasting `b` per row.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (rows, k, out) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        if b.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: b.shape().to_vec(),
                rhs: vec![out],
            });
        }
        let mut value = mm_nn(x.data(), w.data(), rows, k, out);
        for r in 0..rows {
            for c in 0..out {
                value[r * out + c] += b.data()[c];
            }
        }
        let (px, pw, pb) = (self.adopt(x)?, self.adopt(w)?, self.adopt(b)?);
        Ok(self.push(Op::Linear, vec![px, pw, pb], vec![rows, out], value))
    }

    /// Linear layer applied to one vector.
    pub fn linear_vec(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let row = self.reshape(x, &[1, x.numel()])?;
        let y = self.linear(&row, w, b)?;
        let out = y.numel();
        self.reshape(&y, &[out])
    }

    /// Focal binary cross-entropy over logits, summed and divided by `norm`.
    /// `targets` holds 0/1 per element.
    pub fn focal_bce(
        &mut self,
        logits: &Tensor,
        targets: &[f64],
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<Tensor> {
        if targets.len() != logits.numel() {
            return Err(Error::BadShape {
                op: "focal_bce",
                shape: logits.shape().to_vec(),
                reason: format!("{} targets for {} logits", targets.len(), logits.numel()),
            });
        }
        if norm <= 0.0 {
            return Err(Error::Loss("focal_bce: norm must be positive".into()));
        }
        let mut total = 0.0;
        for (&x, &t) in logits.data().iter().zip(targets) {
            let p = sigmoid_stable(x);
            if t > 0.5 {
                total += alpha * (1.0 - p).powf(gamma) * softplus(-x);
            } else {
                total += (1.0 - alpha) * p.powf(gamma) * softplus(x);
            }
        }
        let pa = self.adopt(logits)?;
        Ok(self.push(
            Op::FocalBce {
                targets: targets.to_vec(),
                alpha,
                gamma,
                norm,
            },
            vec![pa],
            vec![],
            vec![total / norm],
        ))
    }

    /// Scaled dot-product attention with an optional additive mask
    /// (entries 0 or [`super::NEG_INF`]). `q`: nq×d, `k`: nk×d, `v`: nk×dv,
    /// `mask`: nq×nk. Masked positions get exactly zero weight.
    pub fn attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        if q.shape().len() != 2 || k.shape().len() != 2 || q.shape()[1] != k.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if v.shape().len() != 2 || v.shape()[0] != k.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: k.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let d = q.shape()[1];
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, &kt)?;
        let scaled = self.scale(&scores, 1.0 / (d as f64).sqrt())?;
        let masked = match mask {
            Some(m) => {
                if m.shape() != scaled.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "attention",
                        lhs: m.shape().to_vec(),
                        rhs: scaled.shape().to_vec(),
                    });
                }
                self.add(&scaled, m)?
            }
            None => scaled,
        };
        let weights = self.softmax(&masked, 1)?;
        self.matmul(&weights, v)
    }

    /// Cosine similarity of two vectors.
    pub fn cosine(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let na = self.normalize(a, 1e-12)?;
        let nb = self.normalize(b, 1e-12)?;
        self.dot(&na, &nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NEG_INF;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(&i2, &m).unwrap();
        assert_eq!(y.data(), m.data());
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let y = tape.softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_entry_is_exact_zero() {
        let mut tape = Tape::new();
        let y = tape.softmax(&Tensor::vector(vec![0.0, NEG_INF]), 0).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::new();
        let r = tape.softmax(&Tensor::vector(vec![NEG_INF, NEG_INF]), 0);
        assert!(matches!(r, Err(Error::DegenerateSoftmaxRow)));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let x = vec![0.31, -1.2, 2.4, 0.0, 0.77];
        let mut tape = Tape::new();
        let y = tape.softmax(&Tensor::vector(x.clone()), 0).unwrap();
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        for (a, b) in y.data().iter().zip(x.iter().map(|v| v.exp() / denom)) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_axis0_on_matrix() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]);
        let y = tape.softmax(&x, 0).unwrap();
        // Each column sums to one.
        assert!((y.at2(0, 0) + y.at2(1, 0) - 1.0).abs() <= 1e-12);
        assert!((y.at2(0, 1) + y.at2(1, 1) - 1.0).abs() <= 1e-12);
        assert_eq!(y.at2(0, 0), 0.5);
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[3.0, 4.0]);
        let rows = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        assert_eq!(rows.data(), &[1.0, 2.0, 3.0, 4.0]);
        let cols = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.gather(&x, &[2, 0, 2]).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0, 3.0]);
        let s = tape.sum(&y).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_broadcasts_bias() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::vector(vec![10.0, 20.0]);
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn attention_masked_column_gets_zero_weight() {
        let mut tape = Tape::new();
        let q = t(&[1, 2], &[1.0, 0.0]);
        let k = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 2], &[5.0, 5.0, 7.0, 7.0]);
        let mask = t(&[1, 2], &[0.0, NEG_INF]);
        let y = tape.attention(&q, &k, &v, Some(&mask)).unwrap();
        // Only the first key is visible.
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn cosine_of_parallel_and_orthogonal() {
        let mut tape = Tape::new();
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![2.0, 0.0]);
        let c = Tensor::vector(vec![0.0, 3.0]);
        assert!((tape.cosine(&a, &b).unwrap().item() - 1.0).abs() <= 1e-12);
        assert!(tape.cosine(&a, &c).unwrap().item().abs() <= 1e-12);
    }

    #[test]
    fn logsumexp_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = vec![0.5, -0.25, 1.5];
        let y = tape.logsumexp(&Tensor::vector(x.clone())).unwrap();
        let direct = x.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((y.item() - direct).abs() <= 1e-12);
    }
}
