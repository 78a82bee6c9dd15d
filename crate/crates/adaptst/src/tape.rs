use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Eager Wengert tape: ops execute immediately, recording operand and result
/// handles; `backward` replays the record in reverse and accumulates
/// vector-Jacobian products into each operand's grad slot.
///
/// One tape per forward pass. Leaves (parameters, inputs) are tensors created
/// outside any op; they terminate the reverse sweep. The same parameter
/// handles can appear in many tapes; grads keep summing until the caller
/// zeroes them, which is what batch accumulation relies on.
pub struct Tape<T: Scalar> {
    ops: Vec<Op<T>>,
}

enum Op<T: Scalar> {
    /// out = a · b, a:[m,k] b:[k,n]
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// out = xᵀ
    Transpose { x: Tensor<T>, out: Tensor<T> },
    /// out = a + b (same shape)
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// out[i,j] = x[i,j] + bias[j]
    AddBias {
        x: Tensor<T>,
        bias: Tensor<T>,
        out: Tensor<T>,
    },
    /// out = a ∘ b (same shape)
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// out = c · x
    Scale { x: Tensor<T>, c: T, out: Tensor<T> },
    /// out = x + k, k untracked (positions, masks)
    AddConst { x: Tensor<T>, out: Tensor<T> },
    /// out = x ∘ k, k untracked (dropout masks)
    MulConst {
        x: Tensor<T>,
        k: Vec<T>,
        out: Tensor<T>,
    },
    Relu { x: Tensor<T>, out: Tensor<T> },
    /// Row-wise softmax over the last dim of a 2-D tensor.
    Softmax { x: Tensor<T>, out: Tensor<T> },
    /// Per-row layer norm with gain/bias over the last dim.
    LayerNorm {
        x: Tensor<T>,
        gain: Tensor<T>,
        bias: Tensor<T>,
        eps: T,
        out: Tensor<T>,
    },
    /// 1-D convolution over time. x:[t,cin], w:[cout,cin,k], b:[cout],
    /// out:[t',cout] with t' = (t + 2·pad − k)/stride + 1 (floor).
    Conv1d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Tensor<T>,
        stride: usize,
        pad: usize,
        out: Tensor<T>,
    },
    /// out = x[:, start..start+len]
    SliceCols {
        x: Tensor<T>,
        start: usize,
        out: Tensor<T>,
    },
    /// Horizontal concat of same-row-count parts.
    ConcatCols {
        parts: Vec<Tensor<T>>,
        out: Tensor<T>,
    },
    /// Row gather: out[r,:] = table[rows[r],:]
    Gather {
        table: Tensor<T>,
        rows: Vec<usize>,
        out: Tensor<T>,
    },
    /// Scalar sum of all elements.
    SumAll { x: Tensor<T>, out: Tensor<T> },
    /// Mean negative log softmax probability of targets. logits:[m,v].
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        out: Tensor<T>,
    },
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        a.with_values(|av| {
            b.with_values(|bv| {
                for i in 0..m {
                    let arow = &av[i * ka..(i + 1) * ka];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (p, &apv) in arow.iter().enumerate() {
                        let brow = &bv[p * n..(p + 1) * n];
                        for (o, &bv_) in orow.iter_mut().zip(brow) {
                            *o += apv * bv_;
                        }
                    }
                }
            })
        });
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.ops.push(Op::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = x.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        x.with_values(|xv| {
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = xv[i * n + j];
                }
            }
        });
        let out = Tensor::from_vec(vec![n, m], out)?;
        self.ops.push(Op::Transpose {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = a.with_values(|av| {
            b.with_values(|bv| av.iter().zip(bv).map(|(&x, &y)| x + y).collect::<Vec<_>>())
        });
        let out = Tensor::from_vec(a.shape(), out)?;
        self.ops.push(Op::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = x.dims2("add_bias")?;
        let bs = bias.shape();
        if bs != vec![n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape(),
                rhs: bs,
            });
        }
        let out = x.with_values(|xv| {
            bias.with_values(|bv| {
                let mut out = xv.to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += bv[j];
                    }
                }
                out
            })
        });
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.ops.push(Op::AddBias {
            x: x.clone(),
            bias: bias.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = a.with_values(|av| {
            b.with_values(|bv| av.iter().zip(bv).map(|(&x, &y)| x * y).collect::<Vec<_>>())
        });
        let out = Tensor::from_vec(a.shape(), out)?;
        self.ops.push(Op::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let out = x.with_values(|xv| xv.iter().map(|&v| v * c).collect::<Vec<_>>());
        let out = Tensor::from_vec(x.shape(), out)?;
        self.ops.push(Op::Scale {
            x: x.clone(),
            c,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Add an untracked constant (positional encodings, attention masks).
    pub fn add_const(&mut self, x: &Tensor<T>, k: &[T]) -> Result<Tensor<T>> {
        if x.numel() != k.len() {
            return Err(Error::BadShape {
                op: "add_const",
                expected: "constant with matching numel",
                got: x.shape(),
            });
        }
        let out = x.with_values(|xv| xv.iter().zip(k).map(|(&a, &b)| a + b).collect::<Vec<_>>());
        let out = Tensor::from_vec(x.shape(), out)?;
        self.ops.push(Op::AddConst {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Multiply by an untracked constant (dropout keep-masks).
    pub fn mul_const(&mut self, x: &Tensor<T>, k: Vec<T>) -> Result<Tensor<T>> {
        if x.numel() != k.len() {
            return Err(Error::BadShape {
                op: "mul_const",
                expected: "constant with matching numel",
                got: x.shape(),
            });
        }
        let out = x.with_values(|xv| xv.iter().zip(&k).map(|(&a, &b)| a * b).collect::<Vec<_>>());
        let out = Tensor::from_vec(x.shape(), out)?;
        self.ops.push(Op::MulConst {
            x: x.clone(),
            k,
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.with_values(|xv| {
            xv.iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect::<Vec<_>>()
        });
        let out = Tensor::from_vec(x.shape(), out)?;
        self.ops.push(Op::Relu {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = x.dims2("softmax")?;
        if n == 0 {
            return Err(Error::EmptyInput("softmax over zero columns"));
        }
        let out = x.with_values(|xv| {
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] / sum;
                }
            }
            out
        });
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.ops.push(Op::Softmax {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// out[i,:] = gain ∘ (x[i,:] − μᵢ)/√(σᵢ² + eps) + bias, with biased
    /// (1/n) variance.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let (m, n) = x.dims2("layer_norm")?;
        if gain.shape() != vec![n] || bias.shape() != vec![n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape(),
                rhs: gain.shape(),
            });
        }
        let out = x.with_values(|xv| {
            gain.with_values(|gv| {
                bias.with_values(|bv| {
                    let mut out = vec![T::zero(); m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let (mean, rstd) = row_moments(row, eps);
                        for j in 0..n {
                            out[i * n + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
                        }
                    }
                    out
                })
            })
        });
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.ops.push(Op::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            eps,
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn conv1d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (t, cin) = x.dims2("conv1d")?;
        let ws = w.shape();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape(),
                rhs: ws,
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if b.shape() != vec![cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: ws,
                rhs: b.shape(),
            });
        }
        if t + 2 * pad < k {
            return Err(Error::EmptyInput("conv1d input shorter than kernel"));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let out = x.with_values(|xv| {
            w.with_values(|wv| {
                b.with_values(|bv| {
                    let mut out = vec![T::zero(); t_out * cout];
                    for to in 0..t_out {
                        for co in 0..cout {
                            let mut acc = bv[co];
                            for kk in 0..k {
                                let ti = to * stride + kk;
                                if ti < pad || ti - pad >= t {
                                    continue;
                                }
                                let ti = ti - pad;
                                for ci in 0..cin {
                                    acc += xv[ti * cin + ci] * wv[(co * cin + ci) * k + kk];
                                }
                            }
                            out[to * cout + co] = acc;
                        }
                    }
                    out
                })
            })
        });
        let out = Tensor::from_vec(vec![t_out, cout], out)?;
        self.ops.push(Op::Conv1d {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            stride,
            pad,
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = x.dims2("slice_cols")?;
        if start + len > n {
            return Err(Error::BadShape {
                op: "slice_cols",
                expected: "column range within bounds",
                got: vec![start, len],
            });
        }
        let out = x.with_values(|xv| {
            let mut out = vec![T::zero(); m * len];
            for i in 0..m {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&xv[i * n + start..i * n + start + len]);
            }
            out
        });
        let out = Tensor::from_vec(vec![m, len], out)?;
        self.ops.push(Op::SliceCols {
            x: x.clone(),
            start,
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols with no parts"));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            p.with_values(|pv| {
                for i in 0..m {
                    out[i * n + col..i * n + col + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
                }
            });
            col += w;
        }
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Embedding lookup: out[r,:] = table[rows[r],:].
    pub fn gather(&mut self, table: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        let (v, d) = table.dims2("gather")?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather with no rows"));
        }
        for &r in rows {
            if r >= v {
                return Err(Error::TargetOutOfRange { index: r, vocab: v });
            }
        }
        let out = table.with_values(|tv| {
            let mut out = vec![T::zero(); rows.len() * d];
            for (i, &r) in rows.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&tv[r * d..(r + 1) * d]);
            }
            out
        });
        let out = Tensor::from_vec(vec![rows.len(), d], out)?;
        self.ops.push(Op::Gather {
            table: table.clone(),
            rows: rows.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.with_values(|xv| {
            let mut acc = T::zero();
            for &v in xv {
                acc += v;
            }
            acc
        });
        let out = Tensor::scalar(s);
        self.ops.push(Op::SumAll {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Mean negative log softmax probability of the targets, one target per
    /// logit row. Stable via max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<T>,
        targets: &[usize],
    ) -> Result<Tensor<T>> {
        let (m, v) = logits.dims2("softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(Error::BadShape {
                op: "softmax_cross_entropy",
                expected: "one target per logit row",
                got: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(Error::EmptyInput("softmax_cross_entropy with no rows"));
        }
        for &t in targets {
            if t >= v {
                return Err(Error::TargetOutOfRange { index: t, vocab: v });
            }
        }
        let loss = logits.with_values(|lv| {
            let mut acc = T::zero();
            for (i, &t) in targets.iter().enumerate() {
                let row = &lv[i * v..(i + 1) * v];
                acc += row_logsumexp(row) - row[t];
            }
            acc / T::from_f64(m as f64)
        });
        let out = Tensor::scalar(loss);
        self.ops.push(Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Reverse sweep: seeds d(loss)=1, then accumulates vector-Jacobian
    /// products into every antecedent tensor's grad, frozen parameters
    /// included (freezing is the optimizer's concern). Consumes the tape.
    pub fn backward(self, loss: &Tensor<T>) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        if self.ops.is_empty() {
            return Err(Error::EmptyTape);
        }
        loss.accumulate_grad(&[T::one()]);
        for op in self.ops.iter().rev() {
            backward_op(op);
        }
        Ok(())
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

fn backward_op<T: Scalar>(op: &Op<T>) {
    match op {
        Op::Matmul { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, k) = a.dims2("matmul").unwrap();
            let n = out.shape()[1];
            let av = a.values();
            let bv = b.values();
            let mut da = vec![T::zero(); m * k];
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                let drow = &d_out[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                for p in 0..k {
                    let brow = &bv[p * n..(p + 1) * n];
                    let mut acc = T::zero();
                    for (dv, bv_) in drow.iter().zip(brow) {
                        acc += *dv * *bv_;
                    }
                    darow[p] += acc;
                }
                let arow = &av[i * k..(i + 1) * k];
                for (p, &apv) in arow.iter().enumerate() {
                    let dbrow = &mut db[p * n..(p + 1) * n];
                    for (dbv, dv) in dbrow.iter_mut().zip(drow) {
                        *dbv += apv * *dv;
                    }
                }
            }
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Transpose { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, n) = x.dims2("transpose").unwrap();
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = d_out[j * m + i];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::Add { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            a.accumulate_grad(&d_out);
            b.accumulate_grad(&d_out);
        }
        Op::AddBias { x, bias, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, n) = x.dims2("add_bias").unwrap();
            x.accumulate_grad(&d_out);
            let mut dbias = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    dbias[j] += d_out[i * n + j];
                }
            }
            bias.accumulate_grad(&dbias);
        }
        Op::Mul { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            let av = a.values();
            let bv = b.values();
            let da: Vec<T> = d_out.iter().zip(&bv).map(|(&d, &v)| d * v).collect();
            let db: Vec<T> = d_out.iter().zip(&av).map(|(&d, &v)| d * v).collect();
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Scale { x, c, out } => {
            let Some(d_out) = out.grad() else { return };
            let dx: Vec<T> = d_out.iter().map(|&d| d * *c).collect();
            x.accumulate_grad(&dx);
        }
        Op::AddConst { x, out } => {
            let Some(d_out) = out.grad() else { return };
            x.accumulate_grad(&d_out);
        }
        Op::MulConst { x, k, out } => {
            let Some(d_out) = out.grad() else { return };
            let dx: Vec<T> = d_out.iter().zip(k).map(|(&d, &v)| d * v).collect();
            x.accumulate_grad(&dx);
        }
        Op::Relu { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let xv = x.values();
            let dx: Vec<T> = d_out
                .iter()
                .zip(&xv)
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect();
            x.accumulate_grad(&dx);
        }
        Op::Softmax { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, n) = x.dims2("softmax").unwrap();
            let s = out.values();
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                let srow = &s[i * n..(i + 1) * n];
                let drow = &d_out[i * n..(i + 1) * n];
                let mut dot = T::zero();
                for (sv, dv) in srow.iter().zip(drow) {
                    dot += *sv * *dv;
                }
                for j in 0..n {
                    dx[i * n + j] = srow[j] * (drow[j] - dot);
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            eps,
            out,
        } => {
            let Some(d_out) = out.grad() else { return };
            let (m, n) = x.dims2("layer_norm").unwrap();
            let xv = x.values();
            let gv = gain.values();
            let nf = T::from_f64(n as f64);
            let mut dx = vec![T::zero(); m * n];
            let mut dgain = vec![T::zero(); n];
            let mut dbias = vec![T::zero(); n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let drow = &d_out[i * n..(i + 1) * n];
                let (mean, rstd) = row_moments(row, *eps);
                // h = d_out ∘ gain; dx = rstd·(h − mean(h) − x̂·mean(h∘x̂))
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                let mut xhat = vec![T::zero(); n];
                for j in 0..n {
                    xhat[j] = (row[j] - mean) * rstd;
                    let h = drow[j] * gv[j];
                    m1 += h;
                    m2 += h * xhat[j];
                }
                m1 = m1 / nf;
                m2 = m2 / nf;
                for j in 0..n {
                    let h = drow[j] * gv[j];
                    dx[i * n + j] = rstd * (h - m1 - xhat[j] * m2);
                    dgain[j] += drow[j] * xhat[j];
                    dbias[j] += drow[j];
                }
            }
            x.accumulate_grad(&dx);
            gain.accumulate_grad(&dgain);
            bias.accumulate_grad(&dbias);
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad,
            out,
        } => {
            let Some(d_out) = out.grad() else { return };
            let (t, cin) = x.dims2("conv1d").unwrap();
            let ws = w.shape();
            let (cout, k) = (ws[0], ws[2]);
            let t_out = out.shape()[0];
            let xv = x.values();
            let wv = w.values();
            let mut dx = vec![T::zero(); t * cin];
            let mut dw = vec![T::zero(); cout * cin * k];
            let mut db = vec![T::zero(); cout];
            for to in 0..t_out {
                for co in 0..cout {
                    let d = d_out[to * cout + co];
                    db[co] += d;
                    for kk in 0..k {
                        let ti = to * stride + kk;
                        if ti < *pad || ti - pad >= t {
                            continue;
                        }
                        let ti = ti - pad;
                        for ci in 0..cin {
                            dx[ti * cin + ci] += d * wv[(co * cin + ci) * k + kk];
                            dw[(co * cin + ci) * k + kk] += d * xv[ti * cin + ci];
                        }
                    }
                }
            }
            x.accumulate_grad(&dx);
            w.accumulate_grad(&dw);
            b.accumulate_grad(&db);
        }
        Op::SliceCols { x, start, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, n) = x.dims2("slice_cols").unwrap();
            let len = out.shape()[1];
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..len {
                    dx[i * n + start + j] = d_out[i * len + j];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::ConcatCols { parts, out } => {
            let Some(d_out) = out.grad() else { return };
            let n = out.shape()[1];
            let m = out.shape()[0];
            let mut col = 0;
            for p in parts {
                let w = p.shape()[1];
                let mut dp = vec![T::zero(); m * w];
                for i in 0..m {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&d_out[i * n + col..i * n + col + w]);
                }
                p.accumulate_grad(&dp);
                col += w;
            }
        }
        Op::Gather { table, rows, out } => {
            let Some(d_out) = out.grad() else { return };
            let (v, d) = table.dims2("gather").unwrap();
            let mut dt = vec![T::zero(); v * d];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    dt[r * d + j] += d_out[i * d + j];
                }
            }
            table.accumulate_grad(&dt);
        }
        Op::SumAll { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let dx = vec![d_out[0]; x.numel()];
            x.accumulate_grad(&dx);
        }
        Op::CrossEntropy {
            logits,
            targets,
            out,
        } => {
            let Some(d_out) = out.grad() else { return };
            let (m, v) = logits.dims2("softmax_cross_entropy").unwrap();
            let lv = logits.values();
            let scale = d_out[0] / T::from_f64(m as f64);
            let mut dl = vec![T::zero(); m * v];
            for (i, &t) in targets.iter().enumerate() {
                let row = &lv[i * v..(i + 1) * v];
                let mut mx = row[0];
                for &x in row {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - mx).exp();
                }
                for j in 0..v {
                    let p = (row[j] - mx).exp() / sum;
                    let ind = if j == t { T::one() } else { T::zero() };
                    dl[i * v + j] = (p - ind) * scale;
                }
            }
            logits.accumulate_grad(&dl);
        }
    }
}
