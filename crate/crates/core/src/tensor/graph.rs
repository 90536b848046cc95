use rand::Rng;

use super::kernels::{add_into, axpy, dot};
use super::{Gradients, ParamId, ParamSet, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reduce {
    Max,
    Mean,
}

/// Which extent survives a pooling op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keep {
    /// One output per column; rows are reduced.
    Cols,
    /// One output per row; columns are reduced.
    Rows,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Embedding {
        table: ParamId,
        ids: Vec<usize>,
    },
    Conv {
        x: Var,
        filters: Var,
        bias: Var,
        act: Activation,
        mask: Option<Vec<bool>>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
        a_rows: Option<Vec<bool>>,
        b_rows: Option<Vec<bool>>,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Tanh(Var),
    Relu(Var),
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Pool {
        x: Var,
        reduce: Reduce,
        keep: Keep,
        reduce_mask: Option<Vec<bool>>,
        keep_mask: Option<Vec<bool>>,
        /// Flat index of the winning entry per output (max pooling only).
        winners: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
///
/// Parameter tensors are referenced, never copied. Intermediate values are
/// kept until the graph is dropped so `backward` needs no recomputation.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

fn masked(mask: &Option<Vec<bool>>, i: usize) -> bool {
    mask.as_ref().is_some_and(|m| !m[i])
}

fn check_mask(op: &'static str, mask: Option<&[bool]>, len: usize) -> Result<(), TensorError> {
    match mask {
        Some(m) if m.len() != len => Err(TensorError::ShapeMismatch {
            op,
            left: vec![m.len()],
            right: vec![len],
        }),
        _ => Ok(()),
    }
}

fn expect_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    /// Gradient left on a node by the last `backward`, if it needed one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.as_ref().and_then(Tensor::grad)
    }

    /// Leaf holding a caller-supplied tensor. It receives a gradient iff the
    /// tensor has `requires_grad` set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gathers rows of an embedding table.
    pub fn embedding_lookup(&mut self, table: ParamId, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.params.get(table);
        let (rows, d) = expect_matrix("embedding_lookup", t)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, d],
                len: 0,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    /// Length-preserving 1-D convolution over the rows of `x` (`L × d_in`).
    ///
    /// `filters` is `h × d_in × d_out` with `h ∈ {1,2,3}`; the window for
    /// output row `i` covers input rows `i - (h-1)/2 ..= i + h/2`. Rows outside
    /// `[0, L)` and rows switched off in `mask` read as zero, and masked output
    /// rows are exactly zero.
    pub fn conv1d_same(
        &mut self,
        x: Var,
        filters: Var,
        bias: Var,
        act: Activation,
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let fv = self.value(filters);
        let bv = self.value(bias);
        let (l, din) = expect_matrix("conv1d_same", xv)?;
        let (h, fin, dout) = match fv.shape() {
            [h, a, b] => (*h, *a, *b),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_same",
                    left: other.to_vec(),
                    right: vec![0, din, 0],
                })
            }
        };
        if !(1..=3).contains(&h) {
            return Err(TensorError::UnsupportedWidth(h));
        }
        if fin != din || bv.len() != dout {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                left: xv.shape().to_vec(),
                right: fv.shape().to_vec(),
            });
        }
        check_mask("conv1d_same", mask, l)?;
        let mask = mask.map(<[bool]>::to_vec);
        let left = (h - 1) / 2;
        let (xd, fd, bd) = (xv.data(), fv.data(), bv.data());
        let mut out = vec![T::zero(); l * dout];
        for i in 0..l {
            if masked(&mask, i) {
                continue;
            }
            let orow = &mut out[i * dout..(i + 1) * dout];
            orow.copy_from_slice(bd);
            for k in 0..h {
                let Some(j) = (i + k).checked_sub(left).filter(|&j| j < l) else {
                    continue;
                };
                if masked(&mask, j) {
                    continue;
                }
                let xrow = &xd[j * din..(j + 1) * din];
                for (c, &xc) in xrow.iter().enumerate() {
                    if xc != T::zero() {
                        let base = (k * din + c) * dout;
                        axpy(xc, &fd[base..base + dout], orow);
                    }
                }
            }
            if act == Activation::Tanh {
                orow.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        let needs = self.needs(x) || self.needs(filters) || self.needs(bias);
        let value = Tensor::new(vec![l, dout], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                filters,
                bias,
                act,
                mask,
            },
            needs,
        ))
    }

    /// `a (m×k) · b (k×n)`. Zero entries of `a` are skipped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = expect_matrix("matmul", av)?;
        let (k2, n) = expect_matrix("matmul", bv)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let a_ik = ad[i * k + kk];
                if a_ik != T::zero() {
                    axpy(a_ik, &bd[kk * n..(kk + 1) * n], orow);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// `a (m×k) · bᵀ` for `b (n×k)`. Entries whose row of `a` or row of `b`
    /// is masked are exactly zero and cost nothing.
    pub fn matmul_nt(
        &mut self,
        a: Var,
        b: Var,
        a_rows: Option<&[bool]>,
        b_rows: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = expect_matrix("matmul_nt", av)?;
        let (n, k2) = expect_matrix("matmul_nt", bv)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        check_mask("matmul_nt", a_rows, m)?;
        check_mask("matmul_nt", b_rows, n)?;
        let (a_rows, b_rows) = (a_rows.map(<[bool]>::to_vec), b_rows.map(<[bool]>::to_vec));
        let mut out = vec![T::zero(); m * n];
        for i in (0..m).filter(|&i| !masked(&a_rows, i)) {
            let arow = av.row(i);
            for j in (0..n).filter(|&j| !masked(&b_rows, j)) {
                out[i * n + j] = dot(arow, bv.row(j));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt {
                a,
                b,
                a_rows,
                b_rows,
            },
            needs,
        ))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix (or to a
    /// length-`n` vector).
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.cols() != bv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            add_into(bv.data(), row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    /// Inverted dropout. Identity (no node recorded) unless `train` is set and
    /// `p > 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidDropout(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let scale: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(v, s)| *v * *s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, scale }, needs))
    }

    /// Concatenates along the leading axis. All parts must agree on the
    /// trailing extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            shape: vec![0],
            len: 0,
        })?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.value(*first).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Row-wise softmax. Masked entries are exactly zero; a row with no
    /// unmasked entry is rejected. A vector is treated as one row.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        check_mask("softmax_rows", mask, m * n)?;
        let mask = mask.map(<[bool]>::to_vec);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let live = |j: usize| !masked(&mask, i * n + j);
            let max = (0..n)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TensorError::EmptySlice {
                    op: "softmax_rows",
                    index: i,
                })?;
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = T::zero();
            for j in (0..n).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            orow.iter_mut().for_each(|v| *v = *v / sum);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, mask }, needs))
    }

    fn pool(
        &mut self,
        op: &'static str,
        x: Var,
        reduce: Reduce,
        keep: Keep,
        reduce_mask: Option<&[bool]>,
        keep_mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (m, n) = expect_matrix(op, xv)?;
        let (outer, inner) = match keep {
            Keep::Cols => (n, m),
            Keep::Rows => (m, n),
        };
        check_mask(op, reduce_mask, inner)?;
        check_mask(op, keep_mask, outer)?;
        let reduce_mask = reduce_mask.map(<[bool]>::to_vec);
        let keep_mask = keep_mask.map(<[bool]>::to_vec);
        let flat = |o: usize, r: usize| match keep {
            Keep::Cols => r * n + o,
            Keep::Rows => o * n + r,
        };
        let data = xv.data();
        let mut out = vec![T::zero(); outer];
        let mut winners = vec![None; outer];
        for o in (0..outer).filter(|&o| !masked(&keep_mask, o)) {
            let mut live = (0..inner).filter(|&r| !masked(&reduce_mask, r)).peekable();
            if live.peek().is_none() {
                return Err(TensorError::EmptySlice { op, index: o });
            }
            match reduce {
                Reduce::Max => {
                    let mut best: Option<usize> = None;
                    for r in live {
                        let idx = flat(o, r);
                        // Strict comparison keeps the lowest index on ties.
                        if best.is_none_or(|b| data[idx] > data[b]) {
                            best = Some(idx);
                        }
                    }
                    out[o] = data[best.expect("non-empty slice")];
                    winners[o] = best;
                }
                Reduce::Mean => {
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for r in live {
                        sum += data[flat(o, r)];
                        count += 1;
                    }
                    out[o] = sum / T::lit(count as f64);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pool {
                x,
                reduce,
                keep,
                reduce_mask,
                keep_mask,
                winners,
            },
            needs,
        ))
    }

    /// Max over rows for each column. Rows off in `rows` are ignored; columns
    /// off in `cols` yield zero.
    pub fn pool_max_cols(&mut self, x: Var, rows: Option<&[bool]>, cols: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool("pool_max_cols", x, Reduce::Max, Keep::Cols, rows, cols)
    }

    /// Mean over unmasked rows for each column.
    pub fn pool_mean_cols(&mut self, x: Var, rows: Option<&[bool]>, cols: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool("pool_mean_cols", x, Reduce::Mean, Keep::Cols, rows, cols)
    }

    /// Max over columns for each row. Columns off in `cols` are ignored; rows
    /// off in `rows` yield zero.
    pub fn pool_max_rows(&mut self, x: Var, rows: Option<&[bool]>, cols: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool("pool_max_rows", x, Reduce::Max, Keep::Rows, cols, rows)
    }

    pub fn pool_mean_rows(&mut self, x: Var, rows: Option<&[bool]>, cols: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool("pool_mean_rows", x, Reduce::Mean, Keep::Rows, cols, rows)
    }

    /// `-log softmax(logits)[label]` for a two-way classifier.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![2],
            });
        }
        if label > 1 {
            return Err(TensorError::InvalidLabel(label));
        }
        let z = lv.data();
        let max = z[0].max(z[1]);
        let lse = max + ((z[0] - max).exp() + (z[1] - max).exp()).ln();
        let probs: Vec<T> = z.iter().map(|v| (*v - lse).exp()).collect();
        let loss = lse - z[label];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar node, accumulating parameter gradients
    /// into `grads`.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients<T>) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_from(loss, vec![T::one()], grads)
    }

    /// Back-propagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_from(&mut self, out: Var, seed: Vec<T>, grads: &mut Gradients<T>) -> Result<(), TensorError> {
        let ov = self.value(out);
        if seed.len() != ov.len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                left: ov.shape().to_vec(),
                right: vec![seed.len()],
            });
        }
        let mut bufs: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[out.0] = Some(seed);
        let mut done = Vec::new();
        for idx in (0..=out.0).rev() {
            let Some(g) = bufs[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut bufs, grads);
            done.push((idx, g));
        }
        for (idx, g) in done {
            if let Some(v) = self.nodes[idx].value.as_mut() {
                v.set_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], bufs: &mut [Option<Vec<T>>], grads: &mut Gradients<T>) {
        let nodes = &self.nodes;
        let mut slot = Slots { graph: self, bufs };
        let out = self.value(Var(idx));
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::Embedding { table, ids } => {
                let d = out.cols();
                let buf = grads.get_mut(*table);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&g[i * d..(i + 1) * d], &mut buf[id * d..(id + 1) * d]);
                }
            }
            Op::Conv {
                x,
                filters,
                bias,
                act,
                mask,
            } => {
                let (xv, fv) = (self.value(*x), self.value(*filters));
                let (l, din) = (xv.rows(), xv.cols());
                let (h, dout) = (fv.shape()[0], fv.shape()[2]);
                let left = (h - 1) / 2;
                let mut dpre = vec![T::zero(); l * dout];
                for i in (0..l).filter(|&i| !masked(mask, i)) {
                    for o in 0..dout {
                        let k = i * dout + o;
                        dpre[k] = match act {
                            Activation::Identity => g[k],
                            Activation::Tanh => g[k] * (T::one() - out.data()[k] * out.data()[k]),
                        };
                    }
                }
                if let Some(db) = slot.get(*bias) {
                    for row in dpre.chunks_exact(dout) {
                        add_into(row, db);
                    }
                }
                let window = |i: usize, k: usize| {
                    (i + k)
                        .checked_sub(left)
                        .filter(|&j| j < l && !masked(mask, j))
                };
                if let Some(df) = slot.get(*filters) {
                    for i in (0..l).filter(|&i| !masked(mask, i)) {
                        let drow = &dpre[i * dout..(i + 1) * dout];
                        for k in 0..h {
                            let Some(j) = window(i, k) else { continue };
                            for (c, &xc) in xv.row(j).iter().enumerate() {
                                if xc != T::zero() {
                                    let base = (k * din + c) * dout;
                                    axpy(xc, drow, &mut df[base..base + dout]);
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = slot.get(*x) {
                    let fd = fv.data();
                    for i in (0..l).filter(|&i| !masked(mask, i)) {
                        let drow = &dpre[i * dout..(i + 1) * dout];
                        for k in 0..h {
                            let Some(j) = window(i, k) else { continue };
                            for c in 0..din {
                                let base = (k * din + c) * dout;
                                dx[j * din + c] += dot(&fd[base..base + dout], drow);
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if let Some(da) = slot.get(*a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] += dot(grow, bv.row(kk));
                        }
                    }
                }
                if let Some(db) = slot.get(*b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = av.data()[i * k + kk];
                            if a_ik != T::zero() {
                                axpy(a_ik, grow, &mut db[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::MatMulNt { a, b, a_rows, b_rows } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                let live_i: Vec<usize> = (0..m).filter(|&i| !masked(a_rows, i)).collect();
                let live_j: Vec<usize> = (0..n).filter(|&j| !masked(b_rows, j)).collect();
                if let Some(da) = slot.get(*a) {
                    for &i in &live_i {
                        let drow = &mut da[i * k..(i + 1) * k];
                        for &j in &live_j {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, bv.row(j), drow);
                            }
                        }
                    }
                }
                if let Some(db) = slot.get(*b) {
                    for &i in &live_i {
                        let arow = av.row(i);
                        for &j in &live_j {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, arow, &mut db[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(dx) = slot.get(*x) {
                    add_into(g, dx);
                }
                if let Some(db) = slot.get(*bias) {
                    for row in g.chunks_exact(db.len()) {
                        add_into(row, db);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot.get(*x) {
                    for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += *gi * (T::one() - *y * *y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot.get(*x) {
                    for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if *y > T::zero() {
                            *d += *gi;
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if let Some(dx) = slot.get(*x) {
                    for ((d, gi), s) in dx.iter_mut().zip(g).zip(scale) {
                        *d += *gi * *s;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = slot.get(p) {
                        add_into(&g[offset..offset + len], dp);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot.get(*x) {
                    add_into(g, dx);
                }
            }
            Op::Softmax { x, mask } => {
                if let Some(dx) = slot.get(*x) {
                    let n = out.cols();
                    let y = out.data();
                    for i in 0..out.rows() {
                        let r = i * n..(i + 1) * n;
                        let inner = dot(&y[r.clone()], &g[r.clone()]);
                        for k in r.filter(|&k| !masked(mask, k)) {
                            dx[k] += y[k] * (g[k] - inner);
                        }
                    }
                }
            }
            Op::Pool {
                x,
                reduce,
                keep,
                reduce_mask,
                keep_mask,
                winners,
            } => {
                let n = self.value(*x).cols();
                if let Some(dx) = slot.get(*x) {
                    match reduce {
                        Reduce::Max => {
                            for (o, w) in winners.iter().enumerate() {
                                if let Some(idx) = w {
                                    dx[*idx] += g[o];
                                }
                            }
                        }
                        Reduce::Mean => {
                            let inner = dx.len() / g.len();
                            let live: Vec<usize> = (0..inner).filter(|&r| !masked(reduce_mask, r)).collect();
                            let share = T::one() / T::lit(live.len() as f64);
                            for o in (0..g.len()).filter(|&o| !masked(keep_mask, o)) {
                                let go = g[o] * share;
                                for &r in &live {
                                    let idx = match keep {
                                        Keep::Cols => r * n + o,
                                        Keep::Rows => o * n + r,
                                    };
                                    dx[idx] += go;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(dl) = slot.get(*logits) {
                    for (c, p) in probs.iter().enumerate() {
                        let target = if c == *label { T::one() } else { T::zero() };
                        dl[c] += g[0] * (*p - target);
                    }
                }
            }
        }
    }
}

/// Lazily allocated upstream-gradient buffers, one per node.
struct Slots<'b, 'g, 'p, T> {
    graph: &'g Graph<'p, T>,
    bufs: &'b mut [Option<Vec<T>>],
}

impl<T: Scalar> Slots<'_, '_, '_, T> {
    fn get(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.graph.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.graph.value(v).len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}
