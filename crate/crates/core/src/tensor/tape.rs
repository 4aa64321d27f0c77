use super::{gemm, sigmoid, MatView, ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mix {
        z: Var,
        gate: Var,
        fill: Vec<T>,
    },
    SelectCols {
        z: Var,
        keep: Vec<bool>,
    },
    CrossEntropySoft {
        logits: Var,
        target: Vec<T>,
        weights: Vec<T>,
        denom: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in topological order for a reverse sweep.
///
/// A tape is single-threaded. Independent tapes can live on different
/// threads; gradients from several tapes are combined by the caller.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, len, inner) decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, true)
    }

    /// A parameter leaf. Frozen parameters are recorded without gradient.
    pub fn param(&mut self, id: ParamId, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t, Op::Param(id), trainable)
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading dimensions are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let k = sb[0];
        let n = sb[1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            MatView::row_major(0, k),
            self.value(b).data(),
            MatView::row_major(0, n),
            T::zero(),
            &mut out,
            MatView::row_major(0, n),
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                ad,
                MatView::row_major(i * m * k, k),
                bd,
                MatView::row_major(i * k * n, n),
                T::zero(),
                &mut out,
                MatView::row_major(i * m * n, n),
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{:?}", s)));
        }
        let out = transpose_last2(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn row_compatible(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sa.is_empty() || sa[sa.len() - 1] != sr[0] {
            return Err(Error::shape(op, format!("{:?} with row {:?}", sa, sr)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        }
    }

    fn row_map(&self, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = tr.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % c]))
            .collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Adds a `[n]` row vector to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_compatible("add_row", a, row)?;
        let t = self.row_map(a, row, |x, r| x + r);
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiplies every row of `a: [.., n]` elementwise by `row: [n]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_compatible("mul_row", a, row)?;
        let t = self.row_map(a, row, |x, r| x * r);
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {} of {:?}", axis, shape)));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[base + j * inner] = y[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data: y }, Op::Softmax { x: a, axis }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Normalizes each row of `x: [.., n]` and applies `gain`/`bias: [n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.row_compatible("layer_norm", x, gain)?;
        self.row_compatible("layer_norm", x, bias)?;
        let tx = self.value(x);
        let (rows, n) = (tx.rows(), tx.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let nf = T::of(n as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {} >= vocab {}", id, v)));
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{}..{}] on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * full * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `gate * z + (1 - gate) * fill`, with `gate: [n]` shared by every row
    /// of `z: [.., n]` and a constant `fill: [n]`.
    pub fn mix(&mut self, z: Var, gate: Var, fill: &[T]) -> Result<Var> {
        self.row_compatible("mix", z, gate)?;
        if fill.len() != self.shape(gate)[0] {
            return Err(Error::shape(
                "mix",
                format!("fill length {} vs gate {:?}", fill.len(), self.shape(gate)),
            ));
        }
        let (tz, tg) = (self.value(z), self.value(gate));
        let n = fill.len();
        let g = tg.data();
        let data = tz
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = i % n;
                g[j] * x + (T::one() - g[j]) * fill[j]
            })
            .collect();
        let shape = tz.shape().to_vec();
        let rg = self.rg(&[z, gate]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Mix {
                z,
                gate,
                fill: fill.to_vec(),
            },
            rg,
        ))
    }

    /// Keeps column `j` of `z` where `keep[j]`, otherwise writes `fill[j]`.
    pub fn select_cols(&mut self, z: Var, keep: &[bool], fill: &[T]) -> Result<Var> {
        let tz = self.value(z);
        let n = tz.cols();
        if keep.len() != n || fill.len() != n {
            return Err(Error::shape(
                "select_cols",
                format!("mask {} / fill {} vs width {}", keep.len(), fill.len(), n),
            ));
        }
        let data = tz
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if keep[i % n] { x } else { fill[i % n] })
            .collect();
        let shape = tz.shape().to_vec();
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor { shape, data },
            Op::SelectCols {
                z,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Soft-target cross entropy: `sum_r w_r * (-sum_v t_rv log softmax(x_r)_v) / denom`.
    pub fn cross_entropy_soft(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        weights: &[T],
        denom: T,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape() != target.shape() || weights.len() != tl.rows() {
            return Err(Error::shape(
                "cross_entropy_soft",
                format!(
                    "logits {:?}, target {:?}, weights {}",
                    tl.shape(),
                    target.shape(),
                    weights.len()
                ),
            ));
        }
        let (rows, v) = (tl.rows(), tl.cols());
        let mut probs = vec![T::zero(); rows * v];
        let mut loss = T::zero();
        for r in 0..rows {
            let x = tl.row(r);
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = x.iter().map(|&xi| (xi - max).exp()).sum::<T>().ln() + max;
            let mut row_loss = T::zero();
            for j in 0..v {
                let lp = x[j] - lse;
                probs[r * v + j] = lp.exp();
                let t = target.data()[r * v + j];
                if t != T::zero() {
                    row_loss -= t * lp;
                }
            }
            if weights[r] != T::zero() {
                loss += weights[r] * row_loss;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropySoft {
                logits,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            let shape = self.shape(loss).to_vec();
            grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data.iter_mut().zip(t.data) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }

    fn with_shape_of(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let rows = ta.len() / k.max(1);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); ta.len()];
                    gemm(
                        rows,
                        n,
                        k,
                        gd,
                        MatView::row_major(0, n),
                        tb.data(),
                        MatView::transposed(0, n),
                        T::zero(),
                        &mut da,
                        MatView::row_major(0, k),
                    );
                    self.acc(grads, *a, self.with_shape_of(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); tb.len()];
                    gemm(
                        k,
                        rows,
                        n,
                        ta.data(),
                        MatView::transposed(0, k),
                        gd,
                        MatView::row_major(0, n),
                        T::zero(),
                        &mut db,
                        MatView::row_major(0, n),
                    );
                    self.acc(grads, *b, self.with_shape_of(*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); ta.len()];
                    for s in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            gd,
                            MatView::row_major(s * m * n, n),
                            tb.data(),
                            MatView::transposed(s * k * n, n),
                            T::zero(),
                            &mut da,
                            MatView::row_major(s * m * k, k),
                        );
                    }
                    self.acc(grads, *a, self.with_shape_of(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); tb.len()];
                    for s in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            ta.data(),
                            MatView::transposed(s * m * k, k),
                            gd,
                            MatView::row_major(s * m * n, n),
                            T::zero(),
                            &mut db,
                            MatView::row_major(s * k * n, n),
                        );
                    }
                    self.acc(grads, *b, self.with_shape_of(*b, db));
                }
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, transpose_last2(g));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, self.with_shape_of(*a, gd.to_vec()));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = gd.iter().map(|&x| -x).collect();
                self.acc(grads, *b, self.with_shape_of(*b, neg));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let n = self.value(*row).len();
                    let mut dr = vec![T::zero(); n];
                    for (idx, &x) in gd.iter().enumerate() {
                        dr[idx % n] += x;
                    }
                    self.acc(grads, *row, self.with_shape_of(*row, dr));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, self.with_shape_of(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, self.with_shape_of(*b, d));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let n = tr.len();
                if self.requires_grad(*a) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(idx, &x)| x * tr.data()[idx % n])
                        .collect();
                    self.acc(grads, *a, self.with_shape_of(*a, d));
                }
                if self.requires_grad(*row) {
                    let mut dr = vec![T::zero(); n];
                    for (idx, (&x, &y)) in gd.iter().zip(ta.data()).enumerate() {
                        dr[idx % n] += x * y;
                    }
                    self.acc(grads, *row, self.with_shape_of(*row, dr));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|&x| x * *c).collect();
                self.acc(grads, *a, self.with_shape_of(*a, d));
            }
            Op::AddScalar(a) => {
                self.acc(grads, *a, g.clone());
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                self.acc(grads, *x, self.with_shape_of(*x, dx));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.acc(grads, *a, self.with_shape_of(*a, d));
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, self.with_shape_of(*a, d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *a, self.with_shape_of(*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let rows = rstd.len();
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for (idx, &gv) in gd.iter().enumerate() {
                        dg[idx % n] += gv * xhat[idx];
                    }
                    self.acc(grads, *gain, self.with_shape_of(*gain, dg));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); n];
                    for (idx, &gv) in gd.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    self.acc(grads, *bias, self.with_shape_of(*bias, db));
                }
                if self.requires_grad(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); rows * n];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let dh = gd[r * n + j] * gain_v[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gain_v[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, self.with_shape_of(*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                self.acc(grads, *table, self.with_shape_of(*table, dt));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, v) in inputs.iter().enumerate() {
                        let block = self.shape(*v)[*axis] * inner;
                        parts[p].extend_from_slice(&gd[off..off + block]);
                        off += block;
                    }
                }
                for (v, d) in inputs.iter().zip(parts) {
                    self.acc(grads, *v, self.with_shape_of(*v, d));
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, full, inner) = axis_split(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.acc(grads, *x, self.with_shape_of(*x, dx));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, self.with_shape_of(*a, vec![gd[0]; n]));
            }
            Op::Mix { z, gate, fill } => {
                let n = fill.len();
                let gv = self.value(*gate).data();
                if self.requires_grad(*z) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(idx, &x)| x * gv[idx % n])
                        .collect();
                    self.acc(grads, *z, self.with_shape_of(*z, d));
                }
                if self.requires_grad(*gate) {
                    let zv = self.value(*z).data();
                    let mut dg = vec![T::zero(); n];
                    for (idx, &x) in gd.iter().enumerate() {
                        let j = idx % n;
                        dg[j] += x * (zv[idx] - fill[j]);
                    }
                    self.acc(grads, *gate, self.with_shape_of(*gate, dg));
                }
            }
            Op::SelectCols { z, keep } => {
                let n = keep.len();
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(idx, &x)| if keep[idx % n] { x } else { T::zero() })
                    .collect();
                self.acc(grads, *z, self.with_shape_of(*z, d));
            }
            Op::CrossEntropySoft {
                logits,
                target,
                weights,
                denom,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let mut dx = vec![T::zero(); probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let row_t = &target[r * v..(r + 1) * v];
                    let mass = row_t.iter().copied().sum::<T>();
                    let scale = gd[0] * w / *denom;
                    for j in 0..v {
                        dx[r * v + j] = scale * (probs[r * v + j] * mass - row_t[j]);
                    }
                }
                self.acc(grads, *logits, self.with_shape_of(*logits, dx));
            }
        }
    }
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let nd = s.len();
    let (r, c) = (s[nd - 2], s[nd - 1]);
    let batch = t.len() / (r * c).max(1);
    let src = t.data();
    let mut out = vec![T::zero(); t.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor { shape, data: out }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every trainable parameter that was reached by the sweep.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }
}
