use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    SquaredEuclidean(Var, Var),
    Sum(Var),
    Scale(Var, T),
    Add(Var, Var),
    /// Sum over rows of `x[r, index[r]]`.
    PickSum {
        x: Var,
        index: Vec<usize>,
    },
    /// For each output element, the flat input index holding the maximum.
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        *tensor.grad_mut() = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn item(&self, v: Var) -> Option<T> {
        self.value(v).item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.value(*v).requires_grad());
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    /// Matrix product `[r x c] * [c x k]`. A vector counts as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("matmul", a)?;
        let (c2, k) = self.matrix_dims("matmul", b)?;
        if c != c2 || self.value(b).shape().len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), r, c, k);
        let shape = if self.value(a).shape().len() == 1 {
            vec![k]
        } else {
            vec![r, k]
        };
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[c]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("add_bias", x)?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).values();
        let xv = self.value(x);
        let out: Vec<T> = xv.values().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Elementwise `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.values().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Row-wise log-softmax using the max-subtraction form.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("log_softmax", x)?;
        if c < 2 {
            return Err(Error::contract("log_softmax needs at least two classes"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.values().chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// `sum((a - b)^2)` over all elements of two equally shaped tensors.
    pub fn squared_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "squared_euclidean",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let s = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(
            "squared_euclidean",
            Tensor::scalar(s),
            Op::SquaredEuclidean(a, b),
            &[a, b],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.values().iter().map(|&v| v * alpha).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("scale", value, Op::Scale(x, alpha), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = av.values().iter().zip(bv.values()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `sum_r x[r, index[r]]` for a `[rows x cols]` matrix.
    pub fn pick_sum(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("pick_sum", x)?;
        if index.len() != r {
            return Err(Error::Shape {
                op: "pick_sum",
                left: self.value(x).shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!(
                "pick_sum index {bad} out of range for {c} columns"
            )));
        }
        let xv = self.value(x).values();
        let s = index.iter().enumerate().map(|(row, &j)| xv[row * c + j]).sum();
        self.push(
            "pick_sum",
            Tensor::scalar(s),
            Op::PickSum {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Column-wise maximum over consecutive row segments of a matrix.
    ///
    /// `segment_lens[s]` rows form segment `s`; the output has one row per
    /// segment. Ties keep the earliest row, which does not change the value.
    pub fn segment_max(&mut self, x: Var, segment_lens: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("segment_max", x)?;
        if segment_lens.is_empty() || segment_lens.contains(&0) {
            return Err(Error::contract("segment_max needs non-empty segments"));
        }
        if segment_lens.iter().sum::<usize>() != r {
            return Err(Error::Shape {
                op: "segment_max",
                left: self.value(x).shape().to_vec(),
                right: segment_lens.to_vec(),
            });
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(segment_lens.len() * c);
        let mut argmax = Vec::with_capacity(segment_lens.len() * c);
        let mut start = 0;
        for &len in segment_lens {
            for col in 0..c {
                let mut best = start * c + col;
                for row in start + 1..start + len {
                    let idx = row * c + col;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
            start += len;
        }
        let value = Tensor::new(vec![segment_lens.len(), c], out)?;
        self.push("segment_max", value, Op::SegmentMax { x, argmax }, &[x])
    }

    /// Populates gradients of `loss` for every node that requires one.
    ///
    /// Gradients from earlier sweeps are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            *node.value.grad_mut() = None;
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        *self.nodes[loss.0].value.grad_mut() = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].value.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (input, g) in self.input_grads(idx, &upstream) {
                if self.value(input).requires_grad() {
                    self.accumulate(input, g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let slot = self.nodes[v.0].value.grad_mut();
        match slot {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e = *e + x),
            None => *slot = Some(g),
        }
    }

    fn input_grads(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (r, c) = self.matrix_dims("matmul", *a).expect("checked in forward");
                let (_, k) = self.matrix_dims("matmul", *b).expect("checked in forward");
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let mut out = Vec::new();
                if self.value(*a).requires_grad() {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let mut s = T::zero();
                            for l in 0..k {
                                s = s + dy[i * k + l] * bv[j * k + l];
                            }
                            da[i * c + j] = s;
                        }
                    }
                    out.push((*a, da));
                }
                if self.value(*b).requires_grad() {
                    // dB = A^T * dC
                    let mut db = vec![T::zero(); c * k];
                    for i in 0..r {
                        for j in 0..c {
                            let aij = av[i * c + j];
                            if aij == T::zero() {
                                continue;
                            }
                            let row = &mut db[j * k..(j + 1) * k];
                            for (d, &g) in row.iter_mut().zip(&dy[i * k..(i + 1) * k]) {
                                *d = *d + aij * g;
                            }
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                let mut db = vec![T::zero(); c];
                for (i, &g) in dy.iter().enumerate() {
                    db[i % c] = db[i % c] + g;
                }
                vec![(*x, dy.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).values();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let (_, c) = self.matrix_dims("log_softmax", *x).expect("checked in forward");
                let y = node.value.values();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(dy.chunks(c)) {
                    let gsum: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &g)| g - yv.exp() * gsum));
                }
                vec![(*x, dx)]
            }
            Op::SquaredEuclidean(a, b) => {
                let g = dy[0];
                let two = T::one() + T::one();
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| two * (x - y) * g).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; self.value(*x).len()])],
            Op::Scale(x, alpha) => vec![(*x, dy.iter().map(|&g| g * *alpha).collect())],
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::PickSum { x, index } => {
                let (_, c) = self.matrix_dims("pick_sum", *x).expect("checked in forward");
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (row, &j) in index.iter().enumerate() {
                    dx[row * c + j] = dy[0];
                }
                vec![(*x, dx)]
            }
            Op::SegmentMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] = dx[src] + g;
                }
                vec![(*x, dx)]
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], r: usize, c: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * k];
    for i in 0..r {
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..c {
            let aij = a[i * c + j];
            if aij == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *o = *o + aij * bv;
            }
        }
    }
    out
}
