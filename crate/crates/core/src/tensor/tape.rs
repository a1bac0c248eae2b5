//! Wengert-list tape. Every kernel evaluates eagerly, appends a node and keeps
//! whatever it needs for the reverse sweep. A tape is consumed by `backward`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var, cols: usize },
    Scale { a: Var, factor: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, normed: Vec<T>, inv_std: Vec<T> },
    Gelu { a: Var },
    Tanh { a: Var },
    SoftmaxRows { a: Var, cols: usize },
    Embedding { table: Var, ids: Vec<usize>, cols: usize },
    MaskedMean { x: Var, mask: Vec<T>, count: T, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { a: Var, start: usize, width: usize, src_cols: usize },
    SelectRow { a: Var, row: usize, cols: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Sum { a: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a single forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Add the gradient of `var` (if any reached it) into `tensor`'s accumulator.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (0, 0),
    }
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64_lossy(gelu_f64(x.as_f64()))
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Leaf, needs_grad))
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Copy `tensor` onto the tape, honouring its `requires_grad` flag.
    pub fn tensor(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn to_tensor(&self, var: Var) -> Tensor<T> {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.nodes[var.0].shape;
        match shape.len() {
            1 | 2 => Ok(as_2d(shape)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, needs))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    out[i * n + j] = arow
                        .iter()
                        .zip(brow)
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                }
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMulBt { a, b, m, k, n }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::Add { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::Mul { a, b }, needs))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.nodes[bias.0].value.len() != n {
            return Err(self.mismatch("add_row", a, bias));
        }
        let bv = &self.nodes[bias.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a, bias]);
        Ok(self.push(out, shape, Op::AddRow { a, bias, cols: n }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a]);
        self.push(out, shape, Op::Scale { a, factor }, needs)
    }

    /// Row-wise layer normalisation with affine parameters of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.nodes[gamma.0].value.len() != n {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.nodes[beta.0].value.len() != n {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let nf = T::from_usize(n).expect("usize to float");
        let mut normed = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        {
            let xv = &self.nodes[x.0].value;
            let g = &self.nodes[gamma.0].value;
            let b = &self.nodes[beta.0].value;
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..n {
                    let z = (row[j] - mean) * inv;
                    normed[i * n + j] = z;
                    out[i * n + j] = z * g[j] + b[j];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols: n,
                normed,
                inv_std,
            },
            needs,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a]);
        self.push(out, shape, Op::Gelu { a }, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a]);
        self.push(out, shape, Op::Tanh { a }, needs)
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax")?;
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.nodes[a.0].value;
            for i in 0..m {
                softmax_into(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(&[a]);
        Ok(self.push(out, shape, Op::SoftmaxRows { a, cols: n }, needs))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), cols],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                cols,
            },
            needs,
        ))
    }

    /// Mean of the rows whose mask entry is 1; returns a `[1,n]` row.
    pub fn masked_mean(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let (m, n) = self.dims2(x, "masked_mean")?;
        if mask.len() != m {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().copied().sum::<T>();
        if count <= T::zero() {
            return Err(Error::invalid("masked_mean with an all-zero mask"));
        }
        let mut out = vec![T::zero(); n];
        {
            let xv = &self.nodes[x.0].value;
            for (i, &w) in mask.iter().enumerate() {
                if w != T::zero() {
                    for (o, &v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                        *o = *o + w * v;
                    }
                }
            }
        }
        for o in out.iter_mut() {
            *o = *o / count;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            vec![1, n],
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
                cols: n,
            },
            needs,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (rows, _) = self.dims2(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(self.mismatch("concat", first, p));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            out,
            vec![rows, total],
            Op::ConcatCols {
                parts: widths,
                rows,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + width > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![start, width],
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            out.extend_from_slice(&av[i * cols + start..i * cols + start + width]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            out,
            vec![rows, width],
            Op::SliceCols {
                a,
                start,
                width,
                src_cols: cols,
            },
            needs,
        ))
    }

    /// Row `row` of a matrix as a `[1,n]` row.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "select_row")?;
        if row >= rows {
            return Err(Error::ShapeMismatch {
                op: "select_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![row],
            });
        }
        let out = self.nodes[a.0].value[row * cols..(row + 1) * cols].to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(out, vec![1, cols], Op::SelectRow { a, row, cols }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let av = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = av[i * cols + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(out, vec![cols, rows], Op::Transpose { a, rows, cols }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[a.0].value.clone();
        let needs = self.needs(&[a]);
        Ok(self.push(out, shape, Op::Reshape { a }, needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().copied().sum::<T>();
        let needs = self.needs(&[a]);
        self.push(vec![total], vec![1], Op::Sum { a }, needs)
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let n = lv.len();
        if target >= n {
            return Err(Error::invalid(format!(
                "target {target} out of range for {n} classes"
            )));
        }
        if let Some(pos) = lv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {pos} is not finite")));
        }
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let log_total = lv.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = log_total - (lv[target] - max);
        let probs = lv.iter().map(|&v| (v - max - log_total).exp()).collect();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::invalid("loss variable does not belong to this tape"));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(
            grads: &mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
            f: impl FnOnce(&mut [T]),
        ) {
            let node = &nodes[v.0];
            if !node.needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
            f(g);
        }

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    // dA = G B^T
                    acc(&mut grads, &nodes, a, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let s = grow
                                    .iter()
                                    .zip(brow)
                                    .fold(T::zero(), |s, (&x, &y)| s + x * y);
                                ga[r * k + p] = ga[r * k + p] + s;
                            }
                        }
                    });
                    // dB = A^T G
                    acc(&mut grads, &nodes, b, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                let row = &mut gb[p * n..(p + 1) * n];
                                for (o, &y) in row.iter_mut().zip(grow) {
                                    *o = *o + x * y;
                                }
                            }
                        }
                    });
                }
                &Op::MatMulBt { a, b, m, k, n } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    // out = A B^T; dA = G B; dB = G^T A
                    acc(&mut grads, &nodes, a, |ga| {
                        for r in 0..m {
                            let row = &mut ga[r * k..(r + 1) * k];
                            for j in 0..n {
                                let x = g[r * n + j];
                                for (o, &y) in row.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                    *o = *o + x * y;
                                }
                            }
                        }
                    });
                    acc(&mut grads, &nodes, b, |gb| {
                        for r in 0..m {
                            let arow = &av[r * k..(r + 1) * k];
                            for j in 0..n {
                                let x = g[r * n + j];
                                for (o, &y) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                    *o = *o + x * y;
                                }
                            }
                        }
                    });
                }
                &Op::Add { a, b } => {
                    for v in [a, b] {
                        acc(&mut grads, &nodes, v, |ga| {
                            for (o, &d) in ga.iter_mut().zip(&g) {
                                *o = *o + d;
                            }
                        });
                    }
                }
                &Op::Mul { a, b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(&mut grads, &nodes, a, |ga| {
                        for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o = *o + d * y;
                        }
                    });
                    acc(&mut grads, &nodes, b, |gb| {
                        for ((o, &d), &x) in gb.iter_mut().zip(&g).zip(av) {
                            *o = *o + d * x;
                        }
                    });
                }
                &Op::AddRow { a, bias, cols } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for (o, &d) in ga.iter_mut().zip(&g) {
                            *o = *o + d;
                        }
                    });
                    acc(&mut grads, &nodes, bias, |gb| {
                        for (idx, &d) in g.iter().enumerate() {
                            gb[idx % cols] = gb[idx % cols] + d;
                        }
                    });
                }
                &Op::Scale { a, factor } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for (o, &d) in ga.iter_mut().zip(&g) {
                            *o = *o + d * factor;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cols,
                    normed,
                    inv_std,
                } => {
                    let (x, gamma, beta, n) = (*x, *gamma, *beta, *cols);
                    let gv = &nodes[gamma.0].value;
                    let rows = g.len() / n;
                    let nf = T::from_usize(n).expect("usize to float");
                    acc(&mut grads, &nodes, x, |gx| {
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            let zr = &normed[r * n..(r + 1) * n];
                            // dz = g * gamma
                            let mut sum_dz = T::zero();
                            let mut sum_dz_z = T::zero();
                            for j in 0..n {
                                let dz = gr[j] * gv[j];
                                sum_dz = sum_dz + dz;
                                sum_dz_z = sum_dz_z + dz * zr[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..n {
                                let dz = gr[j] * gv[j];
                                let dx = inv * (dz - sum_dz / nf - zr[j] * sum_dz_z / nf);
                                gx[r * n + j] = gx[r * n + j] + dx;
                            }
                        }
                    });
                    acc(&mut grads, &nodes, gamma, |gg| {
                        for (idx, &d) in g.iter().enumerate() {
                            gg[idx % n] = gg[idx % n] + d * normed[idx];
                        }
                    });
                    acc(&mut grads, &nodes, beta, |gb| {
                        for (idx, &d) in g.iter().enumerate() {
                            gb[idx % n] = gb[idx % n] + d;
                        }
                    });
                }
                &Op::Gelu { a } => {
                    let av = &nodes[a.0].value;
                    acc(&mut grads, &nodes, a, |ga| {
                        for ((o, &d), &x) in ga.iter_mut().zip(&g).zip(av) {
                            *o = *o + d * T::from_f64_lossy(gelu_grad_f64(x.as_f64()));
                        }
                    });
                }
                &Op::Tanh { a } => {
                    let out = &node.value;
                    acc(&mut grads, &nodes, a, |ga| {
                        for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(out) {
                            *o = *o + d * (T::one() - y * y);
                        }
                    });
                }
                &Op::SoftmaxRows { a, cols } => {
                    let out = &node.value;
                    acc(&mut grads, &nodes, a, |ga| {
                        for r in 0..g.len() / cols {
                            let yr = &out[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &d)| s + y * d);
                            for j in 0..cols {
                                let idx = r * cols + j;
                                ga[idx] = ga[idx] + yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids, cols } => {
                    let cols = *cols;
                    acc(&mut grads, &nodes, *table, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g[r * cols..(r + 1) * cols];
                            for (o, &d) in gt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                                *o = *o + d;
                            }
                        }
                    });
                }
                Op::MaskedMean { x, mask, count, cols } => {
                    let (count, cols) = (*count, *cols);
                    acc(&mut grads, &nodes, *x, |gx| {
                        for (r, &w) in mask.iter().enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let scale = w / count;
                            for (o, &d) in gx[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                                *o = *o + d * scale;
                            }
                        }
                    });
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|(_, c)| c).sum();
                    let mut offset = 0;
                    for &(p, c) in parts {
                        acc(&mut grads, &nodes, p, |gp| {
                            for r in 0..*rows {
                                let src = &g[r * total + offset..r * total + offset + c];
                                for (o, &d) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                    *o = *o + d;
                                }
                            }
                        });
                        offset += c;
                    }
                }
                &Op::SliceCols {
                    a,
                    start,
                    width,
                    src_cols,
                } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for r in 0..g.len() / width {
                            let dst = &mut ga[r * src_cols + start..r * src_cols + start + width];
                            for (o, &d) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                                *o = *o + d;
                            }
                        }
                    });
                }
                &Op::SelectRow { a, row, cols } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for (o, &d) in ga[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                            *o = *o + d;
                        }
                    });
                }
                &Op::Transpose { a, rows, cols } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[r * cols + c] = ga[r * cols + c] + g[c * rows + r];
                            }
                        }
                    });
                }
                &Op::Reshape { a } => {
                    acc(&mut grads, &nodes, a, |ga| {
                        for (o, &d) in ga.iter_mut().zip(&g) {
                            *o = *o + d;
                        }
                    });
                }
                &Op::Sum { a } => {
                    let d = g[0];
                    acc(&mut grads, &nodes, a, |ga| {
                        for o in ga.iter_mut() {
                            *o = *o + d;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let d = g[0];
                    let target = *target;
                    acc(&mut grads, &nodes, *logits, |gl| {
                        for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == target { T::one() } else { T::zero() };
                            *o = *o + d * (p - onehot);
                        }
                    });
                }
            }
        }
        // Only leaf gradients are kept; intermediates were taken above.
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y), &[0.25; 4]);
    }

    #[test]
    fn gelu_at_origin() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.gelu(x);
        assert_eq!(tape.value(y), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 6);
        let b = random(&mut rng, 12);
        let mut oracle = [0.0f64; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    oracle[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(vec![2, 3], a).unwrap();
        let vb = tape.constant(vec![3, 4], b).unwrap();
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        for (x, y) in tape.value(c).iter().zip(oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        match tape.matmul(a, b).unwrap_err() {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![4], vec![1.5; 4]).unwrap();
        let l = tape.cross_entropy(x, 2).unwrap();
        assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-12);

        let y = tape.constant(vec![3], vec![20.0, 0.0, 0.0]).unwrap();
        let l = tape.cross_entropy(y, 0).unwrap();
        let expected = (1.0 + 2.0 * (-20f64).exp()).ln();
        assert!((tape.value(l)[0] - expected).abs() < 1e-15);
        assert!(tape.value(l)[0] < 5e-9);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(tape.cross_entropy(x, 3).is_err());
        let y = tape.constant(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.cross_entropy(y, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_sum_and_dot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn masked_mean_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(tape.masked_mean(x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn embedding_rejects_unknown_id() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(tape.embedding(t, &[0, 3]).is_err());
    }

    /// Central-difference check of one kernel: `build` maps the input leaf to a
    /// scalar, analytic gradient must match within relative error 1e-4.
    fn check_kernel(
        shape: Vec<usize>,
        seed: u64,
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
    ) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, n);
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.constant(shape.clone(), x.to_vec()).unwrap();
            let out = build(&mut tape, v);
            tape.value(out)[0]
        };
        let mut tape = Tape::new();
        let v = tape.variable(shape.clone(), x0.clone()).unwrap();
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..n {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(rel < 1e-4, "element {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    /// Contract a tensor against fixed weights so every element matters.
    fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
        let n = tape.value(v).len();
        let shape = tape.shape(v).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wv = tape.constant(shape, w).unwrap();
        let p = tape.mul(v, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        check_kernel(vec![3, 4], 1, |t, x| {
            let b = t.constant(vec![4, 2], vec![0.5, -1.0, 0.2, 0.3, 1.1, -0.7, 0.0, 0.4]).unwrap();
            let y = t.matmul(x, b).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![4, 2], 2, |t, x| {
            let a = t.constant(vec![3, 4], (0..12).map(|i| i as f64 / 10.0 - 0.5).collect()).unwrap();
            let y = t.matmul(a, x).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![3, 4], 3, |t, x| {
            let b = t.constant(vec![2, 4], vec![0.5, -1.0, 0.2, 0.3, 1.1, -0.7, 0.0, 0.4]).unwrap();
            let y = t.matmul_bt(x, b).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![2, 4], 4, |t, x| {
            let a = t.constant(vec![3, 4], (0..12).map(|i| i as f64 / 10.0 - 0.5).collect()).unwrap();
            let y = t.matmul_bt(a, x).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![3, 5], 5, |t, x| {
            let g = t.constant(vec![5], vec![1.0, 0.5, -0.3, 2.0, 0.7]).unwrap();
            let b = t.constant(vec![5], vec![0.1, 0.0, -0.2, 0.3, 0.0]).unwrap();
            let y = t.layer_norm(x, g, b, 1e-12).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![5], 6, |t, g| {
            let x = t.constant(vec![3, 5], (0..15).map(|i| ((i * 5 % 7) as f64) / 3.0).collect()).unwrap();
            let b = t.constant(vec![5], vec![0.0; 5]).unwrap();
            let y = t.layer_norm(x, g, b, 1e-12).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![6], 7, |t, x| {
            let y = t.gelu(x);
            weighted_sum(t, y)
        });
        check_kernel(vec![6], 8, |t, x| {
            let y = t.tanh(x);
            weighted_sum(t, y)
        });
        check_kernel(vec![2, 4], 9, |t, x| {
            let y = t.softmax_rows(x).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![5, 3], 10, |t, x| {
            let y = t.embedding(x, &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![4, 3], 11, |t, x| {
            let y = t.masked_mean(x, &[1.0, 1.0, 0.0, 1.0]).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![3, 2], 12, |t, x| {
            let other = t.constant(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
            let y = t.concat_cols(&[other, x, x]).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![3, 5], 13, |t, x| {
            let y = t.slice_cols(x, 1, 3).unwrap();
            weighted_sum(t, y)
        });
        check_kernel(vec![3, 4], 14, |t, x| {
            let y = t.select_row(x, 1).unwrap();
            let z = t.transpose(y).unwrap();
            weighted_sum(t, z)
        });
        check_kernel(vec![2, 3], 15, |t, x| {
            let bias = t.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
            let y = t.add_row(x, bias).unwrap();
            let z = t.scale(y, 0.7);
            let w = t.mul(z, z).unwrap();
            let r = t.reshape(w, vec![6]).unwrap();
            weighted_sum(t, r)
        });
        check_kernel(vec![3], 16, |t, bias| {
            let x = t.constant(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
            let y = t.add_row(x, bias).unwrap();
            let z = t.tanh(y);
            weighted_sum(t, z)
        });
        check_kernel(vec![7], 17, |t, x| t.cross_entropy(x, 3).unwrap());
    }
}
