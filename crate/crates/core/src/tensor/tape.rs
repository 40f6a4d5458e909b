use super::fault::{self, Fault};
use super::kernels::{self, ConvGeom, Mat, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    /// Node value holds the normalized plane; `inv_std` is 1/σ per plane.
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
        plane: usize,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddScaled {
        a: Var,
        b: Var,
        factor: f64,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    GroupMean {
        input: Var,
        groups: Vec<Vec<usize>>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// so every input precedes its consumers and a reverse sweep is a valid
/// topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(nodes: &mut [Node], v: Var, g: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(buf) => add_into(buf, g),
        None => node.grad = Some(g.to_vec()),
    }
}

fn accumulate_owned(nodes: &mut [Node], v: Var, g: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(buf) => add_into(buf, &g),
        None => node.grad = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies `t` onto the tape. Gradients are only propagated into leaves
    /// created with `requires_grad = true`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Moves `t` onto the tape as a constant without copying.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.node(v).value.as_slice() {
            [x] => Ok(*x),
            other => Err(Error::usage(format!(
                "expected a scalar, node holds {} values",
                other.len()
            ))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Adds the gradient of `v` (if any was produced) into `t.grad`.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    // ---- operations -------------------------------------------------------

    /// Zero-padded 2-D cross-correlation of `[B,C,H,W]` with `[O,C,kh,kw]` plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (xs, ks) else {
            return Err(Error::dim(format!(
                "conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"
            )));
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel has {kc} input channels but input has {c}"
            )));
        }
        if bs != [o] {
            return Err(Error::dim(format!("conv2d bias shape {bs:?}, expected [{o}]")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            h,
            w,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let value = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), &geom);
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            vec![b, o, geom.oh, geom.ow],
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Per-(sample, channel) normalization over the spatial plane, population variance, no affine.
    pub fn instance_norm2d(&mut self, input: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let &[_, _, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!("instance_norm2d expects [B,C,H,W], got {shape:?}")));
        };
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("instance_norm2d needs a non-empty plane"));
        }
        let (value, inv_std) = kernels::instance_norm_forward(self.value(input), plane, eps);
        let rg = self.needs(&[input]);
        Ok(self.push(shape, value, rg, Op::InstanceNorm { input, inv_std, plane }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let value = n.value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, rg, Op::Relu { input })
    }

    /// Mean over `k×k` windows moved by `stride`; windows must tile the plane exactly.
    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!("avg_pool2d expects [B,C,H,W], got {shape:?}")));
        };
        if k == 0 || stride == 0 {
            return Err(Error::dim("avg_pool2d window and stride must be at least 1"));
        }
        if h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
            return Err(Error::dim(format!(
                "avg_pool2d window {k} stride {stride} does not tile a {h}x{w} plane"
            )));
        }
        let geom = PoolGeom {
            planes: b * c,
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        };
        let value = kernels::avg_pool_forward(self.value(input), &geom);
        let rg = self.needs(&[input]);
        Ok(self.push(vec![b, c, geom.oh, geom.ow], value, rg, Op::AvgPool { input, geom }))
    }

    /// `input[B,D] · weight[D,K] + bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[b, d], &[wd, k]) = (xs, ws) else {
            return Err(Error::dim(format!(
                "linear expects 2-D input and weight, got {xs:?} and {ws:?}"
            )));
        };
        if wd != d || bs != [k] {
            return Err(Error::dim(format!(
                "linear shapes do not chain: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let mut value = Vec::with_capacity(b * k);
        for _ in 0..b {
            value.extend_from_slice(self.value(bias));
        }
        kernels::gemm(
            b,
            d,
            k,
            Mat::rows(self.value(input), d),
            Mat::rows(self.value(weight), k),
            1.0,
            &mut value,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(vec![b, k], value, rg, Op::Linear { input, weight, bias }))
    }

    /// `a[N,C] · b[K,C]ᵀ`, giving `[N,K]` inner products between rows.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let (&[n, c], &[k, bc]) = (as_, bs) else {
            return Err(Error::dim(format!("matmul_bt expects 2-D operands, got {as_:?} and {bs:?}")));
        };
        if c != bc {
            return Err(Error::dim(format!("matmul_bt width mismatch: {c} vs {bc}")));
        }
        let mut value = vec![0.0; n * k];
        kernels::gemm(
            n,
            c,
            k,
            Mat::rows(self.value(a), c),
            Mat::t(self.value(b), c),
            0.0,
            &mut value,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![n, k], value, rg, Op::MatMulBt { a, b }))
    }

    /// Mean over rows of `−log softmax(logits_i)[label_i]`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let &[b, k] = shape else {
            return Err(Error::dim(format!("cross entropy expects [B,K] logits, got {shape:?}")));
        };
        if labels.len() != b {
            return Err(Error::input(format!("{} labels for {b} logit rows", labels.len())));
        }
        if b == 0 {
            return Err(Error::input("cross entropy over an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        for (row, &y) in z.chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let probs = kernels::softmax_rows(z, k);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / b as f64],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.to_vec())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// `a + factor·b`, evaluated elementwise in exactly that form.
    pub fn add_scaled(&mut self, a: Var, b: Var, factor: f64) -> Result<Var> {
        self.binary(a, b, "add_scaled", |x, y| x + factor * y, Op::AddScaled { a, b, factor })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let n = self.node(input);
        let value = n.value.iter().map(|v| v * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, rg, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let value = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![value], rg, Op::Sum { input })
    }

    /// Squared L2 norm of all entries.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let value = n.value.iter().map(|v| v * v).sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![value], rg, Op::SumSquares { input })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(input);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, value, rg, Op::Reshape { input }))
    }

    /// Collapses all trailing axes: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let Some(&b) = shape.first() else {
            return Err(Error::dim("cannot flatten a scalar"));
        };
        let rest = shape[1..].iter().product();
        self.reshape(input, vec![b, rest])
    }

    /// Row means of a `[B,D]` matrix for each group of row indices, giving `[G,D]`.
    /// Rows are summed in the order they are listed.
    pub fn group_mean(&mut self, input: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(input);
        let &[b, d] = shape else {
            return Err(Error::dim(format!("group_mean expects [B,D], got {shape:?}")));
        };
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::input(format!("group {g} has no rows")));
            }
            if let Some(&r) = rows.iter().find(|&&r| r >= b) {
                return Err(Error::input(format!("row {r} out of range for {b} rows")));
            }
        }
        let value = kernels::group_mean(self.value(input), d, &groups);
        let rg = self.needs(&[input]);
        Ok(self.push(vec![groups.len(), d], value, rg, Op::GroupMean { input, groups }))
    }

    /// Selects leading-axis rows (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let t = self.to_tensor(input).gather_rows(rows)?;
        let rg = self.needs(&[input]);
        let shape = t.shape().to_vec();
        Ok(self.push(
            shape,
            t.into_data(),
            rg,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Backpropagates from a scalar root. Gradients from earlier calls are
    /// discarded first; fan-out contributions are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::usage("backward root is not on this tape"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backward_node(before, node, g);
        }
        Ok(())
    }
}

fn backward_node(nodes: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let mut grads = kernels::conv2d_backward(
                &nodes[input.0].value,
                &nodes[kernel.0].value,
                g,
                geom,
                nodes[input.0].requires_grad,
                nodes[kernel.0].requires_grad,
                nodes[bias.0].requires_grad,
            );
            if fault::active(Fault::Conv2dSignFlip) {
                if let Some(dx) = grads.input.as_mut() {
                    dx.iter_mut().for_each(|v| *v = -*v);
                }
            }
            if let Some(dx) = grads.input {
                accumulate_owned(nodes, *input, dx);
            }
            if let Some(dk) = grads.kernel {
                accumulate_owned(nodes, *kernel, dk);
            }
            if let Some(db) = grads.bias {
                accumulate_owned(nodes, *bias, db);
            }
        }
        Op::InstanceNorm { input, inv_std, plane } => {
            let dx = kernels::instance_norm_backward(&node.value, inv_std, g, *plane);
            accumulate_owned(nodes, *input, dx);
        }
        Op::Relu { input } => {
            let dx = node
                .value
                .iter()
                .zip(g)
                .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
                .collect();
            accumulate_owned(nodes, *input, dx);
        }
        Op::AvgPool { input, geom } => {
            accumulate_owned(nodes, *input, kernels::avg_pool_backward(g, geom));
        }
        Op::Linear { input, weight, bias } => {
            let (b, k) = (node.shape[0], node.shape[1]);
            let d = nodes[weight.0].shape[0];
            if nodes[input.0].requires_grad {
                let mut dx = vec![0.0; b * d];
                kernels::gemm(b, k, d, Mat::rows(g, k), Mat::t(&nodes[weight.0].value, k), 0.0, &mut dx);
                accumulate_owned(nodes, *input, dx);
            }
            if nodes[weight.0].requires_grad {
                let mut dw = vec![0.0; d * k];
                kernels::gemm(d, b, k, Mat::t(&nodes[input.0].value, d), Mat::rows(g, k), 0.0, &mut dw);
                accumulate_owned(nodes, *weight, dw);
            }
            if nodes[bias.0].requires_grad {
                let mut db = vec![0.0; k];
                for row in g.chunks(k) {
                    add_into(&mut db, row);
                }
                accumulate_owned(nodes, *bias, db);
            }
        }
        Op::MatMulBt { a, b } => {
            let (n, k) = (node.shape[0], node.shape[1]);
            let c = nodes[a.0].shape[1];
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; n * c];
                kernels::gemm(n, k, c, Mat::rows(g, k), Mat::rows(&nodes[b.0].value, c), 0.0, &mut da);
                accumulate_owned(nodes, *a, da);
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; k * c];
                kernels::gemm(k, n, c, Mat::t(g, k), Mat::rows(&nodes[a.0].value, c), 0.0, &mut db);
                accumulate_owned(nodes, *b, db);
            }
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let k = nodes[logits.0].shape[1];
            let scale = g[0] / labels.len() as f64;
            let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                dz[i * k + y] -= scale;
            }
            accumulate_owned(nodes, *logits, dz);
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::Sub { a, b } => {
            accumulate(nodes, *a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate_owned(nodes, *b, neg);
        }
        Op::Mul { a, b } => {
            if nodes[a.0].requires_grad {
                let da = g.iter().zip(&nodes[b.0].value).map(|(d, y)| d * y).collect();
                accumulate_owned(nodes, *a, da);
            }
            if nodes[b.0].requires_grad {
                let db = g.iter().zip(&nodes[a.0].value).map(|(d, x)| d * x).collect();
                accumulate_owned(nodes, *b, db);
            }
        }
        Op::AddScaled { a, b, factor } => {
            accumulate(nodes, *a, g);
            let db = g.iter().map(|v| v * factor).collect();
            accumulate_owned(nodes, *b, db);
        }
        Op::Scale { input, factor } => {
            let dx = g.iter().map(|v| v * factor).collect();
            accumulate_owned(nodes, *input, dx);
        }
        Op::Sum { input } => {
            let dx = vec![g[0]; nodes[input.0].value.len()];
            accumulate_owned(nodes, *input, dx);
        }
        Op::SumSquares { input } => {
            let dx = nodes[input.0].value.iter().map(|v| 2.0 * v * g[0]).collect();
            accumulate_owned(nodes, *input, dx);
        }
        Op::Reshape { input } => accumulate(nodes, *input, g),
        Op::GroupMean { input, groups } => {
            let d = node.shape[1];
            let mut dx = vec![0.0; nodes[input.0].value.len()];
            for (gi, rows) in groups.iter().enumerate() {
                let share = 1.0 / rows.len() as f64;
                let src = &g[gi * d..(gi + 1) * d];
                for &r in rows {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, v)| *o += v * share);
                }
            }
            accumulate_owned(nodes, *input, dx);
        }
        Op::GatherRows { input, rows } => {
            let w: usize = node.shape[1..].iter().product();
            let mut dx = vec![0.0; nodes[input.0].value.len()];
            for (i, &r) in rows.iter().enumerate() {
                add_into(&mut dx[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
            }
            accumulate_owned(nodes, *input, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), false);
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[1.]), false);
        let b = tape.leaf(&t(&[1], &[0.]), false);
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_bias_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3, 4, 4], &[0.7; 96]), false);
        let k = tape.leaf(&Tensor::zeros(vec![2, 3, 3, 3]), false);
        let b = tape.leaf(&t(&[2], &[5., 5.]), false);
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 4, 4]);
        assert!(tape.value(y).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_output_size_and_channel_check() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 7, 5]), false);
        let k = tape.leaf(&Tensor::zeros(vec![3, 2, 3, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![3]), false);
        let y = tape.conv2d(x, k, b, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3, 2]);

        let bad = tape.leaf(&Tensor::zeros(vec![3, 1, 3, 3]), false);
        assert!(matches!(tape.conv2d(x, bad, b, 1, 0), Err(Error::Dimension(_))));
        assert!(matches!(tape.conv2d(x, k, b, 0, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn instance_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 1, 2, 2], 3.0), false);
        let y = tape.instance_norm2d(x, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));

        let x = tape.leaf(&t(&[1, 1, 1, 2], &[-1., 1.]), false);
        let y = tape.instance_norm2d(x, 0.0).unwrap();
        assert_eq!(tape.value(y), &[-1., 1.]);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[-1., 2.]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0., 2.]);

        let x = tape.leaf(&t(&[3], &[-1., -0.5, -3.]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y), &[0., 0., 0.]);
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 0.]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), false);
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[2.5]);

        let x = tape.leaf(&Tensor::full(vec![2, 3, 4, 4], 1.5), false);
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 2]);
        assert!(tape.value(y).iter().all(|&v| v == 1.5));

        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 5, 4]), false);
        assert!(matches!(tape.avg_pool2d(x, 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let input = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let x = tape.leaf(&input, false);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = tape.leaf(&eye, false);
        let b = tape.leaf(&Tensor::zeros(vec![3]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), input.data());

        let w0 = tape.leaf(&Tensor::zeros(vec![3, 2]), false);
        let b0 = tape.leaf(&t(&[2], &[7., -1.]), false);
        let y = tape.linear(x, w0, b0).unwrap();
        assert_eq!(tape.value(y), &[7., -1., 7., -1.]);

        let wbad = tape.leaf(&Tensor::zeros(vec![4, 2]), false);
        assert!(matches!(tape.linear(x, wbad, b0), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::full(vec![3, 10], 0.25), false);
        let l = tape.softmax_cross_entropy_mean(z, &[0, 4, 9]).unwrap();
        assert!((tape.scalar(l).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_with_margin() {
        let loss_at = |margin: f64| {
            let mut tape = Tape::new();
            let z = tape.leaf(&t(&[1, 3], &[margin, 0., 0.]), false);
            let l = tape.softmax_cross_entropy_mean(z, &[0]).unwrap();
            tape.scalar(l).unwrap()
        };
        let (l5, l10) = (loss_at(5.0), loss_at(10.0));
        assert!(l10 < l5 && l5 < 0.02 && l10 < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(vec![1, 3]), false);
        assert!(matches!(
            tape.softmax_cross_entropy_mean(z, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backward_identity_and_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0), true);
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1., 2., 3.]), true);
        let b = tape.leaf(&t(&[3], &[4., 5., 6.]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4., 5., 6.]);
        assert_eq!(tape.grad(b).unwrap(), &[1., 2., 3.]);
        assert_eq!(tape.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_accumulates_fan_out() {
        // y = sum(x*x) + sum(3x) -> dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.5, -2.0]), true);
        let sq = tape.sum_squares(x);
        let tri = tape.scale(x, 3.0);
        let lin = tape.sum(tri);
        let y = tape.add(sq, lin).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1., 2.]), true);
        let c = tape.leaf(&t(&[2], &[3., 4.]), false);
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3., 4.]);
    }

    #[test]
    fn group_mean_and_gather_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 2], &[1., 3., 3., 5., 10., 20.]), true);
        let m = tape.group_mean(x, vec![vec![0, 1], vec![2]]).unwrap();
        assert_eq!(tape.value(m), &[2., 4., 10., 20.]);
        let g = tape.gather_rows(x, &[2, 2]).unwrap();
        let s1 = tape.sum(m);
        let s2 = tape.sum(g);
        let y = tape.add(s1, s2).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5, 0.5, 0.5, 3., 3.]);
    }
}
