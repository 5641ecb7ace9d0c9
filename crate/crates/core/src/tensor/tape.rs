use super::kernels::{ConvGeometry, Padding};
use super::{as_matrix, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Square,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Exp,
    Ln,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    RSubScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: Box<ConvGeometry>,
        col: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Sort(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>),
    BroadcastChannels(Var, usize),
    SpatialMean(Var),
    Select(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and appends one entry; [`Tape::backward`]
/// walks the entries in exact reverse order. A tape supports a single
/// backward pass; call [`Tape::reset`] to record a fresh graph.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn nonempty(op: &'static str, a: &Tensor<impl Element>) -> Result<()> {
    if a.is_empty() {
        Err(Error::Empty { op })
    } else {
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded entry so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_map(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |p, q| p + q)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |p, q| p - q)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |p, q| p * q)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|x| x.is_zero()) {
            same_shape("div", self.value(a), self.value(b))?;
            return Err(Error::DivisionByZero { op: "div" });
        }
        let v = self.zip_map("div", a, b, |p, q| p / q)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("mul_scalar", v, Op::MulScalar(a, s), &[a])
    }

    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, s: T, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| s - x);
        self.push("rsub_scalar", v, Op::RSubScalar(a), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        if s.is_zero() {
            return Err(Error::DivisionByZero { op: "div_scalar" });
        }
        self.mul_scalar(a, T::one() / s)
    }

    fn unary(&mut self, name: &'static str, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        // one arm per kind so each closure inlines into its own loop
        let v = match kind {
            Unary::Square => x.map(|x| x * x),
            Unary::Relu => x.map(|x| x.max(T::zero())),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Sin => x.map(T::sin),
            Unary::Cos => x.map(T::cos),
            Unary::Exp => x.map(T::exp),
            Unary::Ln => x.map(T::ln),
        };
        self.push(name, v, Op::Unary(a, kind), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Unary::Square)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Unary::Sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, Unary::Cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::NonFinite { op: "ln" });
        }
        self.unary("ln", a, Unary::Ln)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the bounds.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = as_matrix("add_row_bias", self.value(x).shape())?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.value(x).shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (d, &bb) in row.iter_mut().zip(b.data()) {
                *d = *d + bb;
            }
        }
        let v = Tensor::new([m, n], data)?;
        self.push("add_row_bias", v, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds a per-channel bias to a `[c, h, w]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = self.value(bias);
        if shape.len() != 3 || b.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: shape,
                right: b.shape().to_vec(),
            });
        }
        let plane = shape[1] * shape[2];
        let mut data = self.value(x).data().to_vec();
        for (chunk, &bb) in data.chunks_exact_mut(plane).zip(b.data()) {
            for d in chunk {
                *d = *d + bb;
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push("add_channel_bias", v, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// Cross-correlation of `input [c,h,w]` with `kernel [o,c,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let geometry = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), padding)?;
        let (out, col) = geometry.forward(self.value(input).data(), self.value(kernel).data());
        let v = Tensor::new([geometry.out_channels, geometry.out_h, geometry.out_w], out)?;
        let op = Op::Conv2d {
            input,
            kernel,
            geometry: Box::new(geometry),
            col,
        };
        self.push("conv2d", v, op, &[input, kernel])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        nonempty("sum", self.value(a))?;
        let v = Tensor::scalar(T::of(self.value(a).sum_f64()));
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        nonempty("mean", self.value(a))?;
        let v = Tensor::scalar(T::of(self.value(a).mean_f64()));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Max-stabilized softmax over a rank-1 tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: x.shape().to_vec(),
                reason: "expected a rank-1 tensor".into(),
            });
        }
        nonempty("softmax", x)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let v = Tensor::from_vec(softmax_values(x.data()));
        self.push("softmax", v, Op::Softmax(logits), &[logits])
    }

    /// Stable sort of a rank-1 tensor. Returns the sorted values and the
    /// permutation `perm` with `sorted[i] = input[perm[i]]`.
    pub fn vecsort(&mut self, a: Var, ascending: bool) -> Result<(Var, Vec<usize>)> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::InvalidShape {
                op: "vecsort",
                shape: x.shape().to_vec(),
                reason: "expected a rank-1 tensor".into(),
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "vecsort" });
        }
        let perm = sort_permutation(x.data(), ascending);
        let v = Tensor::from_vec(perm.iter().map(|&i| x.data()[i]).collect());
        let out = self.push("vecsort", v, Op::Sort(a, perm.clone()), &[a])?;
        Ok((out, perm))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, [n])
    }

    /// Concatenates the flattened values of `parts` into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat" });
        }
        let data: Vec<T> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let v = Tensor::from_vec(data);
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    /// Repeats an `[h, w]` map across `channels` to form `[channels, h, w]`.
    pub fn broadcast_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let x = self.value(a);
        let &[h, w] = x.shape() else {
            return Err(Error::InvalidShape {
                op: "broadcast_channels",
                shape: x.shape().to_vec(),
                reason: "expected [h, w]".into(),
            });
        };
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            data.extend_from_slice(x.data());
        }
        let v = Tensor::new([channels, h, w], data)?;
        self.push("broadcast_channels", v, Op::BroadcastChannels(a, channels), &[a])
    }

    /// Global average pool: `[c, h, w] -> [c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let &[c, h, w] = x.shape() else {
            return Err(Error::InvalidShape {
                op: "spatial_mean",
                shape: x.shape().to_vec(),
                reason: "expected [c, h, w]".into(),
            });
        };
        if h * w == 0 {
            return Err(Error::Empty { op: "spatial_mean" });
        }
        let data = x
            .data()
            .chunks_exact(h * w)
            .map(|ch| T::of(ch.iter().map(|v| v.f64()).sum::<f64>() / (h * w) as f64))
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), c);
        let v = Tensor::from_vec(data);
        self.push("spatial_mean", v, Op::SpatialMean(a), &[a])
    }

    /// Picks element `index` of the flattened tensor as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        let Some(&value) = x.data().get(index) else {
            return Err(Error::invalid(format!(
                "select index {index} out of range for {} elements",
                x.len()
            )));
        };
        self.push("select", Tensor::scalar(value), Op::Select(a, index), &[a])
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &q) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + s * q;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &s), &p) in gb.iter_mut().zip(g).zip(x) {
                        *d = *d + s * p;
                    }
                });
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &q) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + s / q;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (((d, &s), &p), &q) in gb.iter_mut().zip(g).zip(x).zip(y) {
                        *d = *d - s * p / (q * q);
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
            }
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, |ga| {
                    for (d, &u) in ga.iter_mut().zip(g) {
                        *d = *d + u * s;
                    }
                });
            }
            Op::RSubScalar(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (d, &u) in ga.iter_mut().zip(g) {
                        *d = *d - u;
                    }
                });
            }
            Op::Unary(a, kind) => {
                let (x, y) = (val(*a), node.value.data());
                let two = T::of(2.0);
                self.accumulate(grads, *a, |ga| match kind {
                    Unary::Square => chain_unary(ga, g, x, y, |x, _| two * x),
                    Unary::Relu => chain_unary(ga, g, x, y, |x, _| if x > T::zero() { T::one() } else { T::zero() }),
                    Unary::Sigmoid => chain_unary(ga, g, x, y, |_, y| y * (T::one() - y)),
                    Unary::Sin => chain_unary(ga, g, x, y, |x, _| x.cos()),
                    Unary::Cos => chain_unary(ga, g, x, y, |x, _| -x.sin()),
                    Unary::Exp => chain_unary(ga, g, x, y, |_, y| y),
                    Unary::Ln => chain_unary(ga, g, x, y, |x, _| x.recip()),
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = val(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &u), &xx) in ga.iter_mut().zip(g).zip(x) {
                        if xx > lo && xx < hi {
                            *d = *d + u;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (x, y) = (val(*a), val(*b));
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    T::gemm(m, n, k, g, (n as isize, 1), y, (1, n as isize), T::one(), ga);
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |gb| {
                    T::gemm(k, m, n, x, (1, k as isize), g, (n as isize, 1), T::one(), gb);
                });
            }
            Op::AddRowBias(x, bias) => {
                let n = self.nodes[bias.0].value.len();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks_exact(n) {
                        for (a, &u) in acc.iter_mut().zip(row) {
                            *a += u.f64();
                        }
                    }
                    for (d, a) in gb.iter_mut().zip(acc) {
                        *d = *d + T::of(a);
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                let plane = node.value.len() / self.nodes[bias.0].value.len();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for (d, ch) in gb.iter_mut().zip(g.chunks_exact(plane)) {
                        *d = *d + T::of(ch.iter().map(|u| u.f64()).sum());
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geometry,
                col,
            } => {
                let (o, p, n) = (geometry.out_channels, geometry.patch_len(), geometry.out_len());
                // dK = G · colᵀ
                self.accumulate(grads, *kernel, |gk| {
                    T::gemm(o, n, p, g, (n as isize, 1), col, (1, n as isize), T::one(), gk);
                });
                if self.nodes[input.0].requires_grad {
                    // dcol = Kᵀ · G, folded back onto the input
                    let mut dcol = vec![T::zero(); p * n];
                    T::gemm(p, o, n, val(*kernel), (1, p as isize), g, (n as isize, 1), T::zero(), &mut dcol);
                    let dinput = geometry.col2im(&dcol);
                    self.accumulate(grads, *input, |gi| add_into(gi, &dinput));
                }
            }
            Op::Sum(a) => {
                let u = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + u));
            }
            Op::Mean(a) => {
                let u = T::of(g[0].f64() / self.nodes[a.0].value.len() as f64);
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + u));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot = T::of(g.iter().zip(y).map(|(u, v)| u.f64() * v.f64()).sum());
                self.accumulate(grads, *a, |ga| {
                    for ((d, &u), &yy) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + yy * (u - dot);
                    }
                });
            }
            Op::Sort(a, perm) => {
                self.accumulate(grads, *a, |ga| {
                    for (&src, &u) in perm.iter().zip(g) {
                        ga[src] = ga[src] + u;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let len = self.nodes[part.0].value.len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, part, |gp| add_into(gp, slice));
                    offset += len;
                }
            }
            Op::BroadcastChannels(a, channels) => {
                let plane = node.value.len() / channels;
                self.accumulate(grads, *a, |ga| {
                    for ch in g.chunks_exact(plane) {
                        add_into(ga, ch);
                    }
                });
            }
            Op::SpatialMean(a) => {
                let plane = self.nodes[a.0].value.len() / node.value.len();
                let scale = T::of(1.0 / plane as f64);
                self.accumulate(grads, *a, |ga| {
                    for (chunk, &u) in ga.chunks_exact_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|d| *d = *d + u * scale);
                    }
                });
            }
            Op::Select(a, index) => {
                let index = *index;
                self.accumulate(grads, *a, |ga| ga[index] = ga[index] + g[0]);
            }
        }
    }
}

/// `ga += g · f(x, y)` elementwise, with `y` the forward output.
fn chain_unary<T: Element>(ga: &mut [T], g: &[T], x: &[T], y: &[T], f: impl Fn(T, T) -> T) {
    for (((d, &u), &xx), &yy) in ga.iter_mut().zip(g).zip(x).zip(y) {
        *d = flush(*d + u * f(xx, yy));
    }
}

/// Zeroes subnormals, which are numerically irrelevant here but cost two
/// orders of magnitude in throughput once they reach the gemm kernels.
#[inline]
pub(crate) fn flush<T: Element>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        flush(e / (T::one() + e))
    }
}

pub(crate) fn softmax_values<T: Element>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).f64().exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / total)).collect()
}

/// Stable argsort; ties keep their original relative order.
pub(crate) fn sort_permutation<T: Element>(x: &[T], ascending: bool) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.sort_by(|&i, &j| {
        let ord = x[i].partial_cmp(&x[j]).expect("finite values");
        if ascending {
            ord
        } else {
            ord.reverse()
        }
    });
    perm
}
