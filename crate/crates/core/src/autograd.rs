//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Every op appends exactly one node, so
//! node order is a topological order and backward simply walks it in reverse.
//! A graph can be differentiated once; build a fresh one for the next pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing constant inside the total-variation square root.
pub const TV_EPS: f32 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Relu(Var),
    Sigmoid(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Reshape(Var),
    Softmax(Var),
    Mse(Var, Var),
    Tv { input: Var, eps: f32 },
    Nll { probs: Var, labels: Vec<u8> },
    Add(Var, Var),
    Scale(Var, f32),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    // true when some requires_grad leaf reaches this node
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the `requires_grad` leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D convolution, stride 1, zero padding `kernel / 2` (spatial dims preserved).
    ///
    /// `input` is `(N, C, H, W)`, `weight` is `(O, C, K, K)` with odd `K`, `bias` is `(O)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::shape("conv2d", &ws, &xs));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &[xs[0], ws[1], xs[2], xs[3]], &xs));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d bias", &[ws[0]], &bs));
        }
        let geo = ConvGeometry::new(&xs, &ws);
        let out = conv_forward(&geo, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let out = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], out)?;
        self.push("conv2d", out, Op::Conv2d { input, weight, bias }, &[input, weight, bias])
    }

    /// 2x2 max pooling with stride 2. Trailing odd rows/columns are dropped.
    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2x2", &[0, 0, 2, 2], &s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("max_pool2x2", out, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push("relu", out, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        )?;
        self.push("sigmoid", out, Op::Sigmoid(input), &[input])
    }

    /// Fully-connected layer: `input (N, I)`, `weight (O, I)`, `bias (O)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &[xs.first().copied().unwrap_or(0), ws[1]], &xs));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear bias", &[ws[0]], &bs));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        // out (N x O) += x (N x I) * W^T (I x O)
        unsafe {
            matrixmultiply::sgemm(
                n,
                i,
                o,
                1.0,
                self.value(input).data().as_ptr(),
                i as isize,
                1,
                self.value(weight).data().as_ptr(),
                1,
                i as isize,
                1.0,
                out.as_mut_ptr(),
                o as isize,
                1,
            );
        }
        let out = Tensor::new(vec![n, o], out)?;
        self.push("linear", out, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.batch();
        let rest = x.len() / n.max(1);
        let out = x.clone().reshape(&[n, rest])?;
        self.push("flatten", out, Op::Reshape(input), &[input])
    }

    /// Row-wise softmax over a `(N, K)` input.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("softmax", &[s.first().copied().unwrap_or(0), 0], &s));
        }
        let k = s[1];
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v as f64;
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / total) as f32;
            }
        }
        let out = Tensor::new(s, out)?;
        self.push("softmax", out, Op::Softmax(input), &[input])
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let n = av.len().max(1) as f64;
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((total / n) as f32);
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    /// Isotropic total variation of an `(N, C, H, W)` image batch, summed over
    /// pixels, channels and batch. Forward differences that would cross the
    /// bottom or right border contribute zero.
    pub fn tv(&mut self, input: Var, eps: f32) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("tv", &[0, 0, 1, 1], &s));
        }
        let value = tv_value(self.value(input).data(), s[2], s[3], eps);
        self.push("tv", Tensor::scalar(value), Op::Tv { input, eps }, &[input])
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities
    /// `probs (N, K)`, i.e. cross-entropy on a softmax output.
    pub fn nll(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("nll", &[labels.len(), s.get(1).copied().unwrap_or(0)], &s));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range [0,{k})")));
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -(p[r * k + y as usize].max(f32::MIN_POSITIVE) as f64).ln())
            .sum();
        let out = Tensor::scalar((total / labels.len().max(1) as f64) as f32);
        self.push("nll", out, Op::Nll { probs, labels: labels.to_vec() }, &[probs])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * k).collect())?;
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(total as f32), Op::Sum(a), &[a])
    }

    /// Differentiates a scalar `loss` with respect to every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let seed = Tensor::full(shape, 1.0);
        self.backward_with(loss, seed)
    }

    /// Backpropagates an upstream gradient `seed` (shaped like `output`).
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", self.shape(output), seed.shape()));
        }
        check_finite("backward seed", &seed)?;
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed.into_data());

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d { input, weight, bias } => {
                    let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight));
                    let (dx, dw, db) = conv_backward(
                        &geo,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                        self.tracked(*input),
                        self.tracked(*weight) || self.tracked(*bias),
                    );
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    if let Some((dw, db)) = dw.zip(db) {
                        self.accumulate(&mut grads, *weight, dw);
                        self.accumulate(&mut grads, *bias, db);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![0.0f32; self.value(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src as usize] += gv;
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let dx = x.iter().zip(&g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    let dx = y.iter().zip(&g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Linear { input, weight, bias } => {
                    let (n, i) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let o = self.shape(*weight)[0];
                    if self.tracked(*input) {
                        let mut dx = vec![0.0f32; n * i];
                        // dX (N x I) = dY (N x O) * W (O x I)
                        unsafe {
                            matrixmultiply::sgemm(
                                n,
                                o,
                                i,
                                1.0,
                                g.as_ptr(),
                                o as isize,
                                1,
                                self.value(*weight).data().as_ptr(),
                                i as isize,
                                1,
                                0.0,
                                dx.as_mut_ptr(),
                                i as isize,
                                1,
                            );
                        }
                        self.accumulate(&mut grads, *input, dx);
                    }
                    if self.tracked(*weight) || self.tracked(*bias) {
                        let mut dw = vec![0.0f32; o * i];
                        // dW (O x I) = dY^T (O x N) * X (N x I)
                        unsafe {
                            matrixmultiply::sgemm(
                                o,
                                n,
                                i,
                                1.0,
                                g.as_ptr(),
                                1,
                                o as isize,
                                self.value(*input).data().as_ptr(),
                                i as isize,
                                1,
                                0.0,
                                dw.as_mut_ptr(),
                                i as isize,
                                1,
                            );
                        }
                        let mut db = vec![0.0f32; o];
                        for row in g.chunks(o) {
                            for (acc, &gv) in db.iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                        self.accumulate(&mut grads, *weight, dw);
                        self.accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Reshape(input) => {
                    self.accumulate(&mut grads, *input, g);
                }
                Op::Softmax(input) => {
                    let y = node.value.data();
                    let k = node.value.shape()[1];
                    let mut dx = vec![0.0f32; y.len()];
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        let dot = dot as f32;
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let k = 2.0 * g[0] / av.len().max(1) as f32;
                    let da: Vec<f32> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
                    if self.tracked(*b) {
                        let db = da.iter().map(|v| -v).collect();
                        self.accumulate(&mut grads, *b, db);
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Tv { input, eps } => {
                    let s = self.shape(*input);
                    let mut dx = tv_grad(self.value(*input).data(), s[2], s[3], *eps);
                    for v in &mut dx {
                        *v *= g[0];
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Nll { probs, labels } => {
                    let p = self.value(*probs).data();
                    let k = self.shape(*probs)[1];
                    let scale = g[0] / labels.len().max(1) as f32;
                    let mut dp = vec![0.0f32; p.len()];
                    for (r, &y) in labels.iter().enumerate() {
                        let idx = r * k + y as usize;
                        dp[idx] = -scale / p[idx].max(f32::MIN_POSITIVE);
                    }
                    self.accumulate(&mut grads, *probs, dp);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => {
                    let dx = g.iter().map(|v| v * k).collect();
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let dx = vec![g[0]; self.value(*a).len()];
                    self.accumulate(&mut grads, *a, dx);
                }
            }
        }
        for l in leaves.iter().flatten() {
            check_finite("backward", l)?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        ConvGeometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k: ws[2],
            pad: ws[2] / 2,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one `(C, H, W)` sample into a `(C*K*K, H*W)` column matrix.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (h, w, k, pad) = (self.h as isize, self.w as isize, self.k, self.pad as isize);
        let hw = self.pixels();
        for c in 0..self.c {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let di = ki as isize - pad;
                    let dj = kj as isize - pad;
                    for y in 0..h {
                        let sy = y + di;
                        let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for (x_, o) in out_row.iter_mut().enumerate() {
                            let sx = x_ as isize + dj;
                            *o = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (h, w, k, pad) = (self.h as isize, self.w as isize, self.k, self.pad as isize);
        let hw = self.pixels();
        for c in 0..self.c {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let di = ki as isize - pad;
                    let dj = kj as isize - pad;
                    for y in 0..h {
                        let sy = y + di;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for x_ in 0..w {
                            let sx = x_ + dj;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            plane[(sy * w + sx) as usize] += src[(y * w + x_) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(geo: &ConvGeometry, x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (patch, hw, o) = (geo.patch(), geo.pixels(), geo.o);
    let mut cols = vec![0.0f32; patch * hw];
    let mut out = vec![0.0f32; geo.n * o * hw];
    for s in 0..geo.n {
        geo.im2col(&x[s * geo.c * hw..(s + 1) * geo.c * hw], &mut cols);
        let dst = &mut out[s * o * hw..(s + 1) * o * hw];
        for (row, &b) in dst.chunks_mut(hw).zip(bias) {
            row.fill(b);
        }
        unsafe {
            matrixmultiply::sgemm(
                o,
                patch,
                hw,
                1.0,
                weight.as_ptr(),
                patch as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    out
}

type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

fn conv_backward(
    geo: &ConvGeometry,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (patch, hw, o, c) = (geo.patch(), geo.pixels(), geo.o, geo.c);
    let mut cols = vec![0.0f32; patch * hw];
    let mut dx = want_input.then(|| vec![0.0f32; x.len()]);
    let mut dw = want_params.then(|| vec![0.0f32; weight.len()]);
    let mut db = want_params.then(|| vec![0.0f32; o]);
    for s in 0..geo.n {
        let dys = &dy[s * o * hw..(s + 1) * o * hw];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            geo.im2col(&x[s * c * hw..(s + 1) * c * hw], &mut cols);
            // dW (O x P) += dY (O x HW) * cols^T (HW x P)
            unsafe {
                matrixmultiply::sgemm(
                    o,
                    hw,
                    patch,
                    1.0,
                    dys.as_ptr(),
                    hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    hw as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
            for (acc, row) in db.iter_mut().zip(dys.chunks(hw)) {
                *acc += row.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (P x HW) = W^T (P x O) * dY (O x HW)
            unsafe {
                matrixmultiply::sgemm(
                    patch,
                    o,
                    hw,
                    1.0,
                    weight.as_ptr(),
                    1,
                    patch as isize,
                    dys.as_ptr(),
                    hw as isize,
                    1,
                    0.0,
                    cols.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            geo.col2im(&cols, &mut dx[s * c * hw..(s + 1) * c * hw]);
        }
    }
    (dx, dw, db)
}

fn tv_value(x: &[f32], h: usize, w: usize, eps: f32) -> f32 {
    let mut total = 0.0f64;
    for plane in x.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let dv = if i + 1 < h { plane[(i + 1) * w + j] - v } else { 0.0 };
                let dh = if j + 1 < w { plane[i * w + j + 1] - v } else { 0.0 };
                total += ((dv * dv + dh * dh + eps) as f64).sqrt();
            }
        }
    }
    total as f32
}

fn tv_grad(x: &[f32], h: usize, w: usize, eps: f32) -> Vec<f32> {
    let mut dx = vec![0.0f32; x.len()];
    for (plane, dplane) in x.chunks(h * w).zip(dx.chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let dv = if i + 1 < h { plane[(i + 1) * w + j] - v } else { 0.0 };
                let dh = if j + 1 < w { plane[i * w + j + 1] - v } else { 0.0 };
                let s = (dv * dv + dh * dh + eps).sqrt();
                if s == 0.0 {
                    continue;
                }
                if i + 1 < h {
                    dplane[(i + 1) * w + j] += dv / s;
                }
                if j + 1 < w {
                    dplane[i * w + j + 1] += dh / s;
                }
                dplane[i * w + j] -= (dv + dh) / s;
            }
        }
    }
    dx
}
