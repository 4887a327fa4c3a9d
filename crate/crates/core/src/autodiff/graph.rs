use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait BackwardRule {
    /// Returns one gradient per input (same length as that input's values),
    /// given the input values, the forward output and the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Unfold { x: Var, context: usize, dilation: usize },
    /// Each output element copies exactly one input element.
    Route { x: Var, routes: Vec<usize> },
    Prelu { x: Var, slope: Var },
    StatsPool { x: Var },
    ResidualAdd { main: Var, skip: Var, offset: usize },
    Stack { rows: Vec<Var> },
    WeightedSum { x: Var, weights: Vec<f64> },
    SumSquares { x: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of nodes in creation (topological) order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidSignal(format!("non-finite value produced by {what}")))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every piecewise-linear branch taken in the forward pass: max
    /// pooling and MFM winners and PReLU input signs. Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Route { routes, .. } => routes.hash(&mut h),
                Op::Prelu { x, .. } => self.nodes[x.0].value.data().iter().for_each(|v| (*v >= 0.0).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Row-wise `x W + b` for `x: T x Din`, `W: Din x Dout`, `b: Dout`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, din) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.rows() != din {
            return Err(Error::Dimension(format!(
                "affine: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let dout = wv.cols();
        let mut out = vec![0.0; t * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::Dimension(format!("affine: bias {} vs output {dout}", bv.len())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(t, din, dout, xv.data(), false, wv.data(), false, &mut out, 1.0);
        let value = Tensor::matrix(t, dout, out)?;
        check_finite(&value, "affine")?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    /// Row `t` of the output concatenates input rows `t, t+d, ..., t+(K-1)d`.
    pub fn unfold(&mut self, x: Var, context: usize, dilation: usize) -> Result<Var> {
        if context == 0 || dilation == 0 {
            return Err(Error::Dimension("unfold: context and dilation must be positive".into()));
        }
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let span = (context - 1) * dilation + 1;
        if t < span {
            return Err(Error::SegmentTooShort { needed: span, got: t });
        }
        let t_out = t - span + 1;
        let mut out = Vec::with_capacity(t_out * context * c);
        for o in 0..t_out {
            for j in 0..context {
                out.extend_from_slice(xv.row(o + j * dilation));
            }
        }
        let value = Tensor::matrix(t_out, context * c, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Unfold { x, context, dilation }, rg))
    }

    /// Time-delay layer: affine over a dilated window of `context` frames
    /// (valid convolution, output length `T - (K-1)d`).
    pub fn time_delay(&mut self, x: Var, w: Var, b: Option<Var>, context: usize, dilation: usize) -> Result<Var> {
        let u = self.unfold(x, context, dilation)?;
        self.affine(u, w, b)
    }

    /// Max over non-overlapping windows of 2 frames x `channel_window`
    /// channels (stride equal to the window). A trailing odd frame is dropped.
    /// Ties go to the first element in row-major scan order.
    pub fn max_pool(&mut self, x: Var, channel_window: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        if channel_window == 0 || c % channel_window != 0 {
            return Err(Error::OddChannels(c));
        }
        if t < 2 {
            return Err(Error::SegmentTooShort { needed: 2, got: t });
        }
        let (t_out, c_out) = (t / 2, c / channel_window);
        let data = xv.data();
        let mut out = Vec::with_capacity(t_out * c_out);
        let mut routes = Vec::with_capacity(t_out * c_out);
        for o in 0..t_out {
            for k in 0..c_out {
                let mut best = (2 * o) * c + k * channel_window;
                for dt in 0..2 {
                    for dc in 0..channel_window {
                        let idx = (2 * o + dt) * c + k * channel_window + dc;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                routes.push(best);
            }
        }
        let value = Tensor::matrix(t_out, c_out, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Route { x, routes }, rg))
    }

    /// 2x2 max pooling with stride 2 over (time, channel pairs).
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        self.max_pool(x, 2)
    }

    /// `x` where non-negative, `a_c x` otherwise, with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(slope));
        let c = xv.cols();
        if av.len() != c {
            return Err(Error::Dimension(format!("prelu: {} slopes for {c} channels", av.len())));
        }
        let a = av.data();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[i % c] * v })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(value, Op::Prelu { x, slope }, rg))
    }

    /// Max-Feature-Map: `out[:, c] = max(x[:, c], x[:, c + C])` for `x: T x 2C`.
    /// Ties go to the first half.
    pub fn mfm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, c2) = (xv.rows(), xv.cols());
        if c2 % 2 != 0 {
            return Err(Error::OddChannels(c2));
        }
        let c = c2 / 2;
        let data = xv.data();
        let mut out = Vec::with_capacity(t * c);
        let mut routes = Vec::with_capacity(t * c);
        for r in 0..t {
            for k in 0..c {
                let (i, j) = (r * c2 + k, r * c2 + k + c);
                let win = if data[j] > data[i] { j } else { i };
                out.push(data[win]);
                routes.push(win);
            }
        }
        let value = Tensor::matrix(t, c, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Route { x, routes }, rg))
    }

    /// Per-channel mean followed by per-channel `sqrt(var + eps)`, as `1 x 2C`.
    pub fn stats_pool(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        if t == 0 {
            return Err(Error::SegmentTooShort { needed: 1, got: 0 });
        }
        let mut mean = vec![0.0; c];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut out = mean;
        out.extend(var.iter().map(|s| (s / t as f64 + eps).sqrt()));
        let value = Tensor::matrix(1, 2 * c, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::StatsPool { x }, rg))
    }

    /// `main + skip`, where `skip` is cropped symmetrically in time to the
    /// length of `main` and zero-padded in channels when narrower.
    pub fn residual_add(&mut self, main: Var, skip: Var) -> Result<Var> {
        let (mv, sv) = (self.value(main), self.value(skip));
        let (tm, cm, ts, cs) = (mv.rows(), mv.cols(), sv.rows(), sv.cols());
        if ts < tm || (ts - tm) % 2 != 0 || cs > cm {
            return Err(Error::Dimension(format!(
                "residual: main {tm}x{cm} cannot absorb skip {ts}x{cs}"
            )));
        }
        let offset = (ts - tm) / 2;
        let mut out = mv.data().to_vec();
        for r in 0..tm {
            for (o, s) in out[r * cm..r * cm + cs].iter_mut().zip(sv.row(r + offset)) {
                *o += s;
            }
        }
        let value = Tensor::matrix(tm, cm, out)?;
        let rg = self.any_grad(&[main, skip]);
        Ok(self.push(value, Op::ResidualAdd { main, skip, offset }, rg))
    }

    /// Stacks equal-width row vectors into a `B x D` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let d = rows.first().map(|&r| self.value(r).len()).unwrap_or(0);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = self.value(r);
            if v.len() != d {
                return Err(Error::Dimension("stack_rows: widths differ".into()));
            }
            out.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        let rg = self.any_grad(rows);
        Ok(self.push(value, Op::Stack { rows: rows.to_vec() }, rg))
    }

    /// Scalar `sum_i w_i x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::Dimension("weighted_sum: length mismatch".into()));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Scalar `sum_i x_i^2`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Adds a node whose forward value was computed by the caller and whose
    /// backward pass is given by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Result<Var> {
        check_finite(&value, "custom op")?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, rg))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar `loss`; gradients accumulate into
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse-mode pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::Dimension("backward seed length mismatch".into()));
        }
        self.accumulate(out, seed);
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, &cg);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, din, dout) = (xv.rows(), xv.cols(), wv.cols());
                if needs(*x) {
                    let mut dx = vec![0.0; t * din];
                    gemm(t, dout, din, g, false, wv.data(), true, &mut dx, 0.0);
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, t, dout, xv.data(), true, g, false, &mut dw, 0.0);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, db));
                }
            }
            Op::Unfold { x, context, dilation } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let width = context * c;
                    let mut dx = vec![0.0; xv.len()];
                    for (o, row) in g.chunks(width).enumerate() {
                        for j in 0..*context {
                            let src = o + j * dilation;
                            dx[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(&row[j * c..(j + 1) * c])
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Route { x, routes } => {
                if needs(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&r, &gv) in routes.iter().zip(g) {
                        dx[r] += gv;
                    }
                    out.push((*x, dx));
                }
            }
            Op::Prelu { x, slope } => {
                let (xv, av) = (self.value(*x), self.value(*slope));
                let c = av.len();
                if needs(*x) {
                    let dx = xv
                        .data()
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(k, (&v, &gv))| if v >= 0.0 { gv } else { av.data()[k % c] * gv })
                        .collect();
                    out.push((*x, dx));
                }
                if needs(*slope) {
                    let mut da = vec![0.0; c];
                    for (k, (&v, &gv)) in xv.data().iter().zip(g).enumerate() {
                        if v < 0.0 {
                            da[k % c] += v * gv;
                        }
                    }
                    out.push((*slope, da));
                }
            }
            Op::StatsPool { x } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let (t, c) = (xv.rows(), xv.cols());
                    let stats = node.value.data();
                    let (mean, std) = stats.split_at(c);
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..t {
                        for k in 0..c {
                            let centered = xv.data()[r * c + k] - mean[k];
                            dx[r * c + k] = g[k] / t as f64 + g[c + k] * centered / (t as f64 * std[k]);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::ResidualAdd { main, skip, offset } => {
                if needs(*main) {
                    out.push((*main, g.to_vec()));
                }
                if needs(*skip) {
                    let sv = self.value(*skip);
                    let cs = sv.cols();
                    let cm = node.value.cols();
                    let mut ds = vec![0.0; sv.len()];
                    for r in 0..node.value.rows() {
                        let dst = (r + offset) * cs;
                        ds[dst..dst + cs].copy_from_slice(&g[r * cm..r * cm + cs]);
                    }
                    out.push((*skip, ds));
                }
            }
            Op::Stack { rows } => {
                let d = node.value.cols();
                for (r, &v) in rows.iter().enumerate() {
                    if needs(v) {
                        out.push((v, g[r * d..(r + 1) * d].to_vec()));
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if needs(*x) {
                    out.push((*x, weights.iter().map(|w| w * g[0]).collect()));
                }
            }
            Op::SumSquares { x } => {
                if needs(*x) {
                    out.push((*x, self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()));
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = rule.backward(&values, &node.value, g);
                for (&v, dg) in inputs.iter().zip(grads) {
                    if needs(v) {
                        out.push((v, dg));
                    }
                }
            }
        }
        out
    }
}
