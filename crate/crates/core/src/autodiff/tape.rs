//! Reverse-mode tape over a small fixed set of batched operations.
//!
//! Every node holds a dense matrix whose rows are samples. Subgradients at
//! kinks follow one rule: the active branch receives the gradient and exact
//! ties go to the lowest index.

use std::collections::HashMap;

use super::mat::{gemm, Mat};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::sdf::math::{self, Mat3};
use crate::sdf::{sdf_with_grad, PrimitiveKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Neg(Var),
    Abs(Var),
    Clamp(Var, f64),
    ClampBounds { x: Var, lo: Vec<f64>, hi: Vec<f64> },
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Vec<Var>),
    Broadcast(Var),
    Slice { x: Var, start: usize },
    Min { inputs: Vec<Var>, arg: Vec<u32> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    MeanSmallest { x: Var, selected: Vec<usize> },
    MaxPoolRows { x: Var, arg: Vec<u32> },
    TransformPoints { pts: Var, rot: Option<(Var, Mat3)>, trans: Var },
    AnalyticSdf { pts: Var, params: Var, d_pts: Vec<[f64; 3]>, d_params: Vec<[f64; 3]> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Input whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter block once per tape. Frozen blocks are plain
    /// constants, which skips their weight-gradient products.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let value = store.get(id).as_mat();
        let v = if trainable { self.leaf(value) } else { self.constant(value) };
        self.param_cache.insert(id, v);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    /// `x · wᵀ + b` with `w` of shape out×in and `b` of shape 1×out.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xm, wm) = (self.value(x), self.value(w));
        if xm.cols != wm.cols {
            return Err(Error::Dimension {
                context: "dense",
                detail: format!("input width {} vs weight {}x{}", xm.cols, wm.rows, wm.cols),
            });
        }
        let mut y = Mat::zeros(xm.rows, wm.rows);
        if let Some(b) = b {
            let bm = self.value(b);
            if bm.len() != wm.rows {
                return Err(Error::Dimension {
                    context: "dense",
                    detail: format!("bias length {} vs output {}", bm.len(), wm.rows),
                });
            }
            for r in 0..y.rows {
                y.row_mut(r).copy_from_slice(&bm.data);
            }
        }
        gemm(1.0, xm, false, wm, true, if b.is_some() { 1.0 } else { 0.0 }, &mut y);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Dense { x, w, b }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(y, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `min(δ, max(−δ, x))`
    pub fn clamp(&mut self, x: Var, delta: f64) -> Var {
        self.unary(x, move |v| v.max(-delta).min(delta), Op::Clamp(x, delta))
    }

    /// Elementwise clamp to per-entry bounds (infinite bounds allowed).
    pub fn clamp_bounds(&mut self, x: Var, lo: Vec<f64>, hi: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if lo.len() != n || hi.len() != n {
            return Err(Error::LengthMismatch { context: "clamp bounds", expected: n, actual: lo.len().min(hi.len()) });
        }
        let mut v = self.value(x).clone();
        for ((e, l), h) in v.data.iter_mut().zip(&lo).zip(&hi) {
            *e = e.max(*l).min(*h);
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(v, Op::ClampBounds { x, lo, hi }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::Dimension {
                context,
                detail: format!("{:?} vs {:?}", am.shape(), bm.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bm = self.value(b);
        let mut y = self.value(a).clone();
        y.data.iter_mut().zip(&bm.data).for_each(|(u, v)| *u -= v);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows != rows) {
            return Err(Error::Dimension {
                context: "concat",
                detail: format!("{} rows vs {}", self.value(*bad).rows, rows),
            });
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut y = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                y.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), ng))
    }

    /// Repeats a 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.rows, 1, "broadcast_rows expects a row vector");
        let mut y = Mat::zeros(rows, xm.cols);
        for r in 0..rows {
            y.row_mut(r).copy_from_slice(&xm.data);
        }
        let ng = self.ng(x);
        self.push(y, Op::Broadcast(x), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.cols, "slice_cols out of range");
        let mut y = Mat::zeros(xm.rows, len);
        for r in 0..xm.rows {
            y.row_mut(r).copy_from_slice(&xm.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(y, Op::Slice { x, start }, ng)
    }

    /// Elementwise minimum over same-shaped inputs.
    pub fn min(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::EmptyUnion)?;
        for v in &inputs[1..] {
            self.same_shape(first, *v, "min")?;
        }
        let mut y = self.value(first).clone();
        let mut arg = vec![0u32; y.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(*v).data.iter().enumerate() {
                if x < y.data[i] {
                    y.data[i] = x;
                    arg[i] = k as u32;
                }
            }
        }
        let ng = inputs.iter().any(|v| self.ng(*v));
        Ok(self.push(y, Op::Min { inputs: inputs.to_vec(), arg }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Mat::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let s = if m.is_empty() { 0.0 } else { m.data.iter().sum::<f64>() / m.len() as f64 };
        let ng = self.ng(x);
        self.push(Mat::scalar(s), Op::Mean(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let ng = self.ng(x);
        self.push(Mat::scalar(s), Op::SumSquares(x), ng)
    }

    /// Mean of the `count` smallest entries (stable by position). The
    /// selection is a fixed permutation during backward.
    pub fn mean_smallest(&mut self, x: Var, count: usize) -> Var {
        let xm = self.value(x);
        let count = count.min(xm.len());
        let mut order: Vec<usize> = (0..xm.len()).collect();
        order.sort_by(|&a, &b| xm.data[a].total_cmp(&xm.data[b]));
        order.truncate(count);
        let s = if count == 0 {
            0.0
        } else {
            order.iter().map(|&i| xm.data[i]).sum::<f64>() / count as f64
        };
        let ng = self.ng(x);
        self.push(Mat::scalar(s), Op::MeanSmallest { x, selected: order }, ng)
    }

    /// Channelwise maximum over rows: N×C → 1×C.
    pub fn max_pool_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        assert!(xm.rows > 0, "max_pool_rows on empty input");
        let mut y = Mat::row_vector(xm.row(0));
        let mut arg = vec![0u32; xm.cols];
        for r in 1..xm.rows {
            for (c, &v) in xm.row(r).iter().enumerate() {
                if v > y.data[c] {
                    y.data[c] = v;
                    arg[c] = r as u32;
                }
            }
        }
        let ng = self.ng(x);
        self.push(y, Op::MaxPoolRows { x, arg }, ng)
    }

    /// Points (K×3) into a primitive frame: `Rᵀ (p − T)`. `rot` and `trans`
    /// are 1×3; a missing rotation means identity.
    pub fn transform_points(&mut self, pts: Var, rot: Option<Var>, trans: Var) -> Var {
        let pm = self.value(pts);
        let t = self.value(trans);
        assert_eq!((pm.cols, t.len()), (3, 3), "transform_points shapes");
        let tv = [t.data[0], t.data[1], t.data[2]];
        let r = rot.map(|rv| {
            let w = self.value(rv);
            assert_eq!(w.len(), 3, "rotation must be 1x3");
            (rv, math::rotation_matrix([w.data[0], w.data[1], w.data[2]]))
        });
        let mut y = Mat::zeros(pm.rows, 3);
        for k in 0..pm.rows {
            let p = pm.row(k);
            let q = math::sub([p[0], p[1], p[2]], tv);
            let out = match &r {
                Some((_, m)) => math::mat_t_vec(m, q),
                None => q,
            };
            y.row_mut(k).copy_from_slice(&out);
        }
        let ng = self.ng(pts) || self.ng(trans) || rot.is_some_and(|v| self.ng(v));
        self.push(y, Op::TransformPoints { pts, rot: r, trans }, ng)
    }

    /// Analytic primitive SDF of local points (K×3) with parameters (1×P).
    pub fn analytic_sdf(&mut self, kind: PrimitiveKind, pts: Var, params: Var) -> Var {
        let pm = self.value(pts);
        let sm = self.value(params);
        assert_eq!(pm.cols, 3);
        assert_eq!(sm.len(), kind.param_count(), "analytic_sdf parameter count");
        let mut y = Mat::zeros(pm.rows, 1);
        let mut d_pts = Vec::with_capacity(pm.rows);
        let mut d_params = Vec::with_capacity(pm.rows);
        for k in 0..pm.rows {
            let p = pm.row(k);
            let g = sdf_with_grad(kind, &sm.data, [p[0], p[1], p[2]]);
            y.data[k] = g.value;
            d_pts.push(g.d_point);
            d_params.push(g.d_params);
        }
        let ng = self.ng(pts) || self.ng(params);
        self.push(y, Op::AnalyticSdf { pts, params, d_pts, d_params }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                context: "backward",
                detail: format!("loss has shape {:?}", self.value(loss).shape()),
            });
        }
        self.backward_with(loss, Mat::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Mat) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Dimension {
                context: "backward seed",
                detail: format!("{:?} vs {:?}", seed.shape(), self.value(out).shape()),
            });
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every trainable bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                let block = store.get_mut(id);
                block.grads.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn elementwise(&self, x: Var, g: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        let xm = &self.nodes[x.0].value;
        Mat::from_vec(
            g.rows,
            g.cols,
            xm.data.iter().zip(&g.data).map(|(&xv, &gv)| f(xv, gv)).collect(),
        )
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut dx = Mat::zeros(xm.rows, xm.cols);
                    gemm(1.0, g, false, wm, false, 0.0, &mut dx);
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Mat::zeros(wm.rows, wm.cols);
                    gemm(1.0, g, true, xm, false, 0.0, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            db.data.iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Relu(x) => {
                let d = self.elementwise(*x, g, |xv, gv| if xv > 0.0 { gv } else { 0.0 });
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = self.elementwise(*x, g, |xv, gv| {
                    let t = xv.tanh();
                    gv * (1.0 - t * t)
                });
                self.acc(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = self.elementwise(*x, g, |xv, gv| gv * sigmoid(xv));
                self.acc(grads, *x, d);
            }
            Op::Neg(x) => self.acc(grads, *x, g.map(|v| -v)),
            Op::Abs(x) => {
                let d = self.elementwise(*x, g, |xv, gv| gv * sign(xv));
                self.acc(grads, *x, d);
            }
            Op::Clamp(x, delta) => {
                let delta = *delta;
                let d = self.elementwise(*x, g, |xv, gv| {
                    if xv > -delta && xv < delta {
                        gv
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::ClampBounds { x, lo, hi } => {
                let mut d = g.clone();
                let xv = &self.nodes[x.0].value.data;
                for (i, e) in d.data.iter_mut().enumerate() {
                    if !(xv[i] > lo[i] && xv[i] < hi[i]) {
                        *e = 0.0;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.ng(*p) {
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.acc(grads, *p, d);
                    }
                    off += cols;
                }
            }
            Op::Broadcast(x) => {
                let mut d = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    d.data.iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                }
                self.acc(grads, *x, d);
            }
            Op::Slice { x, start } => {
                let xm = self.value(*x);
                let mut d = Mat::zeros(xm.rows, xm.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, d);
            }
            Op::Min { inputs, arg } => {
                for (k, v) in inputs.iter().enumerate() {
                    if !self.ng(*v) {
                        continue;
                    }
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for (j, &a) in arg.iter().enumerate() {
                        if a as usize == k {
                            d.data[j] = g.data[j];
                        }
                    }
                    self.acc(grads, *v, d);
                }
            }
            Op::Sum(x) => {
                let xm = self.value(*x);
                self.acc(grads, *x, Mat::from_vec(xm.rows, xm.cols, vec![g.data[0]; xm.len()]));
            }
            Op::Mean(x) => {
                let xm = self.value(*x);
                let s = if xm.is_empty() { 0.0 } else { g.data[0] / xm.len() as f64 };
                self.acc(grads, *x, Mat::from_vec(xm.rows, xm.cols, vec![s; xm.len()]));
            }
            Op::SumSquares(x) => {
                let s = g.data[0];
                let d = self.value(*x).map(|v| 2.0 * v * s);
                self.acc(grads, *x, d);
            }
            Op::MeanSmallest { x, selected } => {
                let xm = self.value(*x);
                let mut d = Mat::zeros(xm.rows, xm.cols);
                if !selected.is_empty() {
                    let s = g.data[0] / selected.len() as f64;
                    for &j in selected {
                        d.data[j] = s;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::MaxPoolRows { x, arg } => {
                let xm = self.value(*x);
                let mut d = Mat::zeros(xm.rows, xm.cols);
                for (c, &r) in arg.iter().enumerate() {
                    d.set(r as usize, c, g.data[c]);
                }
                self.acc(grads, *x, d);
            }
            Op::TransformPoints { pts, rot, trans } => {
                let pm = self.value(*pts);
                let tm = self.value(*trans);
                let tv = [tm.data[0], tm.data[1], tm.data[2]];
                let mut dq = Mat::zeros(pm.rows, 3);
                let mut d_r = [[0.0; 3]; 3];
                for k in 0..pm.rows {
                    let gp = [g.get(k, 0), g.get(k, 1), g.get(k, 2)];
                    let dqk = match rot {
                        Some((_, r)) => {
                            let p = pm.row(k);
                            let q = math::sub([p[0], p[1], p[2]], tv);
                            for a in 0..3 {
                                for b in 0..3 {
                                    d_r[a][b] += q[a] * gp[b];
                                }
                            }
                            math::mat_vec(r, gp)
                        }
                        None => gp,
                    };
                    dq.row_mut(k).copy_from_slice(&dqk);
                }
                if self.ng(*trans) {
                    let mut dt = Mat::zeros(1, 3);
                    for k in 0..dq.rows {
                        for c in 0..3 {
                            dt.data[c] -= dq.get(k, c);
                        }
                    }
                    self.acc(grads, *trans, dt);
                }
                if let Some((rv, _)) = rot {
                    if self.ng(*rv) {
                        let w = self.value(*rv);
                        let derivs = math::rotation_matrix_derivatives([w.data[0], w.data[1], w.data[2]]);
                        let mut dw = Mat::zeros(1, 3);
                        for (m, dm) in derivs.iter().enumerate() {
                            let mut s = 0.0;
                            for a in 0..3 {
                                for b in 0..3 {
                                    s += d_r[a][b] * dm[a][b];
                                }
                            }
                            dw.data[m] = s;
                        }
                        self.acc(grads, *rv, dw);
                    }
                }
                self.acc(grads, *pts, dq);
            }
            Op::AnalyticSdf { pts, params, d_pts, d_params } => {
                if self.ng(*pts) {
                    let mut d = Mat::zeros(d_pts.len(), 3);
                    for (k, dp) in d_pts.iter().enumerate() {
                        let gk = g.data[k];
                        d.row_mut(k).copy_from_slice(&[dp[0] * gk, dp[1] * gk, dp[2] * gk]);
                    }
                    self.acc(grads, *pts, d);
                }
                if self.ng(*params) {
                    let n = self.value(*params).len();
                    let mut d = Mat::zeros(1, n);
                    for (k, dp) in d_params.iter().enumerate() {
                        for j in 0..n {
                            d.data[j] += dp[j] * g.data[k];
                        }
                    }
                    self.acc(grads, *params, d);
                }
            }
        }
    }
}

/// Single-vector dense layer evaluated directly from parameter blocks.
pub fn dense_forward(
    w: &super::params::ParamBlock,
    b: &super::params::ParamBlock,
    x: &[f64],
) -> Result<Vec<f64>> {
    if w.cols != x.len() || b.len() != w.rows {
        return Err(Error::Dimension {
            context: "dense_forward",
            detail: format!("W {}x{}, b {}, x {}", w.rows, w.cols, b.len(), x.len()),
        });
    }
    Ok((0..w.rows)
        .map(|r| {
            b.values[r] + w.values[r * w.cols..(r + 1) * w.cols].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamBlock;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Compares the tape gradient of every input with central differences.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.constant(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (n, v) in vars.iter().enumerate() {
            let g = tape.grad(*v).cloned().unwrap_or_else(|| Mat::zeros(inputs[n].rows, inputs[n].cols));
            for j in 0..inputs[n].len() {
                let mut plus = inputs.clone();
                plus[n].data[j] += h;
                let mut minus = inputs.clone();
                minus[n].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g.data[j]).abs() / fd.abs().max(g.data[j].abs()).max(1e-3);
                assert!(err < tol, "input {n} entry {j}: tape {} vs fd {fd}", g.data[j]);
            }
        }
    }

    #[test]
    fn two_layer_relu_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            random(5, 4, &mut rng),
            random(6, 4, &mut rng),
            random(1, 6, &mut rng),
            random(1, 6, &mut rng),
            random(1, 1, &mut rng),
        ];
        check(
            inputs,
            |t, v| {
                let h = t.dense(v[0], v[1], Some(v[2])).unwrap();
                let h = t.relu(h);
                let y = t.dense(h, v[3], Some(v[4])).unwrap();
                let y = t.tanh(y);
                t.sum_squares(y)
            },
            1e-4,
        );
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random(7, 2, &mut rng), random(7, 2, &mut rng), random(1, 2, &mut rng)];
        check(
            inputs,
            |t, v| {
                let a = t.softplus(v[0]);
                let b = t.broadcast_rows(v[2], 7);
                let c = t.sub(v[1], b).unwrap();
                let m = t.min(&[a, c, v[1]]).unwrap();
                let d = t.abs(m);
                let e = t.clamp(d, 0.8);
                let s = t.slice_cols(e, 1, 1);
                let cat = t.concat(&[e, s]).unwrap();
                let n = t.neg(cat);
                let sc = t.scale(n, 3.0);
                let mean = t.mean(sc);
                let small = t.mean_smallest(v[0], 5);
                let pool = t.max_pool_rows(v[1]);
                let ps = t.sum(pool);
                let x = t.add(mean, small).unwrap();
                t.add(x, ps).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn transform_and_analytic_sdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [
            PrimitiveKind::Sphere,
            PrimitiveKind::Cylinder,
            PrimitiveKind::HollowCylinder,
            PrimitiveKind::Cuboid,
        ] {
            let params = match kind {
                PrimitiveKind::Sphere => vec![0.5],
                PrimitiveKind::Cylinder => vec![0.4, 0.3],
                PrimitiveKind::HollowCylinder => vec![0.5, 0.1, 0.3],
                PrimitiveKind::Cuboid => vec![0.3, 0.4, 0.2],
            };
            let inputs = vec![
                random(12, 3, &mut rng),
                Mat::row_vector(&[0.3, -0.5, 0.7]),
                Mat::row_vector(&[0.1, 0.05, -0.1]),
                Mat::row_vector(&params),
            ];
            check(
                inputs,
                move |t, v| {
                    let q = t.transform_points(v[0], Some(v[1]), v[2]);
                    let d = t.analytic_sdf(kind, q, v[3]);
                    let d = t.tanh(d);
                    t.sum(d)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let mut w = ParamBlock::zeros("w", 1, 2);
        w.values = vec![1.0, 2.0];
        let wid = store.add(w);
        let mut fz = ParamBlock::zeros("frozen", 1, 2);
        fz.values = vec![3.0, 4.0];
        let fid = store.add(fz);
        let mut t = Tape::new();
        let x = t.constant(Mat::row_vector(&[1.0, -1.0]));
        let wv = t.param(&store, wid, true);
        assert_eq!(t.param(&store, wid, true), wv);
        let fv = t.param(&store, fid, false);
        let a = t.dense(x, wv, None).unwrap();
        let b = t.dense(x, fv, None).unwrap();
        let s = t.add(a, b).unwrap();
        t.backward(s).unwrap();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.get(wid).grads, vec![1.0, -1.0]);
        assert_eq!(store.get(fid).grads, vec![0.0, 0.0]);
    }

    #[test]
    fn ties_and_kinks() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::row_vector(&[0.5, 0.0, 0.1]));
        let b = t.leaf(Mat::row_vector(&[0.5, 1.0, 0.1]));
        let m = t.min(&[a, b]).unwrap();
        let r = t.relu(m);
        let c = t.clamp(r, 0.1);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data, vec![0.0, 0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap().data, vec![0.0, 0.0, 0.0]);

        let mut t = Tape::new();
        let a = t.leaf(Mat::row_vector(&[0.05, 0.0]));
        let b = t.leaf(Mat::row_vector(&[0.05, 1.0]));
        let m = t.min(&[a, b]).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data, vec![1.0, 1.0]);
        assert!(t.grad(b).is_none_or(|g| g.data == vec![0.0, 0.0]));
    }

    #[test]
    fn empty_tape_errors() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn dense_forward_matches_tape() {
        let mut w = ParamBlock::zeros("w", 2, 3);
        w.values = vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut b = ParamBlock::zeros("b", 1, 2);
        b.values = vec![0.1, -0.2];
        let y = dense_forward(&w, &b, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 0.1, 2.0 + 2.0 + 1.5 - 0.2]);
        assert!(dense_forward(&w, &b, &[1.0]).is_err());
    }
}
