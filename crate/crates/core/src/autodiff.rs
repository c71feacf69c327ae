//! Reverse-mode differentiation on a linear tape.
//!
//! Every op records its inputs and a [`Backward`] implementation; gradients
//! are propagated in reverse creation order. Feature maps are laid out as
//! `[channels, depth, rows, cols]` (depth 1 for 2D inputs).

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values available to an op's backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input needs a gradient; `None` may be returned otherwise.
    pub needs: Vec<bool>,
}

pub trait Backward {
    /// One gradient per input, shaped like that input.
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records an op output. The backward rule is dropped when no input
    /// needs a gradient.
    pub fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: impl Backward + 'static) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            inputs,
            op: if needs_grad { Some(Box::new(op)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = &self.nodes[root.0].value;
        assert_eq!(root_val.len(), 1, "backward root must be a scalar");
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect(),
            };
            let input_grads = op.backward(ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[v.0].value.len());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Same-padded stride-1 convolution geometry for one sample.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    dhw: [usize; 3],
    k: [usize; 3],
}

impl ConvGeom {
    fn spatial(&self) -> usize {
        self.dhw.iter().product()
    }

    fn patch(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1]
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.dhw;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let s = g.spatial();
    let mut cols = vec![0.0; g.patch() * s];
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * s..(ci + 1) * s];
        for a in 0..kd as isize {
            for b in 0..kh as isize {
                for c in 0..kw as isize {
                    let dst = &mut cols[row * s..(row + 1) * s];
                    let (dz, dy, dx) = (a - pd, b - ph, c - pw);
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let iz = z as isize + dz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + dy;
                            if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let o = (z * h + y) * w;
                            let src = ((iz as usize) * h + iy as usize) * w;
                            let sx = (x_lo as isize + dx) as usize;
                            dst[o + x_lo..o + x_hi]
                                .copy_from_slice(&plane[src + sx..src + sx + (x_hi - x_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.dhw;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let s = g.spatial();
    let mut x = vec![0.0; g.cin * s];
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut x[ci * s..(ci + 1) * s];
        for a in 0..kd as isize {
            for b in 0..kh as isize {
                for c in 0..kw as isize {
                    let src = &cols[row * s..(row + 1) * s];
                    let (dz, dy, dx) = (a - pd, b - ph, c - pw);
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let iz = z as isize + dz;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + dy;
                            if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let o = (z * h + y) * w;
                            let dst = ((iz as usize) * h + iy as usize) * w;
                            let sx = (x_lo as isize + dx) as usize;
                            for (t, v) in plane[dst + sx..dst + sx + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&src[o + x_lo..o + x_hi])
                            {
                                *t += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

struct ConvOp {
    geom: ConvGeom,
    /// im2col buffer, kept only when the weight needs a gradient.
    cols: Option<Vec<f64>>,
}

impl Backward for ConvOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = &self.geom;
        let (s, kp) = (g.spatial(), g.patch());
        let gout = ctx.grad.data();
        let x = ctx.inputs[0];
        let w = ctx.inputs[1];
        let dx = ctx.needs[0].then(|| {
            if g.is_pointwise() {
                let mut dx = vec![0.0; kp * s];
                gemm(kp, g.cout, s, 1.0, w.data(), true, gout, false, 0.0, &mut dx);
                Tensor::new(x.shape().to_vec(), dx)
            } else {
                let mut dcols = vec![0.0; kp * s];
                gemm(kp, g.cout, s, 1.0, w.data(), true, gout, false, 0.0, &mut dcols);
                Tensor::new(x.shape().to_vec(), col2im(&dcols, g))
            }
        });
        let dw = ctx.needs[1].then(|| {
            let cols: &[f64] = if g.is_pointwise() {
                x.data()
            } else {
                self.cols.as_deref().expect("im2col buffer retained")
            };
            let mut dw = vec![0.0; g.cout * kp];
            gemm(g.cout, s, kp, 1.0, gout, false, cols, true, 0.0, &mut dw);
            Tensor::new(w.shape().to_vec(), dw)
        });
        let mut out = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            let db = ctx.needs[2].then(|| {
                let db = (0..g.cout)
                    .map(|o| gout[o * s..(o + 1) * s].iter().sum())
                    .collect();
                Tensor::new(vec![g.cout], db)
            });
            out.push(db);
        }
        out
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let d = ctx
            .output
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d))]
    }
}

/// `out[i] = x[idx[i]]`.
struct GatherOp {
    idx: Vec<u32>,
}

impl Backward for GatherOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (&i, &g) in self.idx.iter().zip(ctx.grad.data()) {
            dx[i as usize] += g;
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx))]
    }
}

/// Each output is the mean of a set of inputs.
struct MeanGroupsOp {
    /// `(start, len)` into `members` per output element.
    groups: Vec<(u32, u32)>,
    members: Vec<u32>,
}

impl Backward for MeanGroupsOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (&(start, len), &g) in self.groups.iter().zip(ctx.grad.data()) {
            let share = g / len as f64;
            for &m in &self.members[start as usize..(start + len) as usize] {
                dx[m as usize] += share;
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx))]
    }
}

struct ConcatOp {
    split: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad.data();
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape().to_vec(), g[..self.split].to_vec())),
            ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape().to_vec(), g[self.split..].to_vec())),
        ]
    }
}

struct AddOp;

impl Backward for AddOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape().to_vec(), ctx.grad.data().to_vec())),
            ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape().to_vec(), ctx.grad.data().to_vec())),
        ]
    }
}

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.map(|g| g * self.0))]
    }
}

struct MatMulOp {
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMulOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
        // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
        let da = ctx.needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            if self.ta {
                // dA (k x m) = op(B) G^T
                gemm(k, n, m, 1.0, b.data(), self.tb, g, true, 0.0, &mut d);
            } else {
                gemm(m, n, k, 1.0, g, false, b.data(), !self.tb, 0.0, &mut d);
            }
            Tensor::new(a.shape().to_vec(), d)
        });
        let db = ctx.needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            if self.tb {
                // dB (n x k) = G^T op(A)
                gemm(n, m, k, 1.0, g, true, a.data(), self.ta, 0.0, &mut d);
            } else {
                gemm(k, m, n, 1.0, a.data(), !self.ta, g, false, 0.0, &mut d);
            }
            Tensor::new(b.shape().to_vec(), d)
        });
        vec![da, db]
    }
}

struct AddRowBiasOp;

impl Backward for AddRowBiasOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let c = ctx.inputs[1].len();
        let g = ctx.grad.data();
        let db = ctx.needs[1].then(|| {
            let mut db = vec![0.0; c];
            for row in g.chunks_exact(c) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            Tensor::new(ctx.inputs[1].shape().to_vec(), db)
        });
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape().to_vec(), g.to_vec())),
            db,
        ]
    }
}

struct SoftmaxRowsOp;

impl Backward for SoftmaxRowsOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let y = ctx.output;
        let c = y.cols();
        let mut d = vec![0.0; y.len()];
        for ((dr, yr), gr) in d
            .chunks_exact_mut(c)
            .zip(y.data().chunks_exact(c))
            .zip(ctx.grad.data().chunks_exact(c))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d))]
    }
}

struct SumOp;

impl Backward for SumOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad.item();
        ctx.inputs
            .iter()
            .zip(&ctx.needs)
            .map(|(x, &n)| n.then(|| Tensor::new(x.shape().to_vec(), vec![g; x.len()])))
            .collect()
    }
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Nearest-neighbour source index along one axis when resizing `from -> to`.
fn nearest(i: usize, from: usize, to: usize) -> usize {
    (i * from) / to
}

/// Adaptive pooling bin `[start, end)` of cell `i` out of `g` over extent `n`.
pub fn adaptive_bin(i: usize, n: usize, g: usize) -> (usize, usize) {
    let start = (i * n) / g;
    let end = ((i + 1) * n).div_ceil(g);
    (start, end)
}

impl Tape {
    /// Same-padded 3D convolution of `x: [cin, d, h, w]` with
    /// `w: [cout, cin, kd, kh, kw]` and optional bias `[cout]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv input must be [c, d, h, w]");
        assert_eq!(ws.len(), 5, "conv weight must be [cout, cin, kd, kh, kw]");
        assert_eq!(xs[0], ws[1], "conv channel mismatch");
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            dhw: [xs[1], xs[2], xs[3]],
            k: [ws[2], ws[3], ws[4]],
        };
        let s = geom.spatial();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![0.0; geom.cout * s];
        if let Some(b) = b {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * s..(o + 1) * s].fill(bv);
            }
        }
        {
            let colsref: &[f64] = cols.as_deref().unwrap_or(self.value(x).data());
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(
                geom.cout,
                geom.patch(),
                s,
                1.0,
                self.value(w).data(),
                false,
                colsref,
                false,
                beta,
                &mut out,
            );
        }
        let keep_cols = self.needs_grad(w);
        let value = Tensor::new(vec![geom.cout, xs[1], xs[2], xs[3]], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            inputs,
            ConvOp {
                geom,
                cols: if keep_cols { cols } else { None },
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(v, vec![x], ReluOp)
    }

    /// Max pooling of `[c, d, h, w]` by `factors` per spatial axis; ties go
    /// to the first element in scan order.
    pub fn max_pool(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let [c, d, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let [fd, fh, fw] = factors;
        assert!(d % fd == 0 && h % fh == 0 && w % fw == 0, "pool extent not divisible");
        let (od, oh, ow) = (d / fd, h / fh, w / fw);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        let mut idx = Vec::with_capacity(out.capacity());
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0usize;
                        for a in 0..fd {
                            for b in 0..fh {
                                for e in 0..fw {
                                    let i = ((ch * d + z * fd + a) * h + y * fh + b) * w + xx * fw + e;
                                    if data[i] > best {
                                        best = data[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        idx.push(bi as u32);
                    }
                }
            }
        }
        let v = Tensor::new(vec![c, od, oh, ow], out);
        self.push(v, vec![x], GatherOp { idx })
    }

    /// Generic gather `out[i] = x[idx[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, idx: Vec<u32>, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| src[i as usize]).collect();
        self.push(Tensor::new(shape, out), vec![x], GatherOp { idx })
    }

    /// Nearest-neighbour resize of `[c, d, h, w]` to spatial extents `to`.
    pub fn resize_nearest(&mut self, x: Var, to: [usize; 3]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let [c, d, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let [td, th, tw] = to;
        let mut idx = Vec::with_capacity(c * td * th * tw);
        for ch in 0..c {
            for z in 0..td {
                let sz = nearest(z, d, td);
                for y in 0..th {
                    let sy = nearest(y, h, th);
                    let base = ((ch * d + sz) * h + sy) * w;
                    for xx in 0..tw {
                        idx.push((base + nearest(xx, w, tw)) as u32);
                    }
                }
            }
        }
        self.gather(x, idx, vec![c, td, th, tw])
    }

    /// Output element `i` is the mean of `x` at `members[groups[i]]`.
    pub fn mean_groups(&mut self, x: Var, groups: Vec<(u32, u32)>, members: Vec<u32>, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let out: Vec<f64> = groups
            .iter()
            .map(|&(s, l)| {
                let sum: f64 = members[s as usize..(s + l) as usize]
                    .iter()
                    .map(|&m| src[m as usize])
                    .sum();
                sum / l as f64
            })
            .collect();
        self.push(Tensor::new(shape, out), vec![x], MeanGroupsOp { groups, members })
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[1..], sb[1..], "concat trailing shapes differ");
        let mut data = self.value(a).data().to_vec();
        let split = data.len();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        self.push(Tensor::new(shape, data), vec![a, b], ConcatOp { split })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add length mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(va.shape().to_vec(), data);
        self.push(v, vec![a, b], AddOp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, vec![a], ScaleOp(c))
    }

    /// Sum of one-element tensors, accumulated left to right.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let mut s = 0.0;
        for &x in xs {
            s += self.value(x).item();
        }
        self.push(Tensor::scalar(s), xs.to_vec(), SumOp)
    }

    /// Mean of one-element tensors.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Var {
        let s = self.sum_scalars(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// `op(a) * op(b)` for rank-2 values.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = if ta { (va.cols(), va.rows()) } else { (va.rows(), va.cols()) };
        let (k2, n) = if tb { (vb.cols(), vb.rows()) } else { (vb.rows(), vb.cols()) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), ta, vb.data(), tb, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out), vec![a, b], MatMulOp { ta, tb, m, k, n })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Adds bias `[c]` to every row of `x: [r, c]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(b).len();
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), c, "bias length mismatch");
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_exact_mut(c) {
            for (r, bv) in row.iter_mut().zip(&bias) {
                *r += bv;
            }
        }
        self.push(v, vec![x, b], AddRowBiasOp)
    }

    /// Row-wise softmax of a rank-2 value.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = vec![0.0; src.len()];
        for (o, r) in out.chunks_exact_mut(c).zip(src.data().chunks_exact(c)) {
            softmax_into(r, o);
        }
        let v = Tensor::new(src.shape().to_vec(), out);
        self.push(v, vec![x], SoftmaxRowsOp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d sum(out * probe) / d input[which]`.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let probe = rand_tensor(&mut rng, tape.value(out).shape().to_vec());
        let p = tape.constant(probe.clone());
        let n = tape.value(out).len();
        let o = tape.gather(out, (0..n as u32).collect(), vec![1, n]);
        let pp = tape.gather(p, (0..n as u32).collect(), vec![1, n]);
        let loss = tape.matmul_t(o, false, pp, true);
        let grads = tape.backward(loss);
        let f = |ins: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let o = build(&mut t, &vs);
            t.value(o).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for (which, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("grad").clone();
            for i in 0..inputs[which].len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[i] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {which} elem {i}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn conv_3x3_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 1, 4, 5]);
        let w = rand_tensor(&mut rng, vec![3, 2, 1, 3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check(vec![x, w, b], |t, v| t.conv(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn conv_3d_and_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let w = rand_tensor(&mut rng, vec![2, 2, 3, 3, 3]);
        check(vec![x.clone(), w], |t, v| t.conv(v[0], v[1], None));
        let w1 = rand_tensor(&mut rng, vec![4, 2, 1, 1, 1]);
        let b = rand_tensor(&mut rng, vec![4]);
        check(vec![x, w1, b], |t, v| t.conv(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![1, 1, 3, 3]);
        let w = rand_tensor(&mut rng, vec![1, 1, 1, 3, 3]);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv(xv, wv, None);
        for r in 0..3i32 {
            for c in 0..3i32 {
                let mut s = 0.0;
                for a in -1..=1i32 {
                    for b in -1..=1i32 {
                        let (rr, cc) = (r + a, c + b);
                        if (0..3).contains(&rr) && (0..3).contains(&cc) {
                            s += x.data()[(rr * 3 + cc) as usize] * w.data()[((a + 1) * 3 + b + 1) as usize];
                        }
                    }
                }
                assert!((t.value(y).data()[(r * 3 + c) as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_resize_concat_matmul_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![2, 1, 4, 4]);
        check(vec![x.clone()], |t, v| t.max_pool(v[0], [1, 2, 2]));
        check(vec![x.clone()], |t, v| t.resize_nearest(v[0], [1, 8, 8]));
        check(vec![x.clone()], |t, v| t.relu(v[0]));
        let y = rand_tensor(&mut rng, vec![3, 1, 4, 4]);
        check(vec![x, y], |t, v| t.concat(v[0], v[1]));
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        check(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        let at = a.transpose();
        let bt = b.transpose();
        check(vec![at, bt], |t, v| t.matmul_t(v[0], true, v[1], true));
        let bias = rand_tensor(&mut rng, vec![4]);
        check(vec![a.clone(), bias], |t, v| t.add_row_bias(v[0], v[1]));
        check(vec![a], |t, v| t.softmax_rows(v[0]));
    }

    #[test]
    fn max_pool_tie_picks_first() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]), true);
        let y = t.max_pool(x, [1, 2, 2]);
        let idx = (0..1).collect();
        let s = t.gather(y, idx, vec![1]);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient_and_drop_backward() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0), true);
        let c = t.add(a, b);
        let d = t.scale(c, 4.0);
        let g = t.backward(d);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), 4.0);
        let e = t.scale(a, 2.0);
        assert!(!t.needs_grad(e));
    }
}
