//! Voxel feature graphs: node pooling, shifted pairwise similarity,
//! teacher/student alignment distance, GCN aggregation, soft clustering and
//! the correlation clustering loss.
//!
//! Every operation exists as a plain function on [`Tensor`]s and as a tape op
//! (`*_op`) whose forward pass calls the plain function.

use crate::autodiff::{adaptive_bin, Backward, BackwardCtx, Tape, Var};
use crate::datamodel::GcnNorm;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Which network and input a graph was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphSource {
    TeacherUnlabeled,
    StudentMixed,
}

/// Node features `G` (N x d) with their shifted similarity matrix `A` (N x N).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGraph {
    pub nodes: Tensor,
    pub similarity: Tensor,
    pub source: GraphSource,
}

impl VoxelGraph {
    pub fn build(nodes: Tensor, mu: f64, source: GraphSource) -> Result<Self> {
        let similarity = pairwise_similarity(&nodes, mu)?;
        Ok(VoxelGraph {
            nodes,
            similarity,
            source,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.rows()
    }
}

/// Row-stochastic soft assignment of N nodes to K clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment(pub Tensor);

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.0.cols()
    }

    /// Most probable cluster per node (ties to the lowest index).
    pub fn hard(&self) -> Vec<usize> {
        let k = self.0.cols();
        self.0
            .data()
            .chunks_exact(k)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Two-layer softmax perceptron weights `d' -> hidden -> K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn check_square(a: &Tensor, what: &str) -> Result<usize> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(shape_err(format!("{what} must be square, got {:?}", a.shape())));
    }
    Ok(a.rows())
}

/// Adaptive-average cells of a `[c, d, h, w]` map on a `g`-per-axis grid
/// (depth is only gridded when `d > 1`). Returns `(groups, members)` over
/// spatial offsets and the node count.
fn grid_cells(dhw: [usize; 3], g: usize) -> Result<(Vec<(usize, usize)>, Vec<usize>, usize)> {
    let [d, h, w] = dhw;
    let gd = if d > 1 { g } else { 1 };
    if g == 0 || h < g || w < g || d < gd {
        return Err(shape_err(format!(
            "grid size {g} larger than spatial extent {:?}",
            dhw
        )));
    }
    let mut groups = Vec::with_capacity(gd * g * g);
    let mut members = Vec::new();
    for cz in 0..gd {
        let (z0, z1) = adaptive_bin(cz, d, gd);
        for cy in 0..g {
            let (y0, y1) = adaptive_bin(cy, h, g);
            for cx in 0..g {
                let (x0, x1) = adaptive_bin(cx, w, g);
                let start = members.len();
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            members.push((z * h + y) * w + x);
                        }
                    }
                }
                groups.push((start, members.len() - start));
            }
        }
    }
    Ok((groups, members, gd * g * g))
}

fn feature_dims(x: &Tensor) -> Result<(usize, [usize; 3])> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err(format!("feature map must be [c, d, h, w], got {s:?}")));
    }
    Ok((s[0], [s[1], s[2], s[3]]))
}

/// Adaptive average pooling of a `[c, d, h, w]` feature map onto a `g x g`
/// grid (`g^3` for volumetric maps). Row `n` of the result is the channel
/// vector of cell `n`.
pub fn pool_to_grid(features: &Tensor, g: usize) -> Result<Tensor> {
    let (c, dhw) = feature_dims(features)?;
    let (groups, members, n) = grid_cells(dhw, g)?;
    let s: usize = dhw.iter().product();
    let x = features.data();
    let mut out = vec![0.0; n * c];
    for (cell, &(start, len)) in groups.iter().enumerate() {
        for ch in 0..c {
            let plane = &x[ch * s..(ch + 1) * s];
            let sum: f64 = members[start..start + len].iter().map(|&m| plane[m]).sum();
            out[cell * c + ch] = sum / len as f64;
        }
    }
    Ok(Tensor::matrix(n, c, out))
}

pub fn pool_to_grid_op(tape: &mut Tape, x: Var, g: usize) -> Result<Var> {
    let (c, dhw) = feature_dims(tape.value(x))?;
    let (cells, members, n) = grid_cells(dhw, g)?;
    let s: usize = dhw.iter().product();
    let mut groups = Vec::with_capacity(n * c);
    let mut flat = Vec::with_capacity(members.len() * c);
    for &(start, len) in &cells {
        for ch in 0..c {
            let st = flat.len();
            flat.extend(members[start..start + len].iter().map(|&m| (ch * s + m) as u32));
            groups.push((st as u32, len as u32));
        }
    }
    Ok(tape.mean_groups(x, groups, flat, vec![n, c]))
}

/// Broadcasts node rows `[N, c]` back onto a `[c, d, h, w]` map by
/// nearest-neighbour lookup of each voxel's grid cell.
pub fn grid_to_map_op(tape: &mut Tape, nodes: Var, g: usize, dhw: [usize; 3]) -> Result<Var> {
    let v = tape.value(nodes);
    let c = v.cols();
    let [d, h, w] = dhw;
    let gd = if d > 1 { g } else { 1 };
    if v.rows() != gd * g * g {
        return Err(shape_err(format!(
            "{} node rows do not form a grid of side {g}",
            v.rows()
        )));
    }
    let mut idx = Vec::with_capacity(c * d * h * w);
    for ch in 0..c {
        for z in 0..d {
            let cz = z * gd / d;
            for y in 0..h {
                let cy = y * g / h;
                for x in 0..w {
                    let cx = x * g / w;
                    let cell = (cz * g + cy) * g + cx;
                    idx.push((cell * c + ch) as u32);
                }
            }
        }
    }
    Ok(tape.gather(nodes, idx, vec![c, d, h, w]))
}

/// Index of the first maximal entry.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn gram(g: &Tensor) -> Tensor {
    let (n, d) = (g.rows(), g.cols());
    let mut out = vec![0.0; n * n];
    gemm(n, d, n, 1.0, g.data(), false, g.data(), true, 0.0, &mut out);
    Tensor::matrix(n, n, out)
}

/// `A = G G^T - max(G G^T) / mu`, with the max taken over all entries of
/// this sample's Gram matrix.
pub fn pairwise_similarity(g: &Tensor, mu: f64) -> Result<Tensor> {
    pairwise_similarity_with_argmax(g, mu).map(|(a, _)| a)
}

fn pairwise_similarity_with_argmax(g: &Tensor, mu: f64) -> Result<(Tensor, usize)> {
    if g.shape().len() != 2 || g.rows() == 0 {
        return Err(shape_err(format!("node matrix must be N x d with N >= 1, got {:?}", g.shape())));
    }
    if !(mu > 0.0) {
        return Err(Error::Validation(format!("mu must be > 0, got {mu}")));
    }
    if !g.is_finite() {
        return Err(Error::Validation("non-finite node features".into()));
    }
    let mut a = gram(g);
    let am = argmax(a.data());
    let shift = a.data()[am] / mu;
    for v in a.data_mut() {
        *v -= shift;
    }
    Ok((a, am))
}

struct PairwiseSimOp {
    mu: f64,
    argmax: usize,
}

impl Backward for PairwiseSimOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.inputs[0];
        let (n, d) = (g.rows(), g.cols());
        let da = ctx.grad.data();
        // (dA + dA^T) G
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = da[i * n + j] + da[j * n + i];
            }
        }
        let mut dg = vec![0.0; n * d];
        gemm(n, n, d, 1.0, &sym, false, g.data(), false, 0.0, &mut dg);
        // max subgradient: d(G_p . G_q) = G_q at row p, G_p at row q.
        let s: f64 = da.iter().sum::<f64>() / self.mu;
        let (p, q) = (self.argmax / n, self.argmax % n);
        let gd = g.data();
        for k in 0..d {
            dg[p * d + k] -= s * gd[q * d + k];
            dg[q * d + k] -= s * gd[p * d + k];
        }
        vec![Some(Tensor::matrix(n, d, dg))]
    }
}

pub fn pairwise_similarity_op(tape: &mut Tape, g: Var, mu: f64) -> Result<Var> {
    let (a, am) = pairwise_similarity_with_argmax(tape.value(g), mu)?;
    Ok(tape.push(a, vec![g], PairwiseSimOp { mu, argmax: am }))
}

/// Mean absolute elementwise difference of two similarity matrices.
pub fn alignment_distance(a_u: &Tensor, a_m: &Tensor) -> Result<f64> {
    if a_u.shape() != a_m.shape() {
        return Err(shape_err(format!(
            "alignment of {:?} against {:?}",
            a_u.shape(),
            a_m.shape()
        )));
    }
    let n2 = a_u.len() as f64;
    let sum: f64 = a_u.data().iter().zip(a_m.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / n2)
}

struct AlignOp;

impl Backward for AlignOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let scale = ctx.grad.item() / a.len() as f64;
        let da: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let diff = x - y;
                if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        let db = ctx.needs[1].then(|| Tensor::new(b.shape().to_vec(), da.iter().map(|v| -v).collect()));
        vec![ctx.needs[0].then(|| Tensor::new(a.shape().to_vec(), da)), db]
    }
}

/// Alignment distance between a teacher matrix `a_u` and student matrix
/// `a_m`; gradients flow into whichever side needs them.
pub fn alignment_distance_op(tape: &mut Tape, a_u: Var, a_m: Var) -> Result<Var> {
    let d = alignment_distance(tape.value(a_u), tape.value(a_m))?;
    Ok(tape.push(Tensor::scalar(d), vec![a_u, a_m], AlignOp))
}

fn row_softmax(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = vec![0.0; a.len()];
    for (o, r) in out.chunks_exact_mut(c).zip(a.data().chunks_exact(c)) {
        crate::autodiff::softmax_into(r, o);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Single GCN layer `relu(A G W)`.
pub fn gcn_forward(a: &Tensor, g: &Tensor, w: &Tensor, norm: GcnNorm) -> Result<Tensor> {
    let n = check_square(a, "adjacency")?;
    if g.shape().len() != 2 || g.rows() != n || w.shape().len() != 2 || w.rows() != g.cols() {
        return Err(shape_err(format!(
            "gcn shapes A {:?}, G {:?}, W {:?}",
            a.shape(),
            g.shape(),
            w.shape()
        )));
    }
    let adj = match norm {
        GcnNorm::None => a.clone(),
        GcnNorm::RowSoftmax => row_softmax(a),
    };
    Ok(adj.matmul(g).matmul(w).map(|v| if v > 0.0 { v } else { 0.0 }))
}

pub fn gcn_forward_op(tape: &mut Tape, a: Var, g: Var, w: Var, norm: GcnNorm) -> Result<Var> {
    let n = check_square(tape.value(a), "adjacency")?;
    let (gv, wv) = (tape.value(g), tape.value(w));
    if gv.rows() != n || wv.rows() != gv.cols() {
        return Err(shape_err(format!(
            "gcn shapes A {n}x{n}, G {:?}, W {:?}",
            gv.shape(),
            wv.shape()
        )));
    }
    let adj = match norm {
        GcnNorm::None => a,
        GcnNorm::RowSoftmax => tape.softmax_rows(a),
    };
    let ag = tape.matmul(adj, g);
    let agw = tape.matmul(ag, w);
    Ok(tape.relu(agw))
}

fn check_head(gh: &Tensor, head_shapes: [&[usize]; 4]) -> Result<()> {
    let [w1, b1, w2, b2] = head_shapes;
    let ok = w1.len() == 2
        && w2.len() == 2
        && gh.shape().len() == 2
        && w1[0] == gh.cols()
        && b1 == [w1[1]]
        && w2[0] == w1[1]
        && b2 == [w2[1]];
    if !ok {
        return Err(shape_err(format!(
            "cluster head shapes {:?}/{:?}/{:?}/{:?} for input {:?}",
            w1,
            b1,
            w2,
            b2,
            gh.shape()
        )));
    }
    Ok(())
}

/// Soft cluster assignment `softmax(relu(Ĝ W1 + b1) W2 + b2)`.
pub fn cluster_assign(g_hat: &Tensor, head: &ClusterHead) -> Result<ClusterAssignment> {
    check_head(
        g_hat,
        [head.w1.shape(), head.b1.shape(), head.w2.shape(), head.b2.shape()],
    )?;
    let mut h = g_hat.matmul(&head.w1);
    let hidden = head.b1.len();
    for row in h.data_mut().chunks_exact_mut(hidden) {
        for (v, b) in row.iter_mut().zip(head.b1.data()) {
            *v = (*v + b).max(0.0);
        }
    }
    let logits = h.matmul(&head.w2);
    let k = head.b2.len();
    let mut out = vec![0.0; logits.len()];
    let mut shifted = vec![0.0; k];
    for (o, r) in out.chunks_exact_mut(k).zip(logits.data().chunks_exact(k)) {
        for ((s, v), b) in shifted.iter_mut().zip(r).zip(head.b2.data()) {
            *s = v + b;
        }
        crate::autodiff::softmax_into(&shifted, o);
    }
    Ok(ClusterAssignment(Tensor::new(logits.shape().to_vec(), out)))
}

/// Tape version of [`cluster_assign`]; `head` is `[w1, b1, w2, b2]`.
pub fn cluster_assign_op(tape: &mut Tape, g_hat: Var, head: [Var; 4]) -> Result<Var> {
    check_head(
        tape.value(g_hat),
        [
            tape.value(head[0]).shape(),
            tape.value(head[1]).shape(),
            tape.value(head[2]).shape(),
            tape.value(head[3]).shape(),
        ],
    )?;
    let h = tape.matmul(g_hat, head[0]);
    let h = tape.add_row_bias(h, head[1]);
    let h = tape.relu(h);
    let l = tape.matmul(h, head[2]);
    let l = tape.add_row_bias(l, head[3]);
    Ok(tape.softmax_rows(l))
}

/// Correlation clustering loss `-Tr(A C C^T)`.
pub fn clustering_loss(a: &Tensor, c: &Tensor) -> Result<f64> {
    let n = check_square(a, "similarity")?;
    if c.shape().len() != 2 || c.rows() != n {
        return Err(shape_err(format!(
            "assignment {:?} does not match {n} nodes",
            c.shape()
        )));
    }
    // Tr(A C C^T) = sum_ij A_ij (C C^T)_ji and C C^T is symmetric.
    let cct = c.matmul(&c.transpose());
    let s: f64 = a.data().iter().zip(cct.data()).map(|(x, y)| x * y).sum();
    Ok(-s)
}

struct ClusterLossOp;

impl Backward for ClusterLossOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, c) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.item();
        let (n, k) = (c.rows(), c.cols());
        let da = ctx.needs[0].then(|| {
            let mut cct = vec![0.0; n * n];
            gemm(n, k, n, -g, c.data(), false, c.data(), true, 0.0, &mut cct);
            Tensor::matrix(n, n, cct)
        });
        let dc = ctx.needs[1].then(|| {
            let mut sym = vec![0.0; n * n];
            let ad = a.data();
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = ad[i * n + j] + ad[j * n + i];
                }
            }
            let mut dc = vec![0.0; n * k];
            gemm(n, n, k, -g, &sym, false, c.data(), false, 0.0, &mut dc);
            Tensor::matrix(n, k, dc)
        });
        vec![da, dc]
    }
}

pub fn clustering_loss_op(tape: &mut Tape, a: Var, c: Var) -> Result<Var> {
    let l = clustering_loss(tape.value(a), tape.value(c))?;
    Ok(tape.push(Tensor::scalar(l), vec![a, c], ClusterLossOp))
}
