//! Desk-scale U-Net with a graph branch at one encoder stage.
//!
//! Encoder stage `k` (1-based) has `base * 2^(k-1)` channels and runs two
//! 3x3 convolutions with ReLU; every stage after the first starts with a 2x
//! max-pool. The decoder mirrors it with nearest upsampling, skip
//! concatenation and two convolutions per stage, then a 1x1 convolution to
//! class logits.
//!
//! With the graph branch enabled, the output of the tap stage is pooled onto
//! a grid of nodes `G`, turned into the similarity matrix `A`, aggregated by
//! one GCN layer into `Ĝ`, projected back to the stage's channel count,
//! broadcast onto the stage's extent and added to the stage output. The sum
//! replaces the stage output both as skip connection and as input of the
//! next stage. `Ĝ` also feeds the cluster head.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{Dims, GcnNorm, RunConfig, Volume};
use crate::error::{Error, Result};
use crate::graph::{
    cluster_assign_op, gcn_forward_op, grid_to_map_op, pairwise_similarity_op, pool_to_grid_op,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    /// 2 or 3.
    pub rank: usize,
    pub tap_layer: usize,
    pub graph_fusion: bool,
    pub grid_size: usize,
    pub mu: f64,
    pub gcn_norm: GcnNorm,
    pub num_clusters: usize,
    pub cluster_hidden: usize,
}

impl ArchConfig {
    pub fn from_run(cfg: &RunConfig, num_classes: usize, rank: usize) -> Self {
        ArchConfig {
            encoder_depth: cfg.encoder_depth,
            base_channels: cfg.base_channels,
            num_classes,
            rank,
            tap_layer: cfg.tap_layer,
            graph_fusion: cfg.graph_fusion,
            grid_size: cfg.grid_size,
            mu: cfg.mu,
            gcn_norm: cfg.gcn_norm,
            num_clusters: cfg.clusters_for(num_classes),
            cluster_hidden: cfg.cluster_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be >= 1".into());
        }
        if !(1..=self.encoder_depth).contains(&self.tap_layer) {
            return bad(format!(
                "tap_layer {} outside 1..={}",
                self.tap_layer, self.encoder_depth
            ));
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return bad("base_channels must be >= 1 and num_classes >= 2".into());
        }
        if self.rank != 2 && self.rank != 3 {
            return bad(format!("rank {} is not 2 or 3", self.rank));
        }
        if self.grid_size == 0 || self.num_clusters == 0 || self.cluster_hidden == 0 {
            return bad("grid_size, num_clusters and cluster_hidden must be >= 1".into());
        }
        if !(self.mu > 0.0) {
            return bad(format!("mu {} must be > 0", self.mu));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Width `d'` of the GCN output.
    pub fn graph_width(&self) -> usize {
        self.channels(self.tap_layer)
    }

    fn kernel(&self) -> [usize; 3] {
        if self.rank == 3 {
            [3, 3, 3]
        } else {
            [1, 3, 3]
        }
    }

    fn pool_factors(&self) -> [usize; 3] {
        if self.rank == 3 {
            [2, 2, 2]
        } else {
            [1, 2, 2]
        }
    }

    /// Errors unless every pooled axis is divisible by `2^(depth-1)`.
    pub fn check_input(&self, dims: Dims) -> Result<()> {
        if dims.rank() != self.rank {
            return Err(Error::Shape(format!(
                "input rank {} but network rank {}",
                dims.rank(),
                self.rank
            )));
        }
        let f = 1usize << (self.encoder_depth - 1);
        if dims.extents().iter().any(|&e| e % f != 0) {
            return Err(Error::Shape(format!(
                "input extents {:?} not divisible by {f}",
                dims.extents()
            )));
        }
        Ok(())
    }

    /// Node grid side actually used at a tap of spatial extent `dhw`.
    pub fn effective_grid(&self, dhw: [usize; 3]) -> usize {
        let mut g = self.grid_size.min(dhw[1]).min(dhw[2]);
        if dhw[0] > 1 {
            g = g.min(dhw[0]);
        }
        g
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Names of the graph-fusion weights zeroed for the inert-branch check.
pub const FUSION_WEIGHTS: [&str; 2] = ["graph.w_g", "graph.w_proj"];

impl NetParams {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (n, t)) in entries.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(NetParams {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Same names, order and shapes.
    pub fn same_structure(&self, other: &NetParams) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_structure(&self, other: &NetParams) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Validation("parameter lists differ in names or shapes".into()))
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Euclidean distance over all scalars.
    pub fn distance(&self, other: &NetParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Sets the GCN and projection weights to zero.
    pub fn zero_fusion_weights(&mut self) {
        for n in FUSION_WEIGHTS {
            if let Some(t) = self.get_mut(n) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles of a [`NetParams`], in the same order.
pub struct ParamVars {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }
}

enum Init {
    /// Normal with std `sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Zero,
}

fn layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let [kd, kh, kw] = arch.kernel();
    let taps = kd * kh * kw;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: String, cin: usize, cout: usize| {
        out.push((
            format!("{name}.w"),
            vec![cout, cin, kd, kh, kw],
            Init::FanIn {
                fan_in: cin * taps,
                gain: 2.0,
            },
        ));
        out.push((format!("{name}.b"), vec![cout], Init::Zero));
    };
    let mut cin = 1;
    for k in 1..=arch.encoder_depth {
        let c = arch.channels(k);
        conv(&mut out, format!("enc{k}.conv1"), cin, c);
        conv(&mut out, format!("enc{k}.conv2"), c, c);
        cin = c;
    }
    for k in (1..arch.encoder_depth).rev() {
        let c = arch.channels(k);
        conv(&mut out, format!("dec{k}.conv1"), arch.channels(k + 1) + c, c);
        conv(&mut out, format!("dec{k}.conv2"), c, c);
    }
    let c1 = arch.channels(1);
    out.push((
        "head.w".into(),
        vec![arch.num_classes, c1, 1, 1, 1],
        Init::FanIn { fan_in: c1, gain: 1.0 },
    ));
    out.push(("head.b".into(), vec![arch.num_classes], Init::Zero));
    let ct = arch.channels(arch.tap_layer);
    let dp = arch.graph_width();
    let h = arch.cluster_hidden;
    let k = arch.num_clusters;
    out.push((
        "graph.w_g".into(),
        vec![ct, dp],
        Init::FanIn { fan_in: ct, gain: 2.0 },
    ));
    out.push((
        "graph.w_proj".into(),
        vec![dp, ct],
        Init::FanIn { fan_in: dp, gain: 1.0 },
    ));
    out.push(("cluster.w1".into(), vec![dp, h], Init::FanIn { fan_in: dp, gain: 2.0 }));
    out.push(("cluster.b1".into(), vec![h], Init::Zero));
    out.push(("cluster.w2".into(), vec![h, k], Init::FanIn { fan_in: h, gain: 1.0 }));
    out.push(("cluster.b2".into(), vec![k], Init::Zero));
    out
}

/// Fan-in scaled normal weights and zero biases, drawn in layout order from
/// one seeded stream.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<NetParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = layout(arch)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::FanIn { fan_in, gain } => {
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            (name, Tensor::new(shape, data))
        })
        .collect();
    NetParams::from_entries(entries)
}

/// Tape handles of one sample's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    /// `[M, d, h, w]`.
    pub logits: Var,
    /// Tap stage output before fusion, `[C, d, h, w]`.
    pub tap: Var,
    pub graph: Option<TapeGraph>,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeGraph {
    pub nodes: Var,
    pub similarity: Var,
    pub g_hat: Var,
    pub clusters: Var,
}

fn volume_to_tensor(x: &Volume) -> Tensor {
    let [d, h, w] = x.dims().dhw();
    Tensor::new(vec![1, d, h, w], x.to_f64())
}

fn conv_block(tape: &mut Tape, p: &ParamVars, name: &str, x: Var) -> Var {
    let a = tape.conv(x, p.get(&format!("{name}.conv1.w")), Some(p.get(&format!("{name}.conv1.b"))));
    let a = tape.relu(a);
    let b = tape.conv(a, p.get(&format!("{name}.conv2.w")), Some(p.get(&format!("{name}.conv2.b"))));
    tape.relu(b)
}

fn spatial(tape: &Tape, v: Var) -> [usize; 3] {
    let s = tape.value(v).shape();
    [s[1], s[2], s[3]]
}

/// Graph products of a tap feature map: nodes, similarity, GCN output and
/// cluster assignment.
pub fn graph_branch(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, tap: Var) -> Result<TapeGraph> {
    let g = arch.effective_grid(spatial(tape, tap));
    let nodes = pool_to_grid_op(tape, tap, g)?;
    let similarity = pairwise_similarity_op(tape, nodes, arch.mu)?;
    let g_hat = gcn_forward_op(tape, similarity, nodes, p.get("graph.w_g"), arch.gcn_norm)?;
    let clusters = cluster_assign_op(
        tape,
        g_hat,
        [
            p.get("cluster.w1"),
            p.get("cluster.b1"),
            p.get("cluster.w2"),
            p.get("cluster.b2"),
        ],
    )?;
    Ok(TapeGraph {
        nodes,
        similarity,
        g_hat,
        clusters,
    })
}

/// Encoder up to and including stage `upto`, returning every stage output.
/// No fusion is applied.
pub fn encode_on_tape(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, x: &Volume, upto: usize) -> Result<Vec<Var>> {
    arch.check_input(x.dims())?;
    let mut cur = tape.constant(volume_to_tensor(x));
    let mut outs = Vec::with_capacity(upto);
    for k in 1..=upto {
        if k > 1 {
            cur = tape.max_pool(cur, arch.pool_factors());
        }
        cur = conv_block(tape, p, &format!("enc{k}"), cur);
        outs.push(cur);
    }
    Ok(outs)
}

/// Full forward pass of one sample on `tape`.
pub fn forward_on_tape(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, x: &Volume) -> Result<TapeForward> {
    arch.check_input(x.dims())?;
    let mut cur = tape.constant(volume_to_tensor(x));
    let mut skips = Vec::with_capacity(arch.encoder_depth);
    let mut tap = None;
    let mut graph = None;
    for k in 1..=arch.encoder_depth {
        if k > 1 {
            cur = tape.max_pool(cur, arch.pool_factors());
        }
        cur = conv_block(tape, p, &format!("enc{k}"), cur);
        if k == arch.tap_layer {
            tap = Some(cur);
            if arch.graph_fusion {
                let gr = graph_branch(tape, p, arch, cur)?;
                let proj = tape.matmul(gr.g_hat, p.get("graph.w_proj"));
                let g = arch.effective_grid(spatial(tape, cur));
                let map = grid_to_map_op(tape, proj, g, spatial(tape, cur))?;
                cur = tape.add(cur, map);
                graph = Some(gr);
            }
        }
        skips.push(cur);
    }
    for k in (1..arch.encoder_depth).rev() {
        let skip = skips[k - 1];
        let up = tape.resize_nearest(cur, spatial(tape, skip));
        let cat = tape.concat(up, skip);
        cur = conv_block(tape, p, &format!("dec{k}"), cat);
    }
    let logits = tape.conv(cur, p.get("head.w"), Some(p.get("head.b")));
    Ok(TapeForward {
        logits,
        tap: tap.expect("tap layer within depth"),
        graph,
    })
}

/// Graph products materialised from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOutput {
    pub nodes: Tensor,
    pub similarity: Tensor,
    pub g_hat: Tensor,
    pub clusters: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[M, d, h, w]`.
    pub logits: Tensor,
    pub tap_features: Tensor,
    pub graph: Option<GraphOutput>,
}

impl ForwardOutput {
    /// Per-voxel argmax over classes, ties to the lowest class.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_channels(&self.logits)
    }

    /// Channel softmax, same layout as the logits.
    pub fn probabilities(&self) -> Tensor {
        let m = self.logits.rows();
        let s = self.logits.cols();
        let src = self.logits.data();
        let mut out = vec![0.0; m * s];
        let mut row = vec![0.0; m];
        let mut p = vec![0.0; m];
        for i in 0..s {
            for c in 0..m {
                row[c] = src[c * s + i];
            }
            crate::autodiff::softmax_into(&row, &mut p);
            for c in 0..m {
                out[c * s + i] = p[c];
            }
        }
        Tensor::new(self.logits.shape().to_vec(), out)
    }
}

/// Per-voxel argmax of a `[M, ...]` tensor, ties to the lowest channel.
pub fn argmax_channels(logits: &Tensor) -> Vec<u8> {
    let m = logits.rows();
    let s = logits.cols();
    let d = logits.data();
    (0..s)
        .map(|i| {
            let mut best = 0;
            for c in 1..m {
                if d[c * s + i] > d[best * s + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Forward pass without gradient bookkeeping, one output per input.
pub fn forward_segment(xs: &[Volume], params: &NetParams, arch: &ArchConfig) -> Result<Vec<ForwardOutput>> {
    xs.iter()
        .map(|x| {
            let mut tape = Tape::new();
            let p = params.to_tape(&mut tape, false);
            let f = forward_on_tape(&mut tape, &p, arch, x)?;
            Ok(ForwardOutput {
                logits: tape.value(f.logits).clone(),
                tap_features: tape.value(f.tap).clone(),
                graph: f.graph.map(|g| GraphOutput {
                    nodes: tape.value(g.nodes).clone(),
                    similarity: tape.value(g.similarity).clone(),
                    g_hat: tape.value(g.g_hat).clone(),
                    clusters: tape.value(g.clusters).clone(),
                }),
            })
        })
        .collect()
}

/// Deepest encoder features and the tap features, without fusion.
pub fn encode(x: &Volume, params: &NetParams, arch: &ArchConfig) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let outs = encode_on_tape(&mut tape, &p, arch, x, arch.encoder_depth)?;
    Ok((
        tape.value(*outs.last().expect("depth >= 1")).clone(),
        tape.value(outs[arch.tap_layer - 1]).clone(),
    ))
}
