//! Teacher pre-training, mixed self-training with graph alignment, EMA
//! teacher updates, checkpoints and CSV logs.
//!
//! One self-training step:
//!
//! 1. the teacher labels the unlabeled images `s`, `t` by argmax and yields
//!    their similarity matrices `A_u` (no gradient);
//! 2. one block mask per pair mixes `(a, b, s, t)` into `p` and `q`;
//! 3. the student runs on `p` and `q`, giving logits, `A_m` and clusters;
//! 4. `total = l_pre + alpha * l_st + beta * l_cl`, where `l_st` pairs
//!    `A_m(p)` with `A_u(t)` and `A_m(q)` with `A_u(s)`;
//! 5. the student takes an optimizer step;
//! 6. the teacher moves toward the student by EMA.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_params, save_checkpoint, CHECKPOINT_METADATA};
pub use optim::{clip_grad_norm, ema_update, Optimizer};

use crate::autodiff::{Tape, Var};
use crate::backbone::{forward_on_tape, forward_segment, init_params, ArchConfig, NetParams};
use crate::datamodel::{ClusterLossNorm, ClusterSource, DatasetSplit, LabelMap, RunConfig, Sample, Volume};
use crate::error::{Error, Result};
use crate::evalreport::evaluate;
use crate::graph::{alignment_distance_op, clustering_loss_op};
use crate::losses::{combined_region_loss_op, prediction_loss_op, total_loss, LossBreakdown, LOSS_CSV_HEADER};
use crate::mixing::{bidirectional_mix, generate_mask, MixSources};
use crate::tensor::Tensor;

/// RNG stream of the pre-training sampler.
pub const PRETRAIN_STREAM: u64 = 1;
/// RNG stream of the self-training sampler.
pub const SELFTRAIN_STREAM: u64 = 2;

pub const VAL_CSV_HEADER: &str = "iteration,network,DICE,Jaccard,95HD,ASD";

/// Network architecture implied by a config and a dataset.
pub fn arch_for(cfg: &RunConfig, split: &DatasetSplit) -> Result<ArchConfig> {
    let dims = split
        .dims()
        .ok_or_else(|| Error::Validation("dataset has no samples".into()))?;
    let arch = ArchConfig::from_run(cfg, split.num_classes, dims.rank());
    arch.validate()?;
    arch.check_input(dims)?;
    Ok(arch)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub arch: ArchConfig,
    pub cfg: RunConfig,
    pub teacher: NetParams,
    pub student: NetParams,
    pub optimizer: Optimizer,
    /// Completed self-training steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossBreakdown>,
    /// Rows of `val_metrics.csv` without header.
    pub val_log: Vec<String>,
}

impl TrainState {
    /// Student initialised as a copy of the teacher.
    pub fn new(cfg: &RunConfig, arch: ArchConfig, teacher: NetParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SELFTRAIN_STREAM);
        TrainState {
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, &teacher),
            arch,
            cfg: cfg.clone(),
            student: teacher.clone(),
            teacher,
            iteration: 0,
            rng,
            history: Vec::new(),
            val_log: Vec::new(),
        }
    }

    pub fn losses_csv(&self) -> String {
        let mut s = format!("{LOSS_CSV_HEADER}\n");
        for (i, b) in self.history.iter().enumerate() {
            s.push_str(&b.csv_row(i as u64 + 1));
            s.push('\n');
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = format!("{VAL_CSV_HEADER}\n");
        for r in &self.val_log {
            s.push_str(r);
            s.push('\n');
        }
        s
    }
}

/// Loss gradients for every parameter, in parameter order.
fn param_grads(tape: &Tape, root: Var, vars: &[Var]) -> Vec<Option<Tensor>> {
    let mut g = tape.backward(root);
    vars.iter().map(|&v| g.take(v)).collect()
}

fn grads_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::is_finite)
}

/// Supervised teacher training on the labeled pool with the full-image
/// combined loss. Returns the parameters and the per-iteration loss.
pub fn pretrain_with_log(cfg: &RunConfig, split: &DatasetSplit) -> Result<(NetParams, Vec<f64>)> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Validation("pretraining needs labeled samples".into()));
    }
    let arch = arch_for(cfg, split)?;
    let mut params = init_params(&arch, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRETRAIN_STREAM);
    let n = split.labeled.len();
    let take = (2 * cfg.batch_size).min(n);
    let mut log = Vec::with_capacity(cfg.pretrain_iters as usize);
    for it in 0..cfg.pretrain_iters {
        let idx = sample(&mut rng, n, take).into_vec();
        let mut tape = Tape::new();
        let pv = params.to_tape(&mut tape, true);
        let mut terms = Vec::with_capacity(take);
        for &i in &idx {
            let s = &split.labeled[i];
            let f = forward_on_tape(&mut tape, &pv, &arch, &s.image)?;
            terms.push(combined_region_loss_op(&mut tape, f.logits, s.gt().data(), None, cfg.region_norm)?);
        }
        let loss = tape.mean_scalars(&terms);
        let value = tape.value(loss).item();
        let mut grads = param_grads(&tape, loss, &pv.vars);
        if !value.is_finite() || !grads_finite(&grads) {
            return Err(Error::NonFinite {
                iteration: it + 1,
                l_pre: value,
                l_st: 0.0,
                l_cl: 0.0,
                batch: idx.iter().map(|&i| split.labeled[i].id.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut params, &grads)?;
        log.push(value);
    }
    Ok((params, log))
}

pub fn pretrain(cfg: &RunConfig, split: &DatasetSplit) -> Result<NetParams> {
    pretrain_with_log(cfg, split).map(|(p, _)| p)
}

/// Per-voxel teacher argmax (ties to the lowest class).
pub fn generate_pseudo_labels(teacher: &NetParams, arch: &ArchConfig, xs: &[Volume]) -> Result<Vec<LabelMap>> {
    forward_segment(xs, teacher, arch)?
        .into_iter()
        .zip(xs)
        .map(|(out, x)| LabelMap::new(x.dims(), x.spacing(), out.argmax(), arch.num_classes))
        .collect()
}

/// Indices of one mixed pair: labeled `a != b`, unlabeled `s != t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub a: usize,
    pub b: usize,
    pub s: usize,
    pub t: usize,
}

pub fn sample_pairs(rng: &mut ChaCha8Rng, n_labeled: usize, n_unlabeled: usize, count: usize) -> Result<Vec<PairIndices>> {
    if n_labeled < 2 || n_unlabeled < 2 {
        return Err(Error::Validation(format!(
            "mixing needs >= 2 labeled and >= 2 unlabeled samples, have {n_labeled} and {n_unlabeled}"
        )));
    }
    Ok((0..count)
        .map(|_| {
            let l = sample(rng, n_labeled, 2);
            let u = sample(rng, n_unlabeled, 2);
            PairIndices {
                a: l.index(0),
                b: l.index(1),
                s: u.index(0),
                t: u.index(1),
            }
        })
        .collect())
}

fn pseudo_sample<'a>(s: &'a Sample, label: &'a LabelMap) -> (&'a str, &'a Volume, &'a LabelMap) {
    (&s.id, &s.image, label)
}

/// Teacher outputs for one unlabeled image.
struct TeacherView {
    pseudo: LabelMap,
    similarity: Option<Tensor>,
    /// Tape handle when the teacher is trained by gradient.
    sim_var: Option<Var>,
}

fn batch_ids(split: &DatasetSplit, pairs: &[PairIndices]) -> String {
    pairs
        .iter()
        .map(|p| {
            format!(
                "a={},b={},s={},t={}",
                split.labeled[p.a].id, split.labeled[p.b].id, split.unlabeled[p.s].id, split.unlabeled[p.t].id
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// One self-training step. Updates the student, then the teacher, and
/// appends the loss breakdown to the history.
pub fn selftrain_step(state: &mut TrainState, split: &DatasetSplit) -> Result<LossBreakdown> {
    let cfg = state.cfg.clone();
    let arch = state.arch.clone();
    let pairs = sample_pairs(&mut state.rng, split.labeled.len(), split.unlabeled.len(), cfg.batch_size)?;
    let graph_on = arch.graph_fusion;

    // (1) teacher on unlabeled images
    let mut t_tape = Tape::new();
    let t_vars = state.teacher.to_tape(&mut t_tape, cfg.teacher_grad && graph_on);
    let teacher_view = |tape: &mut Tape, x: &Sample| -> Result<TeacherView> {
        let f = forward_on_tape(tape, &t_vars, &arch, &x.image)?;
        let pseudo = LabelMap::new(
            x.image.dims(),
            x.image.spacing(),
            crate::backbone::argmax_channels(tape.value(f.logits)),
            arch.num_classes,
        )?;
        let sim_var = f.graph.map(|g| g.similarity);
        Ok(TeacherView {
            pseudo,
            similarity: sim_var.map(|v| tape.value(v).clone()),
            sim_var,
        })
    };
    let mut views = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let vs = teacher_view(&mut t_tape, &split.unlabeled[p.s])?;
        let vt = teacher_view(&mut t_tape, &split.unlabeled[p.t])?;
        views.push((vs, vt));
    }

    // (2) masks and mixing
    let dims = split.labeled[0].image.dims();
    let mut mixed = Vec::with_capacity(pairs.len());
    for (p, (vs, vt)) in pairs.iter().zip(&views) {
        let mask = generate_mask(dims, cfg.mask_ratio, &mut state.rng)?;
        let (la, lb) = (&split.labeled[p.a], &split.labeled[p.b]);
        let src = MixSources {
            a: (&la.id, &la.image, la.gt()),
            b: (&lb.id, &lb.image, lb.gt()),
            s: pseudo_sample(&split.unlabeled[p.s], &vs.pseudo),
            t: pseudo_sample(&split.unlabeled[p.t], &vt.pseudo),
        };
        mixed.push(bidirectional_mix(&src, &mask)?);
    }

    // (3)-(4) student forward and losses
    let mut tape = Tape::new();
    let pv = state.student.to_tape(&mut tape, true);
    let mut pre_terms = Vec::new();
    let mut st_terms = Vec::new();
    let mut cl_terms = Vec::new();
    let mut student_sims = Vec::new();
    for ((mp, mq), (vs, vt)) in mixed.iter().zip(&views) {
        let fp = forward_on_tape(&mut tape, &pv, &arch, &mp.image)?;
        let fq = forward_on_tape(&mut tape, &pv, &arch, &mq.image)?;
        pre_terms.push(prediction_loss_op(
            &mut tape,
            fp.logits,
            &mp.label,
            fq.logits,
            &mq.label,
            &mp.mask,
            cfg.gamma,
            cfg.region_norm,
        )?);
        if let (Some(gp), Some(gq)) = (fp.graph, fq.graph) {
            for (g, view) in [(gp, vt), (gq, vs)] {
                let a_u = view.similarity.clone().expect("teacher graph with fusion enabled");
                let a_u_var = tape.constant(a_u);
                st_terms.push(alignment_distance_op(&mut tape, a_u_var, g.similarity)?);
                let a_cl = match cfg.cluster_source {
                    ClusterSource::Student => g.similarity,
                    ClusterSource::Teacher => a_u_var,
                };
                let cl = clustering_loss_op(&mut tape, a_cl, g.clusters)?;
                cl_terms.push(match cfg.cl_norm {
                    ClusterLossNorm::Sum => cl,
                    ClusterLossNorm::Mean => {
                        let n = tape.value(a_cl).rows() as f64;
                        tape.scale(cl, 1.0 / (n * n))
                    }
                });
                student_sims.push(tape.value(g.similarity).clone());
            }
        }
    }
    let l_pre = tape.mean_scalars(&pre_terms);
    let (l_st, l_cl) = if graph_on {
        (tape.mean_scalars(&st_terms), tape.mean_scalars(&cl_terms))
    } else {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    };
    let st_w = tape.scale(l_st, cfg.alpha);
    let cl_w = tape.scale(l_cl, cfg.beta);
    let partial = tape.add(l_pre, st_w);
    let total = tape.add(partial, cl_w);
    let (vp, vs_, vc) = (tape.value(l_pre).item(), tape.value(l_st).item(), tape.value(l_cl).item());
    let nonfinite = || Error::NonFinite {
        iteration: state.iteration + 1,
        l_pre: vp,
        l_st: vs_,
        l_cl: vc,
        batch: batch_ids(split, &pairs),
    };
    let breakdown = total_loss(vp, vs_, vc, cfg.alpha, cfg.beta, cfg.gamma).map_err(|_| nonfinite())?;
    let mut grads = param_grads(&tape, total, &pv.vars);
    if !grads_finite(&grads) {
        return Err(nonfinite());
    }
    drop(tape);

    // (5) student update
    clip_grad_norm(&mut grads, cfg.grad_clip);
    state.optimizer.step(&mut state.student, &grads)?;

    // optional teacher gradient from alpha * l_st, before EMA
    if cfg.teacher_grad && graph_on && cfg.alpha > 0.0 {
        let mut terms = Vec::with_capacity(student_sims.len());
        let mut k = 0;
        for (vs, vt) in &views {
            for view in [vt, vs] {
                let a_m = t_tape.constant(student_sims[k].clone());
                k += 1;
                let a_u = view.sim_var.expect("teacher graph with fusion enabled");
                terms.push(alignment_distance_op(&mut t_tape, a_u, a_m)?);
            }
        }
        let l = t_tape.mean_scalars(&terms);
        let l = t_tape.scale(l, cfg.alpha);
        let grads = param_grads(&t_tape, l, &t_vars.vars);
        if !grads_finite(&grads) {
            return Err(nonfinite());
        }
        for (p, g) in state.teacher.tensors_mut().iter_mut().zip(&grads) {
            if let Some(g) = g {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= cfg.lr * gv;
                }
            }
        }
    }

    // (6) EMA
    ema_update(&mut state.teacher, &state.student, cfg.lambda_ema)?;
    state.iteration += 1;
    state.history.push(breakdown);
    Ok(breakdown)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Validation rows for student and teacher at the current iteration.
pub fn validation_rows(state: &TrainState, split: &DatasetSplit) -> Result<Vec<String>> {
    if split.validation.is_empty() {
        return Ok(Vec::new());
    }
    let digest = state.cfg.digest();
    let ck = format!("iter{}", state.iteration);
    let mut rows = Vec::new();
    for (name, p) in [("student", &state.student), ("teacher", &state.teacher)] {
        let r = evaluate(p, &state.arch, &split.validation, &digest, &ck)?;
        let mut s = String::new();
        write!(
            s,
            "{},{name},{:.6},{:.6},{:.6},{:.6}",
            state.iteration, r.mean.dice, r.mean.jaccard, r.mean.hd95, r.mean.asd
        )
        .unwrap();
        rows.push(s);
    }
    Ok(rows)
}

/// Runs steps until `cfg.selftrain_iters`, checkpointing every
/// `cfg.checkpoint_every` steps when `out` is given.
pub fn continue_selftrain(mut state: TrainState, split: &DatasetSplit, out: Option<&Path>) -> Result<TrainState> {
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
    }
    let every = state.cfg.checkpoint_every;
    while state.iteration < state.cfg.selftrain_iters {
        let b = selftrain_step(&mut state, split)?;
        if state.iteration % 50 == 0 {
            log::info!(
                "selftrain {} l_pre={:.4} l_st={:.4} l_cl={:.4}",
                state.iteration,
                b.l_pre,
                b.l_st,
                b.l_cl
            );
        }
        if every > 0 && state.iteration % every == 0 {
            let rows = validation_rows(&state, split)?;
            state.val_log.extend(rows);
            if let Some(o) = out {
                save_checkpoint(&state, o.join("checkpoints").join(format!("iter_{:06}", state.iteration)))?;
                write_file(&o.join("losses.csv"), &state.losses_csv())?;
                write_file(&o.join("val_metrics.csv"), &state.val_csv())?;
            }
        }
    }
    if let Some(o) = out {
        if every == 0 || state.iteration % every != 0 {
            let rows = validation_rows(&state, split)?;
            state.val_log.extend(rows);
        }
        save_checkpoint(&state, o.join("final"))?;
        write_file(&o.join("losses.csv"), &state.losses_csv())?;
        write_file(&o.join("val_metrics.csv"), &state.val_csv())?;
    }
    Ok(state)
}

/// Self-training from a pre-trained teacher; the student starts as a copy.
pub fn run_selftrain(cfg: &RunConfig, split: &DatasetSplit, teacher_init: &NetParams, out: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    let arch = arch_for(cfg, split)?;
    let reference = init_params(&arch, 0)?;
    teacher_init.check_structure(&reference)?;
    continue_selftrain(TrainState::new(cfg, arch, teacher_init.clone()), split, out)
}

/// Continues a run from a checkpoint directory up to `cfg.selftrain_iters`
/// of the checkpointed config.
pub fn resume_selftrain(checkpoint: &Path, split: &DatasetSplit, out: Option<&Path>) -> Result<TrainState> {
    let state = load_checkpoint(checkpoint)?;
    continue_selftrain(state, split, out)
}

/// Pre-training followed by self-training. Writes `pretrain_losses.csv`,
/// the pre-trained teacher and the self-training outputs under `out`.
pub fn train(cfg: &RunConfig, split: &DatasetSplit, out: Option<&Path>) -> Result<TrainState> {
    let (teacher, log) = pretrain_with_log(cfg, split)?;
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        write_file(&o.join("pretrain_losses.csv"), &pretrain_csv(&log))?;
        let arch = arch_for(cfg, split)?;
        save_checkpoint(&TrainState::new(cfg, arch, teacher.clone()), o.join("pretrained"))?;
    }
    run_selftrain(cfg, split, &teacher, out)
}

pub fn pretrain_csv(log: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, v) in log.iter().enumerate() {
        writeln!(s, "{},{v:?}", i + 1).unwrap();
    }
    s
}
