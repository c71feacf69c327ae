//! Tape gradients of the three loss terms against central differences.

mod common;

use common::{gradient_error, rand_labels, rand_mask, rand_matrix, rand_tensor, rand_volume, rng};
use pairseg::autodiff::Tape;
use pairseg::backbone::{forward_on_tape, init_params, ArchConfig, NetParams};
use pairseg::datamodel::{Dims, GcnNorm, RegionNorm, RunConfig};
use pairseg::graph::{
    alignment_distance_op, cluster_assign_op, clustering_loss_op, gcn_forward_op, pairwise_similarity_op,
};
use pairseg::losses::prediction_loss_op;
use pairseg::tensor::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn alignment_loss_gradient() {
    let mut r = rng(10);
    for _ in 0..20 {
        let inputs = [rand_matrix(&mut r, 4, 3, 1.0), rand_matrix(&mut r, 4, 4, 1.0)];
        let err = gradient_error(
            &inputs,
            &|t, v| {
                let a_m = pairwise_similarity_op(t, v[0], 2.0).unwrap();
                alignment_distance_op(t, v[1], a_m).unwrap()
            },
            STEP,
        );
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn clustering_loss_gradient_through_gcn_and_head() {
    let mut r = rng(11);
    for norm in [GcnNorm::None, GcnNorm::RowSoftmax] {
        for _ in 0..10 {
            let inputs = [
                rand_matrix(&mut r, 4, 3, 1.0),
                rand_matrix(&mut r, 3, 3, 1.0),
                rand_matrix(&mut r, 3, 5, 1.0),
                rand_tensor(&mut r, &[5], 0.5),
                rand_matrix(&mut r, 5, 2, 1.0),
                rand_tensor(&mut r, &[2], 0.5),
            ];
            let err = gradient_error(
                &inputs,
                &|t, v| {
                    let a = pairwise_similarity_op(t, v[0], 2.0).unwrap();
                    let gh = gcn_forward_op(t, a, v[0], v[1], norm).unwrap();
                    let c = cluster_assign_op(t, gh, [v[2], v[3], v[4], v[5]]).unwrap();
                    clustering_loss_op(t, a, c).unwrap()
                },
                STEP,
            );
            assert!(err < TOL, "{norm:?}: relative error {err}");
        }
    }
}

#[test]
fn prediction_loss_gradient() {
    let mut r = rng(12);
    let dims = Dims::new2(4, 4).unwrap();
    for m in [2, 3] {
        for norm in [RegionNorm::Region, RegionNorm::Total] {
            for _ in 0..5 {
                let (lp, lq) = (rand_labels(&mut r, dims, m), rand_labels(&mut r, dims, m));
                let mask = rand_mask(&mut r, dims);
                let inputs = [rand_tensor(&mut r, &[m, 1, 4, 4], 2.0), rand_tensor(&mut r, &[m, 1, 4, 4], 2.0)];
                let err = gradient_error(
                    &inputs,
                    &|t, v| prediction_loss_op(t, v[0], &lp, v[1], &lq, &mask, 0.5, norm).unwrap(),
                    STEP,
                );
                assert!(err < TOL, "M={m} {norm:?}: relative error {err}");
            }
        }
    }
}

/// Tiny fused network on a 4 x 4 input: 2 x 2 node grid at the tap.
fn tiny_arch() -> ArchConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder_depth = 2;
    cfg.base_channels = 2;
    cfg.tap_layer = 1;
    cfg.grid_size = 2;
    cfg.cluster_hidden = 3;
    ArchConfig::from_run(&cfg, 2, 2)
}

fn network_loss(params: &NetParams, arch: &ArchConfig, want_grad: bool) -> (f64, Vec<Option<Tensor>>) {
    let mut r = rng(13);
    let dims = Dims::new2(4, 4).unwrap();
    let (xp, xq) = (rand_volume(&mut r, dims), rand_volume(&mut r, dims));
    let (lp, lq) = (rand_labels(&mut r, dims, 2), rand_labels(&mut r, dims, 2));
    let mask = rand_mask(&mut r, dims);
    let a_u = rand_matrix(&mut r, 4, 4, 0.5);
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, want_grad);
    let fp = forward_on_tape(&mut tape, &pv, arch, &xp).unwrap();
    let fq = forward_on_tape(&mut tape, &pv, arch, &xq).unwrap();
    let pre = prediction_loss_op(&mut tape, fp.logits, &lp, fq.logits, &lq, &mask, 0.5, RegionNorm::Region).unwrap();
    let g = fp.graph.unwrap();
    let a_u = tape.constant(a_u);
    let st = alignment_distance_op(&mut tape, a_u, g.similarity).unwrap();
    let cl = clustering_loss_op(&mut tape, g.similarity, g.clusters).unwrap();
    let st = tape.scale(st, 0.05);
    let cl = tape.scale(cl, 0.01);
    let total = tape.add(pre, st);
    let total = tape.add(total, cl);
    let value = tape.value(total).item();
    if !want_grad {
        return (value, Vec::new());
    }
    let mut grads = tape.backward(total);
    (value, pv.vars.iter().map(|&v| grads.take(v)).collect())
}

#[test]
fn full_objective_gradient_through_network() {
    let arch = tiny_arch();
    let params = init_params(&arch, 3).unwrap();
    let (_, grads) = network_loss(&params, &arch, true);
    for (k, (name, t)) in params.iter().enumerate() {
        let analytic = grads[k].clone().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let (mut diff2, mut num2) = (0.0, 0.0);
        for i in 0..t.len() {
            let mut p = params.clone();
            p.tensors_mut()[k].data_mut()[i] += STEP;
            let up = network_loss(&p, &arch, false).0;
            p.tensors_mut()[k].data_mut()[i] -= 2.0 * STEP;
            let down = network_loss(&p, &arch, false).0;
            let numeric = (up - down) / (2.0 * STEP);
            diff2 += (analytic.data()[i] - numeric).powi(2);
            num2 += numeric * numeric;
        }
        let err = diff2.sqrt() / num2.sqrt().max(1e-6);
        assert!(err < TOL, "{name}: relative error {err}");
    }
}
