//! Property tests of the module invariants.

mod common;

use common::{oracle, rand_bools, rand_labels, rand_mask, rand_matrix, rand_tensor, rand_volume, rng};
use pairseg::autodiff::Tape;
use pairseg::backbone::{forward_on_tape, forward_segment, init_params, ArchConfig};
use pairseg::datamodel::{
    load_volume, parse_config, save_label_map, save_volume, Dims, LabelMap, Raster, RegionNorm, RunConfig, Volume,
};
use pairseg::evalreport::{asd, dice, hd95, jaccard};
use pairseg::graph::{alignment_distance, pairwise_similarity};
use pairseg::losses::{combined_region_loss_op, prediction_loss, region_cross_entropy};
use pairseg::mixing::mix_labels;
use pairseg::synthdata::{sample_image, sample_rng, SynthSpec};
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn pvol_round_trip(h in 1usize..12, w in 1usize..12, d in 0usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = if d == 0 { Dims::new2(h, w).unwrap() } else { Dims::new3(d, h, w).unwrap() };
        let spacing = [r.random_range(0.1f32..3.0), r.random_range(0.1f32..3.0), r.random_range(0.1f32..3.0)];
        let v = Volume::new(dims, spacing, (0..dims.len()).map(|_| r.random_range(-5.0f32..5.0)).collect()).unwrap();
        let l = LabelMap::new(dims, spacing, (0..dims.len()).map(|_| r.random_range(0..7u8)).collect(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_volume(&v, dir.path().join("v.pvol")).unwrap();
        save_label_map(&l, dir.path().join("l.pvol")).unwrap();
        match load_volume(dir.path().join("v.pvol")).unwrap() {
            Raster::Real(back) => prop_assert_eq!(back, v),
            Raster::Label(_) => prop_assert!(false, "intensities read back as labels"),
        }
        match load_volume(dir.path().join("l.pvol")).unwrap() {
            Raster::Label(back) => {
                prop_assert_eq!(back.dims(), l.dims());
                prop_assert_eq!(back.spacing(), l.spacing());
                prop_assert_eq!(back.data(), l.data());
            }
            Raster::Real(_) => prop_assert!(false, "labels read back as intensities"),
        }
    }

    #[test]
    fn parse_config_is_pure(alpha in 0.0f64..1.0, tap in 1usize..=5, seed in any::<u64>()) {
        let ov = vec![
            ("alpha".to_string(), alpha.to_string()),
            ("tap_layer".to_string(), tap.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        let a = parse_config(None, &ov).unwrap();
        prop_assert_eq!(&a, &parse_config(None, &ov).unwrap());
        prop_assert_eq!(a.alpha, alpha);
        prop_assert_eq!(a.digest(), parse_config(None, &ov).unwrap().digest());
    }

    #[test]
    fn synthetic_labels_stay_in_range(m in 2usize..6, seed in any::<u64>(), index in 0u64..100) {
        let mut spec = SynthSpec::new(m);
        spec.image_size = 20;
        spec.shapes = (0, 3);
        let (_, l) = sample_image(&spec, &mut sample_rng(seed, index));
        prop_assert!(l.data().iter().all(|&v| (v as usize) < m));
    }

    #[test]
    fn mixed_labels_use_source_classes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = Dims::new2(r.random_range(2..12), r.random_range(2..12)).unwrap();
        let [a, b, s, t] = [0; 4].map(|_| rand_labels(&mut r, dims, 5));
        let mask = rand_mask(&mut r, dims);
        let (p, q) = mix_labels(&a, &b, &s, &t, &mask).unwrap();
        for v in 0..dims.len() {
            prop_assert!(p.data()[v] == b.data()[v] || p.data()[v] == t.data()[v]);
            prop_assert!(q.data()[v] == s.data()[v] || q.data()[v] == a.data()[v]);
        }
    }

    #[test]
    fn similarity_symmetric_and_scale_covariant(n in 1usize..9, d in 1usize..6, c in 0.25f64..4.0, seed in any::<u64>()) {
        let g = rand_matrix(&mut rng(seed), n, d, 2.0);
        let a = pairwise_similarity(&g, 2.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a.data()[i * n + j] - a.data()[j * n + i]).abs() <= 1e-12);
            }
        }
        let ac = pairwise_similarity(&g.map(|v| v * c), 2.0).unwrap();
        for (x, y) in a.data().iter().zip(ac.data()) {
            prop_assert!((y - c * c * x).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn alignment_is_a_pseudometric(n in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let [a, b, c] = [0; 3].map(|_| rand_matrix(&mut r, n, n, 2.0));
        let d = |x, y| alignment_distance(x, y).unwrap();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-15);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn prediction_loss_affine_nondecreasing_in_gamma(seed in any::<u64>(), m in 2usize..4) {
        let mut r = rng(seed);
        let dims = Dims::new2(4, 5).unwrap();
        let (lp, lq) = (rand_labels(&mut r, dims, m), rand_labels(&mut r, dims, m));
        let mask = rand_mask(&mut r, dims);
        let (zp, zq) = (rand_tensor(&mut r, &[m, 1, 4, 5], 3.0), rand_tensor(&mut r, &[m, 1, 4, 5], 3.0));
        let f = |g: f64| prediction_loss(&zp, &lp, &zq, &lq, &mask, g, RegionNorm::Region).unwrap();
        let (f0, fh, f1) = (f(0.0), f(0.5), f(1.0));
        prop_assert!(f0 <= fh + 1e-12 && fh <= f1 + 1e-12);
        prop_assert!((fh - 0.5 * (f0 + f1)).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_is_region_additive_under_total_norm(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = Dims::new2(5, 4).unwrap();
        let l = rand_labels(&mut r, dims, 3);
        let z = rand_tensor(&mut r, &[3, 1, 5, 4], 3.0);
        let keep = rand_bools(&mut r, dims.len(), 0.5);
        let paste: Vec<bool> = keep.iter().map(|v| !v).collect();
        let whole = region_cross_entropy(&z, l.data(), None, RegionNorm::Total).unwrap();
        let parts = region_cross_entropy(&z, l.data(), Some(&keep), RegionNorm::Total).unwrap()
            + region_cross_entropy(&z, l.data(), Some(&paste), RegionNorm::Total).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-6);
    }
}

/// Random masks well inside an `h x w` raster, so a translation by up to
/// two voxels keeps them clear of the border.
fn inner_pair(r: &mut impl Rng, h: usize, w: usize) -> (Vec<bool>, Vec<bool>) {
    let mut make = || {
        let mut m = vec![false; h * w];
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                m[y * w + x] = r.random_bool(0.4);
            }
        }
        m[(h / 2) * w + w / 2] = true;
        m
    };
    (make(), make())
}

fn shift(m: &[bool], h: usize, w: usize, dy: isize, dx: isize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] {
                out[((y as isize + dy) as usize) * w + (x as isize + dx) as usize] = true;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn metric_identities(seed in any::<u64>(), dy in -2isize..=2, dx in -2isize..=2) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(8..16), r.random_range(8..16));
        let dims = Dims::new2(h, w).unwrap();
        let (p, g) = inner_pair(&mut r, h, w);
        let sp = [1.0f32, 1.0, 1.0];
        let (d, j) = (dice(&p, &g).unwrap(), jaccard(&p, &g).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert_eq!(hd95(&p, &g, dims, sp).unwrap(), hd95(&g, &p, dims, sp).unwrap());
        prop_assert!((asd(&p, &g, dims, sp).unwrap() - asd(&g, &p, dims, sp).unwrap()).abs() <= 1e-12);

        let (ps, gs) = (shift(&p, h, w, dy, dx), shift(&g, h, w, dy, dx));
        prop_assert_eq!(dice(&ps, &gs).unwrap(), d);
        prop_assert_eq!(jaccard(&ps, &gs).unwrap(), j);
        prop_assert!((hd95(&ps, &gs, dims, sp).unwrap() - hd95(&p, &g, dims, sp).unwrap()).abs() <= 1e-12);
        prop_assert!((asd(&ps, &gs, dims, sp).unwrap() - asd(&p, &g, dims, sp).unwrap()).abs() <= 1e-12);

        let sp2 = [2.0f32, 2.0, 2.0];
        prop_assert!((hd95(&p, &g, dims, sp2).unwrap() - 2.0 * hd95(&p, &g, dims, sp).unwrap()).abs() <= 1e-12);
        prop_assert!((asd(&p, &g, dims, sp2).unwrap() - 2.0 * asd(&p, &g, dims, sp).unwrap()).abs() <= 1e-12);
        prop_assert!((oracle::asd(&p, &g, dims, [1.0, 2.0, 2.0]) - asd(&p, &g, dims, sp2).unwrap()).abs() <= 1e-9);
    }
}

fn arch(depth: usize, tap: usize, rank: usize) -> ArchConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder_depth = depth;
    cfg.tap_layer = tap;
    cfg.base_channels = 2;
    cfg.grid_size = 2;
    cfg.cluster_hidden = 4;
    ArchConfig::from_run(&cfg, 3, rank)
}

#[test]
fn backbone_shape_contract() {
    let mut r = rng(30);
    for depth in 1..=4 {
        for tap in 1..=depth {
            let a = arch(depth, tap, 2);
            let p = init_params(&a, 1).unwrap();
            let unit = 1 << (depth - 1);
            for k in [2, 3] {
                let (h, w) = (unit * k, unit * (k + 1));
                let x = rand_volume(&mut r, Dims::new2(h, w).unwrap());
                let f = forward_segment(&[x], &p, &a).unwrap().remove(0);
                assert_eq!(f.logits.shape(), &[3, 1, h, w]);
                let tap_hw = [h >> (tap - 1), w >> (tap - 1)];
                assert_eq!(&f.tap_features.shape()[2..], &tap_hw);
                let g = f.graph.unwrap();
                let nodes = a.effective_grid([1, tap_hw[0], tap_hw[1]]).pow(2);
                assert_eq!(g.similarity.shape(), &[nodes, nodes]);
                assert_eq!(g.clusters.shape(), &[nodes, 3]);
            }
            if unit > 1 {
                let bad = rand_volume(&mut r, Dims::new2(unit * 2 + 1, unit * 2).unwrap());
                assert!(forward_segment(&[bad], &p, &a).is_err());
            }
        }
    }
    let a = arch(2, 2, 3);
    let p = init_params(&a, 1).unwrap();
    let x = rand_volume(&mut r, Dims::new3(4, 4, 6).unwrap());
    let f = forward_segment(&[x], &p, &a).unwrap().remove(0);
    assert_eq!(f.logits.shape(), &[3, 4, 4, 6]);
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let mut r = rng(31);
    let a = arch(3, 2, 2);
    let p = init_params(&a, 2).unwrap();
    let dims = Dims::new2(8, 8).unwrap();
    let x = rand_volume(&mut r, dims);
    let y = rand_labels(&mut r, dims, 3);
    let mut tape = Tape::new();
    let pv = p.to_tape(&mut tape, true);
    let f = forward_on_tape(&mut tape, &pv, &a, &x).unwrap();
    let seg = combined_region_loss_op(&mut tape, f.logits, y.data(), None, RegionNorm::Region).unwrap();
    let g = f.graph.unwrap();
    let cl = pairseg::graph::clustering_loss_op(&mut tape, g.similarity, g.clusters).unwrap();
    let total = tape.add(seg, cl);
    let mut grads = tape.backward(total);
    for ((name, _), v) in p.iter().zip(&pv.vars) {
        let gr = grads.take(*v);
        assert!(gr.as_ref().is_some_and(|t| t.is_finite()), "{name} has no finite gradient");
    }
}

#[test]
fn teacher_moves_only_through_ema() {
    use pairseg::synthdata::{generate_dataset, RoleCounts};
    use pairseg::trainer::{arch_for, selftrain_step, TrainState};
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(2);
    spec.image_size = 16;
    spec.counts = RoleCounts {
        labeled: 2,
        unlabeled: 3,
        val: 0,
        test: 0,
    };
    let split = generate_dataset(&spec, dir.path()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.encoder_depth = 3;
    cfg.base_channels = 4;
    cfg.grid_size = 4;
    cfg.lambda_ema = 1.0;
    let a = arch_for(&cfg, &split).unwrap();
    let mut state = TrainState::new(&cfg, a.clone(), init_params(&a, 4).unwrap());
    let before = state.teacher.clone();
    for _ in 0..2 {
        selftrain_step(&mut state, &split).unwrap();
    }
    assert_eq!(state.teacher, before);
    assert_ne!(state.student, before);
}
