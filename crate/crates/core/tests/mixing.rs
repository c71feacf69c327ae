//! Voxel provenance of copy-paste mixing and the mask geometry.

mod common;

use common::{rand_labels, rand_mask, rand_volume, rng};
use pairseg::datamodel::{Dims, Mask};
use pairseg::mixing::{bidirectional_mix, block_extent, generate_mask, mix_images, mix_labels, MixSources};
use proptest::prelude::*;
use rand::Rng;

fn random_dims(r: &mut impl Rng) -> Dims {
    if r.random_bool(0.7) {
        Dims::new2(r.random_range(2..=24), r.random_range(2..=24)).unwrap()
    } else {
        Dims::new3(r.random_range(2..=8), r.random_range(2..=8), r.random_range(2..=8)).unwrap()
    }
}

#[test]
fn every_voxel_comes_from_the_mask_selected_source() {
    let mut r = rng(20);
    for draw in 0..200 {
        let dims = random_dims(&mut r);
        let [a, b, s, t] = [0; 4].map(|_| rand_volume(&mut r, dims));
        let [ya, yb, ls, lt] = [0; 4].map(|_| rand_labels(&mut r, dims, 3));
        let mask = if draw % 2 == 0 {
            generate_mask(dims, r.random_range(0.3..0.9), &mut r).unwrap()
        } else {
            rand_mask(&mut r, dims)
        };
        let (xp, xq) = mix_images(&a, &b, &s, &t, &mask).unwrap();
        let (lp, lq) = mix_labels(&ya, &yb, &ls, &lt, &mask).unwrap();
        for (v, &m) in mask.data().iter().enumerate() {
            let keep = m == 1;
            let bits = |x: &pairseg::datamodel::Volume| x.data()[v].to_bits();
            assert_eq!(bits(&xp), if keep { bits(&b) } else { bits(&t) });
            assert_eq!(bits(&xq), if keep { bits(&s) } else { bits(&a) });
            assert_eq!(lp.data()[v], if keep { yb.data()[v] } else { lt.data()[v] });
            assert_eq!(lq.data()[v], if keep { ls.data()[v] } else { ya.data()[v] });
        }
    }
}

#[test]
fn bidirectional_mix_records_sources() {
    let mut r = rng(21);
    let dims = Dims::new2(8, 8).unwrap();
    let vols = [0; 4].map(|_| rand_volume(&mut r, dims));
    let labs = [0; 4].map(|_| rand_labels(&mut r, dims, 2));
    let mask = generate_mask(dims, 0.5, &mut r).unwrap();
    let src = MixSources {
        a: ("a", &vols[0], &labs[0]),
        b: ("b", &vols[1], &labs[1]),
        s: ("s", &vols[2], &labs[2]),
        t: ("t", &vols[3], &labs[3]),
    };
    let (p, q) = bidirectional_mix(&src, &mask).unwrap();
    assert_eq!((p.background_id.as_str(), p.foreground_id.as_str()), ("b", "t"));
    assert_eq!((q.background_id.as_str(), q.foreground_id.as_str()), ("s", "a"));
    let (xp, xq) = mix_images(&vols[0], &vols[1], &vols[2], &vols[3], &mask).unwrap();
    assert_eq!((p.image, q.image), (xp, xq));
}

#[test]
fn reference_block_sizes() {
    assert_eq!(block_extent(Dims::new2(256, 256).unwrap(), 170.0 / 256.0).unwrap(), vec![170, 170]);
    assert_eq!(block_extent(Dims::new3(96, 96, 96).unwrap(), 64.0 / 96.0).unwrap(), vec![64, 64, 64]);
    let mut r = rng(22);
    let m = generate_mask(Dims::new2(256, 256).unwrap(), 170.0 / 256.0, &mut r).unwrap();
    assert_eq!(m.dims().len() - m.count_ones(), 170 * 170);
}

/// Bounding box of the zero voxels equals the zero set itself.
fn zero_set_is_box(m: &Mask) -> bool {
    let [_, h, w] = m.dims().dhw();
    let zeros: Vec<[usize; 3]> = (0..m.dims().len())
        .filter(|&i| m.data()[i] == 0)
        .map(|i| [i / (h * w), (i / w) % h, i % w])
        .collect();
    let lo = [0, 1, 2].map(|a| zeros.iter().map(|z| z[a]).min().unwrap());
    let hi = [0, 1, 2].map(|a| zeros.iter().map(|z| z[a]).max().unwrap());
    let vol: usize = (0..3).map(|a| hi[a] - lo[a] + 1).product();
    vol == zeros.len()
}

proptest! {
    #[test]
    fn generated_mask_is_one_block(h in 5usize..40, w in 5usize..40, ratio in 0.2f64..0.95, seed in any::<u64>()) {
        let dims = Dims::new2(h, w).unwrap();
        let ext = block_extent(dims, ratio).unwrap();
        let m = generate_mask(dims, ratio, &mut rng(seed)).unwrap();
        prop_assert_eq!(m.dims().len() - m.count_ones(), ext[0] * ext[1]);
        prop_assert!(zero_set_is_box(&m));
    }

    #[test]
    fn complement_mask_swaps_sources(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r);
        let [a, b, s, t] = [0; 4].map(|_| rand_volume(&mut r, dims));
        let mask = rand_mask(&mut r, dims);
        let (xp, xq) = mix_images(&a, &b, &s, &t, &mask).unwrap();
        // swapping a<->s and b<->t under the complement gives the same images
        let (yp, yq) = mix_images(&s, &t, &a, &b, &mask.complement()).unwrap();
        prop_assert_eq!(xp, yp);
        prop_assert_eq!(xq, yq);
    }
}
