//! Bidirectional copy-paste.
//!
//! The mask `S` is 1 on retained voxels and 0 on the cropped block. With
//! labeled images `a`, `b` and unlabeled images `s`, `t`:
//!
//! ```text
//! x_mix_p = x_b * S + x_t * (1 - S)    // block of t pasted into b
//! x_mix_q = x_s * S + x_a * (1 - S)    // block of a pasted into s
//! ```
//!
//! and the same selection applied to labels / pseudo-labels.

use rand::Rng;

use crate::datamodel::{Dims, LabelMap, Mask, Volume};
use crate::error::{Error, Result};

/// Which way the foreground block travels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixDirection {
    /// Unlabeled block pasted into a labeled background (`p`).
    UnlabeledIntoLabeled,
    /// Labeled block pasted into an unlabeled background (`q`).
    LabeledIntoUnlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Volume,
    pub label: LabelMap,
    pub mask: Mask,
    /// Source of the pasted block (`1 - S` region).
    pub foreground_id: String,
    /// Source of the retained background (`S` region).
    pub background_id: String,
    pub direction: MixDirection,
}

/// Block extent per axis for `ratio`.
pub fn block_extent(dims: Dims, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let ext: Vec<usize> = dims
        .extents()
        .iter()
        .map(|&d| (ratio * d as f64).round() as usize)
        .collect();
    if ext.iter().any(|&e| e < 1) {
        return Err(Error::Validation(format!(
            "mask block {ext:?} has an empty axis for dims {:?}",
            dims.extents()
        )));
    }
    Ok(ext)
}

/// Mask with a single zero block of extent `round(ratio * dim)` per axis at a
/// uniformly random offset; every other voxel is 1.
pub fn generate_mask<R: Rng + ?Sized>(dims: Dims, ratio: f64, rng: &mut R) -> Result<Mask> {
    let ext = block_extent(dims, ratio)?;
    let offsets: Vec<usize> = dims
        .extents()
        .iter()
        .zip(&ext)
        .map(|(&d, &e)| rng.random_range(0..=d - e))
        .collect();
    Ok(block_mask(dims, &offsets, &ext))
}

/// Mask with a zero block at `offsets` of size `ext`.
pub fn block_mask(dims: Dims, offsets: &[usize], ext: &[usize]) -> Mask {
    let [d, h, w] = dims.dhw();
    let (o, e) = if dims.rank() == 2 {
        ([0, offsets[0], offsets[1]], [1, ext[0], ext[1]])
    } else {
        ([offsets[0], offsets[1], offsets[2]], [ext[0], ext[1], ext[2]])
    };
    let mut data = vec![1u8; d * h * w];
    for z in o[0]..o[0] + e[0] {
        for y in o[1]..o[1] + e[1] {
            let row = (z * h + y) * w;
            data[row + o[2]..row + o[2] + e[2]].fill(0);
        }
    }
    Mask::new(dims, data).expect("block mask is binary")
}

fn select<T: Copy>(keep: &[T], paste: &[T], mask: &[u8]) -> Vec<T> {
    keep.iter()
        .zip(paste)
        .zip(mask)
        .map(|((&k, &p), &m)| if m == 1 { k } else { p })
        .collect()
}

/// Returns `(x_mix_p, x_mix_q)`.
pub fn mix_images(x_a_l: &Volume, x_b_l: &Volume, x_s_u: &Volume, x_t_u: &Volume, mask: &Mask) -> Result<(Volume, Volume)> {
    let dims = mask.dims();
    for v in [x_a_l, x_b_l, x_s_u, x_t_u] {
        if v.dims() != dims {
            return Err(Error::Shape(format!(
                "image dims {:?} differ from mask dims {:?}",
                v.dims().extents(),
                dims.extents()
            )));
        }
    }
    let s = mask.data();
    let p = Volume::new(dims, x_b_l.spacing(), select(x_b_l.data(), x_t_u.data(), s))?;
    let q = Volume::new(dims, x_s_u.spacing(), select(x_s_u.data(), x_a_l.data(), s))?;
    Ok((p, q))
}

/// Returns `(l_mix_p, l_mix_q)` from ground truth `y_a`, `y_b` and
/// pseudo-labels `l_s`, `l_t`.
pub fn mix_labels(y_a_l: &LabelMap, y_b_l: &LabelMap, l_s_p: &LabelMap, l_t_p: &LabelMap, mask: &Mask) -> Result<(LabelMap, LabelMap)> {
    let dims = mask.dims();
    let m = y_a_l.num_classes();
    for l in [y_a_l, y_b_l, l_s_p, l_t_p] {
        if l.dims() != dims {
            return Err(Error::Shape("label dims differ from mask dims".into()));
        }
        if l.num_classes() != m {
            return Err(Error::Validation(format!(
                "num_classes mismatch: {} vs {m}",
                l.num_classes()
            )));
        }
    }
    let s = mask.data();
    let p = LabelMap::new(dims, y_b_l.spacing(), select(y_b_l.data(), l_t_p.data(), s), m)?;
    let q = LabelMap::new(dims, l_s_p.spacing(), select(l_s_p.data(), y_a_l.data(), s), m)?;
    Ok((p, q))
}

/// Source images and labels for one bidirectional pair.
pub struct MixSources<'a> {
    pub a: (&'a str, &'a Volume, &'a LabelMap),
    pub b: (&'a str, &'a Volume, &'a LabelMap),
    pub s: (&'a str, &'a Volume, &'a LabelMap),
    pub t: (&'a str, &'a Volume, &'a LabelMap),
}

/// Builds both mixed samples `(p, q)` of a pair under one mask.
pub fn bidirectional_mix(src: &MixSources<'_>, mask: &Mask) -> Result<(MixedSample, MixedSample)> {
    let (xp, xq) = mix_images(src.a.1, src.b.1, src.s.1, src.t.1, mask)?;
    let (lp, lq) = mix_labels(src.a.2, src.b.2, src.s.2, src.t.2, mask)?;
    Ok((
        MixedSample {
            image: xp,
            label: lp,
            mask: mask.clone(),
            foreground_id: src.t.0.to_string(),
            background_id: src.b.0.to_string(),
            direction: MixDirection::UnlabeledIntoLabeled,
        },
        MixedSample {
            image: xq,
            label: lq,
            mask: mask.clone(),
            foreground_id: src.a.0.to_string(),
            background_id: src.s.0.to_string(),
            direction: MixDirection::LabeledIntoUnlabeled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::UNIT_SPACING;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: Dims, f: impl Fn(usize) -> f32) -> Volume {
        Volume::new(dims, UNIT_SPACING, (0..dims.len()).map(f).collect()).unwrap()
    }

    #[test]
    fn mask_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = generate_mask(Dims::new2(256, 256).unwrap(), 170.0 / 256.0, &mut rng).unwrap();
        assert_eq!(m.dims().len() - m.count_ones(), 170 * 170);
        let m = generate_mask(Dims::new3(96, 96, 96).unwrap(), 2.0 / 3.0, &mut rng).unwrap();
        assert_eq!(m.dims().len() - m.count_ones(), 64 * 64 * 64);
        let m = generate_mask(Dims::new2(4, 4).unwrap(), 0.5, &mut rng).unwrap();
        assert_eq!(m.count_ones(), 12);
    }

    #[test]
    fn mask_rejects_degenerate_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_mask(Dims::new2(1, 8).unwrap(), 0.3, &mut rng).is_err());
        assert!(generate_mask(Dims::new2(8, 8).unwrap(), 1.0, &mut rng).is_err());
    }

    #[test]
    fn all_ones_and_all_zeros() {
        let d = Dims::new2(3, 3).unwrap();
        let a = vol(d, |i| i as f32);
        let b = vol(d, |i| 10.0 + i as f32);
        let s = vol(d, |i| 20.0 + i as f32);
        let t = vol(d, |i| 30.0 + i as f32);
        let (p, q) = mix_images(&a, &b, &s, &t, &Mask::filled(d, true)).unwrap();
        assert_eq!((p, q), (b.clone(), s.clone()));
        let (p, q) = mix_images(&a, &b, &s, &t, &Mask::filled(d, false)).unwrap();
        assert_eq!((p, q), (t, a));
    }

    #[test]
    fn label_class_counts_follow_mask() {
        let d = Dims::new2(4, 4).unwrap();
        let zero = LabelMap::new(d, UNIT_SPACING, vec![0; 16], 2).unwrap();
        let one = LabelMap::new(d, UNIT_SPACING, vec![1; 16], 2).unwrap();
        let mask = block_mask(d, &[0, 0], &[2, 4]);
        let (p, q) = mix_labels(&one, &zero, &one, &zero, &mask).unwrap();
        // p = y_b (0) on S, l_t (0) elsewhere; q = l_s (1) on S, y_a (1) elsewhere
        assert!(p.data().iter().all(|&v| v == 0));
        assert!(q.data().iter().all(|&v| v == 1));
        let (p, _) = mix_labels(&zero, &zero, &zero, &one, &mask).unwrap();
        assert_eq!(p.data().iter().filter(|&&v| v == 1).count(), 8);
        let three = LabelMap::new(d, UNIT_SPACING, vec![0; 16], 3).unwrap();
        assert!(mix_labels(&zero, &zero, &zero, &three, &mask).is_err());
    }
}
