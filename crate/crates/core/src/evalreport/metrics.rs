//! Overlap and surface-distance metrics on binary rasters.
//!
//! Surface distances use boundary voxels (mask voxels with a face neighbour
//! outside the mask or outside the raster). Nearest boundary distances are
//! read from an exact Euclidean distance transform of the other mask's
//! boundary, in physical units. The pooled bidirectional distances give
//! 95HD (linear-interpolated 95th percentile) and ASD (their mean).

use crate::datamodel::{Dims, Spacing};
use crate::error::{Error, Result};

fn check_len(pred: &[bool], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn overlap(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    (inter, p, g)
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Boundary indicator per voxel, face connectivity.
pub fn boundary(mask: &[bool], dims: Dims) -> Vec<bool> {
    let [d, h, w] = dims.dhw();
    let three = dims.rank() == 3;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let outside = |zz: isize, yy: isize, xx: isize| {
                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                        return true;
                    }
                    !mask[((zz as usize) * h + yy as usize) * w + xx as usize]
                };
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let mut b = outside(zi, yi - 1, xi)
                    || outside(zi, yi + 1, xi)
                    || outside(zi, yi, xi - 1)
                    || outside(zi, yi, xi + 1);
                if three {
                    b = b || outside(zi - 1, yi, xi) || outside(zi + 1, yi, xi);
                }
                out[i] = b;
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f[q] + (s*(p - q))^2`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            let Some(&r) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let xr = r as f64 * s;
            let sep = ((f[q] + xq * xq) - (f[r] + xr * xr)) / (2.0 * (xq - xr));
            if sep <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(sep);
            break;
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let xp = p as f64 * s;
        while j + 1 < v.len() && z[j + 1] < xp {
            j += 1;
        }
        let dx = xp - v[j] as f64 * s;
        *o = dx * dx + f[v[j]];
    }
}

/// Physical spacing in `[d, h, w]` order.
fn dhw_spacing(dims: Dims, spacing: Spacing) -> [f64; 3] {
    if dims.rank() == 2 {
        [1.0, spacing[0] as f64, spacing[1] as f64]
    } else {
        [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64]
    }
}

/// Squared Euclidean distance of every voxel to the nearest `seed` voxel.
pub fn squared_distance_transform(seed: &[bool], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims.dhw();
    let sp = dhw_spacing(dims, spacing);
    let mut f: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let n_max = d.max(h).max(w);
    let mut line = vec![0.0; n_max];
    let mut res = vec![0.0; n_max];
    // axis 2 (x), contiguous
    for row in f.chunks_exact_mut(w) {
        line[..w].copy_from_slice(row);
        edt_1d(&line[..w], sp[2], &mut res[..w], &mut v, &mut z);
        row.copy_from_slice(&res[..w]);
    }
    // axis 1 (y)
    for zz in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = f[(zz * h + y) * w + x];
            }
            edt_1d(&line[..h], sp[1], &mut res[..h], &mut v, &mut z);
            for y in 0..h {
                f[(zz * h + y) * w + x] = res[y];
            }
        }
    }
    if d > 1 {
        for y in 0..h {
            for x in 0..w {
                for zz in 0..d {
                    line[zz] = f[(zz * h + y) * w + x];
                }
                edt_1d(&line[..d], sp[0], &mut res[..d], &mut v, &mut z);
                for zz in 0..d {
                    f[(zz * h + y) * w + x] = res[zz];
                }
            }
        }
    }
    f
}

/// Pooled nearest boundary distances, `P -> G` then `G -> P`.
pub fn surface_distances(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<Vec<f64>> {
    check_len(pred, gt)?;
    if pred.len() != dims.len() {
        return Err(Error::Shape("mask length does not match dims".into()));
    }
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Err(Error::EmptyMask(
            "surface distance needs nonempty prediction and ground truth".into(),
        ));
    }
    let bp = boundary(pred, dims);
    let bg = boundary(gt, dims);
    let dt_g = squared_distance_transform(&bg, dims, spacing);
    let dt_p = squared_distance_transform(&bp, dims, spacing);
    let mut out = Vec::new();
    out.extend(bp.iter().zip(&dt_g).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()));
    out.extend(bg.iter().zip(&dt_p).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()));
    Ok(out)
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) at index `q * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<f64> {
    Ok(percentile(&surface_distances(pred, gt, dims, spacing)?, 0.95))
}

pub fn asd(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<f64> {
    let d = surface_distances(pred, gt, dims, spacing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}
