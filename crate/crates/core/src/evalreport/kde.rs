//! Gaussian kernel density curves of predicted values, labeled vs
//! unlabeled pool.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::percentile;
use super::svg::{line_chart, Series};
use crate::backbone::{forward_segment, ArchConfig, NetParams};
use crate::datamodel::{DatasetSplit, KdeSource, Sample};
use crate::error::{Error, Result};

/// Samples beyond this count are thinned by a fixed stride.
pub const KDE_MAX_SAMPLES: usize = 5000;
/// Bandwidth used when the data give none (constant pool, single value).
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;
const MIN_POINTS: usize = 512;
const MAX_POINTS: usize = 16384;
/// Grid points per (smallest) bandwidth.
const POINTS_PER_BANDWIDTH: f64 = 8.0;
/// Grid margin beyond the data, in bandwidths.
const MARGIN: f64 = 4.0;

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, or the fallback when that is
/// zero or undefined.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return FALLBACK_BANDWIDTH;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = percentile(xs, 0.75) - percentile(xs, 0.25);
    let a = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * a * (n as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        FALLBACK_BANDWIDTH
    }
}

/// Density of `samples` with bandwidth `h` at every grid point.
pub fn gaussian_kde(samples: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

fn thin(xs: Vec<f64>) -> Vec<f64> {
    if xs.len() <= KDE_MAX_SAMPLES {
        return xs;
    }
    let stride = xs.len().div_ceil(KDE_MAX_SAMPLES);
    xs.into_iter().step_by(stride).collect()
}

/// Density curves of one foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeCurve {
    pub class: usize,
    pub x: Vec<f64>,
    /// `None` when the pool has no voxel of this class.
    pub labeled: Option<Vec<f64>>,
    pub unlabeled: Option<Vec<f64>>,
    pub bandwidths: (f64, f64),
    pub counts: (usize, usize),
}

impl KdeCurve {
    /// Shared grid and densities for two value pools. `bandwidth = 0` picks
    /// Silverman's rule per pool.
    pub fn fit(class: usize, labeled: Vec<f64>, unlabeled: Vec<f64>, bandwidth: f64) -> Self {
        let counts = (labeled.len(), unlabeled.len());
        let (lab, unl) = (thin(labeled), thin(unlabeled));
        let bw = |xs: &[f64]| if bandwidth > 0.0 { bandwidth } else { silverman_bandwidth(xs) };
        let (mut hl, mut hu) = (bw(&lab), bw(&unl));
        let all = lab.iter().chain(&unl);
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return KdeCurve {
                class,
                x: Vec::new(),
                labeled: None,
                unlabeled: None,
                bandwidths: (hl, hu),
                counts,
            };
        }
        // keep the grid within MAX_POINTS at POINTS_PER_BANDWIDTH resolution
        let h_max = [(hl, !lab.is_empty()), (hu, !unl.is_empty())]
            .iter()
            .filter(|(_, present)| *present)
            .map(|(h, _)| *h)
            .fold(0.0, f64::max);
        let floor = ((hi - lo) + 2.0 * MARGIN * h_max) / (MAX_POINTS as f64 / POINTS_PER_BANDWIDTH - 48.0);
        hl = hl.max(floor);
        hu = hu.max(floor);
        let h_max = h_max.max(floor);
        let present: Vec<f64> = [(hl, !lab.is_empty()), (hu, !unl.is_empty())]
            .iter()
            .filter(|(_, p)| *p)
            .map(|(h, _)| *h)
            .collect();
        let h_min = present.iter().copied().fold(f64::INFINITY, f64::min);
        let (g0, g1) = (lo - MARGIN * h_max, hi + MARGIN * h_max);
        let n = ((POINTS_PER_BANDWIDTH * (g1 - g0) / h_min).ceil() as usize).clamp(MIN_POINTS, MAX_POINTS);
        let x: Vec<f64> = (0..n).map(|i| g0 + (g1 - g0) * i as f64 / (n - 1) as f64).collect();
        let dens = |xs: &[f64], h: f64| (!xs.is_empty()).then(|| gaussian_kde(xs, h, &x));
        KdeCurve {
            class,
            labeled: dens(&lab, hl),
            unlabeled: dens(&unl, hu),
            x,
            bandwidths: (hl, hu),
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (name, d) in [("labeled", &self.labeled), ("unlabeled", &self.unlabeled)] {
            if d.is_none() {
                writeln!(s, "# warning: {name} pool has no voxels of class {}", self.class).unwrap();
            }
        }
        s.push_str("x,density_labeled,density_unlabeled\n");
        let fmt = |d: &Option<Vec<f64>>, i: usize| d.as_ref().map_or("NA".to_string(), |v| format!("{:.9e}", v[i]));
        for (i, x) in self.x.iter().enumerate() {
            writeln!(s, "{x:.9e},{},{}", fmt(&self.labeled, i), fmt(&self.unlabeled, i)).unwrap();
        }
        s
    }

    pub fn to_svg(&self, quantity: &str) -> String {
        let mut series = Vec::new();
        if let Some(d) = &self.labeled {
            series.push(Series {
                name: "labeled",
                points: self.x.iter().copied().zip(d.iter().copied()).collect(),
                color: "green",
            });
        }
        if let Some(d) = &self.unlabeled {
            series.push(Series {
                name: "unlabeled",
                points: self.x.iter().copied().zip(d.iter().copied()).collect(),
                color: "blue",
            });
        }
        line_chart(&format!("KDE class {}", self.class), quantity, "density", &series)
    }
}

/// Per-class values over voxels predicted as that class.
fn pool_values(samples: &[Sample], params: &NetParams, arch: &ArchConfig, source: KdeSource) -> Result<Vec<Vec<f64>>> {
    let m = arch.num_classes;
    let mut out = vec![Vec::new(); m];
    for s in samples {
        let f = forward_segment(std::slice::from_ref(&s.image), params, arch)?.remove(0);
        let pred = f.argmax();
        let probs = f.probabilities();
        let n = probs.cols();
        let [d, h, w] = s.image.dims().dhw();
        let ts = f.tap_features.shape().to_vec();
        let (tc, td, th, tw) = (ts[0], ts[1], ts[2], ts[3]);
        let feat = f.tap_features.data();
        for (v, &c) in pred.iter().enumerate() {
            let c = c as usize;
            if c == 0 {
                continue;
            }
            let value = match source {
                KdeSource::Probability => probs.data()[c * n + v],
                KdeSource::Feature => {
                    let (z, y, x) = (v / (h * w), (v / w) % h, v % w);
                    let cell = ((z * td / d) * th + y * th / h) * tw + x * tw / w;
                    let ts_len = td * th * tw;
                    (0..tc).map(|ch| feat[ch * ts_len + cell]).sum::<f64>() / tc as f64
                }
            };
            out[c].push(value);
        }
    }
    Ok(out)
}

/// Fits and writes `kde_class<c>.csv` / `.svg` per foreground class.
pub fn kde_report(
    params: &NetParams,
    arch: &ArchConfig,
    split: &DatasetSplit,
    source: KdeSource,
    bandwidth: f64,
    out_dir: Option<&Path>,
) -> Result<Vec<KdeCurve>> {
    let lab = pool_values(&split.labeled, params, arch, source)?;
    let unl = pool_values(&split.unlabeled, params, arch, source)?;
    let quantity = match source {
        KdeSource::Probability => "predicted probability",
        KdeSource::Feature => "tap feature mean",
    };
    let mut curves = Vec::new();
    for (c, (l, u)) in lab.into_iter().zip(unl).enumerate().skip(1) {
        let curve = KdeCurve::fit(c, l, u, bandwidth);
        if curve.labeled.is_none() || curve.unlabeled.is_none() {
            log::warn!("class {c}: a pool has no predicted voxels; curve omitted");
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("kde_class{c}.csv"));
            fs::write(&p, curve.to_csv()).map_err(|e| Error::io(&p, e))?;
            let p = dir.join(format!("kde_class{c}.svg"));
            fs::write(&p, curve.to_svg(quantity)).map_err(|e| Error::io(&p, e))?;
        }
        curves.push(curve);
    }
    Ok(curves)
}
