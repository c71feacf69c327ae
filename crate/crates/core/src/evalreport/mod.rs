//! Test-set evaluation, distribution reports and experiment harnesses.

mod harness;
mod kde;
pub mod metrics;
mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use harness::{ablation_layers, render_report, sweep_alpha, ExperimentRow, EXPERIMENT_HEADER};
pub use kde::{gaussian_kde, kde_report, silverman_bandwidth, KdeCurve, KDE_MAX_SAMPLES};
pub use metrics::{asd, boundary, dice, hd95, jaccard, percentile, surface_distances};

use crate::backbone::{forward_segment, ArchConfig, NetParams};
use crate::datamodel::Sample;
use crate::error::{Error, Result};

/// Column names in reporting order.
pub const METRIC_COLUMNS: [&str; 4] = ["DICE", "Jaccard", "95HD", "ASD"];

/// Metrics of one sample and foreground class. Surface metrics are `None`
/// when skipped (class absent from both masks) or undefined (exactly one
/// mask empty); `status` says which.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample: String,
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub status: &'static str,
}

/// Means over rows; surface means cover only rows where they are defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricMeans {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub undefined_surface: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricMeans,
    pub config_digest: String,
    pub checkpoint: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, config_digest: &str, checkpoint: &str) -> Self {
        let n = rows.len().max(1) as f64;
        let dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
        let jaccard = rows.iter().map(|r| r.jaccard).sum::<f64>() / n;
        let surf: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.hd95?, r.asd?))).collect();
        let m = surf.len().max(1) as f64;
        let mean = MetricMeans {
            dice,
            jaccard,
            hd95: surf.iter().map(|s| s.0).sum::<f64>() / m,
            asd: surf.iter().map(|s| s.1).sum::<f64>() / m,
            undefined_surface: rows.iter().filter(|r| r.status == "empty_mask").count(),
        };
        MetricReport {
            rows,
            mean,
            config_digest: config_digest.to_string(),
            checkpoint: checkpoint.to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# config_digest {}", self.config_digest).unwrap();
        writeln!(s, "# checkpoint {}", self.checkpoint).unwrap();
        writeln!(s, "sample,class,{},status", METRIC_COLUMNS.join(",")).unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{}",
                r.sample,
                r.class,
                r.dice,
                r.jaccard,
                fmt_opt(r.hd95),
                fmt_opt(r.asd),
                r.status
            )
            .unwrap();
        }
        let m = &self.mean;
        writeln!(
            s,
            "mean,all,{:.6},{:.6},{:.6},{:.6},undefined_surface={}",
            m.dice, m.jaccard, m.hd95, m.asd, m.undefined_surface
        )
        .unwrap();
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Metrics of one predicted label map against ground truth, one row per
/// foreground class.
pub fn score_prediction(id: &str, pred: &[u8], sample: &Sample, num_classes: usize) -> Result<Vec<MetricRow>> {
    let gt = sample
        .label
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("sample {id} has no ground truth")))?;
    let dims = gt.dims();
    let mut rows = Vec::with_capacity(num_classes - 1);
    for c in 1..num_classes {
        let p: Vec<bool> = pred.iter().map(|&v| v as usize == c).collect();
        let g = gt.binarize(c as u8);
        let (pa, ga) = (p.iter().any(|&v| v), g.iter().any(|&v| v));
        let row = if !pa && !ga {
            MetricRow {
                sample: id.to_string(),
                class: c,
                dice: 1.0,
                jaccard: 1.0,
                hd95: None,
                asd: None,
                status: "absent",
            }
        } else {
            let d = dice(&p, &g)?;
            let j = jaccard(&p, &g)?;
            match surface_distances(&p, &g, dims, gt.spacing()) {
                Ok(dist) => MetricRow {
                    sample: id.to_string(),
                    class: c,
                    dice: d,
                    jaccard: j,
                    hd95: Some(percentile(&dist, 0.95)),
                    asd: Some(dist.iter().sum::<f64>() / dist.len() as f64),
                    status: "ok",
                },
                Err(Error::EmptyMask(_)) => MetricRow {
                    sample: id.to_string(),
                    class: c,
                    dice: d,
                    jaccard: j,
                    hd95: None,
                    asd: None,
                    status: "empty_mask",
                },
                Err(e) => return Err(e),
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Runs the network on every sample and scores its argmax prediction.
pub fn evaluate(params: &NetParams, arch: &ArchConfig, samples: &[Sample], config_digest: &str, checkpoint: &str) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for s in samples {
        let out = forward_segment(std::slice::from_ref(&s.image), params, arch)?;
        rows.extend(score_prediction(&s.id, &out[0].argmax(), s, arch.num_classes)?);
    }
    Ok(MetricReport::from_rows(rows, config_digest, checkpoint))
}
