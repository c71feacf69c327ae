//! Run configuration: flat `key = value` files with `#` comments, plus CLI
//! overrides. Precedence is overrides > file > defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Momentum SGD (momentum 0.9).
    Sgd,
    Adam,
}

/// Adjacency handed to the GCN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnNorm {
    /// Raw shifted similarity matrix.
    None,
    /// Row-wise softmax of the similarity matrix.
    RowSoftmax,
}

/// Which similarity matrix the clustering loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterSource {
    Student,
    Teacher,
}

/// Scaling of the clustering loss of one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterLossNorm {
    /// `-Tr(A C C^T)` as is.
    Sum,
    /// Divided by the number of node pairs `N^2`.
    Mean,
}

/// Normalizer of the cross-entropy term inside a region-restricted loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionNorm {
    /// Divide by the region's voxel count.
    Region,
    /// Divide by the total voxel count.
    Total,
}

/// Quantity whose distribution the KDE report estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdeSource {
    Probability,
    Feature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda_ema: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global L2 norm cap on each gradient step; 0 disables clipping.
    pub grad_clip: f64,
    pub tap_layer: usize,
    pub grid_size: usize,
    /// 0 means one cluster per segmentation class.
    pub num_clusters: usize,
    pub cluster_hidden: usize,
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub selftrain_iters: u64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub out_dir: PathBuf,
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub graph_fusion: bool,
    pub gcn_norm: GcnNorm,
    pub teacher_grad: bool,
    pub cluster_source: ClusterSource,
    pub cl_norm: ClusterLossNorm,
    pub region_norm: RegionNorm,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub kde_source: KdeSource,
    /// 0 selects Silverman's rule.
    pub kde_bandwidth: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.05,
            beta: 0.01,
            gamma: 0.5,
            mu: 2.0,
            lambda_ema: 0.99,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 5.0,
            tap_layer: 1,
            grid_size: 16,
            num_clusters: 0,
            cluster_hidden: 16,
            batch_size: 2,
            pretrain_iters: 300,
            selftrain_iters: 600,
            mask_ratio: 2.0 / 3.0,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            out_dir: PathBuf::from("runs/default"),
            encoder_depth: 5,
            base_channels: 8,
            graph_fusion: true,
            gcn_norm: GcnNorm::RowSoftmax,
            teacher_grad: false,
            cluster_source: ClusterSource::Student,
            cl_norm: ClusterLossNorm::Mean,
            region_norm: RegionNorm::Region,
            checkpoint_every: 0,
            kde_source: KdeSource::Probability,
            kde_bandwidth: 0.0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "gamma",
    "mu",
    "lambda_ema",
    "lr",
    "momentum",
    "grad_clip",
    "tap_layer",
    "grid_size",
    "num_clusters",
    "cluster_hidden",
    "batch_size",
    "pretrain_iters",
    "selftrain_iters",
    "mask_ratio",
    "seed",
    "optimizer",
    "out_dir",
    "encoder_depth",
    "base_channels",
    "graph_fusion",
    "gcn_norm",
    "teacher_grad",
    "cluster_source",
    "cl_norm",
    "region_norm",
    "checkpoint_every",
    "kde_source",
    "kde_bandwidth",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for '{key}', got '{v}'"))),
    }
}

fn bad_choice(key: &str, v: &str, choices: &str) -> Error {
    Error::Config(format!("invalid value '{v}' for '{key}', expected one of: {choices}"))
}

impl RunConfig {
    /// Assigns one key. Unknown keys fail with the list of valid keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "lambda_ema" => self.lambda_ema = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "tap_layer" => self.tap_layer = parse_num(key, v)?,
            "grid_size" => self.grid_size = parse_num(key, v)?,
            "num_clusters" => {
                self.num_clusters = if v == "auto" { 0 } else { parse_num(key, v)? }
            }
            "cluster_hidden" => self.cluster_hidden = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "pretrain_iters" => self.pretrain_iters = parse_num(key, v)?,
            "selftrain_iters" => self.selftrain_iters = parse_num(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad_choice(key, v, "sgd, adam")),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "encoder_depth" => self.encoder_depth = parse_num(key, v)?,
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "graph_fusion" => self.graph_fusion = parse_bool(key, v)?,
            "gcn_norm" => {
                self.gcn_norm = match v {
                    "none" => GcnNorm::None,
                    "row_softmax" => GcnNorm::RowSoftmax,
                    _ => return Err(bad_choice(key, v, "none, row_softmax")),
                }
            }
            "teacher_grad" => self.teacher_grad = parse_bool(key, v)?,
            "cluster_source" => {
                self.cluster_source = match v {
                    "student" => ClusterSource::Student,
                    "teacher" => ClusterSource::Teacher,
                    _ => return Err(bad_choice(key, v, "student, teacher")),
                }
            }
            "cl_norm" => {
                self.cl_norm = match v {
                    "sum" => ClusterLossNorm::Sum,
                    "mean" => ClusterLossNorm::Mean,
                    _ => return Err(bad_choice(key, v, "sum, mean")),
                }
            }
            "region_norm" => {
                self.region_norm = match v {
                    "region" => RegionNorm::Region,
                    "total" => RegionNorm::Total,
                    _ => return Err(bad_choice(key, v, "region, total")),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "kde_source" => {
                self.kde_source = match v {
                    "probability" => KdeSource::Probability,
                    "feature" => KdeSource::Feature,
                    _ => return Err(bad_choice(key, v, "probability, feature")),
                }
            }
            "kde_bandwidth" => self.kde_bandwidth = parse_num(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Checks every range constraint, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |c: &str| Err(Error::Config(format!("constraint violated: {c}")));
        let finite = [
            self.alpha,
            self.beta,
            self.gamma,
            self.mu,
            self.lambda_ema,
            self.lr,
            self.momentum,
            self.grad_clip,
            self.mask_ratio,
            self.kde_bandwidth,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("all real-valued keys must be finite");
        }
        if self.alpha < 0.0 {
            return fail("alpha >= 0");
        }
        if self.beta < 0.0 {
            return fail("beta >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("0 <= gamma <= 1");
        }
        if self.mu <= 0.0 {
            return fail("mu > 0");
        }
        if !(0.0..=1.0).contains(&self.lambda_ema) {
            return fail("0 <= lambda_ema <= 1");
        }
        if self.lr <= 0.0 {
            return fail("lr > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("0 <= momentum < 1");
        }
        if self.grad_clip < 0.0 {
            return fail("grad_clip >= 0");
        }
        if self.encoder_depth < 1 {
            return fail("encoder_depth >= 1");
        }
        if !(1..=self.encoder_depth).contains(&self.tap_layer) {
            return fail("1 <= tap_layer <= encoder_depth");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("0 < mask_ratio < 1");
        }
        if self.grid_size < 1 {
            return fail("grid_size >= 1");
        }
        if self.base_channels < 1 {
            return fail("base_channels >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size >= 1");
        }
        if self.cluster_hidden < 1 {
            return fail("cluster_hidden >= 1");
        }
        if self.kde_bandwidth < 0.0 {
            return fail("kde_bandwidth >= 0");
        }
        Ok(())
    }

    /// Effective cluster count for `num_classes` segmentation classes.
    pub fn clusters_for(&self, num_classes: usize) -> usize {
        if self.num_clusters == 0 {
            num_classes
        } else {
            self.num_clusters
        }
    }

    /// Canonical `key = value` rendering; `parse_config` reads it back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let norm = match self.gcn_norm {
            GcnNorm::None => "none",
            GcnNorm::RowSoftmax => "row_softmax",
        };
        let src = match self.cluster_source {
            ClusterSource::Student => "student",
            ClusterSource::Teacher => "teacher",
        };
        let cln = match self.cl_norm {
            ClusterLossNorm::Sum => "sum",
            ClusterLossNorm::Mean => "mean",
        };
        let rn = match self.region_norm {
            RegionNorm::Region => "region",
            RegionNorm::Total => "total",
        };
        let kde = match self.kde_source {
            KdeSource::Probability => "probability",
            KdeSource::Feature => "feature",
        };
        let rows: Vec<(&str, String)> = vec![
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("gamma", format!("{:?}", self.gamma)),
            ("mu", format!("{:?}", self.mu)),
            ("lambda_ema", format!("{:?}", self.lambda_ema)),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("tap_layer", self.tap_layer.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("num_clusters", self.num_clusters.to_string()),
            ("cluster_hidden", self.cluster_hidden.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_iters", self.pretrain_iters.to_string()),
            ("selftrain_iters", self.selftrain_iters.to_string()),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("seed", self.seed.to_string()),
            ("optimizer", opt.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("graph_fusion", self.graph_fusion.to_string()),
            ("gcn_norm", norm.to_string()),
            ("teacher_grad", self.teacher_grad.to_string()),
            ("cluster_source", src.to_string()),
            ("cl_norm", cln.to_string()),
            ("region_norm", rn.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("kde_source", kde.to_string()),
            ("kde_bandwidth", format!("{:?}", self.kde_bandwidth)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of [`RunConfig::to_text`] without `out_dir`, which does not
    /// affect results.
    pub fn digest(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Reads `key = value` text into `cfg`.
fn apply_text(cfg: &mut RunConfig, text: &str, origin: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{origin}:{}: expected 'key = value', got '{raw}'",
                i + 1
            )));
        };
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
    }
    Ok(())
}

/// Builds a validated config from defaults, an optional file and
/// `key=value` overrides.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        apply_text(&mut cfg, &text, &p.display().to_string())?;
    }
    for (k, v) in overrides {
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn defaults() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.beta, 0.01);
        assert_eq!(c.mu, 2.0);
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.lambda_ema, 0.99);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn file_then_override_precedence() {
        let (_d, p) = file_with("# comment\nalpha = 0.01  # trailing\nmu=3\n");
        let c = parse_config(Some(&p), &[]).unwrap();
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.mu, 3.0);
        let c = parse_config(Some(&p), &[("alpha".into(), "0.05".into())]).unwrap();
        assert_eq!(c.alpha, 0.05);
        let (_d, p) = file_with("alpha = 0.05\n");
        assert_eq!(parse_config(Some(&p), &[]).unwrap().alpha, 0.05);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config(None, &[("alpah".into(), "1".into())]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpah") && msg.contains("lambda_ema") && msg.contains("tap_layer"));
    }

    #[test]
    fn constraint_violations_are_named() {
        for (k, v, needle) in [
            ("gamma", "1.5", "gamma"),
            ("mu", "0", "mu > 0"),
            ("tap_layer", "6", "tap_layer"),
            ("mask_ratio", "1", "mask_ratio"),
            ("lambda_ema", "-0.1", "lambda_ema"),
            ("beta", "-1", "beta"),
        ] {
            let e = parse_config(None, &[(k.into(), v.into())]).unwrap_err();
            assert!(e.to_string().contains(needle), "{k}: {e}");
        }
    }

    #[test]
    fn text_round_trip_and_purity() {
        let mut c = RunConfig::default();
        c.alpha = 0.1;
        c.gcn_norm = GcnNorm::None;
        c.cl_norm = ClusterLossNorm::Sum;
        c.optimizer = OptimizerKind::Adam;
        let (_d, p) = file_with(&c.to_text());
        let back = parse_config(Some(&p), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), back);
    }
}
