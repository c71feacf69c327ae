//! Repeated-training experiments (tap-layer ablation, alpha sweep) and the
//! markdown report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::svg::{line_chart, Series};
use super::{evaluate, MetricReport};
use crate::datamodel::{DatasetSplit, RunConfig};
use crate::error::{Error, Result};
use crate::trainer::{arch_for, pretrain, run_selftrain, train, TrainState};

pub const EXPERIMENT_HEADER: &str = "DICE,Jaccard,95HD,ASD";

/// One table row: the varied setting and the student's test means.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub setting: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl ExperimentRow {
    fn from_report(setting: String, r: &MetricReport) -> Self {
        ExperimentRow {
            setting,
            dice: r.mean.dice,
            jaccard: r.mean.jaccard,
            hd95: r.mean.hd95,
            asd: r.mean.asd,
        }
    }
}

fn table_csv(key: &str, rows: &[ExperimentRow]) -> String {
    let mut s = format!("{key},{EXPERIMENT_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.setting, r.dice, r.jaccard, r.hd95, r.asd).unwrap();
    }
    s
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn test_report(state: &TrainState, split: &DatasetSplit, tag: &str) -> Result<MetricReport> {
    if split.test.is_empty() {
        return Err(Error::Validation("dataset has no test samples".into()));
    }
    evaluate(&state.student, &state.arch, &split.test, &state.cfg.digest(), tag)
}

/// Full train + test evaluation for every tap layer `1..=encoder_depth`.
/// Writes `ablation_layers.csv` under `out`.
pub fn ablation_layers(cfg: &RunConfig, split: &DatasetSplit, out: Option<&Path>) -> Result<Vec<ExperimentRow>> {
    let mut rows = Vec::new();
    for layer in 1..=cfg.encoder_depth {
        let mut c = cfg.clone();
        c.tap_layer = layer;
        log::info!("ablation: tap layer {layer}");
        let state = train(&c, split, None)?;
        let r = test_report(&state, split, &format!("layer{layer}"))?;
        rows.push(ExperimentRow::from_report(layer.to_string(), &r));
    }
    if let Some(o) = out {
        write(&o.join("ablation_layers.csv"), &table_csv("layer", &rows))?;
    }
    Ok(rows)
}

/// One self-training run per alpha from a shared pre-trained teacher
/// (pre-training does not depend on alpha). Writes `sweep_alpha.csv` and
/// `sweep_alpha.svg` under `out`.
pub fn sweep_alpha(cfg: &RunConfig, split: &DatasetSplit, values: &[f64], out: Option<&Path>) -> Result<Vec<ExperimentRow>> {
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Validation("alpha values must be a nonempty list of finite values >= 0".into()));
    }
    arch_for(cfg, split)?;
    let teacher = pretrain(cfg, split)?;
    let mut rows = Vec::new();
    for &a in values {
        let mut c = cfg.clone();
        c.alpha = a;
        log::info!("sweep: alpha {a}");
        let state = run_selftrain(&c, split, &teacher, None)?;
        let r = test_report(&state, split, &format!("alpha{a}"))?;
        rows.push(ExperimentRow::from_report(a.to_string(), &r));
    }
    if let Some(o) = out {
        write(&o.join("sweep_alpha.csv"), &table_csv("alpha", &rows))?;
        let pts = values.iter().zip(&rows).map(|(&a, r)| (a, r.dice)).collect();
        let svg = line_chart(
            "Test DICE vs alpha",
            "alpha",
            "DICE",
            &[Series {
                name: "DICE",
                points: pts,
                color: "black",
            }],
        );
        write(&o.join("sweep_alpha.svg"), &svg)?;
    }
    Ok(rows)
}

fn csv_table_md(csv: &str) -> String {
    let mut s = String::new();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    if let Some(head) = lines.next() {
        let cols: Vec<&str> = head.split(',').collect();
        writeln!(s, "| {} |", cols.join(" | ")).unwrap();
        writeln!(s, "|{}", "---|".repeat(cols.len())).unwrap();
        for l in lines {
            writeln!(s, "| {} |", l.split(',').collect::<Vec<_>>().join(" | ")).unwrap();
        }
    }
    s
}

/// Markdown summary of the known outputs present in `run_dir`.
pub fn render_report(run_dir: &Path) -> Result<String> {
    let mut s = format!("# Run report: {}\n\n", run_dir.display());
    let read = |name: &str| fs::read_to_string(run_dir.join(name)).ok();
    let sections = [
        ("Test metrics", "test_metrics.csv"),
        ("Validation during self-training", "val_metrics.csv"),
        ("Tap-layer ablation", "ablation_layers.csv"),
        ("Alpha sweep", "sweep_alpha.csv"),
    ];
    let mut any = false;
    for (title, file) in sections {
        if let Some(csv) = read(file) {
            any = true;
            let body = if file == "test_metrics.csv" {
                let keep: Vec<&str> = csv
                    .lines()
                    .filter(|l| l.starts_with("sample,") || l.starts_with("mean,"))
                    .collect();
                keep.join("\n")
            } else {
                csv
            };
            writeln!(s, "## {title}\n\nSource: `{file}`\n\n{}", csv_table_md(&body)).unwrap();
        }
    }
    if let Some(l) = read("losses.csv") {
        let rows: Vec<&str> = l.lines().skip(1).collect();
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            any = true;
            writeln!(
                s,
                "## Losses\n\n{} self-training iterations.\n\n{}",
                rows.len(),
                csv_table_md(&format!("iteration,l_pre,l_st,l_cl,total\n{first}\n{last}"))
            )
            .unwrap();
        }
    }
    let mut svgs: Vec<String> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    svgs.sort();
    if !svgs.is_empty() {
        any = true;
        s.push_str("## Figures\n\n");
        for f in svgs {
            writeln!(s, "- [{f}]({f})").unwrap();
        }
    }
    if !any {
        s.push_str("No known outputs found.\n");
    }
    Ok(s)
}
