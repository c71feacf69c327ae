//! Checkpoint directories.
//!
//! ```text
//! <dir>/metadata.txt        iteration, RNG position, optimizer scalars, shapes
//! <dir>/config.txt          run config
//! <dir>/teacher/<name>.pvol parameter tensors (f64, rank 2)
//! <dir>/student/<name>.pvol
//! <dir>/optim_m/<name>.pvol first optimizer buffer
//! <dir>/optim_v/<name>.pvol second moment (Adam only)
//! <dir>/losses.csv          loss history so far
//! <dir>/val_metrics.csv     validation rows so far
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Optimizer, TrainState, VAL_CSV_HEADER};
use crate::backbone::{ArchConfig, NetParams};
use crate::datamodel::{load_tensor, parse_config, save_tensor, OptimizerKind};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LOSS_CSV_HEADER};
use crate::tensor::Tensor;

pub const CHECKPOINT_METADATA: &str = "metadata.txt";

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn save_group(dir: &Path, names: &[String], tensors: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (n, t) in names.iter().zip(tensors) {
        save_tensor(t.rows(), t.cols(), t.data(), dir.join(format!("{n}.pvol")))?;
    }
    Ok(())
}

fn load_group(dir: &Path, names: &[String], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    names
        .iter()
        .zip(shapes)
        .map(|(n, shape)| {
            let (_, _, data) = load_tensor(dir.join(format!("{n}.pvol")))?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(ck_err(format!("tensor {n} has {} values for shape {shape:?}", data.len())));
            }
            Ok(Tensor::new(shape.clone(), data))
        })
        .collect()
}

pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rng = &state.rng;
    let opt = &state.optimizer;
    let mut meta = String::new();
    writeln!(meta, "iteration {}", state.iteration).unwrap();
    writeln!(meta, "num_classes {}", state.arch.num_classes).unwrap();
    writeln!(meta, "rank {}", state.arch.rank).unwrap();
    writeln!(meta, "rng_seed {}", hex::encode(rng.get_seed())).unwrap();
    writeln!(meta, "rng_stream {}", rng.get_stream()).unwrap();
    writeln!(meta, "rng_word_pos {}", rng.get_word_pos()).unwrap();
    writeln!(meta, "optimizer_steps {}", opt.steps).unwrap();
    writeln!(meta, "config_digest {}", state.cfg.digest()).unwrap();
    for (n, t) in state.student.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(meta, "shape {n} {}", dims.join(" ")).unwrap();
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(CHECKPOINT_METADATA, &meta)?;
    write("config.txt", &state.cfg.to_text())?;
    write("losses.csv", &state.losses_csv())?;
    write("val_metrics.csv", &state.val_csv())?;
    let names = state.student.names();
    save_group(&dir.join("teacher"), names, state.teacher.tensors())?;
    save_group(&dir.join("student"), names, state.student.tensors())?;
    save_group(&dir.join("optim_m"), names, &opt.m)?;
    if opt.kind == OptimizerKind::Adam {
        save_group(&dir.join("optim_v"), names, &opt.v)?;
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
}

fn parse_history(text: &str, cfg: &crate::datamodel::RunConfig) -> Result<Vec<LossBreakdown>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(ck_err("losses.csv header mismatch"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| ck_err(format!("bad loss row '{l}'")))
            };
            Ok(LossBreakdown {
                l_pre: num(1)?,
                l_st: num(2)?,
                l_cl: num(3)?,
                total: num(4)?,
                alpha: cfg.alpha,
                beta: cfg.beta,
                gamma: cfg.gamma,
            })
        })
        .collect()
}

/// Restores a [`TrainState`] saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let meta = read(dir, CHECKPOINT_METADATA)?;
    let cfg = parse_config(Some(&dir.join("config.txt")), &[])?;
    let mut kv = std::collections::HashMap::new();
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    for line in meta.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("shape"), Some(name)) => {
                let dims: std::result::Result<Vec<usize>, _> = parts.map(str::parse).collect();
                names.push(name.to_string());
                shapes.push(dims.map_err(|_| ck_err(format!("bad shape line '{line}'")))?);
            }
            (Some(k), Some(v)) => {
                kv.insert(k.to_string(), v.to_string());
            }
            _ => {}
        }
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| ck_err(format!("metadata lacks '{k}'")));
    let num = |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| ck_err(format!("bad metadata value for '{k}'"))) };
    let seed_bytes = hex::decode(get("rng_seed")?).map_err(|_| ck_err("bad rng_seed"))?;
    let seed: [u8; 32] = seed_bytes.try_into().map_err(|_| ck_err("rng_seed must be 32 bytes"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num("rng_stream")? as u64);
    rng.set_word_pos(num("rng_word_pos")?);
    let arch = ArchConfig::from_run(&cfg, num("num_classes")? as usize, num("rank")? as usize);
    let build = |group: &str| -> Result<NetParams> {
        let ts = load_group(&dir.join(group), &names, &shapes)?;
        NetParams::from_entries(names.iter().cloned().zip(ts).collect())
    };
    let teacher = build("teacher")?;
    let student = build("student")?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, &student);
    optimizer.steps = num("optimizer_steps")? as u64;
    optimizer.m = load_group(&dir.join("optim_m"), &names, &shapes)?;
    if cfg.optimizer == OptimizerKind::Adam {
        optimizer.v = load_group(&dir.join("optim_v"), &names, &shapes)?;
    }
    let history = parse_history(&read(dir, "losses.csv")?, &cfg)?;
    let iteration = num("iteration")? as u64;
    if history.len() as u64 != iteration {
        return Err(ck_err(format!(
            "{} loss rows for iteration {iteration}",
            history.len()
        )));
    }
    let val = read(dir, "val_metrics.csv")?;
    let mut val_lines = val.lines();
    if val_lines.next() != Some(VAL_CSV_HEADER) {
        return Err(ck_err("val_metrics.csv header mismatch"));
    }
    Ok(TrainState {
        arch,
        teacher,
        student,
        optimizer,
        iteration,
        rng,
        history,
        val_log: val_lines.filter(|l| !l.is_empty()).map(String::from).collect(),
        cfg,
    })
}

/// Teacher parameters of a checkpoint, e.g. for evaluation.
pub fn load_params(dir: impl AsRef<Path>, group: &str) -> Result<NetParams> {
    let st = load_checkpoint(dir)?;
    match group {
        "teacher" => Ok(st.teacher),
        "student" => Ok(st.student),
        other => Err(ck_err(format!("unknown parameter group '{other}'"))),
    }
}
