//! Line-oriented dataset manifests.
//!
//! ```text
//! # comment
//! #! num_classes 2
//! labeled   s0000 images/s0000.pvol labels/s0000.pvol
//! unlabeled s0004 images/s0004.pvol
//! ```
//!
//! Paths are relative to the manifest's directory. The `#! num_classes M`
//! directive is optional; without it the class count is inferred from the
//! largest label value seen.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::pvol::{load_volume, Raster};
use super::{Dims, LabelMap, Spacing, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "labeled" => Ok(Role::Labeled),
            "unlabeled" => Ok(Role::Unlabeled),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!(
                "unknown role '{other}', expected one of labeled, unlabeled, val, test"
            )),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

/// One image with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub label: Option<LabelMap>,
}

impl Sample {
    /// Ground truth of a labeled/val/test sample.
    pub fn gt(&self) -> &LabelMap {
        self.label
            .as_ref()
            .expect("sample without ground truth used as labeled")
    }
}

/// Labeled, unlabeled, validation and test pools sharing dims, spacing and
/// class count.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
}

impl DatasetSplit {
    /// Checks every split invariant: ground truth present exactly where
    /// expected, shared dims/spacing/classes, and disjoint ids.
    pub fn new(
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
        validation: Vec<Sample>,
        test: Vec<Sample>,
        num_classes: usize,
    ) -> Result<Self> {
        let split = DatasetSplit {
            labeled,
            unlabeled,
            validation,
            test,
            num_classes,
        };
        let mut seen: HashMap<&str, Role> = HashMap::new();
        let mut reference: Option<(Dims, Spacing)> = None;
        for (role, samples) in split.pools() {
            for s in samples {
                if let Some(prev) = seen.insert(&s.id, role) {
                    return Err(Error::Validation(format!(
                        "sample id '{}' appears in both {prev} and {role}",
                        s.id
                    )));
                }
                match (&s.label, role) {
                    (Some(_), Role::Unlabeled) => {
                        return Err(Error::Validation(format!(
                            "unlabeled sample '{}' carries a label",
                            s.id
                        )))
                    }
                    (None, r) if r != Role::Unlabeled => {
                        return Err(Error::Validation(format!(
                            "{role} sample '{}' has no label",
                            s.id
                        )))
                    }
                    _ => {}
                }
                let key = (s.image.dims(), s.image.spacing());
                match reference {
                    None => reference = Some(key),
                    Some(r) if r != key => {
                        return Err(Error::Validation(format!(
                            "sample '{}' has dims {:?}, expected {:?}",
                            s.id,
                            key.0.extents(),
                            r.0.extents()
                        )))
                    }
                    _ => {}
                }
                if let Some(l) = &s.label {
                    if l.dims() != s.image.dims() {
                        return Err(Error::Validation(format!(
                            "label dims of '{}' differ from its image",
                            s.id
                        )));
                    }
                    if l.num_classes() != num_classes {
                        return Err(Error::Validation(format!(
                            "label of '{}' declares {} classes, split has {num_classes}",
                            s.id,
                            l.num_classes()
                        )));
                    }
                }
            }
        }
        Ok(split)
    }

    pub fn pools(&self) -> [(Role, &[Sample]); 4] {
        [
            (Role::Labeled, &self.labeled),
            (Role::Unlabeled, &self.unlabeled),
            (Role::Val, &self.validation),
            (Role::Test, &self.test),
        ]
    }

    /// Shared raster dims, if the split is nonempty.
    pub fn dims(&self) -> Option<Dims> {
        self.pools()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|s| s.image.dims())
            .next()
    }
}

struct Entry {
    line: usize,
    role: Role,
    id: String,
    image: PathBuf,
    label: Option<PathBuf>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut declared: Option<usize> = None;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if let Some(directive) = trimmed.strip_prefix("#!") {
            let toks: Vec<&str> = directive.split_whitespace().collect();
            match toks.as_slice() {
                ["num_classes", m] => {
                    let m: usize = m
                        .parse()
                        .map_err(|_| err(line, format!("bad num_classes '{m}'")))?;
                    if !(2..=256).contains(&m) {
                        return Err(err(line, format!("num_classes {m} outside 2..=256")));
                    }
                    declared = Some(m);
                }
                _ => return Err(err(line, format!("unknown directive '{trimmed}'"))),
            }
            continue;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if !(3..=4).contains(&toks.len()) {
            return Err(err(
                line,
                format!("expected '<role> <id> <image> [<label>]', got {} fields", toks.len()),
            ));
        }
        let role: Role = toks[0].parse().map_err(|m| err(line, m))?;
        entries.push(Entry {
            line,
            role,
            id: toks[1].to_string(),
            image: base.join(toks[2]),
            label: toks.get(3).map(|p| base.join(p)),
        });
    }

    let mut loaded = Vec::with_capacity(entries.len());
    let mut max_label = 0usize;
    for e in &entries {
        let image = match load_volume(&e.image).map_err(|x| err(e.line, x.to_string()))? {
            Raster::Real(v) => v,
            Raster::Label(_) => {
                return Err(err(e.line, format!("{} is a label map, expected an image", e.image.display())))
            }
        };
        let label = match &e.label {
            None => None,
            Some(p) => match load_volume(p).map_err(|x| err(e.line, x.to_string()))? {
                Raster::Label(l) => {
                    max_label = max_label.max(l.num_classes() - 1);
                    if l.dims() != image.dims() {
                        return Err(err(
                            e.line,
                            format!(
                                "label dims {:?} differ from image dims {:?}",
                                l.dims().extents(),
                                image.dims().extents()
                            ),
                        ));
                    }
                    Some(l)
                }
                Raster::Real(_) => {
                    return Err(err(e.line, format!("{} is an image, expected a label map", p.display())))
                }
            },
        };
        if e.role != Role::Unlabeled && label.is_none() {
            return Err(err(e.line, format!("{} entry '{}' needs a label path", e.role, e.id)));
        }
        if e.role == Role::Unlabeled && label.is_some() {
            return Err(err(e.line, format!("unlabeled entry '{}' must not list a label", e.id)));
        }
        loaded.push((e, image, label));
    }

    let num_classes = declared.unwrap_or((max_label + 1).max(2));
    let mut pools: [Vec<Sample>; 4] = Default::default();
    let mut first_dims: Option<(Dims, Spacing, usize)> = None;
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (e, image, label) in loaded {
        if let Some(prev) = ids.insert(e.id.clone(), e.line) {
            return Err(err(e.line, format!("duplicate sample id '{}' (first on line {prev})", e.id)));
        }
        match first_dims {
            None => first_dims = Some((image.dims(), image.spacing(), e.line)),
            Some((d, s, l)) if d != image.dims() || s != image.spacing() => {
                return Err(err(
                    e.line,
                    format!(
                        "shape mismatch: dims {:?} / spacing {:?} differ from line {l} ({:?} / {:?})",
                        image.dims().extents(),
                        image.spacing(),
                        d.extents(),
                        s
                    ),
                ))
            }
            _ => {}
        }
        let label = label
            .map(|l| l.with_num_classes(num_classes))
            .transpose()
            .map_err(|x| err(e.line, x.to_string()))?;
        let idx = match e.role {
            Role::Labeled => 0,
            Role::Unlabeled => 1,
            Role::Val => 2,
            Role::Test => 3,
        };
        pools[idx].push(Sample {
            id: e.id.clone(),
            image,
            label,
        });
    }
    let [labeled, unlabeled, validation, test] = pools;
    DatasetSplit::new(labeled, unlabeled, validation, test, num_classes)
}

/// Writes manifest lines `(role, id, image, label)` with paths relative to
/// the manifest directory.
pub fn write_manifest(
    path: impl AsRef<Path>,
    num_classes: usize,
    entries: &[(Role, String, String, Option<String>)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("#! num_classes {num_classes}\n"));
    for (role, id, image, label) in entries {
        match label {
            Some(l) => out.push_str(&format!("{role} {id} {image} {l}\n")),
            None => out.push_str(&format!("{role} {id} {image}\n")),
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
