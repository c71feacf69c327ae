//! Synthetic ellipse datasets with an intensity shift on the unlabeled pool.
//!
//! Each foreground shape is a rotated filled ellipse. With more than two
//! classes the ellipse is nested: class 1 is the outer ring, each further
//! class a concentric ellipse scaled down inside the previous one.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{
    load_manifest, save_label_map, save_volume, write_manifest, DatasetSplit, Dims, LabelMap,
    Role, Volume, UNIT_SPACING,
};
use crate::error::{Error, Result};

/// Semi-axis range as a fraction of the image side.
pub const AXIS_RANGE: (f64, f64) = (0.12, 0.25);
/// Ellipse centre range as a fraction of the image side.
pub const CENTER_RANGE: (f64, f64) = (0.3, 0.7);
/// Scale of each nested class relative to the outer ellipse.
const NEST_STEP: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of shapes per image.
    pub shapes: (usize, usize),
    /// Mean intensity per class; length `num_classes`.
    pub intensity_means: Vec<f64>,
    pub noise_sigma: f64,
    pub shift_delta: f64,
    pub counts: RoleCounts,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::new(2)
    }
}

impl SynthSpec {
    /// Defaults for `num_classes` classes: 64² images, one or two shapes,
    /// means evenly spread over `[0.1, 0.9]`, noise 0.1, shift 0.3.
    pub fn new(num_classes: usize) -> Self {
        let m = num_classes.max(2);
        let means = (0..m).map(|c| 0.1 + 0.8 * c as f64 / (m - 1) as f64).collect();
        SynthSpec {
            image_size: 64,
            num_classes,
            shapes: (1, 2),
            intensity_means: means,
            noise_sigma: 0.1,
            shift_delta: 0.3,
            counts: RoleCounts {
                labeled: 4,
                unlabeled: 28,
                val: 4,
                test: 8,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Validation(format!("image_size {} < 16", self.image_size)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Validation(format!(
                "num_classes {} outside [2, 255]",
                self.num_classes
            )));
        }
        if self.intensity_means.len() != self.num_classes {
            return Err(Error::Validation(format!(
                "{} intensity means for {} classes",
                self.intensity_means.len(),
                self.num_classes
            )));
        }
        if !self.intensity_means.iter().all(|v| v.is_finite()) || !self.shift_delta.is_finite() {
            return Err(Error::Validation("non-finite intensity parameter".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(Error::Validation(format!("shape range {:?} is empty", self.shapes)));
        }
        Ok(())
    }

    /// Expected foreground fraction of a single ellipse, ignoring pixelation.
    pub fn expected_single_ellipse_fraction() -> f64 {
        let mean_axis = 0.5 * (AXIS_RANGE.0 + AXIS_RANGE.1);
        std::f64::consts::PI * mean_axis * mean_axis
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn sample<R: Rng + ?Sized>(n: f64, rng: &mut R) -> Self {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cy: n * rng.random_range(CENTER_RANGE.0..CENTER_RANGE.1),
            cx: n * rng.random_range(CENTER_RANGE.0..CENTER_RANGE.1),
            a: n * rng.random_range(AXIS_RANGE.0..AXIS_RANGE.1),
            b: n * rng.random_range(AXIS_RANGE.0..AXIS_RANGE.1),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Whether pixel centre `(y, x)` lies inside the ellipse scaled by `s`.
    fn contains(&self, y: usize, x: usize, s: f64) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let (a, b) = (self.a * s, self.b * s);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

/// Draws one noisy image and its label map. Shapes are painted in order, so
/// later shapes overwrite earlier ones.
pub fn sample_image<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> (Volume, LabelMap) {
    let n = spec.image_size;
    let count = rng.random_range(spec.shapes.0..=spec.shapes.1);
    let mut labels = vec![0u8; n * n];
    for _ in 0..count {
        let e = Ellipse::sample(n as f64, rng);
        for c in 1..spec.num_classes {
            let s = 1.0 - NEST_STEP * (c - 1) as f64;
            for y in 0..n {
                for x in 0..n {
                    if e.contains(y, x, s) {
                        labels[y * n + x] = c as u8;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let data: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (spec.intensity_means[l as usize] + eps) as f32
        })
        .collect();
    let dims = Dims::new2(n, n).expect("validated size");
    (
        Volume::new(dims, UNIT_SPACING, data).expect("finite synthetic image"),
        LabelMap::new(dims, UNIT_SPACING, labels, spec.num_classes).expect("labels in range"),
    )
}

/// Independent stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn role_prefix(role: Role) -> &'static str {
    match role {
        Role::Labeled => "l",
        Role::Unlabeled => "u",
        Role::Val => "v",
        Role::Test => "t",
    }
}

/// Writes `manifest.txt`, `images/`, `labels/` and `hidden/` (unlabeled
/// ground truth) under `out_dir` and returns the loaded split.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "labels", "hidden"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let roles = [
        (Role::Labeled, spec.counts.labeled),
        (Role::Unlabeled, spec.counts.unlabeled),
        (Role::Val, spec.counts.val),
        (Role::Test, spec.counts.test),
    ];
    let mut entries = Vec::new();
    let mut index = 0u64;
    for (role, count) in roles {
        for k in 0..count {
            let id = format!("{}{k:03}", role_prefix(role));
            let mut rng = sample_rng(spec.seed, index);
            index += 1;
            let (mut image, label) = sample_image(spec, &mut rng);
            if role == Role::Unlabeled && spec.shift_delta != 0.0 {
                let shifted = image.data().iter().map(|&v| (v as f64 + spec.shift_delta) as f32).collect();
                image = Volume::new(image.dims(), image.spacing(), shifted)?;
            }
            let image_rel = format!("images/{id}.pvol");
            save_volume(&image, out.join(&image_rel))?;
            let label_rel = if role == Role::Unlabeled {
                save_label_map(&label, out.join(format!("hidden/{id}.pvol")))?;
                None
            } else {
                let rel = format!("labels/{id}.pvol");
                save_label_map(&label, out.join(&rel))?;
                Some(rel)
            };
            entries.push((role, id, image_rel, label_rel));
        }
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, spec.num_classes, &entries)?;
    load_manifest(&manifest)
}

/// Ground truth of the unlabeled pool from `hidden/`, in split order.
pub fn load_hidden_labels(data_dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<Vec<LabelMap>> {
    let dir = data_dir.as_ref();
    split
        .unlabeled
        .iter()
        .map(|s| {
            let path = dir.join("hidden").join(format!("{}.pvol", s.id));
            match crate::datamodel::load_volume(&path)? {
                crate::datamodel::Raster::Label(l) => l.with_num_classes(split.num_classes),
                _ => Err(Error::Format(format!("{} is not a label map", path.display()))),
            }
        })
        .collect()
}
