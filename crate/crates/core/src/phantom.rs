//! Synthetic 3D volumes with injected benign and malignant lesions.

use std::path::Path;

use ndarray::{s, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Payload, Record};
use crate::error::{config_err, Error, Result};
use crate::global::{BENIGN, MALIGNANT, NUM_CLASSES};
use crate::rng::stream;

/// Image-level labels `[benign, malignant]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Labels {
    pub benign: bool,
    pub malignant: bool,
}

impl Labels {
    pub fn get(&self, class: usize) -> bool {
        match class {
            BENIGN => self.benign,
            MALIGNANT => self.malignant,
            _ => panic!("class index {class} out of range"),
        }
    }

    pub fn as_array(&self) -> [bool; 2] {
        [self.benign, self.malignant]
    }
}

/// One grayscale volume stored slice-major as `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub labels: Labels,
    /// Per-class voxel ground truth `[class, D, H, W]`; evaluation only.
    pub mask: Option<Array4<u8>>,
    pub group_id: u32,
    pub view_id: u8,
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    /// Checks intensity range, depth and label/mask agreement.
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Invariant("volume has an empty axis".into()));
        }
        if self.voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant(format!(
                "group {} view {}: intensity outside [0, 1]",
                self.group_id, self.view_id
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (NUM_CLASSES, d, h, w) {
                return Err(Error::Shape(format!("mask shape {:?} does not match volume", m.dim())));
            }
            for c in 0..NUM_CLASSES {
                let any = m.slice(s![c, .., .., ..]).iter().any(|&v| v != 0);
                if any != self.labels.get(c) {
                    return Err(Error::Invariant(format!(
                        "group {} view {}: class {c} mask/label disagree",
                        self.group_id, self.view_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generator parameters. Ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: [usize; 2],
    pub width: [usize; 2],
    pub depth: [usize; 2],
    /// Lesion count per class for a volume carrying that class.
    pub lesions_per_class: [usize; 2],
    /// In-plane lesion radius in voxels.
    pub radius: [f64; 2],
    /// Through-plane radius as a fraction of the in-plane radius.
    pub z_scale: f64,
    pub benign_contrast: f64,
    pub malignant_contrast: f64,
    /// Relative amplitude of the malignant boundary's radial noise, in `[0, 1)`.
    pub malignant_irregularity: f64,
    pub background: f64,
    pub noise_scale: f64,
    pub benign_prevalence: f64,
    pub malignant_prevalence: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: [96, 96],
            width: [96, 96],
            depth: [8, 24],
            lesions_per_class: [1, 2],
            radius: [4.0, 7.0],
            z_scale: 0.5,
            benign_contrast: 0.25,
            malignant_contrast: 0.3,
            malignant_irregularity: 0.35,
            background: 0.3,
            noise_scale: 0.08,
            benign_prevalence: 0.3,
            malignant_prevalence: 0.3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Single large, high-contrast lesions: learnable within a few epochs.
    pub fn easy() -> Self {
        Self {
            lesions_per_class: [1, 1],
            radius: [8.0, 12.0],
            benign_contrast: 0.35,
            malignant_contrast: 0.4,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("phantom spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("height", self.height), ("width", self.width), ("depth", self.depth)] {
            if r[0] == 0 || r[0] > r[1] {
                return config_err(format!("{name} range {r:?} is invalid"));
            }
        }
        let [lo, hi] = self.lesions_per_class;
        if lo == 0 || lo > hi {
            return config_err(format!("lesions_per_class {:?} is invalid", self.lesions_per_class));
        }
        let [rlo, rhi] = self.radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return config_err(format!("radius range {:?} is invalid", self.radius));
        }
        let min_side = self.height[0].min(self.width[0]) as f64;
        if 2.0 * (rhi * (1.0 + self.malignant_irregularity) + 1.0) >= min_side {
            return config_err("lesions must be small relative to the image");
        }
        if !(self.z_scale > 0.0) {
            return config_err("z_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.malignant_irregularity) {
            return config_err("malignant_irregularity must lie in [0, 1)");
        }
        for (name, p) in [("benign_prevalence", self.benign_prevalence), ("malignant_prevalence", self.malignant_prevalence)] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.background) || self.noise_scale < 0.0 {
            return config_err("background must lie in [0, 1] and noise_scale must be non-negative");
        }
        Ok(())
    }
}

/// Shape of one lesion, shared by both views of its group.
#[derive(Debug, Clone)]
struct LesionShape {
    class: usize,
    radius: f64,
    /// `(harmonic, amplitude, phase)` of the radial boundary perturbation.
    harmonics: Vec<(f64, f64, f64)>,
}

impl LesionShape {
    fn sample<R: Rng>(class: usize, spec: &PhantomSpec, rng: &mut R) -> Self {
        let radius = rng.gen_range(spec.radius[0]..=spec.radius[1]);
        let harmonics = if class == MALIGNANT && spec.malignant_irregularity > 0.0 {
            let raw: Vec<(f64, f64, f64)> = (3..=7)
                .map(|m| (m as f64, rng.gen_range(0.2..1.0), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            let total: f64 = raw.iter().map(|h| h.1).sum();
            raw.into_iter()
                .map(|(m, a, p)| (m, a / total * spec.malignant_irregularity, p))
                .collect()
        } else {
            Vec::new()
        };
        Self { class, radius, harmonics }
    }

    /// Boundary radius in the direction `theta`; within `radius * (1 +- irregularity)`.
    fn boundary(&self, theta: f64) -> f64 {
        let pert: f64 = self.harmonics.iter().map(|&(m, a, p)| a * (m * theta + p).cos()).sum();
        self.radius * (1.0 + pert)
    }

    fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.1).sum::<f64>())
    }
}

/// Falloff of lesion intensity with normalized radius `rho` (mask is `rho <= 1`).
fn profile(rho: f64) -> f64 {
    const INNER: f64 = 0.7;
    const OUTER: f64 = 1.3;
    if rho <= INNER {
        1.0
    } else if rho >= OUTER {
        0.0
    } else {
        let t = (rho - INNER) / (OUTER - INNER);
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Trilinearly interpolated coarse uniform noise in `[-1, 1]`.
fn smooth_noise<R: Rng>(d: usize, h: usize, w: usize, cell: usize, rng: &mut R) -> Array3<f64> {
    let cd = d / 2 + 2;
    let ch = h / cell + 2;
    let cw = w / cell + 2;
    let coarse = Array3::from_shape_fn((cd, ch, cw), |_| rng.gen_range(-1.0..1.0));
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let fz = z as f64 / 2.0;
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let (z0, y0, x0) = (fz as usize, fy as usize, fx as usize);
        let (tz, ty, tx) = (fz - z0 as f64, fy - y0 as f64, fx - x0 as f64);
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    acc += wz * wy * wx * coarse[[z0 + dz, y0 + dy, x0 + dx]];
                }
            }
        }
        acc
    })
}

struct GroupPlan {
    labels: Labels,
    lesions: Vec<LesionShape>,
}

fn plan_group(spec: &PhantomSpec, group: u64) -> GroupPlan {
    let mut rng = stream(spec.seed, &[0, group]);
    let labels = Labels {
        benign: rng.gen_bool(spec.benign_prevalence),
        malignant: rng.gen_bool(spec.malignant_prevalence),
    };
    let mut lesions = Vec::new();
    for (class, present) in [(BENIGN, labels.benign), (MALIGNANT, labels.malignant)] {
        if present {
            let n = rng.gen_range(spec.lesions_per_class[0]..=spec.lesions_per_class[1]);
            lesions.extend((0..n).map(|_| LesionShape::sample(class, spec, &mut rng)));
        }
    }
    GroupPlan { labels, lesions }
}

fn render_view(spec: &PhantomSpec, plan: &GroupPlan, group: u32, view: u8, index: u64) -> Volume {
    let mut rng = stream(spec.seed, &[1, index]);
    let h = rng.gen_range(spec.height[0]..=spec.height[1]);
    let w = rng.gen_range(spec.width[0]..=spec.width[1]);
    let d = rng.gen_range(spec.depth[0]..=spec.depth[1]);
    let texture = smooth_noise(d, h, w, 12, &mut rng);
    let mut vox = Array3::from_shape_fn((d, h, w), |idx| {
        let white: f64 = StandardNormal.sample(&mut rng);
        spec.background + spec.noise_scale * (texture[idx] + 0.5 * white)
    });
    let mut mask = Array4::<u8>::zeros((NUM_CLASSES, d, h, w));
    for lesion in &plan.lesions {
        let rmax = lesion.max_radius();
        let rz = spec.z_scale * lesion.radius;
        let margin = rmax.ceil() as usize + 1;
        let cy = rng.gen_range(margin..h - margin) as f64;
        let cx = rng.gen_range(margin..w - margin) as f64;
        let zm = ((spec.z_scale * rmax).ceil() as usize).min((d - 1) / 2);
        let cz = rng.gen_range(zm..=d - 1 - zm) as f64;
        let contrast = if lesion.class == MALIGNANT {
            spec.malignant_contrast
        } else {
            spec.benign_contrast
        };
        let reach_xy = rmax * 1.3 + 1.0;
        let reach_z = spec.z_scale * rmax * 1.3 + 1.0;
        let z_lo = (cz - reach_z).max(0.0) as usize;
        let z_hi = ((cz + reach_z) as usize).min(d - 1);
        let y_lo = (cy - reach_xy).max(0.0) as usize;
        let y_hi = ((cy + reach_xy) as usize).min(h - 1);
        let x_lo = (cx - reach_xy).max(0.0) as usize;
        let x_hi = ((cx + reach_xy) as usize).min(w - 1);
        for z in z_lo..=z_hi {
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let dz = (z as f64 - cz) * lesion.radius / rz;
                    let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                    let rho = if dist == 0.0 { 0.0 } else { dist / lesion.boundary(dy.atan2(dx)) };
                    let f = profile(rho);
                    if f == 0.0 {
                        continue;
                    }
                    let tex = if lesion.class == MALIGNANT {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        1.0 + 0.25 * n
                    } else {
                        1.0
                    };
                    vox[[z, y, x]] += contrast * f * tex;
                    if rho <= 1.0 {
                        mask[[lesion.class, z, y, x]] = 1;
                    }
                }
            }
        }
    }
    Volume {
        voxels: vox.mapv(|v| v.clamp(0.0, 1.0) as f32),
        labels: plan.labels,
        mask: Some(mask),
        group_id: group,
        view_id: view,
    }
}

/// Two views per group; view `v` of group `g` is volume `2g + v` and draws
/// from its own RNG stream, so any parallel schedule gives identical output.
pub fn generate_dataset(spec: &PhantomSpec, n_groups: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_groups == 0 {
        return config_err("at least one group is required");
    }
    let volumes: Vec<Volume> = (0..2 * n_groups)
        .into_par_iter()
        .map(|idx| {
            let g = idx / 2;
            let plan = plan_group(spec, g as u64);
            render_view(spec, &plan, g as u32, (idx % 2) as u8, idx as u64)
        })
        .collect();
    Ok(Dataset {
        spec: Some(spec.clone()),
        volumes,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub spec: Option<PhantomSpec>,
    pub volumes: Vec<Volume>,
}

pub const DATASET_FILE: &str = "dataset.g3d";

impl Dataset {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Splits by group: groups with `group_id % modulus == modulus - 1` go to the second set.
    pub fn split_by_group(&self, modulus: u32) -> (Dataset, Dataset) {
        let (a, b) = self
            .volumes
            .iter()
            .cloned()
            .partition(|v| modulus <= 1 || v.group_id % modulus != modulus - 1);
        (
            Dataset {
                spec: self.spec.clone(),
                volumes: a,
            },
            Dataset {
                spec: self.spec.clone(),
                volumes: b,
            },
        )
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "dataset",
            json!({
                "volumes": self.volumes.len(),
                "layout": "DHW",
                "mask_layout": "CDHW",
                "classes": ["benign", "malignant"],
                "spec": self.spec,
            }),
        );
        for (i, v) in self.volumes.iter().enumerate() {
            let (d, h, w) = v.voxels.dim();
            let data = v.voxels.as_standard_layout().iter().copied().collect();
            c.records.push(
                Record::new(format!("volume/{i}"), vec![d, h, w], Payload::F32(data))
                    .with_attr("benign", v.labels.benign)
                    .with_attr("malignant", v.labels.malignant)
                    .with_attr("group", v.group_id)
                    .with_attr("view", v.view_id)
                    .with_attr("has_mask", v.mask.is_some()),
            );
            if let Some(m) = &v.mask {
                let data = m.as_standard_layout().iter().copied().collect();
                c.records.push(Record::new(format!("mask/{i}"), vec![NUM_CLASSES, d, h, w], Payload::U8(data)));
            }
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let fmt = |record: &str, reason: &str| Error::Format {
            path: path.to_path_buf(),
            record: record.to_string(),
            reason: reason.to_string(),
        };
        if c.kind != "dataset" {
            return Err(fmt("<header>", "container is not a dataset"));
        }
        let spec = match c.meta.get("spec") {
            Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone()).map_err(|e| fmt("<header>", &e.to_string()))?),
            _ => None,
        };
        let n = c.meta.get("volumes").and_then(|v| v.as_u64()).ok_or_else(|| fmt("<header>", "missing volume count"))? as usize;
        let mut volumes = Vec::with_capacity(n);
        let mut recs = c.records.iter().peekable();
        for i in 0..n {
            let name = format!("volume/{i}");
            let r = recs.next().filter(|r| r.name == name).ok_or_else(|| fmt(&name, "missing record"))?;
            let Payload::F32(data) = &r.payload else {
                return Err(fmt(&name, "voxels must be f32"));
            };
            let [d, h, w] = r.shape[..] else {
                return Err(fmt(&name, "voxels must be 3D"));
            };
            let voxels = Array3::from_shape_vec((d, h, w), data.clone()).map_err(|e| fmt(&name, &e.to_string()))?;
            let flag = |k: &str| r.attrs.get(k).and_then(|v| v.as_bool()).ok_or_else(|| fmt(&name, &format!("missing `{k}`")));
            let num = |k: &str| r.attrs.get(k).and_then(|v| v.as_u64()).ok_or_else(|| fmt(&name, &format!("missing `{k}`")));
            let labels = Labels {
                benign: flag("benign")?,
                malignant: flag("malignant")?,
            };
            let mask = if flag("has_mask")? {
                let mname = format!("mask/{i}");
                let m = recs.next().filter(|r| r.name == mname).ok_or_else(|| fmt(&mname, "missing record"))?;
                let Payload::U8(md) = &m.payload else {
                    return Err(fmt(&mname, "mask must be u8"));
                };
                Some(Array4::from_shape_vec((NUM_CLASSES, d, h, w), md.clone()).map_err(|e| fmt(&mname, &e.to_string()))?)
            } else {
                None
            };
            volumes.push(Volume {
                voxels,
                labels,
                mask,
                group_id: num("group")? as u32,
                view_id: num("view")? as u8,
            });
        }
        if let Some(r) = recs.next() {
            return Err(fmt(&r.name, "unexpected record"));
        }
        Ok(Dataset { spec, volumes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c, path)
    }

    /// Accepts either a container file or a directory holding [`DATASET_FILE`].
    pub fn load_any(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(DATASET_FILE))
        } else {
            Self::load(path)
        }
    }
}
