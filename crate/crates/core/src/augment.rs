//! In-plane shift/resize augmentation applied identically to every slice.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::phantom::Volume;

/// Bounds in full-resolution pixels. The full-size pipeline uses up to 100
/// pixels on ~2116x1339 crops; on 96-pixel slices that scales to ~4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_shift: u32,
    pub max_resize: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 4,
            max_resize: 4,
        }
    }
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        max_shift: 0,
        max_resize: 0,
    };
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub dx: i32,
    pub dy: i32,
    /// Change of the image side in pixels; scale = (side + resize) / side.
    pub resize: i32,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { dx: 0, dy: 0, resize: 0 };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let s = cfg.max_shift as i32;
        let r = cfg.max_resize as i32;
        Self {
            dx: rng.gen_range(-s..=s),
            dy: rng.gen_range(-s..=s),
            resize: rng.gen_range(-r..=r),
        }
    }

    /// Source coordinate for output pixel `(y, x)` on an `h x w` slice.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let sy = (h as f64 + self.resize as f64) / h as f64;
        let sx = (w as f64 + self.resize as f64) / w as f64;
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        (
            (y as f64 - self.dy as f64 - cy) / sy + cy,
            (x as f64 - self.dx as f64 - cx) / sx + cx,
        )
    }
}

/// Bilinear resampling with zero fill outside the source image.
pub fn apply_voxels(voxels: &Array3<f32>, t: &Transform) -> Array3<f32> {
    if *t == Transform::IDENTITY {
        return voxels.clone();
    }
    let (d, h, w) = voxels.dim();
    let at = |z: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            voxels[[z, y as usize, x as usize]] as f64
        }
    };
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let (fy, fx) = t.source(y, x, h, w);
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v = (1.0 - ty) * ((1.0 - tx) * at(z, y0, x0) + tx * at(z, y0, x0 + 1))
            + ty * ((1.0 - tx) * at(z, y0 + 1, x0) + tx * at(z, y0 + 1, x0 + 1));
        v as f32
    })
}

/// Nearest-neighbour resampling for label masks.
pub fn apply_mask(mask: &Array4<u8>, t: &Transform) -> Array4<u8> {
    if *t == Transform::IDENTITY {
        return mask.clone();
    }
    let (c, d, h, w) = mask.dim();
    Array4::from_shape_fn((c, d, h, w), |(ci, z, y, x)| {
        let (fy, fx) = t.source(y, x, h, w);
        let (yy, xx) = (fy.round(), fx.round());
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0
        } else {
            mask[[ci, z, yy as usize, xx as usize]]
        }
    })
}

pub fn apply(volume: &Volume, t: &Transform) -> Volume {
    Volume {
        voxels: apply_voxels(&volume.voxels, t),
        labels: volume.labels,
        mask: volume.mask.as_ref().map(|m| apply_mask(m, t)),
        group_id: volume.group_id,
        view_id: volume.view_id,
    }
}

/// Random shift/resize; labels and identifiers are carried over unchanged.
pub fn augment<R: Rng + ?Sized>(volume: &Volume, cfg: &AugmentConfig, rng: &mut R) -> Volume {
    apply(volume, &Transform::sample(cfg, rng))
}
