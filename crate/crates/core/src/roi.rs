//! Greedy 3D region-of-interest retrieval with cross-slice suppression.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, Error, Result};
use crate::global::{SaliencyMap, NUM_CLASSES};
use crate::Scalar;

/// Half-width, in slices, of the suppression and jitter neighbourhood.
/// `Zeta::INF` covers every slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Zeta(pub usize);

impl Zeta {
    pub const INF: Zeta = Zeta(usize::MAX);

    pub fn is_inf(self) -> bool {
        self == Self::INF
    }

    /// `[d - zeta, d + zeta]` clamped to `[0, depth - 1]`.
    pub fn slice_range(self, d: usize, depth: usize) -> (usize, usize) {
        (d.saturating_sub(self.0), d.saturating_add(self.0).min(depth - 1))
    }
}

impl Default for Zeta {
    fn default() -> Self {
        Zeta(10)
    }
}

impl fmt::Display for Zeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_inf() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Zeta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Zeta::INF),
            other => other
                .parse::<usize>()
                .map(Zeta)
                .map_err(|_| Error::Config(format!("invalid zeta `{other}` (expected integer or `inf`)"))),
        }
    }
}

impl Serialize for Zeta {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_inf() {
            ser.serialize_str("inf")
        } else {
            ser.serialize_u64(self.0 as u64)
        }
    }
}

impl<'de> Deserialize<'de> for Zeta {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(de)? {
            Raw::N(n) => Ok(Zeta(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiParams {
    pub k: usize,
    pub zeta: Zeta,
    /// Window size in saliency-grid cells `(rows, cols)`.
    pub window: (usize, usize),
}

/// One greedy pick, in saliency-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPick<T> {
    /// Slice whose window won the argmax.
    pub picked_d: usize,
    /// Slice actually returned (differs from `picked_d` only under jitter).
    pub d: usize,
    pub i: usize,
    pub j: usize,
    pub score: T,
}

/// Top-left corner `(x, y)` and slice of a square full-resolution patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLocation {
    pub x: usize,
    pub y: usize,
    pub d: usize,
    pub size: usize,
}

impl PatchLocation {
    pub fn check(&self, depth: usize, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.size > height || self.size > width {
            return Err(Error::Invariant(format!("patch size {} does not fit {height}x{width}", self.size)));
        }
        if self.x > width - self.size || self.y > height - self.size || self.d >= depth {
            return Err(Error::Invariant(format!(
                "patch at (x={}, y={}, d={}) size {} leaves the {height}x{width}x{depth} volume",
                self.x, self.y, self.d, self.size
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> RoiPick<T> {
    /// Grid cell to image pixel: scale by the downsample factor, clamp inside.
    pub fn location(&self, downsample: usize, patch: usize, height: usize, width: usize) -> PatchLocation {
        PatchLocation {
            x: (self.j * downsample).min(width.saturating_sub(patch)),
            y: (self.i * downsample).min(height.saturating_sub(patch)),
            d: self.d,
            size: patch,
        }
    }
}

/// Saliency-grid window covering one `patch`-pixel patch.
pub fn window_cells(patch: usize, downsample: usize) -> usize {
    patch.div_ceil(downsample).max(1)
}

/// Min-max normalize each class over the whole 3D map and sum the classes.
/// A constant class map contributes zeros.
pub fn combine_class_maps<T: Scalar>(saliency: &SaliencyMap<T>) -> Array3<T> {
    let (d, h, w) = saliency.grid();
    let mut out = Array3::zeros((d, h, w));
    for c in 0..NUM_CLASSES {
        let cls = saliency.class(c);
        let (lo, hi) = cls.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if !(range > T::zero()) {
            continue;
        }
        out.zip_mut_with(&cls, |o, &v| *o += (v - lo) / range);
    }
    out
}

/// Footprints share at least one grid cell and the slices are within `zeta`.
pub fn conflicts(a: (usize, usize, usize), b: (usize, usize, usize), window: (usize, usize), zeta: Zeta) -> bool {
    let (da, ia, ja) = a;
    let (db, ib, jb) = b;
    ia.abs_diff(ib) < window.0 && ja.abs_diff(jb) < window.1 && da.abs_diff(db) <= zeta.0
}

/// Greedy selection on an already-combined map `[D, h, w]`.
///
/// Each pick maximizes the window sum on a single slice over windows that do
/// not conflict with an earlier pick; ties go to the smallest `(d, i, j)`.
/// The chosen window is then zeroed on slices `d +- zeta`. If no admissible
/// window remains, fewer than `k` picks are returned.
pub fn retrieve_from_combined<T: Scalar, R: Rng + ?Sized>(
    mut a_star: Array3<T>,
    params: &RoiParams,
    training: bool,
    rng: &mut R,
) -> Result<Vec<RoiPick<T>>> {
    let (depth, h, w) = a_star.dim();
    let (wh, ww) = params.window;
    if params.k == 0 {
        return config_err("number of patches must be at least 1");
    }
    if wh == 0 || ww == 0 || wh > h || ww > w || depth == 0 {
        return config_err(format!("window {wh}x{ww} does not fit a {h}x{w} saliency slice"));
    }
    let mut picks: Vec<RoiPick<T>> = Vec::with_capacity(params.k);
    for _ in 0..params.k {
        let mut best: Option<(T, usize, usize, usize)> = None;
        for d in 0..depth {
            let plane = a_star.slice(s![d, .., ..]);
            for i in 0..=h - wh {
                for j in 0..=w - ww {
                    if picks
                        .iter()
                        .any(|p| conflicts((p.picked_d, p.i, p.j), (d, i, j), params.window, params.zeta))
                    {
                        continue;
                    }
                    let mut score = T::zero();
                    for r in i..i + wh {
                        for c in j..j + ww {
                            score += plane[[r, c]];
                        }
                    }
                    if best.is_none_or(|(b, ..)| score > b) {
                        best = Some((score, d, i, j));
                    }
                }
            }
        }
        let Some((score, d, i, j)) = best else { break };
        let (lo, hi) = params.zeta.slice_range(d, depth);
        a_star.slice_mut(s![lo..=hi, i..i + wh, j..j + ww]).fill(T::zero());
        let returned = if training && depth > 1 { rng.gen_range(lo..=hi) } else { d };
        picks.push(RoiPick {
            picked_d: d,
            d: returned,
            i,
            j,
            score,
        });
    }
    Ok(picks)
}

pub fn retrieve_roi<T: Scalar, R: Rng + ?Sized>(
    saliency: &SaliencyMap<T>,
    params: &RoiParams,
    training: bool,
    rng: &mut R,
) -> Result<Vec<RoiPick<T>>> {
    retrieve_from_combined(combine_class_maps(saliency), params, training, rng)
}

/// Exact copy of a square patch from slice `loc.d` of a `[D, H, W]` volume.
pub fn crop_patch<T: Scalar>(voxels: &Array3<T>, loc: &PatchLocation) -> Result<Array2<T>> {
    let (depth, h, w) = voxels.dim();
    loc.check(depth, h, w)?;
    Ok(voxels
        .slice(s![loc.d, loc.y..loc.y + loc.size, loc.x..loc.x + loc.size])
        .to_owned())
}

/// Selected locations with their cropped sub-images.
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    pub picks: Vec<RoiPick<T>>,
    pub locations: Vec<PatchLocation>,
    pub patches: Vec<Array2<T>>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Checks the pairwise exclusion invariant on the picked slices.
    pub fn satisfies_exclusion(&self, window: (usize, usize), zeta: Zeta) -> bool {
        self.picks.iter().enumerate().all(|(a, p)| {
            self.picks[a + 1..]
                .iter()
                .all(|q| !conflicts((p.picked_d, p.i, p.j), (q.picked_d, q.i, q.j), window, zeta))
        })
    }
}

pub fn extract_patches<T: Scalar, R: Rng + ?Sized>(
    voxels: &Array3<T>,
    saliency: &SaliencyMap<T>,
    params: &RoiParams,
    patch_size: usize,
    training: bool,
    rng: &mut R,
) -> Result<PatchSet<T>> {
    let (_, h, w) = voxels.dim();
    let picks = retrieve_roi(saliency, params, training, rng)?;
    let locations: Vec<_> = picks
        .iter()
        .map(|p| p.location(saliency.downsample, patch_size, h, w))
        .collect();
    let patches = locations.iter().map(|l| crop_patch(voxels, l)).collect::<Result<_>>()?;
    Ok(PatchSet {
        picks,
        locations,
        patches,
    })
}
