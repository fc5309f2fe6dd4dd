//! Intensity normalization, long-side resizing and multi-crop view sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::ViewRole;
use crate::rng;
use crate::tokenizer::{Modality, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub global_views: usize,
    pub local_views: usize,
    pub global_scale: [f32; 2],
    pub local_scale: [f32; 2],
    pub long_side_2d: usize,
    pub long_side_3d: usize,
    pub ct_window: f32,
    pub ct_level: f32,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            global_views: 2,
            local_views: 8,
            global_scale: [0.3, 1.0],
            local_scale: [0.05, 0.3],
            long_side_2d: 224,
            long_side_3d: 112,
            ct_window: 2500.0,
            ct_level: 250.0,
        }
    }
}

impl ViewConfig {
    pub fn views_per_sample(&self) -> usize {
        self.global_views + self.local_views
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_views == 0 {
            return Err(Error::Config("views.global_views must be at least 1".into()));
        }
        for (name, r) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::Config(format!("views.{name} {r:?} must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if self.global_scale[1] != 1.0 {
            return Err(Error::Config("views.global_scale upper bound must be 1.0".into()));
        }
        if !(self.ct_window > 0.0) {
            return Err(Error::Config("views.ct_window must be positive".into()));
        }
        Ok(())
    }

    pub fn long_side(&self, modality: Modality) -> usize {
        match modality {
            Modality::Xray2d => self.long_side_2d,
            Modality::Ct3d => self.long_side_3d,
        }
    }
}

/// Min-max scaling to `[-1, 1]`; a constant image maps to zeros.
pub fn normalize_xray(image: &Volume) -> Result<Volume> {
    let d = image.data();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x-ray pixels".into()));
    }
    let (lo, hi) = d
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let out = if hi > lo {
        let (lo, span) = (lo as f64, (hi - lo) as f64);
        d.iter()
            .map(|&v| ((2.0 * (v as f64 - lo) / span) - 1.0).clamp(-1.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; d.len()]
    };
    Ok(image.with_data(out, (-1.0, 1.0)))
}

/// Clamps to `[level - window/2, level + window/2]` and maps that interval
/// linearly onto `[-1, 1]`.
pub fn normalize_ct(volume: &Volume, window: f32, level: f32) -> Result<Volume> {
    if !(window > 0.0) {
        return Err(Error::invalid(format!("CT window must be positive, got {window}")));
    }
    let lo = level as f64 - window as f64 / 2.0;
    let hi = level as f64 + window as f64 / 2.0;
    let out = volume
        .data()
        .iter()
        .map(|&v| {
            let c = (v as f64).clamp(lo, hi);
            (2.0 * (c - lo) / (hi - lo) - 1.0) as f32
        })
        .collect();
    Ok(volume.with_data(out, (-1.0, 1.0)))
}

/// Spatial axes that carry image content: `(H, W)` for 2D, `(Z, H, W)` for 3D.
fn content_axes(v: &Volume) -> &'static [usize] {
    if v.modality().is_2d() {
        &[1, 2]
    } else {
        &[0, 1, 2]
    }
}

/// Linear resampling of one spatial axis with half-pixel centers.
fn resize_axis(data: &[f32], dims: [usize; 4], axis: usize, new_len: usize) -> Vec<f32> {
    let ax = axis + 1; // skip channels
    let old_len = dims[ax];
    let outer: usize = dims[..ax].iter().product();
    let inner: usize = dims[ax + 1..].iter().product();
    let scale = old_len as f64 / new_len as f64;
    let taps: Vec<(usize, usize, f32)> = (0..new_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(old_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect();
    let mut out = vec![0.0; outer * new_len * inner];
    for o in 0..outer {
        for (i, &(i0, i1, t)) in taps.iter().enumerate() {
            let a = &data[(o * old_len + i0) * inner..(o * old_len + i0 + 1) * inner];
            let b = &data[(o * old_len + i1) * inner..(o * old_len + i1 + 1) * inner];
            let dst = &mut out[(o * new_len + i) * inner..(o * new_len + i + 1) * inner];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = x + t * (y - x);
            }
        }
    }
    out
}

/// Scales the longest content axis to `target`, preserving aspect ratio
/// (bilinear for 2D, trilinear for 3D).
pub fn downsize_long_side(v: &Volume, target: usize, min_len: usize) -> Result<Volume> {
    if target < min_len {
        return Err(Error::invalid(format!("target {target} is shorter than the patch size {min_len}")));
    }
    let axes = content_axes(v);
    let sp = v.spatial();
    let long = axes.iter().map(|&a| sp[a]).max().unwrap();
    if long == target {
        return Ok(v.clone());
    }
    let factor = target as f64 / long as f64;
    let mut new_sp = sp;
    for &a in axes {
        new_sp[a] = if sp[a] == long {
            target
        } else {
            ((sp[a] as f64 * factor).round() as usize).max(1)
        };
        if new_sp[a] < min_len {
            return Err(Error::invalid(format!(
                "resizing {sp:?} to long side {target} gives axis length {} < {min_len}",
                new_sp[a]
            )));
        }
    }
    let mut dims = v.dims();
    let mut data = v.data().to_vec();
    for &a in axes {
        if new_sp[a] != dims[a + 1] {
            data = resize_axis(&data, dims, a, new_sp[a]);
            dims[a + 1] = new_sp[a];
        }
    }
    Ok(Volume::from_parts(dims, data, v.modality(), v.intensity_range(), v.is_promoted()))
}

/// Normalizes by modality and resizes to the configured long side.
pub fn prepare(raw: &Volume, cfg: &ViewConfig, patch: usize) -> Result<Volume> {
    let n = match raw.modality() {
        Modality::Xray2d => normalize_xray(raw)?,
        Modality::Ct3d => normalize_ct(raw, cfg.ct_window, cfg.ct_level)?,
    };
    downsize_long_side(&n, cfg.long_side(raw.modality()), patch)
}

/// Crop box in `(Z, H, W)` voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub start: [usize; 3],
    pub extent: [usize; 3],
    /// Extents before snapping to multiples of the patch size.
    pub drawn: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub volume: Volume,
    pub role: ViewRole,
    pub crop: Crop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub sample_id: u64,
    pub views: Vec<View>,
}

pub fn crop_volume(v: &Volume, start: [usize; 3], extent: [usize; 3]) -> Volume {
    let [c, _, _, _] = v.dims();
    let mut data = Vec::with_capacity(c * extent.iter().product::<usize>());
    for ch in 0..c {
        for z in start[0]..start[0] + extent[0] {
            for h in start[1]..start[1] + extent[1] {
                let i = v.index(ch, z, h, start[2]);
                data.extend_from_slice(&v.data()[i..i + extent[2]]);
            }
        }
    }
    Volume::from_parts(
        [c, extent[0], extent[1], extent[2]],
        data,
        v.modality(),
        v.intensity_range(),
        v.is_promoted(),
    )
}

fn check_min_size(v: &Volume, p: usize) -> Result<()> {
    let sp = v.spatial();
    for &a in content_axes(v) {
        if sp[a] < p {
            return Err(Error::invalid(format!("input {sp:?} is smaller than P={p} on axis {a}")));
        }
    }
    Ok(())
}

fn crop_for_fraction(v: &Volume, frac: f64, p: usize, rng: &mut rng::Rng) -> Crop {
    let sp = v.spatial();
    let axes = content_axes(v);
    let per_axis = frac.powf(1.0 / axes.len() as f64);
    let mut crop = Crop {
        start: [0; 3],
        extent: sp,
        drawn: sp,
    };
    for &a in axes {
        let len = sp[a];
        let drawn = ((len as f64 * per_axis).round() as usize).clamp(1, len);
        let pos = rng.random_range(0..=len - drawn);
        let snapped = ((drawn / p) * p).max(p);
        let centered = pos as isize + (drawn as isize - snapped as isize) / 2;
        crop.drawn[a] = drawn;
        crop.extent[a] = snapped;
        crop.start[a] = centered.clamp(0, (len - snapped) as isize) as usize;
    }
    crop
}

/// `V_g` global then `V_l` local random crops, deterministic in `seed`.
///
/// Each crop's area (2D) or volume (3D) fraction is uniform in the role's
/// scale range; every content axis is scaled by `fraction^(1/k)`, positioned
/// uniformly, then snapped down to a multiple of `p` (at least `p`) around
/// the drawn crop's center.
pub fn sample_views(v: &Volume, cfg: &ViewConfig, p: usize, seed: u64) -> Result<ViewSet> {
    check_min_size(v, p)?;
    let n = cfg.views_per_sample();
    let mut views = Vec::with_capacity(n);
    for i in 0..n {
        let (role, [lo, hi]) = if i < cfg.global_views {
            (ViewRole::Global, cfg.global_scale)
        } else {
            (ViewRole::Local, cfg.local_scale)
        };
        let mut r = rng::stream(seed, &[rng::tag::VIEWS, i as u64]);
        let frac = if hi > lo {
            r.random_range(lo as f64..=hi as f64)
        } else {
            lo as f64
        };
        let crop = crop_for_fraction(v, frac, p, &mut r);
        views.push(View {
            volume: crop_volume(v, crop.start, crop.extent),
            role,
            crop,
        });
    }
    Ok(ViewSet { sample_id: 0, views })
}

/// The maximal central crop whose content axes are multiples of `p`.
pub fn center_view(v: &Volume, p: usize) -> Result<View> {
    check_min_size(v, p)?;
    let sp = v.spatial();
    let mut crop = Crop {
        start: [0; 3],
        extent: sp,
        drawn: sp,
    };
    for &a in content_axes(v) {
        crop.extent[a] = (sp[a] / p) * p;
        crop.start[a] = (sp[a] - crop.extent[a]) / 2;
    }
    Ok(View {
        volume: crop_volume(v, crop.start, crop.extent),
        role: ViewRole::Full,
        crop,
    })
}
