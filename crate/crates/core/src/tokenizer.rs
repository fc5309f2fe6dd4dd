//! Volumes, cubic patchification and normalized 3D patch coordinates.
//!
//! Every input, 2D or 3D, becomes a `C x Z x H x W` volume. 2D images are
//! promoted to a pseudo-volume of depth `P` (image at slice 0, zeros
//! elsewhere) so that cubic patches yield a single-depth grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Xray2d,
    Ct3d,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Xray2d => 0,
            Modality::Ct3d => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Xray2d),
            1 => Ok(Modality::Ct3d),
            c => Err(Error::Format(format!("unknown modality code {c}"))),
        }
    }

    pub fn is_2d(self) -> bool {
        self == Modality::Xray2d
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Xray2d => "2d",
            Modality::Ct3d => "3d",
        }
    }
}

/// Channel-first dense volume `C x Z x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 4],
    data: Vec<f32>,
    modality: Modality,
    intensity_range: (f32, f32),
    promoted: bool,
}

impl Volume {
    /// Builds a volume; 2D inputs must have `Z = 1` and every value must be finite.
    pub fn new(
        dims: [usize; 4],
        data: Vec<f32>,
        modality: Modality,
        intensity_range: (f32, f32),
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("volume", format!("zero extent in {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "volume",
                format!("dims {dims:?} need {} values, got {}", dims.iter().product::<usize>(), data.len()),
            ));
        }
        if modality.is_2d() && dims[1] != 1 {
            return Err(Error::shape("volume", format!("2D input must have Z = 1, got {dims:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Volume {
            dims,
            data,
            modality,
            intensity_range,
            promoted: false,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    /// Spatial extents `(Z, H, W)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    pub fn is_promoted(&self) -> bool {
        self.promoted
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, h: usize, w: usize) -> usize {
        let [_, zd, hd, wd] = self.dims;
        ((c * zd + z) * hd + h) * wd + w
    }

    pub fn get(&self, c: usize, z: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, z, h, w)]
    }

    /// Same geometry and modality, new values.
    pub(crate) fn with_data(&self, data: Vec<f32>, intensity_range: (f32, f32)) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            data,
            intensity_range,
            ..self.clone()
        }
    }

    pub(crate) fn from_parts(
        dims: [usize; 4],
        data: Vec<f32>,
        modality: Modality,
        intensity_range: (f32, f32),
        promoted: bool,
    ) -> Volume {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Volume {
            dims,
            data,
            modality,
            intensity_range,
            promoted,
        }
    }
}

/// Patch-grid extents `(G_Z, G_H, G_W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub z: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(z: usize, h: usize, w: usize) -> Self {
        GridShape { z, h, w }
    }

    pub fn count(&self) -> usize {
        self.z * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.z, self.h, self.w]
    }
}

/// Flattened cubic patches of one volume, `[S, C * P^3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub data: Tensor,
    pub grid: GridShape,
    pub patch: usize,
    pub channels: usize,
}

/// Zero-pads a 2D image along depth to `p` slices; the image is slice 0.
pub fn promote_to_pseudo_volume(image: &Volume, p: usize) -> Result<Volume> {
    if !image.modality.is_2d() || image.dims[1] != 1 || image.promoted {
        return Err(Error::invalid(format!(
            "pseudo-volume promotion needs a 2D image with Z = 1, got {:?} {:?}",
            image.modality, image.dims
        )));
    }
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let [c, _, h, w] = image.dims;
    let plane = h * w;
    let mut data = vec![0.0; c * p * plane];
    for ch in 0..c {
        data[ch * p * plane..ch * p * plane + plane]
            .copy_from_slice(&image.data[ch * plane..(ch + 1) * plane]);
    }
    Ok(Volume::from_parts(
        [c, p, h, w],
        data,
        image.modality,
        image.intensity_range,
        true,
    ))
}

/// Splits a volume into non-overlapping `P^3` cubes.
///
/// Patches are ordered by grid index `(z, h, w)` row-major; inside a patch
/// values are flattened channel first, then `z`, `h`, `w` row-major.
pub fn patchify(volume: &Volume, p: usize) -> Result<Patches> {
    let [c, z, h, w] = volume.dims;
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if z % p != 0 || h % p != 0 || w % p != 0 {
        let pad = |n: usize| (p - n % p) % p;
        return Err(Error::shape(
            "patchify",
            format!(
                "spatial dims {:?} not divisible by P={p}; needs padding (z+{}, h+{}, w+{})",
                [z, h, w],
                pad(z),
                pad(h),
                pad(w)
            ),
        ));
    }
    let grid = GridShape::new(z / p, h / p, w / p);
    let width = c * p * p * p;
    let mut out = Vec::with_capacity(grid.count() * width);
    for gz in 0..grid.z {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                for ch in 0..c {
                    for dz in 0..p {
                        for dh in 0..p {
                            let start = volume.index(ch, gz * p + dz, gh * p + dh, gw * p);
                            out.extend_from_slice(&volume.data[start..start + p]);
                        }
                    }
                }
            }
        }
    }
    Ok(Patches {
        data: Tensor::new(vec![grid.count(), width], out)?,
        grid,
        patch: p,
        channels: c,
    })
}

/// Inverse of [`patchify`]: returns the `[C, Z, H, W]` values.
pub fn unpatchify(patches: &Patches) -> (Vec<f32>, [usize; 4]) {
    let p = patches.patch;
    let c = patches.channels;
    let g = patches.grid;
    let dims = [c, g.z * p, g.h * p, g.w * p];
    let mut out = vec![0.0; dims.iter().product()];
    let width = c * p * p * p;
    let src = patches.data.data();
    let mut k = 0;
    for gz in 0..g.z {
        for gh in 0..g.h {
            for gw in 0..g.w {
                let patch = &src[k * width..(k + 1) * width];
                let mut off = 0;
                for ch in 0..c {
                    for dz in 0..p {
                        for dh in 0..p {
                            let start = ((ch * dims[1] + gz * p + dz) * dims[2] + gh * p + dh)
                                * dims[3]
                                + gw * p;
                            out[start..start + p].copy_from_slice(&patch[off..off + p]);
                            off += p;
                        }
                    }
                }
                k += 1;
            }
        }
    }
    (out, dims)
}

/// Coordinate of index `i` on an axis with `g` patches: `alpha * i / max(g - 1, 1)`.
pub fn axis_coord(i: usize, g: usize, alpha: f32) -> f32 {
    (alpha as f64 * i as f64 / (g.max(2) - 1) as f64) as f32
}

/// Per-patch `(z, h, w)` coordinates in `[0, alpha]^3`, in patchify order.
pub fn grid_coords(grid: GridShape, alpha: f32) -> Result<Tensor> {
    if grid.z == 0 || grid.h == 0 || grid.w == 0 {
        return Err(Error::invalid(format!("empty grid {grid:?}")));
    }
    let mut out = Vec::with_capacity(grid.count() * 3);
    for z in 0..grid.z {
        for h in 0..grid.h {
            for w in 0..grid.w {
                out.push(axis_coord(z, grid.z, alpha));
                out.push(axis_coord(h, grid.h, alpha));
                out.push(axis_coord(w, grid.w, alpha));
            }
        }
    }
    Tensor::new(vec![grid.count(), 3], out)
}

/// `tokens = patches @ projection + bias`.
pub fn embed_patches(g: &mut Graph, patches: Var, projection: Var, bias: Var) -> Result<Var> {
    let (ps, ws, bs) = (g.shape(patches), g.shape(projection), g.shape(bias));
    if ps.len() != 2 || ws.len() != 2 || ps[1] != ws[0] || bs != [ws[1]] {
        return Err(Error::shape(
            "embed_patches",
            format!("patches {ps:?}, projection {ws:?}, bias {bs:?}"),
        ));
    }
    let t = g.matmul(patches, projection)?;
    g.add(t, bias)
}

/// Patches and coordinates of one sample, ready for packing.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub patches: Patches,
    pub coords: Tensor,
}

/// Promotes 2D inputs, patchifies and attaches coordinates.
pub fn tokenize(volume: &Volume, p: usize, alpha: f32) -> Result<Tokenized> {
    let patches = if volume.modality.is_2d() && !volume.promoted {
        patchify(&promote_to_pseudo_volume(volume, p)?, p)?
    } else {
        patchify(volume, p)?
    };
    let coords = grid_coords(patches.grid, alpha)?;
    Ok(Tokenized { patches, coords })
}
