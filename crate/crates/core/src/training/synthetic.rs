//! Synthetic radiograph-like images and CT-like volumes with planted findings.
//!
//! Geometry lives in normalized coordinates `u ∈ [-1, 1]` per axis, ordered
//! `(z, y, x)`. A 2D sample is the same construction with every z term
//! dropped, so the 2D ellipse of a label is the equatorial section of its 3D
//! ellipsoid, a band becomes a slab, and so on.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tokenizer::{Modality, Volume};

pub const NUM_LABELS: usize = 5;
pub const LABEL_NAMES: [&str; NUM_LABELS] = ["enlarged_disk", "band", "blob_cluster", "gradient_wedge", "corner_cap"];

pub const XRAY_RANGE: (f32, f32) = (0.0, 255.0);
pub const CT_RANGE: (f32, f32) = (-1024.0, 3071.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size_2d: usize,
    pub size_3d: usize,
    pub label_rate: f64,
    /// Multiplier on every planted structure's amplitude.
    pub contrast: f32,
    /// Amplitude of the smooth background field.
    pub background: f32,
    /// White-noise standard deviation, in the same units as `contrast`.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size_2d: 224,
            size_3d: 112,
            label_rate: 0.4,
            contrast: 1.0,
            background: 0.35,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_2d < 8 || self.size_3d < 8 {
            return Err(Error::Config("synthetic sizes must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.label_rate) {
            return Err(Error::Config(format!("label_rate {} not in [0, 1]", self.label_rate)));
        }
        for (k, v) in [("contrast", self.contrast), ("background", self.background), ("noise", self.noise)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthetic {k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub volume: Volume,
    /// Bit `i` set when label `i` is planted.
    pub labels: u8,
}

impl Sample {
    pub fn modality(&self) -> Modality {
        self.volume.modality()
    }

    pub fn label(&self, i: usize) -> bool {
        self.labels >> i & 1 == 1
    }
}

/// Random access to a collection of samples of one modality.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn modality(&self) -> Modality;
    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label bitmask without materializing the volume where possible.
    fn labels(&self, index: usize) -> Result<u8> {
        Ok(self.get(index)?.labels)
    }
}

/// Samples `offset..offset + len` of the generator stream for one seed.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub cfg: SynthConfig,
    pub seed: u64,
    pub modality: Modality,
    pub offset: usize,
    pub count: usize,
}

impl SampleSource for SyntheticSource {
    fn len(&self) -> usize {
        self.count
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn get(&self, index: usize) -> Result<Sample> {
        if index >= self.count {
            return Err(Error::invalid(format!("sample {index} out of {}", self.count)));
        }
        generate_one(&self.cfg, self.seed, self.modality, self.offset + index)
    }

    fn labels(&self, index: usize) -> Result<u8> {
        if index >= self.count {
            return Err(Error::invalid(format!("sample {index} out of {}", self.count)));
        }
        Ok(draw_labels(&mut sample_rng(self.seed, self.modality, self.offset + index), self.cfg.label_rate))
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    modality: Option<Modality>,
    samples: Vec<Sample>,
}

impl MemorySource {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let modality = samples.first().map(Sample::modality);
        if samples.iter().any(|s| Some(s.modality()) != modality) {
            return Err(Error::invalid("a sample source holds a single modality"));
        }
        Ok(MemorySource { modality, samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn modality(&self) -> Modality {
        self.modality.unwrap_or(Modality::Xray2d)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample {index} out of {}", self.samples.len())))
    }
}

/// `n` consecutive samples of the generator stream, starting at index 0.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64, modality: Modality, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("gen_synthetic needs n >= 1"));
    }
    (0..n).map(|i| generate_one(cfg, seed, modality, i)).collect()
}

fn sample_rng(seed: u64, modality: Modality, index: usize) -> Rng {
    rng::stream(seed, &[rng::tag::SYNTH, modality.code() as u64, index as u64])
}

fn draw_labels(r: &mut Rng, rate: f64) -> u8 {
    (0..NUM_LABELS).fold(0u8, |acc, i| acc | ((r.random_bool(rate) as u8) << i))
}

/// Axis-aligned box in normalized coordinates, `(lo, hi)` per axis.
type Bounds = [(f32, f32); 3];

struct Field {
    dims: [usize; 3],
    data: Vec<f32>,
    flat: bool,
}

impl Field {
    fn coord(i: usize, n: usize) -> f32 {
        if n == 1 {
            0.0
        } else {
            (2.0 * (i as f32 + 0.5) / n as f32) - 1.0
        }
    }

    fn index_range(lo: f32, hi: f32, n: usize) -> std::ops::Range<usize> {
        if n == 1 {
            return 0..1;
        }
        let to_i = |u: f32| (u + 1.0) * 0.5 * n as f32 - 0.5;
        let a = to_i(lo).floor().max(0.0) as usize;
        let b = (to_i(hi).ceil() + 1.0).clamp(0.0, n as f32) as usize;
        a.min(n)..b
    }

    /// Adds `f(u)` over the voxels inside `bounds`.
    fn paint(&mut self, bounds: Bounds, f: impl Fn([f32; 3]) -> f32) {
        let [nz, ny, nx] = self.dims;
        let (rz, ry, rx) = (
            Self::index_range(bounds[0].0, bounds[0].1, nz),
            Self::index_range(bounds[1].0, bounds[1].1, ny),
            Self::index_range(bounds[2].0, bounds[2].1, nx),
        );
        for z in rz {
            let uz = Self::coord(z, nz);
            for y in ry.clone() {
                let uy = Self::coord(y, ny);
                let row = (z * ny + y) * nx;
                for x in rx.clone() {
                    let v = f([uz, uy, Self::coord(x, nx)]);
                    if v != 0.0 {
                        self.data[row + x] += v;
                    }
                }
            }
        }
    }
}

/// Inside weight for a signed distance `d` (negative inside), with a
/// linear ramp one edge width wide.
fn soft(d: f32) -> f32 {
    const EDGE: f32 = 0.02;
    (0.5 - d / EDGE).clamp(0.0, 1.0)
}

fn uniform(r: &mut Rng, lo: f32, hi: f32) -> f32 {
    r.random_range(lo..hi)
}

fn plant_disk(f: &mut Field, r: &mut Rng, amp: f32) {
    let c = [uniform(r, -0.08, 0.08), uniform(r, -0.1, 0.1), uniform(r, -0.08, 0.08)];
    let base = uniform(r, 0.3, 0.38);
    let radii = [0; 3].map(|_| base * uniform(r, 0.9, 1.1));
    let c = if f.flat { [0.0, c[1], c[2]] } else { c };
    let b = [0, 1, 2].map(|a| (c[a] - radii[a] - 0.05, c[a] + radii[a] + 0.05));
    f.paint(b, |u| {
        let rho = (0..3).map(|a| ((u[a] - c[a]) / radii[a]).powi(2)).sum::<f32>().sqrt();
        amp * soft((rho - 1.0) * base)
    });
}

fn plant_band(f: &mut Field, r: &mut Rng, amp: f32) {
    let y0 = uniform(r, 0.4, 0.7);
    let t = uniform(r, 0.05, 0.08);
    f.paint([(-1.0, 1.0), (y0 - t - 0.05, y0 + t + 0.05), (-1.0, 1.0)], |u| amp * soft((u[1] - y0).abs() - t));
}

fn plant_blobs(f: &mut Field, r: &mut Rng, amp: f32) {
    let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let c = [uniform(r, -0.04, 0.04), uniform(r, -0.65, -0.45), side * uniform(r, 0.45, 0.65)];
    let spread = [0.03, 0.1, 0.1];
    let n = r.random_range(4..=6);
    for _ in 0..n {
        let mut p = [0.0f32; 3];
        for (a, pa) in p.iter_mut().enumerate() {
            let z: f32 = StandardNormal.sample(r);
            *pa = c[a] + spread[a] * z;
        }
        let rad = uniform(r, 0.06, 0.09);
        if f.flat {
            p[0] = 0.0;
        }
        let b = [0, 1, 2].map(|a| (p[a] - rad - 0.05, p[a] + rad + 0.05));
        f.paint(b, |u| {
            let d = (0..3).map(|a| (u[a] - p[a]).powi(2)).sum::<f32>().sqrt();
            amp * soft(d - rad)
        });
    }
}

fn plant_wedge(f: &mut Field, r: &mut Rng, amp: f32) {
    let apex = [0.0, -1.0, uniform(r, -0.08, 0.08)];
    let theta = uniform(r, -0.12, 0.12);
    let depth = uniform(r, 0.35, 0.5);
    let z0 = if f.flat { 0.0 } else { uniform(r, -0.1, 0.1) };
    const LEN: f32 = 0.85;
    const SPREAD: f32 = 0.35;
    let (s, c) = theta.sin_cos();
    f.paint([(z0 - depth - 0.05, z0 + depth + 0.05), (-1.0, -0.1), (-0.7, 0.7)], |u| {
        let (dy, dx) = (u[1] - apex[1], u[2] - apex[2]);
        let along = dy * c + dx * s;
        if along <= 0.0 || along >= LEN {
            return 0.0;
        }
        let across = (dx * c - dy * s).abs();
        let w = soft(across - along * SPREAD) * soft((u[0] - z0).abs() - depth);
        amp * (0.25 + 0.75 * along / LEN) * w
    });
}

fn plant_corner(f: &mut Field, r: &mut Rng, amp: f32) {
    let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let z0 = if f.flat { 0.0 } else { uniform(r, -0.1, 0.1) };
    let c = [z0, 1.0, side];
    let rad = uniform(r, 0.38, 0.5);
    let b = [0, 1, 2].map(|a| (c[a] - rad - 0.05, c[a] + rad + 0.05));
    f.paint(b, |u| {
        let d = (0..3).map(|a| (u[a] - c[a]).powi(2)).sum::<f32>().sqrt();
        amp * soft(d - rad)
    });
}

/// Sum of separable low-frequency cosines.
fn background(f: &mut Field, r: &mut Rng, amp: f32) {
    const TERMS: usize = 6;
    let [nz, ny, nx] = f.dims;
    let mut tables: Vec<[Vec<f32>; 3]> = Vec::with_capacity(TERMS);
    for _ in 0..TERMS {
        let a = amp * uniform(r, 0.5, 1.0) / (TERMS as f32).sqrt();
        let mut axis = |n: usize, scale: f32| -> Vec<f32> {
            let w = uniform(r, 0.5, 3.0);
            let ph = uniform(r, 0.0, std::f32::consts::TAU);
            (0..n).map(|i| scale * (w * Field::coord(i, n) + ph).cos()).collect()
        };
        let tz = axis(nz, a);
        let ty = axis(ny, 1.0);
        let tx = axis(nx, 1.0);
        tables.push([tz, ty, tx]);
    }
    for z in 0..nz {
        for y in 0..ny {
            let zy: Vec<f32> = tables.iter().map(|t| t[0][z] * t[1][y]).collect();
            let row = &mut f.data[(z * ny + y) * nx..(z * ny + y + 1) * nx];
            for (x, v) in row.iter_mut().enumerate() {
                *v += zy.iter().zip(&tables).map(|(a, t)| a * t[2][x]).sum::<f32>();
            }
        }
    }
}

/// Sample `index` of the stream keyed by `(seed, modality)`.
pub fn generate_one(cfg: &SynthConfig, seed: u64, modality: Modality, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut r = sample_rng(seed, modality, index);
    let labels = draw_labels(&mut r, cfg.label_rate);
    let dims = if modality.is_2d() {
        [1, cfg.size_2d, cfg.size_2d]
    } else {
        [cfg.size_3d; 3]
    };
    let mut f = Field {
        dims,
        data: vec![0.0; dims.iter().product()],
        flat: modality.is_2d(),
    };
    // Each structure draws from its own stream, so toggling one label leaves
    // the other structures and the background unchanged.
    let planters: [fn(&mut Field, &mut Rng, f32); NUM_LABELS] =
        [plant_disk, plant_band, plant_blobs, plant_wedge, plant_corner];
    let amps = [1.0, 0.8, 1.2, 1.2, 0.9];
    for (i, plant) in planters.iter().enumerate() {
        if labels >> i & 1 == 1 {
            let path = [rng::tag::SYNTH, modality.code() as u64, index as u64, 1 + i as u64];
            plant(&mut f, &mut rng::stream(seed, &path), amps[i] * cfg.contrast);
        }
    }
    background(&mut f, &mut r, cfg.background);
    for v in f.data.iter_mut() {
        let z: f32 = StandardNormal.sample(&mut r);
        *v += cfg.noise * z;
    }
    let (offset, scale, range) = match modality {
        Modality::Xray2d => (100.0, 70.0, XRAY_RANGE),
        Modality::Ct3d => (-100.0, 400.0, CT_RANGE),
    };
    let data = f
        .data
        .iter()
        .map(|&v| (offset + scale * v).clamp(range.0, range.1))
        .collect();
    let volume = Volume::new([1, dims[0], dims[1], dims[2]], data, modality, range)?;
    Ok(Sample {
        id: index as u64,
        volume,
        labels,
    })
}

/// Hand-coded pixel-level detector for label `label`, higher meaning more
/// likely present. Works on raw intensities of either modality; 3D volumes
/// are scored on their central slab.
pub fn detector_score(volume: &Volume, label: usize) -> f64 {
    let [_, nz, ny, nx] = volume.dims();
    let z_range = if nz == 1 {
        0..1
    } else {
        let half = (nz as f32 * 0.04).ceil() as usize;
        nz / 2 - half..nz / 2 + half
    };
    let nzs = z_range.len() as f64;
    // slab mean, as a 2D image
    let mut img = vec![0.0f64; ny * nx];
    for z in z_range {
        for (i, v) in img.iter_mut().enumerate() {
            *v += volume.data()[z * ny * nx + i] as f64 / nzs;
        }
    }
    let u = |i: usize, n: usize| (2.0 * (i as f64 + 0.5) / n as f64) - 1.0;
    let region_mean = |pred: &dyn Fn(f64, f64) -> bool| -> f64 {
        let (mut s, mut c) = (0.0, 0.0);
        for y in 0..ny {
            for x in 0..nx {
                if pred(u(y, ny), u(x, nx)) {
                    s += img[y * nx + x];
                    c += 1.0;
                }
            }
        }
        if c > 0.0 {
            s / c
        } else {
            0.0
        }
    };
    match label {
        0 => {
            region_mean(&|y, x| y * y + x * x < 0.2f64.powi(2))
                - region_mean(&|y, x| (0.45..0.6).contains(&(y * y + x * x).sqrt()) && y < 0.3)
        }
        1 => {
            let rows: Vec<f64> = (0..ny)
                .filter(|&y| (0.3..0.8).contains(&u(y, ny)))
                .map(|y| (0..nx).filter(|&x| u(x, nx).abs() < 0.45).map(|x| img[y * nx + x]).sum::<f64>())
                .collect();
            let mut sorted = rows.clone();
            sorted.sort_by(f64::total_cmp);
            let med = sorted[sorted.len() / 2];
            rows.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - med
        }
        2 => {
            let side = |s: f64| {
                region_mean(&|y, x| (y + 0.55).powi(2) + (x - s * 0.55).powi(2) < 0.15f64.powi(2))
                    - region_mean(&|y, x| (-0.25..-0.05).contains(&y) && (x * s) > 0.35 && (x * s) < 0.9)
            };
            side(1.0).max(side(-1.0))
        }
        3 => region_mean(&|y, x| (-0.6..-0.3).contains(&y) && x.abs() < 0.12) - region_mean(&|y, x| (-0.6..-0.3).contains(&y) && (0.3..0.4).contains(&x.abs())),
        4 => {
            let corner = |s: f64| region_mean(&|y, x| (y - 1.0).powi(2) + (x - s).powi(2) < 0.3f64.powi(2));
            let reference = region_mean(&|y, x| (y - 0.85).abs() < 0.1 && x.abs() < 0.3);
            corner(1.0).max(corner(-1.0)) - reference
        }
        _ => f64::NAN,
    }
}
