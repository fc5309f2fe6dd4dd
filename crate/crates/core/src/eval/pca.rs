use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::substrate::Tensor;
use crate::tokenizer::GridShape;

use super::probe::{fit_linear_probe, ProbeConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `d`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Sum of the variances of all `d` input dimensions.
    pub total_variance: f64,
}

fn rows_of(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::shape("pca", format!("expected [N, d], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Top-`k` principal components from the eigendecomposition of the centered
/// sample covariance (denominator `N - 1`).
///
/// Each component's sign is fixed so its largest-magnitude entry is positive.
pub fn embedding_pca(x: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = rows_of(x)?;
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("PCA needs N > k >= 1, got N = {n}, k = {k}")));
    }
    if k > d {
        return Err(Error::invalid(format!("PCA k = {k} exceeds the dimension {d}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.data()[i * d + j] as f64).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.data()[i * d + j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(Pca {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

impl Pca {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// `[N, k]` coordinates of the rows of `x`.
    pub fn project(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, d) = rows_of(x)?;
        if d != self.dim() {
            return Err(Error::shape("pca project", format!("rows have {d} features, PCA expects {}", self.dim())));
        }
        Ok((0..n)
            .map(|i| {
                let row = &x.data()[i * d..(i + 1) * d];
                self.components
                    .iter()
                    .map(|c| row.iter().zip(&self.mean).zip(c).map(|((&v, m), c)| (v as f64 - m) * c).sum())
                    .collect()
            })
            .collect())
    }

    pub fn reconstruct(&self, coords: &[Vec<f64>]) -> Vec<Vec<f64>> {
        coords
            .iter()
            .map(|z| {
                let mut r = self.mean.clone();
                for (zc, c) in z.iter().zip(&self.components) {
                    for (rj, cj) in r.iter_mut().zip(c) {
                        *rj += zc * cj;
                    }
                }
                r
            })
            .collect()
    }
}

/// Logistic-regression coefficients per principal component, one row per
/// label (`None` when a label is single-class).
pub fn pca_probe_coefficients(
    x: &Tensor,
    labels: &[u8],
    k: usize,
    cfg: &ProbeConfig,
) -> Result<(Pca, Vec<Option<Vec<f64>>>)> {
    let pca = embedding_pca(x, k)?;
    let z = pca.project(x)?;
    let probe = fit_linear_probe(&z, labels, cfg)?;
    let coefs = probe
        .heads
        .iter()
        .map(|h| h.as_ref().map(|(w, _)| w.iter().zip(&probe.scale).map(|(w, s)| w / s).collect()))
        .collect();
    Ok((pca, coefs))
}

/// Per-component token projections on a sample's patch grid, min-max scaled
/// to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaMap {
    pub grid: GridShape,
    /// One `grid.count()`-long map per component, in `(z, h, w)` order.
    pub maps: Vec<Vec<f32>>,
}

/// Projects each token onto the top three components (fewer if the PCA has
/// fewer) and scales each map to `[0, 1]`; a constant map becomes all zeros.
pub fn patch_pca_map(tokens: &Tensor, grid: GridShape, pca: &Pca) -> Result<PcaMap> {
    let (s, _) = rows_of(tokens)?;
    if s != grid.count() {
        return Err(Error::shape(
            "patch_pca_map",
            format!("{s} tokens for a {}x{}x{} grid", grid.z, grid.h, grid.w),
        ));
    }
    let proj = pca.project(tokens)?;
    let k = pca.k().min(3);
    let maps = (0..k)
        .map(|c| {
            let vals: Vec<f64> = proj.iter().map(|p| p[c]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            vals.iter()
                .map(|&v| if span > 1e-12 * hi.abs().max(1.0) { ((v - lo) / span) as f32 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(PcaMap { grid, maps })
}

/// Binary PGM (P5, maxval 255) of `values` in `[0, 1]`, each cell drawn as
/// a `scale x scale` block.
pub fn encode_pgm(width: usize, height: usize, values: &[f32], scale: usize) -> Result<Vec<u8>> {
    if values.len() != width * height || scale == 0 {
        return Err(Error::invalid(format!(
            "{} values for a {width}x{height} image (scale {scale})",
            values.len()
        )));
    }
    let (w, h) = (width * scale, height * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / scale) * width + x / scale].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes one image per component (and per depth slice for 3D grids):
/// `{prefix}_pc{c}.pgm` or `{prefix}_pc{c}_z{z}.pgm`.
pub fn write_pca_maps(map: &PcaMap, dir: &Path, prefix: &str, scale: usize) -> Result<Vec<PathBuf>> {
    let GridShape { z: gz, h, w } = map.grid;
    let mut paths = Vec::new();
    for (c, m) in map.maps.iter().enumerate() {
        for z in 0..gz {
            let name = if gz == 1 {
                format!("{prefix}_pc{c}.pgm")
            } else {
                format!("{prefix}_pc{c}_z{z}.pgm")
            };
            let path = dir.join(name);
            write_atomic(&path, &encode_pgm(w, h, &m[z * h * w..(z + 1) * h * w], scale)?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
