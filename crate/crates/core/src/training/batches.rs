use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::packing::{pack, PackedBatch, SampleMeta, TokenSequence};
use crate::rng;
use crate::tokenizer::{tokenize, Modality};
use crate::views::{prepare, sample_views, ViewConfig, ViewSet};

use super::synthetic::SampleSource;

/// Everything one optimization step consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub packed: PackedBatch,
    /// Source index of each sample, 2D samples first.
    pub samples: Vec<(Modality, usize)>,
    pub n_2d: usize,
    pub n_3d: usize,
    pub views_per_sample: usize,
}

/// Deterministic, random-access stream of mixed 2D/3D batches.
///
/// Step `s` draws positions `s * b .. (s + 1) * b` of each modality's
/// endless sample order, where every epoch is a fresh seeded permutation.
/// Any step can be rebuilt without replaying earlier ones, so resumed runs
/// see exactly the batches of an uninterrupted run.
#[derive(Clone)]
pub struct MixedBatches {
    src_2d: Option<Arc<dyn SampleSource>>,
    src_3d: Option<Arc<dyn SampleSource>>,
    batch_2d: usize,
    batch_3d: usize,
    seed: u64,
    views: ViewConfig,
    patch: usize,
    alpha: f32,
}

impl MixedBatches {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src_2d: Option<Arc<dyn SampleSource>>,
        src_3d: Option<Arc<dyn SampleSource>>,
        batch_2d: usize,
        batch_3d: usize,
        seed: u64,
        views: ViewConfig,
        patch: usize,
        alpha: f32,
    ) -> Result<Self> {
        if batch_2d == 0 && batch_3d == 0 {
            return Err(Error::invalid("batch_2d and batch_3d are both 0"));
        }
        views.validate()?;
        for (b, src, m) in [(batch_2d, &src_2d, Modality::Xray2d), (batch_3d, &src_3d, Modality::Ct3d)] {
            if b == 0 {
                continue;
            }
            match src {
                None => return Err(Error::invalid(format!("{b} {} samples per batch requested but no source given", m.name()))),
                Some(s) if s.is_empty() => return Err(Error::invalid(format!("the {} sample source is empty", m.name()))),
                Some(s) if s.modality() != m => {
                    return Err(Error::invalid(format!("source for {} holds {} samples", m.name(), s.modality().name())))
                }
                Some(_) => {}
            }
        }
        Ok(MixedBatches {
            src_2d,
            src_3d,
            batch_2d,
            batch_3d,
            seed,
            views,
            patch,
            alpha,
        })
    }

    fn permutation(&self, modality: Modality, len: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut r = rng::stream(self.seed, &[rng::tag::EPOCH, modality.code() as u64, epoch]);
        order.shuffle(&mut r);
        order
    }

    /// Source indices and epochs of the samples used at `step`.
    pub fn composition(&self, step: u64) -> Vec<(Modality, usize, u64)> {
        let mut out = Vec::with_capacity(self.batch_2d + self.batch_3d);
        for (b, src, m) in [
            (self.batch_2d, &self.src_2d, Modality::Xray2d),
            (self.batch_3d, &self.src_3d, Modality::Ct3d),
        ] {
            let Some(src) = src.as_ref().filter(|_| b > 0) else {
                continue;
            };
            let len = src.len() as u64;
            let mut cached: Option<(u64, Vec<usize>)> = None;
            for j in 0..b as u64 {
                let pos = step * b as u64 + j;
                let epoch = pos / len;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    cached = Some((epoch, self.permutation(m, len as usize, epoch)));
                }
                let perm = &cached.as_ref().expect("filled above").1;
                out.push((m, perm[(pos % len) as usize], epoch));
            }
        }
        out
    }

    /// Views of one sample, seeded by `(sample, epoch)`.
    pub fn view_set(&self, modality: Modality, index: usize, epoch: u64) -> Result<ViewSet> {
        let src = match modality {
            Modality::Xray2d => &self.src_2d,
            Modality::Ct3d => &self.src_3d,
        };
        let src = src.as_ref().ok_or_else(|| Error::invalid("no source for modality"))?;
        let sample = src.get(index)?;
        let prepared = prepare(&sample.volume, &self.views, self.patch)?;
        let seed = rng::derive(self.seed, &[rng::tag::VIEWS, modality.code() as u64, index as u64, epoch]);
        let mut set = sample_views(&prepared, &self.views, self.patch, seed)?;
        set.sample_id = sample.id;
        Ok(set)
    }

    pub fn batch_at(&self, step: u64) -> Result<Batch> {
        let comp = self.composition(step);
        let mut seqs = Vec::with_capacity(comp.len() * self.views.views_per_sample());
        for &(m, index, epoch) in &comp {
            let set = self.view_set(m, index, epoch)?;
            for view in set.views {
                let t = tokenize(&view.volume, self.patch, self.alpha)?;
                seqs.push(TokenSequence {
                    tokens: t.patches.data,
                    coords: t.coords,
                    meta: SampleMeta {
                        sample_id: set.sample_id,
                        modality: m,
                        grid: t.patches.grid,
                        role: view.role,
                    },
                });
            }
        }
        Ok(Batch {
            packed: pack(&seqs)?,
            samples: comp.iter().map(|&(m, i, _)| (m, i)).collect(),
            n_2d: self.batch_2d,
            n_3d: self.batch_3d,
            views_per_sample: self.views.views_per_sample(),
        })
    }
}

/// Shorthand for [`MixedBatches::new`] with the encoder's patch size and
/// coordinate scale.
pub fn mixed_batch_iterator(
    data_2d: Option<Arc<dyn SampleSource>>,
    data_3d: Option<Arc<dyn SampleSource>>,
    batch_2d: usize,
    batch_3d: usize,
    seed: u64,
    views: &ViewConfig,
    encoder: &crate::encoder::EncoderConfig,
) -> Result<MixedBatches> {
    MixedBatches::new(data_2d, data_3d, batch_2d, batch_3d, seed, views.clone(), encoder.patch, encoder.alpha)
}
