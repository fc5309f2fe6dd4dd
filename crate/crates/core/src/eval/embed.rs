use crate::encoder::{encode_frozen, EncoderConfig};
use crate::error::{Error, Result};
use crate::packing::{pack, SampleMeta, TokenSequence};
use crate::params::ParamSet;
use crate::substrate::Tensor;
use crate::tokenizer::{tokenize, GridShape, Modality};
use crate::training::{Checkpoint, Sample, SampleSource};
use crate::views::{center_view, prepare, ViewConfig};

/// Tokens per forward pass when embedding many samples.
const CHUNK_TOKENS: usize = 2048;

/// Frozen pooled embeddings with their labels, one row per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub modalities: Vec<Modality>,
    pub ids: Vec<u64>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn filter(&self, keep: impl Fn(Modality) -> bool) -> Embeddings {
        let mut out = Embeddings::default();
        for i in (0..self.len()).filter(|&i| keep(self.modalities[i])) {
            out.rows.push(self.rows[i].clone());
            out.labels.push(self.labels[i]);
            out.modalities.push(self.modalities[i]);
            out.ids.push(self.ids[i]);
        }
        out
    }

    pub fn extend(&mut self, other: Embeddings) {
        self.rows.extend(other.rows);
        self.labels.extend(other.labels);
        self.modalities.extend(other.modalities);
        self.ids.extend(other.ids);
    }

    /// Rows as a `[N, d]` tensor.
    pub fn matrix(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.len(), self.dim()],
            self.rows.iter().flatten().map(|&v| v as f32).collect(),
        )
    }
}

/// Features of one sample's center view.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub pooled: Vec<f32>,
    /// `[S, d]` final-layer token features in grid order.
    pub tokens: Tensor,
    pub grid: GridShape,
}

fn center_sequence(sample: &Sample, encoder: &EncoderConfig, views: &ViewConfig) -> Result<TokenSequence> {
    let prepared = prepare(&sample.volume, views, encoder.patch)?;
    let view = center_view(&prepared, encoder.patch)?;
    let t = tokenize(&view.volume, encoder.patch, encoder.alpha)?;
    Ok(TokenSequence {
        tokens: t.patches.data,
        coords: t.coords,
        meta: SampleMeta {
            sample_id: sample.id,
            modality: sample.modality(),
            grid: t.patches.grid,
            role: view.role,
        },
    })
}

/// Runs the frozen encoder on each sample's single deterministic center
/// view (the whole downsized image, cropped to a patch multiple).
pub fn encode_samples(
    params: &ParamSet,
    encoder: &EncoderConfig,
    views: &ViewConfig,
    samples: &[Sample],
) -> Result<Vec<SampleFeatures>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut pending: Vec<TokenSequence> = Vec::new();
    let mut pending_tokens = 0;
    let flush = |pending: &mut Vec<TokenSequence>, out: &mut Vec<SampleFeatures>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let batch = pack(pending)?;
        let (pooled, tokens) = encode_frozen(params, &batch, encoder)?;
        let d = encoder.dim;
        for (i, seq) in pending.iter().enumerate() {
            let r = batch.segment(i);
            out.push(SampleFeatures {
                pooled: pooled.row(i).to_vec(),
                tokens: Tensor::new(vec![r.len(), d], tokens.data()[r.start * d..r.end * d].to_vec())?,
                grid: seq.meta.grid,
            });
        }
        pending.clear();
        Ok(())
    };
    for s in samples {
        let seq = center_sequence(s, encoder, views)?;
        let len = seq.tokens.shape()[0];
        if pending_tokens + len > CHUNK_TOKENS {
            flush(&mut pending, &mut out)?;
            pending_tokens = 0;
        }
        pending_tokens += len;
        pending.push(seq);
    }
    flush(&mut pending, &mut out)?;
    Ok(out)
}

/// Pooled center-view embeddings of `source[indices]` under `params`.
pub fn embed_source(
    params: &ParamSet,
    encoder: &EncoderConfig,
    views: &ViewConfig,
    source: &dyn SampleSource,
    indices: &[usize],
) -> Result<Embeddings> {
    let mut out = Embeddings::default();
    // bounded memory: generate and encode a few volumes at a time
    for chunk in indices.chunks(16) {
        let samples = chunk.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
        let feats = encode_samples(params, encoder, views, &samples)?;
        for (s, f) in samples.iter().zip(feats) {
            if f.pooled.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of sample {}", s.id)));
            }
            out.rows.push(f.pooled.iter().map(|&v| v as f64).collect());
            out.labels.push(s.labels);
            out.modalities.push(s.modality());
            out.ids.push(s.id);
        }
    }
    Ok(out)
}

/// [`embed_source`] with the weights of `ckpt`, after checking that it was
/// trained with `encoder`.
pub fn extract_frozen_embeddings(
    ckpt: &Checkpoint,
    encoder: &EncoderConfig,
    views: &ViewConfig,
    source: &dyn SampleSource,
    indices: &[usize],
) -> Result<Embeddings> {
    ckpt.expect_encoder(encoder)?;
    embed_source(&ckpt.params, encoder, views, source, indices)
}
