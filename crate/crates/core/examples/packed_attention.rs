//! Packs a mixed batch of global and local views from both modalities into
//! one sequence and compares block-diagonal attention against running each
//! sample on its own.

use mmv::packing::{pack, packed_attention, padded_attention, padding_overhead, unpack, SampleMeta, TokenSequence};
use mmv::substrate::Tensor;
use mmv::tokenizer::{tokenize, Modality};
use mmv::training::synthetic::generate_one;
use mmv::training::SynthConfig;
use mmv::views::{prepare, sample_views, ViewConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mmv::Result<()> {
    let synth = SynthConfig::default();
    let cfg = ViewConfig::default();
    let patch = 14;

    let mut seqs = Vec::new();
    for (i, m) in [Modality::Xray2d, Modality::Ct3d].into_iter().enumerate() {
        let raw = generate_one(&synth, 3, m, i)?;
        let ready = prepare(&raw.volume, &cfg, patch)?;
        for view in sample_views(&ready, &cfg, patch, 99)?.views {
            let t = tokenize(&view.volume, patch, 128.0)?;
            seqs.push(TokenSequence {
                tokens: t.patches.data,
                coords: t.coords,
                meta: SampleMeta {
                    sample_id: raw.id,
                    modality: m,
                    grid: t.patches.grid,
                    role: view.role,
                },
            });
        }
    }
    let batch = pack(&seqs)?;
    let lengths = batch.lengths();
    println!("{} views, {} tokens, lengths {:?}", batch.num_samples(), batch.num_tokens(), lengths);
    println!("padding to the longest view would cost {:.2}x the packed tokens", padding_overhead(&lengths)?);
    assert_eq!(unpack(&batch)?, seqs);

    let (heads, head_dim) = (2, 24);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut random = || {
        let n = batch.num_tokens() * heads * head_dim;
        Tensor::new(vec![batch.num_tokens(), heads, head_dim], (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    };
    let (q, k, v) = (random()?, random()?, random()?);
    let packed = packed_attention(&q, &k, &v, &batch.boundaries)?;
    let (padded, entries) = padded_attention(&q, &k, &v, &batch.boundaries)?;
    let diff = packed
        .data()
        .iter()
        .zip(padded.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let packed_entries: usize = heads * lengths.iter().map(|l| l * l).sum::<usize>();
    println!("packed vs padded max difference {diff:.2e}");
    println!("score entries: packed {packed_entries}, padded {entries}");
    Ok(())
}
