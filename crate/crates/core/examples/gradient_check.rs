//! Central-difference check of the full encoder and objective on a tiny
//! configuration.

use mmv::encoder::{encode, init_params, EncoderConfig};
use mmv::objective::{prediction_loss, sigreg_loss, total_loss};
use mmv::packing::{pack, SampleMeta, TokenSequence, ViewRole};
use mmv::substrate::{grad_check, GradCheckOptions, Tensor};
use mmv::tokenizer::{tokenize, Modality, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mmv::Result<()> {
    let cfg = EncoderConfig {
        depth: 2,
        dim: 12,
        heads: 2,
        mlp_ratio: 2,
        patch: 2,
        ..EncoderConfig::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(4);

    // two samples, three views each (two global, one local)
    let shapes: [[usize; 4]; 6] = [[1, 1, 4, 4], [1, 1, 4, 2], [1, 1, 2, 2], [1, 4, 2, 2], [1, 2, 4, 2], [1, 2, 2, 2]];
    let mut seqs = Vec::new();
    for (i, dims) in shapes.into_iter().enumerate() {
        let m = if dims[1] == 1 { Modality::Xray2d } else { Modality::Ct3d };
        let data = (0..dims.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = tokenize(&Volume::new(dims, data, m, (-1.0, 1.0))?, cfg.patch, cfg.alpha)?;
        seqs.push(TokenSequence {
            tokens: t.patches.data,
            coords: t.coords,
            meta: SampleMeta {
                sample_id: (i / 3) as u64,
                modality: m,
                grid: t.patches.grid,
                role: if i % 3 < 2 { ViewRole::Global } else { ViewRole::Local },
            },
        });
    }
    let batch = pack(&seqs)?;

    // larger-than-init weights so no gradient is trivially small
    let params = init_params(&cfg, 9)?;
    let points: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|_| r.random_range(-0.6..0.6)).collect()))
        .collect::<mmv::Result<_>>()?;

    let report = grad_check(
        |g, leaves| {
            let bound = params.attach(leaves)?;
            let out = encode(g, &bound, &batch, &cfg)?;
            let pred = prediction_loss(g, out.pooled, 3, 2)?;
            let sig = sigreg_loss(g, out.pooled, 8, 11)?;
            total_loss(g, pred, sig, 0.25)
        },
        &points,
        &GradCheckOptions {
            step: 5e-2,
            rtol: 2e-2,
            max_coords: 24,
            five_point: true,
        },
    )?;
    for leaf in &report.leaves {
        println!("{:<28} max rel err {:.2e}", params.names()[leaf.leaf], leaf.max_rel_err);
    }
    println!("worst {:.2e}, passed {}", report.max_rel_err(), report.passed());
    Ok(())
}
