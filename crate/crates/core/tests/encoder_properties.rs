mod common;

use common::*;
use mmv::encoder::{encode_frozen, init_params, EncoderConfig};
use mmv::packing::{pack, SampleMeta, TokenSequence, ViewRole};
use mmv::substrate::Tensor;
use mmv::tokenizer::{tokenize, Modality, Volume};
use rand::Rng;

fn sequence(v: &Volume, cfg: &EncoderConfig, id: u64) -> TokenSequence {
    let t = tokenize(v, cfg.patch, cfg.alpha).unwrap();
    TokenSequence {
        tokens: t.patches.data,
        coords: t.coords,
        meta: SampleMeta {
            sample_id: id,
            modality: v.modality(),
            grid: t.patches.grid,
            role: ViewRole::Global,
        },
    }
}

fn random_volume(r: &mut rand_chacha::ChaCha8Rng, dims: [usize; 4]) -> Volume {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let m = if dims[1] == 1 { Modality::Xray2d } else { Modality::Ct3d };
    Volume::new(dims, data, m, (-1.0, 1.0)).unwrap()
}

fn pooled(cfg: &EncoderConfig, params: &mmv::params::ParamSet, seqs: &[TokenSequence]) -> Tensor {
    encode_frozen(params, &pack(seqs).unwrap(), cfg).unwrap().0
}

#[test]
fn hand_counted_parameters() {
    let cfg = EncoderConfig {
        depth: 2,
        dim: 48,
        heads: 8,
        mlp_ratio: 4,
        patch: 14,
        channels: 1,
        ..EncoderConfig::default()
    };
    // patch projection 2744*48 + 48; per block two norms (4*48), four
    // 48x48 projections with biases, MLP 48->192->48; final norm 2*48
    let hand = 131_760 + 2 * (192 + 4 * 2_352 + 9_408 + 9_264) + 96;
    assert_eq!(hand, 188_400);
    assert_eq!(cfg.param_count(), hand);
    assert_eq!(init_params(&cfg, 1).unwrap().count(), hand);
}

#[test]
fn embedding_does_not_depend_on_batch_mates() {
    let cfg = tiny_encoder();
    let params = perturbed_params(&cfg, 3);
    let mut r = rng(90);
    let target = sequence(&random_volume(&mut r, [1, 2, 4, 6]), &cfg, 0);
    let alone = pooled(&cfg, &params, std::slice::from_ref(&target));
    for trial in 0..10 {
        let mut seqs = Vec::new();
        let others = r.random_range(1..5);
        let at = r.random_range(0..=others);
        for i in 0..others {
            let dims = if r.random_bool(0.5) {
                [1, 1, 2 * r.random_range(1..5), 2 * r.random_range(1..5)]
            } else {
                [1, 2 * r.random_range(1..3), 2 * r.random_range(1..3), 2 * r.random_range(1..4)]
            };
            seqs.push(sequence(&random_volume(&mut r, dims), &cfg, 1 + i as u64));
        }
        seqs.insert(at, target.clone());
        let p = pooled(&cfg, &params, &seqs);
        for (a, b) in alone.row(0).iter().zip(p.row(at)) {
            assert!((a - b).abs() <= 1e-5, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn duplicated_sample_gets_identical_embeddings() {
    let cfg = tiny_encoder();
    let params = perturbed_params(&cfg, 4);
    let mut r = rng(91);
    let s = sequence(&random_volume(&mut r, [1, 4, 4, 2]), &cfg, 0);
    let p = pooled(&cfg, &params, &[s.clone(), s]);
    assert_eq!(p.row(0), p.row(1));
}

#[test]
fn flat_image_and_single_slice_volume_agree() {
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, 2).unwrap();
    let mut r = rng(92);
    let image = random_volume(&mut r, [1, 1, 28, 42]);
    // a CT-tagged volume one patch deep whose first slice is the image
    let mut data = image.data().to_vec();
    data.resize(14 * 28 * 42, 0.0);
    let volume = Volume::new([1, 14, 28, 42], data, Modality::Ct3d, (-1.0, 1.0)).unwrap();
    let a = sequence(&image, &cfg, 0);
    let b = sequence(&volume, &cfg, 1);
    assert_eq!(a.meta.grid, b.meta.grid);
    let p = pooled(&cfg, &params, &[a, b]);
    for (x, y) in p.row(0).iter().zip(p.row(1)) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn zero_depth_is_normalized_patch_mean() {
    let cfg = EncoderConfig {
        depth: 0,
        ..tiny_encoder()
    };
    let params = perturbed_params(&cfg, 6);
    let mut r = rng(93);
    let s = sequence(&random_volume(&mut r, [1, 2, 2, 4]), &cfg, 0);
    let p = pooled(&cfg, &params, std::slice::from_ref(&s));
    let d = cfg.dim;
    let w = params.get("patch.weight").unwrap().data();
    let b = params.get("patch.bias").unwrap().data();
    let gamma = params.get("final_ln.gamma").unwrap().data();
    let beta = params.get("final_ln.beta").unwrap().data();
    let width = cfg.patch_width();
    let rows = s.tokens.shape()[0];
    let mut mean = vec![0.0f64; d];
    for t in 0..rows {
        let x = &s.tokens.data()[t * width..(t + 1) * width];
        let e: Vec<f64> = (0..d)
            .map(|j| b[j] as f64 + (0..width).map(|i| x[i] as f64 * w[i * d + j] as f64).sum::<f64>())
            .collect();
        let mu = e.iter().sum::<f64>() / d as f64;
        let var = e.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            mean[j] += (gamma[j] as f64 * (e[j] - mu) / (var + 1e-5).sqrt() + beta[j] as f64) / rows as f64;
        }
    }
    for (a, b) in p.row(0).iter().zip(&mean) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn initial_outputs_are_finite() {
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, 8).unwrap();
    let mut r = rng(94);
    let mut count = 0;
    while count < 1000 {
        let seqs: Vec<TokenSequence> = (0..50)
            .map(|i| {
                let dims = if i % 2 == 0 { [1, 1, 14, 28] } else { [1, 14, 14, 14] };
                sequence(&random_volume(&mut r, dims), &cfg, i)
            })
            .collect();
        let p = pooled(&cfg, &params, &seqs);
        assert!(p.data().iter().all(|v| v.is_finite()));
        count += seqs.len();
    }
}
