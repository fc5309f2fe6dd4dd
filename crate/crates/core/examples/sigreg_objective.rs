//! The objective on hand-built embedding sets: the closed-form Epps-Pulley
//! statistic, SIGReg on random directions, and the centroid prediction loss
//! for a consistent and an inconsistent set of views.

use mmv::objective::{ep_statistic, prediction_loss, sigreg_loss};
use mmv::substrate::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| std * Distribution::<f32>::sample(&StandardNormal, r)).collect()
}

fn losses(embeddings: Vec<f32>, n: usize, d: usize, views: usize) -> mmv::Result<(f32, f32)> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![n, d], embeddings)?);
    let pred = prediction_loss(&mut g, x, views, 2)?;
    let sig = sigreg_loss(&mut g, x, 64, 3)?;
    Ok((g.value(pred).item(), g.value(sig).item()))
}

fn main() -> mmv::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    println!("T for a single point at 0: {:.5}, two points at 0: {:.5}", ep_statistic(&[0.0])?, ep_statistic(&[0.0, 0.0])?);
    for (name, x) in [
        ("N(0, 1)", gaussian(&mut r, 512, 1.0)),
        ("N(0, 0.1)", gaussian(&mut r, 512, 0.1)),
        ("N(0, 10)", gaussian(&mut r, 512, 10.0)),
        ("constant", vec![0.3; 512]),
    ] {
        println!("T/N for 512 draws of {name:<9} {:.4}", ep_statistic(&x)? / 512.0);
    }

    // 32 samples x 4 views in d = 16
    let (samples, views, d) = (32, 4, 16);
    let n = samples * views;
    let centers = gaussian(&mut r, samples * d, 1.0);
    let around = |r: &mut ChaCha8Rng, noise: f32| -> Vec<f32> {
        let jitter = gaussian(r, n * d, noise);
        (0..n * d).map(|i| centers[(i / d / views) * d + i % d] + jitter[i]).collect()
    };
    for (name, e) in [
        ("consistent views", around(&mut r, 0.05)),
        ("noisy views", around(&mut r, 1.0)),
        ("collapsed", vec![0.5; n * d]),
    ] {
        let (pred, sig) = losses(e, n, d, views)?;
        println!("{name:<17} pred {pred:>9.4}  sigreg {sig:.4}");
    }
    Ok(())
}
