//! Tokenizes a 2D radiograph and a 3D CT volume into the same coordinate
//! space, then checks that the rotary embedding keeps norms and only sees
//! relative positions.

use mmv::rope3d::{apply_rope, RopeTable};
use mmv::substrate::Tensor;
use mmv::tokenizer::{tokenize, Modality};
use mmv::training::synthetic::generate_one;
use mmv::training::SynthConfig;
use mmv::views::{prepare, ViewConfig};

fn main() -> mmv::Result<()> {
    let synth = SynthConfig::default();
    let views = ViewConfig::default();
    let (patch, alpha) = (14, 128.0);

    for m in [Modality::Xray2d, Modality::Ct3d] {
        let raw = generate_one(&synth, 7, m, 0)?.volume;
        let ready = prepare(&raw, &views, patch)?;
        let t = tokenize(&ready, patch, alpha)?;
        let first = t.coords.row(0);
        let last = t.coords.row(t.coords.shape()[0] - 1);
        println!(
            "{:<6} raw {:?} -> prepared {:?} -> grid {:?}, {} tokens of width {}",
            m.name(),
            raw.dims(),
            ready.dims(),
            t.patches.grid.as_array(),
            t.patches.grid.count(),
            t.patches.data.shape()[1]
        );
        println!("       coords from {first:?} to {last:?}");
    }

    // rotate one query/key pair at two positions, then shift both
    let head_dim = 48;
    let table = RopeTable::new(head_dim, 10_000.0)?;
    let q: Vec<f32> = (0..head_dim).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
    let k: Vec<f32> = (0..head_dim).map(|i| ((i * 53 % 13) as f32 - 6.0) / 9.0).collect();
    let dot_at = |a: [f32; 3], b: [f32; 3]| -> mmv::Result<(f32, f32)> {
        let x = Tensor::new(vec![2, 1, head_dim], [q.as_slice(), k.as_slice()].concat())?;
        let coords = Tensor::new(vec![2, 3], [a, b].concat())?;
        let y = apply_rope(&x, &coords, &table)?;
        let (rq, rk) = y.data().split_at(head_dim);
        let norm = rq.iter().map(|v| v * v).sum::<f32>().sqrt();
        Ok((rq.iter().zip(rk).map(|(x, y)| x * y).sum(), norm))
    };
    let (base, norm) = dot_at([0.0, -40.0, 12.0], [8.0, 30.0, -64.0])?;
    let (shifted, _) = dot_at([50.0, -30.0, 112.0], [58.0, 40.0, 36.0])?;
    let q_norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("|q| {q_norm:.6} -> |R q| {norm:.6}");
    println!("q.k at original positions {base:.6}, after a common shift {shifted:.6}");
    Ok(())
}
