//! Patch-level PCA maps: fits three components on the token features of a
//! few samples, prints the top component of a 2D image as text, and writes
//! every component (per depth slice for the volume) as PGM files.
//! Usage: `pca_maps [out_dir]`.

use mmv::cli::RunConfig;
use mmv::eval::{embedding_pca, encode_samples, patch_pca_map, write_pca_maps};
use mmv::substrate::Tensor;
use mmv::tokenizer::Modality;
use mmv::training::synthetic::{generate_one, LABEL_NAMES};

fn main() -> mmv::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mmv-pca-maps"), Into::into);
    let cfg = RunConfig::default();
    let params = mmv::encoder::init_params(&cfg.encoder, 5)?;

    let mut samples = Vec::new();
    for m in [Modality::Xray2d, Modality::Ct3d] {
        for i in 0..4 {
            samples.push(generate_one(&cfg.data.synth, cfg.data.seed, m, i)?);
        }
    }
    let feats = encode_samples(&params, &cfg.encoder, &cfg.views, &samples)?;
    let d = cfg.encoder.dim;
    let tokens: Vec<f32> = feats.iter().flat_map(|f| f.tokens.data().iter().copied()).collect();
    let pca = embedding_pca(&Tensor::new(vec![tokens.len() / d, d], tokens)?, 3)?;
    println!("explained variance ratios {:.3?}", pca.explained_ratio());

    std::fs::create_dir_all(&out)?;
    for (s, f) in samples.iter().zip(&feats).step_by(4) {
        let planted: Vec<&str> = (0..LABEL_NAMES.len()).filter(|&l| s.label(l)).map(|l| LABEL_NAMES[l]).collect();
        let map = patch_pca_map(&f.tokens, f.grid, &pca)?;
        let prefix = format!("{}{:06}", if s.modality().is_2d() { 'x' } else { 'c' }, s.id);
        let files = write_pca_maps(&map, &out, &prefix, 8)?;
        println!("{prefix} ({}) grid {:?}: {} images", planted.join(", "), f.grid.as_array(), files.len());
        if s.modality().is_2d() {
            let shades = [' ', '.', ':', '+', '#'];
            for row in map.maps[0].chunks(f.grid.w) {
                let line: String = row.iter().map(|&v| shades[((v * 4.0).round() as usize).min(4)]).collect();
                println!("  |{line}|");
            }
        }
    }
    println!("maps written to {}", out.display());
    Ok(())
}
