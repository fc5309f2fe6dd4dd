//! Packed versus pad-to-longest attention on the default mixed-view batch
//! and on a few hand-picked length mixes.

use mmv::cli::{bench_lengths, cmd_bench_pack, BenchArgs, BenchReport, RunConfig};

fn show(name: &str, r: &BenchReport) {
    println!(
        "{name:<22} {:>3} segments {:>6} tokens  overhead {:>6.2}x  diff {:.1e}  packed {:.4}s  padded {:.4}s",
        r.segments, r.tokens, r.padding_overhead, r.max_abs_diff, r.packed_secs, r.padded_secs
    );
}

fn main() -> mmv::Result<()> {
    let cfg = RunConfig::default();
    show("default mixed batch", &cmd_bench_pack(&cfg, &BenchArgs { lengths_from: None, repeats: 3 })?);

    let (heads, head_dim) = (cfg.encoder.heads, cfg.encoder.dim / cfg.encoder.heads);
    let mut one_long = vec![512];
    one_long.extend(std::iter::repeat_n(8, 31));
    for (name, lengths) in [
        ("uniform", vec![128; 8]),
        ("global + local 2D", vec![256, 256, 64, 64, 64, 64, 64, 64, 64, 64]),
        ("one long, many short", one_long),
    ] {
        show(name, &bench_lengths(&lengths, heads, head_dim, 1, 3)?);
    }
    Ok(())
}
