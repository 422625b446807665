//! Fit a residual-quantization codebook and watch the residual shrink.
//!
//! RQ-KMeans stacks k-means fits: level 1 clusters the raw embeddings,
//! level 2 clusters what level 1 left unexplained, and so on. Each
//! codeword tuple is a coarse-to-fine address into content space.
//!
//! Run with: `cargo run --example fit_codebook`

use fluid::rqkmeans::Codebook;
use fluid::synthgen::{World, WorldConfig};
use fluid::Result;

fn main() -> Result<()> {
    let config = WorldConfig {
        n_users: 200,
        n_items: 1500,
        ticks: 1000,
        records_per_tick: 25,
        seed: 42,
        ..WorldConfig::default()
    };
    let world = World::build(&config)?;
    let log = world.generate_log();

    // Training data: observed slice embeddings (content + drift + noise).
    let dim = config.dim;
    let mut data = Vec::with_capacity(log.len() * dim);
    for r in &log {
        data.extend_from_slice(&r.slice_vec);
    }
    println!("fitting L=4, N=16 on {} vectors (dim {dim})", log.len());
    let (codebook, report) = Codebook::fit(&data, dim, 4, 16, 50, 1e-6, 7)?;

    // The residual energy after each level: every level must explain part
    // of what remains, so the sequence decreases.
    println!("mean squared input norm: {:.4}", report.input_mean_square);
    for (level, (mse, iters)) in
        report.mean_squared_residual.iter().zip(&report.iterations).enumerate()
    {
        println!(
            "  after level {}: residual {:.4} ({} Lloyd iterations)",
            level + 1,
            mse,
            iters
        );
    }

    // encode → decode is lossy, but adding back the final residual is an
    // exact identity: the codebook is a decomposition, not a projection.
    let z = &data[..dim];
    let (code, residual) = codebook.encode_with_residual(z)?;
    let decoded = codebook.decode(&code)?;
    let max_err = z
        .iter()
        .zip(decoded.iter().zip(&residual))
        .map(|(&zi, (&di, &ri))| (zi as f64 - (di + ri)).abs())
        .fold(0.0f64, f64::max);
    println!("codewords of first slice: {:?}", code.codewords);
    println!("decode + residual reconstructs input exactly (max err {max_err:.1e})");

    // Files round-trip bit-identically.
    let path = std::env::temp_dir().join("fluid-example-codebook.bin");
    codebook.save(&path)?;
    let loaded = Codebook::load(&path)?;
    assert_eq!(loaded.encode(z)?.codewords, code.codewords);
    println!("saved and reloaded {} (encoding unchanged)", path.display());
    Ok(())
}
