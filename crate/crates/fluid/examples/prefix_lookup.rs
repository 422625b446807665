//! Prefix n-gram embedding lookup vs plain level-wise indexing.
//!
//! A code's meaning at level l depends on its ancestry: codeword 2 under
//! parent 0 names a different residual direction than codeword 2 under
//! parent 3. Level-wise indexing collapses both onto one table row; the
//! prefix scheme gives every distinct prefix path its own row, falling
//! back to hashing only when a level's full prefix space outgrows the
//! row cap.
//!
//! Run with: `cargo run --example prefix_lookup`

use fluid::lucid::{prefix_indices, EmbeddingTableSet, LucidCode, TableScheme};
use fluid::Result;

fn main() -> Result<()> {
    // The worked example: N=4, two codes sharing the level-2 codeword.
    let n = 4;
    let a = LucidCode::slice(vec![0, 2]);
    let b = LucidCode::slice(vec![3, 2]);
    println!("prefix indices with N={n}:");
    for code in [&a, &b] {
        println!("  {:?} -> {:?}", code.codewords, prefix_indices(code, n)?);
    }
    println!("  same codeword 2, different parents -> rows 2 and 14\n");

    // Two table sets over the same code space.
    let levels = 3;
    let dim = 4;
    let prefix =
        EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, levels, n, dim, 1 << 20, 0.1, 7)?;
    let levelwise =
        EmbeddingTableSet::make_tables(TableScheme::LevelWise, levels, n, dim, 1 << 20, 0.1, 7)?;
    println!("rows per level (N={n}, L={levels}):");
    for l in 0..levels {
        println!(
            "  level {}: prefix {} rows, level-wise {} rows",
            l + 1,
            prefix.level_rows(l),
            levelwise.level_rows(l)
        );
    }

    // The aliasing level-wise indexing cannot avoid: sibling codes under
    // different parents share every row after level 1.
    let a = LucidCode::slice(vec![0, 2, 1]);
    let b = LucidCode::slice(vec![3, 2, 1]);
    println!("\nrow paths for {:?} and {:?}:", a.codewords, b.codewords);
    println!("  prefix:     {:?} vs {:?}", prefix.rows_for(&a)?, prefix.rows_for(&b)?);
    println!("  level-wise: {:?} vs {:?}", levelwise.rows_for(&a)?, levelwise.rows_for(&b)?);

    // Lookups concatenate one row per level into the code's embedding.
    let emb = prefix.lookup(&a)?;
    println!("\nlookup({:?}) -> {} dims ({} per level)", a.codewords, emb.len(), dim);

    // Deep levels overflow any fixed budget (N^l rows); the prefix scheme
    // caps them and hashes the composite index instead.
    let capped =
        EmbeddingTableSet::make_tables(TableScheme::PrefixNgram, 8, 16, dim, 1 << 16, 0.1, 7)?;
    println!("\nwith N=16, L=8, max_rows=65536:");
    for l in 0..8 {
        println!(
            "  level {}: {} rows{}",
            l + 1,
            capped.level_rows(l),
            if capped.level_hashed(l) { " (hashed)" } else { "" }
        );
    }
    Ok(())
}
