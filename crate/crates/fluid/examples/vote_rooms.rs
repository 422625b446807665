//! Room-level codes by majority voting over slice codes.
//!
//! A live room's content drifts and its per-slice observations are noisy,
//! so single-slice codes flicker. Voting per level across all slices seen
//! so far gives a stable whole-broadcast identifier, and the recovery
//! curve shows how quickly the vote locks onto the true content code.
//!
//! Run with: `cargo run --example vote_rooms`

use fluid::eval::vote_recovery;
use fluid::lucid::{majority_vote, SliceHistory};
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
    let mut data = Vec::with_capacity(log.len() * config.dim);
    for r in &log {
        data.extend_from_slice(&r.slice_vec);
    }
    let (codebook, _) = Codebook::fit(&data, config.dim, 4, 16, 50, 1e-6, 7)?;

    // Follow one item through the log: its slice codes wobble, the
    // cumulative vote settles.
    let item_id = log[0].item_id;
    let mut history = SliceHistory::new(codebook.levels());
    println!("item {item_id:#018x}: slice codes vs cumulative room vote");
    let mut shown = 0;
    for r in log.iter().filter(|r| r.item_id == item_id) {
        let code = codebook.encode(&r.slice_vec)?;
        history.push(code.clone())?;
        let vote = majority_vote(&history)?;
        if shown < 8 {
            println!(
                "  slice {:>2}: {:?}  ->  room {:?}",
                history.len(),
                code.codewords,
                vote.codewords
            );
        }
        shown += 1;
    }
    println!("  ({shown} slices total)");

    // The recovery curve: fraction of simulated rooms whose vote equals
    // the code of their noiseless content mean, by slice count.
    println!("\nvote recovery vs slice count (median over 5 seeds, 200 rooms each):");
    let rows = vote_recovery(
        &codebook,
        &world.tree,
        config.sigma_drift,
        config.sigma_obs,
        &[1, 2, 5, 10, 25],
        &[1, 2, 3, 4, 5],
        200,
    )?;
    for row in rows {
        let bar = "#".repeat((row.median_rate * 40.0).round() as usize);
        println!("  {:>2} slices: {:.3} {bar}", row.slice_count, row.median_rate);
    }
    Ok(())
}
