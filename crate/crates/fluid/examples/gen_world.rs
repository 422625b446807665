//! Generate a synthetic interaction world and inspect its oracle.
//!
//! The simulator builds a semantic tree (items are leaf paths), user
//! affinity vectors, and a tick-ordered impression log whose labels are
//! drawn from a known logistic oracle — so any ranker trained on the log
//! can be judged against the exact Bayes predictor.
//!
//! Run with: `cargo run --example gen_world`

use fluid::eval::auc;
use fluid::synthgen::{oracle_label_prob, write_log, LifetimeClass, World, WorldConfig};
use fluid::Result;

fn main() -> Result<()> {
    // A desk-scale world: ~60k records in a second or two.
    let config = WorldConfig {
        n_users: 500,
        n_items: 2000,
        ticks: 2000,
        records_per_tick: 30,
        seed: 42,
        ..WorldConfig::default()
    };
    let world = World::build(&config)?;
    let log = world.generate_log();

    let live = world
        .items
        .iter()
        .filter(|i| i.lifetime_class == LifetimeClass::EphemeralLive)
        .count();
    println!("world: {} users, {} items ({live} ephemeral live)", world.users.len(), world.items.len());
    println!("log:   {} records over {} ticks", log.len(), config.ticks);

    // The oracle: every record's label was drawn from a known probability.
    // Scoring those probabilities against the drawn labels gives the Bayes
    // AUC — the ceiling any trained model can approach but not beat.
    let users = world.user_index();
    let items = world.item_index();
    let mut oracle_preds = Vec::with_capacity(log.len());
    let mut labels = Vec::with_capacity(log.len());
    for r in &log {
        let user = &world.users[users[&r.user_id]];
        let item = &world.items[items[&r.item_id]];
        oracle_preds.push(oracle_label_prob(user, item, &world.tree, config.label_scale));
        labels.push(r.label);
    }
    let bayes = auc(&oracle_preds, &labels)?;
    let base_rate = labels.iter().map(|&y| y as f64).sum::<f64>() / labels.len() as f64;
    println!("oracle: Bayes AUC {bayes:.4}, positive rate {base_rate:.4}");

    // Cold traffic share: how many impressions hit items with little
    // history — the regime the ID-free candidate side is built for.
    let cold = log.iter().filter(|r| r.exposure < 50).count();
    println!("cold:  {:.1}% of impressions have exposure < 50", 100.0 * cold as f64 / log.len() as f64);

    // Persist the dataset; every downstream example and CLI command reads
    // these two files.
    let dir = std::env::temp_dir().join("fluid-example-world");
    std::fs::create_dir_all(&dir)?;
    world.save(&dir.join("world.json"))?;
    write_log(&dir.join("log.jsonl"), &log)?;
    println!("wrote {}", dir.display());
    Ok(())
}
