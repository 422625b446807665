//! Scratch probe: mean-oracle vs per-slice-oracle AUC on a generated log.
//! Not a curated example; delete before release.
//!
//! Usage: _probe_oracle <data-dir>

use fluid::eval;
use fluid::synthgen::{read_log, InteractionRecord, World};
use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).expect("usage: _probe_oracle <data-dir>");
    let dir = Path::new(&dir);
    let world = World::load(&dir.join("world.json")).expect("world");
    let log: Vec<InteractionRecord> = read_log(&dir.join("log.jsonl")).expect("log");
    let items = world.item_index();
    let users = world.user_index();
    let labels: Vec<u8> = log.iter().map(|r| r.label).collect();
    let mean: Vec<f64> = log
        .iter()
        .map(|r| world.oracle_label_prob(&world.users[users[&r.user_id]], &world.items[items[&r.item_id]]))
        .collect();
    let pos = labels.iter().map(|&l| f64::from(l)).sum::<f64>() / labels.len() as f64;
    println!(
        "records {} pos_rate {:.4}  oracle AUC {:.4}",
        log.len(),
        pos,
        eval::auc(&mean, &labels).unwrap(),
    );
}
