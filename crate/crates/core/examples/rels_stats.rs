//! Label distribution of a `.rels` file or directory, with the majority
//! baseline it implies.
//!
//!     cargo run --example rels_stats -- crates/core/fixtures/dev_1k.rels

use std::path::PathBuf;

use hidac::evaluation::majority_baseline;
use hidac::relsdata::{apply_ordering, corpus_stats, Direction, load_rels_path, OrderingStrategy, RelsSchema};

fn main() -> hidac::error::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/dev_1k.rels")));
    let instances = load_rels_path(&path, &RelsSchema::default())?;
    let stats = corpus_stats(&instances);

    println!("{} instances ({} masked)", stats.total, stats.masked);
    let mut rows: Vec<_> = stats.distribution.counts.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1));
    for (label, count) in rows {
        println!("  {:<14} {count:>6}  {:>6.2}%", label.name(), 100.0 * stats.distribution.proportions[label]);
    }
    for (fw, d) in &stats.by_framework {
        println!("framework {fw}: {}", d.total);
    }
    if let Some((label, acc)) = majority_baseline(&stats.distribution) {
        println!("always predicting {label} scores {acc:.4}");
    }

    // Relation-directed ordering swaps arguments of backward relations.
    if let Some(inst) = instances.iter().find(|i| i.direction == Direction::Backward) {
        let pair = apply_ordering(inst, OrderingStrategy::RelationDirected);
        println!("\n{} ({}):\n  first:  {}\n  second: {}", inst.id, inst.label, pair.first, pair.second);
    }
    Ok(())
}
