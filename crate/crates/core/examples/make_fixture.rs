//! Regenerate a planted low-rank fixture in the text interaction format.
//!
//! ```text
//! cargo run --example make_fixture -- data/toy 50 100 10
//! ```
//! writes `train.txt`, `test.txt`, `heldout_history.txt` and
//! `heldout_test.txt` for `users x items` plus `heldout` history-only users.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use simplex_core::synthetic::{planted_with_heldout, PlantedConfig};

fn write_rows(path: PathBuf, first_id: usize, rows: &[Vec<u32>]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (u, items) in rows.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let items: Vec<String> = items.iter().map(u32::to_string).collect();
        writeln!(f, "{} {}", first_id + u, items.join(" "))?;
    }
    f.flush()
}

fn main() -> std::io::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().map_or("data/toy", String::as_str));
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let cfg = PlantedConfig {
        num_users: arg(1, 50),
        num_items: arg(2, 100),
        rank: 4,
        items_per_user: 15,
        signal: 6.0,
        seed: 11,
        ..PlantedConfig::default()
    };
    let (ds, held) = planted_with_heldout(&cfg, arg(3, 10));

    // Test items must be known from training.
    let known: BTreeSet<u32> = ds.train_seq.iter().flatten().copied().collect();
    let keep = |rows: &[Vec<u32>]| -> Vec<Vec<u32>> {
        rows.iter()
            .map(|r| r.iter().copied().filter(|i| known.contains(i)).collect())
            .collect()
    };

    fs::create_dir_all(&dir)?;
    write_rows(dir.join("train.txt"), 0, &ds.train_seq)?;
    write_rows(dir.join("test.txt"), 0, &keep(&ds.test_pos))?;
    write_rows(dir.join("heldout_history.txt"), cfg.num_users, &keep(&held.history))?;
    write_rows(dir.join("heldout_test.txt"), cfg.num_users, &keep(&held.test_pos))?;
    println!("wrote {}", dir.display());
    Ok(())
}
