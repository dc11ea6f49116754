//! Generates a synthetic grounding dataset, prints its shortcut
//! structure, and exports it as JSONL.

use w2r2::scenes::{build_dataset, satisfiers, write_jsonl, WorldConfig};

fn main() -> w2r2::Result<()> {
    let world = WorldConfig {
        train_count: 64,
        val_count: 16,
        rho: 0.5,
        ..WorldConfig::default()
    };
    let (train, val) = build_dataset(&world)?;

    println!(
        "generated {} train / {} val scenes ({}..={} objects, {} categories, rho {})",
        train.len(),
        val.len(),
        world.n_objects_min,
        world.n_objects_max,
        world.n_categories,
        world.rho,
    );

    // rho steers how many queries are answerable from category alone:
    // exactly one object of the queried category means the 2D view
    // already identifies the target.
    let category_unique = train
        .iter()
        .filter(|s| {
            s.objects
                .iter()
                .filter(|o| o.category == s.query.category)
                .count()
                == 1
        })
        .count();
    println!(
        "category-unique queries: {}/{} ({:.0}%)",
        category_unique,
        train.len(),
        100.0 * category_unique as f64 / train.len() as f64
    );

    let s = &train[0];
    println!("\nfirst scene:");
    for (i, o) in s.objects.iter().enumerate() {
        let mark = if i == s.target_index { " <- target" } else { "" };
        println!(
            "  [{i}] category {} at ({:+.2}, {:+.2}, {:+.2}) size ({:.2}, {:.2}, {:.2}){mark}",
            o.category, o.center[0], o.center[1], o.center[2], o.size[0], o.size[1], o.size[2]
        );
    }
    println!(
        "  query: category {} relation {:?} anchor {:?}",
        s.query.category, s.query.relation, s.query.anchor
    );
    println!(
        "  satisfiers: {:?} (unique target is guaranteed)",
        satisfiers(&s.objects, &s.query)
    );

    let dir = std::env::temp_dir().join("w2r2-generate-dataset");
    std::fs::create_dir_all(&dir).expect("create temp dir");
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("val.jsonl"), &val)?;
    println!("\nwrote JSONL splits to {}", dir.display());
    Ok(())
}
