//! Trains the fusion model with the conventional objective (alignment +
//! localization, no deterrence) and shows the shortcut it picks up: the
//! 2D-only pathway alone ends up selecting targets far above chance.

use w2r2::losses::Objective;
use w2r2::scenes::{build_dataset, featurize_split, WorldConfig};
use w2r2::rng::stream;
use w2r2::{shortcut_probe, train_run, TrainConfig};

fn main() -> w2r2::Result<()> {
    let world = WorldConfig {
        train_count: 192,
        val_count: 64,
        rho: 0.7, // most queries answerable from category alone
        ..WorldConfig::default()
    };
    let (train, val) = build_dataset(&world)?;
    let mcfg = w2r2::model::ModelConfig {
        n_categories: world.n_categories,
        ..w2r2::model::ModelConfig::default()
    };
    let tcfg = TrainConfig {
        objective: Objective::AlignmentOnly,
        epochs: 12,
        eval_every: 72,
        ..TrainConfig::default()
    };

    println!("training alignment-only on {} scenes (rho {})", train.len(), world.rho);
    let run = train_run(&world, &mcfg, &tcfg, &train, &val, None)?;

    println!("\n{:>6} {:>11} {:>10} {:>13} {:>11}", "step", "loss_align", "sel_fused", "sel_shortcut", "acc50_fused");
    for r in &run.records {
        println!(
            "{:>6} {:>11.4} {:>10.3} {:>13.3} {:>11.3}",
            r.step, r.loss_align, r.sel_acc_fused, r.sel_acc_shortcut, r.acc50_fused
        );
    }

    let feats = featurize_split(&val, &world, stream::VAL_FEATURES);
    let probe = shortcut_probe(&run.params, &val, &feats)?;
    println!(
        "\nshortcut pathway: selection {:.3} vs chance {:.3} on {} scenes",
        probe.sel_acc, probe.chance, probe.n
    );
    println!("the 2D view alone beats chance: the model leans on the shortcut.");
    Ok(())
}
