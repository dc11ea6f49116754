//! Sweeps the deterrence weight and threshold over a small grid, in
//! parallel, and tabulates the endpoint metrics per cell.

use w2r2::run_sweep;
use w2r2::scenes::{build_dataset, WorldConfig};
use w2r2::TrainConfig;

fn main() -> w2r2::Result<()> {
    let world = WorldConfig { train_count: 96, val_count: 48, ..WorldConfig::default() };
    let (train, val) = build_dataset(&world)?;
    let mcfg = w2r2::model::ModelConfig {
        n_categories: world.n_categories,
        ..w2r2::model::ModelConfig::default()
    };
    let tcfg = TrainConfig { epochs: 6, eval_every: 1000, ..TrainConfig::default() };

    let lambdas = [0.0, 1.5];
    let mus = [0.3, 0.7];
    let dir = std::env::temp_dir().join("w2r2-sweep");
    std::fs::create_dir_all(&dir).expect("create temp dir");

    println!(
        "sweeping {} cells on 2 workers ({} train scenes each)...",
        lambdas.len() * mus.len(),
        train.len()
    );
    let out = run_sweep(&world, &mcfg, &tcfg, &train, &val, &lambdas, &mus, 2, Some(&dir))?;

    println!(
        "\n{:>7} {:>5} {:>10} {:>13} {:>12} {:>10}",
        "lambda", "mu", "sel_fused", "sel_shortcut", "acc25_short", "sep_index"
    );
    for cell in &out.cells {
        let m = &cell.last;
        let sep = m.separation_index.map(|v| format!("{v:.3}")).unwrap_or("-".into());
        println!(
            "{:>7} {:>5} {:>10.3} {:>13.3} {:>12.3} {:>10}",
            cell.lambda, cell.mu, m.sel_acc_fused, m.sel_acc_shortcut, m.acc25_shortcut, sep
        );
    }
    for f in &out.failures {
        println!("cell lambda {} mu {} failed: {}", f.lambda, f.mu, f.message);
    }
    println!("\nper-cell artifacts and sweep.svg under {}", dir.display());
    Ok(())
}
