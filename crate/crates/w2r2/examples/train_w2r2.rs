//! Trains with the pull-push objective and compares it against an
//! alignment-only baseline on the same data: the push term should
//! suppress the shortcut's localization without hurting fused accuracy.

use w2r2::losses::Objective;
use w2r2::scenes::{build_dataset, WorldConfig};
use w2r2::trainer::MetricsRecord;
use w2r2::{train_run, TrainConfig};

fn last(records: &[MetricsRecord]) -> &MetricsRecord {
    records.last().expect("at least the step-0 snapshot")
}

fn main() -> w2r2::Result<()> {
    let world = WorldConfig {
        train_count: 192,
        val_count: 64,
        rho: 0.7,
        ..WorldConfig::default()
    };
    let (train, val) = build_dataset(&world)?;
    let mcfg = w2r2::model::ModelConfig {
        n_categories: world.n_categories,
        ..w2r2::model::ModelConfig::default()
    };
    let base = TrainConfig { epochs: 12, eval_every: 72, ..TrainConfig::default() };

    println!("training both objectives on {} scenes...", train.len());
    let baseline = train_run(
        &world,
        &mcfg,
        &TrainConfig { objective: Objective::AlignmentOnly, ..base },
        &train,
        &val,
        None,
    )?;
    let pushed = train_run(
        &world,
        &mcfg,
        &TrainConfig { objective: Objective::PullPush, ..base },
        &train,
        &val,
        None,
    )?;

    println!("\npull-push trajectory (lambda {}, mu {}):", base.lambda, base.mu);
    println!(
        "{:>6} {:>11} {:>11} {:>10} {:>13} {:>11}",
        "step", "loss_align", "hinge", "sel_fused", "sel_shortcut", "sep_index"
    );
    for r in &pushed.records {
        let sep = r.separation_index.map(|v| format!("{v:.3}")).unwrap_or("-".into());
        println!(
            "{:>6} {:>11.4} {:>11.4} {:>10.3} {:>13.3} {:>11}",
            r.step, r.loss_align, r.loss_deterrence, r.sel_acc_fused, r.sel_acc_shortcut, sep
        );
    }

    let b = last(&baseline.records);
    let p = last(&pushed.records);
    println!("\nfinal comparison (baseline vs pull-push):");
    println!("  fused selection    {:.3} vs {:.3}", b.sel_acc_fused, p.sel_acc_fused);
    println!("  fused acc@0.50     {:.3} vs {:.3}", b.acc50_fused, p.acc50_fused);
    println!("  shortcut acc@0.25  {:.3} vs {:.3}", b.acc25_shortcut, p.acc25_shortcut);
    println!("  hinge level        {:.4} vs {:.4}", b.loss_deterrence, p.loss_deterrence);

    let dir = std::env::temp_dir().join("w2r2-train");
    std::fs::create_dir_all(&dir).expect("create temp dir");
    let svg = w2r2::diagnostics::training_curves_svg(&pushed.records);
    std::fs::write(dir.join("curves.svg"), svg).expect("write svg");
    println!("\nwrote training curves to {}", dir.join("curves.svg").display());
    Ok(())
}
