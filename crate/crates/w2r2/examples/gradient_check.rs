//! Checks the reverse-mode gradient of the full per-sample objective
//! (two forward passes, soft boxes, hinge) against central finite
//! differences, in both hinge regimes.

use w2r2::autodiff::check_gradients;
use w2r2::losses::{sample_loss, LossConfig, StopGradMode};
use w2r2::model::{forward, ModelConfig, ModelParams, Pass};
use w2r2::rng::stream;
use w2r2::scenes::{build_dataset, featurize, GroundingSample, SampleFeatures, WorldConfig};

/// Builds the objective once and reports whether the hinge is strictly
/// active plus the distance of the closest relu/min/max input to its
/// kink. The margin decides whether central differences are
/// trustworthy: near a kink they straddle two linear pieces.
fn probe(
    params: &ModelParams,
    sample: &GroundingSample,
    feats: &SampleFeatures,
    lcfg: &LossConfig,
) -> w2r2::Result<(bool, f64)> {
    let mut g = w2r2::Graph::new();
    let bound = params.bind(&mut g);
    let (bundle, _, _) = sample_loss(&mut g, &bound, sample, feats, lcfg)?;
    Ok((bundle.deterrence_active, g.kink_margin()))
}

/// Moves the target box onto the shortcut pass's soft box (slightly
/// offset to avoid exact ties), keeping the features fixed. The hinge
/// then sits strictly above its threshold at this initialization.
fn pull_target_onto_shortcut_box(
    params: &ModelParams,
    sample: &GroundingSample,
    feats: &SampleFeatures,
) -> w2r2::Result<GroundingSample> {
    let mut g = w2r2::Graph::new();
    let bound = params.bind(&mut g);
    let short = forward(&mut g, &bound, feats, &sample.query, Pass::Shortcut { detach_2d: false })?;
    let c = short.soft_center.data();
    let s = short.soft_size.data();
    let mut moved = sample.clone();
    let t = &mut moved.objects[moved.target_index];
    t.center = [c[0] + 0.011, c[1] + 0.012, c[2] + 0.013];
    t.size = [s[0] * 1.03, s[1] * 1.04, s[2] * 1.05];
    Ok(moved)
}

fn run_check(
    params: &ModelParams,
    sample: &GroundingSample,
    feats: &SampleFeatures,
    lcfg: &LossConfig,
) -> w2r2::Result<f64> {
    let mut values = Vec::new();
    params.for_each(|_, t| values.push(t.detached()));
    let cfg = params.cfg;
    check_gradients(
        |g, leaves| {
            let mut rebuilt = ModelParams::init(&cfg)?;
            let mut k = 0;
            rebuilt.for_each_mut(|_, t| {
                *t = leaves[k].clone();
                k += 1;
            });
            let (_, total, _) = sample_loss(g, &rebuilt, sample, feats, lcfg)?;
            Ok(total)
        },
        &values,
        1e-5,
    )
}

fn main() -> w2r2::Result<()> {
    let world = WorldConfig {
        n_objects_min: 2,
        n_objects_max: 4,
        n_categories: 5,
        train_count: 8,
        val_count: 2,
        seed: 42,
        ..WorldConfig::default()
    };
    let (samples, _) = build_dataset(&world)?;

    let mcfg = ModelConfig {
        n_categories: world.n_categories,
        d2d: 6,
        d3d: 6,
        dq: 6,
        dh: 10,
        ..ModelConfig::default()
    };

    // Finite differences see the true derivative, so the stop-gradient
    // must be off.
    let lcfg = LossConfig { stopgrad: StopGradMode::None, ..LossConfig::default() };

    // Regime 1: hinge gated. At random initialization the shortcut's
    // soft box misses the target, so the default threshold keeps the
    // hinge at zero and only the pull terms carry gradient.
    for (i, sample) in samples.iter().enumerate() {
        let feats = featurize(sample, i as u64, &world, stream::TRAIN_FEATURES);
        let mut found = None;
        for seed in 0..60 {
            let cand = ModelParams::init(&ModelConfig { seed, ..mcfg })?;
            let (active, margin) = probe(&cand, sample, &feats, &lcfg)?;
            if !active && margin > 1e-3 {
                found = Some(cand);
                break;
            }
        }
        let params = found.expect("no kink-safe gated initialization in 60 seeds");
        let err = run_check(&params, sample, &feats, &lcfg)?;
        println!(
            "scene {i} ({} objects, {} params, hinge gated):  max rel err {err:.3e}",
            sample.objects.len(),
            params.n_params()
        );
        assert!(err < 1e-4);
    }

    // Regime 2: hinge active. Drop the target box onto the shortcut's
    // soft box so the deterrence term is strictly positive and its
    // gradient flows through the shortcut pass.
    for (i, orig) in samples.iter().take(3).enumerate() {
        let feats = featurize(orig, i as u64, &world, stream::TRAIN_FEATURES);
        let mut found = None;
        for seed in 0..60 {
            let cand = ModelParams::init(&ModelConfig { seed, ..mcfg })?;
            let moved = pull_target_onto_shortcut_box(&cand, orig, &feats)?;
            let (active, margin) = probe(&cand, &moved, &feats, &lcfg)?;
            if active && margin > 1e-3 {
                found = Some((cand, moved));
                break;
            }
        }
        let (params, moved) = found.expect("no kink-safe active initialization in 60 seeds");
        let err = run_check(&params, &moved, &feats, &lcfg)?;
        println!(
            "scene {i} ({} objects, {} params, hinge active): max rel err {err:.3e}",
            moved.objects.len(),
            params.n_params()
        );
        assert!(err < 1e-4);
    }

    println!("all gradients match finite differences to < 1e-4");
    Ok(())
}
