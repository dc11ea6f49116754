//! Training loop: batched dual-pass objective, SGD/Adam updates over the
//! fixed parameter order, and periodic evaluation snapshots written as CSV.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::diagnostics::separation_index;
use crate::error::{Error, Result};
use crate::geometry::acc_at;
use crate::losses::{
    alignment_loss, deterrence_loss, locate_loss, sample_loss, LossConfig, Objective, StopGradMode,
};
use crate::model::{forward, save_checkpoint, ModelConfig, ModelParams, Pass};
use crate::rng::{derive_rng, stream};
use crate::scenes::{featurize_split, GroundingSample, SampleFeatures, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mu: f64,
    pub box_weight: f64,
    pub objective: Objective,
    pub stopgrad: StopGradMode,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between evaluation snapshots; a snapshot is always taken
    /// before the first update and after the last one.
    pub eval_every: usize,
    /// Drives epoch shuffling only; data and init have their own seeds.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.5,
            mu: 0.7,
            box_weight: 1.0,
            objective: Objective::PullPush,
            stopgrad: StopGradMode::EncoderBlocked,
            optimizer: Optimizer::Adam,
            lr: 3e-3,
            epochs: 30,
            batch_size: 8,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            mu: self.mu,
            box_weight: self.box_weight,
            objective: self.objective,
            stopgrad: self.stopgrad,
        }
    }
}

/// One evaluation snapshot. Losses are means over the evaluation set;
/// accuracies are fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_align: f64,
    /// Mean raw hinge value (before lambda), measured for every
    /// objective as a diagnostic.
    pub loss_deterrence: f64,
    /// Mean training objective: align + box_weight*locate, plus
    /// lambda*hinge when the objective has a push term.
    pub loss_total: f64,
    pub acc25_fused: f64,
    pub acc50_fused: f64,
    pub acc25_shortcut: f64,
    pub acc50_shortcut: f64,
    pub sel_acc_fused: f64,
    pub sel_acc_shortcut: f64,
    /// None when the fused/2D/3D population centroids coincide.
    pub separation_index: Option<f64>,
    /// Fraction of evaluation samples whose shortcut box sits above mu.
    pub hinge_activation_rate: f64,
}

pub const CSV_HEADER: &str = "step,loss_align,loss_deterrence,loss_total,acc25_fused,acc50_fused,acc25_shortcut,acc50_shortcut,sel_acc_fused,sel_acc_shortcut,separation_index,hinge_activation_rate";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let sep = match self.separation_index {
            Some(v) => format!("{v}"),
            None => "nan".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_align,
            self.loss_deterrence,
            self.loss_total,
            self.acc25_fused,
            self.acc50_fused,
            self.acc25_shortcut,
            self.acc50_shortcut,
            self.sel_acc_fused,
            self.sel_acc_shortcut,
            sep,
            self.hinge_activation_rate,
        )
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, one pair per tensor in the fixed
/// parameter order.
struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptState {
    fn new(params: &ModelParams) -> OptState {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(vec![0.0; t.numel()]));
        OptState { v: m.clone(), m, t: 0 }
    }
}

fn apply_update(
    params: &mut ModelParams,
    state: &mut OptState,
    opt: Optimizer,
    lr: f64,
    grads: &[Vec<f64>],
    step: u64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_B1.powi(t);
    let bc2 = 1.0 - ADAM_B2.powi(t);
    let mut slot = 0;
    let (ms, vs) = (&mut state.m, &mut state.v);
    params.for_each_mut(|_, tens| {
        let g = &grads[slot];
        let data = tens.data_mut();
        match opt {
            Optimizer::Sgd => {
                for (p, &gi) in data.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            Optimizer::Adam => {
                let m = &mut ms[slot];
                let v = &mut vs[slot];
                for i in 0..g.len() {
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                    data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
        slot += 1;
    });
    let mut bad: Option<String> = None;
    params.for_each(|name, t| {
        if bad.is_none() && t.data().iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFinite {
            context: format!("parameter {name} after update at step {step}"),
        }),
        None => Ok(()),
    }
}

/// One optimizer step over a batch of dataset indices. Returns the batch
/// loss (mean of per-sample totals).
fn train_step(
    params: &mut ModelParams,
    state: &mut OptState,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    samples: &[GroundingSample],
    feats: &[SampleFeatures],
    batch: &[usize],
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut totals = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (_, total, _) = sample_loss(&mut g, &bound, &samples[idx], &feats[idx], lcfg)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step, sample: idx },
                other => other,
            })?;
        totals.push(total);
    }
    let parts: Vec<&Tensor> = totals.iter().collect();
    let cat = g.concat_lastaxis(&parts)?;
    let loss = g.mean(&cat)?;
    let grads = g.backward(&loss)?;
    let mut gvecs = Vec::with_capacity(22);
    bound.for_each(|_, t| gvecs.push(grads.wrt_or_zeros(t)));
    apply_update(params, state, tcfg.optimizer, tcfg.lr, &gvecs, step)?;
    Ok(loss.item())
}

/// Scores a model on an evaluation split. Both passes run on every
/// sample; the hinge is measured even when the objective never trains
/// against it, so records from different objectives stay comparable.
pub fn evaluate(
    params: &ModelParams,
    samples: &[GroundingSample],
    feats: &[SampleFeatures],
    tcfg: &TrainConfig,
    step: u64,
) -> Result<MetricsRecord> {
    if samples.is_empty() || samples.len() != feats.len() {
        return Err(Error::Data(format!(
            "evaluation split has {} samples and {} feature rows",
            samples.len(),
            feats.len()
        )));
    }
    let n = samples.len() as f64;
    let mut align = 0.0;
    let mut locate = 0.0;
    let mut det = 0.0;
    let mut active = 0usize;
    let mut sel_f = 0usize;
    let mut sel_s = 0usize;
    let mut a25_f = 0usize;
    let mut a50_f = 0usize;
    let mut a25_s = 0usize;
    let mut a50_s = 0usize;

    for (s, f) in samples.iter().zip(feats) {
        let gt = s.objects[s.target_index].bbox()?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fused = forward(&mut g, &bound, f, &s.query, Pass::Fused)?;
        let shortcut = forward(&mut g, &bound, f, &s.query, Pass::Shortcut { detach_2d: false })?;

        let (fi, fbox) = fused.predict()?;
        sel_f += (fi == s.target_index) as usize;
        a25_f += acc_at(&fbox, &gt, 0.25) as usize;
        a50_f += acc_at(&fbox, &gt, 0.50) as usize;

        let (si, sbox) = shortcut.predict()?;
        sel_s += (si == s.target_index) as usize;
        a25_s += acc_at(&sbox, &gt, 0.25) as usize;
        a50_s += acc_at(&sbox, &gt, 0.50) as usize;

        align += alignment_loss(&mut g, &fused.weights, s.target_index)?.item();
        locate += locate_loss(&mut g, &fused.soft_center, &fused.soft_size, &gt)?.item();
        let (hinge, hot) =
            deterrence_loss(&mut g, &shortcut.soft_center, &shortcut.soft_size, &gt, tcfg.mu)?;
        det += hinge.item();
        active += hot as usize;
    }

    let lambda_eff = match tcfg.objective {
        Objective::PullPush => tcfg.lambda,
        Objective::AlignmentOnly => 0.0,
    };
    let loss_align = align / n;
    let loss_locate = locate / n;
    let loss_det = det / n;
    Ok(MetricsRecord {
        step,
        loss_align,
        loss_deterrence: loss_det,
        loss_total: loss_align + tcfg.box_weight * loss_locate + lambda_eff * loss_det,
        acc25_fused: a25_f as f64 / n,
        acc50_fused: a50_f as f64 / n,
        acc25_shortcut: a25_s as f64 / n,
        acc50_shortcut: a50_s as f64 / n,
        sel_acc_fused: sel_f as f64 / n,
        sel_acc_shortcut: sel_s as f64 / n,
        separation_index: separation_index(params, feats)?,
        hinge_activation_rate: active as f64 / n,
    })
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub params: ModelParams,
}

/// Full training run: featurize, init, iterate shuffled batches, snapshot
/// metrics, and (optionally) write `metrics.csv` plus a final `model.json`
/// into `out_dir`.
pub fn train_run(
    world: &WorldConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[GroundingSample],
    val: &[GroundingSample],
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    world.validate()?;
    mcfg.validate()?;
    tcfg.validate()?;
    if mcfg.n_categories != world.n_categories {
        return Err(Error::Config(format!(
            "model expects {} categories but the world has {}",
            mcfg.n_categories, world.n_categories
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("empty training or evaluation split".into()));
    }
    let train_feats = featurize_split(train, world, stream::TRAIN_FEATURES);
    let val_feats = featurize_split(val, world, stream::VAL_FEATURES);
    let lcfg = tcfg.loss_config();

    let mut params = ModelParams::init(mcfg)?;
    let mut state = OptState::new(&params);
    let mut records = vec![evaluate(&params, val, &val_feats, tcfg, 0)?];
    let mut step: u64 = 0;
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = derive_rng(&[tcfg.seed, stream::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(tcfg.batch_size) {
            step += 1;
            train_step(&mut params, &mut state, tcfg, &lcfg, train, &train_feats, batch, step)?;
            if step % tcfg.eval_every as u64 == 0 {
                records.push(evaluate(&params, val, &val_feats, tcfg, step)?);
            }
        }
    }
    if records.last().map(|r| r.step) != Some(step) {
        records.push(evaluate(&params, val, &val_feats, tcfg, step)?);
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        save_checkpoint(&dir.join("model.json"), &params)?;
    }
    Ok(RunOutput { records, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LOG_SIZE_PRIOR;
    use crate::scenes::{build_dataset, size_table};
    use std::collections::HashMap;

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            n_objects_min: 3,
            n_objects_max: 5,
            n_categories: 6,
            train_count: 24,
            val_count: 12,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    fn tiny_model(seed: u64) -> ModelConfig {
        ModelConfig {
            n_categories: 6,
            d2d: 8,
            d3d: 8,
            dq: 8,
            dh: 12,
            init_scale: 1.0,
            seed,
        }
    }

    fn quick_train(objective: Objective, lambda: f64) -> TrainConfig {
        TrainConfig {
            objective,
            lambda,
            lr: 1e-2,
            epochs: 2,
            batch_size: 6,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..ok },
            TrainConfig { lr: f64::NAN, ..ok },
            TrainConfig { batch_size: 0, ..ok },
            TrainConfig { eval_every: 0, ..ok },
            TrainConfig { lambda: -1.0, ..ok },
            TrainConfig { mu: 1.5, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn csv_rows_round_trip_and_encode_missing_separation() {
        let rec = MetricsRecord {
            step: 7,
            loss_align: 0.1 + 0.2,
            loss_deterrence: 1.0 / 3.0,
            loss_total: 0.5,
            acc25_fused: 0.25,
            acc50_fused: 0.125,
            acc25_shortcut: 0.0,
            acc50_shortcut: 0.0,
            sel_acc_fused: 1.0,
            sel_acc_shortcut: 0.5,
            separation_index: None,
            hinge_activation_rate: 0.75,
        };
        let row = rec.csv_row();
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), CSV_HEADER.split(',').count());
        assert_eq!(cells[0], "7");
        assert_eq!(cells[10], "nan");
        // Display output must parse back to the same bits.
        assert_eq!(cells[1].parse::<f64>().unwrap().to_bits(), (0.1 + 0.2f64).to_bits());
        assert_eq!(cells[2].parse::<f64>().unwrap().to_bits(), (1.0 / 3.0f64).to_bits());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some(row.as_str()));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn zero_lambda_and_alignment_only_produce_identical_runs() {
        let world = tiny_world();
        let (train, val) = build_dataset(&world).unwrap();
        let mcfg = tiny_model(3);

        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("zero_lambda");
        let out_b = dir.path().join("alignment_only");
        let a = train_run(
            &world,
            &mcfg,
            &quick_train(Objective::PullPush, 0.0),
            &train,
            &val,
            Some(&out_a),
        )
        .unwrap();
        let b = train_run(
            &world,
            &mcfg,
            &quick_train(Objective::AlignmentOnly, 0.0),
            &train,
            &val,
            Some(&out_b),
        )
        .unwrap();

        assert_eq!(a.params.checksum(), b.params.checksum());
        let csv_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(a.records.len() > 2);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let world = tiny_world();
        let (train, val) = build_dataset(&world).unwrap();
        let mcfg = tiny_model(5);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let a = train_run(&world, &mcfg, &tcfg, &train, &val, None).unwrap();
        let b = train_run(&world, &mcfg, &tcfg, &train, &val, None).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn sgd_descends_on_a_memorizable_batch() {
        let world = WorldConfig {
            train_count: 8,
            val_count: 4,
            ..tiny_world()
        };
        let (train, _) = build_dataset(&world).unwrap();
        let feats = featurize_split(&train, &world, stream::TRAIN_FEATURES);
        let tcfg = TrainConfig {
            objective: Objective::AlignmentOnly,
            optimizer: Optimizer::Sgd,
            lr: 0.02,
            ..TrainConfig::default()
        };
        let lcfg = tcfg.loss_config();
        let mut params = ModelParams::init(&tiny_model(9)).unwrap();
        let mut state = OptState::new(&params);
        let batch: Vec<usize> = (0..train.len()).collect();
        let first = train_step(&mut params, &mut state, &tcfg, &lcfg, &train, &feats, &batch, 1)
            .unwrap();
        let mut last = first;
        for step in 2..=40 {
            last = train_step(&mut params, &mut state, &tcfg, &lcfg, &train, &feats, &batch, step)
                .unwrap();
        }
        assert!(
            last < 0.8 * first,
            "full-batch SGD failed to descend: first {first}, last {last}"
        );
    }

    #[test]
    fn untrained_model_selects_near_chance() {
        let world = WorldConfig {
            train_count: 4,
            val_count: 200,
            ..tiny_world()
        };
        let (_, val) = build_dataset(&world).unwrap();
        let feats = featurize_split(&val, &world, stream::VAL_FEATURES);
        let params = ModelParams::init(&tiny_model(21)).unwrap();
        let rec = evaluate(&params, &val, &feats, &TrainConfig::default(), 0).unwrap();
        let chance: f64 =
            val.iter().map(|s| 1.0 / s.objects.len() as f64).sum::<f64>() / val.len() as f64;
        // Three-sigma band for 200 Bernoulli draws at p ~ chance.
        let band = 3.0 * (chance * (1.0 - chance) / 200.0).sqrt();
        assert!(
            (rec.sel_acc_fused - chance).abs() <= band + 0.02,
            "untrained selection {} vs chance {} (band {})",
            rec.sel_acc_fused,
            chance,
            band
        );
    }

    #[test]
    fn epochs_zero_evaluates_without_touching_params() {
        let world = tiny_world();
        let (train, val) = build_dataset(&world).unwrap();
        let mcfg = tiny_model(2);
        let tcfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train_run(&world, &mcfg, &tcfg, &train, &val, Some(dir.path())).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 0);
        assert_eq!(
            out.params.checksum(),
            ModelParams::init(&mcfg).unwrap().checksum()
        );
        let back = crate::model::load_checkpoint(&dir.path().join("model.json")).unwrap();
        assert_eq!(back.checksum(), out.params.checksum());
    }

    #[test]
    fn snapshot_schedule_hits_interval_and_final_step() {
        let world = WorldConfig {
            train_count: 12,
            val_count: 4,
            ..tiny_world()
        };
        let (train, val) = build_dataset(&world).unwrap();
        let mcfg = tiny_model(2);
        // 3 steps per epoch, 2 epochs, snapshots every 2 steps.
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let out = train_run(&world, &mcfg, &tcfg, &train, &val, None).unwrap();
        let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 6]);

        let tcfg = TrainConfig { eval_every: 4, ..tcfg };
        let out = train_run(&world, &mcfg, &tcfg, &train, &val, None).unwrap();
        let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 4, 6]);
    }

    #[test]
    fn runaway_learning_rate_fails_with_step_context() {
        let world = tiny_world();
        let (train, val) = build_dataset(&world).unwrap();
        let tcfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            lr: 1e12,
            epochs: 2,
            ..TrainConfig::default()
        };
        let err = train_run(&world, &tiny_model(4), &tcfg, &train, &val, None).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let msg = format!("{err}");
        assert!(msg.contains("step"), "no step context in: {msg}");
    }

    // Hand-built parameters that solve the noise-free, category-only world
    // exactly: encoders pass categories and geometry through untouched, the
    // decoder computes a category-match indicator, and the heads read the
    // answer off directly. Scoring such a model exercises every metric path
    // in `evaluate` with known-perfect expectations.
    #[test]
    fn oracle_parameters_score_perfectly() {
        let world = WorldConfig {
            n_objects_min: 3,
            n_objects_max: 6,
            n_categories: 4,
            rho: 1.0,
            sigma_2d: 0.0,
            sigma_3d: 0.0,
            size_jitter: 0.0,
            train_count: 4,
            val_count: 16,
            seed: 40,
            ..WorldConfig::default()
        };
        let (_, val) = build_dataset(&world).unwrap();
        let feats = featurize_split(&val, &world, stream::VAL_FEATURES);
        let mcfg = ModelConfig {
            n_categories: 4,
            d2d: 4,
            d3d: 6,
            dq: 4,
            dh: 11,
            init_scale: 1.0,
            seed: 0,
        };
        let mut params = ModelParams::init(&mcfg).unwrap();
        let table = size_table(&world);

        // Row-major [out, in] helper.
        let mat = |out: usize, inp: usize, entries: &[(usize, usize, f64)]| {
            let mut w = vec![0.0; out * inp];
            for &(r, c, v) in entries {
                w[r * inp + c] = v;
            }
            w
        };
        let eye = |n: usize| {
            let entries: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
            mat(n, n, &entries)
        };

        let mut want: HashMap<&str, Vec<f64>> = HashMap::new();
        // f2d = [onehot(cat); qx; qy]: keep the onehot, drop the positions.
        want.insert("enc2d.l1.w", mat(4, 6, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0)]));
        want.insert("enc2d.l2.w", eye(4));
        // f3d = [center; size]: identity end to end (all entries nonnegative,
        // so the interior relu is transparent).
        want.insert("enc3d.l1.w", eye(6));
        want.insert("enc3d.l2.w", eye(6));
        // Query features = [onehot(cat); onehot(relation); anchor]: keep the
        // category.
        want.insert(
            "qembed.w",
            mat(4, 12, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0)]),
        );
        // Fusion input [e2(4); e3(6)] -> [onehot(4); center(3); 0 0 0 0].
        let mut f1 = Vec::new();
        for i in 0..10 {
            f1.push((i, i, 1.0));
        }
        want.insert("fusion.l1.w", mat(11, 10, &f1));
        let mut f2 = Vec::new();
        for i in 0..7 {
            f2.push((i, i, 1.0));
        }
        want.insert("fusion.l2.w", mat(11, 11, &f2));
        // Decoder input [fused(11); q(4)] -> h = [match(4); center(3); onehot(4)].
        let mut d = Vec::new();
        for c in 0..4 {
            d.push((c, c, 1.0)); // object onehot
            d.push((c, 11 + c, 1.0)); // query onehot
            d.push((7 + c, c, 1.0)); // carry the onehot for the size head
        }
        for ax in 0..3 {
            d.push((4 + ax, 4 + ax, 1.0));
        }
        want.insert("dec.w", mat(11, 15, &d));
        let mut dec_b = vec![0.0; 11];
        for c in 0..4 {
            dec_b[c] = -1.0; // relu(onehot + query - 1) = category match
        }
        want.insert("dec.b", dec_b);
        want.insert(
            "head_logit.w",
            mat(1, 11, &[(0, 0, 30.0), (0, 1, 30.0), (0, 2, 30.0), (0, 3, 30.0)]),
        );
        let mut hc = Vec::new();
        for ax in 0..3 {
            hc.push((ax, 4 + ax, 1.0));
        }
        want.insert("head_center.w", mat(3, 11, &hc));
        want.insert("head_center.b", vec![-0.5; 3]);
        let mut hs = Vec::new();
        for c in 0..4 {
            for ax in 0..3 {
                hs.push((ax, 7 + c, table[c][ax].ln() - LOG_SIZE_PRIOR));
            }
        }
        want.insert("head_size.w", mat(3, 11, &hs));

        params.for_each_mut(|name, t| {
            let d = t.data_mut();
            match want.get(name) {
                Some(v) => {
                    assert_eq!(v.len(), d.len(), "shape mismatch for {name}");
                    d.copy_from_slice(v);
                }
                None => d.fill(0.0), // remaining biases
            }
        });

        let rec = evaluate(&params, &val, &feats, &TrainConfig::default(), 0).unwrap();
        assert_eq!(rec.sel_acc_fused, 1.0);
        assert_eq!(rec.acc25_fused, 1.0);
        assert_eq!(rec.acc50_fused, 1.0);
        assert!(rec.loss_align < 1e-9, "align {}", rec.loss_align);
        // The shortcut pass keeps the category (2D evidence) but loses the
        // geometry: it still selects the right object yet cannot place it.
        assert_eq!(rec.sel_acc_shortcut, 1.0);
        assert_eq!(rec.acc25_shortcut, 0.0);
        assert_eq!(rec.acc50_shortcut, 0.0);
    }
}
