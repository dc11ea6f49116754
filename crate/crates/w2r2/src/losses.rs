//! Training objective: a pull term that rewards grounding the right
//! object, and an optional push term that punishes the model when its
//! 3D-blind shortcut pass still localizes the target well.
//!
//! Pull: cross-entropy on the fused pass's selection weights plus a
//! squared-error term tying the fused soft box to the target box.
//!
//! Push (deterrence): hinge on the shortcut pass's soft-box IoU with the
//! target, `relu(iou - mu)`, scaled by `lambda`. With the default
//! blocking mode the shortcut pass detaches the 2D encoder output, so
//! deterrence reshapes fusion and decoder but never the encoder that
//! produced the evidence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{iou3d_grad, Box3};
use crate::model::{forward, Forward, ModelParams, Pass};
use crate::scenes::{GroundingSample, SampleFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Pull and push terms.
    PullPush,
    /// Pull terms only; the shortcut pass is never run during training.
    AlignmentOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopGradMode {
    /// Detach the 2D encoder output inside the shortcut pass.
    EncoderBlocked,
    /// Let deterrence gradients reach the 2D encoder too.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Deterrence weight.
    pub lambda: f64,
    /// Shortcut-IoU level above which deterrence activates.
    pub mu: f64,
    /// Weight of the soft-box localization term.
    pub box_weight: f64,
    pub objective: Objective,
    pub stopgrad: StopGradMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.5,
            mu: 0.7,
            box_weight: 1.0,
            objective: Objective::PullPush,
            stopgrad: StopGradMode::EncoderBlocked,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must be in [0, 1], got {}", self.mu)));
        }
        if !(self.box_weight >= 0.0 && self.box_weight.is_finite()) {
            return Err(Error::Config(format!(
                "box_weight must be >= 0, got {}",
                self.box_weight
            )));
        }
        Ok(())
    }
}

/// Loss values of one sample, as plain numbers for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub align: f64,
    pub locate: f64,
    /// Raw hinge value (before lambda).
    pub deterrence: f64,
    pub total: f64,
    /// Whether the hinge was strictly above zero.
    pub deterrence_active: bool,
}

fn onehot(n: usize, idx: usize) -> Result<Tensor> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    Tensor::from_vec(v)
}

/// Cross-entropy of the selection weights against the target index:
/// `-ln(weights[target])`.
pub fn alignment_loss(g: &mut Graph, weights: &Tensor, target: usize) -> Result<Tensor> {
    let n = weights.numel();
    if weights.shape().len() != 1 || target >= n {
        return Err(Error::Shape {
            op: "alignment_loss",
            detail: format!("weights {:?}, target {target}", weights.shape()),
        });
    }
    let mask = onehot(n, target)?;
    let picked = g.mul(weights, &mask)?;
    let p = g.sum(&picked)?;
    let logp = g.log(&p)?;
    let zero = Tensor::scalar(0.0)?;
    g.sub(&zero, &logp)
}

/// Squared error between the soft box and the target box (center and
/// size, six coordinates).
pub fn locate_loss(
    g: &mut Graph,
    soft_center: &Tensor,
    soft_size: &Tensor,
    gt: &Box3,
) -> Result<Tensor> {
    let c_gt = Tensor::from_vec(gt.center.to_vec())?;
    let s_gt = Tensor::from_vec(gt.size.to_vec())?;
    let dc = g.sub(soft_center, &c_gt)?;
    let ds = g.sub(soft_size, &s_gt)?;
    let dc2 = g.mul(&dc, &dc)?;
    let ds2 = g.mul(&ds, &ds)?;
    let sc = g.sum(&dc2)?;
    let ss = g.sum(&ds2)?;
    g.add(&sc, &ss)
}

/// Hinge on 3D-blind localization quality: `relu(iou(soft box, gt) - mu)`.
/// Also reports whether the hinge is strictly active.
pub fn deterrence_loss(
    g: &mut Graph,
    soft_center: &Tensor,
    soft_size: &Tensor,
    gt: &Box3,
    mu: f64,
) -> Result<(Tensor, bool)> {
    let iou = iou3d_grad(g, soft_center, soft_size, gt)?;
    let mu_t = Tensor::scalar(mu)?;
    let margin = g.sub(&iou, &mu_t)?;
    let hinge = g.relu(&margin)?;
    let active = margin.item() > 0.0;
    Ok((hinge, active))
}

/// Full per-sample objective. Returns the logged values, the on-graph
/// scalar to differentiate, and the fused forward (reusable for metrics).
pub fn sample_loss(
    g: &mut Graph,
    bound: &ModelParams,
    sample: &GroundingSample,
    feats: &SampleFeatures,
    lcfg: &LossConfig,
) -> Result<(LossBundle, Tensor, Forward)> {
    let gt = sample.objects[sample.target_index].bbox()?;

    let fused = forward(g, bound, feats, &sample.query, Pass::Fused)?;
    let align = alignment_loss(g, &fused.weights, sample.target_index)?;
    let locate = locate_loss(g, &fused.soft_center, &fused.soft_size, &gt)?;
    let bw = Tensor::scalar(lcfg.box_weight)?;
    let locate_scaled = g.mul(&locate, &bw)?;
    let pull = g.add(&align, &locate_scaled)?;

    let (total, deterrence_value, active) = match lcfg.objective {
        Objective::AlignmentOnly => (pull, 0.0, false),
        Objective::PullPush => {
            let detach_2d = lcfg.stopgrad == StopGradMode::EncoderBlocked;
            let short = forward(g, bound, feats, &sample.query, Pass::Shortcut { detach_2d })?;
            let (hinge, active) =
                deterrence_loss(g, &short.soft_center, &short.soft_size, &gt, lcfg.mu)?;
            let lam = Tensor::scalar(lcfg.lambda)?;
            let push = g.mul(&hinge, &lam)?;
            let total = g.add(&pull, &push)?;
            (total, hinge.item(), active)
        }
    };

    let bundle = LossBundle {
        align: align.item(),
        locate: locate.item(),
        deterrence: deterrence_value,
        total: total.item(),
        deterrence_active: active,
    };
    Ok((bundle, total, fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Pass};
    use crate::rng::stream;
    use crate::scenes::{build_dataset, featurize, WorldConfig};

    fn fixture() -> (GroundingSample, SampleFeatures, ModelParams) {
        let wcfg = WorldConfig {
            train_count: 8,
            val_count: 4,
            ..WorldConfig::default()
        };
        let (train, _) = build_dataset(&wcfg).unwrap();
        let feats = featurize(&train[0], 0, &wcfg, stream::TRAIN_FEATURES);
        let mcfg = ModelConfig {
            d2d: 8,
            d3d: 8,
            dq: 8,
            dh: 16,
            ..ModelConfig::default()
        };
        (train[0].clone(), feats, ModelParams::init(&mcfg).unwrap())
    }

    fn named_grads(
        params: &ModelParams,
        build: impl Fn(&mut Graph, &ModelParams) -> Tensor,
    ) -> Vec<(String, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let loss = build(&mut g, &bound);
        let grads = g.backward(&loss).unwrap();
        let mut out = Vec::new();
        bound.for_each(|name, t| out.push((name.to_string(), grads.wrt_or_zeros(t))));
        out
    }

    /// At initialization the untrained shortcut soft box usually misses
    /// the target entirely, leaving the hinge dead. Relocating the target
    /// onto that soft box (slightly offset to dodge exact ties) makes the
    /// push term active so its gradient path can be exercised.
    fn relocate_target_to_shortcut_box(
        params: &ModelParams,
        sample: &GroundingSample,
        feats: &SampleFeatures,
    ) -> GroundingSample {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let short = forward(
            &mut g,
            &bound,
            feats,
            &sample.query,
            Pass::Shortcut { detach_2d: false },
        )
        .unwrap();
        let c = short.soft_center.data();
        let s = short.soft_size.data();
        let mut moved = sample.clone();
        let t = &mut moved.objects[moved.target_index];
        t.center = [c[0] + 0.011, c[1] + 0.012, c[2] + 0.013];
        t.size = [s[0] * 1.03, s[1] * 1.04, s[2] * 1.05];
        moved
    }

    #[test]
    fn uniform_weights_give_ln_n() {
        let mut g = Graph::new();
        let w = Tensor::from_vec(vec![0.25; 4]).unwrap();
        let loss = alignment_loss(&mut g, &w, 2).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_gap_closed_form() {
        // Logits [2, 0, 0, 0], target 0: loss = ln(e^2 + 3) - 2.
        let mut g = Graph::new();
        let logits = Tensor::from_vec(vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let w = g.softmax_lastaxis(&logits).unwrap();
        let loss = alignment_loss(&mut g, &w, 0).unwrap();
        let expected = (2.0f64.exp() + 3.0).ln() - 2.0;
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_bad_target() {
        let mut g = Graph::new();
        let w = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        assert!(alignment_loss(&mut g, &w, 2).is_err());
    }

    #[test]
    fn locate_zero_at_exact_match() {
        let gt = Box3::new([0.3, 0.4, 0.1], [0.2, 0.2, 0.2]).unwrap();
        let mut g = Graph::new();
        let c = Tensor::from_vec(gt.center.to_vec()).unwrap();
        let s = Tensor::from_vec(gt.size.to_vec()).unwrap();
        let loss = locate_loss(&mut g, &c, &s, &gt).unwrap();
        assert_eq!(loss.item(), 0.0);

        let off = Tensor::from_vec(vec![0.3, 0.4, 0.3]).unwrap();
        let loss = locate_loss(&mut g, &off, &s, &gt).unwrap();
        assert!((loss.item() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn hinge_inactive_below_and_at_threshold() {
        let gt = Box3::new([0.5; 3], [0.2; 3]).unwrap();

        // Disjoint: iou 0, mu 0.7.
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::from_vec(vec![0.1, 0.1, 0.1]).unwrap());
        let s = g.leaf(&Tensor::from_vec(vec![0.05; 3]).unwrap());
        let (hinge, active) = deterrence_loss(&mut g, &c, &s, &gt, 0.7).unwrap();
        assert_eq!(hinge.item(), 0.0);
        assert!(!active);
        let grads = g.backward(&hinge).unwrap();
        assert!(grads.wrt_or_zeros(&c).iter().all(|&v| v == 0.0));

        // Exactly at the threshold: identical boxes, mu = 1 -> margin 0.
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::from_vec(gt.center.to_vec()).unwrap());
        let s = g.leaf(&Tensor::from_vec(gt.size.to_vec()).unwrap());
        let (hinge, active) = deterrence_loss(&mut g, &c, &s, &gt, 1.0).unwrap();
        assert_eq!(hinge.item(), 0.0);
        assert!(!active);
        let grads = g.backward(&hinge).unwrap();
        assert!(grads.wrt_or_zeros(&c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hinge_active_above_threshold() {
        let gt = Box3::new([0.5; 3], [0.2; 3]).unwrap();
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::from_vec(vec![0.52, 0.5, 0.5]).unwrap());
        let s = g.leaf(&Tensor::from_vec(vec![0.2; 3]).unwrap());
        let (hinge, active) = deterrence_loss(&mut g, &c, &s, &gt, 0.3).unwrap();
        assert!(active);
        let iou = crate::geometry::iou3d(
            &Box3::new([0.52, 0.5, 0.5], [0.2; 3]).unwrap(),
            &gt,
        );
        assert!((hinge.item() - (iou - 0.3)).abs() < 1e-15);
        // The box sits right of the target, so moving further right
        // lowers the overlap and with it the hinge.
        let grads = g.backward(&hinge).unwrap();
        let gc = grads.wrt(&c).unwrap();
        assert!(gc[0] < 0.0);
    }

    #[test]
    fn bundle_composition() {
        let (sample, feats, params) = fixture();
        let lcfg = LossConfig::default();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (bundle, total, fused) = sample_loss(&mut g, &bound, &sample, &feats, &lcfg).unwrap();
        assert!(bundle.align > 0.0);
        assert!(bundle.locate > 0.0);
        assert!(bundle.deterrence >= 0.0);
        let expect = bundle.align + lcfg.box_weight * bundle.locate + lcfg.lambda * bundle.deterrence;
        assert!((bundle.total - expect).abs() < 1e-12);
        assert_eq!(total.item(), bundle.total);
        assert_eq!(fused.weights.numel(), sample.objects.len());
    }

    #[test]
    fn zero_lambda_matches_alignment_only_bitwise() {
        let (sample, feats, params) = fixture();

        let zero_lambda = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let baseline = LossConfig {
            objective: Objective::AlignmentOnly,
            ..LossConfig::default()
        };

        let ga = named_grads(&params, |g, b| {
            sample_loss(g, b, &sample, &feats, &zero_lambda).unwrap().1
        });
        let gb = named_grads(&params, |g, b| {
            sample_loss(g, b, &sample, &feats, &baseline).unwrap().1
        });
        for ((na, va), (nb, vb)) in ga.iter().zip(&gb) {
            assert_eq!(na, nb);
            assert_eq!(va.len(), vb.len());
            for (x, y) in va.iter().zip(vb) {
                // Bit-identical up to the sign of zero, which optimizers
                // cannot distinguish in value.
                if *x == 0.0 && *y == 0.0 {
                    continue;
                }
                assert_eq!(x.to_bits(), y.to_bits(), "{na} grads diverge");
            }
        }

        // Loss values also agree exactly.
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let (la, _, _) = sample_loss(&mut g, &b, &sample, &feats, &zero_lambda).unwrap();
        let mut g2 = Graph::new();
        let b2 = params.bind(&mut g2);
        let (lb, _, _) = sample_loss(&mut g2, &b2, &sample, &feats, &baseline).unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        assert_eq!(la.align.to_bits(), lb.align.to_bits());
    }

    #[test]
    fn deterrence_never_updates_enc2d_when_blocked() {
        let (orig, feats, params) = fixture();
        let sample = relocate_target_to_shortcut_box(&params, &orig, &feats);

        // Deterrence-only loss: push term in isolation, hinge active.
        let deterrence_only = |detach: bool| {
            named_grads(&params, |g, b| {
                let short = forward(
                    g,
                    b,
                    &feats,
                    &sample.query,
                    Pass::Shortcut { detach_2d: detach },
                )
                .unwrap();
                let gt = sample.objects[sample.target_index].bbox().unwrap();
                let (hinge, active) =
                    deterrence_loss(g, &short.soft_center, &short.soft_size, &gt, 0.0).unwrap();
                assert!(active, "relocated target should keep the hinge live");
                hinge
            })
        };

        let blocked = deterrence_only(true);
        for (name, grad) in &blocked {
            if name.starts_with("enc2d") || name.starts_with("enc3d") {
                assert!(
                    grad.iter().all(|&v| v == 0.0),
                    "{name} received deterrence gradient while blocked"
                );
            }
        }
        // Sanity: fusion still learns from deterrence.
        let fusion_grad = blocked.iter().find(|(n, _)| n == "fusion.l1.w").unwrap();
        assert!(fusion_grad.1.iter().any(|&v| v != 0.0));

        // Without blocking, the 2D encoder is reachable.
        let open = deterrence_only(false);
        let enc2d_grad = open.iter().find(|(n, _)| n == "enc2d.l1.w").unwrap();
        assert!(enc2d_grad.1.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn enc2d_gradient_comes_only_from_pull() {
        let (orig, feats, params) = fixture();
        // Active hinge, otherwise the comparison is vacuous.
        let sample = relocate_target_to_shortcut_box(&params, &orig, &feats);
        let live = LossConfig {
            mu: 0.0,
            ..LossConfig::default()
        };
        let full = named_grads(&params, |g, b| {
            let (bundle, total, _) = sample_loss(g, b, &sample, &feats, &live).unwrap();
            assert!(bundle.deterrence_active);
            total
        });
        let pull_only = named_grads(&params, |g, b| {
            sample_loss(
                g,
                b,
                &sample,
                &feats,
                &LossConfig {
                    objective: Objective::AlignmentOnly,
                    ..live
                },
            )
            .unwrap()
            .1
        });
        let mut decoder_sees_push = false;
        for ((name, va), (_, vb)) in full.iter().zip(&pull_only) {
            if name.starts_with("enc2d") || name.starts_with("enc3d") {
                for (x, y) in va.iter().zip(vb) {
                    assert_eq!(x.to_bits(), y.to_bits(), "{name} sees push gradient");
                }
            } else if va != vb {
                decoder_sees_push = true;
            }
        }
        assert!(decoder_sees_push, "push term changed no downstream gradient");
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let (orig, feats, base_params) = fixture();
        // No gradient blocking here: a stop-gradient makes the tape
        // derivative differ from the true one on purpose, and finite
        // differences can only see the true one. Blocking behavior has
        // its own dedicated tests.
        let lcfg = LossConfig {
            mu: 0.0,
            stopgrad: StopGradMode::None,
            ..LossConfig::default()
        };

        // Some initializations land a relu preactivation almost exactly
        // on zero, where central differences straddle the kink. Scan
        // seeds for a point with a comfortable margin; the scan is
        // deterministic, so the chosen seed never changes.
        let mut chosen = None;
        for seed in 0..50 {
            let params =
                ModelParams::init(&ModelConfig { seed, ..base_params.cfg }).unwrap();
            // Relocate the target so the hinge is strictly active; mu = 0
            // puts its relu input far from the kink.
            let sample = relocate_target_to_shortcut_box(&params, &orig, &feats);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let (bundle, _, _) = sample_loss(&mut g, &bound, &sample, &feats, &lcfg).unwrap();
            if bundle.deterrence_active && g.kink_margin() > 1e-3 {
                chosen = Some((params, sample));
                break;
            }
        }
        let (params, sample) = chosen.expect("no kink-safe initialization found in 50 seeds");

        let mut values = Vec::new();
        params.for_each(|_, t| values.push(t.detached()));
        let cfg = params.cfg;
        let err = crate::autodiff::check_gradients(
            |g, leaves| {
                let mut rebuilt = ModelParams::init(&cfg)?;
                let mut i = 0;
                rebuilt.for_each_mut(|_, t| {
                    *t = leaves[i].clone();
                    i += 1;
                });
                let (_, total, _) = sample_loss(g, &rebuilt, &sample, &feats, &lcfg)?;
                Ok(total)
            },
            &values,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }
}
