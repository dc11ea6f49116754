//! Two-encoder grounding model.
//!
//! Every object contributes a 2D feature row and a 3D feature row. Each
//! passes through its own small MLP, the results are concatenated and
//! fused, and a query-conditioned decoder scores each object and proposes
//! a box for it. Selection weights are a softmax over the per-object
//! scores; the expected (weight-averaged) box is what differentiable
//! losses consume, while hard evaluation takes the argmax object's box.
//!
//! The shortcut pass runs the same parameters but replaces every 3D
//! encoder output with zeros, which is how "what could the model do
//! without 3D evidence" is measured — and, during training, penalized.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::rng::{derive_rng, stream};
use crate::scenes::{Query, Relation, SampleFeatures};

/// Baseline log-size the size head perturbs; exp(-1.7) is roughly the
/// scale of generated objects.
pub const LOG_SIZE_PRIOR: f64 = -1.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_categories: usize,
    /// 2D encoder output width.
    pub d2d: usize,
    /// 3D encoder output width.
    pub d3d: usize,
    /// Query embedding width.
    pub dq: usize,
    /// Fusion output / decoder hidden width.
    pub dh: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_categories: 12,
            d2d: 16,
            d3d: 16,
            dq: 16,
            dh: 32,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::Config(format!(
                "n_categories must be >= 2, got {}",
                self.n_categories
            )));
        }
        for (name, v) in [
            ("d2d", self.d2d),
            ("d3d", self.d3d),
            ("dq", self.dq),
            ("dh", self.dh),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn f2d_width(&self) -> usize {
        self.n_categories + 2
    }

    pub fn f3d_width(&self) -> usize {
        6
    }

    pub fn query_width(&self) -> usize {
        self.n_categories + Relation::COUNT + 3
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut impl Rng, out_dim: usize, in_dim: usize, scale: f64) -> Linear {
        // Fan-in-scaled uniform init keeps activation magnitudes stable
        // across layers; `scale` is a multiplier on the standard limit.
        let limit = scale * (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Linear {
            w: Tensor::new(vec![out_dim, in_dim], w).expect("finite init"),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    fn apply(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let wx = g.matmul(&self.w, x)?;
        g.add(&wx, &self.b)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    fn init(rng: &mut impl Rng, out_dim: usize, hidden: usize, in_dim: usize, scale: f64) -> Mlp2 {
        Mlp2 {
            l1: Linear::init(rng, hidden, in_dim, scale),
            l2: Linear::init(rng, out_dim, hidden, scale),
        }
    }

    fn apply(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.apply(g, x)?;
        let h = g.relu(&h)?;
        self.l2.apply(g, &h)
    }
}

/// Full parameter set. The same struct holds detached master values and
/// graph-bound copies; [`ModelParams::bind`] produces the latter.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub enc2d: Mlp2,
    pub enc3d: Mlp2,
    pub qembed: Linear,
    pub fusion: Mlp2,
    pub dec: Linear,
    pub head_logit: Linear,
    pub head_center: Linear,
    pub head_size: Linear,
}

impl ModelParams {
    /// Fresh parameters; fan-in-scaled uniform weights, biases zero.
    /// Draw order is the fixed named order, so initialization is a pure
    /// function of the config.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = derive_rng(&[cfg.seed, stream::MODEL_INIT, 0]);
        let s = cfg.init_scale;
        Ok(ModelParams {
            cfg: *cfg,
            enc2d: Mlp2::init(&mut rng, cfg.d2d, cfg.d2d, cfg.f2d_width(), s),
            enc3d: Mlp2::init(&mut rng, cfg.d3d, cfg.d3d, cfg.f3d_width(), s),
            qembed: Linear::init(&mut rng, cfg.dq, cfg.query_width(), s),
            fusion: Mlp2::init(&mut rng, cfg.dh, cfg.dh, cfg.d2d + cfg.d3d, s),
            dec: Linear::init(&mut rng, cfg.dh, cfg.dh + cfg.dq, s),
            head_logit: Linear::init(&mut rng, 1, cfg.dh, s),
            head_center: Linear::init(&mut rng, 3, cfg.dh, s),
            head_size: Linear::init(&mut rng, 3, cfg.dh, s),
        })
    }

    /// Visits every tensor in the fixed named order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        let linears: [(&str, &Linear); 11] = [
            ("enc2d.l1", &self.enc2d.l1),
            ("enc2d.l2", &self.enc2d.l2),
            ("enc3d.l1", &self.enc3d.l1),
            ("enc3d.l2", &self.enc3d.l2),
            ("qembed", &self.qembed),
            ("fusion.l1", &self.fusion.l1),
            ("fusion.l2", &self.fusion.l2),
            ("dec", &self.dec),
            ("head_logit", &self.head_logit),
            ("head_center", &self.head_center),
            ("head_size", &self.head_size),
        ];
        for (name, lin) in linears {
            f(&format!("{name}.w"), &lin.w);
            f(&format!("{name}.b"), &lin.b);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let linears: [(&str, &mut Linear); 11] = [
            ("enc2d.l1", &mut self.enc2d.l1),
            ("enc2d.l2", &mut self.enc2d.l2),
            ("enc3d.l1", &mut self.enc3d.l1),
            ("enc3d.l2", &mut self.enc3d.l2),
            ("qembed", &mut self.qembed),
            ("fusion.l1", &mut self.fusion.l1),
            ("fusion.l2", &mut self.fusion.l2),
            ("dec", &mut self.dec),
            ("head_logit", &mut self.head_logit),
            ("head_center", &mut self.head_center),
            ("head_size", &mut self.head_size),
        ];
        for (name, lin) in linears {
            f(&format!("{name}.w"), &mut lin.w);
            f(&format!("{name}.b"), &mut lin.b);
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Order-sensitive digest of every parameter bit; equal checksums
    /// mean bitwise-equal parameters.
    pub fn checksum(&self) -> u64 {
        let mut state = 0u64;
        self.for_each(|_, t| {
            for &v in t.data() {
                state ^= v.to_bits();
                state = crate::rng::splitmix64(&mut state);
            }
        });
        state
    }

    /// Graph-bound copy sharing this parameter set's values. Both forward
    /// passes of a training step must use the same bound copy so the
    /// passes share parameters in the gradient sense.
    pub fn bind(&self, g: &mut Graph) -> ModelParams {
        let bind_lin = |g: &mut Graph, l: &Linear| Linear {
            w: g.leaf(&l.w),
            b: g.leaf(&l.b),
        };
        let bind_mlp = |g: &mut Graph, m: &Mlp2| Mlp2 {
            l1: bind_lin(g, &m.l1),
            l2: bind_lin(g, &m.l2),
        };
        ModelParams {
            cfg: self.cfg,
            enc2d: bind_mlp(g, &self.enc2d),
            enc3d: bind_mlp(g, &self.enc3d),
            qembed: bind_lin(g, &self.qembed),
            fusion: bind_mlp(g, &self.fusion),
            dec: bind_lin(g, &self.dec),
            head_logit: bind_lin(g, &self.head_logit),
            head_center: bind_lin(g, &self.head_center),
            head_size: bind_lin(g, &self.head_size),
        }
    }
}

/// Query feature row: one-hot category, one-hot relation, anchor point or
/// zeros.
pub fn query_features(query: &Query, n_categories: usize) -> Result<Vec<f64>> {
    if query.category >= n_categories {
        return Err(Error::Data(format!(
            "query category {} out of range for {n_categories} categories",
            query.category
        )));
    }
    let mut out = vec![0.0; n_categories + Relation::COUNT + 3];
    out[query.category] = 1.0;
    out[n_categories + query.relation.index()] = 1.0;
    if let Some(a) = query.anchor {
        out[n_categories + Relation::COUNT..].copy_from_slice(&a);
    }
    Ok(out)
}

/// Which evidence the forward pass may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Both encoders contribute.
    Fused,
    /// 3D encoder outputs are replaced by zeros; optionally the 2D
    /// encoder output is detached so this pass cannot train the encoder.
    Shortcut { detach_2d: bool },
}

/// Everything downstream code needs from one pass over one sample.
#[derive(Debug)]
pub struct Forward {
    /// Per-object selection scores, shape [n].
    pub logits: Tensor,
    /// Softmax of the logits, shape [n].
    pub weights: Tensor,
    /// Per-object proposed centers, shape [n, 3].
    pub centers: Tensor,
    /// Per-object proposed sizes, shape [n, 3] (always positive).
    pub sizes: Tensor,
    /// Selection-weighted expected box center, shape [3].
    pub soft_center: Tensor,
    /// Selection-weighted expected box size, shape [3].
    pub soft_size: Tensor,
    /// Per-object fused representations, each shape [dh].
    pub fused: Vec<Tensor>,
}

impl Forward {
    /// Hard prediction: argmax selection (lowest index wins ties) and
    /// that object's proposed box.
    pub fn predict(&self) -> Result<(usize, Box3)> {
        let idx = argmax_lowest(self.weights.data());
        let c = &self.centers.data()[idx * 3..idx * 3 + 3];
        let s = &self.sizes.data()[idx * 3..idx * 3 + 3];
        let b = Box3::new([c[0], c[1], c[2]], [s[0], s[1], s[2]])?;
        Ok((idx, b))
    }
}

/// Index of the largest value; earlier index wins exact ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One pass of the model over one sample's features.
pub fn forward(
    g: &mut Graph,
    bound: &ModelParams,
    feats: &SampleFeatures,
    query: &Query,
    pass: Pass,
) -> Result<Forward> {
    let cfg = &bound.cfg;
    let n = feats.f2d.len();
    if n == 0 || feats.f3d.len() != n {
        return Err(Error::Data(format!(
            "feature rows disagree: {} f2d vs {} f3d",
            n,
            feats.f3d.len()
        )));
    }

    let qf = Tensor::from_vec(query_features(query, cfg.n_categories)?)?;
    let q = bound.qembed.apply(g, &qf)?;

    let zero3d = match pass {
        Pass::Shortcut { .. } => Some(g.leaf(&Tensor::zeros(vec![cfg.d3d]))),
        Pass::Fused => None,
    };
    let center_prior = Tensor::new(vec![3], vec![0.5; 3])?;
    let size_prior = Tensor::new(vec![3], vec![LOG_SIZE_PRIOR; 3])?;

    let mut logit_parts = Vec::with_capacity(n);
    let mut center_parts = Vec::with_capacity(n);
    let mut size_parts = Vec::with_capacity(n);
    let mut fused_all = Vec::with_capacity(n);

    for i in 0..n {
        let f2 = Tensor::from_vec(feats.f2d[i].clone())?;
        let mut e2 = bound.enc2d.apply(g, &f2)?;
        let e3 = match (&pass, &zero3d) {
            (Pass::Fused, _) => {
                let f3 = Tensor::from_vec(feats.f3d[i].clone())?;
                bound.enc3d.apply(g, &f3)?
            }
            (Pass::Shortcut { detach_2d }, Some(z)) => {
                if *detach_2d {
                    e2 = g.stop_gradient(&e2);
                }
                z.clone()
            }
            _ => unreachable!(),
        };
        let joint = g.concat_lastaxis(&[&e2, &e3])?;
        let fused = bound.fusion.apply(g, &joint)?;

        let dec_in = g.concat_lastaxis(&[&fused, &q])?;
        let h = bound.dec.apply(g, &dec_in)?;
        let h = g.relu(&h)?;

        logit_parts.push(bound.head_logit.apply(g, &h)?);
        let c_raw = bound.head_center.apply(g, &h)?;
        center_parts.push(g.add(&c_raw, &center_prior)?);
        let s_raw = bound.head_size.apply(g, &h)?;
        let s_log = g.add(&s_raw, &size_prior)?;
        size_parts.push(g.exp(&s_log)?);
        fused_all.push(fused);
    }

    let logit_refs: Vec<&Tensor> = logit_parts.iter().collect();
    let logits = g.concat_lastaxis(&logit_refs)?;
    let weights = g.softmax_lastaxis(&logits)?;

    let center_refs: Vec<&Tensor> = center_parts.iter().collect();
    let centers_flat = g.concat_lastaxis(&center_refs)?;
    let centers = g.reshape(&centers_flat, &[n, 3])?;
    let size_refs: Vec<&Tensor> = size_parts.iter().collect();
    let sizes_flat = g.concat_lastaxis(&size_refs)?;
    let sizes = g.reshape(&sizes_flat, &[n, 3])?;

    let soft_center = g.matmul(&weights, &centers)?;
    let soft_size = g.matmul(&weights, &sizes)?;

    Ok(Forward {
        logits,
        weights,
        centers,
        sizes,
        soft_center,
        soft_size,
        fused: fused_all,
    })
}

/// Mean fused representation of one sample under three evidence views:
/// 2D only, 3D only, and both. Used by the separation diagnostic.
pub fn fusion_populations(
    params: &ModelParams,
    feats: &SampleFeatures,
) -> Result<[Vec<f64>; 3]> {
    let cfg = &params.cfg;
    let n = feats.f2d.len();
    if n == 0 || feats.f3d.len() != n {
        return Err(Error::Data("empty or mismatched feature rows".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let zero2 = Tensor::zeros(vec![cfg.d2d]);
    let zero3 = Tensor::zeros(vec![cfg.d3d]);

    let mut pooled = [vec![0.0; cfg.dh], vec![0.0; cfg.dh], vec![0.0; cfg.dh]];
    for i in 0..n {
        let f2 = Tensor::from_vec(feats.f2d[i].clone())?;
        let f3 = Tensor::from_vec(feats.f3d[i].clone())?;
        let e2 = bound.enc2d.apply(&mut g, &f2)?;
        let e3 = bound.enc3d.apply(&mut g, &f3)?;
        let views = [
            g.concat_lastaxis(&[&e2, &zero3])?,
            g.concat_lastaxis(&[&zero2, &e3])?,
            g.concat_lastaxis(&[&e2, &e3])?,
        ];
        for (k, v) in views.iter().enumerate() {
            let fused = bound.fusion.apply(&mut g, v)?;
            for (acc, &x) in pooled[k].iter_mut().zip(fused.data()) {
                *acc += x;
            }
        }
    }
    for p in pooled.iter_mut() {
        for v in p.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(pooled)
}

#[derive(Serialize, Deserialize)]
struct TensorEnvelope {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEnvelope>,
}

const CHECKPOINT_FORMAT: &str = "w2r2-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut tensors = BTreeMap::new();
    params.for_each(|name, t| {
        tensors.insert(
            name.to_string(),
            TensorEnvelope {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    });
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.cfg,
        tensors,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &ck)
        .map_err(|e| Error::Data(format!("serialize checkpoint: {e}")))?;
    use std::io::Write as _;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: e.to_string(),
        }
    })?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {}/{}",
            ck.format, ck.version
        )));
    }
    let mut params = ModelParams::init(&ck.config)?;
    let mut used = 0usize;
    let mut missing: Option<String> = None;
    let mut bad_shape: Option<String> = None;
    params.for_each_mut(|name, t| {
        match ck.tensors.get(name) {
            Some(env) => {
                if env.shape != t.shape() {
                    bad_shape.get_or_insert_with(|| {
                        format!("{name}: file {:?} vs model {:?}", env.shape, t.shape())
                    });
                } else {
                    match Tensor::new(env.shape.clone(), env.data.clone()) {
                        Ok(nt) => *t = nt,
                        Err(_) => {
                            bad_shape.get_or_insert_with(|| format!("{name}: invalid data"));
                        }
                    }
                    used += 1;
                }
            }
            None => {
                missing.get_or_insert_with(|| name.to_string());
            }
        }
    });
    if let Some(detail) = bad_shape {
        return Err(Error::Shape {
            op: "checkpoint",
            detail,
        });
    }
    if let Some(name) = missing {
        return Err(Error::Data(format!("checkpoint is missing tensor {name}")));
    }
    if used != ck.tensors.len() {
        let expected: Vec<String> = {
            let mut v = Vec::new();
            params.for_each(|n, _| v.push(n.to_string()));
            v
        };
        let extra: Vec<&String> = ck
            .tensors
            .keys()
            .filter(|k| !expected.contains(k))
            .collect();
        return Err(Error::Data(format!("checkpoint has unknown tensors {extra:?}")));
    }
    Ok(params)
}
