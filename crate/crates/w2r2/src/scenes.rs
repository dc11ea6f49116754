//! Synthetic grounding scenes on the unit cube.
//!
//! Each sample is a handful of boxes resting on the floor plus a query
//! that picks out exactly one of them. A fraction `rho` of queries is
//! answerable from category alone (the target's category is unique in the
//! scene); the rest require comparing same-category objects spatially
//! (leftmost / rightmost / nearest or farthest from an anchor point).
//!
//! The 2D feature view sees category plus grid-quantized xy, so category
//! identity — and therefore the rho-fraction of queries — is fully
//! resolvable without any 3D evidence. That is the shortcut under study.
//! Category-linked base sizes make even box extent partially guessable
//! from 2D, which is what gives the deterrence hinge something to bite on.
//!
//! Feature noise is keyed on each object's value bits, not its slot, so
//! permuting a scene permutes its features bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::rng::{derive_rng, derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    None,
    Leftmost,
    Rightmost,
    NearestToAnchor,
    FarthestFromAnchor,
}

impl Relation {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            Relation::None => 0,
            Relation::Leftmost => 1,
            Relation::Rightmost => 2,
            Relation::NearestToAnchor => 3,
            Relation::FarthestFromAnchor => 4,
        }
    }

    pub fn needs_anchor(self) -> bool {
        matches!(self, Relation::NearestToAnchor | Relation::FarthestFromAnchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl SceneObject {
    pub fn bbox(&self) -> Result<Box3> {
        Box3::new(self.center, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub category: usize,
    pub relation: Relation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anchor: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub objects: Vec<SceneObject>,
    pub query: Query,
    pub target_index: usize,
}

/// Per-object feature rows: `f2d[i]` has width `n_categories + 2`
/// (one-hot category, quantized x, quantized y), `f3d[i]` has width 6
/// (center, size).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub f2d: Vec<Vec<f64>>,
    pub f3d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub n_categories: usize,
    /// Fraction of queries answerable from category alone.
    pub rho: f64,
    pub sigma_2d: f64,
    pub sigma_3d: f64,
    /// Edge length of the xy quantization cells in the 2D view.
    pub q_grid: f64,
    /// Relative size variation around each category's base size.
    pub size_jitter: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_objects_min: 4,
            n_objects_max: 8,
            n_categories: 12,
            rho: 0.5,
            sigma_2d: 0.02,
            sigma_3d: 0.02,
            q_grid: 0.5,
            size_jitter: 0.1,
            train_count: 512,
            val_count: 128,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_objects_min < 2 {
            return fail(format!("n_objects_min must be >= 2, got {}", self.n_objects_min));
        }
        if self.n_objects_max < self.n_objects_min {
            return fail(format!(
                "n_objects_max {} < n_objects_min {}",
                self.n_objects_max, self.n_objects_min
            ));
        }
        if self.n_categories < 2 {
            return fail(format!("n_categories must be >= 2, got {}", self.n_categories));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if self.sigma_2d < 0.0 || self.sigma_3d < 0.0 {
            return fail(format!(
                "noise levels must be >= 0, got sigma_2d {} sigma_3d {}",
                self.sigma_2d, self.sigma_3d
            ));
        }
        if !(self.q_grid > 0.0 && self.q_grid <= 1.0) {
            return fail(format!("q_grid must be in (0, 1], got {}", self.q_grid));
        }
        if !(0.0..=0.5).contains(&self.size_jitter) {
            return fail(format!("size_jitter must be in [0, 0.5], got {}", self.size_jitter));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return fail("train_count and val_count must be positive".into());
        }
        Ok(())
    }

    pub fn f2d_width(&self) -> usize {
        self.n_categories + 2
    }

    pub fn f3d_width(&self) -> usize {
        6
    }
}

/// Deterministic per-category base sizes in [0.10, 0.28] per axis.
pub fn size_table(cfg: &WorldConfig) -> Vec<[f64; 3]> {
    let mut rng = derive_rng(&[cfg.seed, stream::SIZE_TABLE, 0]);
    (0..cfg.n_categories)
        .map(|_| {
            [
                rng.gen_range(0.10..0.28),
                rng.gen_range(0.10..0.28),
                rng.gen_range(0.10..0.28),
            ]
        })
        .collect()
}

/// Indices of the objects that satisfy the query. A well-formed sample
/// has exactly one.
pub fn satisfiers(objects: &[SceneObject], query: &Query) -> Vec<usize> {
    let cands: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.category == query.category)
        .map(|(i, _)| i)
        .collect();
    if cands.is_empty() {
        return cands;
    }
    let keyed: Vec<(usize, f64)> = match query.relation {
        Relation::None => return cands,
        Relation::Leftmost | Relation::Rightmost => cands
            .iter()
            .map(|&i| (i, objects[i].center[0]))
            .collect(),
        Relation::NearestToAnchor | Relation::FarthestFromAnchor => {
            let Some(a) = query.anchor else { return vec![] };
            cands
                .iter()
                .map(|&i| {
                    let c = objects[i].center;
                    let d2 = (c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2) + (c[2] - a[2]).powi(2);
                    (i, d2)
                })
                .collect()
        }
    };
    let pick_max = matches!(
        query.relation,
        Relation::Rightmost | Relation::FarthestFromAnchor
    );
    let best = keyed
        .iter()
        .map(|&(_, k)| k)
        .fold(if pick_max { f64::NEG_INFINITY } else { f64::INFINITY }, |acc, k| {
            if pick_max { acc.max(k) } else { acc.min(k) }
        });
    keyed.iter().filter(|&&(_, k)| k == best).map(|&(i, _)| i).collect()
}

/// Structural checks every sample must satisfy: valid in-cube boxes, xy
/// footprints that do not overlap, anchor present exactly when the
/// relation needs one, and a query satisfied by precisely the target.
pub fn verify_sample(s: &GroundingSample) -> Result<()> {
    let fail = |msg: String| Err(Error::Data(msg));
    if s.objects.is_empty() {
        return fail("sample has no objects".into());
    }
    if s.target_index >= s.objects.len() {
        return fail(format!(
            "target_index {} out of range for {} objects",
            s.target_index,
            s.objects.len()
        ));
    }
    const TOL: f64 = 1e-9;
    for (i, o) in s.objects.iter().enumerate() {
        let b = o.bbox()?;
        let (lo, hi) = (b.lo(), b.hi());
        for ax in 0..3 {
            if lo[ax] < -TOL || hi[ax] > 1.0 + TOL {
                return fail(format!("object {i} leaves the unit cube: {o:?}"));
            }
        }
    }
    for i in 0..s.objects.len() {
        for j in i + 1..s.objects.len() {
            let (a, b) = (&s.objects[i], &s.objects[j]);
            let dx = (a.center[0] - b.center[0]).abs();
            let dy = (a.center[1] - b.center[1]).abs();
            if dx < (a.size[0] + b.size[0]) * 0.5 - TOL && dy < (a.size[1] + b.size[1]) * 0.5 - TOL
            {
                return fail(format!("objects {i} and {j} overlap in xy"));
            }
        }
    }
    if s.query.anchor.is_some() != s.query.relation.needs_anchor() {
        return fail(format!(
            "relation {:?} with anchor {:?}",
            s.query.relation, s.query.anchor
        ));
    }
    if let Some(a) = s.query.anchor {
        if !a.iter().all(|v| v.is_finite() && (-TOL..=1.0 + TOL).contains(v)) {
            return fail(format!("anchor outside the unit cube: {a:?}"));
        }
    }
    let sat = satisfiers(&s.objects, &s.query);
    if sat != [s.target_index] {
        return fail(format!(
            "query satisfied by {sat:?}, expected exactly [{}]",
            s.target_index
        ));
    }
    Ok(())
}

fn place_centers(
    sizes: &[[f64; 3]],
    rng: &mut impl Rng,
) -> Result<Vec<[f64; 3]>> {
    const MAX_ATTEMPTS: usize = 500;
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(sizes.len());
    for (i, sz) in sizes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let x = rng.gen_range(sz[0] * 0.5..1.0 - sz[0] * 0.5);
            let y = rng.gen_range(sz[1] * 0.5..1.0 - sz[1] * 0.5);
            let clash = centers.iter().zip(sizes).any(|(c, s)| {
                (x - c[0]).abs() < (sz[0] + s[0]) * 0.5 && (y - c[1]).abs() < (sz[1] + s[1]) * 0.5
            });
            if !clash {
                centers.push([x, y, sz[2] * 0.5]);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place object {i} of {} without overlap; \
                 scene too crowded for these sizes",
                sizes.len()
            )));
        }
    }
    Ok(centers)
}

fn jittered_size(base: [f64; 3], jitter: f64, rng: &mut impl Rng) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ax in 0..3 {
        let u: f64 = if jitter > 0.0 { rng.gen_range(-1.0..1.0) } else { 0.0 };
        out[ax] = base[ax] * (1.0 + jitter * u);
    }
    out
}

/// One scene plus query, drawn entirely from `rng`. Scenes that cannot
/// be packed are redrawn from the same stream a bounded number of times,
/// so generation stays deterministic while rejection stays rare.
pub fn generate_sample(
    cfg: &WorldConfig,
    table: &[[f64; 3]],
    rng: &mut impl Rng,
) -> Result<GroundingSample> {
    const SCENE_ATTEMPTS: usize = 20;
    let mut last_err = None;
    for _ in 0..SCENE_ATTEMPTS {
        match try_generate_sample(cfg, table, rng) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn try_generate_sample(
    cfg: &WorldConfig,
    table: &[[f64; 3]],
    rng: &mut impl Rng,
) -> Result<GroundingSample> {
    let n = rng.gen_range(cfg.n_objects_min..=cfg.n_objects_max);
    let by_category = rng.gen::<f64>() < cfg.rho;
    let target_cat = rng.gen_range(0..cfg.n_categories);

    let other_cat = |rng: &mut dyn rand::RngCore| -> usize {
        let c = rand::Rng::gen_range(rng, 0..cfg.n_categories - 1);
        if c >= target_cat {
            c + 1
        } else {
            c
        }
    };

    let (dup_count, relation) = if by_category {
        (1, Relation::None)
    } else {
        let k = rng.gen_range(2..=3usize).min(n);
        let r = match rng.gen_range(0..4) {
            0 => Relation::Leftmost,
            1 => Relation::Rightmost,
            2 => Relation::NearestToAnchor,
            _ => Relation::FarthestFromAnchor,
        };
        (k, r)
    };

    let mut categories = vec![target_cat; dup_count];
    while categories.len() < n {
        categories.push(other_cat(rng));
    }
    // Slot order must not encode the target: shuffle before placement.
    for i in (1..categories.len()).rev() {
        let j = rng.gen_range(0..=i);
        categories.swap(i, j);
    }

    let sizes: Vec<[f64; 3]> = categories
        .iter()
        .map(|&c| jittered_size(table[c], cfg.size_jitter, rng))
        .collect();
    let centers = place_centers(&sizes, rng)?;

    let objects: Vec<SceneObject> = categories
        .iter()
        .zip(sizes.iter().zip(&centers))
        .map(|(&category, (&size, &center))| SceneObject {
            category,
            center,
            size,
        })
        .collect();

    let anchor = if relation.needs_anchor() {
        Some([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
    } else {
        None
    };
    let query = Query {
        category: target_cat,
        relation,
        anchor,
    };

    let sat = satisfiers(&objects, &query);
    if sat.len() != 1 {
        return Err(Error::Data(format!(
            "generated query resolves to {sat:?}, expected a single object"
        )));
    }
    let sample = GroundingSample {
        objects,
        query,
        target_index: sat[0],
    };
    verify_sample(&sample)?;
    Ok(sample)
}

fn build_split(cfg: &WorldConfig, count: usize, sample_stream: u64) -> Result<Vec<GroundingSample>> {
    let table = size_table(cfg);
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(&[cfg.seed, sample_stream, i as u64]);
            generate_sample(cfg, &table, &mut rng)
        })
        .collect()
}

/// Train and validation splits. Sample `i` of a split depends only on
/// `(seed, split, i)`, so growing a split leaves existing samples intact.
pub fn build_dataset(cfg: &WorldConfig) -> Result<(Vec<GroundingSample>, Vec<GroundingSample>)> {
    cfg.validate()?;
    Ok((
        build_split(cfg, cfg.train_count, stream::TRAIN_SAMPLES)?,
        build_split(cfg, cfg.val_count, stream::VAL_SAMPLES)?,
    ))
}

fn object_hash(o: &SceneObject) -> u64 {
    derive_seed(&[
        o.category as u64,
        o.center[0].to_bits(),
        o.center[1].to_bits(),
        o.center[2].to_bits(),
        o.size[0].to_bits(),
        o.size[1].to_bits(),
        o.size[2].to_bits(),
    ])
}

fn quantize(v: f64, q: f64) -> f64 {
    ((v / q).floor() + 0.5) * q
}

/// Feature rows for one sample. `feature_stream` separates train from
/// validation noise; noise is keyed per object value so feature rows
/// follow objects under permutation.
pub fn featurize(
    sample: &GroundingSample,
    sample_index: u64,
    cfg: &WorldConfig,
    feature_stream: u64,
) -> SampleFeatures {
    let mut f2d = Vec::with_capacity(sample.objects.len());
    let mut f3d = Vec::with_capacity(sample.objects.len());
    for o in &sample.objects {
        let mut rng = derive_rng(&[cfg.seed, feature_stream, sample_index, object_hash(o)]);

        let mut row2d = vec![0.0; cfg.f2d_width()];
        row2d[o.category] = 1.0;
        row2d[cfg.n_categories] = quantize(o.center[0], cfg.q_grid);
        row2d[cfg.n_categories + 1] = quantize(o.center[1], cfg.q_grid);
        if cfg.sigma_2d > 0.0 {
            let noise = Normal::new(0.0, cfg.sigma_2d).expect("validated sigma");
            for v in row2d.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }

        let mut row3d = Vec::with_capacity(6);
        row3d.extend_from_slice(&o.center);
        row3d.extend_from_slice(&o.size);
        if cfg.sigma_3d > 0.0 {
            let noise = Normal::new(0.0, cfg.sigma_3d).expect("validated sigma");
            for v in row3d.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }

        f2d.push(row2d);
        f3d.push(row3d);
    }
    SampleFeatures { f2d, f3d }
}

pub fn featurize_split(
    samples: &[GroundingSample],
    cfg: &WorldConfig,
    feature_stream: u64,
) -> Vec<SampleFeatures> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| featurize(s, i as u64, cfg, feature_stream))
        .collect()
}

pub fn write_jsonl(path: &Path, samples: &[GroundingSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Data(format!("serialize sample: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<GroundingSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GroundingSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        verify_sample(&sample).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            train_count: 64,
            val_count: 32,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig::default().validate().is_ok());
        assert!(WorldConfig { rho: 1.5, ..Default::default() }.validate().is_err());
        assert!(WorldConfig { n_objects_min: 1, ..Default::default() }.validate().is_err());
        assert!(WorldConfig { n_objects_max: 3, ..Default::default() }.validate().is_err());
        assert!(WorldConfig { q_grid: 0.0, ..Default::default() }.validate().is_err());
        assert!(WorldConfig { sigma_2d: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn rho_extremes_control_query_kind() {
        let pure = WorldConfig { rho: 1.0, ..small_cfg() };
        let (train, _) = build_dataset(&pure).unwrap();
        assert!(train.iter().all(|s| s.query.relation == Relation::None));
        // Category-unique means a single candidate.
        for s in &train {
            let n = s.objects.iter().filter(|o| o.category == s.query.category).count();
            assert_eq!(n, 1);
        }

        let relational = WorldConfig { rho: 0.0, ..small_cfg() };
        let (train, _) = build_dataset(&relational).unwrap();
        assert!(train.iter().all(|s| s.query.relation != Relation::None));
        for s in &train {
            let n = s.objects.iter().filter(|o| o.category == s.query.category).count();
            assert!(n >= 2, "relational query with {n} candidates");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let (t1, v1) = build_dataset(&cfg).unwrap();
        let (t2, v2) = build_dataset(&cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        // Different seeds give different worlds.
        let other = WorldConfig { seed: 8, ..cfg };
        let (t3, _) = build_dataset(&other).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let cfg = small_cfg();
        let (train, val) = build_dataset(&cfg).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(val.len(), 32);
        assert_ne!(train[0], val[0]);
    }

    #[test]
    fn object_counts_in_range() {
        let cfg = small_cfg();
        let (train, _) = build_dataset(&cfg).unwrap();
        let mut seen = HashSet::new();
        for s in &train {
            assert!((cfg.n_objects_min..=cfg.n_objects_max).contains(&s.objects.len()));
            seen.insert(s.objects.len());
        }
        assert!(seen.len() > 1, "object count never varies");
    }

    #[test]
    fn every_sample_verifies() {
        let (train, val) = build_dataset(&small_cfg()).unwrap();
        for s in train.iter().chain(&val) {
            verify_sample(s).unwrap();
        }
    }

    #[test]
    fn rho_concentration() {
        let cfg = WorldConfig { train_count: 2000, ..WorldConfig::default() };
        let (train, _) = build_dataset(&cfg).unwrap();
        let frac = train
            .iter()
            .filter(|s| s.query.relation == Relation::None)
            .count() as f64
            / train.len() as f64;
        // 3-sigma band around rho = 0.5 at n = 2000 is about +/- 0.034.
        assert!((frac - 0.5).abs() < 0.04, "category-unique fraction {frac}");
    }

    #[test]
    fn candidate_multiplicity_closed_form() {
        // A guesser that knows only the query category picks uniformly
        // among matching objects. Its expected accuracy is
        // rho + (1 - rho) * E[1/k] with k uniform on {2, 3}.
        let cfg = WorldConfig { train_count: 2000, ..WorldConfig::default() };
        let (train, _) = build_dataset(&cfg).unwrap();
        let mean: f64 = train
            .iter()
            .map(|s| {
                let k = s.objects.iter().filter(|o| o.category == s.query.category).count();
                1.0 / k as f64
            })
            .sum::<f64>()
            / train.len() as f64;
        let expected = cfg.rho + (1.0 - cfg.rho) * (0.5 + 1.0 / 3.0) / 2.0;
        assert!((mean - expected).abs() < 0.04, "mean {mean}, closed form {expected}");
    }

    #[test]
    fn full_3d_knowledge_resolves_every_query() {
        let (train, val) = build_dataset(&small_cfg()).unwrap();
        for s in train.iter().chain(&val) {
            assert_eq!(satisfiers(&s.objects, &s.query), vec![s.target_index]);
        }
    }

    #[test]
    fn relation_variants_all_occur() {
        let cfg = WorldConfig { rho: 0.0, train_count: 200, ..small_cfg() };
        let (train, _) = build_dataset(&cfg).unwrap();
        let mut seen = HashSet::new();
        for s in &train {
            seen.insert(s.query.relation.index());
        }
        assert_eq!(seen.len(), 4, "relations seen: {seen:?}");
    }

    #[test]
    fn target_slot_is_not_biased() {
        // Shuffling must spread the target over slots; a fixed slot would
        // let the model cheat positionally.
        let cfg = WorldConfig { train_count: 500, ..WorldConfig::default() };
        let (train, _) = build_dataset(&cfg).unwrap();
        let first = train.iter().filter(|s| s.target_index == 0).count() as f64 / 500.0;
        // Mean object count is 6, so slot 0 should hold the target about
        // 1/6 of the time; fail only on gross bias.
        assert!(first > 0.05 && first < 0.35, "target in slot 0: {first}");
    }

    #[test]
    fn quantization_snaps_to_cell_centers() {
        let cfg = WorldConfig { sigma_2d: 0.0, sigma_3d: 0.0, ..small_cfg() };
        let (train, _) = build_dataset(&cfg).unwrap();
        let feats = featurize(&train[0], 0, &cfg, stream::TRAIN_FEATURES);
        for (o, row) in train[0].objects.iter().zip(&feats.f2d) {
            let qx = row[cfg.n_categories];
            let qy = row[cfg.n_categories + 1];
            assert_eq!(qx, quantize(o.center[0], cfg.q_grid));
            assert_eq!(qy, quantize(o.center[1], cfg.q_grid));
            // Cell center: fractional part of v/q is exactly 0.5.
            assert!((qx / cfg.q_grid).fract() == 0.5 && (qy / cfg.q_grid).fract() == 0.5);
            assert!((qx - o.center[0]).abs() <= cfg.q_grid * 0.5);
        }
        // Noiseless f3d is the raw geometry.
        for (o, row) in train[0].objects.iter().zip(&feats.f3d) {
            assert_eq!(&row[..3], &o.center);
            assert_eq!(&row[3..], &o.size);
        }
    }

    #[test]
    fn featurize_is_permutation_equivariant() {
        let cfg = small_cfg();
        let (train, _) = build_dataset(&cfg).unwrap();
        let s = &train[0];
        let feats = featurize(s, 0, &cfg, stream::TRAIN_FEATURES);

        let mut reversed = s.clone();
        reversed.objects.reverse();
        reversed.target_index = s.objects.len() - 1 - s.target_index;
        verify_sample(&reversed).unwrap();
        let rfeats = featurize(&reversed, 0, &cfg, stream::TRAIN_FEATURES);

        let n = s.objects.len();
        for i in 0..n {
            assert_eq!(feats.f2d[i], rfeats.f2d[n - 1 - i], "f2d row {i} not equivariant");
            assert_eq!(feats.f3d[i], rfeats.f3d[n - 1 - i], "f3d row {i} not equivariant");
        }
    }

    #[test]
    fn feature_noise_is_deterministic_and_split_specific() {
        let cfg = small_cfg();
        let (train, _) = build_dataset(&cfg).unwrap();
        let a = featurize(&train[0], 0, &cfg, stream::TRAIN_FEATURES);
        let b = featurize(&train[0], 0, &cfg, stream::TRAIN_FEATURES);
        assert_eq!(a, b);
        let c = featurize(&train[0], 0, &cfg, stream::VAL_FEATURES);
        assert_ne!(a, c);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let (train, _) = build_dataset(&small_cfg()).unwrap();
        write_jsonl(&path, &train).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(train, back);
    }

    #[test]
    fn jsonl_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"not\": \"a sample\"}\n").unwrap();
        let err = read_jsonl(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        // Structurally valid JSON that violates the one-satisfier rule.
        let (train, _) = build_dataset(&small_cfg()).unwrap();
        let mut s = train[0].clone();
        s.target_index = (s.target_index + 1) % s.objects.len();
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&s).unwrap())).unwrap();
        let err = read_jsonl(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overcrowded_world_errors() {
        let cfg = WorldConfig {
            n_objects_min: 40,
            n_objects_max: 40,
            size_jitter: 0.0,
            ..WorldConfig::default()
        };
        let err = build_dataset(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn anchor_present_exactly_when_needed() {
        let (train, _) = build_dataset(&WorldConfig { train_count: 300, ..small_cfg() }).unwrap();
        for s in &train {
            assert_eq!(s.query.anchor.is_some(), s.query.relation.needs_anchor());
        }
    }
}
