//! Axis-aligned 3D boxes and intersection-over-union, in two flavors: a
//! plain scalar evaluation and a graph-recorded differentiable one.
//!
//! Both flavors perform the identical sequence of floating-point
//! operations, so their results agree bit for bit. Volumes are taken from
//! reconstructed extents (`hi - lo`) rather than the stored sizes, which
//! makes `iou3d(b, b) == 1.0` exact: intersection and volume are then the
//! same product, and `(v + v) - v == v` holds in IEEE arithmetic.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Axis-aligned box given by center and (strictly positive) edge lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Box3> {
        let finite = center.iter().chain(&size).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "box construction".into(),
            });
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Data(format!(
                "box size must be strictly positive, got {size:?}"
            )));
        }
        Ok(Box3 { center, size })
    }

    pub fn lo(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ax in 0..3 {
            out[ax] = self.center[ax] - self.size[ax] * 0.5;
        }
        out
    }

    pub fn hi(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ax in 0..3 {
            out[ax] = self.center[ax] + self.size[ax] * 0.5;
        }
        out
    }

    pub fn volume(&self) -> f64 {
        let lo = self.lo();
        let hi = self.hi();
        ((hi[0] - lo[0]) * (hi[1] - lo[1])) * (hi[2] - lo[2])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let lo = self.lo();
        let hi = self.hi();
        (0..3).all(|ax| p[ax] >= lo[ax] && p[ax] <= hi[ax])
    }
}

/// Exact IoU of two boxes. Identical boxes give exactly 1.0, disjoint
/// boxes exactly 0.0.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi) = (a.lo(), a.hi());
    let (blo, bhi) = (b.lo(), b.hi());
    let mut ov = [0.0; 3];
    let mut ea = [0.0; 3];
    let mut eb = [0.0; 3];
    for ax in 0..3 {
        ov[ax] = (ahi[ax].min(bhi[ax]) - alo[ax].max(blo[ax])).max(0.0);
        ea[ax] = ahi[ax] - alo[ax];
        eb[ax] = bhi[ax] - blo[ax];
    }
    let inter = (ov[0] * ov[1]) * ov[2];
    let vol_a = (ea[0] * ea[1]) * ea[2];
    let vol_b = (eb[0] * eb[1]) * eb[2];
    let union = (vol_a + vol_b) - inter;
    inter / union
}

fn component(g: &mut Graph, v: &Tensor, axis: usize) -> Result<Tensor> {
    let mut pick = vec![0.0; 3];
    pick[axis] = 1.0;
    let col = Tensor::new(vec![3, 1], pick)?;
    g.matmul(v, &col)
}

/// IoU of a differentiable box (`center`, `size`: shape-[3] tensors) with
/// a fixed box, recorded on the graph. The forward value matches
/// [`iou3d`] bitwise for equal inputs.
pub fn iou3d_grad(g: &mut Graph, center: &Tensor, size: &Tensor, fixed: &Box3) -> Result<Tensor> {
    if center.shape() != [3] || size.shape() != [3] {
        return Err(Error::Shape {
            op: "iou3d_grad",
            detail: format!("center {:?}, size {:?}", center.shape(), size.shape()),
        });
    }
    let half = Tensor::scalar(0.5)?;
    let (blo, bhi) = (fixed.lo(), fixed.hi());

    let mut ov = Vec::with_capacity(3);
    let mut ea = Vec::with_capacity(3);
    let mut eb = Vec::with_capacity(3);
    for ax in 0..3 {
        let c = component(g, center, ax)?;
        let s = component(g, size, ax)?;
        let h = g.mul(&s, &half)?;
        let lo = g.sub(&c, &h)?;
        let hi = g.add(&c, &h)?;
        let flo = Tensor::scalar(blo[ax])?;
        let fhi = Tensor::scalar(bhi[ax])?;
        let top = g.min_elem(&hi, &fhi)?;
        let bot = g.max_elem(&lo, &flo)?;
        let gap = g.sub(&top, &bot)?;
        ov.push(g.relu(&gap)?);
        ea.push(g.sub(&hi, &lo)?);
        eb.push(bhi[ax] - blo[ax]);
    }
    let i01 = g.mul(&ov[0], &ov[1])?;
    let inter = g.mul(&i01, &ov[2])?;
    let a01 = g.mul(&ea[0], &ea[1])?;
    let vol_a = g.mul(&a01, &ea[2])?;
    let vol_b = Tensor::scalar((eb[0] * eb[1]) * eb[2])?;
    let sum = g.add(&vol_a, &vol_b)?;
    let union = g.sub(&sum, &inter)?;
    g.div(&inter, &union)
}

/// Whether a predicted box counts as correct at the given IoU threshold.
pub fn acc_at(pred: &Box3, gt: &Box3, threshold: f64) -> bool {
    iou3d(pred, gt) >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn rand_box(rng: &mut impl Rng) -> Box3 {
        let center = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        let size = [
            rng.gen_range(0.05..0.6),
            rng.gen_range(0.05..0.6),
            rng.gen_range(0.05..0.6),
        ];
        Box3::new(center, size).unwrap()
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(Box3::new([0.0; 3], [1.0, 1.0, 0.0]).is_err());
        assert!(Box3::new([0.0; 3], [1.0, -0.1, 1.0]).is_err());
        assert!(Box3::new([f64::NAN, 0.0, 0.0], [1.0; 3]).is_err());
    }

    #[test]
    fn self_iou_is_exactly_one() {
        let mut rng = derive_rng(&[31, 0, 0]);
        for _ in 0..200 {
            let b = rand_box(&mut rng);
            assert_eq!(iou3d(&b, &b).to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn disjoint_iou_is_exactly_zero() {
        let a = Box3::new([0.0; 3], [1.0; 3]).unwrap();
        let b = Box3::new([5.0, 0.0, 0.0], [1.0; 3]).unwrap();
        assert_eq!(iou3d(&a, &b).to_bits(), 0.0f64.to_bits());
        // Touching faces: zero-width overlap, still zero.
        let c = Box3::new([1.0, 0.0, 0.0], [1.0; 3]).unwrap();
        assert_eq!(iou3d(&a, &c), 0.0);
    }

    #[test]
    fn half_shifted_unit_cubes() {
        let a = Box3::new([0.0; 3], [1.0; 3]).unwrap();
        let b = Box3::new([0.5, 0.0, 0.0], [1.0; 3]).unwrap();
        let got = iou3d(&a, &b);
        assert!((got - 1.0 / 3.0).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn symmetric_bitwise() {
        let mut rng = derive_rng(&[37, 0, 0]);
        for _ in 0..300 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            assert_eq!(iou3d(&a, &b).to_bits(), iou3d(&b, &a).to_bits());
        }
    }

    #[test]
    fn iou_bounds_fuzz() {
        let mut rng = derive_rng(&[41, 0, 0]);
        for _ in 0..500 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let v = iou3d(&a, &b);
            assert!((0.0..=1.0).contains(&v), "iou {v} out of range");
        }
    }

    #[test]
    fn graph_forward_matches_scalar_bitwise() {
        let mut rng = derive_rng(&[43, 0, 0]);
        for _ in 0..300 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let mut g = Graph::new();
            let c = g.leaf(&Tensor::from_vec(a.center.to_vec()).unwrap());
            let s = g.leaf(&Tensor::from_vec(a.size.to_vec()).unwrap());
            let iou = iou3d_grad(&mut g, &c, &s, &b).unwrap();
            assert_eq!(
                iou.item().to_bits(),
                iou3d(&a, &b).to_bits(),
                "parity failure: {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Clearly overlapping configuration, no per-axis ties.
        let fixed = Box3::new([0.5, 0.5, 0.5], [0.5, 0.4, 0.3]).unwrap();
        let center = Tensor::from_vec(vec![0.32, 0.41, 0.53]).unwrap();
        let size = Tensor::from_vec(vec![0.4, 0.5, 0.27]).unwrap();

        // Guard: the test point must sit away from every relu/min/max kink
        // or central differences would straddle a non-smooth point.
        {
            let mut g = Graph::new();
            let c = g.leaf(&center);
            let s = g.leaf(&size);
            iou3d_grad(&mut g, &c, &s, &fixed).unwrap();
            assert!(g.kink_margin() > 1e-2, "margin {}", g.kink_margin());
        }

        let err = check_gradients(
            |g, leaves| iou3d_grad(g, &leaves[0], &leaves[1], &fixed),
            &[center, size],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn gradient_pushes_toward_overlap() {
        // Partially overlapping along x: increasing the x-IoU requires
        // moving the center toward the fixed box, so the gradient of IoU
        // wrt center_x must be negative when we sit to the right.
        let fixed = Box3::new([0.3, 0.5, 0.5], [0.3; 3]).unwrap();
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::from_vec(vec![0.45, 0.5, 0.5]).unwrap());
        let s = g.leaf(&Tensor::from_vec(vec![0.3, 0.3, 0.3]).unwrap());
        let iou = iou3d_grad(&mut g, &c, &s, &fixed).unwrap();
        assert!(iou.item() > 0.0 && iou.item() < 1.0);
        let grads = g.backward(&iou).unwrap();
        let gc = grads.wrt(&c).unwrap();
        assert!(gc[0] < 0.0, "d iou / d cx = {}", gc[0]);
    }

    #[test]
    fn monte_carlo_oracle_agrees() {
        let a = Box3::new([0.4, 0.5, 0.5], [0.5, 0.4, 0.45]).unwrap();
        let b = Box3::new([0.55, 0.45, 0.6], [0.35, 0.5, 0.4]).unwrap();
        let exact = iou3d(&a, &b);

        let (alo, ahi) = (a.lo(), a.hi());
        let (blo, bhi) = (b.lo(), b.hi());
        let lo = [
            alo[0].min(blo[0]),
            alo[1].min(blo[1]),
            alo[2].min(blo[2]),
        ];
        let hi = [
            ahi[0].max(bhi[0]),
            ahi[1].max(bhi[1]),
            ahi[2].max(bhi[2]),
        ];
        let mut rng = derive_rng(&[47, 0, 0]);
        let mut inter = 0u64;
        let mut union = 0u64;
        let n = 400_000;
        for _ in 0..n {
            let p = [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ];
            let ia = a.contains(p);
            let ib = b.contains(p);
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
        let est = inter as f64 / union as f64;
        assert!(
            (est - exact).abs() < 0.01,
            "monte-carlo {est} vs exact {exact}"
        );
    }

    #[test]
    fn acc_at_thresholds() {
        let a = Box3::new([0.0; 3], [1.0; 3]).unwrap();
        let b = Box3::new([0.5, 0.0, 0.0], [1.0; 3]).unwrap();
        // IoU = 1/3: correct at 0.25, wrong at 0.5.
        assert!(acc_at(&a, &b, 0.25));
        assert!(!acc_at(&a, &b, 0.5));
        assert!(acc_at(&a, &a, 1.0));
    }
}
