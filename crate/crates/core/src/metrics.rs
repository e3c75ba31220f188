//! Pose and mask evaluation metrics.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, project_point, CameraIntrinsics, SE3Pose};
use crate::image::BinaryMask;

/// Point count above which ADD-S switches from brute force to a grid.
pub const ADDS_GRID_THRESHOLD: usize = 10_000;

fn check_points(pts: &[Vector3<f64>]) -> Result<()> {
    if pts.is_empty() {
        return Err(Error::invalid("no model points"));
    }
    if pts.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteField);
    }
    Ok(())
}

/// Mean distance between corresponding transformed model points.
pub fn add_error(pred: &SE3Pose, gt: &SE3Pose, pts: &[Vector3<f64>]) -> Result<f64> {
    check_points(pts)?;
    let sum: f64 = pts
        .iter()
        .map(|x| (pred.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    Ok(sum / pts.len() as f64)
}

/// Mean distance from each predicted point to the nearest ground-truth point.
pub fn adds_error(pred: &SE3Pose, gt: &SE3Pose, pts: &[Vector3<f64>]) -> Result<f64> {
    check_points(pts)?;
    let p: Vec<Vector3<f64>> = pts.iter().map(|x| pred.transform_point(x)).collect();
    let g: Vec<Vector3<f64>> = pts.iter().map(|x| gt.transform_point(x)).collect();
    let dists: Vec<f64> = if pts.len() < ADDS_GRID_THRESHOLD {
        p.par_iter()
            .map(|a| g.iter().map(|b| (a - b).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .collect()
    } else {
        let grid = Grid::new(&g);
        p.par_iter().map(|a| grid.nearest(a)).collect()
    };
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Uniform hash grid for exact nearest-neighbor queries.
struct Grid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-12);
        // about two points per occupied cell for surface-like clouds
        let cell = extent / (points.len() as f64 / 2.0).sqrt().max(1.0);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key_of(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    fn nearest(&self, q: &Vector3<f64>) -> f64 {
        let c = Self::key_of(q, self.cell);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm_squared());
                            }
                        }
                    }
                }
            }
            // every unvisited cell is at least `ring * cell` away
            let reach = ring as f64 * self.cell;
            if best.is_finite() && best.sqrt() <= reach {
                return best.sqrt();
            }
            ring += 1;
        }
    }
}

/// Percentage of errors strictly below `fraction * diameter`.
pub fn add_recall(errors: &[f64], diameter: f64, fraction: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("no errors to score"));
    }
    if !(diameter > 0.0) {
        return Err(Error::invalid("diameter must be positive"));
    }
    let threshold = fraction * diameter;
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Mean pixel distance between model points projected under both poses.
pub fn proj2d_error(pred: &SE3Pose, gt: &SE3Pose, pts: &[Vector3<f64>], k: &CameraIntrinsics) -> Result<f64> {
    check_points(pts)?;
    let mut sum = 0.0;
    for x in pts {
        let a: Vector2<f64> = project_point(x, pred, k)?;
        let b = project_point(x, gt, k)?;
        sum += (a - b).norm();
    }
    Ok(sum / pts.len() as f64)
}

/// Rotation error in degrees.
pub fn rotation_error_deg(pred: &SE3Pose, gt: &SE3Pose) -> f64 {
    geodesic_distance(&pred.rotation, &gt.rotation).to_degrees()
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One line of an evaluation JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    #[serde(default)]
    pub pred: Option<SE3Pose>,
    #[serde(default)]
    pub gt: Option<SE3Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Add,
    Adds,
    Proj,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Metric::Add),
            "adds" => Ok(Metric::Adds),
            "proj" => Ok(Metric::Proj),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub metric: Metric,
    pub count: usize,
    pub mean_error: f64,
    /// ADD(-S) recall at 0.1 d, or 2D projection recall at 5 px.
    pub recall: f64,
    pub mean_rotation_error_deg: f64,
    pub errors: Vec<(String, f64)>,
}

/// Scores predictions against ground truth matched by `id`.
pub fn evaluate(
    pred: &[PoseRecord],
    gt: &[PoseRecord],
    pts: &[Vector3<f64>],
    diameter: f64,
    metric: Metric,
    k: Option<&CameraIntrinsics>,
) -> Result<EvalSummary> {
    let truth: HashMap<&str, &SE3Pose> = gt
        .iter()
        .filter_map(|r| r.gt.as_ref().or(r.pred.as_ref()).map(|p| (r.id.as_str(), p)))
        .collect();
    let mut errors = Vec::with_capacity(pred.len());
    let mut rot = 0.0;
    for r in pred {
        let p = r
            .pred
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} has no prediction", r.id)))?;
        let g = match r.gt.as_ref() {
            Some(g) => g,
            None => *truth
                .get(r.id.as_str())
                .ok_or_else(|| Error::invalid(format!("no ground truth for {}", r.id)))?,
        };
        let e = match metric {
            Metric::Add => add_error(p, g, pts)?,
            Metric::Adds => adds_error(p, g, pts)?,
            Metric::Proj => {
                let k = k.ok_or_else(|| Error::invalid("projection metric needs intrinsics"))?;
                proj2d_error(p, g, pts, k)?
            }
        };
        rot += rotation_error_deg(p, g);
        errors.push((r.id.clone(), e));
    }
    let values: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let recall = match metric {
        Metric::Proj => add_recall(&values, 1.0, 5.0)?,
        _ => add_recall(&values, diameter, 0.1)?,
    };
    Ok(EvalSummary {
        metric,
        count: values.len(),
        mean_error: values.iter().sum::<f64>() / values.len() as f64,
        recall,
        mean_rotation_error_deg: rot / values.len() as f64,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> SE3Pose {
        let axis = Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5);
        SE3Pose::new(
            RotationMatrix::from_axis_angle(&axis, rng.random_range(0.0..3.0)).unwrap(),
            Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.4..1.0)),
        )
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))).collect()
    }

    #[test]
    fn add_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 200);
        let gt = random_pose(&mut rng);
        assert_eq!(add_error(&gt, &gt, &pts).unwrap(), 0.0);
        let d = Vector3::new(0.01, -0.02, 0.005);
        let shifted = SE3Pose::new(gt.rotation, gt.translation + d);
        assert!((add_error(&shifted, &gt, &pts).unwrap() - d.norm()).abs() < 1e-15);
        let pred = random_pose(&mut rng);
        let oracle: f64 = pts
            .iter()
            .map(|x| {
                let a = pred.rotation.matrix() * x + pred.translation;
                let b = gt.rotation.matrix() * x + gt.translation;
                ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
            })
            .sum::<f64>()
            / 200.0;
        assert!((add_error(&pred, &gt, &pts).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn adds_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_pose(&mut rng);
        let ring: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_4;
                Vector3::new(0.05 * a.cos(), 0.05 * a.sin(), 0.0)
            })
            .collect();
        assert_eq!(adds_error(&gt, &gt, &ring).unwrap(), 0.0);
        let step = RotationMatrix::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_4).unwrap();
        let pred = SE3Pose::new(gt.rotation.compose(&step), gt.translation);
        assert!(adds_error(&pred, &gt, &ring).unwrap() < 1e-12);
        assert!(add_error(&pred, &gt, &ring).unwrap() > 0.03);
        for _ in 0..20 {
            let pts = cloud(&mut rng, 100);
            let p = random_pose(&mut rng);
            assert!(adds_error(&p, &gt, &pts).unwrap() <= add_error(&p, &gt, &pts).unwrap());
        }
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 3000);
        let grid = Grid::new(&pts);
        for _ in 0..300 {
            let q = Vector3::from_fn(|_, _| rng.random_range(-0.08..0.08));
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest(&q), brute);
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(add_recall(&[0.0; 5], 0.2, 0.1).unwrap(), 100.0);
        assert_eq!(add_recall(&[0.05 * 0.2, 0.15 * 0.2], 0.2, 0.1).unwrap(), 50.0);
        assert_eq!(add_recall(&[0.1 * 0.2], 0.2, 0.1).unwrap(), 0.0);
        assert!(add_recall(&[], 0.2, 0.1).is_err());
    }

    #[test]
    fn proj_examples() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(&mut rng, 50);
        let gt = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 0.8));
        assert_eq!(proj2d_error(&gt, &gt, &pts, &k).unwrap(), 0.0);
        // a shift in the image plane keeps every point's depth fixed
        let flat: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
        let pred = SE3Pose::new(gt.rotation, gt.translation + Vector3::new(0.003, 0.004, 0.0));
        assert!((proj2d_error(&pred, &gt, &flat, &k).unwrap() - 600.0 * 0.005 / 0.8).abs() < 1e-9);
        let behind = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, -1.0));
        assert!(proj2d_error(&behind, &gt, &pts, &k).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(10, 10, |x, _| x < 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::from_fn(10, 10, |x, _| x >= 6);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        let c = BinaryMask::from_fn(10, 10, |x, _| (2..6).contains(&x));
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::new(10, 10);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert!(mask_iou(&a, &BinaryMask::new(9, 10)).is_err());
    }
}
