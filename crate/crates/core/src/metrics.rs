//! Pose, placement and re-identification metrics.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, Point3};

fn check(pred: &[Point3], gt: &[Point3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no joints".into()));
    }
    Ok(())
}

fn mean_distance(pred: &[Point3], gt: &[Point3]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64
}

/// Mean joint distance after subtracting each set's first (pelvis) joint.
pub fn mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check(pred, gt)?;
    let shift = gt[0] - pred[0];
    let aligned: Vec<Point3> = pred.iter().map(|p| p + shift).collect();
    Ok(mean_distance(&aligned, gt))
}

/// Mean joint distance after similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check(pred, gt)?;
    let t = procrustes_align(pred, gt)?;
    let aligned: Vec<Point3> = pred.iter().map(|p| t.apply(p)).collect();
    Ok(mean_distance(&aligned, gt))
}

/// Ground-plane distance: the component along `up_axis` is discarded.
pub fn topdown_distance_error(pred: &Point3, gt: &Point3, up_axis: &Vector3<f64>) -> f64 {
    let up = up_axis.normalize();
    let d = pred - gt;
    (d - up * d.dot(&up)).norm()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReidScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of predicted cross-boundary pairs. Two empty
/// sets agree perfectly.
pub fn reid_score(predicted: &[(usize, usize)], gt: &[(usize, usize)]) -> ReidScore {
    if predicted.is_empty() && gt.is_empty() {
        return ReidScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let p: BTreeSet<_> = predicted.iter().collect();
    let g: BTreeSet<_> = gt.iter().collect();
    let tp = p.intersection(&g).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ReidScore { precision, recall, f1 }
}

pub fn reid_f1(predicted: &[(usize, usize)], gt: &[(usize, usize)]) -> f64 {
    reid_score(predicted, gt).f1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_axis_angle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn points(seed: u64, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let x = ((seed * 31 + i as u64 * 17) % 97) as f64 / 97.0;
                let y = ((seed * 13 + i as u64 * 29) % 89) as f64 / 89.0;
                let z = ((seed * 7 + i as u64 * 41) % 83) as f64 / 83.0;
                Point3::new(x, y, z)
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_zero() {
        let g = points(1, 17);
        assert_eq!(mpjpe(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn offsets_vanish_after_root_alignment() {
        let g = points(2, 17);
        let p: Vec<Point3> = g.iter().map(|q| q + Vector3::new(3.0, -1.0, 2.0)).collect();
        assert!(mpjpe(&p, &g).unwrap() < 1e-12);
    }

    #[test]
    fn one_displaced_joint() {
        let g = points(3, 17);
        let mut p = g.clone();
        p[5] += Vector3::new(0.0, 0.34, 0.0);
        assert_relative_eq!(mpjpe(&p, &g).unwrap(), 0.34 / 17.0, epsilon = 1e-12);
    }

    #[test]
    fn similarity_transforms_vanish_after_alignment() {
        let g = points(4, 17);
        let r = rotation_from_axis_angle(&Vector3::new(0.3, -1.1, 0.4));
        let p: Vec<Point3> = g
            .iter()
            .map(|q| Point3::from(r * q.coords * 1.7 + Vector3::new(1.0, 2.0, 3.0)))
            .collect();
        assert!(pa_mpjpe(&p, &g).unwrap() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_reported() {
        assert!(matches!(
            mpjpe(&points(1, 3), &points(1, 4)),
            Err(Error::LengthMismatch { left: 3, right: 4 })
        ));
    }

    #[test]
    fn topdown_examples() {
        let up = Vector3::new(0.0, 1.0, 0.0);
        let a = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(topdown_distance_error(&a, &a, &up), 0.0);
        assert_eq!(topdown_distance_error(&(a + up * 5.0), &a, &up), 0.0);
        assert_relative_eq!(
            topdown_distance_error(&(a + Vector3::new(3.0, 0.0, 4.0)), &a, &up),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn reid_examples() {
        let gt = [(0, 1), (1, 0), (2, 2), (3, 3)];
        assert_eq!(reid_f1(&gt, &gt), 1.0);
        assert_eq!(reid_f1(&[], &gt), 0.0);
        let pred = [(0, 1), (1, 0), (2, 3)];
        let s = reid_score(&pred, &gt);
        assert_relative_eq!(s.precision, 2.0 / 3.0);
        assert_relative_eq!(s.recall, 0.5);
        assert_relative_eq!(s.f1, 4.0 / 7.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in prop::collection::btree_set((0usize..5, 0usize..5), 0..8),
                           b in prop::collection::btree_set((0usize..5, 0usize..5), 0..8)) {
            let a: Vec<_> = a.into_iter().collect();
            let b: Vec<_> = b.into_iter().collect();
            prop_assert!((reid_f1(&a, &b) - reid_f1(&b, &a)).abs() < 1e-15);
        }

        #[test]
        fn mpjpe_ignores_translation(t in prop::array::uniform3(-10.0f64..10.0), seed in 0u64..1000) {
            let g = points(seed, 17);
            let p = points(seed + 1, 17);
            let moved: Vec<Point3> = p.iter().map(|q| q + Vector3::from(t)).collect();
            prop_assert!((mpjpe(&p, &g).unwrap() - mpjpe(&moved, &g).unwrap()).abs() < 1e-9);
        }
    }
}
