//! Evaluation metrics: Dice, Jaccard, 95% Hausdorff distance and average
//! surface distance, in isotropic voxel units.

use thiserror::Error;

use crate::maskops::LabelMap;
use crate::nets::{NetError, SegNet};
use crate::scalar::Scalar;
use crate::synthdata::Volume;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: pred {pred:?} vs truth {truth:?}")]
    ShapeMismatch { pred: [usize; 3], truth: [usize; 3] },
    #[error("surface distance undefined: {side} surface is empty for class {class}")]
    EmptySurface { side: &'static str, class: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-class metric row. Surface distances are None when undefined
/// (an empty surface on either side).
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Mean Dice over foreground classes.
    pub fn mean_dice(&self) -> f64 {
        let total: f64 = self.per_class.iter().map(|c| c.dice).sum();
        total / self.per_class.len() as f64
    }

    /// CSV rows matching the header `iteration,split,class,dice,jaccard,hd95,asd`.
    pub fn csv_rows(&self, iteration: u64, split: &str) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{iteration},{split},{},{:.6},{:.6},{},{}\n",
                c.class,
                c.dice,
                c.jaccard,
                fmt(c.hd95),
                fmt(c.asd),
            ));
        }
        out
    }
}

pub const METRICS_CSV_HEADER: &str = "iteration,split,class,dice,jaccard,hd95,asd";

fn check_shapes(pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch { pred: pred.shape(), truth: truth.shape() });
    }
    Ok(())
}

/// Dice and Jaccard for one class. Both-empty convention: (1, 1).
pub fn overlap_metrics(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<(f64, f64), MetricsError> {
    check_shapes(pred, truth)?;
    let mut p = 0usize;
    let mut t = 0usize;
    let mut inter = 0usize;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let pa = a == class;
        let tb = b == class;
        p += usize::from(pa);
        t += usize::from(tb);
        inter += usize::from(pa && tb);
    }
    if p == 0 && t == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + t - inter;
    let dice = 2.0 * inter as f64 / (p + t) as f64;
    let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((dice, jaccard))
}

/// Surface voxels of one class: class voxels with at least one face-adjacent
/// neighbor (or volume boundary) outside the class.
fn surface_voxels(map: &LabelMap, class: u8) -> Vec<[f64; 3]> {
    let [w, h, d] = map.shape();
    let at = |x: isize, y: isize, z: isize| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= w as isize || y >= h as isize || z >= d as isize {
            return false;
        }
        map.data()[(x as usize * h + y as usize) * d + z as usize] == class
    };
    let mut out = Vec::new();
    for x in 0..w as isize {
        for y in 0..h as isize {
            for z in 0..d as isize {
                if !at(x, y, z) {
                    continue;
                }
                let boundary = !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if boundary {
                    out.push([x as f64, y as f64, z as f64]);
                }
            }
        }
    }
    out
}

fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile on a sorted slice.
fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// (hd95, asd) for one class. hd95 is the max of the two directed 95th
/// percentiles; asd is the mean over the union of both directed distance sets.
pub fn surface_distances(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<(f64, f64), MetricsError> {
    check_shapes(pred, truth)?;
    let sp = surface_voxels(pred, class);
    let st = surface_voxels(truth, class);
    if sp.is_empty() {
        return Err(MetricsError::EmptySurface { side: "prediction", class: class.into() });
    }
    if st.is_empty() {
        return Err(MetricsError::EmptySurface { side: "truth", class: class.into() });
    }
    let mut d_pt = directed_distances(&sp, &st);
    let mut d_tp = directed_distances(&st, &sp);
    d_pt.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d_tp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let hd95 = percentile_nearest_rank(&d_pt, 0.95).max(percentile_nearest_rank(&d_tp, 0.95));
    let total: f64 = d_pt.iter().chain(&d_tp).sum();
    let asd = total / (d_pt.len() + d_tp.len()) as f64;
    Ok((hd95, asd))
}

/// Full per-class report for foreground classes 1..K.
pub fn evaluate_prediction(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MetricsReport, MetricsError> {
    let mut per_class = Vec::new();
    for class in 1..classes as u8 {
        let (dice, jaccard) = overlap_metrics(pred, truth, class)?;
        let (hd95, asd) = match surface_distances(pred, truth, class) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(MetricsError::EmptySurface { .. }) => (None, None),
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics { class: class.into(), dice, jaccard, hd95, asd });
    }
    Ok(MetricsReport { per_class })
}

/// Hard prediction from the mean of two students' softmax maps; argmax ties
/// break toward the lower class index.
pub fn evaluate_students<T: Scalar>(
    net_a: &SegNet<T>,
    net_b: &SegNet<T>,
    volume: &Volume<T>,
) -> Result<LabelMap, MetricsError> {
    let pa = net_a.predict(volume)?;
    let pb = net_b.predict(volume)?;
    let mean = average_probs(&pa, &pb);
    Ok(LabelMap::from_probs(&mean))
}

/// Elementwise mean of two probability maps (plain data op, no tape).
pub fn average_probs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    let half = T::from_f64c(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| half * (x + y))
        .collect();
    Tensor::constant(a.shape(), data).expect("means of finite probs are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Arch, NetConfig};

    fn map(shape: [usize; 3], ones: &[[usize; 3]]) -> LabelMap {
        let [_, h, d] = shape;
        let mut data = vec![0u8; shape.iter().product()];
        for &[x, y, z] in ones {
            data[(x * h + y) * d + z] = 1;
        }
        LabelMap::new(shape, data)
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let a = map([4, 4, 1], &[[0, 0, 0], [1, 1, 0]]);
        assert_eq!(overlap_metrics(&a, &a, 1).unwrap(), (1.0, 1.0));
        let b = map([4, 4, 1], &[[2, 2, 0], [3, 3, 0]]);
        assert_eq!(overlap_metrics(&a, &b, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn overlap_half_intersection() {
        // |P| = |T| = 4, |P intersect T| = 2 -> dice 0.5, jaccard 1/3
        let p = map([8, 1, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let t = map([8, 1, 1], &[[2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]]);
        let (dice, jac) = overlap_metrics(&p, &t, 1).unwrap();
        assert!((dice - 0.5).abs() < 1e-12);
        assert!((jac - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_convention() {
        let empty = LabelMap::zeros([3, 3, 3]);
        assert_eq!(overlap_metrics(&empty, &empty, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn dice_jaccard_identity() {
        let p = map([6, 6, 1], &[[0, 0, 0], [0, 1, 0], [1, 0, 0], [2, 2, 0]]);
        let t = map([6, 6, 1], &[[0, 0, 0], [1, 1, 0], [1, 0, 0]]);
        let (dice, jac) = overlap_metrics(&p, &t, 1).unwrap();
        assert!((dice - 2.0 * jac / (1.0 + jac)).abs() < 1e-9);
        assert!(jac <= dice);
    }

    #[test]
    fn identical_masks_have_zero_distances() {
        let a = map([5, 5, 5], &[[2, 2, 2], [2, 2, 3], [2, 3, 2]]);
        let (hd95, asd) = surface_distances(&a, &a, 1).unwrap();
        assert_eq!((hd95, asd), (0.0, 0.0));
    }

    #[test]
    fn single_voxel_pair_distance_exact() {
        let p = map([5, 1, 1], &[[0, 0, 0]]);
        let t = map([5, 1, 1], &[[3, 0, 0]]);
        let (hd95, asd) = surface_distances(&p, &t, 1).unwrap();
        assert_eq!(hd95, 3.0);
        assert_eq!(asd, 3.0);
    }

    #[test]
    fn empty_surface_is_an_error() {
        let p = map([3, 3, 1], &[[0, 0, 0]]);
        let empty = LabelMap::zeros([3, 3, 1]);
        assert!(matches!(
            surface_distances(&p, &empty, 1),
            Err(MetricsError::EmptySurface { side: "truth", .. })
        ));
        assert!(matches!(
            surface_distances(&empty, &p, 1),
            Err(MetricsError::EmptySurface { side: "prediction", .. })
        ));
    }

    #[test]
    fn surface_distance_symmetry() {
        let p = map([6, 6, 1], &[[1, 1, 0], [1, 2, 0], [2, 1, 0]]);
        let t = map([6, 6, 1], &[[3, 3, 0], [4, 4, 0]]);
        let (h1, a1) = surface_distances(&p, &t, 1).unwrap();
        let (h2, a2) = surface_distances(&t, &p, 1).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn translation_invariance() {
        let p = map([8, 8, 1], &[[1, 1, 0], [1, 2, 0]]);
        let t = map([8, 8, 1], &[[3, 3, 0]]);
        let p2 = map([8, 8, 1], &[[3, 2, 0], [3, 3, 0]]);
        let t2 = map([8, 8, 1], &[[5, 4, 0]]);
        let d1 = surface_distances(&p, &t, 1).unwrap();
        let d2 = surface_distances(&p2, &t2, 1).unwrap();
        assert!((d1.0 - d2.0).abs() < 1e-12);
        assert!((d1.1 - d2.1).abs() < 1e-12);
    }

    #[test]
    fn student_average_tie_breaks_low() {
        let a = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.9, 0.1]).unwrap();
        let b = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.1, 0.9]).unwrap();
        let mean = average_probs(&a, &b);
        let lm = LabelMap::from_probs(&mean);
        assert_eq!(lm.data(), &[0]);
    }

    #[test]
    fn student_average_prefers_stronger_vote() {
        // A: class 0 at 0.9; B: class 1 at 0.6 -> mean (0.65, 0.35) -> class 0
        let a = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.9, 0.1]).unwrap();
        let b = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.4, 0.6]).unwrap();
        let lm = LabelMap::from_probs(&average_probs(&a, &b));
        assert_eq!(lm.data(), &[0]);
    }

    #[test]
    fn identical_students_match_single_net() {
        let cfg = NetConfig { in_channels: 1, width: 4, depth: 3, classes: 2, kernel: [3, 3, 1] };
        let net = SegNet::<f64>::init(Arch::Plain, cfg, 5).unwrap();
        let vol = Volume::new([5, 5, 1], (0..25).map(|i| (i as f64) / 25.0).collect());
        let solo = LabelMap::from_probs(&net.predict(&vol).unwrap());
        let avg = evaluate_students(&net, &net, &vol).unwrap();
        assert_eq!(solo, avg);
    }
}
