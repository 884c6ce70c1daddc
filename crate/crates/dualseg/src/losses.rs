//! Differentiable objectives: Dice+CE segmentation loss with in/out region
//! weighting, discrepancy-masked MSE, discrepancy-error-masked KL-to-uniform,
//! and their weighted total.
//!
//! Masked reductions normalize by the gated voxel count (+1e-8), keeping loss
//! magnitudes comparable across mask sizes.

use thiserror::Error;

use crate::maskops::{BinaryMask, LabelMap};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const PROB_CLAMP: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1e-5;
pub const COUNT_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: probs spatial shape {probs:?} does not match {what} shape {other:?}")]
    ShapeMismatch { op: &'static str, probs: Vec<usize>, what: &'static str, other: [usize; 3] },
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
}

/// Which mixed volume the loss is for; selects the region that carries
/// weight 1 (ground-truth-derived) vs alpha (pseudo-label-derived).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// Scalar weights combining the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub gamma: T,
    pub mu: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(alpha: T, gamma: T, mu: T) -> Result<Self, LossError> {
        for (name, value) in [("alpha", alpha), ("gamma", gamma), ("mu", mu)] {
            if value < T::zero() {
                return Err(LossError::NegativeWeight { name, value: value.to_f64c() });
            }
        }
        Ok(LossWeights { alpha, gamma, mu })
    }
}

/// The K-class uniform distribution used as the KL target.
#[derive(Debug, Clone, Copy)]
pub struct UniformTarget {
    pub classes: usize,
}

impl UniformTarget {
    pub fn probability<T: Scalar>(&self) -> T {
        T::one() / T::from_usize(self.classes).unwrap()
    }
}

fn check_probs<T: Scalar>(
    op: &'static str,
    probs: &Tensor<T>,
    what: &'static str,
    shape: [usize; 3],
) -> Result<(), LossError> {
    let s = probs.shape();
    if s.len() != 5 || s[0] != 1 || [s[2], s[3], s[4]] != shape {
        return Err(LossError::ShapeMismatch { op, probs: s.to_vec(), what, other: shape });
    }
    Ok(())
}

/// Per-voxel cross-entropy -log p[label] as a (1, 1, W, H, D) map.
/// Zero probabilities are clamped at 1e-12.
pub fn cross_entropy_map<T: Scalar>(probs: &Tensor<T>, label: &LabelMap) -> Result<Tensor<T>, LossError> {
    check_probs("cross_entropy_map", probs, "label", label.shape())?;
    let k = probs.shape()[1];
    let onehot = label.to_onehot::<T>(k);
    Ok(probs
        .mul(&onehot)?
        .sum_channels()?
        .log_clamped(T::from_f64c(PROB_CLAMP))?
        .neg()?)
}

/// Per-voxel seg loss map: 0.5 * cross-entropy. The Dice half of the
/// segmentation loss is a region-level reduction (see `bcp_seg_loss`)
/// rather than a voxelwise map.
pub fn seg_loss_map<T: Scalar>(probs: &Tensor<T>, label: &LabelMap) -> Result<Tensor<T>, LossError> {
    Ok(cross_entropy_map(probs, label)?.scale(T::from_f64c(0.5))?)
}

/// Selector constant of shape (1, K, S): region indicator on channel `class`,
/// zero elsewhere.
fn class_region_selector<T: Scalar>(region: &BinaryMask, k: usize, class: usize) -> Tensor<T> {
    let [w, h, d] = region.shape();
    let spatial = w * h * d;
    let mut data = vec![T::zero(); k * spatial];
    for (v, &m) in region.data().iter().enumerate() {
        if m == 1 {
            data[class * spatial + v] = T::one();
        }
    }
    Tensor::constant(&[1, k, w, h, d], data).expect("selector values finite")
}

/// Soft Dice loss restricted to `region`: mean over all K classes of
/// 1 - (2*sum_R p_c g_c + s) / (sum_R p_c + sum_R g_c + s).
pub fn soft_dice_region_loss<T: Scalar>(
    probs: &Tensor<T>,
    label: &LabelMap,
    region: &BinaryMask,
) -> Result<Tensor<T>, LossError> {
    check_probs("soft_dice_region_loss", probs, "label", label.shape())?;
    let k = probs.shape()[1];
    let smooth = T::from_f64c(DICE_SMOOTH);
    let onehot = label.to_onehot::<T>(k);
    let pg = probs.mul(&onehot)?;
    let mut dice_sum: Option<Tensor<T>> = None;
    for class in 0..k {
        let sel = class_region_selector::<T>(region, k, class);
        let inter = pg.mul(&sel)?.sum_all()?;
        let psum = probs.mul(&sel)?.sum_all()?;
        let gsum: usize = region
            .data()
            .iter()
            .zip(label.data())
            .filter(|(&m, &l)| m == 1 && usize::from(l) == class)
            .count();
        let gsum = T::from_usize(gsum).unwrap();
        let num = inter.scale(T::from_f64c(2.0))?.add_scalar(smooth)?;
        let den = psum.add_scalar(gsum + smooth)?;
        let dice = num.div(&den)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => acc.add(&dice)?,
            None => dice,
        });
    }
    let mean_dice = dice_sum.unwrap().scale(T::one() / T::from_usize(k).unwrap())?;
    Ok(mean_dice.neg()?.add_scalar(T::one())?)
}

/// 0.5 * (mean CE over region) + 0.5 * (region-restricted soft Dice loss).
/// Empty regions contribute zero. Built from the fused reductions, which
/// reproduce the elementary-op graph term for term (see the tensor module).
fn region_seg_loss<T: Scalar>(
    probs: &Tensor<T>,
    label: &LabelMap,
    region: &BinaryMask,
) -> Result<Tensor<T>, LossError> {
    let count = region.count_ones();
    if count == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let k = probs.shape()[1];
    let onehot = label.to_onehot::<T>(k);
    let mean_ce = probs
        .ce_region_sum(&onehot, &region.to_tensor(), T::from_f64c(PROB_CLAMP))?
        .scale(T::one() / T::from_usize(count).unwrap())?;
    let smooth = T::from_f64c(DICE_SMOOTH);
    let pg = probs.mul(&onehot)?;
    let mut dice_sum: Option<Tensor<T>> = None;
    for class in 0..k {
        let sel = class_region_selector::<T>(region, k, class);
        let inter = pg.mul_sum(&sel)?;
        let psum = probs.mul_sum(&sel)?;
        let gsum: usize = region
            .data()
            .iter()
            .zip(label.data())
            .filter(|(&m, &l)| m == 1 && usize::from(l) == class)
            .count();
        let gsum = T::from_usize(gsum).unwrap();
        let num = inter.scale(T::from_f64c(2.0))?.add_scalar(smooth)?;
        let den = psum.add_scalar(gsum + smooth)?;
        let dice = num.div(&den)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => acc.add(&dice)?,
            None => dice,
        });
    }
    let mean_dice = dice_sum.unwrap().scale(T::one() / T::from_usize(k).unwrap())?;
    let dice_loss = mean_dice.neg()?.add_scalar(T::one())?;
    let half = T::from_f64c(0.5);
    Ok(mean_ce.scale(half)?.add(&dice_loss.scale(half)?)?)
}

fn regions(mask: &BinaryMask, direction: Direction) -> (BinaryMask, BinaryMask) {
    // Region carrying weight 1 is the ground-truth-derived one: mask for the
    // `in` volume, its complement for the `out` volume.
    match direction {
        Direction::In => (mask.clone(), mask.complement()),
        Direction::Out => (mask.complement(), mask.clone()),
    }
}

/// BCP segmentation loss: RegionLoss(gt region) + alpha * RegionLoss(pseudo region).
pub fn bcp_seg_loss<T: Scalar>(
    probs: &Tensor<T>,
    mix_label: &LabelMap,
    mask: &BinaryMask,
    alpha: T,
    direction: Direction,
) -> Result<Tensor<T>, LossError> {
    check_probs("bcp_seg_loss", probs, "mask", mask.shape())?;
    let (gt_region, pseudo_region) = regions(mask, direction);
    let l1 = region_seg_loss(probs, mix_label, &gt_region)?;
    let l2 = region_seg_loss(probs, mix_label, &pseudo_region)?;
    Ok(l1.add(&l2.scale(alpha)?)?)
}

/// Per-voxel alpha weighting: 1 on the ground-truth-derived region, alpha on
/// the pseudo-label-derived region, as a (1, 1, S) constant.
fn alpha_weight_tensor<T: Scalar>(mask: &BinaryMask, alpha: T, direction: Direction) -> Tensor<T> {
    let [w, h, d] = mask.shape();
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            let gt = match direction {
                Direction::In => m == 1,
                Direction::Out => m == 0,
            };
            if gt {
                T::one()
            } else {
                alpha
            }
        })
        .collect();
    Tensor::constant(&[1, 1, w, h, d], data).expect("weights finite")
}

/// Discrepancy-masked MSE: per-voxel squared distance between probs and the
/// one-hot mixed label, alpha-weighted by region, gated by the diff mask, and
/// normalized by the gated voxel count.
pub fn masked_mse_loss<T: Scalar>(
    probs: &Tensor<T>,
    mix_label: &LabelMap,
    mask: &BinaryMask,
    m_diff: &BinaryMask,
    alpha: T,
    direction: Direction,
) -> Result<Tensor<T>, LossError> {
    check_probs("masked_mse_loss", probs, "mask", mask.shape())?;
    check_probs("masked_mse_loss", probs, "m_diff", m_diff.shape())?;
    let k = probs.shape()[1];
    let onehot = mix_label.to_onehot::<T>(k);
    let gated_sum = probs.mse_masked_sum(
        &onehot,
        &alpha_weight_tensor(mask, alpha, direction),
        &m_diff.to_tensor(),
    )?;
    let denom = T::from_usize(m_diff.count_ones()).unwrap() + T::from_f64c(COUNT_EPS);
    Ok(gated_sum.scale(T::one() / denom)?)
}

/// Discrepancy-error-masked KL to uniform: per-voxel D_KL(u || p) =
/// -log K - (1/K) sum_c log p_c, alpha-weighted, gated by the differr mask,
/// normalized by the gated voxel count.
pub fn masked_kl_uniform_loss<T: Scalar>(
    probs: &Tensor<T>,
    mask: &BinaryMask,
    m_differr: &BinaryMask,
    alpha: T,
    direction: Direction,
) -> Result<Tensor<T>, LossError> {
    check_probs("masked_kl_uniform_loss", probs, "mask", mask.shape())?;
    check_probs("masked_kl_uniform_loss", probs, "m_differr", m_differr.shape())?;
    let k = probs.shape()[1];
    let kf = T::from_usize(k).unwrap();
    let gated_sum = probs.kl_masked_sum(
        &alpha_weight_tensor(mask, alpha, direction),
        &m_differr.to_tensor(),
        T::from_f64c(PROB_CLAMP),
        -T::one() / kf,
        -kf.ln(),
    )?;
    let denom = T::from_usize(m_differr.count_ones()).unwrap() + T::from_f64c(COUNT_EPS);
    Ok(gated_sum.scale(T::one() / denom)?)
}

/// Total: seg_in + seg_out + gamma*(mse_in + mse_out) + mu*(kl_in + kl_out).
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    seg_in: &Tensor<T>,
    seg_out: &Tensor<T>,
    mse_in: &Tensor<T>,
    mse_out: &Tensor<T>,
    kl_in: &Tensor<T>,
    kl_out: &Tensor<T>,
    gamma: T,
    mu: T,
) -> Result<Tensor<T>, LossError> {
    let seg = seg_in.add(seg_out)?;
    let mse = mse_in.add(mse_out)?.scale(gamma)?;
    let kl = kl_in.add(kl_out)?.scale(mu)?;
    Ok(seg.add(&mse)?.add(&kl)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::{diff_mask, differr_mask, err_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs_from_logits(shape: &[usize], logits: Vec<f64>) -> Tensor<f64> {
        Tensor::constant(shape, logits).unwrap().softmax_channels().unwrap()
    }

    fn random_probs(shape: [usize; 3], k: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = k * shape.iter().product::<usize>();
        probs_from_logits(
            &[1, k, shape[0], shape[1], shape[2]],
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    fn random_labels(shape: [usize; 3], k: u8, seed: u64) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        LabelMap::new(shape, (0..n).map(|_| rng.gen_range(0..k)).collect())
    }

    fn random_mask(shape: [usize; 3], seed: u64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        BinaryMask::new(shape, (0..n).map(|_| rng.gen_range(0..2u8)).collect())
    }

    #[test]
    fn ce_of_half_probability_is_ln2() {
        let probs = probs_from_logits(&[1, 2, 1, 1, 1], vec![0.0, 0.0]);
        let label = LabelMap::new([1, 1, 1], vec![0]);
        let ce = cross_entropy_map(&probs, &label).unwrap();
        assert!((ce.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_near_zero_seg_loss() {
        let s = [2, 2, 1];
        let label = LabelMap::new(s, vec![0, 1, 1, 0]);
        // Sharp logits approximating a one-hot prediction.
        let spatial = 4;
        let mut logits = vec![0.0; 2 * spatial];
        for (v, &l) in label.data().iter().enumerate() {
            logits[usize::from(l) * spatial + v] = 40.0;
        }
        let probs = probs_from_logits(&[1, 2, 2, 2, 1], logits);
        let mask = BinaryMask::ones(s);
        let loss = bcp_seg_loss(&probs, &label, &mask, 0.5, Direction::In).unwrap();
        assert!(loss.item() < 1e-4, "loss = {}", loss.item());
    }

    #[test]
    fn alpha_zero_ignores_pseudo_region() {
        // Perfect inside the mask (weight-1) region, garbage outside.
        let s = [2, 2, 1];
        let label = LabelMap::new(s, vec![0, 1, 1, 0]);
        let mask = BinaryMask::new(s, vec![1, 1, 0, 0]);
        let spatial = 4;
        let mut logits = vec![0.0; 2 * spatial];
        for v in 0..2 {
            logits[usize::from(label.data()[v]) * spatial + v] = 40.0;
        }
        for v in 2..4 {
            // confidently wrong
            logits[usize::from(1 - label.data()[v]) * spatial + v] = 40.0;
        }
        let probs = probs_from_logits(&[1, 2, 2, 2, 1], logits);
        let loss = bcp_seg_loss(&probs, &label, &mask, 0.0, Direction::In).unwrap();
        assert!(loss.item() < 1e-4, "loss = {}", loss.item());
    }

    #[test]
    fn all_ones_mask_reduces_to_plain_seg_loss() {
        let s = [3, 3, 2];
        let probs = random_probs(s, 2, 1);
        let label = random_labels(s, 2, 2);
        let mask = BinaryMask::ones(s);
        let bcp = bcp_seg_loss(&probs, &label, &mask, 0.5, Direction::In).unwrap();
        let plain = region_seg_loss(&probs, &label, &mask).unwrap();
        assert!((bcp.item() - plain.item()).abs() < 1e-12);
    }

    #[test]
    fn mse_zero_when_diff_mask_empty() {
        let s = [3, 3, 1];
        let probs = random_probs(s, 2, 3);
        let label = random_labels(s, 2, 4);
        let mask = random_mask(s, 5);
        let empty = BinaryMask::zeros(s);
        let loss = masked_mse_loss(&probs, &label, &mask, &empty, 0.5, Direction::In).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn mse_single_voxel_value() {
        // probs (0.9, 0.1), true class 0: squared error 0.02 before weighting.
        let probs = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.9, 0.1]).unwrap();
        let label = LabelMap::new([1, 1, 1], vec![0]);
        let mask = BinaryMask::ones([1, 1, 1]); // gt region, weight 1
        let gate = BinaryMask::ones([1, 1, 1]);
        let loss = masked_mse_loss(&probs, &label, &mask, &gate, 0.5, Direction::In).unwrap();
        assert!((loss.item() - 0.02f64).abs() < 1e-9, "loss = {}", loss.item());
    }

    #[test]
    fn kl_uniform_prediction_contributes_zero() {
        let probs = probs_from_logits(&[1, 2, 1, 1, 1], vec![0.0, 0.0]);
        let mask = BinaryMask::ones([1, 1, 1]);
        let gate = BinaryMask::ones([1, 1, 1]);
        let loss = masked_kl_uniform_loss(&probs, &mask, &gate, 0.5, Direction::In).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn kl_known_value() {
        // K=2, p = (0.9, 0.1): 0.5*ln(0.5/0.9) + 0.5*ln(0.5/0.1) ~= 0.5108
        let probs = Tensor::constant(&[1, 2, 1, 1, 1], vec![0.9, 0.1]).unwrap();
        let mask = BinaryMask::ones([1, 1, 1]);
        let gate = BinaryMask::ones([1, 1, 1]);
        let loss = masked_kl_uniform_loss(&probs, &mask, &gate, 0.5, Direction::In).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        // denominator is count + 1e-8, so allow that slack
        assert!((loss.item() - expected).abs() < 1e-7);
        assert!((expected - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_entropy_duality() {
        // D_KL(u || p) == -log K - (1/K) sum log p_c, against the direct form.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in [2usize, 4] {
            let u = UniformTarget { classes: k }.probability::<f64>();
            for _ in 0..50 {
                let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let probs = probs_from_logits(&[1, k, 1, 1, 1], logits);
                let direct: f64 = probs.data().iter().map(|&p| u * (u / p).ln()).sum();
                let dual = -(k as f64).ln()
                    - probs.data().iter().map(|&p| p.ln()).sum::<f64>() / k as f64;
                assert!((direct - dual).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kl_empty_gate_gives_zero_loss_and_gradient() {
        let s = [2, 2, 1];
        let tape = crate::tensor::Tape::new();
        let logits = tape.leaf(&[1, 2, 2, 2, 1], vec![0.3, -0.2, 1.0, 0.5, -1.0, 0.7, 0.1, 0.0]).unwrap();
        let probs = logits.softmax_channels().unwrap();
        let mask = BinaryMask::ones(s);
        let empty = BinaryMask::zeros(s);
        let loss = masked_kl_uniform_loss(&probs, &mask, &empty, 0.5, Direction::In).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_combinations() {
        let one = Tensor::scalar(1.0f64);
        let total = total_loss(&one, &one, &one, &one, &one, &one, 0.3, 0.1).unwrap();
        assert!((total.item() - 2.8).abs() < 1e-12);
        let zeroed = total_loss(&one, &one, &one, &one, &one, &one, 0.0, 0.0).unwrap();
        assert!((zeroed.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_finite() {
        let s = [4, 4, 2];
        for seed in 0..10u64 {
            let probs = random_probs(s, 2, seed);
            let label = random_labels(s, 2, seed + 100);
            let mask = random_mask(s, seed + 200);
            let pred = LabelMap::from_probs(&probs);
            let md = diff_mask(&pred, &random_labels(s, 2, seed + 300)).unwrap();
            let me = err_mask(&pred, &label).unwrap();
            let mde = differr_mask(&md, &me).unwrap();
            for dir in [Direction::In, Direction::Out] {
                let seg = bcp_seg_loss(&probs, &label, &mask, 0.5, dir).unwrap();
                let mse = masked_mse_loss(&probs, &label, &mask, &md, 0.5, dir).unwrap();
                let kl = masked_kl_uniform_loss(&probs, &mask, &mde, 0.5, dir).unwrap();
                for l in [&seg, &mse, &kl] {
                    assert!(l.item() >= 0.0 && l.item().is_finite());
                }
            }
        }
    }

    #[test]
    fn gated_voxels_only_receive_gradient() {
        let s = [2, 1, 1];
        let tape = crate::tensor::Tape::new();
        let logits = tape.leaf(&[1, 2, 2, 1, 1], vec![0.4, -0.3, 0.2, 0.9]).unwrap();
        let probs = logits.softmax_channels().unwrap();
        let label = LabelMap::new(s, vec![0, 0]);
        let mask = BinaryMask::ones(s);
        let gate = BinaryMask::new(s, vec![1, 0]); // only voxel 0 gated
        let loss = masked_mse_loss(&probs, &label, &mask, &gate, 0.5, Direction::In).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        // layout: channel-major, spatial index 1 entries are g[1] and g[3]
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[0] != 0.0 || g[2] != 0.0);
    }

    /// Elementary-op replica of `region_seg_loss` (pre-fusion formulation).
    fn region_seg_loss_elementary<T: Scalar>(
        probs: &Tensor<T>,
        label: &LabelMap,
        region: &BinaryMask,
    ) -> Tensor<T> {
        let count = region.count_ones();
        if count == 0 {
            return Tensor::scalar(T::zero());
        }
        let k = probs.shape()[1];
        let onehot = label.to_onehot::<T>(k);
        let ce = probs
            .mul(&onehot)
            .unwrap()
            .sum_channels()
            .unwrap()
            .log_clamped(T::from_f64c(PROB_CLAMP))
            .unwrap()
            .neg()
            .unwrap();
        let mean_ce = ce
            .mul(&region.to_tensor())
            .unwrap()
            .sum_all()
            .unwrap()
            .scale(T::one() / T::from_usize(count).unwrap())
            .unwrap();
        let smooth = T::from_f64c(DICE_SMOOTH);
        let pg = probs.mul(&onehot).unwrap();
        let mut dice_sum: Option<Tensor<T>> = None;
        for class in 0..k {
            let sel = class_region_selector::<T>(region, k, class);
            let inter = pg.mul(&sel).unwrap().sum_all().unwrap();
            let psum = probs.mul(&sel).unwrap().sum_all().unwrap();
            let gsum: usize = region
                .data()
                .iter()
                .zip(label.data())
                .filter(|(&m, &l)| m == 1 && usize::from(l) == class)
                .count();
            let gsum = T::from_usize(gsum).unwrap();
            let num = inter.scale(T::from_f64c(2.0)).unwrap().add_scalar(smooth).unwrap();
            let den = psum.add_scalar(gsum + smooth).unwrap();
            let dice = num.div(&den).unwrap();
            dice_sum = Some(match dice_sum {
                Some(acc) => acc.add(&dice).unwrap(),
                None => dice,
            });
        }
        let mean_dice = dice_sum.unwrap().scale(T::one() / T::from_usize(k).unwrap()).unwrap();
        let dice_loss = mean_dice.neg().unwrap().add_scalar(T::one()).unwrap();
        let half = T::from_f64c(0.5);
        mean_ce.scale(half).unwrap().add(&dice_loss.scale(half).unwrap()).unwrap()
    }

    fn bcp_seg_loss_elementary<T: Scalar>(
        probs: &Tensor<T>,
        mix_label: &LabelMap,
        mask: &BinaryMask,
        alpha: T,
        direction: Direction,
    ) -> Tensor<T> {
        let (gt_region, pseudo_region) = regions(mask, direction);
        let l1 = region_seg_loss_elementary(probs, mix_label, &gt_region);
        let l2 = region_seg_loss_elementary(probs, mix_label, &pseudo_region);
        l1.add(&l2.scale(alpha).unwrap()).unwrap()
    }

    fn masked_mse_loss_elementary<T: Scalar>(
        probs: &Tensor<T>,
        mix_label: &LabelMap,
        mask: &BinaryMask,
        m_diff: &BinaryMask,
        alpha: T,
        direction: Direction,
    ) -> Tensor<T> {
        let k = probs.shape()[1];
        let onehot = mix_label.to_onehot::<T>(k);
        let per_voxel = probs.sub(&onehot).unwrap().square().unwrap().sum_channels().unwrap();
        let weighted = per_voxel.mul(&alpha_weight_tensor(mask, alpha, direction)).unwrap();
        let gated = weighted.mul(&m_diff.to_tensor()).unwrap();
        let denom = T::from_usize(m_diff.count_ones()).unwrap() + T::from_f64c(COUNT_EPS);
        gated.sum_all().unwrap().scale(T::one() / denom).unwrap()
    }

    fn masked_kl_uniform_loss_elementary<T: Scalar>(
        probs: &Tensor<T>,
        mask: &BinaryMask,
        m_differr: &BinaryMask,
        alpha: T,
        direction: Direction,
    ) -> Tensor<T> {
        let k = probs.shape()[1];
        let kf = T::from_usize(k).unwrap();
        let per_voxel = probs
            .log_clamped(T::from_f64c(PROB_CLAMP))
            .unwrap()
            .sum_channels()
            .unwrap()
            .scale(-T::one() / kf)
            .unwrap()
            .add_scalar(-kf.ln())
            .unwrap();
        let weighted = per_voxel.mul(&alpha_weight_tensor(mask, alpha, direction)).unwrap();
        let gated = weighted.mul(&m_differr.to_tensor()).unwrap();
        let denom = T::from_usize(m_differr.count_ones()).unwrap() + T::from_f64c(COUNT_EPS);
        gated.sum_all().unwrap().scale(T::one() / denom).unwrap()
    }

    /// The fused reductions must reproduce the elementary-op graphs bit for
    /// bit: same loss value, same gradient on the logits leaf.
    fn assert_fused_matches_elementary<T: Scalar>(seeds: std::ops::Range<u64>) {
        let s = [3, 4, 2];
        let spatial: usize = s.iter().product();
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in [2usize, 3] {
                let logits: Vec<T> = (0..k * spatial)
                    .map(|_| T::from_f64c(rng.gen_range(-2.0..2.0)))
                    .collect();
                let label = random_labels(s, k as u8, seed + 11);
                let mask = random_mask(s, seed + 22);
                let gate = random_mask(s, seed + 33);
                let alpha = T::from_f64c(0.5);
                for direction in [Direction::In, Direction::Out] {
                    let run = |fused: bool| -> (T, Vec<T>) {
                        let tape = crate::tensor::Tape::new();
                        let leaf = tape.leaf(&[1, k, s[0], s[1], s[2]], logits.clone()).unwrap();
                        let probs = leaf.softmax_channels().unwrap();
                        let (seg, mse, kl) = if fused {
                            (
                                bcp_seg_loss(&probs, &label, &mask, alpha, direction).unwrap(),
                                masked_mse_loss(&probs, &label, &mask, &gate, alpha, direction)
                                    .unwrap(),
                                masked_kl_uniform_loss(&probs, &mask, &gate, alpha, direction)
                                    .unwrap(),
                            )
                        } else {
                            (
                                bcp_seg_loss_elementary(&probs, &label, &mask, alpha, direction),
                                masked_mse_loss_elementary(
                                    &probs, &label, &mask, &gate, alpha, direction,
                                ),
                                masked_kl_uniform_loss_elementary(
                                    &probs, &mask, &gate, alpha, direction,
                                ),
                            )
                        };
                        let total = total_loss(
                            &seg,
                            &seg,
                            &mse,
                            &mse,
                            &kl,
                            &kl,
                            T::from_f64c(0.3),
                            T::from_f64c(0.1),
                        )
                        .unwrap();
                        total.backward().unwrap();
                        (total.item(), leaf.grad().unwrap())
                    };
                    let (v_fused, g_fused) = run(true);
                    let (v_ref, g_ref) = run(false);
                    assert_eq!(v_fused.to_f64c().to_bits(), v_ref.to_f64c().to_bits());
                    assert_eq!(g_fused.len(), g_ref.len());
                    for (a, b) in g_fused.iter().zip(&g_ref) {
                        assert_eq!(a.to_f64c().to_bits(), b.to_f64c().to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn fused_losses_match_elementary_graphs_bitwise_f64() {
        assert_fused_matches_elementary::<f64>(0..8);
    }

    #[test]
    fn fused_losses_match_elementary_graphs_bitwise_f32() {
        assert_fused_matches_elementary::<f32>(100..108);
    }

    #[test]
    fn seg_loss_monotone_in_correct_probability() {
        let s = [1, 1, 1];
        let label = LabelMap::new(s, vec![0]);
        let mask = BinaryMask::ones(s);
        let mut prev = f64::INFINITY;
        for p in [0.2, 0.4, 0.6, 0.8, 0.95] {
            let probs = Tensor::constant(&[1, 2, 1, 1, 1], vec![p, 1.0 - p]).unwrap();
            let loss = bcp_seg_loss(&probs, &label, &mask, 0.5, Direction::In).unwrap().item();
            assert!(loss < prev, "loss not decreasing at p = {p}");
            prev = loss;
        }
    }
}
