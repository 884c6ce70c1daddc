//! Binary mask constructions: copy-paste masks, discrepancy and error masks,
//! and largest-connected-component pseudo-label refinement.

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 3], rhs: [usize; 3] },
    #[error("degenerate volume shape {shape:?}")]
    DegenerateShape { shape: [usize; 3] },
    #[error("copy-paste block extent {extent} invalid for axis of size {axis} (beta = {beta})")]
    BadBlockExtent { extent: usize, axis: usize, beta: f64 },
    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u8, classes: usize },
}

/// Where the zero block of a copy-paste mask is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Random,
    Centered,
}

/// Per-voxel {0,1} mask over a (W, H, D) volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(data.iter().all(|&v| v <= 1));
        BinaryMask { shape, data }
    }

    pub fn ones(shape: [usize; 3]) -> Self {
        BinaryMask { shape, data: vec![1; shape.iter().product()] }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        BinaryMask { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.len() - self.count_ones()
    }

    /// 1 - M, voxelwise.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Mask as a (1, 1, W, H, D) constant tensor for gating loss maps.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [w, h, d] = self.shape;
        let data = self.data.iter().map(|&v| T::from_u8(v).unwrap()).collect();
        Tensor::constant(&[1, 1, w, h, d], data).expect("mask values are finite")
    }
}

/// Per-voxel class assignment over a (W, H, D) volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        LabelMap { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelMap { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn validate(&self, classes: usize) -> Result<(), MaskError> {
        for &v in &self.data {
            if usize::from(v) >= classes {
                return Err(MaskError::LabelOutOfRange { value: v, classes });
            }
        }
        Ok(())
    }

    /// Hard prediction: channel argmax of a (1, K, W, H, D) probability map,
    /// ties broken toward the lower class index.
    pub fn from_probs<T: Scalar>(probs: &Tensor<T>) -> LabelMap {
        let s = probs.shape();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], 1);
        let k = s[1];
        let spatial = s[2] * s[3] * s[4];
        let data = (0..spatial)
            .map(|v| {
                let mut best = 0usize;
                let mut best_p = probs.data()[v];
                for c in 1..k {
                    let p = probs.data()[c * spatial + v];
                    if p > best_p {
                        best_p = p;
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { shape: [s[2], s[3], s[4]], data }
    }

    /// One-hot encoding as a (1, K, W, H, D) constant tensor.
    pub fn to_onehot<T: Scalar>(&self, classes: usize) -> Tensor<T> {
        let [w, h, d] = self.shape;
        let spatial = w * h * d;
        let mut data = vec![T::zero(); classes * spatial];
        for (v, &c) in self.data.iter().enumerate() {
            data[usize::from(c) * spatial + v] = T::one();
        }
        Tensor::constant(&[1, classes, w, h, d], data).expect("one-hot values are finite")
    }
}

fn check_shapes(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<(), MaskError> {
    if a != b {
        return Err(MaskError::ShapeMismatch { op, lhs: a, rhs: b });
    }
    Ok(())
}

/// Block extent for one axis: round(beta * dim), half away from zero.
fn block_extent(dim: usize, beta: f64) -> usize {
    (beta * dim as f64).round() as usize
}

/// Copy-paste mask: a single axis-aligned zero block of extents
/// round(beta * dim) per axis, ones elsewhere. Zero marks the pasted
/// (foreground) region.
pub fn gen_copy_paste_mask<R: Rng>(
    shape: [usize; 3],
    beta: f64,
    mode: MaskMode,
    rng: &mut R,
) -> Result<BinaryMask, MaskError> {
    if shape.iter().any(|&e| e == 0) {
        return Err(MaskError::DegenerateShape { shape });
    }
    let mut ext = [0usize; 3];
    let mut pos = [0usize; 3];
    for a in 0..3 {
        let e = block_extent(shape[a], beta);
        if e < 1 || e > shape[a] {
            return Err(MaskError::BadBlockExtent { extent: e, axis: shape[a], beta });
        }
        ext[a] = e;
    }
    for a in 0..3 {
        pos[a] = match mode {
            MaskMode::Random => rng.gen_range(0..=shape[a] - ext[a]),
            MaskMode::Centered => (shape[a] - ext[a]) / 2,
        };
    }
    let mut mask = BinaryMask::ones(shape);
    let [_, h, d] = shape;
    for x in pos[0]..pos[0] + ext[0] {
        for y in pos[1]..pos[1] + ext[1] {
            let row = (x * h + y) * d;
            mask.data[row + pos[2]..row + pos[2] + ext[2]].fill(0);
        }
    }
    Ok(mask)
}

/// Voxels where two hard predictions disagree (multi-class XOR).
pub fn diff_mask(pred_a: &LabelMap, pred_b: &LabelMap) -> Result<BinaryMask, MaskError> {
    check_shapes("diff_mask", pred_a.shape, pred_b.shape)?;
    let data = pred_a
        .data
        .iter()
        .zip(&pred_b.data)
        .map(|(&a, &b)| u8::from(a != b))
        .collect();
    Ok(BinaryMask { shape: pred_a.shape, data })
}

/// Voxels where a prediction disagrees with the mixed label.
pub fn err_mask(pred: &LabelMap, mix_label: &LabelMap) -> Result<BinaryMask, MaskError> {
    check_shapes("err_mask", pred.shape, mix_label.shape)?;
    let data = pred
        .data
        .iter()
        .zip(&mix_label.data)
        .map(|(&a, &b)| u8::from(a != b))
        .collect();
    Ok(BinaryMask { shape: pred.shape, data })
}

/// Elementwise AND of the discrepancy and error masks.
pub fn differr_mask(m_diff: &BinaryMask, m_err: &BinaryMask) -> Result<BinaryMask, MaskError> {
    check_shapes("differr_mask", m_diff.shape, m_err.shape)?;
    let data = m_diff.data.iter().zip(&m_err.data).map(|(&a, &b)| a & b).collect();
    Ok(BinaryMask { shape: m_diff.shape, data })
}

/// Keeps, per foreground class, only the largest 26-connected component;
/// other voxels of that class are demoted to background. Ties go to the
/// component whose seed voxel comes first in (x, y, z) order.
pub fn largest_connected_component(raw: &LabelMap, classes: usize) -> LabelMap {
    let [w, h, d] = raw.shape;
    let mut out = raw.data.clone();
    let mut comp = vec![u32::MAX; raw.data.len()];
    for class in 1..classes as u8 {
        let mut best_comp = u32::MAX;
        let mut best_size = 0usize;
        let mut next_comp = 0u32;
        let mut stack = Vec::new();
        comp.fill(u32::MAX);
        for seed in 0..raw.data.len() {
            if raw.data[seed] != class || comp[seed] != u32::MAX {
                continue;
            }
            let id = next_comp;
            next_comp += 1;
            let mut size = 0usize;
            comp[seed] = id;
            stack.push(seed);
            while let Some(v) = stack.pop() {
                size += 1;
                let z = v % d;
                let y = (v / d) % h;
                let x = v / (d * h);
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    for ny in y.saturating_sub(1)..(y + 2).min(h) {
                        for nz in z.saturating_sub(1)..(z + 2).min(d) {
                            let n = (nx * h + ny) * d + nz;
                            if raw.data[n] == class && comp[n] == u32::MAX {
                                comp[n] = id;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
            if size > best_size {
                best_size = size;
                best_comp = id;
            }
        }
        if next_comp > 1 {
            for v in 0..out.len() {
                if raw.data[v] == class && comp[v] != best_comp {
                    out[v] = 0;
                }
            }
        }
    }
    LabelMap { shape: raw.shape, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn copy_paste_mask_block_counts() {
        // beta = 2/3 on 12^3: zero block 8x8x8.
        let m = gen_copy_paste_mask([12, 12, 12], 2.0 / 3.0, MaskMode::Random, &mut rng(1)).unwrap();
        assert_eq!(m.count_zeros(), 512);
        assert_eq!(m.count_ones(), 1216);
    }

    #[test]
    fn copy_paste_mask_full_extent_is_all_zero() {
        let m = gen_copy_paste_mask([4, 4, 4], 0.999, MaskMode::Random, &mut rng(2)).unwrap();
        assert_eq!(m.count_zeros(), 64);
    }

    #[test]
    fn copy_paste_mask_degenerate_shape_errors() {
        assert!(matches!(
            gen_copy_paste_mask([0, 4, 4], 0.5, MaskMode::Random, &mut rng(3)),
            Err(MaskError::DegenerateShape { .. })
        ));
    }

    #[test]
    fn copy_paste_mask_centered_is_deterministic() {
        let a = gen_copy_paste_mask([8, 8, 8], 0.5, MaskMode::Centered, &mut rng(4)).unwrap();
        let b = gen_copy_paste_mask([8, 8, 8], 0.5, MaskMode::Centered, &mut rng(99)).unwrap();
        assert_eq!(a, b);
        // 4^3 block at offset (2,2,2).
        assert_eq!(a.data()[(2 * 8 + 2) * 8 + 2], 0);
        assert_eq!(a.data()[0], 1);
    }

    #[test]
    fn copy_paste_block_position_roughly_uniform() {
        // 1000 draws on (8,8,1), beta = 1/2: corner uniform over a 5x5 grid.
        let mut counts = vec![0usize; 25];
        let mut r = rng(7);
        for _ in 0..1000 {
            let m = gen_copy_paste_mask([8, 8, 1], 0.5, MaskMode::Random, &mut r).unwrap();
            let first_zero = m.data().iter().position(|&v| v == 0).unwrap();
            let x = first_zero / 8;
            let y = first_zero % 8;
            counts[x * 5 + y] += 1;
        }
        // Chi-square against uniform: 24 dof, reject only below p = 0.01 (42.98).
        let expected = 1000.0 / 25.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 42.98, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn diff_mask_truth_table() {
        let a = LabelMap::new([4, 1, 1], vec![0, 1, 1, 0]);
        let b = LabelMap::new([4, 1, 1], vec![0, 1, 0, 1]);
        assert_eq!(diff_mask(&a, &b).unwrap().data(), &[0, 0, 1, 1]);
        assert_eq!(diff_mask(&a, &a).unwrap().count_ones(), 0);
    }

    #[test]
    fn diff_mask_multiclass_inequality() {
        let a = LabelMap::new([4, 1, 1], vec![0, 1, 2, 3]);
        let b = LabelMap::new([4, 1, 1], vec![0, 2, 2, 0]);
        assert_eq!(diff_mask(&a, &b).unwrap().data(), &[0, 1, 0, 1]);
    }

    #[test]
    fn diff_mask_is_symmetric() {
        let a = LabelMap::new([4, 1, 1], vec![0, 1, 2, 3]);
        let b = LabelMap::new([4, 1, 1], vec![3, 1, 0, 3]);
        assert_eq!(diff_mask(&a, &b).unwrap(), diff_mask(&b, &a).unwrap());
    }

    #[test]
    fn err_mask_examples() {
        let pred = LabelMap::new([2, 1, 1], vec![1, 0]);
        let label = LabelMap::new([2, 1, 1], vec![0, 0]);
        assert_eq!(err_mask(&pred, &label).unwrap().data(), &[1, 0]);
        assert_eq!(err_mask(&pred, &pred).unwrap().count_ones(), 0);
    }

    #[test]
    fn differr_mask_is_and() {
        let d = BinaryMask::new([3, 1, 1], vec![1, 1, 0]);
        let e = BinaryMask::new([3, 1, 1], vec![1, 0, 1]);
        assert_eq!(differr_mask(&d, &e).unwrap().data(), &[1, 0, 0]);
        let ones = BinaryMask::ones([3, 1, 1]);
        assert_eq!(differr_mask(&d, &ones).unwrap(), d);
        let zeros = BinaryMask::zeros([3, 1, 1]);
        assert_eq!(differr_mask(&zeros, &e).unwrap(), zeros);
    }

    #[test]
    fn differr_subset_of_both() {
        let mut r = rng(11);
        for _ in 0..20 {
            let d = BinaryMask::new([4, 4, 4], (0..64).map(|_| r.gen_range(0..2u8)).collect());
            let e = BinaryMask::new([4, 4, 4], (0..64).map(|_| r.gen_range(0..2u8)).collect());
            let de = differr_mask(&d, &e).unwrap();
            for v in 0..64 {
                assert!(de.data()[v] <= d.data()[v]);
                assert!(de.data()[v] <= e.data()[v]);
            }
        }
    }

    #[test]
    fn lcc_keeps_largest_component() {
        // Two class-1 components: 5 voxels at the origin corner, 3 at the far corner.
        let mut data = vec![0u8; 6 * 6 * 6];
        let idx = |x: usize, y: usize, z: usize| (x * 6 + y) * 6 + z;
        for &(x, y, z) in &[(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)] {
            data[idx(x, y, z)] = 1;
        }
        for &(x, y, z) in &[(5, 5, 5), (5, 5, 4), (4, 5, 5)] {
            data[idx(x, y, z)] = 1;
        }
        let raw = LabelMap::new([6, 6, 6], data);
        let refined = largest_connected_component(&raw, 2);
        assert_eq!(refined.data().iter().filter(|&&v| v == 1).count(), 5);
        assert_eq!(refined.data()[idx(5, 5, 5)], 0);
        assert_eq!(refined.data()[idx(0, 0, 0)], 1);
    }

    #[test]
    fn lcc_idempotent_and_trivial_cases() {
        let single = LabelMap::new([3, 3, 1], vec![0, 1, 0, 1, 1, 0, 0, 0, 0]);
        let once = largest_connected_component(&single, 2);
        assert_eq!(once, single);
        let twice = largest_connected_component(&once, 2);
        assert_eq!(twice, once);
        let empty = LabelMap::zeros([3, 3, 3]);
        assert_eq!(largest_connected_component(&empty, 2), empty);
    }

    #[test]
    fn label_from_probs_tie_breaks_low() {
        let probs = Tensor::<f64>::constant(&[1, 2, 1, 1, 1], vec![0.5, 0.5]).unwrap();
        let lm = LabelMap::from_probs(&probs);
        assert_eq!(lm.data(), &[0]);
    }
}
