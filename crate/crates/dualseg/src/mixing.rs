//! Bidirectional copy-paste: mixed images and labels from labeled/unlabeled
//! pairs under one shared mask. Mask voxel 1 selects the first source of the
//! `in` volume and the second source of the `out` volume.

use thiserror::Error;

use crate::maskops::{BinaryMask, LabelMap};
use crate::scalar::Scalar;
use crate::synthdata::Volume;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("{op}: shape {got:?} does not match mask shape {mask:?}")]
    ShapeMismatch { op: &'static str, got: [usize; 3], mask: [usize; 3] },
    #[error("mixing requires distinct source volumes ({role}: {index} repeated)")]
    DegeneratePair { role: &'static str, index: usize },
}

/// Source volume ids of one mixed pair; enforces i != j and p != q.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub labeled_i: usize,
    pub labeled_j: usize,
    pub unlabeled_p: usize,
    pub unlabeled_q: usize,
}

impl Provenance {
    pub fn new(labeled_i: usize, labeled_j: usize, unlabeled_p: usize, unlabeled_q: usize) -> Result<Self, MixError> {
        if labeled_i == labeled_j {
            return Err(MixError::DegeneratePair { role: "labeled", index: labeled_i });
        }
        if unlabeled_p == unlabeled_q {
            return Err(MixError::DegeneratePair { role: "unlabeled", index: unlabeled_p });
        }
        Ok(Provenance { labeled_i, labeled_j, unlabeled_p, unlabeled_q })
    }
}

/// One mixed training pair with its mask and provenance.
#[derive(Debug, Clone)]
pub struct MixedPair<T> {
    pub x_in: Volume<T>,
    pub x_out: Volume<T>,
    pub y_in: LabelMap,
    pub y_out: LabelMap,
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

fn check_shape(op: &'static str, got: [usize; 3], mask: [usize; 3]) -> Result<(), MixError> {
    if got != mask {
        return Err(MixError::ShapeMismatch { op, got, mask });
    }
    Ok(())
}

/// x_in = x_l_j (x) M + x_u_p (x) (1-M); x_out = x_u_q (x) M + x_l_i (x) (1-M).
pub fn mix_images<T: Scalar>(
    x_l_j: &Volume<T>,
    x_u_p: &Volume<T>,
    x_u_q: &Volume<T>,
    x_l_i: &Volume<T>,
    mask: &BinaryMask,
) -> Result<(Volume<T>, Volume<T>), MixError> {
    for (v, name) in [(x_l_j, "x_l_j"), (x_u_p, "x_u_p"), (x_u_q, "x_u_q"), (x_l_i, "x_l_i")] {
        let _ = name;
        check_shape("mix_images", v.shape(), mask.shape())?;
    }
    let select = |one: &Volume<T>, zero: &Volume<T>| -> Vec<T> {
        mask.data()
            .iter()
            .zip(one.data().iter().zip(zero.data()))
            .map(|(&m, (&a, &b))| if m == 1 { a } else { b })
            .collect()
    };
    let x_in = Volume::new(mask.shape(), select(x_l_j, x_u_p));
    let x_out = Volume::new(mask.shape(), select(x_u_q, x_l_i));
    Ok((x_in, x_out))
}

/// y_in = y_l_j (x) M + y~_u_p (x) (1-M); y_out = y~_u_q (x) M + y_l_i (x) (1-M).
/// Pseudo-label inputs are expected to be LCC-refined already.
pub fn mix_labels(
    y_l_j: &LabelMap,
    y_u_p: &LabelMap,
    y_u_q: &LabelMap,
    y_l_i: &LabelMap,
    mask: &BinaryMask,
) -> Result<(LabelMap, LabelMap), MixError> {
    for v in [y_l_j, y_u_p, y_u_q, y_l_i] {
        check_shape("mix_labels", v.shape(), mask.shape())?;
    }
    let select = |one: &LabelMap, zero: &LabelMap| -> Vec<u8> {
        mask.data()
            .iter()
            .zip(one.data().iter().zip(zero.data()))
            .map(|(&m, (&a, &b))| if m == 1 { a } else { b })
            .collect()
    };
    let y_in = LabelMap::new(mask.shape(), select(y_l_j, y_u_p));
    let y_out = LabelMap::new(mask.shape(), select(y_u_q, y_l_i));
    Ok((y_in, y_out))
}
