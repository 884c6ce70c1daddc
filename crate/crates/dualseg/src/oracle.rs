//! Independent brute-force reference implementations used to cross-check the
//! tensor, loss, mask, mixing and metric code. Everything here is written as
//! direct voxel loops over f64 data, deliberately sharing no code with the
//! implementations it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::Direction;
use crate::maskops::{BinaryMask, LabelMap};
use crate::tensor::Tensor;

/// Outcome of one randomized oracle suite.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite differences of `f` at `params`.
pub fn finite_diff_grad(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

fn gt_weight(mask_voxel: u8, alpha: f64, direction: Direction) -> f64 {
    let is_gt = match direction {
        Direction::In => mask_voxel == 1,
        Direction::Out => mask_voxel == 0,
    };
    if is_gt {
        1.0
    } else {
        alpha
    }
}

fn prob_at(probs: &Tensor<f64>, class: usize, voxel: usize) -> f64 {
    let s = probs.shape();
    let spatial = s[2] * s[3] * s[4];
    probs.data()[class * spatial + voxel]
}

/// Brute-force BCP seg loss: per-region mean cross-entropy plus
/// region-restricted soft Dice, weight 1 on the ground-truth region and
/// alpha on the pseudo-label region.
pub fn bcp_seg_loss_bruteforce(
    probs: &Tensor<f64>,
    label: &LabelMap,
    mask: &BinaryMask,
    alpha: f64,
    direction: Direction,
) -> f64 {
    let k = probs.shape()[1];
    let voxels = label.data().len();
    let region_loss = |in_region: &dyn Fn(usize) -> bool| -> f64 {
        let count = (0..voxels).filter(|&v| in_region(v)).count();
        if count == 0 {
            return 0.0;
        }
        let mut ce = 0.0;
        for v in 0..voxels {
            if in_region(v) {
                let p = prob_at(probs, usize::from(label.data()[v]), v);
                ce += -(p.max(1e-12)).ln();
            }
        }
        ce /= count as f64;
        let mut dice_sum = 0.0;
        for c in 0..k {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for v in 0..voxels {
                if in_region(v) {
                    let p = prob_at(probs, c, v);
                    let g = if usize::from(label.data()[v]) == c { 1.0 } else { 0.0 };
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
            dice_sum += (2.0 * inter + 1e-5) / (psum + gsum + 1e-5);
        }
        let dice_loss = 1.0 - dice_sum / k as f64;
        0.5 * ce + 0.5 * dice_loss
    };
    let gt_region = |v: usize| gt_weight(mask.data()[v], alpha, direction) == 1.0;
    let pseudo_region = |v: usize| !gt_region(v);
    region_loss(&gt_region) + alpha * region_loss(&pseudo_region)
}

/// Brute-force masked MSE: triple loop over voxels and classes.
pub fn masked_mse_bruteforce(
    probs: &Tensor<f64>,
    label: &LabelMap,
    mask: &BinaryMask,
    m_diff: &BinaryMask,
    alpha: f64,
    direction: Direction,
) -> f64 {
    let k = probs.shape()[1];
    let voxels = label.data().len();
    let mut total = 0.0;
    for v in 0..voxels {
        if m_diff.data()[v] == 0 {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..k {
            let target = if usize::from(label.data()[v]) == c { 1.0 } else { 0.0 };
            sq += (prob_at(probs, c, v) - target).powi(2);
        }
        total += sq * gt_weight(mask.data()[v], alpha, direction);
    }
    total / (m_diff.count_ones() as f64 + 1e-8)
}

/// Brute-force masked KL to uniform, in its direct sum form
/// sum_c (1/K) ln((1/K)/p_c) rather than the entropy rearrangement.
pub fn masked_kl_bruteforce(
    probs: &Tensor<f64>,
    mask: &BinaryMask,
    m_differr: &BinaryMask,
    alpha: f64,
    direction: Direction,
) -> f64 {
    let k = probs.shape()[1];
    let u = 1.0 / k as f64;
    let voxels = mask.data().len();
    let mut total = 0.0;
    for v in 0..voxels {
        if m_differr.data()[v] == 0 {
            continue;
        }
        let mut kl = 0.0;
        for c in 0..k {
            kl += u * (u / prob_at(probs, c, v).max(1e-12)).ln();
        }
        total += kl * gt_weight(mask.data()[v], alpha, direction);
    }
    total / (m_differr.count_ones() as f64 + 1e-8)
}

/// Brute-force image mixing in arithmetic form: m*a + (1-m)*b per voxel.
pub fn mix_images_bruteforce(
    x_l_j: &[f64],
    x_u_p: &[f64],
    x_u_q: &[f64],
    x_l_i: &[f64],
    mask: &[u8],
) -> (Vec<f64>, Vec<f64>) {
    let x_in = mask
        .iter()
        .enumerate()
        .map(|(v, &m)| f64::from(m) * x_l_j[v] + (1.0 - f64::from(m)) * x_u_p[v])
        .collect();
    let x_out = mask
        .iter()
        .enumerate()
        .map(|(v, &m)| f64::from(m) * x_u_q[v] + (1.0 - f64::from(m)) * x_l_i[v])
        .collect();
    (x_in, x_out)
}

/// Brute-force label mixing in arithmetic form over integers.
pub fn mix_labels_bruteforce(
    y_l_j: &[u8],
    y_u_p: &[u8],
    y_u_q: &[u8],
    y_l_i: &[u8],
    mask: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let y_in = mask
        .iter()
        .enumerate()
        .map(|(v, &m)| m * y_l_j[v] + (1 - m) * y_u_p[v])
        .collect();
    let y_out = mask
        .iter()
        .enumerate()
        .map(|(v, &m)| m * y_u_q[v] + (1 - m) * y_l_i[v])
        .collect();
    (y_in, y_out)
}

/// Union-find largest-connected-component oracle (26-connectivity),
/// independent of the flood-fill implementation.
pub fn lcc_bruteforce(raw: &LabelMap, classes: usize) -> LabelMap {
    let [w, h, d] = raw.shape();
    let n = raw.data().len();
    let mut out = raw.data().to_vec();

    fn find(parent: &mut Vec<usize>, mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }

    for class in 1..classes as u8 {
        let mut parent: Vec<usize> = (0..n).collect();
        for x in 0..w {
            for y in 0..h {
                for z in 0..d {
                    let v = (x * h + y) * d + z;
                    if raw.data()[v] != class {
                        continue;
                    }
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                            for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                                let u = (nx * h + ny) * d + nz;
                                if raw.data()[u] == class {
                                    let ru = find(&mut parent, u);
                                    let rv = find(&mut parent, v);
                                    if ru != rv {
                                        // Union by smaller root index keeps the
                                        // tie-break on the lexicographically
                                        // first voxel.
                                        let (lo, hi) = (ru.min(rv), ru.max(rv));
                                        parent[hi] = lo;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut sizes = std::collections::HashMap::new();
        for v in 0..n {
            if raw.data()[v] == class {
                *sizes.entry(find(&mut parent, v)).or_insert(0usize) += 1;
            }
        }
        if sizes.len() <= 1 {
            continue;
        }
        // Largest size; ties to the smallest root (earliest seed voxel).
        let mut best_root = usize::MAX;
        let mut best_size = 0usize;
        let mut roots: Vec<_> = sizes.into_iter().collect();
        roots.sort();
        for (root, size) in roots {
            if size > best_size {
                best_size = size;
                best_root = root;
            }
        }
        for v in 0..n {
            if raw.data()[v] == class && find(&mut parent, v) != best_root {
                out[v] = 0;
            }
        }
    }
    LabelMap::new(raw.shape(), out)
}

/// All-pairs surface distance oracle: (hd95, asd) or None when a surface is
/// empty.
pub fn surface_distances_bruteforce(pred: &LabelMap, truth: &LabelMap, class: u8) -> Option<(f64, f64)> {
    let collect_surface = |map: &LabelMap| -> Vec<(f64, f64, f64)> {
        let [w, h, d] = map.shape();
        let get = |x: isize, y: isize, z: isize| -> bool {
            x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < w
                && (y as usize) < h
                && (z as usize) < d
                && map.data()[(x as usize * h + y as usize) * d + z as usize] == class
        };
        let mut out = Vec::new();
        for x in 0..w {
            for y in 0..h {
                for z in 0..d {
                    if map.data()[(x * h + y) * d + z] != class {
                        continue;
                    }
                    let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                    if !(get(xi - 1, yi, zi)
                        && get(xi + 1, yi, zi)
                        && get(xi, yi - 1, zi)
                        && get(xi, yi + 1, zi)
                        && get(xi, yi, zi - 1)
                        && get(xi, yi, zi + 1))
                    {
                        out.push((x as f64, y as f64, z as f64));
                    }
                }
            }
        }
        out
    };
    let sp = collect_surface(pred);
    let st = collect_surface(truth);
    if sp.is_empty() || st.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64, f64)], to: &[(f64, f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|a| {
                let mut best = f64::INFINITY;
                for b in to {
                    let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) + (a.2 - b.2).powi(2)).sqrt();
                    if dist < best {
                        best = dist;
                    }
                }
                best
            })
            .collect()
    };
    let mut d1 = directed(&sp, &st);
    let mut d2 = directed(&st, &sp);
    d1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95 = |s: &[f64]| {
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1]
    };
    let hd95 = p95(&d1).max(p95(&d2));
    let asd = (d1.iter().sum::<f64>() + d2.iter().sum::<f64>()) / (d1.len() + d2.len()) as f64;
    Some((hd95, asd))
}

// ---------------------------------------------------------------------------
// Randomized suites shared by the acceptance tests and `oracle-check`.
// ---------------------------------------------------------------------------

pub fn random_probs(shape: [usize; 3], k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = k * shape.iter().product::<usize>();
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.5..2.5)).collect();
    Tensor::constant(&[1, k, shape[0], shape[1], shape[2]], logits)
        .unwrap()
        .softmax_channels()
        .unwrap()
}

pub fn random_labels(shape: [usize; 3], k: u8, rng: &mut ChaCha8Rng) -> LabelMap {
    let n = shape.iter().product();
    LabelMap::new(shape, (0..n).map(|_| rng.gen_range(0..k)).collect())
}

pub fn random_mask(shape: [usize; 3], rng: &mut ChaCha8Rng) -> BinaryMask {
    let n = shape.iter().product();
    BinaryMask::new(shape, (0..n).map(|_| rng.gen_range(0..2u8)).collect())
}

/// Loss implementations vs. brute-force voxel loops (tolerance 1e-9).
pub fn loss_oracle_suite(cases: usize, seed: u64) -> OracleOutcome {
    use crate::losses::{bcp_seg_loss, masked_kl_uniform_loss, masked_mse_loss};
    use crate::maskops::{diff_mask, differr_mask, err_mask};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [4, 4, 4];
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = if case % 2 == 0 { 2 } else { 4 };
        let probs = random_probs(shape, k, &mut rng);
        let label = random_labels(shape, k as u8, &mut rng);
        let mask = random_mask(shape, &mut rng);
        let pred = LabelMap::from_probs(&probs);
        let other = random_labels(shape, k as u8, &mut rng);
        let m_diff = diff_mask(&pred, &other).unwrap();
        let m_err = err_mask(&pred, &label).unwrap();
        let m_differr = differr_mask(&m_diff, &m_err).unwrap();
        let alpha = rng.gen_range(0.0..1.0);
        let dir = if rng.gen_bool(0.5) { Direction::In } else { Direction::Out };

        let seg = bcp_seg_loss(&probs, &label, &mask, alpha, dir).unwrap().item();
        let seg_bf = bcp_seg_loss_bruteforce(&probs, &label, &mask, alpha, dir);
        let mse = masked_mse_loss(&probs, &label, &mask, &m_diff, alpha, dir).unwrap().item();
        let mse_bf = masked_mse_bruteforce(&probs, &label, &mask, &m_diff, alpha, dir);
        let kl = masked_kl_uniform_loss(&probs, &mask, &m_differr, alpha, dir).unwrap().item();
        let kl_bf = masked_kl_bruteforce(&probs, &mask, &m_differr, alpha, dir);
        for (a, b) in [(seg, seg_bf), (mse, mse_bf), (kl, kl_bf)] {
            let err = (a - b).abs();
            worst = worst.max(err);
            if err > 1e-9 {
                failures += 1;
            }
        }
    }
    OracleOutcome { name: "loss-vs-bruteforce", cases: cases * 3, failures, worst }
}

/// Mask algebra: XOR symmetry, differr subset, copy-paste zero counts, LCC
/// vs. union-find and idempotence.
pub fn mask_algebra_suite(cases: usize, seed: u64) -> OracleOutcome {
    use crate::maskops::{
        diff_mask, differr_mask, err_mask, gen_copy_paste_mask, largest_connected_component, MaskMode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut total = 0;
    for _ in 0..cases {
        let shape = [
            rng.gen_range(3..10usize),
            rng.gen_range(3..10usize),
            rng.gen_range(1..8usize),
        ];
        let k = *[2usize, 3, 4].get(rng.gen_range(0..3)).unwrap();
        let a = random_labels(shape, k as u8, &mut rng);
        let b = random_labels(shape, k as u8, &mut rng);
        let d = diff_mask(&a, &b).unwrap();
        total += 1;
        if d != diff_mask(&b, &a).unwrap() {
            failures += 1;
        }
        let e = err_mask(&a, &b).unwrap();
        let de = differr_mask(&d, &e).unwrap();
        total += 1;
        if !de.data().iter().zip(d.data().iter().zip(e.data())).all(|(&x, (&y, &z))| x <= y && x <= z) {
            failures += 1;
        }
        // copy-paste zero count
        let beta = rng.gen_range(0.2..0.95);
        let expected: usize = shape.iter().map(|&dim| (beta * dim as f64).round().max(1.0) as usize).product();
        if shape.iter().all(|&dim| {
            let ext = (beta * dim as f64).round() as usize;
            ext >= 1 && ext <= dim
        }) {
            let m = gen_copy_paste_mask(shape, beta, MaskMode::Random, &mut rng).unwrap();
            total += 1;
            if m.count_zeros() != expected {
                failures += 1;
            }
        }
        // LCC vs. union-find, and idempotence
        let raw = random_labels(shape, k as u8, &mut rng);
        let refined = largest_connected_component(&raw, k);
        total += 2;
        if refined != lcc_bruteforce(&raw, k) {
            failures += 1;
        }
        if largest_connected_component(&refined, k) != refined {
            failures += 1;
        }
    }
    OracleOutcome { name: "mask-algebra", cases: total, failures, worst: 0.0 }
}

/// Mixing vs. arithmetic brute force plus partition/reconstruction checks.
pub fn mixing_suite(cases: usize, seed: u64) -> OracleOutcome {
    use crate::mixing::{mix_images, mix_labels};
    use crate::synthdata::Volume;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [4, 4, 4];
    let n: usize = shape.iter().product();
    let mut failures = 0;
    let mut total = 0;
    for _ in 0..cases {
        let vols: Vec<Volume<f64>> = (0..4)
            .map(|_| Volume::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let labs: Vec<LabelMap> = (0..4).map(|_| random_labels(shape, 3, &mut rng)).collect();
        let mask = random_mask(shape, &mut rng);
        let (x_in, x_out) = mix_images(&vols[0], &vols[1], &vols[2], &vols[3], &mask).unwrap();
        let (bf_in, bf_out) =
            mix_images_bruteforce(vols[0].data(), vols[1].data(), vols[2].data(), vols[3].data(), mask.data());
        total += 2;
        if x_in.data() != &bf_in[..] {
            failures += 1;
        }
        if x_out.data() != &bf_out[..] {
            failures += 1;
        }
        let (y_in, y_out) = mix_labels(&labs[0], &labs[1], &labs[2], &labs[3], &mask).unwrap();
        let (bf_yin, bf_yout) =
            mix_labels_bruteforce(labs[0].data(), labs[1].data(), labs[2].data(), labs[3].data(), mask.data());
        total += 2;
        if y_in.data() != &bf_yin[..] {
            failures += 1;
        }
        if y_out.data() != &bf_yout[..] {
            failures += 1;
        }
        // reconstruction: mix(M) + mix(1-M) == a + b
        let (x_in_c, _) = mix_images(&vols[0], &vols[1], &vols[2], &vols[3], &mask.complement()).unwrap();
        total += 1;
        let ok = (0..n).all(|v| {
            let s = x_in.data()[v] + x_in_c.data()[v];
            (s - (vols[0].data()[v] + vols[1].data()[v])).abs() < 1e-15
        });
        if !ok {
            failures += 1;
        }
    }
    OracleOutcome { name: "mixing", cases: total, failures, worst: 0.0 }
}

/// Metric implementations vs. all-pairs brute force (tolerance 1e-9).
pub fn metrics_suite(cases: usize, seed: u64) -> OracleOutcome {
    use crate::metrics::{overlap_metrics, surface_distances};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [8, 8, 8];
    let mut failures = 0;
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let pred = random_labels(shape, 2, &mut rng);
        let truth = random_labels(shape, 2, &mut rng);
        let (dice, jac) = overlap_metrics(&pred, &truth, 1).unwrap();
        total += 1;
        if (dice - 2.0 * jac / (1.0 + jac)).abs() > 1e-9 || jac > dice + 1e-12 {
            failures += 1;
        }
        match (surface_distances(&pred, &truth, 1), surface_distances_bruteforce(&pred, &truth, 1)) {
            (Ok((h, a)), Some((hb, ab))) => {
                total += 2;
                worst = worst.max((h - hb).abs()).max((a - ab).abs());
                if (h - hb).abs() > 1e-9 {
                    failures += 1;
                }
                if (a - ab).abs() > 1e-9 {
                    failures += 1;
                }
            }
            (Err(_), None) => {
                total += 1;
            }
            _ => {
                total += 1;
                failures += 1;
            }
        }
    }
    OracleOutcome { name: "metrics", cases: total, failures, worst }
}

/// Gradient check for every op kind against central finite differences.
pub fn gradcheck_op_suite(cases_per_op: usize, seed: u64) -> OracleOutcome {
    use crate::tensor::Tape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut total = 0;
    let mut worst: f64 = 0.0;

    // Each entry builds a scalar from one leaf and returns both, exercising
    // one op kind per builder.
    type Builder = fn(&Tape<f64>, &[f64], &[usize]) -> (Tensor<f64>, Tensor<f64>);
    let ops: Vec<(&str, Builder, Vec<usize>, (f64, f64))> = vec![
        ("add", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let c = Tensor::constant(s, (0..p.len()).map(|i| 0.3 * i as f64 + 0.1).collect()).unwrap();
            (x.add(&c).unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("sub", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let c = Tensor::constant(s, (0..p.len()).map(|i| 0.2 * i as f64 - 0.4).collect()).unwrap();
            (x.sub(&c).unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("mul", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let c = Tensor::constant(s, (0..p.len()).map(|i| i as f64 - 2.5).collect()).unwrap();
            (x.mul(&c).unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("div", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let c = Tensor::constant(s, (0..p.len()).map(|i| 1.5 + 0.25 * i as f64).collect()).unwrap();
            (x.div(&c).unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (0.5, 2.0)),
        ("neg", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.neg().unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("relu", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.relu().unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![8], (0.2, 1.5)),
        ("log", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.log_clamped(1e-12).unwrap().sum_all().unwrap(), x)
        }, vec![6], (0.3, 2.0)),
        ("square", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("scale", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.scale(1.7).unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("add_scalar", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.add_scalar(0.9).unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("sum_all", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.square().unwrap().sum_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("mean_all", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.square().unwrap().mean_all().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("sum_channels", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.sum_channels().unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![1, 3, 2, 2, 1], (-1.0, 1.0)),
        ("softmax", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            (x.softmax_channels().unwrap().square().unwrap().sum_all().unwrap(), x)
        }, vec![1, 3, 2, 2, 1], (-2.0, 2.0)),
        ("mul_sum", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let c = Tensor::constant(s, (0..p.len()).map(|i| (i % 3) as f64 - 1.0).collect()).unwrap();
            (x.mul_sum(&c).unwrap().square().unwrap(), x)
        }, vec![6], (-1.0, 1.0)),
        ("ce_region_sum", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let probs = x.softmax_channels().unwrap();
            let spatial: usize = s[2..].iter().product();
            let mut oh = vec![0.0; s.iter().product()];
            for v in 0..spatial {
                oh[(v % s[1]) * spatial + v] = 1.0;
            }
            let onehot = Tensor::constant(s, oh).unwrap();
            let region =
                Tensor::constant(&[1, 1, 2, 2, 1], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
            (probs.ce_region_sum(&onehot, &region, 1e-12).unwrap(), x)
        }, vec![1, 3, 2, 2, 1], (-2.0, 2.0)),
        ("mse_masked_sum", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let probs = x.softmax_channels().unwrap();
            let spatial: usize = s[2..].iter().product();
            let mut oh = vec![0.0; s.iter().product()];
            for v in 0..spatial {
                oh[(v % s[1]) * spatial + v] = 1.0;
            }
            let onehot = Tensor::constant(s, oh).unwrap();
            let weight =
                Tensor::constant(&[1, 1, 2, 2, 1], vec![0.5, 1.5, 2.0, 0.25]).unwrap();
            let gate = Tensor::constant(&[1, 1, 2, 2, 1], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
            (probs.mse_masked_sum(&onehot, &weight, &gate).unwrap(), x)
        }, vec![1, 3, 2, 2, 1], (-2.0, 2.0)),
        ("kl_masked_sum", |t, p, s| {
            let x = t.leaf(s, p.to_vec()).unwrap();
            let probs = x.softmax_channels().unwrap();
            let weight =
                Tensor::constant(&[1, 1, 2, 2, 1], vec![0.75, 1.25, 0.5, 2.0]).unwrap();
            let gate = Tensor::constant(&[1, 1, 2, 2, 1], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
            let k = s[1] as f64;
            (probs.kl_masked_sum(&weight, &gate, 1e-12, -1.0 / k, -k.ln()).unwrap(), x)
        }, vec![1, 3, 2, 2, 1], (-2.0, 2.0)),
        ("bias_add", |t, p, s| {
            // leaf is the bias; input is a fixed constant
            let x = Tensor::constant(s, vec![0.3; s.iter().product()]).unwrap();
            let b = t.leaf(&[s[1]], p.to_vec()).unwrap();
            (x.bias_add(&b).unwrap().square().unwrap().sum_all().unwrap(), b)
        }, vec![1, 3, 2, 2, 1], (-1.0, 1.0)),
    ];

    for (name, build, shape, range) in &ops {
        let nparams = if *name == "bias_add" { shape[1] } else { shape.iter().product() };
        let _ = name;
        for _ in 0..cases_per_op {
            let params: Vec<f64> = (0..nparams).map(|_| rng.gen_range(range.0..range.1)).collect();
            let tape = Tape::new();
            let (loss, leaf) = build(&tape, &params, shape);
            loss.backward().unwrap();
            let auto = leaf.grad().unwrap();
            let numeric = finite_diff_grad(&params, 1e-5, |p| {
                let t = Tape::new();
                build(&t, p, shape).0.item()
            });
            for (a, n) in auto.iter().zip(&numeric) {
                total += 1;
                let err = rel_err(*a, *n, 1e-6);
                worst = worst.max(err);
                if err > 1e-3 {
                    failures += 1;
                }
            }
        }
    }

    // conv: check gradients w.r.t. both weight and input.
    for _ in 0..cases_per_op {
        let xs = [1usize, 2, 3, 3, 2];
        let ws = [2usize, 2, 3, 3, 1];
        let nx: usize = xs.iter().product();
        let nw: usize = ws.iter().product();
        let xv: Vec<f64> = (0..nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..nw).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let forward = |xp: &[f64], wp: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let tape = crate::tensor::Tape::new();
            let x = tape.leaf(&xs, xp.to_vec()).unwrap();
            let w = tape.leaf(&ws, wp.to_vec()).unwrap();
            let loss = x.conv(&w).unwrap().square().unwrap().sum_all().unwrap();
            let value = loss.item();
            loss.backward().unwrap();
            (value, Some((x.grad().unwrap(), w.grad().unwrap())))
        };
        let (_, grads) = forward(&xv, &wv);
        let (gx, gw) = grads.unwrap();
        let ngx = finite_diff_grad(&xv, 1e-5, |p| forward(p, &wv).0);
        let ngw = finite_diff_grad(&wv, 1e-5, |p| forward(&xv, p).0);
        for (a, n) in gx.iter().zip(&ngx).chain(gw.iter().zip(&ngw)) {
            total += 1;
            let err = rel_err(*a, *n, 1e-6);
            worst = worst.max(err);
            if err > 1e-3 {
                failures += 1;
            }
        }
    }

    OracleOutcome { name: "gradcheck-ops", cases: total, failures, worst }
}
