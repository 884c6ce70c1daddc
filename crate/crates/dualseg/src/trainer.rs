//! Two-phase training: labeled-only pretraining with copy-paste mixing,
//! then semi-supervised steps with teacher pseudo-labels, dual students,
//! discrepancy-gated correction losses and an EMA teacher.

use std::fs;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    bcp_seg_loss, masked_kl_uniform_loss, masked_mse_loss, total_loss, Direction, LossError,
};
use crate::maskops::{
    diff_mask, differr_mask, err_mask, gen_copy_paste_mask, largest_connected_component,
    BinaryMask, LabelMap, MaskError, MaskMode,
};
use crate::metrics::{evaluate_prediction, evaluate_students, ClassMetrics, MetricsError, MetricsReport};
use crate::mixing::{mix_images, mix_labels, MixError, Provenance};
use crate::nets::{load_checkpoint, save_checkpoint, Arch, NetConfig, NetError, SegNet, TeacherNet};
use crate::scalar::Scalar;
use crate::synthdata::{Split, Volume, VolumeRecord};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("need at least 2 labeled volumes, got {0}")]
    TooFewLabeled(usize),
    #[error("need at least 2 unlabeled volumes, got {0}")]
    TooFewUnlabeled(usize),
    #[error("dataset has no test volumes")]
    NoTestVolumes,
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("optimizer state file corrupt: {0}")]
    BadOptimizerState(String),
    #[error("gradient missing for a parameter leaf (layer {layer})")]
    MissingGradient { layer: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full training configuration. Unknown keys in a config file are rejected;
/// missing keys take these defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the pseudo-label region of the seg loss.
    pub alpha: f64,
    /// Copy-paste block fraction per axis.
    pub beta: f64,
    /// Weight on the masked-MSE correction term.
    pub gamma: f64,
    /// Weight on the masked-KL correction term.
    pub mu: f64,
    pub learning_rate: f64,
    pub ema_momentum: f64,
    pub pretrain_iters: u64,
    pub ssl_iters: u64,
    /// Volumes per step, half labeled and half unlabeled; each group of four
    /// (two labeled, two unlabeled) yields one mixed (x_in, x_out) pair.
    pub batch_size: usize,
    pub classes: usize,
    pub seed: u64,
    /// "random" or "centered" placement of the copy-paste block.
    pub mask_mode: String,
    /// Evaluate the test split every this many SSL iterations (0 = never).
    pub log_every: u64,
    pub net_width: usize,
    pub net_depth: usize,
    pub net_kernel: [usize; 3],
    /// When false, the correction losses apply everywhere instead of only on
    /// student-disagreement voxels (ablation switch).
    pub diff_gating: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 2.0 / 3.0,
            gamma: 0.3,
            mu: 0.1,
            learning_rate: 0.001,
            ema_momentum: 0.99,
            pretrain_iters: 300,
            ssl_iters: 1500,
            batch_size: 4,
            classes: 2,
            seed: 0,
            mask_mode: "random".to_string(),
            log_every: 250,
            net_width: 4,
            net_depth: 3,
            net_kernel: [3, 3, 3],
            diff_gating: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Fully-resolved echo, including defaulted fields.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0 < self.beta && self.beta < 1.0) {
            return Err(TrainError::Config(format!("beta must be in (0,1), got {}", self.beta)));
        }
        if !(0.0 < self.ema_momentum && self.ema_momentum < 1.0) {
            return Err(TrainError::Config(format!(
                "ema_momentum must be in (0,1), got {}",
                self.ema_momentum
            )));
        }
        if self.batch_size % 2 != 0 {
            return Err(TrainError::Config(format!(
                "batch_size must be even, got {}",
                self.batch_size
            )));
        }
        if self.batch_size % 4 != 0 || self.batch_size == 0 {
            return Err(TrainError::Config(format!(
                "batch_size must be a positive multiple of 4 \
                 (each group of 2 labeled + 2 unlabeled volumes forms one mixed pair), got {}",
                self.batch_size
            )));
        }
        if self.alpha < 0.0 || self.gamma < 0.0 || self.mu < 0.0 {
            return Err(TrainError::Config("alpha, gamma, mu must be non-negative".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.classes < 2 {
            return Err(TrainError::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.net_depth < 2 {
            return Err(TrainError::Config(format!("net_depth must be >= 2, got {}", self.net_depth)));
        }
        if self.net_width == 0 {
            return Err(TrainError::Config("net_width must be positive".into()));
        }
        if self.net_kernel.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(TrainError::Config(format!(
                "net_kernel extents must be odd and positive, got {:?}",
                self.net_kernel
            )));
        }
        self.mask_mode()?;
        Ok(())
    }

    pub fn mask_mode(&self) -> Result<MaskMode, TrainError> {
        match self.mask_mode.as_str() {
            "random" => Ok(MaskMode::Random),
            "centered" => Ok(MaskMode::Centered),
            other => Err(TrainError::Config(format!(
                "mask_mode must be \"random\" or \"centered\", got \"{other}\""
            ))),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 1,
            width: self.net_width,
            depth: self.net_depth,
            classes: self.classes,
            kernel: self.net_kernel,
        }
    }

    fn groups(&self) -> usize {
        self.batch_size / 4
    }
}

// ---------------------------------------------------------------------------
// Deterministic per-iteration randomness
// ---------------------------------------------------------------------------

/// Named RNG streams; every random draw in training flows from
/// (seed, stream, iteration), so resuming at iteration k replays exactly.
pub mod streams {
    pub const INIT_A: u64 = 1;
    pub const INIT_B: u64 = 2;
    pub const PRETRAIN_A: u64 = 3;
    pub const PRETRAIN_B: u64 = 4;
    pub const SSL_SAMPLE: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn derived_seed(seed: u64, stream: u64, iter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream.wrapping_mul(0xA24BAED4963EE407)) ^ iter)
}

pub fn stream_rng(seed: u64, stream: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derived_seed(seed, stream, iter))
}

fn distinct_pair<R: Rng>(rng: &mut R, n: usize) -> (usize, usize) {
    debug_assert!(n >= 2);
    let first = rng.gen_range(0..n);
    let mut second = rng.gen_range(0..n - 1);
    if second >= first {
        second += 1;
    }
    (first, second)
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// Dataset views by split. Unlabeled volumes carry no labels by construction.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub labeled: Vec<(Volume<T>, LabelMap)>,
    pub unlabeled: Vec<Volume<T>>,
    pub test: Vec<(Volume<T>, LabelMap)>,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_records(records: &[VolumeRecord<T>]) -> Result<Self, TrainError> {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut test = Vec::new();
        let mut shape = None;
        let mut classes = 2;
        for rec in records {
            shape.get_or_insert(rec.image.shape());
            classes = classes.max(rec.classes);
            match rec.split {
                Split::Labeled => {
                    let label = rec.label().ok_or_else(|| {
                        TrainError::Config(format!("labeled record {} has no label", rec.id))
                    })?;
                    labeled.push((rec.image.clone(), label.clone()));
                }
                Split::Unlabeled => unlabeled.push(rec.image.clone()),
                Split::Test => {
                    let label = rec.label().ok_or_else(|| {
                        TrainError::Config(format!("test record {} has no label", rec.id))
                    })?;
                    test.push((rec.image.clone(), label.clone()));
                }
            }
        }
        if labeled.len() < 2 {
            return Err(TrainError::TooFewLabeled(labeled.len()));
        }
        let shape = shape.ok_or_else(|| TrainError::Config("empty dataset".into()))?;
        Ok(TrainData { labeled, unlabeled, test, shape, classes })
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with the usual defaults (0.9, 0.999, 1e-8). Moments are stored per
/// parameter leaf in layer order: weight then bias.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, net: &SegNet<T>) -> Self {
        let mut m = Vec::new();
        for layer in &net.layers {
            m.push(vec![T::zero(); layer.weight.len()]);
            m.push(vec![T::zero(); layer.bias.len()]);
        }
        let v = m.clone();
        Adam {
            lr,
            beta1: T::from_f64c(0.9),
            beta2: T::from_f64c(0.999),
            eps: T::from_f64c(1e-8),
            t: 0,
            m,
            v,
        }
    }

    /// One update. `grads` follows the moment layout: per layer, weight grad
    /// then bias grad.
    pub fn step(&mut self, net: &mut SegNet<T>, grads: &[Vec<T>]) -> Result<(), TrainError> {
        assert_eq!(grads.len(), self.m.len(), "gradient layout mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let mut slot = 0;
        for layer in &mut net.layers {
            for param in [&mut layer.weight, &mut layer.bias] {
                let g = &grads[slot];
                let m = &mut self.m[slot];
                let v = &mut self.v[slot];
                assert_eq!(g.len(), param.len(), "gradient length mismatch");
                for i in 0..param.len() {
                    m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    param[i] = param[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
                slot += 1;
            }
        }
        Ok(())
    }

    fn moments_flat(&self) -> (Vec<f64>, Vec<f64>) {
        let flat = |vs: &Vec<Vec<T>>| vs.iter().flatten().map(|x| x.to_f64c()).collect();
        (flat(&self.m), flat(&self.v))
    }

    fn restore_moments(&mut self, t: u64, m: &[f64], v: &[f64]) -> Result<(), TrainError> {
        let expected: usize = self.m.iter().map(Vec::len).sum();
        if m.len() != expected || v.len() != expected {
            return Err(TrainError::BadOptimizerState(format!(
                "expected {} moment values, got {}/{}",
                expected,
                m.len(),
                v.len()
            )));
        }
        self.t = t;
        let mut offset = 0;
        for (ms, vs) in self.m.iter_mut().zip(self.v.iter_mut()) {
            for i in 0..ms.len() {
                ms[i] = T::from_f64c(m[offset + i]);
                vs[i] = T::from_f64c(v[offset + i]);
            }
            offset += ms.len();
        }
        Ok(())
    }
}

fn collect_grads<T: Scalar>(
    params: &crate::nets::TapedParams<T>,
) -> Result<Vec<Vec<T>>, TrainError> {
    let mut grads = Vec::with_capacity(params.layers.len() * 2);
    for (layer, (w, b)) in params.layers.iter().enumerate() {
        grads.push(w.grad().ok_or(TrainError::MissingGradient { layer })?);
        grads.push(b.grad().ok_or(TrainError::MissingGradient { layer })?);
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Train state and loss records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub student_a: SegNet<T>,
    pub student_b: SegNet<T>,
    pub teacher: TeacherNet<T>,
    pub adam_a: Adam<T>,
    pub adam_b: Adam<T>,
    pub iteration: u64,
}

impl<T: Scalar> TrainState<T> {
    /// SSL state from two pretrained students; the teacher starts as a copy
    /// of student A and fresh optimizer moments are allocated.
    pub fn from_pretrained(student_a: SegNet<T>, student_b: SegNet<T>, config: &TrainConfig) -> Self {
        let lr = T::from_f64c(config.learning_rate);
        let adam_a = Adam::new(lr, &student_a);
        let adam_b = Adam::new(lr, &student_b);
        let teacher = TeacherNet::from_student(&student_a);
        TrainState { student_a, student_b, teacher, adam_a, adam_b, iteration: 0 }
    }
}

/// The six per-direction loss terms plus their weighted total, per student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub seg_in: f64,
    pub seg_out: f64,
    pub mse_in: f64,
    pub mse_out: f64,
    pub kl_in: f64,
    pub kl_out: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SslStepRecord {
    pub iteration: u64,
    pub student_a: LossTerms,
    pub student_b: LossTerms,
}

pub const LOSS_CSV_HEADER: &str =
    "iteration,student,seg_in,seg_out,mse_in,mse_out,kl_in,kl_out,total";

impl SslStepRecord {
    pub fn csv_rows(&self) -> String {
        let row = |name: &str, t: &LossTerms| {
            format!(
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.iteration, name, t.seg_in, t.seg_out, t.mse_in, t.mse_out, t.kl_in, t.kl_out,
                t.total
            )
        };
        format!("{}{}", row("a", &self.student_a), row("b", &self.student_b))
    }
}

// ---------------------------------------------------------------------------
// Step input sampling (shared by ssl_step, the baseline path and dry runs)
// ---------------------------------------------------------------------------

/// One mixed (x_in, x_out) group with its mask and mixed labels. Labels for
/// the unlabeled sources are the teacher's LCC-refined pseudo-labels.
#[derive(Debug, Clone)]
pub struct StepInputs<T> {
    pub provenance: Provenance,
    pub mask: BinaryMask,
    pub x_in: Volume<T>,
    pub x_out: Volume<T>,
    pub y_in: LabelMap,
    pub y_out: LabelMap,
}

/// Samples the iteration's groups: distinct labeled pair (j, i), distinct
/// unlabeled pair (p, q), a fresh mask, teacher pseudo-labels, then mixing.
pub fn sample_step_inputs<T: Scalar>(
    teacher: &TeacherNet<T>,
    data: &TrainData<T>,
    config: &TrainConfig,
    iter: u64,
) -> Result<Vec<StepInputs<T>>, TrainError> {
    if data.labeled.len() < 2 {
        return Err(TrainError::TooFewLabeled(data.labeled.len()));
    }
    if data.unlabeled.len() < 2 {
        return Err(TrainError::TooFewUnlabeled(data.unlabeled.len()));
    }
    let mut rng = stream_rng(config.seed, streams::SSL_SAMPLE, iter);
    let mode = config.mask_mode()?;
    let mut groups = Vec::with_capacity(config.groups());
    for _ in 0..config.groups() {
        let (j, i) = distinct_pair(&mut rng, data.labeled.len());
        let (p, q) = distinct_pair(&mut rng, data.unlabeled.len());
        let provenance = Provenance::new(i, j, p, q)?;
        let mask = gen_copy_paste_mask(data.shape, config.beta, mode, &mut rng)?;
        // Teacher pseudo-labels on the raw unlabeled volumes, refined to the
        // largest connected component before any mixing.
        let pseudo = |idx: usize| -> Result<LabelMap, TrainError> {
            let probs = teacher.predict(&data.unlabeled[idx])?;
            Ok(largest_connected_component(&LabelMap::from_probs(&probs), data.classes))
        };
        let pl_p = pseudo(p)?;
        let pl_q = pseudo(q)?;
        let (x_in, x_out) = mix_images(
            &data.labeled[j].0,
            &data.unlabeled[p],
            &data.unlabeled[q],
            &data.labeled[i].0,
            &mask,
        )?;
        let (y_in, y_out) = mix_labels(&data.labeled[j].1, &pl_p, &pl_q, &data.labeled[i].1, &mask)?;
        groups.push(StepInputs { provenance, mask, x_in, x_out, y_in, y_out });
    }
    Ok(groups)
}

fn volume_tensor<T: Scalar>(vol: &Volume<T>) -> Result<Tensor<T>, TrainError> {
    let [w, h, d] = vol.shape();
    Ok(Tensor::constant(&[1, 1, w, h, d], vol.data().to_vec())?)
}

struct StudentPass<T: Scalar> {
    params: crate::nets::TapedParams<T>,
    /// (probs_in, probs_out) per group.
    probs: Vec<(Tensor<T>, Tensor<T>)>,
}

fn forward_groups<T: Scalar>(
    net: &SegNet<T>,
    tape: &Tape<T>,
    inputs: &[StepInputs<T>],
) -> Result<StudentPass<T>, TrainError> {
    let params = net.leaves(tape)?;
    let mut probs = Vec::with_capacity(inputs.len());
    for group in inputs {
        let p_in = net.forward(&params, &volume_tensor(&group.x_in)?)?;
        let p_out = net.forward(&params, &volume_tensor(&group.x_out)?)?;
        probs.push((p_in, p_out));
    }
    Ok(StudentPass { params, probs })
}

fn mean_of<T: Scalar>(terms: Vec<Tensor<T>>) -> Result<Tensor<T>, TrainError> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one group");
    for t in it {
        acc = acc.add(&t)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(n).unwrap())?)
}

fn finite_or_abort<T: Scalar>(
    value: T,
    iteration: u64,
    term: &str,
    inputs: &[StepInputs<T>],
) -> Result<(), TrainError> {
    if value.to_f64c().is_finite() {
        return Ok(());
    }
    let mask_stats: Vec<String> = inputs
        .iter()
        .map(|g| format!("mask zeros={} ones={}", g.mask.count_zeros(), g.mask.count_ones()))
        .collect();
    Err(TrainError::NonFiniteLoss {
        iteration,
        detail: format!("term {} = {:?}; {}", term, value, mask_stats.join("; ")),
    })
}

// ---------------------------------------------------------------------------
// SSL step
// ---------------------------------------------------------------------------

/// One semi-supervised step: teacher pseudo-labels, copy-paste mixing, both
/// students forward on (x_in, x_out), disagreement masks, the full loss, one
/// Adam step per student, then the EMA teacher update from student A.
pub fn ssl_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    config: &TrainConfig,
) -> Result<SslStepRecord, TrainError> {
    let iteration = state.iteration;
    let inputs = sample_step_inputs(&state.teacher, data, config, iteration)?;

    let tape_a = Tape::new();
    let tape_b = Tape::new();
    let pass_a = forward_groups(&state.student_a, &tape_a, &inputs)?;
    let pass_b = forward_groups(&state.student_b, &tape_b, &inputs)?;

    // Disagreement gates from the two students' hard predictions; with gating
    // disabled the correction losses apply everywhere.
    let shape = data.shape;
    let mut gates = Vec::with_capacity(inputs.len());
    for g in 0..inputs.len() {
        let gate = |pa: &Tensor<T>, pb: &Tensor<T>| -> Result<BinaryMask, TrainError> {
            if config.diff_gating {
                Ok(diff_mask(&LabelMap::from_probs(pa), &LabelMap::from_probs(pb))?)
            } else {
                Ok(BinaryMask::ones(shape))
            }
        };
        let m_diff_in = gate(&pass_a.probs[g].0, &pass_b.probs[g].0)?;
        let m_diff_out = gate(&pass_a.probs[g].1, &pass_b.probs[g].1)?;
        gates.push((m_diff_in, m_diff_out));
    }

    let alpha = T::from_f64c(config.alpha);
    let gamma = T::from_f64c(config.gamma);
    let mu = T::from_f64c(config.mu);

    let mut records = [None, None];
    let mut grads = Vec::with_capacity(2);
    for (slot, pass) in [(0usize, &pass_a), (1usize, &pass_b)] {
        let mut seg_in = Vec::new();
        let mut seg_out = Vec::new();
        let mut mse_in = Vec::new();
        let mut mse_out = Vec::new();
        let mut kl_in = Vec::new();
        let mut kl_out = Vec::new();
        for (g, group) in inputs.iter().enumerate() {
            let (probs_in, probs_out) = &pass.probs[g];
            let (m_diff_in, m_diff_out) = &gates[g];
            for (probs, y, m_diff, dir, seg, mse, kl) in [
                (probs_in, &group.y_in, m_diff_in, Direction::In, &mut seg_in, &mut mse_in, &mut kl_in),
                (probs_out, &group.y_out, m_diff_out, Direction::Out, &mut seg_out, &mut mse_out, &mut kl_out),
            ] {
                let pred = LabelMap::from_probs(probs);
                let m_err = err_mask(&pred, y)?;
                let m_differr = differr_mask(m_diff, &m_err)?;
                seg.push(bcp_seg_loss(probs, y, &group.mask, alpha, dir)?);
                mse.push(masked_mse_loss(probs, y, &group.mask, m_diff, alpha, dir)?);
                kl.push(masked_kl_uniform_loss(probs, &group.mask, &m_differr, alpha, dir)?);
            }
        }
        let seg_in = mean_of(seg_in)?;
        let seg_out = mean_of(seg_out)?;
        let mse_in = mean_of(mse_in)?;
        let mse_out = mean_of(mse_out)?;
        let kl_in = mean_of(kl_in)?;
        let kl_out = mean_of(kl_out)?;
        let total = total_loss(&seg_in, &seg_out, &mse_in, &mse_out, &kl_in, &kl_out, gamma, mu)?;
        finite_or_abort(total.item(), iteration, if slot == 0 { "total_a" } else { "total_b" }, &inputs)?;
        total.backward()?;
        grads.push(collect_grads(&pass.params)?);
        records[slot] = Some(LossTerms {
            seg_in: seg_in.item().to_f64c(),
            seg_out: seg_out.item().to_f64c(),
            mse_in: mse_in.item().to_f64c(),
            mse_out: mse_out.item().to_f64c(),
            kl_in: kl_in.item().to_f64c(),
            kl_out: kl_out.item().to_f64c(),
            total: total.item().to_f64c(),
        });
    }

    state.adam_a.step(&mut state.student_a, &grads[0])?;
    state.adam_b.step(&mut state.student_b, &grads[1])?;
    state.teacher.ema_update(&state.student_a, T::from_f64c(config.ema_momentum))?;
    state.iteration += 1;

    Ok(SslStepRecord {
        iteration,
        student_a: records[0].take().unwrap(),
        student_b: records[1].take().unwrap(),
    })
}

/// Reference step computing only the mixed segmentation losses (no correction
/// terms). Kept as a separate code path so the full step can be checked to
/// reduce to it bitwise when gamma = mu = 0.
pub fn bcp_baseline_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    config: &TrainConfig,
) -> Result<SslStepRecord, TrainError> {
    let iteration = state.iteration;
    let inputs = sample_step_inputs(&state.teacher, data, config, iteration)?;
    let alpha = T::from_f64c(config.alpha);

    let tape_a = Tape::new();
    let tape_b = Tape::new();
    let pass_a = forward_groups(&state.student_a, &tape_a, &inputs)?;
    let pass_b = forward_groups(&state.student_b, &tape_b, &inputs)?;

    let mut records = [None, None];
    let mut grads = Vec::with_capacity(2);
    for (slot, pass) in [(0usize, &pass_a), (1usize, &pass_b)] {
        let mut seg_in = Vec::new();
        let mut seg_out = Vec::new();
        for (g, group) in inputs.iter().enumerate() {
            let (probs_in, probs_out) = &pass.probs[g];
            seg_in.push(bcp_seg_loss(probs_in, &group.y_in, &group.mask, alpha, Direction::In)?);
            seg_out.push(bcp_seg_loss(probs_out, &group.y_out, &group.mask, alpha, Direction::Out)?);
        }
        let seg_in = mean_of(seg_in)?;
        let seg_out = mean_of(seg_out)?;
        let total = seg_in.add(&seg_out)?;
        finite_or_abort(total.item(), iteration, "total", &inputs)?;
        total.backward()?;
        grads.push(collect_grads(&pass.params)?);
        records[slot] = Some(LossTerms {
            seg_in: seg_in.item().to_f64c(),
            seg_out: seg_out.item().to_f64c(),
            mse_in: 0.0,
            mse_out: 0.0,
            kl_in: 0.0,
            kl_out: 0.0,
            total: total.item().to_f64c(),
        });
    }

    state.adam_a.step(&mut state.student_a, &grads[0])?;
    state.adam_b.step(&mut state.student_b, &grads[1])?;
    state.teacher.ema_update(&state.student_a, T::from_f64c(config.ema_momentum))?;
    state.iteration += 1;

    Ok(SslStepRecord {
        iteration,
        student_a: records[0].take().unwrap(),
        student_b: records[1].take().unwrap(),
    })
}

/// Per-voxel prediction entropy averaged over gate voxels; None when the
/// gate is empty.
pub fn mean_entropy_on<T: Scalar>(probs: &Tensor<T>, gate: &BinaryMask) -> Option<f64> {
    let k = probs.shape()[1];
    let voxels: usize = probs.shape()[2..].iter().product();
    let data = probs.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for v in 0..voxels {
        if gate.data()[v] == 0 {
            continue;
        }
        let mut h = 0.0;
        for c in 0..k {
            let p = data[c * voxels + v].to_f64c().max(1e-12);
            h -= p * p.ln();
        }
        total += h;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Labeled-only pretraining of one student: copy-paste mixing between two
/// labeled pairs, seg loss with weight 1 on both regions (alpha = 1), Adam.
pub fn pretrain_student<T: Scalar>(
    arch: Arch,
    data: &TrainData<T>,
    config: &TrainConfig,
) -> Result<SegNet<T>, TrainError> {
    if data.labeled.len() < 2 {
        return Err(TrainError::TooFewLabeled(data.labeled.len()));
    }
    let (init_stream, step_stream) = match arch {
        Arch::Plain => (streams::INIT_A, streams::PRETRAIN_A),
        Arch::Residual => (streams::INIT_B, streams::PRETRAIN_B),
    };
    let mut net = SegNet::init(arch, config.net_config(), derived_seed(config.seed, init_stream, 0))?;
    let mut adam = Adam::new(T::from_f64c(config.learning_rate), &net);
    let mode = config.mask_mode()?;
    let one = T::one();
    for iter in 0..config.pretrain_iters {
        let mut rng = stream_rng(config.seed, step_stream, iter);
        let mut inputs = Vec::with_capacity(config.groups());
        for _ in 0..config.groups() {
            let (j, i) = distinct_pair(&mut rng, data.labeled.len());
            let (p, q) = distinct_pair(&mut rng, data.labeled.len());
            let mask = gen_copy_paste_mask(data.shape, config.beta, mode, &mut rng)?;
            let (x_in, x_out) = mix_images(
                &data.labeled[j].0,
                &data.labeled[p].0,
                &data.labeled[q].0,
                &data.labeled[i].0,
                &mask,
            )?;
            let (y_in, y_out) =
                mix_labels(&data.labeled[j].1, &data.labeled[p].1, &data.labeled[q].1, &data.labeled[i].1, &mask)?;
            inputs.push(StepInputs {
                provenance: Provenance::new(i, j, p, q)?,
                mask,
                x_in,
                x_out,
                y_in,
                y_out,
            });
        }
        let tape = Tape::new();
        let pass = forward_groups(&net, &tape, &inputs)?;
        let mut seg_in = Vec::new();
        let mut seg_out = Vec::new();
        for (g, group) in inputs.iter().enumerate() {
            seg_in.push(bcp_seg_loss(&pass.probs[g].0, &group.y_in, &group.mask, one, Direction::In)?);
            seg_out.push(bcp_seg_loss(&pass.probs[g].1, &group.y_out, &group.mask, one, Direction::Out)?);
        }
        let total = mean_of(seg_in)?.add(&mean_of(seg_out)?)?;
        finite_or_abort(total.item(), iter, "pretrain", &inputs)?;
        total.backward()?;
        let grads = collect_grads(&pass.params)?;
        adam.step(&mut net, &grads)?;
    }
    Ok(net)
}

/// Pretrains both students (plain for A, residual for B).
pub fn pretrain<T: Scalar>(
    data: &TrainData<T>,
    config: &TrainConfig,
) -> Result<(SegNet<T>, SegNet<T>), TrainError> {
    let a = pretrain_student(Arch::Plain, data, config)?;
    let b = pretrain_student(Arch::Residual, data, config)?;
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// SSL driver and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SslRun {
    pub loss_log: Vec<SslStepRecord>,
    /// (iteration, test-split report) every `log_every` iterations plus at
    /// the final iteration.
    pub metric_log: Vec<(u64, MetricsReport)>,
}

/// Mean test-split report for the averaged students. Per-class metrics are
/// averaged across volumes; surface distances average over the volumes where
/// both surfaces exist.
pub fn evaluate_on_test<T: Scalar>(
    student_a: &SegNet<T>,
    student_b: &SegNet<T>,
    data: &TrainData<T>,
    classes: usize,
) -> Result<MetricsReport, TrainError> {
    if data.test.is_empty() {
        return Err(TrainError::NoTestVolumes);
    }
    let mut reports = Vec::with_capacity(data.test.len());
    for (vol, truth) in &data.test {
        let pred = evaluate_students(student_a, student_b, vol)?;
        reports.push(evaluate_prediction(&pred, truth, classes)?);
    }
    Ok(mean_reports(&reports))
}

pub fn mean_reports(reports: &[MetricsReport]) -> MetricsReport {
    assert!(!reports.is_empty());
    let n_classes = reports[0].per_class.len();
    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            reports.iter().map(|r| f(&r.per_class[c])).sum::<f64>() / reports.len() as f64
        };
        let mean_opt = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| f(&r.per_class[c])).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        classes.push(ClassMetrics {
            class: reports[0].per_class[c].class,
            dice: mean(&|m| m.dice),
            jaccard: mean(&|m| m.jaccard),
            hd95: mean_opt(&|m| m.hd95),
            asd: mean_opt(&|m| m.asd),
        });
    }
    MetricsReport { per_class: classes }
}

/// Runs `iters` SSL steps from the current state, logging losses every step
/// and test metrics every `log_every` iterations and at the end.
pub fn train_ssl<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    config: &TrainConfig,
    iters: u64,
) -> Result<SslRun, TrainError> {
    let mut run = SslRun { loss_log: Vec::new(), metric_log: Vec::new() };
    let end = state.iteration + iters;
    while state.iteration < end {
        let record = ssl_step(state, data, config)?;
        run.loss_log.push(record);
        let due = config.log_every > 0 && state.iteration % config.log_every == 0;
        if (due || state.iteration == end) && !data.test.is_empty() {
            let report = evaluate_on_test(&state.student_a, &state.student_b, data, data.classes)?;
            run.metric_log.push((state.iteration, report));
        }
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// State persistence (checkpoints + optimizer sidecar)
// ---------------------------------------------------------------------------

const OPT_MAGIC: &str = "DSEGOPT 1";

pub fn save_state<T: Scalar>(dir: &Path, state: &TrainState<T>) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_checkpoint(&dir.join("student_a.ckpt"), &state.student_a, state.iteration)?;
    save_checkpoint(&dir.join("student_b.ckpt"), &state.student_b, state.iteration)?;
    save_checkpoint(&dir.join("teacher.ckpt"), state.teacher.net(), state.iteration)?;

    let (ma, va) = state.adam_a.moments_flat();
    let (mb, vb) = state.adam_b.moments_flat();
    let path = dir.join("optimizer.bin");
    let mut out = Vec::new();
    out.extend_from_slice(
        format!(
            "{}\nt_a {}\nt_b {}\ncount_a {}\ncount_b {}\n\n",
            OPT_MAGIC,
            state.adam_a.t,
            state.adam_b.t,
            ma.len(),
            mb.len()
        )
        .as_bytes(),
    );
    for block in [&ma, &va, &mb, &vb] {
        for x in block.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn load_state<T: Scalar>(dir: &Path, config: &TrainConfig) -> Result<TrainState<T>, TrainError> {
    let (student_a, iter_a) = load_checkpoint::<T>(&dir.join("student_a.ckpt"))?;
    let (student_b, iter_b) = load_checkpoint::<T>(&dir.join("student_b.ckpt"))?;
    let (teacher_net, _) = load_checkpoint::<T>(&dir.join("teacher.ckpt"))?;
    if iter_a != iter_b {
        return Err(TrainError::BadOptimizerState(format!(
            "checkpoint iterations disagree: student_a at {iter_a}, student_b at {iter_b}"
        )));
    }

    let path = dir.join("optimizer.bin");
    let mut file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(&path, e))?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| TrainError::BadOptimizerState("missing header terminator".into()))?
        + 2;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| TrainError::BadOptimizerState("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(OPT_MAGIC) {
        return Err(TrainError::BadOptimizerState("bad magic".into()));
    }
    let mut field = |name: &str| -> Result<u64, TrainError> {
        let line = lines
            .next()
            .ok_or_else(|| TrainError::BadOptimizerState(format!("missing field {name}")))?;
        let value = line
            .strip_prefix(name)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| TrainError::BadOptimizerState(format!("bad field line {line:?}")))?;
        Ok(value)
    };
    let t_a = field("t_a")?;
    let t_b = field("t_b")?;
    let count_a = field("count_a")? as usize;
    let count_b = field("count_b")? as usize;
    let expected = header_end + 8 * 2 * (count_a + count_b);
    if bytes.len() != expected {
        return Err(TrainError::BadOptimizerState(format!(
            "expected {} bytes, got {}",
            expected,
            bytes.len()
        )));
    }
    let mut offset = header_end;
    let mut take = |count: usize| -> Vec<f64> {
        let vals = bytes[offset..offset + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * count;
        vals
    };
    let ma = take(count_a);
    let va = take(count_a);
    let mb = take(count_b);
    let vb = take(count_b);

    let lr = T::from_f64c(config.learning_rate);
    let mut adam_a = Adam::new(lr, &student_a);
    let mut adam_b = Adam::new(lr, &student_b);
    adam_a.restore_moments(t_a, &ma, &va)?;
    adam_b.restore_moments(t_b, &mb, &vb)?;

    Ok(TrainState {
        student_a,
        student_b,
        teacher: TeacherNet::from_student(&teacher_net),
        adam_a,
        adam_b,
        iteration: iter_a,
    })
}

/// Writes the fully-resolved config plus a run id derived from it, so every
/// run directory is self-describing.
pub fn write_run_manifest(dir: &Path, config: &TrainConfig) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let echo = config.to_toml_string();
    let run_id = splitmix64(echo.bytes().fold(config.seed, |acc, b| {
        splitmix64(acc ^ u64::from(b))
    }));
    let path = dir.join("run.toml");
    let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write!(file, "# run id: {run_id:016x}\n{echo}").map_err(|e| io_err(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec};

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_labeled: 2,
            m_unlabeled: 2,
            test_count: 1,
            shape: [8, 8, 8],
            classes: 2,
            ellipsoids_per_class: (1, 1),
            radius: (2.0, 3.0),
            contrast: 0.8,
            noise_sigma: 0.05,
            seed,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            pretrain_iters: 2,
            ssl_iters: 2,
            net_width: 2,
            net_depth: 2,
            net_kernel: [3, 3, 1],
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> TrainData<f64> {
        let records = generate::<f64>(&tiny_spec(7)).unwrap();
        TrainData::from_records(&records).unwrap()
    }

    #[test]
    fn config_roundtrip_and_unknown_key() {
        let config = TrainConfig::default();
        let echo = config.to_toml_string();
        let back = TrainConfig::from_toml_str(&echo).unwrap();
        assert_eq!(back, config);
        let err = TrainConfig::from_toml_str("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn config_rejects_bad_values() {
        for (key, value) in [
            ("beta", "1.5"),
            ("ema_momentum", "0.0"),
            ("batch_size", "3"),
            ("batch_size", "6"),
            ("mask_mode", "\"diagonal\""),
            ("net_kernel", "[2, 3, 3]"),
            ("classes", "1"),
        ] {
            let text = format!("{key} = {value}");
            assert!(TrainConfig::from_toml_str(&text).is_err(), "{text} should fail");
        }
    }

    #[test]
    fn zero_pretrain_iters_returns_initialized_net() {
        let data = tiny_data();
        let config = TrainConfig { pretrain_iters: 0, ..tiny_config() };
        let net = pretrain_student::<f64>(Arch::Plain, &data, &config).unwrap();
        let fresh = SegNet::<f64>::init(
            Arch::Plain,
            config.net_config(),
            derived_seed(config.seed, streams::INIT_A, 0),
        )
        .unwrap();
        for (a, b) in net.layers.iter().zip(&fresh.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let data = tiny_data();
        let config = tiny_config();
        let n1 = pretrain_student::<f64>(Arch::Residual, &data, &config).unwrap();
        let n2 = pretrain_student::<f64>(Arch::Residual, &data, &config).unwrap();
        for (a, b) in n1.layers.iter().zip(&n2.layers) {
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn pretrain_rejects_single_labeled_volume() {
        let mut data = tiny_data();
        data.labeled.truncate(1);
        let err = pretrain_student::<f64>(Arch::Plain, &data, &tiny_config()).unwrap_err();
        assert!(matches!(err, TrainError::TooFewLabeled(1)));
    }

    #[test]
    fn ssl_step_records_consistent_total() {
        let data = tiny_data();
        let config = tiny_config();
        let (a, b) = pretrain(&data, &config).unwrap();
        let mut state = TrainState::from_pretrained(a, b, &config);
        let rec = ssl_step(&mut state, &data, &config).unwrap();
        for t in [rec.student_a, rec.student_b] {
            let recombined = t.seg_in
                + t.seg_out
                + config.gamma * (t.mse_in + t.mse_out)
                + config.mu * (t.kl_in + t.kl_out);
            assert!((t.total - recombined).abs() < 1e-12, "decomposition violated");
        }
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn identical_students_collapse_the_gates() {
        // Weight-copied plain nets predict identically, so M_diff is empty and
        // both correction terms vanish.
        let data = tiny_data();
        let config = tiny_config();
        let net = pretrain_student::<f64>(Arch::Plain, &data, &config).unwrap();
        let mut state = TrainState::from_pretrained(net.clone(), net, &config);
        let rec = ssl_step(&mut state, &data, &config).unwrap();
        for t in [rec.student_a, rec.student_b] {
            assert_eq!(t.mse_in, 0.0);
            assert_eq!(t.mse_out, 0.0);
            assert_eq!(t.kl_in, 0.0);
            assert_eq!(t.kl_out, 0.0);
            assert!((t.total - (t.seg_in + t.seg_out)).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_mu_zero_matches_baseline_path_bitwise() {
        let data = tiny_data();
        let config = TrainConfig { gamma: 0.0, mu: 0.0, ..tiny_config() };
        let (a, b) = pretrain(&data, &config).unwrap();
        let mut full = TrainState::from_pretrained(a.clone(), b.clone(), &config);
        let mut base = TrainState::from_pretrained(a, b, &config);
        for _ in 0..3 {
            ssl_step(&mut full, &data, &config).unwrap();
            bcp_baseline_step(&mut base, &data, &config).unwrap();
        }
        for (x, y) in full.student_a.layers.iter().zip(&base.student_a.layers) {
            assert_eq!(x.weight, y.weight);
            assert_eq!(x.bias, y.bias);
        }
        for (x, y) in full.student_b.layers.iter().zip(&base.student_b.layers) {
            assert_eq!(x.weight, y.weight);
            assert_eq!(x.bias, y.bias);
        }
    }

    #[test]
    fn save_load_roundtrip_resumes_exactly() {
        let data = tiny_data();
        let config = TrainConfig { ssl_iters: 4, ..tiny_config() };
        let (a, b) = pretrain(&data, &config).unwrap();
        let mut straight = TrainState::from_pretrained(a.clone(), b.clone(), &config);
        train_ssl(&mut straight, &data, &config, 4).unwrap();

        let mut resumed = TrainState::from_pretrained(a, b, &config);
        train_ssl(&mut resumed, &data, &config, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_state(dir.path(), &resumed).unwrap();
        let mut resumed = load_state::<f64>(dir.path(), &config).unwrap();
        assert_eq!(resumed.iteration, 2);
        train_ssl(&mut resumed, &data, &config, 2).unwrap();

        for (x, y) in straight.student_a.layers.iter().zip(&resumed.student_a.layers) {
            assert_eq!(x.weight, y.weight);
            assert_eq!(x.bias, y.bias);
        }
        for (x, y) in straight.teacher.net().layers.iter().zip(&resumed.teacher.net().layers) {
            assert_eq!(x.weight, y.weight);
        }
    }

    #[test]
    fn sampling_is_reproducible_per_iteration() {
        let data = tiny_data();
        let config = tiny_config();
        let net = pretrain_student::<f64>(Arch::Plain, &data, &config).unwrap();
        let teacher = TeacherNet::from_student(&net);
        let s1 = sample_step_inputs(&teacher, &data, &config, 5).unwrap();
        let s2 = sample_step_inputs(&teacher, &data, &config, 5).unwrap();
        assert_eq!(s1[0].mask.data(), s2[0].mask.data());
        assert_eq!(s1[0].y_in.data(), s2[0].y_in.data());
        let s3 = sample_step_inputs(&teacher, &data, &config, 6).unwrap();
        assert!(s1[0].mask.data() != s3[0].mask.data() || s1[0].x_in.data() != s3[0].x_in.data());
    }

    #[test]
    fn mean_entropy_gate_handling() {
        let probs = Tensor::constant(&[1, 2, 1, 1, 2], vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        let all = BinaryMask::ones([1, 1, 2]);
        let none = BinaryMask::zeros([1, 1, 2]);
        let h = mean_entropy_on(&probs, &all).unwrap();
        let expected = (2.0f64.ln() + -(0.9f64.ln()) * 0.9 - 0.1 * 0.1f64.ln()) / 2.0;
        assert!((h - expected).abs() < 1e-12);
        assert!(mean_entropy_on(&probs, &none).is_none());
    }
}
