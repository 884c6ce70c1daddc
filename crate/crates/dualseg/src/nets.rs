//! Tiny segmentation networks: a plain conv stack (student A), a residual
//! variant (student B), and the non-trainable EMA teacher that mirrors
//! student A.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::synthdata::Volume;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class count must be >= 2, got {0}")]
    BadClassCount(usize),
    #[error("network depth must be >= 2, got {0}")]
    BadDepth(usize),
    #[error("teacher/student architecture mismatch: {detail}")]
    ArchMismatch { detail: String },
    #[error("EMA momentum must lie in (0, 1), got {0}")]
    BadMomentum(f64),
    #[error("{path}: bad checkpoint magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: malformed checkpoint header: {line}")]
    BadHeader { path: PathBuf, line: String },
    #[error("{path}: truncated checkpoint: expected {expected} parameter bytes, got {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Plain,
    Residual,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Plain => "plain",
            Arch::Residual => "residual",
        }
    }

    fn parse(s: &str) -> Option<Arch> {
        match s {
            "plain" => Some(Arch::Plain),
            "residual" => Some(Arch::Residual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub kernel: [usize; 3],
}

impl NetConfig {
    pub fn desk_default(classes: usize) -> Self {
        NetConfig { in_channels: 1, width: 8, depth: 4, classes, kernel: [3, 3, 3] }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: [usize; 3],
}

impl<T: Scalar> ConvLayer<T> {
    fn weight_shape(&self) -> [usize; 5] {
        [self.out_c, self.in_c, self.kernel[0], self.kernel[1], self.kernel[2]]
    }
}

/// Channel ladder: in -> width -> ... -> width -> classes, `depth` convs.
/// Plain applies relu(conv) per layer; Residual adds identity skips over the
/// interior equal-width layers, the sole structural difference.
#[derive(Debug, Clone)]
pub struct SegNet<T> {
    pub arch: Arch,
    pub layers: Vec<ConvLayer<T>>,
    pub config: NetConfig,
}

/// Parameter leaves registered on a tape for one training step.
pub struct TapedParams<T: Scalar> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> SegNet<T> {
    /// Deterministic initialization: fan-in scaled zero-mean weights
    /// (He et al. scaling), zero biases.
    pub fn init(arch: Arch, config: NetConfig, seed: u64) -> Result<Self, NetError> {
        if config.classes < 2 {
            return Err(NetError::BadClassCount(config.classes));
        }
        if config.depth < 2 {
            return Err(NetError::BadDepth(config.depth));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let in_c = if l == 0 { config.in_channels } else { config.width };
            let out_c = if l == config.depth - 1 { config.classes } else { config.width };
            let taps: usize = config.kernel.iter().product();
            let fan_in = in_c * taps;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = (0..out_c * in_c * taps)
                .map(|_| {
                    // Box-Muller keeps the draw sequence explicit and portable.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    T::from_f64c(z * std)
                })
                .collect();
            layers.push(ConvLayer {
                weight,
                bias: vec![T::zero(); out_c],
                in_c,
                out_c,
                kernel: config.kernel,
            });
        }
        Ok(SegNet { arch, layers, config })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &Tape<T>) -> Result<TapedParams<T>, NetError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(&layer.weight_shape(), layer.weight.clone())?;
            let b = tape.leaf(&[layer.out_c], layer.bias.clone())?;
            layers.push((w, b));
        }
        Ok(TapedParams { layers })
    }

    fn forward_impl(&self, params: Option<&TapedParams<T>>, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = match params {
                Some(p) => p.layers[l].clone(),
                None => (
                    Tensor::constant(&layer.weight_shape(), layer.weight.clone())?,
                    Tensor::constant(&[layer.out_c], layer.bias.clone())?,
                ),
            };
            let z = h.conv(&w)?.bias_add(&b)?;
            if l == last {
                return Ok(z.softmax_channels()?);
            }
            let skip = self.arch == Arch::Residual && l > 0 && layer.in_c == layer.out_c;
            h = if skip { z.add(&h)?.relu()? } else { z.relu()? };
        }
        unreachable!("depth >= 2 guarantees a last layer")
    }

    /// Taped forward for training; gradients flow to `params` and to `x` if taped.
    pub fn forward(&self, params: &TapedParams<T>, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.forward_impl(Some(params), x)
    }

    /// Gradient-free forward on a raw volume; builds no tape.
    pub fn predict(&self, vol: &Volume<T>) -> Result<Tensor<T>, NetError> {
        let [w, h, d] = vol.shape();
        let x = Tensor::constant(&[1, 1, w, h, d], vol.data().to_vec())?;
        self.forward_impl(None, &x)
    }
}

/// Non-trainable EMA mirror of student A.
#[derive(Debug, Clone)]
pub struct TeacherNet<T> {
    net: SegNet<T>,
}

impl<T: Scalar> TeacherNet<T> {
    /// Teacher starts as a copy of (pretrained) student A.
    pub fn from_student(student_a: &SegNet<T>) -> Self {
        TeacherNet { net: student_a.clone() }
    }

    pub fn predict(&self, vol: &Volume<T>) -> Result<Tensor<T>, NetError> {
        self.net.predict(vol)
    }

    pub fn net(&self) -> &SegNet<T> {
        &self.net
    }

    /// theta_t <- m * theta_t + (1 - m) * theta_s, exactly, per parameter.
    pub fn ema_update(&mut self, student_a: &SegNet<T>, momentum: T) -> Result<(), NetError> {
        let m64 = momentum.to_f64c();
        if !(0.0 < m64 && m64 < 1.0) {
            return Err(NetError::BadMomentum(m64));
        }
        if self.net.layers.len() != student_a.layers.len() {
            return Err(NetError::ArchMismatch {
                detail: format!(
                    "teacher has {} layers, student A has {}",
                    self.net.layers.len(),
                    student_a.layers.len()
                ),
            });
        }
        for (t, s) in self.net.layers.iter_mut().zip(&student_a.layers) {
            if t.weight.len() != s.weight.len() || t.bias.len() != s.bias.len() {
                return Err(NetError::ArchMismatch {
                    detail: format!(
                        "layer shape mismatch: teacher {}x{}, student {}x{}",
                        t.out_c, t.in_c, s.out_c, s.in_c
                    ),
                });
            }
            let one_minus = T::one() - momentum;
            for (tv, sv) in t.weight.iter_mut().zip(&s.weight) {
                *tv = momentum * *tv + one_minus * *sv;
            }
            for (tv, sv) in t.bias.iter_mut().zip(&s.bias) {
                *tv = momentum * *tv + one_minus * *sv;
            }
        }
        Ok(())
    }
}

const CKPT_MAGIC: &str = "DSEGCKPT";

/// Writes a checkpoint: structured-text header, then all parameters as
/// little-endian f64 in layer order (weight, then bias). Bit-exact round trip.
pub fn save_checkpoint<T: Scalar>(path: &Path, net: &SegNet<T>, iteration: u64) -> Result<(), NetError> {
    let io = |source| NetError::Io { path: path.to_path_buf(), source };
    let c = &net.config;
    let mut out = Vec::new();
    write!(
        out,
        "{CKPT_MAGIC} 1\narch {}\nclasses {}\nin_channels {}\nwidth {}\ndepth {}\nkernel {} {} {}\niteration {}\n\n",
        net.arch.as_str(),
        c.classes,
        c.in_channels,
        c.width,
        c.depth,
        c.kernel[0],
        c.kernel[1],
        c.kernel[2],
        iteration,
    )
    .map_err(io)?;
    for layer in &net.layers {
        for &v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_f64c().to_le_bytes());
        }
    }
    fs::write(path, out).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SegNet<T>, u64), NetError> {
    let io = |source| NetError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let bad = |line: &str| NetError::BadHeader { path: path.to_path_buf(), line: line.to_string() };

    let mut offset = 0usize;
    let mut lines = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .ok_or_else(|| bad("unterminated header"))?;
        let line = String::from_utf8_lossy(&bytes[offset..end]).into_owned();
        offset = end + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line);
    }
    let first = lines.first().ok_or_else(|| bad("empty header"))?;
    if first != &format!("{CKPT_MAGIC} 1") {
        return Err(NetError::BadMagic { path: path.to_path_buf() });
    }
    let mut arch = None;
    let mut classes = None;
    let mut in_channels = None;
    let mut width = None;
    let mut depth = None;
    let mut kernel = None;
    let mut iteration = 0u64;
    for line in &lines[1..] {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
        match key {
            "arch" => arch = Arch::parse(rest),
            "classes" => classes = rest.parse().ok(),
            "in_channels" => in_channels = rest.parse().ok(),
            "width" => width = rest.parse().ok(),
            "depth" => depth = rest.parse().ok(),
            "kernel" => {
                let k: Vec<usize> = rest.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                if k.len() == 3 {
                    kernel = Some([k[0], k[1], k[2]]);
                }
            }
            "iteration" => iteration = rest.parse().map_err(|_| bad(line))?,
            _ => return Err(bad(line)),
        }
    }
    let config = NetConfig {
        in_channels: in_channels.ok_or_else(|| bad("missing in_channels"))?,
        width: width.ok_or_else(|| bad("missing width"))?,
        depth: depth.ok_or_else(|| bad("missing depth"))?,
        classes: classes.ok_or_else(|| bad("missing classes"))?,
        kernel: kernel.ok_or_else(|| bad("missing kernel"))?,
    };
    let arch = arch.ok_or_else(|| bad("missing arch"))?;
    let mut net = SegNet::init(arch, config, 0)?;
    let expected: usize = net.parameter_count() * 8;
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(NetError::Truncated { path: path.to_path_buf(), expected, actual });
    }
    let mut cursor = offset;
    for layer in &mut net.layers {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            let b: [u8; 8] = bytes[cursor..cursor + 8].try_into().unwrap();
            *v = T::from_f64c(f64::from_le_bytes(b));
            cursor += 8;
        }
    }
    Ok((net, iteration))
}
