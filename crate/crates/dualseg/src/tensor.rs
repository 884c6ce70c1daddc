//! Minimal N-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! Layout convention for structured ops (conv, softmax, bias, channel sums):
//! axes are (batch, channel, W, H, D), row-major with D fastest. Elementwise
//! ops accept any shape. A tape lives for one training step; `backward` may
//! run once per tape.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected} values for shape {shape:?}, got {got}")]
    LengthMismatch { op: &'static str, shape: Vec<usize>, expected: usize, got: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: needs at least {needed} axes, got shape {shape:?}")]
    RankMismatch { op: &'static str, needed: usize, shape: Vec<usize> },
    #[error("{op}: operands recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("backward requires a scalar, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; reset with a fresh tape")]
    BackwardTwice,
    #[error("backward called on a tensor that is not on a tape")]
    BackwardOffTape,
    #[error("{op}: zero extent in shape {shape:?}")]
    ZeroExtent { op: &'static str, shape: Vec<usize> },
    #[error("conv: kernel extents must be odd, got {kernel:?}")]
    EvenKernel { kernel: Vec<usize> },
}

pub type Result<V> = std::result::Result<V, TensorError>;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    LogClamped(T),
    Square,
    Scale(T),
    AddScalar(T),
    SumAll,
    MeanAll,
    SumChannels,
    SoftmaxChannels,
    Conv,
    BiasAdd,
    MulSum,
    CeRegionSum(T),
    MseMaskedSum,
    KlMaskedSum { clamp: T, factor: T },
}

#[derive(Debug, Clone)]
struct Input<T> {
    node: Option<usize>,
    data: Rc<Vec<T>>,
    shape: Vec<usize>,
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Input<T>>,
    value: Rc<Vec<T>>,
    shape: Vec<usize>,
}

#[derive(Debug)]
struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

/// Records operations for one forward/backward cycle.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// A differentiable leaf (parameter or input requiring gradients).
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        check_len("leaf", shape, data.len())?;
        check_finite("leaf", &data)?;
        let value = Rc::new(data);
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Rc::clone(&value),
            shape: shape.to_vec(),
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data: value,
            tape: Some((self.clone(), id)),
        })
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable value array, optionally recorded on a tape.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    tape: Option<(Tape<T>, usize)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::ZeroExtent { op, shape: shape.to_vec() });
    }
    let expected = numel(shape);
    if expected != len {
        return Err(TensorError::LengthMismatch { op, shape: shape.to_vec(), expected, got: len });
    }
    Ok(())
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    // Branch-free accumulation so the scan vectorizes; the index is only
    // recovered on the failure path.
    let all_finite = data.iter().fold(true, |ok, v| ok & v.is_finite());
    if all_finite {
        return Ok(());
    }
    let index = data.iter().position(|v| !v.is_finite()).unwrap_or(0);
    Err(TensorError::NonFinite { op, index })
}

impl<T: Scalar> Tensor<T> {
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("constant", shape, data.len())?;
        check_finite("constant", &data)?;
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), tape: None })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![value]), tape: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![T::zero(); numel(shape)]), tape: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_taped(&self) -> bool {
        self.tape.is_some()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Gradient populated by a prior `backward`, if this tensor is a taped node.
    pub fn grad(&self) -> Option<Vec<T>> {
        let (tape, id) = self.tape.as_ref()?;
        tape.inner.borrow().grads[*id].clone()
    }

    fn input_ref(&self) -> Input<T> {
        Input {
            node: self.tape.as_ref().map(|(_, id)| *id),
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
        }
    }

    fn result_of(
        &self,
        op_name: &'static str,
        op: Op<T>,
        inputs: Vec<&Tensor<T>>,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<Tensor<T>> {
        check_finite(op_name, &value)?;
        let mut tape: Option<Tape<T>> = None;
        for t in &inputs {
            if let Some((tp, _)) = &t.tape {
                match &tape {
                    None => tape = Some(tp.clone()),
                    Some(existing) if existing.same_as(tp) => {}
                    Some(_) => return Err(TensorError::TapeMismatch { op: op_name }),
                }
            }
        }
        let value = Rc::new(value);
        let tape_ref = match tape {
            Some(tp) => {
                let id = tp.push(Node {
                    op,
                    inputs: inputs.iter().map(|t| t.input_ref()).collect(),
                    value: Rc::clone(&value),
                    shape: shape.clone(),
                });
                Some((tp, id))
            }
            None => None,
        };
        Ok(Tensor { shape, data: value, tape: tape_ref })
    }

    fn binary(&self, op_name: &'static str, op: Op<T>, rhs: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let value: Vec<T> = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        self.result_of(op_name, op, vec![self, rhs], self.shape.clone(), value)
    }

    fn unary(&self, op_name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let value: Vec<T> = self.data.iter().map(|&a| f(a)).collect();
        self.result_of(op_name, op, vec![self], self.shape.clone(), value)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", Op::Add, rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", Op::Sub, rhs, |a, b| a - b)
    }

    /// Elementwise product; also serves multiplication by a constant mask.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", Op::Mul, rhs, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("div", Op::Div, rhs, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary("neg", Op::Neg, |a| -a)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary("relu", Op::Relu, |a| if a > T::zero() { a } else { T::zero() })
    }

    /// ln(max(x, clamp)); derivative is zero where the clamp is active.
    pub fn log_clamped(&self, clamp: T) -> Result<Tensor<T>> {
        self.unary("log", Op::LogClamped(clamp), |a| a.max(clamp).ln())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary("square", Op::Square, |a| a * a)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.unary("scale", Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary("add_scalar", Op::AddScalar(c), |a| a + c)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        self.result_of("sum_all", Op::SumAll, vec![self], vec![1], vec![acc])
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = T::from_usize(self.data.len()).unwrap();
        let mut acc = T::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        self.result_of("mean_all", Op::MeanAll, vec![self], vec![1], vec![acc / n])
    }

    /// Sum over the channel axis; (B, C, ...) -> (B, 1, ...).
    pub fn sum_channels(&self) -> Result<Tensor<T>> {
        if self.shape.len() < 2 {
            return Err(TensorError::RankMismatch { op: "sum_channels", needed: 2, shape: self.shape.clone() });
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut out = vec![T::zero(); b * spatial];
        for bi in 0..b {
            for ci in 0..c {
                let src = &self.data[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                let dst = &mut out[bi * spatial..(bi + 1) * spatial];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = 1;
        self.result_of("sum_channels", Op::SumChannels, vec![self], shape, out)
    }

    /// Softmax over the channel axis of a (B, C, ...) tensor.
    pub fn softmax_channels(&self) -> Result<Tensor<T>> {
        if self.shape.len() < 2 {
            return Err(TensorError::RankMismatch { op: "softmax", needed: 2, shape: self.shape.clone() });
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut out = vec![T::zero(); self.data.len()];
        for bi in 0..b {
            let base = bi * c * spatial;
            for s in 0..spatial {
                let mut maxv = T::neg_infinity();
                for ci in 0..c {
                    maxv = maxv.max(self.data[base + ci * spatial + s]);
                }
                let mut denom = T::zero();
                for ci in 0..c {
                    let e = (self.data[base + ci * spatial + s] - maxv).exp();
                    out[base + ci * spatial + s] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out[base + ci * spatial + s] /= denom;
                }
            }
        }
        self.result_of("softmax", Op::SoftmaxChannels, vec![self], self.shape.clone(), out)
    }

    /// (B, C, ...) operand checked against a (B, 1, ...) per-voxel companion.
    fn check_voxel_companion(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        let mut expected = self.shape.clone();
        if expected.len() < 2 {
            return Err(TensorError::RankMismatch { op, needed: 2, shape: self.shape.clone() });
        }
        expected[1] = 1;
        if other.shape != expected {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn check_untaped_aux(op: &'static str, aux: &[&Tensor<T>]) -> Result<()> {
        // The fused reductions only propagate gradients to their first
        // operand; taped companions would silently lose theirs.
        if aux.iter().any(|t| t.is_taped()) {
            return Err(TensorError::TapeMismatch { op });
        }
        Ok(())
    }

    /// Fused `mul(rhs).sum_all()`: the scalar sum of the elementwise product,
    /// accumulated in flat index order, without materializing the product.
    pub fn mul_sum(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul_sum",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(rhs.data.iter()) {
            // Zero factors contribute an exact +/-0.0, which never moves an
            // accumulator that starts at +0.0, so they are skipped.
            if b != T::zero() {
                acc += a * b;
            }
        }
        self.result_of("mul_sum", Op::MulSum, vec![self, rhs], vec![1], vec![acc])
    }

    /// Fused region cross-entropy sum over a (B, K, ...) probability tensor:
    /// sum_v region[v] * -ln(max(sum_c p[c,v]*onehot[c,v], clamp)), identical
    /// term-for-term to mul/sum_channels/log_clamped/neg/mul/sum_all chained.
    pub fn ce_region_sum(&self, onehot: &Tensor<T>, region: &Tensor<T>, clamp: T) -> Result<Tensor<T>> {
        if self.shape != onehot.shape {
            return Err(TensorError::ShapeMismatch {
                op: "ce_region_sum",
                lhs: self.shape.clone(),
                rhs: onehot.shape.clone(),
            });
        }
        self.check_voxel_companion("ce_region_sum", region)?;
        Self::check_untaped_aux("ce_region_sum", &[onehot, region])?;
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut acc = T::zero();
        for bi in 0..b {
            let base = bi * c * spatial;
            for v in 0..spatial {
                let r = region.data[bi * spatial + v];
                if r == T::zero() {
                    continue; // term would be an exact +/-0.0
                }
                let mut picked = T::zero();
                for ci in 0..c {
                    let e = base + ci * spatial + v;
                    picked += self.data[e] * onehot.data[e];
                }
                let ce = -(picked.max(clamp).ln());
                acc += ce * r;
            }
        }
        self.result_of(
            "ce_region_sum",
            Op::CeRegionSum(clamp),
            vec![self, onehot, region],
            vec![1],
            vec![acc],
        )
    }

    /// Fused masked MSE sum: sum_v gate[v] * weight[v] * sum_c (p-onehot)^2,
    /// identical term-for-term to sub/square/sum_channels/mul/mul/sum_all.
    pub fn mse_masked_sum(
        &self,
        onehot: &Tensor<T>,
        weight: &Tensor<T>,
        gate: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if self.shape != onehot.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse_masked_sum",
                lhs: self.shape.clone(),
                rhs: onehot.shape.clone(),
            });
        }
        self.check_voxel_companion("mse_masked_sum", weight)?;
        self.check_voxel_companion("mse_masked_sum", gate)?;
        Self::check_untaped_aux("mse_masked_sum", &[onehot, weight, gate])?;
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut acc = T::zero();
        for bi in 0..b {
            let base = bi * c * spatial;
            for v in 0..spatial {
                let g = gate.data[bi * spatial + v];
                if g == T::zero() {
                    continue; // term would be an exact +/-0.0
                }
                let mut per_voxel = T::zero();
                for ci in 0..c {
                    let e = base + ci * spatial + v;
                    let d = self.data[e] - onehot.data[e];
                    per_voxel += d * d;
                }
                acc += (per_voxel * weight.data[bi * spatial + v]) * g;
            }
        }
        self.result_of(
            "mse_masked_sum",
            Op::MseMaskedSum,
            vec![self, onehot, weight, gate],
            vec![1],
            vec![acc],
        )
    }

    /// Fused masked KL-to-uniform sum: per voxel
    /// (factor * sum_c ln(max(p_c, clamp)) + offset) * weight[v] * gate[v],
    /// summed over voxels; identical term-for-term to the chain
    /// log_clamped/sum_channels/scale(factor)/add_scalar(offset)/mul/mul/sum_all.
    pub fn kl_masked_sum(
        &self,
        weight: &Tensor<T>,
        gate: &Tensor<T>,
        clamp: T,
        factor: T,
        offset: T,
    ) -> Result<Tensor<T>> {
        self.check_voxel_companion("kl_masked_sum", weight)?;
        self.check_voxel_companion("kl_masked_sum", gate)?;
        Self::check_untaped_aux("kl_masked_sum", &[weight, gate])?;
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut acc = T::zero();
        for bi in 0..b {
            let base = bi * c * spatial;
            for v in 0..spatial {
                let g = gate.data[bi * spatial + v];
                if g == T::zero() {
                    continue; // term would be an exact +/-0.0
                }
                let mut logsum = T::zero();
                for ci in 0..c {
                    logsum += self.data[base + ci * spatial + v].max(clamp).ln();
                }
                let per_voxel = logsum * factor + offset;
                acc += (per_voxel * weight.data[bi * spatial + v]) * g;
            }
        }
        self.result_of(
            "kl_masked_sum",
            Op::KlMaskedSum { clamp, factor },
            vec![self, weight, gate],
            vec![1],
            vec![acc],
        )
    }

    /// Shape-preserving convolution with odd kernel extents and zero padding.
    /// Input (B, Cin, W, H, D), weight (Cout, Cin, kw, kh, kd).
    pub fn conv(&self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 5 {
            return Err(TensorError::RankMismatch { op: "conv", needed: 5, shape: self.shape.clone() });
        }
        if weight.shape.len() != 5 || weight.shape[1] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let kernel = &weight.shape[2..];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(TensorError::EvenKernel { kernel: kernel.to_vec() });
        }
        let (bsz, cout) = (self.shape[0], weight.shape[0]);
        let mut out_shape = self.shape.clone();
        out_shape[1] = cout;
        let mut out = vec![T::zero(); bsz * cout * self.shape[2] * self.shape[3] * self.shape[4]];
        conv_forward(&self.data, &self.shape, &weight.data, &weight.shape, &mut out);
        self.result_of("conv", Op::Conv, vec![self, weight], out_shape, out)
    }

    /// Channel-wise affine: adds bias[c] to every voxel of channel c.
    pub fn bias_add(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() < 2 || bias.shape.len() != 1 || bias.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut out = self.data.as_ref().clone();
        for bi in 0..b {
            for ci in 0..c {
                let v = bias.data[ci];
                for o in &mut out[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial] {
                    *o += v;
                }
            }
        }
        self.result_of("bias_add", Op::BiasAdd, vec![self, bias], self.shape.clone(), out)
    }

    /// Reverse pass from this scalar; populates gradients on every taped node.
    pub fn backward(&self) -> Result<()> {
        let (tape, root) = self.tape.as_ref().ok_or(TensorError::BackwardOffTape)?;
        if self.data.len() != 1 {
            return Err(TensorError::BackwardNonScalar { shape: self.shape.clone() });
        }
        let mut inner = tape.inner.borrow_mut();
        if inner.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        inner.backward_done = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[*root] = Some(vec![T::one()]);
        // Scratch for per-node "which inputs are taped" flags; gradients of
        // constant inputs would be discarded, so they are never computed.
        let mut needs: Vec<bool> = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            let input_grads = node_backward(node, &g, &mut needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(id), Some(ig)) = (input.node, ig) {
                    match &mut grads[id] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += *v;
                            }
                        }
                        slot => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (index, g) in grads.iter().flatten().flat_map(|g| g.iter().enumerate()) {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward", index });
            }
        }
        inner.grads = grads;
        Ok(())
    }
}

/// Per-input gradients of one node given the output gradient. Inputs that are
/// not taped (constants) get `None`: their gradients would be discarded, so
/// the work of materializing them is skipped outright.
fn node_backward<T: Scalar>(node: &Node<T>, g: &[T], needs: &mut Vec<bool>) -> Vec<Option<Vec<T>>> {
    let ins = &node.inputs;
    needs.clear();
    needs.extend(ins.iter().map(|i| i.node.is_some()));
    let gated = |want: bool, make: &dyn Fn() -> Vec<T>| if want { Some(make()) } else { None };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![
            gated(needs[0], &|| g.to_vec()),
            gated(needs[1], &|| g.to_vec()),
        ],
        Op::Sub => vec![
            gated(needs[0], &|| g.to_vec()),
            gated(needs[1], &|| g.iter().map(|&v| -v).collect()),
        ],
        Op::Mul => vec![
            gated(needs[0], &|| {
                g.iter().zip(ins[1].data.iter()).map(|(&gv, &b)| gv * b).collect()
            }),
            gated(needs[1], &|| {
                g.iter().zip(ins[0].data.iter()).map(|(&gv, &a)| gv * a).collect()
            }),
        ],
        Op::Div => {
            let a = &ins[0].data;
            let b = &ins[1].data;
            vec![
                gated(needs[0], &|| g.iter().zip(b.iter()).map(|(&gv, &bv)| gv / bv).collect()),
                gated(needs[1], &|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect()
                }),
            ]
        }
        Op::Neg => vec![Some(g.iter().map(|&v| -v).collect())],
        Op::Relu => vec![Some(
            g.iter()
                .zip(ins[0].data.iter())
                .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                .collect(),
        )],
        Op::LogClamped(clamp) => vec![Some(
            g.iter()
                .zip(ins[0].data.iter())
                .map(|(&gv, &x)| if x > *clamp { gv / x } else { T::zero() })
                .collect(),
        )],
        Op::Square => vec![Some(
            g.iter()
                .zip(ins[0].data.iter())
                .map(|(&gv, &x)| gv * (x + x))
                .collect(),
        )],
        Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
        Op::AddScalar(_) => vec![Some(g.to_vec())],
        Op::SumAll => vec![Some(vec![g[0]; ins[0].data.len()])],
        Op::MeanAll => {
            let n = T::from_usize(ins[0].data.len()).unwrap();
            vec![Some(vec![g[0] / n; ins[0].data.len()])]
        }
        Op::SumChannels => {
            let shape = &ins[0].shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut gi = vec![T::zero(); ins[0].data.len()];
            for bi in 0..b {
                let src = &g[bi * spatial..(bi + 1) * spatial];
                for ci in 0..c {
                    let dst = &mut gi[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
                    dst.copy_from_slice(src);
                }
            }
            vec![Some(gi)]
        }
        Op::SoftmaxChannels => {
            let shape = &node.shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let y = &node.value;
            let mut gi = vec![T::zero(); y.len()];
            for bi in 0..b {
                let base = bi * c * spatial;
                for s in 0..spatial {
                    let mut dot = T::zero();
                    for ci in 0..c {
                        let idx = base + ci * spatial + s;
                        dot += g[idx] * y[idx];
                    }
                    for ci in 0..c {
                        let idx = base + ci * spatial + s;
                        gi[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::MulSum => {
            let a = &ins[0].data;
            let b = &ins[1].data;
            vec![
                gated(needs[0], &|| b.iter().map(|&bv| g[0] * bv).collect()),
                gated(needs[1], &|| a.iter().map(|&av| g[0] * av).collect()),
            ]
        }
        Op::CeRegionSum(clamp) => {
            // Mirrors the chained backward exactly: broadcast, gate by the
            // region, negate, divide by the picked probability where it is
            // above the clamp, then spread through the one-hot factor.
            let probs = &ins[0].data;
            let onehot = &ins[1].data;
            let region = &ins[2].data;
            let shape = &ins[0].shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut gi = vec![T::zero(); probs.len()];
            for bi in 0..b {
                let base = bi * c * spatial;
                for v in 0..spatial {
                    let r = region[bi * spatial + v];
                    if r == T::zero() {
                        continue;
                    }
                    let mut picked = T::zero();
                    for ci in 0..c {
                        let e = base + ci * spatial + v;
                        picked += probs[e] * onehot[e];
                    }
                    let g_log = -(g[0] * r);
                    let g_picked = if picked > *clamp { g_log / picked } else { T::zero() };
                    for ci in 0..c {
                        let e = base + ci * spatial + v;
                        gi[e] = g_picked * onehot[e];
                    }
                }
            }
            vec![Some(gi), None, None]
        }
        Op::MseMaskedSum => {
            let probs = &ins[0].data;
            let onehot = &ins[1].data;
            let weight = &ins[2].data;
            let gate = &ins[3].data;
            let shape = &ins[0].shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut gi = vec![T::zero(); probs.len()];
            for bi in 0..b {
                let base = bi * c * spatial;
                for v in 0..spatial {
                    let gt = gate[bi * spatial + v];
                    if gt == T::zero() {
                        continue;
                    }
                    let g_per_voxel = (g[0] * gt) * weight[bi * spatial + v];
                    for ci in 0..c {
                        let e = base + ci * spatial + v;
                        let d = probs[e] - onehot[e];
                        gi[e] = g_per_voxel * (d + d);
                    }
                }
            }
            vec![Some(gi), None, None, None]
        }
        Op::KlMaskedSum { clamp, factor } => {
            let probs = &ins[0].data;
            let weight = &ins[1].data;
            let gate = &ins[2].data;
            let shape = &ins[0].shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut gi = vec![T::zero(); probs.len()];
            for bi in 0..b {
                let base = bi * c * spatial;
                for v in 0..spatial {
                    let gt = gate[bi * spatial + v];
                    if gt == T::zero() {
                        continue;
                    }
                    let g_logsum = ((g[0] * gt) * weight[bi * spatial + v]) * *factor;
                    for ci in 0..c {
                        let e = base + ci * spatial + v;
                        let p = probs[e];
                        gi[e] = if p > *clamp { g_logsum / p } else { T::zero() };
                    }
                }
            }
            vec![Some(gi), None, None]
        }
        Op::Conv => {
            let x = &ins[0];
            let w = &ins[1];
            let mut gx = if needs[0] { vec![T::zero(); x.data.len()] } else { Vec::new() };
            let mut gw = vec![T::zero(); w.data.len()];
            conv_backward(&x.data, &x.shape, &w.data, &w.shape, g, needs[0].then_some(&mut gx), &mut gw);
            vec![if needs[0] { Some(gx) } else { None }, Some(gw)]
        }
        Op::BiasAdd => {
            let shape = &ins[0].shape;
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut gb = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let mut acc = T::zero();
                    for &gv in &g[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial] {
                        acc += gv;
                    }
                    gb[ci] += acc;
                }
            }
            vec![gated(needs[0], &|| g.to_vec()), Some(gb)]
        }
    }
}

struct ConvGeom {
    w: usize,
    h: usize,
    d: usize,
    kw: usize,
    kh: usize,
    kd: usize,
}

impl ConvGeom {
    fn taps(&self) -> impl Iterator<Item = (isize, isize, isize, usize)> + '_ {
        let (pw, ph, pd) = (self.kw / 2, self.kh / 2, self.kd / 2);
        let (kh, kd) = (self.kh, self.kd);
        (0..self.kw).flat_map(move |ki| {
            (0..kh).flat_map(move |kj| {
                (0..kd).map(move |kk| {
                    (
                        ki as isize - pw as isize,
                        kj as isize - ph as isize,
                        kk as isize - pd as isize,
                        (ki * kh + kj) * kd + kk,
                    )
                })
            })
        })
    }

    /// Valid coordinate window so that coord + offset stays in [0, extent).
    fn range(extent: usize, off: isize) -> (usize, usize) {
        let lo = if off < 0 { (-off) as usize } else { 0 };
        let hi = if off > 0 { extent.saturating_sub(off as usize) } else { extent };
        (lo, hi)
    }
}

fn conv_forward<T: Scalar>(x: &[T], xs: &[usize], w: &[T], ws: &[usize], out: &mut [T]) {
    let (bsz, cin) = (xs[0], xs[1]);
    let cout = ws[0];
    let geom = ConvGeom { w: xs[2], h: xs[3], d: xs[4], kw: ws[2], kh: ws[3], kd: ws[4] };
    let vol = geom.w * geom.h * geom.d;
    let ktaps = geom.kw * geom.kh * geom.kd;
    for b in 0..bsz {
        for co in 0..cout {
            let o_base = (b * cout + co) * vol;
            for ci in 0..cin {
                let i_base = (b * cin + ci) * vol;
                let w_base = (co * cin + ci) * ktaps;
                for (dx, dy, dz, t) in geom.taps() {
                    let wv = w[w_base + t];
                    let (x0, x1) = ConvGeom::range(geom.w, dx);
                    let (y0, y1) = ConvGeom::range(geom.h, dy);
                    let (z0, z1) = ConvGeom::range(geom.d, dz);
                    if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                        continue;
                    }
                    for xi in x0..x1 {
                        let xo = (xi as isize + dx) as usize;
                        for yi in y0..y1 {
                            let yo = (yi as isize + dy) as usize;
                            let orow = o_base + (xi * geom.h + yi) * geom.d;
                            let irow = i_base + (xo * geom.h + yo) * geom.d;
                            let src = &x[irow + (z0 as isize + dz) as usize..irow + (z1 as isize + dz) as usize];
                            let dst = &mut out[orow + z0..orow + z1];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += wv * *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(
    x: &[T],
    xs: &[usize],
    w: &[T],
    ws: &[usize],
    g: &[T],
    mut gx: Option<&mut Vec<T>>,
    gw: &mut [T],
) {
    let (bsz, cin) = (xs[0], xs[1]);
    let cout = ws[0];
    let geom = ConvGeom { w: xs[2], h: xs[3], d: xs[4], kw: ws[2], kh: ws[3], kd: ws[4] };
    let vol = geom.w * geom.h * geom.d;
    let ktaps = geom.kw * geom.kh * geom.kd;
    for b in 0..bsz {
        for co in 0..cout {
            let o_base = (b * cout + co) * vol;
            for ci in 0..cin {
                let i_base = (b * cin + ci) * vol;
                let w_base = (co * cin + ci) * ktaps;
                for (dx, dy, dz, t) in geom.taps() {
                    let wv = w[w_base + t];
                    let mut wacc = T::zero();
                    let (x0, x1) = ConvGeom::range(geom.w, dx);
                    let (y0, y1) = ConvGeom::range(geom.h, dy);
                    let (z0, z1) = ConvGeom::range(geom.d, dz);
                    if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                        continue;
                    }
                    for xi in x0..x1 {
                        let xo = (xi as isize + dx) as usize;
                        for yi in y0..y1 {
                            let yo = (yi as isize + dy) as usize;
                            let orow = o_base + (xi * geom.h + yi) * geom.d;
                            let irow = i_base + (xo * geom.h + yo) * geom.d;
                            let zi0 = (z0 as isize + dz) as usize;
                            let zi1 = (z1 as isize + dz) as usize;
                            let gout = &g[orow + z0..orow + z1];
                            // dL/dw accumulates g . x over the valid window;
                            // dL/dx scatters w * g back through the same taps.
                            let xin = &x[irow + zi0..irow + zi1];
                            for (gv, xv) in gout.iter().zip(xin) {
                                wacc += *gv * *xv;
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let gxrow = &mut gx[irow + zi0..irow + zi1];
                                for (gi, gv) in gxrow.iter_mut().zip(gout) {
                                    *gi += wv * *gv;
                                }
                            }
                        }
                    }
                    gw[w_base + t] += wacc;
                }
            }
        }
    }
}
