//! Tape-based reverse-mode differentiation over real and complex arrays.
//!
//! A [`DiffGraph`] is an append-only tape: every operation evaluates
//! eagerly and records enough to replay (`recompute`) or differentiate
//! (`backward`). Gradients of complex tensors are stored as one complex
//! array packing the two independent real derivatives: grad.re = dL/dRe,
//! grad.im = dL/dIm. Under that packing a holomorphic op f propagates
//! gradients as g_in = g_out * conj(f'), the transforms propagate by
//! their (unitary) inverses, and conj maps g to conj(g).

mod adam;
mod check;
mod kernels;

pub use adam::AdamState;
pub use check::check_gradient;
pub use kernels::{conv2d_forward, pixel_shuffle_forward};

use ndarray::{ArrayD, Axis, IxDyn};
use num_complex::Complex64;

use crate::error::{FpmError, Result};
use crate::fft::{fft2_centered, ifft2_centered};
use crate::optics::window_corner;

/// Guard constant for the square root: sqrt(max(x, GUARD)) keeps the
/// amplitude-loss gradient finite at zero-intensity pixels.
pub const SQRT_GUARD: f64 = 1e-12;

/// A real or complex array value on the tape.
#[derive(Clone, Debug)]
pub enum Tensor {
    Real(ArrayD<f64>),
    Complex(ArrayD<Complex64>),
}

impl Tensor {
    pub fn real_2d(a: ndarray::Array2<f64>) -> Tensor {
        Tensor::Real(a.into_dyn())
    }

    pub fn complex_2d(a: ndarray::Array2<Complex64>) -> Tensor {
        Tensor::Complex(a.into_dyn())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::Real(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Real(a) => a.shape(),
            Tensor::Complex(a) => a.shape(),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Tensor::Real(_))
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Real(a) => a.len(),
            Tensor::Complex(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of independent real degrees of freedom.
    pub fn dof(&self) -> usize {
        match self {
            Tensor::Real(a) => a.len(),
            Tensor::Complex(a) => 2 * a.len(),
        }
    }

    pub fn as_real(&self) -> &ArrayD<f64> {
        match self {
            Tensor::Real(a) => a,
            Tensor::Complex(_) => panic!("expected real tensor"),
        }
    }

    pub fn as_complex(&self) -> &ArrayD<Complex64> {
        match self {
            Tensor::Complex(a) => a,
            Tensor::Real(_) => panic!("expected complex tensor"),
        }
    }

    fn is_scalar_real(&self) -> bool {
        matches!(self, Tensor::Real(a) if a.ndim() == 0)
    }

    fn all_finite(&self) -> bool {
        match self {
            Tensor::Real(a) => a.iter().all(|v| v.is_finite()),
            Tensor::Complex(a) => a.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        }
    }

    /// Reads real slot `i` under the packing used for finite differences:
    /// complex arrays interleave (re, im) per element.
    pub fn get_dof(&self, i: usize) -> f64 {
        match self {
            Tensor::Real(a) => a.as_slice().expect("standard layout")[i],
            Tensor::Complex(a) => {
                let v = a.as_slice().expect("standard layout")[i / 2];
                if i % 2 == 0 {
                    v.re
                } else {
                    v.im
                }
            }
        }
    }

    /// Writes real slot `i`; see [`Tensor::get_dof`].
    pub fn set_dof(&mut self, i: usize, value: f64) {
        match self {
            Tensor::Real(a) => a.as_slice_mut().expect("standard layout")[i] = value,
            Tensor::Complex(a) => {
                let v = &mut a.as_slice_mut().expect("standard layout")[i / 2];
                if i % 2 == 0 {
                    v.re = value;
                } else {
                    v.im = value;
                }
            }
        }
    }
}

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Conj(NodeId),
    AbsSq(NodeId),
    SqrtGuard(NodeId),
    Fft2(NodeId),
    Ifft2(NodeId),
    CropWindows {
        src: NodeId,
        offsets: Vec<(i64, i64)>,
        lo: (usize, usize),
        scale: f64,
    },
    EmbedWindows {
        src: NodeId,
        offsets: Vec<(i64, i64)>,
        hi: (usize, usize),
        scale: f64,
    },
    Clamp(NodeId, f64, f64),
    Conv2d {
        src: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    LeakyRelu(NodeId, f64),
    PixelShuffle(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    ForwardDiff(NodeId, usize),
    WeightedSum {
        stack: NodeId,
        weights: NodeId,
    },
    MulScalar {
        array: NodeId,
        scalar: NodeId,
    },
    Repeat(NodeId, usize),
    ComplexFromParts {
        re: NodeId,
        im: NodeId,
    },
    PolarUnit(NodeId),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Conj(..) => "conj",
            Op::AbsSq(..) => "abs_sq",
            Op::SqrtGuard(..) => "sqrt_guard",
            Op::Fft2(..) => "fft2",
            Op::Ifft2(..) => "ifft2",
            Op::CropWindows { .. } => "crop_windows",
            Op::EmbedWindows { .. } => "embed_windows",
            Op::Clamp(..) => "clamp",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::ForwardDiff(..) => "forward_diff",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Repeat(..) => "repeat",
            Op::ComplexFromParts { .. } => "complex_from_parts",
            Op::PolarUnit(..) => "polar_unit",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Append-only differentiation tape. Single-writer; independent graphs
/// may live on independent threads.
#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl DiffGraph {
    pub fn new() -> Self {
        DiffGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node holding `value`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Replaces the value of a leaf; shape and dtype must match. Follow
    /// with [`DiffGraph::recompute`] to refresh downstream nodes.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(FpmError::Domain(format!(
                "node {} is {}, not a leaf",
                id.0,
                node.op.name()
            )));
        }
        if node.value.shape() != value.shape() || node.value.is_real() != value.is_real() {
            return Err(FpmError::Size(format!(
                "leaf {} holds shape {:?}, got {:?}",
                id.0,
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last [`DiffGraph::backward`] call, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        if !value.all_finite() {
            return Err(FpmError::Numeric(format!(
                "non-finite value out of op {} at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        Ok(self.push(op, value))
    }

    /// Re-evaluates every non-leaf node in tape order, e.g. after
    /// [`DiffGraph::set_leaf`]. Clears stale gradients.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            self.nodes[i].grad = None;
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.eval(&op)?;
            if !value.all_finite() {
                return Err(FpmError::Numeric(format!(
                    "non-finite value out of op {} at node {i}",
                    op.name()
                )));
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn binary_shapes_match(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() || ta.is_real() != tb.is_real() {
            return Err(FpmError::Size(format!(
                "{op}: operands disagree, {:?} ({}) vs {:?} ({})",
                ta.shape(),
                if ta.is_real() { "real" } else { "complex" },
                tb.shape(),
                if tb.is_real() { "real" } else { "complex" },
            )));
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        Ok(match *op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => {
                self.binary_shapes_match(a, b, "add")?;
                match (self.val(a), self.val(b)) {
                    (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x + y),
                    (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x + y),
                    _ => unreachable!(),
                }
            }
            Op::Sub(a, b) => {
                self.binary_shapes_match(a, b, "sub")?;
                match (self.val(a), self.val(b)) {
                    (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x - y),
                    (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x - y),
                    _ => unreachable!(),
                }
            }
            Op::Mul(a, b) => {
                self.binary_shapes_match(a, b, "mul")?;
                match (self.val(a), self.val(b)) {
                    (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x * y),
                    (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x * y),
                    _ => unreachable!(),
                }
            }
            Op::Scale(a, s) => match self.val(a) {
                Tensor::Real(x) => Tensor::Real(x * s),
                Tensor::Complex(x) => Tensor::Complex(x * Complex64::new(s, 0.0)),
            },
            Op::Conj(a) => match self.val(a) {
                Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| v.conj())),
                Tensor::Real(x) => Tensor::Real(x.clone()),
            },
            Op::AbsSq(a) => match self.val(a) {
                Tensor::Complex(x) => Tensor::Real(x.mapv(|v| v.norm_sqr())),
                Tensor::Real(x) => Tensor::Real(x.mapv(|v| v * v)),
            },
            Op::SqrtGuard(a) => {
                let x = self.expect_real(a, "sqrt_guard")?;
                Tensor::Real(x.mapv(|v| v.max(SQRT_GUARD).sqrt()))
            }
            Op::Fft2(a) => Tensor::Complex(fft2_centered(self.expect_complex(a, "fft2")?)),
            Op::Ifft2(a) => Tensor::Complex(ifft2_centered(self.expect_complex(a, "ifft2")?)),
            Op::CropWindows {
                src,
                ref offsets,
                lo,
                scale,
            } => {
                let spec = self.expect_complex(src, "crop_windows")?;
                let hi = (spec.shape()[0], spec.shape()[1]);
                let mut out = ArrayD::from_elem(
                    IxDyn(&[offsets.len(), lo.0, lo.1]),
                    Complex64::new(0.0, 0.0),
                );
                for (l, &delta) in offsets.iter().enumerate() {
                    let corner = window_corner(hi, lo, delta)?;
                    let win = kernels::crop_window_2d(spec, corner, lo, scale);
                    out.index_axis_mut(Axis(0), l).assign(&win);
                }
                Tensor::Complex(out)
            }
            Op::EmbedWindows {
                src,
                ref offsets,
                hi,
                scale,
            } => {
                let stack = self.expect_complex(src, "embed_windows")?;
                let lo = (stack.shape()[1], stack.shape()[2]);
                let mut out =
                    ArrayD::from_elem(IxDyn(&[hi.0, hi.1]), Complex64::new(0.0, 0.0));
                for (l, &delta) in offsets.iter().enumerate() {
                    let corner = window_corner(hi, lo, delta)?;
                    let win = stack.index_axis(Axis(0), l).to_owned().into_dyn();
                    kernels::embed_window_2d(&mut out, &win, corner, scale);
                }
                Tensor::Complex(out)
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.expect_real(a, "clamp")?;
                Tensor::Real(x.mapv(|v| v.clamp(lo, hi)))
            }
            Op::Conv2d { src, kernel, bias } => {
                let (s, k, b) = (
                    self.expect_real(src, "conv2d")?,
                    self.expect_real(kernel, "conv2d")?,
                    self.expect_real(bias, "conv2d")?,
                );
                if s.ndim() != 3 || k.ndim() != 4 || b.ndim() != 1 {
                    return Err(FpmError::Size(
                        "conv2d wants src (C_in,H,W), kernel (C_out,C_in,kh,kw), bias (C_out)"
                            .into(),
                    ));
                }
                if k.shape()[1] != s.shape()[0] || b.shape()[0] != k.shape()[0] {
                    return Err(FpmError::Size(format!(
                        "conv2d: src {:?} kernel {:?} bias {:?} disagree",
                        s.shape(),
                        k.shape(),
                        b.shape()
                    )));
                }
                if k.shape()[2] % 2 == 0 || k.shape()[3] % 2 == 0 {
                    return Err(FpmError::Config(format!(
                        "conv2d kernel must be odd-sized, got {}x{}",
                        k.shape()[2],
                        k.shape()[3]
                    )));
                }
                Tensor::Real(kernels::conv2d_forward(s, k, b))
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.expect_real(a, "leaky_relu")?;
                Tensor::Real(x.mapv(|v| if v >= 0.0 { v } else { slope * v }))
            }
            Op::PixelShuffle(a, r) => {
                let x = self.expect_real(a, "pixel_shuffle")?;
                if x.ndim() != 3 || x.shape()[0] % (r * r) != 0 {
                    return Err(FpmError::Size(format!(
                        "pixel_shuffle needs (C*r^2,H,W), got {:?} with r={r}",
                        x.shape()
                    )));
                }
                Tensor::Real(kernels::pixel_shuffle_forward(x, r))
            }
            Op::SumAll(a) => {
                let x = self.expect_real(a, "sum_all")?;
                Tensor::scalar(x.sum())
            }
            Op::MeanAll(a) => {
                let x = self.expect_real(a, "mean_all")?;
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            Op::ForwardDiff(a, axis) => {
                let t = self.val(a);
                if axis >= t.shape().len() {
                    return Err(FpmError::Size(format!(
                        "forward_diff axis {axis} out of range for {:?}",
                        t.shape()
                    )));
                }
                match t {
                    Tensor::Real(x) => Tensor::Real(forward_diff(x, axis)),
                    Tensor::Complex(x) => Tensor::Complex(forward_diff(x, axis)),
                }
            }
            Op::WeightedSum { stack, weights } => {
                let s = self.expect_real(stack, "weighted_sum")?;
                let w = self.expect_real(weights, "weighted_sum")?;
                if s.ndim() != 3 || w.ndim() != 1 || w.shape()[0] != s.shape()[0] {
                    return Err(FpmError::Size(format!(
                        "weighted_sum wants (L,H,W) stack and (L,) weights, got {:?} and {:?}",
                        s.shape(),
                        w.shape()
                    )));
                }
                let mut acc = ArrayD::<f64>::zeros(IxDyn(&s.shape()[1..]));
                for (l, slab) in s.axis_iter(Axis(0)).enumerate() {
                    let wl = w[[l]];
                    acc.zip_mut_with(&slab, |a, &b| *a += wl * b);
                }
                Tensor::Real(acc)
            }
            Op::MulScalar { array, scalar } => {
                let x = self.expect_real(array, "mul_scalar")?;
                let s = self.val(scalar);
                if !s.is_scalar_real() {
                    return Err(FpmError::Size("mul_scalar wants a real scalar".into()));
                }
                let sv = s.as_real()[IxDyn(&[])];
                Tensor::Real(x * sv)
            }
            Op::Repeat(a, n) => match self.val(a) {
                Tensor::Real(x) => {
                    let mut shape = vec![n];
                    shape.extend_from_slice(x.shape());
                    let mut out = ArrayD::zeros(IxDyn(&shape));
                    for l in 0..n {
                        out.index_axis_mut(Axis(0), l).assign(x);
                    }
                    Tensor::Real(out)
                }
                Tensor::Complex(x) => {
                    let mut shape = vec![n];
                    shape.extend_from_slice(x.shape());
                    let mut out = ArrayD::from_elem(IxDyn(&shape), Complex64::new(0.0, 0.0));
                    for l in 0..n {
                        out.index_axis_mut(Axis(0), l).assign(x);
                    }
                    Tensor::Complex(out)
                }
            },
            Op::ComplexFromParts { re, im } => {
                self.binary_shapes_match(re, im, "complex_from_parts")?;
                let (r, i) = (
                    self.expect_real(re, "complex_from_parts")?,
                    self.expect_real(im, "complex_from_parts")?,
                );
                let mut out = ArrayD::from_elem(r.raw_dim(), Complex64::new(0.0, 0.0));
                for ((o, &a), &b) in out.iter_mut().zip(r.iter()).zip(i.iter()) {
                    *o = Complex64::new(a, b);
                }
                Tensor::Complex(out)
            }
            Op::PolarUnit(a) => {
                let x = self.expect_real(a, "polar_unit")?;
                Tensor::Complex(x.mapv(|v| Complex64::from_polar(1.0, v)))
            }
            Op::Reshape(a, ref shape) => {
                let t = self.val(a);
                let n: usize = shape.iter().product();
                if n != t.len() {
                    return Err(FpmError::Size(format!(
                        "reshape: {:?} has {} elements, target {:?} wants {n}",
                        t.shape(),
                        t.len(),
                        shape
                    )));
                }
                match t {
                    Tensor::Real(x) => Tensor::Real(
                        x.to_owned()
                            .into_shape_with_order(IxDyn(shape))
                            .expect("standard layout"),
                    ),
                    Tensor::Complex(x) => Tensor::Complex(
                        x.to_owned()
                            .into_shape_with_order(IxDyn(shape))
                            .expect("standard layout"),
                    ),
                }
            }
        })
    }

    fn expect_real(&self, id: NodeId, op: &str) -> Result<&ArrayD<f64>> {
        match self.val(id) {
            Tensor::Real(x) => Ok(x),
            Tensor::Complex(_) => Err(FpmError::Domain(format!(
                "{op}: expected a real tensor at node {}",
                id.0
            ))),
        }
    }

    fn expect_complex(&self, id: NodeId, op: &str) -> Result<&ArrayD<Complex64>> {
        match self.val(id) {
            Tensor::Complex(x) => Ok(x),
            Tensor::Real(_) => Err(FpmError::Domain(format!(
                "{op}: expected a complex tensor at node {}",
                id.0
            ))),
        }
    }

    // ---- op constructors -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product; the complex case is the full complex product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, s))
    }

    pub fn conj(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Conj(a))
    }

    /// Squared magnitude; complex in, real out.
    pub fn abs_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::AbsSq(a))
    }

    /// sqrt(max(x, [`SQRT_GUARD`])); the backward rule also uses the
    /// guarded argument, so gradients stay finite at zero.
    pub fn sqrt_guard(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SqrtGuard(a))
    }

    /// Centered unitary FFT over the last two axes.
    pub fn fft2(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Fft2(a))
    }

    pub fn ifft2(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Ifft2(a))
    }

    /// Crops one centered (lo.0, lo.1) window per offset from a 2-D
    /// spectrum into an (L, lo.0, lo.1) stack, scaling by `scale`.
    pub fn crop_windows(
        &mut self,
        src: NodeId,
        offsets: Vec<(i64, i64)>,
        lo: (usize, usize),
        scale: f64,
    ) -> Result<NodeId> {
        self.record(Op::CropWindows {
            src,
            offsets,
            lo,
            scale,
        })
    }

    /// Adjoint of [`DiffGraph::crop_windows`]: sums windows back into an
    /// (hi.0, hi.1) spectrum.
    pub fn embed_windows(
        &mut self,
        src: NodeId,
        offsets: Vec<(i64, i64)>,
        hi: (usize, usize),
        scale: f64,
    ) -> Result<NodeId> {
        self.record(Op::EmbedWindows {
            src,
            offsets,
            hi,
            scale,
        })
    }

    /// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(FpmError::Config(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.record(Op::Clamp(a, lo, hi))
    }

    /// Zero-padded same-shape cross-correlation, stride 1, odd kernel.
    pub fn conv2d(&mut self, src: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::Conv2d { src, kernel, bias })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.record(Op::LeakyRelu(a, slope))
    }

    pub fn pixel_shuffle(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        self.record(Op::PixelShuffle(a, r))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::MeanAll(a))
    }

    /// Forward difference along `axis`; the trailing slice is zero so the
    /// shape is preserved.
    pub fn forward_diff(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.record(Op::ForwardDiff(a, axis))
    }

    /// Contracts an (L, H, W) real stack with (L,) weights into (H, W).
    pub fn weighted_sum(&mut self, stack: NodeId, weights: NodeId) -> Result<NodeId> {
        self.record(Op::WeightedSum { stack, weights })
    }

    /// Multiplies a real array by a real scalar node.
    pub fn mul_scalar(&mut self, array: NodeId, scalar: NodeId) -> Result<NodeId> {
        self.record(Op::MulScalar { array, scalar })
    }

    /// Stacks `n` copies of a tensor along a new leading axis.
    pub fn repeat(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.record(Op::Repeat(a, n))
    }

    /// Builds a complex tensor from two real tensors.
    pub fn complex_from_parts(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.record(Op::ComplexFromParts { re, im })
    }

    /// exp(i * theta) for a real theta.
    pub fn polar_unit(&mut self, theta: NodeId) -> Result<NodeId> {
        self.record(Op::PolarUnit(theta))
    }

    /// Same elements under a new shape; the element count must match.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a real scalar loss node. Gradients land in every
    /// node reached by the sweep and are read with [`DiffGraph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar_real() {
            return Err(FpmError::Domain(format!(
                "backward needs a real scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if !grad.all_finite() {
                return Err(FpmError::Numeric(format!(
                    "non-finite gradient at op {} (node {i})",
                    self.nodes[i].op.name()
                )));
            }
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            None => *slot = Some(delta),
            Some(g) => match (g, delta) {
                (Tensor::Real(a), Tensor::Real(b)) => *a += &b,
                (Tensor::Complex(a), Tensor::Complex(b)) => *a += &b,
                _ => unreachable!("gradient dtype fixed by the node value"),
            },
        }
    }

    fn propagate(&mut self, op: &Op, node: usize, grad: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grad.clone());
                let neg = match grad {
                    Tensor::Real(g) => Tensor::Real(g.mapv(|v| -v)),
                    Tensor::Complex(g) => Tensor::Complex(g.mapv(|v| -v)),
                };
                self.accumulate(b, neg);
            }
            Op::Mul(a, b) => match (grad, self.val(a), self.val(b)) {
                (Tensor::Real(g), Tensor::Real(x), Tensor::Real(y)) => {
                    let ga = Tensor::Real(g * y);
                    let gb = Tensor::Real(g * x);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                (Tensor::Complex(g), Tensor::Complex(x), Tensor::Complex(y)) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(y, |gv, &yv| *gv *= yv.conj());
                    let mut gb = g.clone();
                    gb.zip_mut_with(x, |gv, &xv| *gv *= xv.conj());
                    self.accumulate(a, Tensor::Complex(ga));
                    self.accumulate(b, Tensor::Complex(gb));
                }
                _ => unreachable!(),
            },
            Op::Scale(a, s) => {
                let g = match grad {
                    Tensor::Real(g) => Tensor::Real(g * s),
                    Tensor::Complex(g) => Tensor::Complex(g * Complex64::new(s, 0.0)),
                };
                self.accumulate(a, g);
            }
            Op::Conj(a) => {
                let g = match grad {
                    Tensor::Complex(g) => Tensor::Complex(g.mapv(|v| v.conj())),
                    Tensor::Real(g) => Tensor::Real(g.clone()),
                };
                self.accumulate(a, g);
            }
            Op::AbsSq(a) => match (grad, self.val(a)) {
                (Tensor::Real(g), Tensor::Complex(z)) => {
                    let mut out = ArrayD::from_elem(z.raw_dim(), Complex64::new(0.0, 0.0));
                    for ((o, &gv), &zv) in out.iter_mut().zip(g.iter()).zip(z.iter()) {
                        *o = zv * (2.0 * gv);
                    }
                    self.accumulate(a, Tensor::Complex(out));
                }
                (Tensor::Real(g), Tensor::Real(x)) => {
                    let mut out = g.clone();
                    out.zip_mut_with(x, |gv, &xv| *gv *= 2.0 * xv);
                    self.accumulate(a, Tensor::Real(out));
                }
                _ => unreachable!(),
            },
            Op::SqrtGuard(a) => {
                let x = self.val(a).as_real();
                let g = grad.as_real();
                let mut out = g.clone();
                out.zip_mut_with(x, |gv, &xv| *gv /= 2.0 * xv.max(SQRT_GUARD).sqrt());
                self.accumulate(a, Tensor::Real(out));
            }
            Op::Fft2(a) => {
                let g = ifft2_centered(grad.as_complex());
                self.accumulate(a, Tensor::Complex(g));
            }
            Op::Ifft2(a) => {
                let g = fft2_centered(grad.as_complex());
                self.accumulate(a, Tensor::Complex(g));
            }
            Op::CropWindows {
                src,
                ref offsets,
                lo,
                scale,
            } => {
                let hi_shape = self.val(src).shape();
                let hi = (hi_shape[0], hi_shape[1]);
                let g = grad.as_complex();
                let mut out = ArrayD::from_elem(IxDyn(&[hi.0, hi.1]), Complex64::new(0.0, 0.0));
                for (l, &delta) in offsets.iter().enumerate() {
                    let corner = window_corner(hi, lo, delta)?;
                    let win = g.index_axis(Axis(0), l).to_owned().into_dyn();
                    kernels::embed_window_2d(&mut out, &win, corner, scale);
                }
                self.accumulate(src, Tensor::Complex(out));
            }
            Op::EmbedWindows {
                src,
                ref offsets,
                hi,
                scale,
            } => {
                let lo_shape = self.val(src).shape();
                let lo = (lo_shape[1], lo_shape[2]);
                let g = grad.as_complex();
                let mut out = ArrayD::from_elem(
                    IxDyn(&[offsets.len(), lo.0, lo.1]),
                    Complex64::new(0.0, 0.0),
                );
                for (l, &delta) in offsets.iter().enumerate() {
                    let corner = window_corner(hi, lo, delta)?;
                    let win = kernels::crop_window_2d(g, corner, lo, scale);
                    out.index_axis_mut(Axis(0), l).assign(&win);
                }
                self.accumulate(src, Tensor::Complex(out));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(a).as_real();
                let mut out = grad.as_real().clone();
                out.zip_mut_with(x, |gv, &xv| {
                    if !(xv > lo && xv < hi) {
                        *gv = 0.0;
                    }
                });
                self.accumulate(a, Tensor::Real(out));
            }
            Op::Conv2d { src, kernel, bias } => {
                let (gs, gk, gb) = kernels::conv2d_backward(
                    self.val(src).as_real(),
                    self.val(kernel).as_real(),
                    grad.as_real(),
                );
                self.accumulate(src, Tensor::Real(gs));
                self.accumulate(kernel, Tensor::Real(gk));
                self.accumulate(bias, Tensor::Real(gb));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.val(a).as_real();
                let mut out = grad.as_real().clone();
                out.zip_mut_with(x, |gv, &xv| {
                    if xv < 0.0 {
                        *gv *= slope;
                    }
                });
                self.accumulate(a, Tensor::Real(out));
            }
            Op::PixelShuffle(a, r) => {
                let src_shape: Vec<usize> = self.val(a).shape().to_vec();
                let g = kernels::pixel_shuffle_backward(grad.as_real(), r, &src_shape);
                self.accumulate(a, Tensor::Real(g));
            }
            Op::SumAll(a) => {
                let gv = grad.as_real()[IxDyn(&[])];
                let x = self.val(a).as_real();
                self.accumulate(a, Tensor::Real(ArrayD::from_elem(x.raw_dim(), gv)));
            }
            Op::MeanAll(a) => {
                let x = self.val(a).as_real();
                let gv = grad.as_real()[IxDyn(&[])] / x.len() as f64;
                self.accumulate(a, Tensor::Real(ArrayD::from_elem(x.raw_dim(), gv)));
            }
            Op::ForwardDiff(a, axis) => {
                let g = match (grad, self.val(a)) {
                    (Tensor::Real(g), Tensor::Real(_)) => {
                        Tensor::Real(forward_diff_adjoint(g, axis))
                    }
                    (Tensor::Complex(g), Tensor::Complex(_)) => {
                        Tensor::Complex(forward_diff_adjoint(g, axis))
                    }
                    _ => unreachable!(),
                };
                self.accumulate(a, g);
            }
            Op::WeightedSum { stack, weights } => {
                let g = grad.as_real();
                let s = self.val(stack).as_real();
                let w = self.val(weights).as_real();
                let mut gs = ArrayD::zeros(s.raw_dim());
                let mut gw = ArrayD::zeros(w.raw_dim());
                for l in 0..s.shape()[0] {
                    let wl = w[[l]];
                    let slab = s.index_axis(Axis(0), l);
                    let mut acc = 0.0;
                    let mut gslab = gs.index_axis_mut(Axis(0), l);
                    ndarray::Zip::from(&mut gslab)
                        .and(g)
                        .and(&slab)
                        .for_each(|gso, &gv, &sv| {
                            *gso = wl * gv;
                            acc += gv * sv;
                        });
                    gw[[l]] = acc;
                }
                self.accumulate(stack, Tensor::Real(gs));
                self.accumulate(weights, Tensor::Real(gw));
            }
            Op::MulScalar { array, scalar } => {
                let g = grad.as_real();
                let x = self.val(array).as_real();
                let sv = self.val(scalar).as_real()[IxDyn(&[])];
                let gx = Tensor::Real(g * sv);
                let gdot: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                self.accumulate(array, gx);
                self.accumulate(scalar, Tensor::scalar(gdot));
            }
            Op::Repeat(a, n) => {
                let g = match grad {
                    Tensor::Real(g) => {
                        let mut acc = g.index_axis(Axis(0), 0).to_owned();
                        for l in 1..n {
                            acc += &g.index_axis(Axis(0), l);
                        }
                        Tensor::Real(acc.into_dyn())
                    }
                    Tensor::Complex(g) => {
                        let mut acc = g.index_axis(Axis(0), 0).to_owned();
                        for l in 1..n {
                            acc += &g.index_axis(Axis(0), l);
                        }
                        Tensor::Complex(acc.into_dyn())
                    }
                };
                self.accumulate(a, g);
            }
            Op::ComplexFromParts { re, im } => {
                let g = grad.as_complex();
                self.accumulate(re, Tensor::Real(g.mapv(|v| v.re)));
                self.accumulate(im, Tensor::Real(g.mapv(|v| v.im)));
            }
            Op::PolarUnit(a) => {
                let g = grad.as_complex();
                let out = self.nodes[node].value.as_complex();
                let mut gt = ArrayD::zeros(self.val(a).as_real().raw_dim());
                for ((o, &gv), &ev) in gt.iter_mut().zip(g.iter()).zip(out.iter()) {
                    *o = (ev.conj() * gv).im;
                }
                self.accumulate(a, Tensor::Real(gt));
            }
            Op::Reshape(a, _) => {
                let src_shape = IxDyn(self.val(a).shape());
                let delta = match grad {
                    Tensor::Real(g) => Tensor::Real(
                        g.to_owned()
                            .into_shape_with_order(src_shape)
                            .expect("same length"),
                    ),
                    Tensor::Complex(g) => Tensor::Complex(
                        g.to_owned()
                            .into_shape_with_order(src_shape)
                            .expect("same length"),
                    ),
                };
                self.accumulate(a, delta);
            }
        }
        Ok(())
    }
}

/// y[i] = x[i+1] - x[i] along `axis`, trailing slice zero.
fn forward_diff<T>(x: &ArrayD<T>, axis: usize) -> ArrayD<T>
where
    T: Copy + std::ops::Sub<Output = T> + Default,
{
    let mut out = ArrayD::from_elem(x.raw_dim(), T::default());
    let n = x.shape()[axis];
    if n < 2 {
        return out;
    }
    let head = x.slice_axis(Axis(axis), ndarray::Slice::from(1..));
    let tail = x.slice_axis(Axis(axis), ndarray::Slice::from(..n - 1));
    let mut dst = out.slice_axis_mut(Axis(axis), ndarray::Slice::from(..n - 1));
    ndarray::Zip::from(&mut dst)
        .and(&head)
        .and(&tail)
        .for_each(|d, &a, &b| *d = a - b);
    out
}

/// Adjoint of [`forward_diff`]: g_x[j] = g[j-1] - g[j] with the trailing
/// gradient slice ignored (it multiplies a constant zero).
fn forward_diff_adjoint<T>(g: &ArrayD<T>, axis: usize) -> ArrayD<T>
where
    T: Copy + std::ops::Sub<Output = T> + Default,
{
    let mut out = ArrayD::from_elem(g.raw_dim(), T::default());
    let n = g.shape()[axis];
    if n < 2 {
        return out;
    }
    {
        let src = g.slice_axis(Axis(axis), ndarray::Slice::from(..n - 1));
        let mut dst = out.slice_axis_mut(Axis(axis), ndarray::Slice::from(1..));
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = s);
    }
    {
        let src = g.slice_axis(Axis(axis), ndarray::Slice::from(..n - 1));
        let mut dst = out.slice_axis_mut(Axis(axis), ndarray::Slice::from(..n - 1));
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = *d - s);
    }
    out
}
