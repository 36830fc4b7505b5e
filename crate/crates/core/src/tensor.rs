//! Dense channels-last 4-D tensors.

use std::fmt;
use std::io::{Read, Write};
use std::ops::BitOr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

const TENSOR_MAGIC: &[u8; 4] = b"NKT1";

/// Extents of a feature map in `(N, H, W, C)` order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    /// `(1, 1, 1, c)`: the shape of per-channel parameters.
    pub fn channels(c: usize) -> Self {
        Shape([1, 1, 1, c])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.0[1] + h) * self.0[2] + w) * self.0[3] + c
    }

    pub fn dim(&self, axis: Axis) -> usize {
        self.0[axis as usize]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n},{h},{w},{c})")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N = 0,
    H = 1,
    W = 2,
    C = 3,
}

/// A set of axes to reduce over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Axes(u8);

impl Axes {
    pub const N: Axes = Axes(1);
    pub const H: Axes = Axes(2);
    pub const W: Axes = Axes(4);
    pub const C: Axes = Axes(8);
    pub const HW: Axes = Axes(2 | 4);
    pub const HWC: Axes = Axes(2 | 4 | 8);
    pub const NHW: Axes = Axes(1 | 2 | 4);

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & (1 << axis as u8) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for Axes {
    type Output = Axes;
    fn bitor(self, rhs: Axes) -> Axes {
        Axes(self.0 | rhs.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline(always)]
    pub(crate) fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Neg,
}

/// Right-hand operand of an elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Rhs<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Rhs<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Rhs::Tensor(t)
    }
}

impl<T: Scalar> From<T> for Rhs<'_, T> {
    fn from(v: T) -> Self {
        Rhs::Scalar(v)
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    Channel,
}

pub(crate) fn broadcast_kind(a: Shape, b: Shape) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.is_scalar() {
        Ok(Broadcast::Scalar)
    } else if b == Shape::channels(a.c()) {
        Ok(Broadcast::Channel)
    } else {
        Err(Error::ShapeMismatch {
            lhs: a,
            rhs: b,
            context: "elementwise operands must match, or the right one must be a scalar or per-channel tensor",
        })
    }
}

/// `out[i] = op(a[i], b[broadcast(i)])`.
pub(crate) fn binary_kernel<T: Scalar>(op: BinaryOp, a: &[T], b: &[T], kind: Broadcast) -> Vec<T> {
    match kind {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b[0];
            a.iter().map(|&x| op.apply(x, y)).collect()
        }
        Broadcast::Channel => {
            let c = b.len();
            let mut out = Vec::with_capacity(a.len());
            for row in a.chunks_exact(c) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| op.apply(x, y)));
            }
            out
        }
    }
}

/// Immutable dense tensor in `(N, H, W, C)` row-major order.
///
/// Cloning is cheap: the element buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

fn validate_shape(shape: Shape) -> Result<()> {
    if shape.0.contains(&0) {
        return Err(Error::InvalidShape {
            shape,
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking the length and that every value is finite.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {} values, got {}", shape.numel(), data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for h in 0..shape.h() {
                for w in 0..shape.w() {
                    for c in 0..shape.c() {
                        data.push(f(n, h, w, c));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Mutable access to the elements; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.offset(n, h, w, c)]
    }

    /// The single value of a `(1,1,1,1)` tensor, or the first element.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        validate_shape(shape)?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                lhs: self.shape,
                rhs: shape,
                context: "reshape must preserve the element count",
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Applies `op` pointwise. `rhs` may be a tensor of equal shape, a
    /// `(1,1,1,1)` tensor, a `(1,1,1,C)` tensor or a plain scalar.
    pub fn binary<'a>(&self, op: BinaryOp, rhs: impl Into<Rhs<'a, T>>) -> Result<Self> {
        let scalar_holder;
        let (b, kind) = match rhs.into() {
            Rhs::Tensor(t) => (t.data(), broadcast_kind(self.shape, t.shape)?),
            Rhs::Scalar(v) => {
                scalar_holder = [v];
                (&scalar_holder[..], Broadcast::Scalar)
            }
        };
        if op == BinaryOp::Div && b.iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        let out = binary_kernel(op, &self.data, b, kind);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("elementwise op"));
        }
        Ok(Tensor::from_parts(self.shape, out))
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let out = match op {
            UnaryOp::Exp => self.map(T::exp),
            UnaryOp::Neg => self.map(|v| -v),
        };
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("elementwise op"));
        }
        Ok(out)
    }

    pub fn add<'a>(&self, rhs: impl Into<Rhs<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Add, rhs)
    }
    pub fn sub<'a>(&self, rhs: impl Into<Rhs<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Sub, rhs)
    }
    pub fn mul<'a>(&self, rhs: impl Into<Rhs<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Mul, rhs)
    }
    pub fn div<'a>(&self, rhs: impl Into<Rhs<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Div, rhs)
    }

    /// Population mean and variance over `axes`.
    ///
    /// With `channel_group = Some((g, size))` only channels
    /// `g*size .. (g+1)*size` take part. Reduced axes keep extent 1 in the
    /// outputs; an unreduced C axis keeps the group's `size` channels.
    pub fn reduce_moments(
        &self,
        axes: Axes,
        channel_group: Option<(usize, usize)>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if axes.is_empty() {
            return Err(Error::EmptyReduction("no axes given".into()));
        }
        let s = self.shape;
        let (c0, cn) = match channel_group {
            Some((g, size)) => {
                if size == 0 || (g + 1) * size > s.c() {
                    return Err(Error::EmptyReduction(format!(
                        "channel group {g} of size {size} outside 0..{}",
                        s.c()
                    )));
                }
                (g * size, size)
            }
            None => (0, s.c()),
        };
        let mut out = [s.n(), s.h(), s.w(), cn];
        for (i, axis) in [Axis::N, Axis::H, Axis::W, Axis::C].into_iter().enumerate() {
            if axes.contains(axis) {
                out[i] = 1;
            }
        }
        let out_shape = Shape(out);
        let count = (s.numel() / s.c() * cn) / out_shape.numel();
        let index = |n: usize, h: usize, w: usize, c: usize| {
            let pick = |v: usize, axis| if axes.contains(axis) { 0 } else { v };
            out_shape.offset(
                pick(n, Axis::N),
                pick(h, Axis::H),
                pick(w, Axis::W),
                pick(c, Axis::C),
            )
        };
        let mut sum = vec![0.0f64; out_shape.numel()];
        for_each_index(s, c0, cn, |n, h, w, c, off| {
            sum[index(n, h, w, c - c0)] += self.data[off].as_f64();
        });
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut sq = vec![0.0f64; out_shape.numel()];
        for_each_index(s, c0, cn, |n, h, w, c, off| {
            let i = index(n, h, w, c - c0);
            let d = self.data[off].as_f64() - mean[i];
            sq[i] += d * d;
        });
        let var = sq.iter().map(|v| T::of(v / count as f64)).collect();
        Ok((
            Tensor::from_parts(out_shape, mean.into_iter().map(T::of).collect()),
            Tensor::from_parts(out_shape, var),
        ))
    }

    /// Concatenates along C. Every operand must agree on N, H and W.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = first.shape;
        for p in parts {
            let s = p.shape;
            if (s.n(), s.h(), s.w()) != (base.n(), base.h(), base.w()) {
                return Err(Error::ShapeMismatch {
                    lhs: base,
                    rhs: s,
                    context: "channel concat requires equal N, H, W",
                });
            }
        }
        let total_c: usize = parts.iter().map(|p| p.shape.c()).sum();
        let shape = Shape::new(base.n(), base.h(), base.w(), total_c);
        let pixels = base.n() * base.h() * base.w();
        let mut data = Vec::with_capacity(shape.numel());
        for px in 0..pixels {
            for p in parts {
                let c = p.shape.c();
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Tensor::from_parts(shape, data))
    }

    /// Channels `start .. start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.shape.c();
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                shape: self.shape,
                reason: format!("channel slice {start}..{} out of range", start + len),
            });
        }
        let shape = Shape::new(self.shape.n(), self.shape.h(), self.shape.w(), len);
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|px| &px[start..start + len])
            .copied()
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Center-aligned zero padding or cropping to `(height, width)`.
    pub fn pad_crop(&self, height: usize, width: usize) -> Result<Self> {
        let s = self.shape;
        let shape = Shape::new(s.n(), height, width, s.c());
        validate_shape(shape)?;
        // offset of the source relative to the destination
        let dh = height as isize / 2 - s.h() as isize / 2;
        let dw = width as isize / 2 - s.w() as isize / 2;
        Ok(Tensor::from_fn(shape, |n, h, w, c| {
            let sh = h as isize - dh;
            let sw = w as isize - dw;
            if sh < 0 || sw < 0 || sh >= s.h() as isize || sw >= s.w() as isize {
                T::zero()
            } else {
                self.get(n, sh as usize, sw as usize, c)
            }
        }))
    }

    /// 2x2 window maximum; H and W must be even.
    pub fn max_pool2(&self) -> Result<Self> {
        Ok(crate::kernels::max_pool2(self)?.0)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self) -> Self {
        let s = self.shape;
        Tensor::from_fn(Shape::new(s.n(), s.h() * 2, s.w() * 2, s.c()), |n, h, w, c| {
            self.get(n, h / 2, w / 2, c)
        })
    }

    /// Writes the `NKT1` binary form: magic, dtype byte, four little-endian
    /// `u32` extents, then the raw little-endian elements.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(21 + self.data.len() * T::DTYPE.size());
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(T::DTYPE.code());
        for d in self.shape.0 {
            let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in self.data.iter() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads an `NKT1` tensor. Data stored in the other precision is
    /// converted.
    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut header = [0u8; 21];
        input.read_exact(&mut header)?;
        if &header[..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let dtype = DType::from_code(header[4])
            .ok_or_else(|| Error::Format(format!("unknown dtype byte {}", header[4])))?;
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 5 + 4 * i;
            *d = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
        }
        let shape = Shape(dims);
        validate_shape(shape)?;
        let mut raw = vec![0u8; shape.numel() * dtype.size()];
        input.read_exact(&mut raw)?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Tensor::new(shape, data)
    }
}

fn for_each_index(
    s: Shape,
    c0: usize,
    cn: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    for n in 0..s.n() {
        for h in 0..s.h() {
            for w in 0..s.w() {
                let base = s.offset(n, h, w, 0);
                for c in c0..c0 + cn {
                    f(n, h, w, c, base + c);
                }
            }
        }
    }
}
