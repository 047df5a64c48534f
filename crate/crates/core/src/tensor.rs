//! Dense 4D tensors in `(n, h, w, c)` row-major layout.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Tensor shape `[n, h, w, c]`. Every dimension is at least one.
///
/// Parameter tensors reuse the same four slots; a convolution kernel is
/// stored as `[kh, kw, in_c, out_c]` and a per-channel vector as `[1, 1, 1, c]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn vector(c: usize) -> Self {
        Shape([1, 1, 1, c])
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }

    /// Row-major offset of `(n, y, x, ch)`.
    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize, ch: usize) -> usize {
        ((n * self.0[1] + y) * self.0[2] + x) * self.0[3] + ch
    }

    /// Whether `other` broadcasts onto `self`: each dim equal or 1.
    pub fn accepts_broadcast(&self, other: &Shape) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(&a, &b)| a == b || b == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n}, {h}, {w}, {c})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Contiguous dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {shape}"));
        }
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(!shape.0.contains(&0), "zero-sized dimension in {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f([i, y, x, ch]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi)))
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, ch: usize) -> T {
        self.data[self.shape.offset(n, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, ch: usize, v: T) {
        let o = self.shape.offset(n, y, x, ch);
        self.data[o] = v;
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One sample of the batch as a `(1, h, w, c)` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape.h() * self.shape.w() * self.shape.c();
        Tensor {
            shape: Shape::new(1, self.shape.h(), self.shape.w(), self.shape.c()),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate samples along the batch axis. All inputs must share `(h, w, c)`.
    pub fn stack(samples: &[Tensor<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let [_, h, w, c] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for s in samples {
            let [sn, sh, sw, sc] = s.shape.0;
            if (sh, sw, sc) != (h, w, c) {
                return Err(shape_err!("stack: {} vs {}", s.shape, first.shape));
            }
            n += sn;
            data.extend_from_slice(&s.data);
        }
        Self::from_vec(Shape::new(n, h, w, c), data)
    }

    /// Convert element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Elementwise product with `b` broadcast onto `self` (see [`Shape::accepts_broadcast`]).
    pub fn mul_broadcast(&self, b: &Tensor<T>) -> Result<Self> {
        if !self.shape.accepts_broadcast(&b.shape) {
            return Err(shape_err!("cannot broadcast {} onto {}", b.shape, self.shape));
        }
        let mut out = self.clone();
        for_each_broadcast(self.shape, b.shape, |ia, ib| {
            out.data[ia] = self.data[ia] * b.data[ib];
        });
        Ok(out)
    }
}

/// Visit every `(index into a, index into b)` pair of a broadcast `b -> a`.
pub(crate) fn for_each_broadcast(a: Shape, b: Shape, mut f: impl FnMut(usize, usize)) {
    let [n, h, w, c] = a.0;
    let [bn, bh, bw, bc] = b.0;
    let mut ia = 0;
    for i in 0..n {
        let i_b = if bn == 1 { 0 } else { i };
        for y in 0..h {
            let y_b = if bh == 1 { 0 } else { y };
            for x in 0..w {
                let x_b = if bw == 1 { 0 } else { x };
                let base = ((i_b * bh + y_b) * bw + x_b) * bc;
                if bc == 1 {
                    for _ in 0..c {
                        f(ia, base);
                        ia += 1;
                    }
                } else {
                    for ch in 0..c {
                        f(ia, base + ch);
                        ia += 1;
                    }
                }
            }
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
