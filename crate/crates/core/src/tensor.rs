//! Dense rank-4 tensors in (batch, channel, height, width) row-major order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor4<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<S: Real> Tensor4<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor4 {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::DataLength {
                shape,
                found: data.len(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// All channels of batch item `b`, contiguous.
    #[inline]
    pub fn sample(&self, b: usize) -> &[S] {
        let s = self.shape.sample();
        &self.data[b * s..(b + 1) * s]
    }

    #[inline]
    pub fn sample_mut(&mut self, b: usize) -> &mut [S] {
        let s = self.shape.sample();
        &mut self.data[b * s..(b + 1) * s]
    }

    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[S] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Reinterpret the same buffer under another shape of equal length.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                found: shape,
            });
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn cast<T: Real>(&self) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        check_same(&self.shape, &other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Channels `[c0, c1)` of every batch item.
    pub fn channel_range(&self, c0: usize, c1: usize) -> Self {
        assert!(c0 <= c1 && c1 <= self.shape.c, "channel range out of bounds");
        let p = self.shape.plane();
        let shape = Shape::new(self.shape.n, c1 - c0, self.shape.h, self.shape.w);
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..self.shape.n {
            let s = self.sample(b);
            data.extend_from_slice(&s[c0 * p..c1 * p]);
        }
        Tensor4 { shape, data }
    }

    /// Add `block` into channels `[c0, c0 + block.c)` of every batch item.
    pub(crate) fn add_channel_block(&mut self, c0: usize, block: &Self) {
        let (s, bs) = (self.shape, block.shape);
        assert!(bs.n == s.n && bs.h == s.h && bs.w == s.w && c0 + bs.c <= s.c);
        let p = s.plane();
        for b in 0..s.n {
            let dst = &mut self.sample_mut(b)[c0 * p..(c0 + bs.c) * p];
            dst.iter_mut().zip(block.sample(b)).for_each(|(d, &v)| *d += v);
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_same(a: &Shape, b: &Shape, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: *a,
            found: *b,
        });
    }
    Ok(())
}

/// Concatenate along the channel axis; part `k` occupies the channel block
/// after parts `0..k`.
pub fn concat_channels<S: Real>(parts: &[&Tensor4<S>]) -> Result<Tensor4<S>> {
    let first = parts.first().ok_or(Error::Empty {
        op: "concat_channels",
    })?;
    let base = first.shape;
    let mut c = 0;
    for (index, p) in parts.iter().enumerate() {
        let s = p.shape;
        if s.n != base.n || s.h != base.h || s.w != base.w {
            return Err(Error::ConcatMismatch {
                index,
                expected: base,
                found: s,
            });
        }
        c += s.c;
    }
    let shape = Shape::new(base.n, c, base.h, base.w);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..base.n {
        for p in parts {
            data.extend_from_slice(p.sample(b));
        }
    }
    Ok(Tensor4 { shape, data })
}

/// Split along channels into blocks of the given sizes.
pub fn split_channels<S: Real>(x: &Tensor4<S>, sizes: &[usize]) -> Result<Vec<Tensor4<S>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape.c {
        return Err(Error::ChannelMismatch {
            op: "split_channels",
            expected: x.shape.c,
            found: total,
        });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut c0 = 0;
    for &s in sizes {
        out.push(x.channel_range(c0, c0 + s));
        c0 += s;
    }
    Ok(out)
}

pub fn add<S: Real>(a: &Tensor4<S>, b: &Tensor4<S>) -> Result<Tensor4<S>> {
    check_same(&a.shape, &b.shape, "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Mean or max over each channel's spatial plane; output is (n, c, 1, 1).
pub fn reduce_spatial<S: Real>(x: &Tensor4<S>, kind: Reduce) -> Result<Tensor4<S>> {
    let s = x.shape;
    if s.plane() == 0 {
        return Err(Error::Empty {
            op: "reduce_spatial",
        });
    }
    let inv = S::one() / S::from_f64(s.plane() as f64);
    let data = x
        .data
        .chunks_exact(s.plane())
        .map(|plane| match kind {
            Reduce::Mean => plane.iter().copied().sum::<S>() * inv,
            Reduce::Max => plane.iter().copied().fold(S::neg_infinity(), S::max),
        })
        .collect();
    Ok(Tensor4 {
        shape: Shape::new(s.n, s.c, 1, 1),
        data,
    })
}

/// Per-pixel mean or max across channels; output is (n, 1, h, w).
pub fn reduce_channels<S: Real>(x: &Tensor4<S>, kind: Reduce) -> Result<Tensor4<S>> {
    let s = x.shape;
    if s.c == 0 {
        return Err(Error::Empty {
            op: "reduce_channels",
        });
    }
    let p = s.plane();
    let mut out = Tensor4::zeros(Shape::new(s.n, 1, s.h, s.w));
    let inv = S::one() / S::from_f64(s.c as f64);
    for b in 0..s.n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        dst.copy_from_slice(&src[..p]);
        for c in 1..s.c {
            let plane = &src[c * p..(c + 1) * p];
            match kind {
                Reduce::Mean => dst.iter_mut().zip(plane).for_each(|(d, &v)| *d += v),
                Reduce::Max => dst.iter_mut().zip(plane).for_each(|(d, &v)| *d = d.max(v)),
            }
        }
        if kind == Reduce::Mean {
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Ok(out)
}
