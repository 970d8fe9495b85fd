//! Trainable layers with explicit forward and backward passes.
//!
//! Convolutions are stride 1 and lower to GEMM over an unfolded column
//! buffer. The buffer is built a band of output rows at a time so large
//! frames never materialize the full `c_in*k*k x h*w` matrix.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::gemm::{gemm, MatMut, MatRef};
use crate::tensor::{Shape, Tensor4};
use crate::{Error, Real, Result};

/// Upper bound on elements in one unfolded column band.
const COLUMN_BUDGET: usize = 1 << 21;

/// Weight `(c_out, c_in, k, k)` and bias `c_out` of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S> {
    pub weight: Tensor4<S>,
    pub bias: Vec<S>,
}

impl<S: Real> ConvParams<S> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor4::zeros(Shape::new(c_out, c_in, k, k)),
            bias: vec![S::zero(); c_out],
        }
    }

    /// Fan-in uniform init in `±sqrt(1 / (c_in*k*k))`, zero bias.
    pub fn fan_in<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let bound = num_traits::Float::sqrt(1.0 / (c_in * k * k) as f64);
        let shape = Shape::new(c_out, c_in, k, k);
        let data = (0..shape.len())
            .map(|_| S::from_f64(rng.random_range(-bound..bound)))
            .collect();
        ConvParams {
            weight: Tensor4::from_vec(shape, data).expect("length matches"),
            bias: vec![S::zero(); c_out],
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn num_values(&self) -> usize {
        self.weight.shape().len() + self.bias.len()
    }

    pub fn cast<T: Real>(&self) -> ConvParams<T> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| T::from_f64(b.to_f64())).collect(),
        }
    }
}

/// Gradients of a convolution: input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrad<S> {
    pub d_input: Tensor4<S>,
    pub d_params: ConvParams<S>,
}

/// Gradients of a deformable convolution.
#[derive(Debug, Clone)]
pub struct DeformGrad<S> {
    pub d_input: Tensor4<S>,
    pub d_offsets: Tensor4<S>,
    pub d_params: ConvParams<S>,
}

/// Geometry of one stride-1 convolution over a single batch item.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl Geom {
    fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn band_rows(&self) -> usize {
        (COLUMN_BUDGET / (self.rows() * self.out_w()).max(1)).clamp(1, self.out_h().max(1))
    }
    /// Whether the unfolded matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Range of output columns whose tap at `kx` lands inside `[0, w)`.
#[inline]
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

fn im2col<S: Real>(x: &[S], g: Geom, r0: usize, r1: usize, cols: &mut [S]) {
    let (ow, hw) = (g.out_w(), g.h * g.w);
    let p = (r1 - r0) * ow;
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                for oy in r0..r1 {
                    let d = &mut dst[(oy - r0) * ow..(oy - r0 + 1) * ow];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        d.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..];
                    d[..lo].fill(S::zero());
                    let shift = lo + kx - g.pad;
                    d[lo..hi].copy_from_slice(&src[shift..shift + hi - lo]);
                    d[hi..].fill(S::zero());
                }
            }
        }
    }
}

fn col2im_add<S: Real>(cols: &[S], g: Geom, r0: usize, r1: usize, d_x: &mut [S]) {
    let (ow, hw) = (g.out_w(), g.h * g.w);
    let p = (r1 - r0) * ow;
    for ci in 0..g.c_in {
        let plane = &mut d_x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                if lo >= hi {
                    continue;
                }
                for oy in r0..r1 {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[(oy - r0) * ow + lo..(oy - r0) * ow + hi];
                    let shift = lo + kx - g.pad;
                    let d = &mut plane[iy as usize * g.w + shift..iy as usize * g.w + shift + hi - lo];
                    d.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

/// Convolution of one batch item; `out` is `(c_out, out_h, out_w)`.
pub(crate) fn conv_sample<S: Real>(x: &[S], g: Geom, p: &ConvParams<S>, out: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (c_out, k_rows) = (p.c_out(), g.rows());
    let opix = oh * ow;
    for (o, plane) in out.chunks_exact_mut(opix).enumerate() {
        plane.fill(p.bias[o]);
    }
    let wmat = MatRef::rows(p.weight.data(), c_out, k_rows, k_rows);
    if g.is_pointwise() {
        let xm = MatRef::rows(x, k_rows, opix, opix);
        gemm(S::one(), wmat, xm, S::one(), MatMut::rows(out, c_out, opix, opix));
        return;
    }
    let band = g.band_rows();
    let mut cols = vec![S::zero(); k_rows * band * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + band).min(oh);
        let np = (r1 - r0) * ow;
        let cols = &mut cols[..k_rows * np];
        im2col(x, g, r0, r1, cols);
        let dst = MatMut::rows(&mut out[r0 * ow..], c_out, np, opix);
        gemm(S::one(), wmat, MatRef::rows(cols, k_rows, np, np), S::one(), dst);
        r0 = r1;
    }
}

/// Backward of [`conv_sample`]; accumulates into `d_w`, `d_b` and, when
/// given, `d_x`.
pub(crate) fn conv_sample_backward<S: Real>(
    x: &[S],
    g: Geom,
    p: &ConvParams<S>,
    d_out: &[S],
    mut d_x: Option<&mut [S]>,
    d_w: &mut [S],
    d_b: &mut [S],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (c_out, k_rows) = (p.c_out(), g.rows());
    let opix = oh * ow;
    for (o, plane) in d_out.chunks_exact(opix).enumerate() {
        d_b[o] += plane.iter().copied().sum::<S>();
    }
    let wmat = MatRef::rows(p.weight.data(), c_out, k_rows, k_rows);
    if g.is_pointwise() {
        let dm = MatRef::rows(d_out, c_out, opix, opix);
        let xm = MatRef::rows(x, k_rows, opix, opix);
        gemm(S::one(), dm, xm.t(), S::one(), MatMut::rows(d_w, c_out, k_rows, k_rows));
        if let Some(d_x) = d_x {
            gemm(S::one(), wmat.t(), dm, S::one(), MatMut::rows(d_x, k_rows, opix, opix));
        }
        return;
    }
    let band = g.band_rows();
    let mut cols = vec![S::zero(); k_rows * band * ow];
    let mut dcols = if d_x.is_some() {
        vec![S::zero(); k_rows * band * ow]
    } else {
        Vec::new()
    };
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + band).min(oh);
        let np = (r1 - r0) * ow;
        let cols = &mut cols[..k_rows * np];
        im2col(x, g, r0, r1, cols);
        let dm = MatRef::rows(&d_out[r0 * ow..], c_out, np, opix);
        let cm = MatRef::rows(&*cols, k_rows, np, np);
        gemm(S::one(), dm, cm.t(), S::one(), MatMut::rows(d_w, c_out, k_rows, k_rows));
        if let Some(d_x) = d_x.as_deref_mut() {
            let dcols = &mut dcols[..k_rows * np];
            gemm(S::one(), wmat.t(), dm, S::zero(), MatMut::rows(dcols, k_rows, np, np));
            col2im_add(dcols, g, r0, r1, d_x);
        }
        r0 = r1;
    }
}

fn conv_geom<S: Real>(x: Shape, p: &ConvParams<S>, pad: usize, op: &'static str) -> Result<Geom> {
    if x.c != p.c_in() {
        return Err(Error::ChannelMismatch {
            op,
            expected: p.c_in(),
            found: x.c,
        });
    }
    let k = p.kernel();
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::ShapeMismatch {
            op,
            expected: Shape::new(x.n, x.c, k, k),
            found: x,
        });
    }
    Ok(Geom {
        c_in: x.c,
        h: x.h,
        w: x.w,
        k,
        pad,
    })
}

/// Zero-padded stride-1 cross-correlation.
pub fn conv2d<S: Real>(x: &Tensor4<S>, p: &ConvParams<S>, pad: usize) -> Result<Tensor4<S>> {
    let s = x.shape();
    let g = conv_geom(s, p, pad, "conv2d")?;
    let mut out = Tensor4::zeros(Shape::new(s.n, p.c_out(), g.out_h(), g.out_w()));
    for b in 0..s.n {
        conv_sample(x.sample(b), g, p, out.sample_mut(b));
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given its forward input.
pub fn conv2d_backward<S: Real>(
    x: &Tensor4<S>,
    p: &ConvParams<S>,
    pad: usize,
    d_out: &Tensor4<S>,
) -> Result<ConvGrad<S>> {
    let mut d_params = ConvParams::zeros(p.c_out(), p.c_in(), p.kernel());
    let d_input = conv2d_backward_acc(x, p, pad, d_out, &mut d_params, true)?;
    Ok(ConvGrad {
        d_input: d_input.expect("requested"),
        d_params,
    })
}

/// Like [`conv2d_backward`] but accumulates parameter gradients into
/// `d_params`; the input gradient is computed only when `want_input`.
pub(crate) fn conv2d_backward_acc<S: Real>(
    x: &Tensor4<S>,
    p: &ConvParams<S>,
    pad: usize,
    d_out: &Tensor4<S>,
    d_params: &mut ConvParams<S>,
    want_input: bool,
) -> Result<Option<Tensor4<S>>> {
    let s = x.shape();
    let g = conv_geom(s, p, pad, "conv2d_backward")?;
    let expected = Shape::new(s.n, p.c_out(), g.out_h(), g.out_w());
    if d_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected,
            found: d_out.shape(),
        });
    }
    let mut d_x = want_input.then(|| Tensor4::zeros(s));
    let ConvParams { weight, bias } = d_params;
    for b in 0..s.n {
        let dx = d_x.as_mut().map(|t| t.sample_mut(b));
        conv_sample_backward(x.sample(b), g, p, d_out.sample(b), dx, weight.data_mut(), bias);
    }
    Ok(d_x)
}

pub fn relu<S: Real>(x: &Tensor4<S>) -> Tensor4<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Passes `d_out` where the forward input was strictly positive.
pub fn relu_backward<S: Real>(x: &Tensor4<S>, d_out: &Tensor4<S>) -> Result<Tensor4<S>> {
    if x.shape() != d_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            expected: x.shape(),
            found: d_out.shape(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Four-neighbour bilinear taps at a real position. Neighbours outside the
/// plane carry a zero mask so they contribute nothing.
#[derive(Debug, Clone, Copy)]
struct Bilinear<S> {
    idx: [usize; 4],
    mask: [S; 4],
    ly: S,
    lx: S,
}

impl<S: Real> Bilinear<S> {
    #[inline]
    fn new(y: S, x: S, h: usize, w: usize) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        let (ly, lx) = (y - fy, x - fx);
        // Far-away positions are clamped to a fully masked cell.
        let y0 = fy.to_f64().clamp(-2.0, h as f64 + 1.0) as isize;
        let x0 = fx.to_f64().clamp(-2.0, w as f64 + 1.0) as isize;
        let mut idx = [0usize; 4];
        let mut mask = [S::zero(); 4];
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (i, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                idx[i] = cy as usize * w + cx as usize;
                mask[i] = S::one();
            }
        }
        Bilinear { idx, mask, ly, lx }
    }

    #[inline]
    fn weights(&self) -> [S; 4] {
        let (hy, hx) = (S::one() - self.ly, S::one() - self.lx);
        [
            hy * hx * self.mask[0],
            hy * self.lx * self.mask[1],
            self.ly * hx * self.mask[2],
            self.ly * self.lx * self.mask[3],
        ]
    }

    #[inline]
    fn corners(&self, plane: &[S]) -> [S; 4] {
        [
            plane[self.idx[0]] * self.mask[0],
            plane[self.idx[1]] * self.mask[1],
            plane[self.idx[2]] * self.mask[2],
            plane[self.idx[3]] * self.mask[3],
        ]
    }

    #[inline]
    fn sample(&self, plane: &[S]) -> S {
        let wt = self.weights();
        let mut acc = S::zero();
        for i in 0..4 {
            acc += wt[i] * plane[self.idx[i]];
        }
        acc
    }

    /// Partial derivatives of the sampled value in y and x on the cell
    /// `[floor, floor + 1]`.
    #[inline]
    fn grad(&self, plane: &[S]) -> (S, S) {
        let [v00, v01, v10, v11] = self.corners(plane);
        let (hy, hx) = (S::one() - self.ly, S::one() - self.lx);
        (
            hx * (v10 - v00) + self.lx * (v11 - v01),
            hy * (v01 - v00) + self.ly * (v11 - v10),
        )
    }
}

/// Bilinear interpolation of a row-major `h x w` plane at `(y, x)`; samples
/// outside the plane read as zero.
pub fn bilinear_sample<S: Real>(plane: &[S], h: usize, w: usize, y: S, x: S) -> S {
    assert_eq!(plane.len(), h * w, "plane length");
    if h == 0 || w == 0 {
        return S::zero();
    }
    Bilinear::new(y, x, h, w).sample(plane)
}

/// Integer tap displacements `(dy, dx)` of a `k x k` kernel, row-major.
pub fn kernel_grid(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    let mut taps = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            taps.push((dy, dx));
        }
    }
    taps
}

struct DeformGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl DeformGeom {
    fn taps(&self) -> usize {
        self.k * self.k
    }
    fn rows(&self) -> usize {
        self.c_in * self.taps()
    }
    fn band_rows(&self) -> usize {
        (COLUMN_BUDGET / (self.rows() * self.w).max(1)).clamp(1, self.h.max(1))
    }
}

/// Bilinear taps for output rows `[r0, r1)`, tap-major.
fn deform_taps<S: Real>(off: &[S], g: &DeformGeom, r0: usize, r1: usize, out: &mut Vec<Bilinear<S>>) {
    out.clear();
    let hw = g.h * g.w;
    let r = (g.k / 2) as isize;
    for j in 0..g.taps() {
        let ty = (j / g.k) as isize - r;
        let tx = (j % g.k) as isize - r;
        let oy_plane = &off[2 * j * hw..(2 * j + 1) * hw];
        let ox_plane = &off[(2 * j + 1) * hw..(2 * j + 2) * hw];
        for y in r0..r1 {
            for x in 0..g.w {
                let i = y * g.w + x;
                let py = S::from_f64((y as isize + ty) as f64) + oy_plane[i];
                let px = S::from_f64((x as isize + tx) as f64) + ox_plane[i];
                out.push(Bilinear::new(py, px, g.h, g.w));
            }
        }
    }
}

fn deform_cols<S: Real>(x: &[S], g: &DeformGeom, taps: &[Bilinear<S>], np: usize, cols: &mut [S]) {
    let hw = g.h * g.w;
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for j in 0..g.taps() {
            let row = ci * g.taps() + j;
            let dst = &mut cols[row * np..(row + 1) * np];
            for (d, t) in dst.iter_mut().zip(&taps[j * np..(j + 1) * np]) {
                *d = t.sample(plane);
            }
        }
    }
}

fn deform_geom<S: Real>(
    x: &Tensor4<S>,
    offsets: &Tensor4<S>,
    p: &ConvParams<S>,
    op: &'static str,
) -> Result<DeformGeom> {
    let (s, o) = (x.shape(), offsets.shape());
    let k = p.kernel();
    if s.c != p.c_in() {
        return Err(Error::ChannelMismatch {
            op,
            expected: p.c_in(),
            found: s.c,
        });
    }
    if o.c != 2 * k * k {
        return Err(Error::OffsetChannels {
            expected: 2 * k * k,
            found: o.c,
        });
    }
    if o.n != s.n || o.h != s.h || o.w != s.w {
        return Err(Error::ShapeMismatch {
            op,
            expected: Shape::new(s.n, 2 * k * k, s.h, s.w),
            found: o,
        });
    }
    Ok(DeformGeom {
        c_in: s.c,
        h: s.h,
        w: s.w,
        k,
    })
}

/// Deformable convolution: every kernel tap samples the input at its regular
/// grid position displaced by the per-pixel offset `(dy, dx)` of that tap.
///
/// `offsets` is `(n, 2*k*k, h, w)` with channels `(2j, 2j+1)` holding the
/// `(dy, dx)` of tap `j` in row-major kernel order. One offset field is
/// shared by all input and output channels.
pub fn deform_conv2d<S: Real>(x: &Tensor4<S>, offsets: &Tensor4<S>, p: &ConvParams<S>) -> Result<Tensor4<S>> {
    let g = deform_geom(x, offsets, p, "deform_conv2d")?;
    let s = x.shape();
    let (c_out, k_rows, hw) = (p.c_out(), g.rows(), s.plane());
    let mut out = Tensor4::zeros(Shape::new(s.n, c_out, s.h, s.w));
    let band = g.band_rows();
    let mut cols = vec![S::zero(); k_rows * band * s.w];
    let mut taps = Vec::new();
    let wmat = MatRef::rows(p.weight.data(), c_out, k_rows, k_rows);
    for b in 0..s.n {
        let (xs, off) = (x.sample(b), offsets.sample(b));
        let o = out.sample_mut(b);
        for (c, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(p.bias[c]);
        }
        let mut r0 = 0;
        while r0 < s.h {
            let r1 = (r0 + band).min(s.h);
            let np = (r1 - r0) * s.w;
            deform_taps(off, &g, r0, r1, &mut taps);
            let cols = &mut cols[..k_rows * np];
            deform_cols(xs, &g, &taps, np, cols);
            let dst = MatMut::rows(&mut o[r0 * s.w..], c_out, np, hw);
            gemm(S::one(), wmat, MatRef::rows(cols, k_rows, np, np), S::one(), dst);
            r0 = r1;
        }
    }
    Ok(out)
}

/// Gradients of [`deform_conv2d`] with respect to input, offsets, weight
/// and bias.
pub fn deform_conv2d_backward<S: Real>(
    x: &Tensor4<S>,
    offsets: &Tensor4<S>,
    p: &ConvParams<S>,
    d_out: &Tensor4<S>,
) -> Result<DeformGrad<S>> {
    let mut d_params = ConvParams::zeros(p.c_out(), p.c_in(), p.kernel());
    let (d_input, d_offsets) = deform_conv2d_backward_acc(x, offsets, p, d_out, &mut d_params)?;
    Ok(DeformGrad {
        d_input,
        d_offsets,
        d_params,
    })
}

pub(crate) fn deform_conv2d_backward_acc<S: Real>(
    x: &Tensor4<S>,
    offsets: &Tensor4<S>,
    p: &ConvParams<S>,
    d_out: &Tensor4<S>,
    d_params: &mut ConvParams<S>,
) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let g = deform_geom(x, offsets, p, "deform_conv2d_backward")?;
    let s = x.shape();
    let (c_out, k_rows, hw, ntaps) = (p.c_out(), g.rows(), s.plane(), g.taps());
    let expected = Shape::new(s.n, c_out, s.h, s.w);
    if d_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "deform_conv2d_backward",
            expected,
            found: d_out.shape(),
        });
    }
    let mut d_x = Tensor4::zeros(s);
    let mut d_off = Tensor4::zeros(offsets.shape());
    let band = g.band_rows();
    let mut cols = vec![S::zero(); k_rows * band * s.w];
    let mut dcols = vec![S::zero(); k_rows * band * s.w];
    let mut taps = Vec::new();
    let wmat = MatRef::rows(p.weight.data(), c_out, k_rows, k_rows);
    let ConvParams { weight: d_w, bias: d_b } = d_params;
    for b in 0..s.n {
        let (xs, off, dout) = (x.sample(b), offsets.sample(b), d_out.sample(b));
        for (c, plane) in dout.chunks_exact(hw).enumerate() {
            d_b[c] += plane.iter().copied().sum::<S>();
        }
        let dxs = d_x.sample_mut(b);
        let doff = d_off.sample_mut(b);
        let mut r0 = 0;
        while r0 < s.h {
            let r1 = (r0 + band).min(s.h);
            let np = (r1 - r0) * s.w;
            deform_taps(off, &g, r0, r1, &mut taps);
            let cols = &mut cols[..k_rows * np];
            deform_cols(xs, &g, &taps, np, cols);
            let dm = MatRef::rows(&dout[r0 * s.w..], c_out, np, hw);
            let cm = MatRef::rows(&*cols, k_rows, np, np);
            gemm(S::one(), dm, cm.t(), S::one(), MatMut::rows(d_w.data_mut(), c_out, k_rows, k_rows));
            let dcols = &mut dcols[..k_rows * np];
            gemm(S::one(), wmat.t(), dm, S::zero(), MatMut::rows(dcols, k_rows, np, np));
            for ci in 0..g.c_in {
                let plane = &xs[ci * hw..(ci + 1) * hw];
                let dplane = &mut dxs[ci * hw..(ci + 1) * hw];
                for j in 0..ntaps {
                    let row = &dcols[(ci * ntaps + j) * np..(ci * ntaps + j + 1) * np];
                    let tj = &taps[j * np..(j + 1) * np];
                    let (dy_plane, rest) = doff[2 * j * hw..(2 * j + 2) * hw].split_at_mut(hw);
                    let dy_band = &mut dy_plane[r0 * s.w..r1 * s.w];
                    let dx_band = &mut rest[r0 * s.w..r1 * s.w];
                    for (q, (&gv, t)) in row.iter().zip(tj).enumerate() {
                        let wt = t.weights();
                        for c in 0..4 {
                            dplane[t.idx[c]] += gv * wt[c];
                        }
                        let (gy, gx) = t.grad(plane);
                        dy_band[q] += gv * gy;
                        dx_band[q] += gv * gx;
                    }
                }
            }
            r0 = r1;
        }
    }
    Ok((d_x, d_off))
}

/// Residual dense block: `depth` densely connected 3x3 conv + ReLU layers of
/// width `growth`, a 1x1 local fusion back to the block width, and a
/// residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct RdbParams<S> {
    pub dense: Vec<ConvParams<S>>,
    pub fusion: ConvParams<S>,
}

impl<S: Real> RdbParams<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, growth: usize, depth: usize, rng: &mut R) -> Self {
        let dense = (0..depth)
            .map(|i| ConvParams::fan_in(growth, channels + i * growth, 3, rng))
            .collect();
        let fusion = ConvParams::fan_in(channels, channels + depth * growth, 1, rng);
        RdbParams { dense, fusion }
    }

    pub fn zeros(channels: usize, growth: usize, depth: usize) -> Self {
        RdbParams {
            dense: (0..depth)
                .map(|i| ConvParams::zeros(growth, channels + i * growth, 3))
                .collect(),
            fusion: ConvParams::zeros(channels, channels + depth * growth, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.fusion.c_out()
    }

    pub fn growth(&self) -> usize {
        self.dense.first().map_or(0, |d| d.c_out())
    }

    pub fn num_values(&self) -> usize {
        self.dense.iter().map(ConvParams::num_values).sum::<usize>() + self.fusion.num_values()
    }

    pub fn cast<T: Real>(&self) -> RdbParams<T> {
        RdbParams {
            dense: self.dense.iter().map(ConvParams::cast).collect(),
            fusion: self.fusion.cast(),
        }
    }
}

/// Dense concatenation `[x, relu(layer0), relu(layer1), ...]` kept for backward.
#[derive(Debug, Clone)]
pub struct RdbTape<S> {
    buffer: Tensor4<S>,
}

pub fn rdb_forward<S: Real>(x: &Tensor4<S>, p: &RdbParams<S>) -> Result<Tensor4<S>> {
    rdb_forward_tape(x, p).map(|(out, _)| out)
}

pub fn rdb_forward_tape<S: Real>(x: &Tensor4<S>, p: &RdbParams<S>) -> Result<(Tensor4<S>, RdbTape<S>)> {
    let s = x.shape();
    let (g0, growth) = (p.channels(), p.growth());
    if s.c != g0 {
        return Err(Error::ChannelMismatch {
            op: "rdb_forward",
            expected: g0,
            found: s.c,
        });
    }
    let total = g0 + p.dense.len() * growth;
    let hw = s.plane();
    let mut buffer = Tensor4::zeros(Shape::new(s.n, total, s.h, s.w));
    let mut out = Tensor4::zeros(s);
    for b in 0..s.n {
        let buf = buffer.sample_mut(b);
        buf[..g0 * hw].copy_from_slice(x.sample(b));
        for (i, layer) in p.dense.iter().enumerate() {
            let c_in = g0 + i * growth;
            let (input, rest) = buf.split_at_mut(c_in * hw);
            let dst = &mut rest[..growth * hw];
            let g = Geom {
                c_in,
                h: s.h,
                w: s.w,
                k: 3,
                pad: 1,
            };
            conv_sample(input, g, layer, dst);
            dst.iter_mut().for_each(|v| {
                if *v <= S::zero() {
                    *v = S::zero()
                }
            });
        }
        let g = Geom {
            c_in: total,
            h: s.h,
            w: s.w,
            k: 1,
            pad: 0,
        };
        let o = out.sample_mut(b);
        conv_sample(buf, g, &p.fusion, o);
        o.iter_mut().zip(x.sample(b)).for_each(|(a, &v)| *a += v);
    }
    Ok((out, RdbTape { buffer }))
}

/// Returns the input gradient and accumulates parameter gradients into
/// `d_params`.
pub fn rdb_backward<S: Real>(
    p: &RdbParams<S>,
    tape: &RdbTape<S>,
    d_out: &Tensor4<S>,
    d_params: &mut RdbParams<S>,
) -> Result<Tensor4<S>> {
    let bs = tape.buffer.shape();
    let (g0, growth) = (p.channels(), p.growth());
    let s = Shape::new(bs.n, g0, bs.h, bs.w);
    if d_out.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "rdb_backward",
            expected: s,
            found: d_out.shape(),
        });
    }
    let hw = s.plane();
    let total = bs.c;
    let mut d_x = Tensor4::zeros(s);
    let mut d_buf = vec![S::zero(); total * hw];
    for b in 0..s.n {
        let buf = tape.buffer.sample(b);
        let dout = d_out.sample(b);
        d_buf.fill(S::zero());
        let g = Geom {
            c_in: total,
            h: s.h,
            w: s.w,
            k: 1,
            pad: 0,
        };
        let ConvParams { weight, bias } = &mut d_params.fusion;
        conv_sample_backward(buf, g, &p.fusion, dout, Some(&mut d_buf), weight.data_mut(), bias);
        for (i, layer) in p.dense.iter().enumerate().rev() {
            let c_in = g0 + i * growth;
            let (d_in, rest) = d_buf.split_at_mut(c_in * hw);
            let d_layer = &mut rest[..growth * hw];
            let act = &buf[c_in * hw..(c_in + growth) * hw];
            d_layer.iter_mut().zip(act).for_each(|(d, &a)| {
                if a <= S::zero() {
                    *d = S::zero()
                }
            });
            let g = Geom {
                c_in,
                h: s.h,
                w: s.w,
                k: 3,
                pad: 1,
            };
            let ConvParams { weight, bias } = &mut d_params.dense[i];
            conv_sample_backward(&buf[..c_in * hw], g, layer, d_layer, Some(d_in), weight.data_mut(), bias);
        }
        let dx = d_x.sample_mut(b);
        for ((d, &a), &r) in dx.iter_mut().zip(&d_buf[..g0 * hw]).zip(dout) {
            *d = a + r;
        }
    }
    Ok(d_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random<S: Real>(shape: Shape, r: &mut ChaCha8Rng) -> Tensor4<S> {
        Tensor4::from_fn(shape, |_, _, _, _| S::from_f64(r.random_range(-1.0..1.0)))
    }

    fn identity_kernel(c: usize) -> ConvParams<f32> {
        let mut p = ConvParams::zeros(c, c, 3);
        for i in 0..c {
            p.weight.set(i, i, 1, 1, 1.0);
        }
        p
    }

    /// Direct six-loop convolution.
    fn conv_oracle(x: &Tensor4<f64>, p: &ConvParams<f64>, pad: isize) -> Tensor4<f64> {
        let s = x.shape();
        let k = p.kernel() as isize;
        let (oh, ow) = (s.h as isize + 2 * pad - k + 1, s.w as isize + 2 * pad - k + 1);
        Tensor4::from_fn(Shape::new(s.n, p.c_out(), oh as usize, ow as usize), |b, o, y, x_| {
            let mut acc = p.bias[o];
            for c in 0..s.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky - pad;
                        let ix = x_ as isize + kx - pad;
                        if iy >= 0 && ix >= 0 && iy < s.h as isize && ix < s.w as isize {
                            acc += p.weight.at(o, c, ky as usize, kx as usize) * x.at(b, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random::<f32>(Shape::new(2, 3, 5, 7), &mut rng(1));
        let y = conv2d(&x, &identity_kernel(3), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_on_constant() {
        let x = Tensor4::full(Shape::new(1, 1, 5, 5), 0.5f32);
        let mut p = ConvParams::zeros(1, 1, 3);
        p.weight.data_mut().fill(1.0);
        let y = conv2d(&x, &p, 1).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 4.5);
        assert_eq!(y.at(0, 0, 0, 0), 2.0);
    }

    #[test]
    fn conv_matches_direct_loops() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let x = random::<f64>(Shape::new(1, 2, 5, 5), &mut r);
            let mut p = ConvParams::<f64>::fan_in(3, 2, 3, &mut r);
            p.bias = vec![0.1, -0.2, 0.3];
            let expect = conv_oracle(&x, &p, 1);
            let got = conv2d(&x.cast::<f32>(), &p.cast::<f32>(), 1).unwrap();
            assert!(got.cast::<f64>().max_abs_diff(&expect).unwrap() < 1e-5);
            // Valid and 1x1 geometries go through the same path.
            let got = conv2d(&x, &p, 0).unwrap();
            assert!(got.max_abs_diff(&conv_oracle(&x, &p, 0)).unwrap() < 1e-12);
            let q = ConvParams::<f64>::fan_in(4, 2, 1, &mut r);
            assert!(conv2d(&x, &q, 0).unwrap().max_abs_diff(&conv_oracle(&x, &q, 0)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::zeros(1, 3, 3);
        assert!(matches!(conv2d(&x, &p, 1), Err(Error::ChannelMismatch { .. })));
        let d = Tensor4::zeros(Shape::new(1, 1, 3, 4));
        let q = ConvParams::zeros(1, 2, 3);
        assert!(matches!(conv2d_backward(&x, &q, 1, &d), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_backward_zero_and_identity() {
        let x = random::<f32>(Shape::new(2, 2, 4, 6), &mut rng(3));
        let p = identity_kernel(2);
        let zero = conv2d_backward(&x, &p, 1, &Tensor4::zeros(x.shape())).unwrap();
        assert!(zero.d_input.data().iter().all(|&v| v == 0.0));
        assert!(zero.d_params.weight.data().iter().all(|&v| v == 0.0));
        assert!(zero.d_params.bias.iter().all(|&v| v == 0.0));
        let d = random::<f32>(x.shape(), &mut rng(4));
        assert_eq!(conv2d_backward(&x, &p, 1, &d).unwrap().d_input, d);
    }

    #[test]
    fn conv_backward_is_linear_in_d_out() {
        let mut r = rng(5);
        let x = random::<f64>(Shape::new(1, 3, 5, 4), &mut r);
        let p = ConvParams::<f64>::fan_in(2, 3, 3, &mut r);
        let d = random::<f64>(Shape::new(1, 2, 5, 4), &mut r);
        let g1 = conv2d_backward(&x, &p, 1, &d).unwrap();
        let g3 = conv2d_backward(&x, &p, 1, &d.scale(3.0)).unwrap();
        assert!(g3.d_input.max_abs_diff(&g1.d_input.scale(3.0)).unwrap() < 1e-12);
        assert!(g3.d_params.weight.max_abs_diff(&g1.d_params.weight.scale(3.0)).unwrap() < 1e-12);
    }

    #[test]
    fn relu_cases() {
        let s = Shape::new(1, 1, 1, 3);
        let x = Tensor4::from_vec(s, vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let s2 = Shape::new(1, 1, 1, 2);
        let x = Tensor4::from_vec(s2, vec![-1.0f32, 2.0]).unwrap();
        let d = Tensor4::from_vec(s2, vec![5.0f32, 7.0]).unwrap();
        assert_eq!(relu_backward(&x, &d).unwrap().data(), &[0.0, 7.0]);
        // The kink itself passes no gradient.
        let x0 = Tensor4::from_vec(s2, vec![0.0f32, 0.0]).unwrap();
        assert_eq!(relu_backward(&x0, &d).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_cases() {
        let plane = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.0, 0.0), 3.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 1.0), 2.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.5, 0.5), 2.5);
        assert_eq!(bilinear_sample(&plane, 2, 2, -5.0, -5.0), 0.0);
        // Half a pixel past the edge blends with the zero border.
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 1.5), 1.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 1e30, -1e30), 0.0);
    }

    #[test]
    fn bilinear_is_continuous_across_cells() {
        let mut r = rng(8);
        let plane: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        for &(y, x) in &[(1.0, 2.0), (-1.0, 0.3), (3.0, 4.0), (0.0, -1.0)] {
            let at = bilinear_sample(&plane, 4, 5, y, x);
            for &(ey, ex) in &[(1e-9, 0.0), (-1e-9, 0.0), (0.0, 1e-9), (0.0, -1e-9)] {
                assert!((bilinear_sample(&plane, 4, 5, y + ey, x + ex) - at).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kernel_grid_is_symmetric() {
        let g = kernel_grid(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (-1, -1));
        assert_eq!(g[1], (-1, 0));
        assert_eq!(g[8], (1, 1));
        assert!(g.iter().all(|&(y, x)| g.contains(&(-y, -x))));
    }

    fn uniform_offsets(n: usize, h: usize, w: usize, dy: f32, dx: f32) -> Tensor4<f32> {
        Tensor4::from_fn(Shape::new(n, 18, h, w), |_, c, _, _| if c % 2 == 0 { dy } else { dx })
    }

    #[test]
    fn deform_zero_offsets_is_conv() {
        let mut r = rng(9);
        let x = random::<f32>(Shape::new(2, 3, 6, 5), &mut r);
        let mut p = ConvParams::<f32>::fan_in(4, 3, 3, &mut r);
        p.bias = vec![0.5, -0.5, 0.25, 0.0];
        let off = Tensor4::zeros(Shape::new(2, 18, 6, 5));
        let d = deform_conv2d(&x, &off, &p).unwrap();
        assert!(d.max_abs_diff(&conv2d(&x, &p, 1).unwrap()).unwrap() < 1e-5);
    }

    #[test]
    fn deform_integer_shift_reads_neighbour() {
        let mut r = rng(10);
        let x = random::<f32>(Shape::new(1, 1, 5, 6), &mut r);
        let y = deform_conv2d(&x, &uniform_offsets(1, 5, 6, 0.0, 1.0), &identity_kernel(1)).unwrap();
        for yy in 0..5 {
            for xx in 0..6 {
                let expect = if xx + 1 < 6 { x.at(0, 0, yy, xx + 1) } else { 0.0 };
                assert_eq!(y.at(0, 0, yy, xx), expect);
            }
        }
    }

    #[test]
    fn deform_half_pixel_shift() {
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 4), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = deform_conv2d(&x, &uniform_offsets(1, 1, 4, 0.0, 0.5), &identity_kernel(1)).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 2.0]);
    }

    #[test]
    fn deform_rejects_bad_offsets() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let p = ConvParams::zeros(1, 1, 3);
        let bad_c = Tensor4::zeros(Shape::new(1, 16, 4, 4));
        assert!(matches!(
            deform_conv2d(&x, &bad_c, &p),
            Err(Error::OffsetChannels { expected: 18, found: 16 })
        ));
        let bad_hw = Tensor4::zeros(Shape::new(1, 18, 4, 5));
        assert!(matches!(deform_conv2d(&x, &bad_hw, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn deform_backward_zero_and_conv_equivalence() {
        let mut r = rng(11);
        let x = random::<f32>(Shape::new(2, 3, 5, 6), &mut r);
        let p = ConvParams::<f32>::fan_in(2, 3, 3, &mut r);
        let off = Tensor4::zeros(Shape::new(2, 18, 5, 6));
        let zero = deform_conv2d_backward(&x, &off, &p, &Tensor4::zeros(Shape::new(2, 2, 5, 6))).unwrap();
        assert!(zero.d_input.data().iter().all(|&v| v == 0.0));
        assert!(zero.d_offsets.data().iter().all(|&v| v == 0.0));
        assert!(zero.d_params.weight.data().iter().all(|&v| v == 0.0));
        let d = random::<f32>(Shape::new(2, 2, 5, 6), &mut r);
        let dg = deform_conv2d_backward(&x, &off, &p, &d).unwrap();
        let cg = conv2d_backward(&x, &p, 1, &d).unwrap();
        assert!(dg.d_input.max_abs_diff(&cg.d_input).unwrap() < 1e-5);
        assert!(dg.d_params.weight.max_abs_diff(&cg.d_params.weight).unwrap() < 1e-5);
    }

    #[test]
    fn rdb_zero_fusion_is_identity() {
        let mut r = rng(12);
        let mut p = RdbParams::<f32>::new(8, 4, 3, &mut r);
        p.fusion = ConvParams::zeros(8, 8 + 12, 1);
        for (h, w) in [(4, 4), (7, 3), (1, 9)] {
            let x = random::<f32>(Shape::new(2, 8, h, w), &mut r);
            assert_eq!(rdb_forward(&x, &p).unwrap(), x);
        }
        let x = random::<f32>(Shape::new(1, 6, 4, 4), &mut r);
        assert!(matches!(rdb_forward(&x, &p), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn rdb_matches_composed_layers() {
        let mut r = rng(13);
        let p = RdbParams::<f64>::new(4, 3, 2, &mut r);
        let x = random::<f64>(Shape::new(2, 4, 5, 5), &mut r);
        let a0 = relu(&conv2d(&x, &p.dense[0], 1).unwrap());
        let c0 = crate::tensor::concat_channels(&[&x, &a0]).unwrap();
        let a1 = relu(&conv2d(&c0, &p.dense[1], 1).unwrap());
        let c1 = crate::tensor::concat_channels(&[&c0, &a1]).unwrap();
        let expect = crate::tensor::add(&x, &conv2d(&c1, &p.fusion, 0).unwrap()).unwrap();
        assert!(rdb_forward(&x, &p).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }
}
