//! Dense planes/tensors and the 2-D convolution primitives everything else
//! builds on.
//!
//! Convention: `conv2d_same` is cross-correlation with zero padding and
//! stride 1, so the output matches the input size. `conv2d_transpose_same`
//! is its exact adjoint,
//!
//! ```text
//! <conv2d_same(x, K), y> == <x, conv2d_transpose_same(y, K)>
//! ```
//!
//! for all finite `x`, `y`, `K`. Declared or learned kernels absorb the flip
//! that distinguishes true convolution from cross-correlation, so codebases
//! using the other convention must flip kernels when comparing results.
//!
//! Every operation keeps a fixed per-element summation order, so results are
//! bitwise reproducible regardless of how callers parallelize around them.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64` scalars; the workhorse for image channels,
/// rain maps and kernel taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    /// All-zeros plane. Extents must be positive.
    pub fn zeros(h: usize, w: usize) -> Plane {
        assert!(h >= 1 && w >= 1, "plane extents must be positive");
        Plane { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Plane> {
        if h < 1 || w < 1 {
            return Err(Error::Config(format!("plane extents must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "plane {h}x{w} needs {} scalars, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Plane { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Plane {
        let mut p = Plane::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                p.data[i * w + j] = f(i, j);
            }
        }
        p
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Plane {
        let mut p = Plane::zeros(h, w);
        p.data.fill(value);
        p
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.w..(i + 1) * self.w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// self + other, elementwise. Panics on shape mismatch (programmer error;
    /// public operations validate shapes before getting here).
    pub fn add(&self, other: &Plane) -> Plane {
        assert_eq!(self.shape(), other.shape(), "plane add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Plane { h: self.h, w: self.w, data }
    }

    pub fn sub(&self, other: &Plane) -> Plane {
        assert_eq!(self.shape(), other.shape(), "plane sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Plane { h: self.h, w: self.w, data }
    }

    pub fn scaled(&self, s: f64) -> Plane {
        self.map(|v| v * s)
    }

    /// self += alpha * other.
    pub fn axpy(&mut self, alpha: f64, other: &Plane) {
        assert_eq!(self.shape(), other.shape(), "plane axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Plane) {
        assert_eq!(self.shape(), other.shape(), "plane add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        sum_slice(&self.data)
    }

    pub fn dot(&self, other: &Plane) -> f64 {
        assert_eq!(self.shape(), other.shape(), "plane dot shape mismatch");
        dot_slices(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy out an `h` x `w` window with top-left corner (i0, j0).
    pub fn crop(&self, i0: usize, j0: usize, h: usize, w: usize) -> Plane {
        assert!(i0 + h <= self.h && j0 + w <= self.w, "crop window out of bounds");
        let mut out = Plane::zeros(h, w);
        for i in 0..h {
            let src = &self.data[(i0 + i) * self.w + j0..(i0 + i) * self.w + j0 + w];
            out.data[i * w..(i + 1) * w].copy_from_slice(src);
        }
        out
    }
}

/// Deterministic 4-lane unrolled dot product. The fixed lane structure keeps
/// results identical across runs while letting the compiler vectorize the
/// reduction.
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0_f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sum_slice(a: &[f64]) -> f64 {
    let mut acc = [0.0_f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i];
        acc[1] += a[i + 1];
        acc[2] += a[i + 2];
        acc[3] += a[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Generic dense tensor: positive extents, row-major data, last index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() {
            return Err(Error::Config("tensor rank must be at least 1".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("tensor extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} scalars, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0));
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Plane> for Tensor {
    fn from(p: Plane) -> Tensor {
        Tensor { shape: vec![p.h, p.w], data: p.data }
    }
}

impl TryFrom<Tensor> for Plane {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Plane> {
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "plane requires a rank-2 tensor, got rank {}",
                t.rank()
            )));
        }
        Plane::from_vec(t.shape[0], t.shape[1], t.data)
    }
}

/// Sum of elementwise products. Shapes must match exactly.
pub fn inner(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape != y.shape {
        return Err(Error::ShapeMismatch(format!(
            "inner product needs equal shapes, got {:?} vs {:?}",
            x.shape, y.shape
        )));
    }
    Ok(dot_slices(&x.data, &y.data))
}

/// Squared Frobenius norm, `inner(x, x)`.
pub fn frob_norm_sq(x: &Tensor) -> f64 {
    dot_slices(&x.data, &x.data)
}

fn check_conv_kernel(kernel: &Plane) -> Result<usize> {
    let (kh, kw) = kernel.shape();
    if kh != kw {
        return Err(Error::Config(format!("convolution kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::Config(format!("convolution kernel size must be odd, got {kh}")));
    }
    Ok(kh)
}

/// "Same"-size cross-correlation with zero padding of (k-1)/2 and stride 1:
///
/// ```text
/// out[i, j] = sum_{u, v} K[u, v] * x[i + u - p, j + v - p],   p = (k-1)/2
/// ```
///
/// with out-of-range reads treated as zero. Linear in both arguments.
pub fn conv2d_same(x: &Plane, kernel: &Plane) -> Result<Plane> {
    check_conv_kernel(kernel)?;
    let mut out = Plane::zeros(x.height(), x.width());
    accumulate_conv2d(&mut out, x, kernel, 1.0, false);
    Ok(out)
}

/// Exact adjoint of [`conv2d_same`] in its first argument:
/// `<conv2d_same(x, K), y> == <x, conv2d_transpose_same(y, K)>`.
///
/// Equivalent to cross-correlating with the 180-degree-flipped kernel.
pub fn conv2d_transpose_same(y: &Plane, kernel: &Plane) -> Result<Plane> {
    check_conv_kernel(kernel)?;
    let mut out = Plane::zeros(y.height(), y.width());
    accumulate_conv2d(&mut out, y, kernel, 1.0, true);
    Ok(out)
}

/// out += scale * conv(x, K) (or the transpose when `flipped`). The kernel
/// taps are visited in a fixed (u, v) order and each tap contributes one
/// shifted AXPY pass, so every output element has a fixed summation order.
/// Exact zero taps are skipped: adding `0.0 * x` is a bitwise no-op for
/// finite data, and streak kernels are mostly zeros.
pub(crate) fn accumulate_conv2d(out: &mut Plane, x: &Plane, kernel: &Plane, scale: f64, flipped: bool) {
    let (h, w) = x.shape();
    debug_assert_eq!(out.shape(), (h, w));
    let k = kernel.height();
    let p = (k / 2) as isize;
    for u in 0..k {
        for v in 0..k {
            let tap = kernel.at(u, v) * scale;
            if tap == 0.0 {
                continue;
            }
            let (di, dj) = if flipped {
                (p - u as isize, p - v as isize)
            } else {
                (u as isize - p, v as isize - p)
            };
            // rows i with 0 <= i + di < h
            let i_lo = (-di).max(0) as usize;
            let i_hi = ((h as isize - di).min(h as isize)).max(0) as usize;
            let j_lo = (-dj).max(0) as usize;
            let j_hi = ((w as isize - dj).min(w as isize)).max(0) as usize;
            if j_lo >= j_hi {
                continue;
            }
            for i in i_lo..i_hi {
                let src_i = (i as isize + di) as usize;
                let src_j = (j_lo as isize + dj) as usize;
                let src = &x.data[src_i * w + src_j..src_i * w + src_j + (j_hi - j_lo)];
                let dst = &mut out.data[i * w + j_lo..i * w + j_hi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += tap * s;
                }
            }
        }
    }
}

/// Gradient of `conv2d_same(x, K)` with respect to the kernel taps:
///
/// ```text
/// grad_K[u, v] = sum_{i, j} g[i, j] * x[i + u - p, j + v - p]
/// ```
///
/// where `g` is the upstream gradient at the conv output. For the transposed
/// convolution the kernel gradient is this quantity flipped 180 degrees;
/// pass `flipped = true`.
pub fn conv2d_kernel_grad(x: &Plane, g: &Plane, k: usize, flipped: bool) -> Result<Plane> {
    if x.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "kernel grad needs matching planes, got {:?} vs {:?}",
            x.shape(),
            g.shape()
        )));
    }
    if k % 2 == 0 || k == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    let (h, w) = x.shape();
    let p = (k / 2) as isize;
    let mut grad = Plane::zeros(k, k);
    for u in 0..k {
        for v in 0..k {
            let (di, dj) = (u as isize - p, v as isize - p);
            let i_lo = (-di).max(0) as usize;
            let i_hi = ((h as isize - di).min(h as isize)).max(0) as usize;
            let j_lo = (-dj).max(0) as usize;
            let j_hi = ((w as isize - dj).min(w as isize)).max(0) as usize;
            if j_lo >= j_hi {
                continue;
            }
            let mut acc = 0.0;
            for i in i_lo..i_hi {
                let src_i = (i as isize + di) as usize;
                let src_j = (j_lo as isize + dj) as usize;
                let xs = &x.data[src_i * w + src_j..src_i * w + src_j + (j_hi - j_lo)];
                let gs = &g.data[i * w + j_lo..i * w + j_hi];
                acc += dot_slices(gs, xs);
            }
            if flipped {
                grad.set(k - 1 - u, k - 1 - v, acc);
            } else {
                grad.set(u, v, acc);
            }
        }
    }
    Ok(grad)
}

/// Multi-channel 3x3 (or any odd k) convolution kernel mapping `c_in` planes
/// to `c_out` planes. Taps are stored per (output, input) channel pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    c_in: usize,
    c_out: usize,
    k: usize,
    /// taps[o * c_in + i] is the k x k tap plane routing input i to output o.
    taps: Vec<Plane>,
}

impl ConvKernel {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Result<ConvKernel> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let taps = vec![Plane::zeros(k, k); c_in * c_out];
        Ok(ConvKernel { c_in, c_out, k, taps })
    }

    pub fn from_taps(c_in: usize, c_out: usize, taps: Vec<Plane>) -> Result<ConvKernel> {
        if taps.len() != c_in * c_out || taps.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tap planes, got {}",
                c_in * c_out,
                taps.len()
            )));
        }
        let k = check_conv_kernel(&taps[0])?;
        if taps.iter().any(|t| t.shape() != (k, k)) {
            return Err(Error::ShapeMismatch("tap planes must share one kernel size".into()));
        }
        Ok(ConvKernel { c_in, c_out, k, taps })
    }

    /// Identity wiring: delta taps on matching channel pairs, zeros elsewhere.
    /// Requires `c_out <= c_in` or vice versa; extra channels map to zero.
    pub fn identity(c_in: usize, c_out: usize, k: usize) -> Result<ConvKernel> {
        let mut kernel = ConvKernel::zeros(c_in, c_out, k)?;
        let c = k / 2;
        for ch in 0..c_in.min(c_out) {
            kernel.taps[ch * c_in + ch].set(c, c, 1.0);
        }
        Ok(kernel)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn tap(&self, out_ch: usize, in_ch: usize) -> &Plane {
        &self.taps[out_ch * self.c_in + in_ch]
    }

    pub fn tap_mut(&mut self, out_ch: usize, in_ch: usize) -> &mut Plane {
        &mut self.taps[out_ch * self.c_in + in_ch]
    }

    /// y[o] = sum_i conv2d_same(x[i], tap[o, i])
    pub fn forward(&self, x: &[Plane]) -> Result<Vec<Plane>> {
        if x.len() != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel expects {} input channels, got {}",
                self.c_in,
                x.len()
            )));
        }
        let (h, w) = x[0].shape();
        let mut out = Vec::with_capacity(self.c_out);
        for o in 0..self.c_out {
            let mut acc = Plane::zeros(h, w);
            for (i, xi) in x.iter().enumerate() {
                accumulate_conv2d(&mut acc, xi, self.tap(o, i), 1.0, false);
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Adjoint of [`ConvKernel::forward`] in the input:
    /// g_x[i] = sum_o conv2d_transpose_same(g_y[o], tap[o, i]).
    pub fn input_grad(&self, g_out: &[Plane]) -> Result<Vec<Plane>> {
        if g_out.len() != self.c_out {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel expects {} output channels, got {}",
                self.c_out,
                g_out.len()
            )));
        }
        let (h, w) = g_out[0].shape();
        let mut grads = Vec::with_capacity(self.c_in);
        for i in 0..self.c_in {
            let mut acc = Plane::zeros(h, w);
            for (o, g) in g_out.iter().enumerate() {
                accumulate_conv2d(&mut acc, g, self.tap(o, i), 1.0, true);
            }
            grads.push(acc);
        }
        Ok(grads)
    }

    /// Gradient of the taps given the forward input and the upstream output
    /// gradient. Same shape as `self`.
    pub fn kernel_grad(&self, x: &[Plane], g_out: &[Plane]) -> Result<ConvKernel> {
        if x.len() != self.c_in || g_out.len() != self.c_out {
            return Err(Error::ShapeMismatch("kernel grad channel mismatch".into()));
        }
        let mut grads = Vec::with_capacity(self.c_in * self.c_out);
        for o in 0..self.c_out {
            for xi in x.iter() {
                grads.push(conv2d_kernel_grad(xi, &g_out[o], self.k, false)?);
            }
        }
        Ok(ConvKernel { c_in: self.c_in, c_out: self.c_out, k: self.k, taps: grads })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> ConvKernel {
        ConvKernel {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            taps: self.taps.iter().map(|t| t.map(f)).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ConvKernel) {
        assert_eq!((self.c_in, self.c_out, self.k), (other.c_in, other.c_out, other.k));
        for (a, b) in self.taps.iter_mut().zip(&other.taps) {
            a.axpy(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.taps.iter().all(|t| t.is_finite())
    }

    /// Serialize as a rank-4 tensor with extents (k, k, c_in, c_out).
    pub fn to_tensor(&self) -> Tensor {
        let (k, ci, co) = (self.k, self.c_in, self.c_out);
        let mut data = vec![0.0; k * k * ci * co];
        for u in 0..k {
            for v in 0..k {
                for i in 0..ci {
                    for o in 0..co {
                        data[((u * k + v) * ci + i) * co + o] = self.tap(o, i).at(u, v);
                    }
                }
            }
        }
        Tensor { shape: vec![k, k, ci, co], data }
    }

    pub fn from_tensor(t: &Tensor) -> Result<ConvKernel> {
        if t.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel tensor must be rank 4, got {}",
                t.rank()
            )));
        }
        let (k, k2, ci, co) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("kernel tensor must be square, got {k}x{k2}")));
        }
        let mut kernel = ConvKernel::zeros(ci, co, k)?;
        for u in 0..k {
            for v in 0..k {
                for i in 0..ci {
                    for o in 0..co {
                        let val = t.data[((u * k + v) * ci + i) * co + o];
                        kernel.tap_mut(o, i).set(u, v, val);
                    }
                }
            }
        }
        Ok(kernel)
    }
}

// ---------------------------------------------------------------------------
// RCDT tensor binary format
// ---------------------------------------------------------------------------
//
// magic "RCDT", u32 LE version (= 1), u32 LE rank, rank x u32 LE extents,
// then f32 LE payload, row-major with the last index fastest. Payloads are
// stored in single precision; in-memory doubles are rounded on write and
// widened losslessly on read.

const RCDT_MAGIC: &[u8; 4] = b"RCDT";
const RCDT_VERSION: u32 = 1;
const RCDT_MAX_RANK: u32 = 16;

pub fn write_rcdt(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(RCDT_MAGIC)?;
    w.write_all(&RCDT_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::corrupt(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_rcdt(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::corrupt("truncated RCDT header"))?;
    if &magic != RCDT_MAGIC {
        return Err(Error::corrupt("bad magic, not an RCDT tensor"));
    }
    let version = read_u32(r, "RCDT version")?;
    if version != RCDT_VERSION {
        return Err(Error::corrupt(format!("unsupported RCDT version {version}")));
    }
    let rank = read_u32(r, "RCDT rank")?;
    if rank == 0 || rank > RCDT_MAX_RANK {
        return Err(Error::corrupt(format!("implausible RCDT rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut len: u64 = 1;
    for i in 0..rank {
        let e = read_u32(r, "RCDT extent")?;
        if e == 0 {
            return Err(Error::corrupt(format!("zero extent at axis {i}")));
        }
        len = len.checked_mul(e as u64).ok_or_else(|| Error::corrupt("extent overflow"))?;
        shape.push(e as usize);
    }
    if len > (1 << 31) {
        return Err(Error::corrupt(format!("payload of {len} scalars is implausibly large")));
    }
    let mut data = Vec::with_capacity(len as usize);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf).map_err(|_| Error::corrupt("truncated RCDT payload"))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let t = Tensor::new(shape, data)?;
    if !t.is_finite() {
        return Err(Error::corrupt("RCDT payload contains non-finite values"));
    }
    Ok(t)
}

/// Write a tensor to a standalone `.rcdt` file.
pub fn save_rcdt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    write_rcdt(&mut f, t)
}

/// Load a standalone `.rcdt` file; trailing bytes are rejected.
pub fn load_rcdt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(Error::Io)?;
    let t = read_rcdt(&mut f).map_err(|e| e.with_path(path))?;
    let mut rest = [0u8; 1];
    match f.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::corrupt("trailing bytes after RCDT payload").with_path(path)),
        Err(e) => Err(Error::Io(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution oracle: explicit zero-padded quadruple
    /// loop, written before the shipped implementation and kept independent
    /// of it.
    pub(crate) fn conv_oracle(x: &Plane, kernel: &Plane) -> Plane {
        let (h, w) = x.shape();
        let k = kernel.height();
        let p = (k / 2) as isize;
        let mut out = Plane::zeros(h, w);
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for u in 0..k as isize {
                    for v in 0..k as isize {
                        let (si, sj) = (i + u - p, j + v - p);
                        if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                            acc += kernel.at(u as usize, v as usize)
                                * x.at(si as usize, sj as usize);
                        }
                    }
                }
                out.set(i as usize, j as usize, acc);
            }
        }
        out
    }

    /// Materialize conv2d_same(., K) as an (H*W) x (H*W) matrix by applying
    /// the oracle to basis planes.
    fn conv_matrix(h: usize, w: usize, kernel: &Plane) -> Vec<Vec<f64>> {
        let n = h * w;
        let mut cols = vec![vec![0.0; n]; n];
        for e in 0..n {
            let mut basis = Plane::zeros(h, w);
            basis.data_mut()[e] = 1.0;
            let col = conv_oracle(&basis, kernel);
            for r in 0..n {
                cols[e][r] = col.data()[r];
            }
        }
        cols
    }

    fn rng_plane(h: usize, w: usize, seed: u64) -> Plane {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = rng_plane(5, 5, 1);
        let mut delta = Plane::zeros(3, 3);
        delta.set(1, 1, 1.0);
        let y = conv2d_same(&x, &delta).unwrap();
        assert_eq!(x, y);
        let yt = conv2d_transpose_same(&x, &delta).unwrap();
        assert_eq!(x, yt);
    }

    #[test]
    fn zero_input_stays_zero() {
        let x = Plane::zeros(4, 6);
        let kernel = rng_plane(3, 3, 2);
        let y = conv2d_same(&x, &kernel).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_with_ones_kernel_matches_oracle() {
        let x = Plane::from_vec(3, 3, (1..=9).map(|v| v as f64).collect()).unwrap();
        let kernel = Plane::constant(3, 3, 1.0);
        let got = conv2d_same(&x, &kernel).unwrap();
        let want = conv_oracle(&x, &kernel);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
        }
        // spot value: center output = sum of all nine entries
        assert_eq!(got.at(1, 1), 45.0);
    }

    #[test]
    fn conv_matches_oracle_on_small_shapes() {
        let mut seed = 10;
        for h in 1..=6 {
            for w in 1..=6 {
                for k in [1usize, 3, 5] {
                    let x = rng_plane(h, w, seed);
                    let kernel = rng_plane(k, k, seed + 1);
                    seed += 2;
                    let got = conv2d_same(&x, &kernel).unwrap();
                    let want = conv_oracle(&x, &kernel);
                    for (g, wv) in got.data().iter().zip(want.data()) {
                        assert!((g - wv).abs() < 1e-12, "h={h} w={w} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Plane::zeros(4, 4);
        let kernel = Plane::zeros(2, 2);
        assert!(matches!(conv2d_same(&x, &kernel), Err(Error::Config(_))));
        assert!(matches!(conv2d_transpose_same(&x, &kernel), Err(Error::Config(_))));
    }

    #[test]
    fn empty_plane_rejected_at_construction() {
        assert!(Plane::from_vec(0, 3, vec![]).is_err());
        assert!(Plane::from_vec(3, 0, vec![]).is_err());
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let x = rng_plane(8, 8, 3);
        let y = rng_plane(8, 8, 4);
        let kernel = rng_plane(3, 3, 5);
        let lhs = conv2d_same(&x, &kernel).unwrap().dot(&y);
        let rhs = x.dot(&conv2d_transpose_same(&y, &kernel).unwrap());
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(rel <= 1e-5, "adjoint identity violated: {lhs} vs {rhs}");
    }

    #[test]
    fn transpose_matches_explicit_matrix_transpose() {
        // materialize the conv matrix on a 4x4 grid with a 3x3 kernel and
        // apply its transpose by hand
        let (h, w) = (4, 4);
        let kernel = rng_plane(3, 3, 6);
        let y = rng_plane(h, w, 7);
        let cols = conv_matrix(h, w, &kernel);
        let n = h * w;
        let mut want = vec![0.0; n];
        for e in 0..n {
            // (A^T y)[e] = <column e of A, y>
            for r in 0..n {
                want[e] += cols[e][r] * y.data()[r];
            }
        }
        let got = conv2d_transpose_same(&y, &kernel).unwrap();
        for (g, wv) in got.data().iter().zip(&want) {
            assert!((g - wv).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_grad_matches_finite_differences() {
        let x = rng_plane(5, 5, 8);
        let g = rng_plane(5, 5, 9);
        let k = 3;
        let base = rng_plane(k, k, 10);
        let grad = conv2d_kernel_grad(&x, &g, k, false).unwrap();
        let eps = 1e-6;
        for u in 0..k {
            for v in 0..k {
                let mut plus = base.clone();
                plus.set(u, v, base.at(u, v) + eps);
                let mut minus = base.clone();
                minus.set(u, v, base.at(u, v) - eps);
                let fp = conv2d_same(&x, &plus).unwrap().dot(&g);
                let fm = conv2d_same(&x, &minus).unwrap().dot(&g);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad.at(u, v)).abs() < 1e-7, "tap ({u},{v})");
            }
        }
    }

    #[test]
    fn transpose_kernel_grad_is_flipped() {
        let x = rng_plane(5, 5, 11);
        let g = rng_plane(5, 5, 12);
        let k = 3;
        let base = rng_plane(k, k, 13);
        let grad = conv2d_kernel_grad(&x, &g, k, true).unwrap();
        let eps = 1e-6;
        for u in 0..k {
            for v in 0..k {
                let mut plus = base.clone();
                plus.set(u, v, base.at(u, v) + eps);
                let mut minus = base.clone();
                minus.set(u, v, base.at(u, v) - eps);
                let fp = conv2d_transpose_same(&x, &plus).unwrap().dot(&g);
                let fm = conv2d_transpose_same(&x, &minus).unwrap().dot(&g);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad.at(u, v)).abs() < 1e-7, "tap ({u},{v})");
            }
        }
    }

    #[test]
    fn inner_and_frobenius() {
        let zeros = Tensor::zeros(vec![2, 3]);
        let x = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(inner(&x, &zeros).unwrap(), 0.0);
        assert_eq!(frob_norm_sq(&x), 6.0);

        // scalar-loop oracle on random 5-vectors
        let a = Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.0, -0.7]).unwrap();
        let b = Tensor::new(vec![5], vec![1.1, 0.4, -0.2, 3.0, 0.5]).unwrap();
        let mut want = 0.0;
        for i in 0..5 {
            want += a.data()[i] * b.data()[i];
        }
        assert!((inner(&a, &b).unwrap() - want).abs() < 1e-15);
        assert!(matches!(
            inner(&a, &Tensor::zeros(vec![4])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_kernel_multichannel_roundtrip_and_grads() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (ci, co, k) = (2, 3, 3);
        let mut kernel = ConvKernel::zeros(ci, co, k).unwrap();
        for o in 0..co {
            for i in 0..ci {
                for u in 0..k {
                    for v in 0..k {
                        kernel.tap_mut(o, i).set(u, v, rng.random_range(-1.0..1.0));
                    }
                }
            }
        }
        let t = kernel.to_tensor();
        assert_eq!(t.shape(), &[k, k, ci, co]);
        let back = ConvKernel::from_tensor(&t).unwrap();
        assert_eq!(kernel, back);

        // forward matches per-channel oracle
        let x: Vec<Plane> = (0..ci).map(|i| rng_plane(4, 4, 100 + i as u64)).collect();
        let y = kernel.forward(&x).unwrap();
        for o in 0..co {
            let mut want = Plane::zeros(4, 4);
            for (i, xi) in x.iter().enumerate() {
                want.add_assign(&conv_oracle(xi, kernel.tap(o, i)));
            }
            for (a, b) in y[o].data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // input grad is the exact adjoint of forward
        let g: Vec<Plane> = (0..co).map(|o| rng_plane(4, 4, 200 + o as u64)).collect();
        let gx = kernel.input_grad(&g).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a.dot(b)).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-30) < 1e-12);
    }

    #[test]
    fn identity_conv_kernel_passes_channels_through() {
        let x: Vec<Plane> = (0..3).map(|i| rng_plane(4, 5, 300 + i as u64)).collect();
        let id = ConvKernel::identity(3, 3, 3).unwrap();
        let y = id.forward(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rcdt_roundtrip_and_truncation() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.25).collect()).unwrap();
        let mut buf = Vec::new();
        write_rcdt(&mut buf, &t).unwrap();
        let back = read_rcdt(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);

        // every strict prefix must fail with a structured error, not panic
        for cut in 0..buf.len() {
            let err = read_rcdt(&mut &buf[..cut]);
            assert!(matches!(err, Err(Error::Corrupt { .. })), "cut at {cut}");
        }

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_rcdt(&mut bad.as_slice()), Err(Error::Corrupt { .. })));
    }
}
