//! The additive rain model and its convolutional-dictionary synthesis.
//!
//! A rainy image decomposes as `O = B + R`. The rain layer is generated by a
//! bank of small kernels applied to sparse per-kernel activation maps:
//!
//! ```text
//! R[c] = sum_n  conv2d_same(M[n], C[n, c]),   c = 0, 1, 2
//! ```
//!
//! Separating a given `O` into `(M, B)` with the bank fixed is the
//! optimization problem
//!
//! ```text
//! min_{M, B}  |O - B - sum_n C_n (x) M_n|_F^2  +  alpha * g1(M)  +  beta * g2(B)
//! ```
//!
//! This module provides the synthesis map, its exact adjoint, the objective
//! value, and the data-fidelity gradients. Gradient convention: [`grad_m`]
//! and [`grad_b`] return `C^T (synth + B - O)` and `synth + B - O`, which is
//! half the derivative of the squared-norm fidelity; central finite
//! differences of the fidelity equal exactly twice these quantities. The
//! solver absorbs the constant into its step sizes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::prox::ProxKind;
use crate::tensor::{accumulate_conv2d, Plane, Tensor};

/// Default number of rain kernels for full-scale banks.
pub const DEFAULT_NUM_KERNELS: usize = 32;

/// Three-channel image; values are nominally in [0, 1] but intermediates may
/// leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    planes: [Plane; 3],
}

impl Image {
    pub fn new(planes: [Plane; 3]) -> Result<Image> {
        let shape = planes[0].shape();
        if planes.iter().any(|p| p.shape() != shape) {
            return Err(Error::ShapeMismatch("image channels must share one shape".into()));
        }
        Ok(Image { planes })
    }

    pub fn zeros(h: usize, w: usize) -> Image {
        Image { planes: [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)] }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Image {
        Image {
            planes: [
                Plane::constant(h, w, v),
                Plane::constant(h, w, v),
                Plane::constant(h, w, v),
            ],
        }
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.planes[0].shape()
    }

    pub fn planes(&self) -> &[Plane; 3] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [Plane; 3] {
        &mut self.planes
    }

    pub fn plane(&self, c: usize) -> &Plane {
        &self.planes[c]
    }

    pub fn add(&self, other: &Image) -> Image {
        Image {
            planes: [
                self.planes[0].add(&other.planes[0]),
                self.planes[1].add(&other.planes[1]),
                self.planes[2].add(&other.planes[2]),
            ],
        }
    }

    pub fn sub(&self, other: &Image) -> Image {
        Image {
            planes: [
                self.planes[0].sub(&other.planes[0]),
                self.planes[1].sub(&other.planes[1]),
                self.planes[2].sub(&other.planes[2]),
            ],
        }
    }

    pub fn scaled(&self, s: f64) -> Image {
        Image {
            planes: [self.planes[0].scaled(s), self.planes[1].scaled(s), self.planes[2].scaled(s)],
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Image) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            a.axpy(alpha, b);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Image {
        Image {
            planes: [self.planes[0].map(f), self.planes[1].map(f), self.planes[2].map(f)],
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn norm_sq(&self) -> f64 {
        self.planes.iter().map(|p| p.norm_sq()).sum()
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.planes.iter().zip(&other.planes).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.planes.iter().fold(0.0_f64, |m, p| m.max(p.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|p| p.is_finite())
    }

    /// Copy out the `size` x `size` window with top-left corner (i0, j0).
    pub fn crop(&self, i0: usize, j0: usize, size: usize) -> Image {
        Image {
            planes: [
                self.planes[0].crop(i0, j0, size, size),
                self.planes[1].crop(i0, j0, size, size),
                self.planes[2].crop(i0, j0, size, size),
            ],
        }
    }
}

/// Stack of per-kernel rain activation maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RainMapStack {
    maps: Vec<Plane>,
}

impl RainMapStack {
    pub fn new(maps: Vec<Plane>) -> Result<RainMapStack> {
        if maps.is_empty() {
            return Err(Error::Config("rain map stack needs at least one map".into()));
        }
        let shape = maps[0].shape();
        if maps.iter().any(|m| m.shape() != shape) {
            return Err(Error::ShapeMismatch("rain maps must share one shape".into()));
        }
        Ok(RainMapStack { maps })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> RainMapStack {
        assert!(n >= 1);
        RainMapStack { maps: vec![Plane::zeros(h, w); n] }
    }

    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    pub fn maps(&self) -> &[Plane] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Plane] {
        &mut self.maps
    }

    pub fn map_plane(&self, n: usize) -> &Plane {
        &self.maps[n]
    }

    pub fn sub(&self, other: &RainMapStack) -> RainMapStack {
        assert_eq!(self.num_maps(), other.num_maps());
        RainMapStack {
            maps: self.maps.iter().zip(&other.maps).map(|(a, b)| a.sub(b)).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &RainMapStack) {
        assert_eq!(self.num_maps(), other.num_maps());
        for (a, b) in self.maps.iter_mut().zip(&other.maps) {
            a.axpy(alpha, b);
        }
    }

    pub fn scaled(&self, s: f64) -> RainMapStack {
        RainMapStack { maps: self.maps.iter().map(|m| m.scaled(s)).collect() }
    }

    pub fn dot(&self, other: &RainMapStack) -> f64 {
        assert_eq!(self.num_maps(), other.num_maps());
        self.maps.iter().zip(&other.maps).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.maps.iter().map(|m| m.norm_sq()).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.maps.iter().map(|m| m.data().iter().map(|v| v.abs()).sum::<f64>()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.maps.iter().map(|m| m.data().iter().filter(|&&v| v != 0.0).count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|m| m.is_finite())
    }

    /// Serialize as a rank-3 tensor with extents (H, W, N).
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.shape();
        let n = self.num_maps();
        let mut data = vec![0.0; h * w * n];
        for (ni, m) in self.maps.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    data[(i * w + j) * n + ni] = m.at(i, j);
                }
            }
        }
        Tensor::new(vec![h, w, n], data).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<RainMapStack> {
        if t.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "rain map tensor must be rank 3 (H, W, N), got rank {}",
                t.rank()
            )));
        }
        let (h, w, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut maps = vec![Plane::zeros(h, w); n];
        for (ni, m) in maps.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    m.set(i, j, t.data()[(i * w + j) * n + ni]);
                }
            }
        }
        RainMapStack::new(maps)
    }
}

/// The convolutional dictionary: N rain kernels of k x k x 3 taps each.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    k: usize,
    n: usize,
    /// planes[n * 3 + c] is kernel n, channel c.
    planes: Vec<Plane>,
    /// Set when every k x k x 3 slice has been scaled to unit Frobenius norm.
    /// Not stored in the plain RCDT file format; checkpoint manifests carry it.
    pub normalized: bool,
}

impl KernelBank {
    pub fn new(k: usize, n: usize, planes: Vec<Plane>) -> Result<KernelBank> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if n == 0 {
            return Err(Error::Config("kernel bank needs at least one kernel".into()));
        }
        if planes.len() != n * 3 {
            return Err(Error::ShapeMismatch(format!(
                "bank with {n} kernels needs {} planes, got {}",
                n * 3,
                planes.len()
            )));
        }
        if planes.iter().any(|p| p.shape() != (k, k)) {
            return Err(Error::ShapeMismatch("every kernel plane must be k x k".into()));
        }
        if planes.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { stage: "kernel bank".into() });
        }
        Ok(KernelBank { k, n, planes, normalized: false })
    }

    pub fn zeros(k: usize, n: usize) -> Result<KernelBank> {
        KernelBank::new(k, n, vec![Plane::zeros(k, k); n * 3])
    }

    /// Seeded Gaussian taps, each k x k x 3 slice scaled to unit Frobenius
    /// norm. The training initializer.
    pub fn random_gaussian(k: usize, n: usize, rng: &mut impl Rng) -> Result<KernelBank> {
        let dist = Normal::new(0.0, 1.0).expect("valid normal");
        let planes = (0..n * 3)
            .map(|_| Plane::from_fn(k, k, |_, _| dist.sample(rng)))
            .collect();
        let mut bank = KernelBank::new(k, n, planes)?;
        bank.normalize_slices();
        Ok(bank)
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn num_kernels(&self) -> usize {
        self.n
    }

    pub fn kernel(&self, n: usize, c: usize) -> &Plane {
        &self.planes[n * 3 + c]
    }

    pub fn kernel_mut(&mut self, n: usize, c: usize) -> &mut Plane {
        self.normalized = false;
        &mut self.planes[n * 3 + c]
    }

    /// Frobenius norm of one k x k x 3 slice.
    pub fn slice_norm(&self, n: usize) -> f64 {
        (0..3).map(|c| self.kernel(n, c).norm_sq()).sum::<f64>().sqrt()
    }

    /// Scale every slice to unit Frobenius norm; zero slices are left alone.
    pub fn normalize_slices(&mut self) {
        for n in 0..self.n {
            let norm = self.slice_norm(n);
            if norm > 0.0 {
                for c in 0..3 {
                    self.planes[n * 3 + c].scale_in_place(1.0 / norm);
                }
            }
        }
        self.normalized = true;
    }

    pub fn scaled(&self, s: f64) -> KernelBank {
        KernelBank {
            k: self.k,
            n: self.n,
            planes: self.planes.iter().map(|p| p.scaled(s)).collect(),
            normalized: false,
        }
    }

    /// self += alpha * other, tap-wise. Clears the normalization flag.
    pub fn axpy(&mut self, alpha: f64, other: &KernelBank) {
        assert_eq!((self.k, self.n), (other.k, other.n), "bank axpy shape mismatch");
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            a.axpy(alpha, b);
        }
        self.normalized = false;
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|p| p.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.planes.iter().fold(0.0_f64, |m, p| m.max(p.max_abs()))
    }

    /// Reorder kernel slots. Used by equivariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Result<KernelBank> {
        if perm.len() != self.n {
            return Err(Error::Config("permutation length must equal kernel count".into()));
        }
        let mut planes = Vec::with_capacity(self.n * 3);
        for &src in perm {
            for c in 0..3 {
                planes.push(self.kernel(src, c).clone());
            }
        }
        let mut bank = KernelBank::new(self.k, self.n, planes)?;
        bank.normalized = self.normalized;
        Ok(bank)
    }

    /// Serialize as a rank-4 tensor with extents (k, k, N, 3).
    pub fn to_tensor(&self) -> Tensor {
        let (k, n) = (self.k, self.n);
        let mut data = vec![0.0; k * k * n * 3];
        for u in 0..k {
            for v in 0..k {
                for ni in 0..n {
                    for c in 0..3 {
                        data[((u * k + v) * n + ni) * 3 + c] = self.kernel(ni, c).at(u, v);
                    }
                }
            }
        }
        Tensor::new(vec![k, k, n, 3], data).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<KernelBank> {
        if t.rank() != 4 || t.shape()[3] != 3 || t.shape()[0] != t.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "kernel bank tensor must have extents (k, k, N, 3), got {:?}",
                t.shape()
            )));
        }
        let (k, n) = (t.shape()[0], t.shape()[2]);
        let mut bank = KernelBank::zeros(k, n)?;
        for u in 0..k {
            for v in 0..k {
                for ni in 0..n {
                    for c in 0..3 {
                        let val = t.data()[((u * k + v) * n + ni) * 3 + c];
                        bank.planes[ni * 3 + c].set(u, v, val);
                    }
                }
            }
        }
        Ok(bank)
    }
}

fn check_bank_maps(bank: &KernelBank, maps: &RainMapStack) -> Result<()> {
    if bank.num_kernels() != maps.num_maps() {
        return Err(Error::ShapeMismatch(format!(
            "bank has {} kernels but map stack has {}",
            bank.num_kernels(),
            maps.num_maps()
        )));
    }
    Ok(())
}

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// R[c] = sum_n conv2d_same(M[n], C[n, c]). Linear in both the maps and the
/// bank.
pub fn synthesize_rain(bank: &KernelBank, maps: &RainMapStack) -> Result<Image> {
    check_bank_maps(bank, maps)?;
    let (h, w) = maps.shape();
    let mut planes = [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)];
    for (c, out) in planes.iter_mut().enumerate() {
        for n in 0..bank.num_kernels() {
            accumulate_conv2d(out, maps.map_plane(n), bank.kernel(n, c), 1.0, false);
        }
    }
    Ok(Image { planes })
}

/// Exact adjoint of [`synthesize_rain`] in the maps:
/// `out[n] = sum_c conv2d_transpose_same(img[c], C[n, c])`, so that
/// `<synthesize_rain(C, M), A> == <M, synthesize_rain_adjoint(C, A)>`.
pub fn synthesize_rain_adjoint(bank: &KernelBank, img: &Image) -> Result<RainMapStack> {
    let (h, w) = img.shape();
    let mut maps = Vec::with_capacity(bank.num_kernels());
    for n in 0..bank.num_kernels() {
        let mut acc = Plane::zeros(h, w);
        for c in 0..3 {
            accumulate_conv2d(&mut acc, img.plane(c), bank.kernel(n, c), 1.0, true);
        }
        maps.push(acc);
    }
    RainMapStack::new(maps)
}

/// Gradient of [`synthesize_rain`] with respect to the bank taps, given the
/// forward maps and an upstream image gradient. Same layout as the bank.
pub fn synthesize_rain_bank_grad(
    bank: &KernelBank,
    maps: &RainMapStack,
    upstream: &Image,
) -> Result<KernelBank> {
    check_bank_maps(bank, maps)?;
    let k = bank.kernel_size();
    let mut grad = KernelBank::zeros(k, bank.num_kernels())?;
    for n in 0..bank.num_kernels() {
        for c in 0..3 {
            *grad.kernel_mut(n, c) =
                crate::tensor::conv2d_kernel_grad(maps.map_plane(n), upstream.plane(c), k, false)?;
        }
    }
    Ok(grad)
}

/// Gradient of [`synthesize_rain_adjoint`] with respect to the bank taps,
/// given the forward image and an upstream map-stack gradient.
pub fn adjoint_bank_grad(
    bank: &KernelBank,
    img: &Image,
    upstream: &RainMapStack,
) -> Result<KernelBank> {
    check_bank_maps(bank, upstream)?;
    let k = bank.kernel_size();
    let mut grad = KernelBank::zeros(k, bank.num_kernels())?;
    for n in 0..bank.num_kernels() {
        for c in 0..3 {
            *grad.kernel_mut(n, c) = crate::tensor::conv2d_kernel_grad(
                img.plane(c),
                upstream.map_plane(n),
                k,
                true,
            )?;
        }
    }
    Ok(grad)
}

/// O = B + R, elementwise.
pub fn compose(background: &Image, rain: &Image) -> Result<Image> {
    check_images(background, rain)?;
    Ok(background.add(rain))
}

/// Trade-off weights and regularizer choices for the separation objective.
#[derive(Clone, Debug)]
pub struct Regularizers {
    pub alpha: f64,
    pub beta: f64,
    pub g1: ProxKind,
    pub g2: ProxKind,
}

impl Regularizers {
    pub fn new(alpha: f64, beta: f64, g1: ProxKind, g2: ProxKind) -> Result<Regularizers> {
        if alpha < 0.0 || beta < 0.0 || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!(
                "trade-off parameters must be finite and nonnegative, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Regularizers { alpha, beta, g1, g2 })
    }
}

impl Default for Regularizers {
    /// Sparsity on the maps, box prior on the background.
    fn default() -> Regularizers {
        Regularizers {
            alpha: 0.01,
            beta: 1.0,
            g1: ProxKind::SoftThreshold(0.0),
            g2: ProxKind::BoxProject { lo: 0.0, hi: 1.0 },
        }
    }
}

/// Squared-Frobenius data fidelity `|O - B - synth(C, M)|_F^2`.
pub fn fidelity(o: &Image, b: &Image, maps: &RainMapStack, bank: &KernelBank) -> Result<f64> {
    check_images(o, b)?;
    let residual = o.sub(b).sub(&synthesize_rain(bank, maps)?);
    Ok(residual.norm_sq())
}

/// Full objective value. An infeasible background under a box regularizer
/// yields `f64::INFINITY`, not an error. Regularizers without a closed-form
/// penalty (learned residual operators) are rejected.
pub fn objective(
    o: &Image,
    b: &Image,
    maps: &RainMapStack,
    bank: &KernelBank,
    regs: &Regularizers,
) -> Result<f64> {
    let fid = fidelity(o, b, maps, bank)?;
    let g1 = regs
        .g1
        .penalty_value(maps.maps())
        .ok_or_else(|| Error::Config("g1 has no closed-form penalty value".into()))?;
    let g2 = regs
        .g2
        .penalty_value(b.planes())
        .ok_or_else(|| Error::Config("g2 has no closed-form penalty value".into()))?;
    Ok(fid + regs.alpha * g1 + regs.beta * g2)
}

/// `C^T (synth(C, M) + B - O)`: the map-side fidelity gradient in the crate's
/// half-derivative convention (see module docs).
pub fn grad_m(
    o: &Image,
    b: &Image,
    maps: &RainMapStack,
    bank: &KernelBank,
) -> Result<RainMapStack> {
    check_images(o, b)?;
    let residual = synthesize_rain(bank, maps)?.add(b).sub(o);
    synthesize_rain_adjoint(bank, &residual)
}

/// `synth(C, M) + B - O`: the background-side fidelity gradient in the same
/// convention.
pub fn grad_b(o: &Image, b: &Image, maps: &RainMapStack, bank: &KernelBank) -> Result<Image> {
    check_images(o, b)?;
    Ok(synthesize_rain(bank, maps)?.add(b).sub(o))
}
