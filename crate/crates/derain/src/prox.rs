//! Proximal operators.
//!
//! The optimization mode uses analytic closed forms (soft threshold for an
//! l1 penalty, clamping for a box indicator). The trained mode replaces them
//! with a small residual network per stage: a 3x3 expansion convolution to a
//! wider hidden state, `T` residual blocks `z -> z + conv(relu(conv(z) + b)) + b`,
//! and a 3x3 compression back to the semantic channel count. Reverse-mode
//! derivatives are hand-written for exactly this operator set.
//!
//! ReLU's subgradient at 0 is fixed to 0.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Plane, Tensor};

/// Elementwise `sign(x) * max(|x| - tau, 0)`, the prox of `tau * |.|_1`.
pub fn soft_threshold(x: &Tensor, tau: f64) -> Result<Tensor> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("soft threshold needs tau >= 0, got {tau}")));
    }
    let data = x.data().iter().map(|&v| soft_threshold_scalar(v, tau)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[inline]
pub fn soft_threshold_scalar(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Elementwise clamp onto `[lo, hi]`, the prox of the box indicator.
pub fn box_project(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if lo > hi {
        return Err(Error::Config(format!("box needs lo <= hi, got [{lo}, {hi}]")));
    }
    let data = x.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One residual block: two 3x3 convolutions over the hidden channels, each
/// with a per-channel bias, wired as `z -> z + w2 * relu(w1 * z + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub w1: ConvKernel,
    pub b1: Vec<f64>,
    pub w2: ConvKernel,
    pub b2: Vec<f64>,
}

/// Parameters of one learnable residual proximal operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxParams {
    /// 3x3, c_in -> c_hid, bias-free.
    pub expand: ConvKernel,
    pub blocks: Vec<ResBlock>,
    /// 3x3, c_hid -> c_out, bias-free.
    pub compress: ConvKernel,
}

impl ProxParams {
    pub fn c_in(&self) -> usize {
        self.expand.c_in()
    }

    pub fn c_hid(&self) -> usize {
        self.expand.c_out()
    }

    pub fn c_out(&self) -> usize {
        self.compress.c_out()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let hid = self.c_hid();
        if self.blocks.is_empty() {
            return Err(Error::Config("residual prox needs at least one block".into()));
        }
        if self.compress.c_in() != hid {
            return Err(Error::ShapeMismatch(format!(
                "compress expects {hid} hidden channels, has {}",
                self.compress.c_in()
            )));
        }
        if hid < self.c_out() {
            return Err(Error::Config(format!(
                "hidden width {hid} must be at least the output channel count {}",
                self.c_out()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let ok = b.w1.c_in() == hid
                && b.w1.c_out() == hid
                && b.w2.c_in() == hid
                && b.w2.c_out() == hid
                && b.b1.len() == hid
                && b.b2.len() == hid;
            if !ok {
                return Err(Error::ShapeMismatch(format!("block {i} is not {hid}->{hid}")));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite { stage: "prox params".into() });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.expand.is_finite()
            && self.compress.is_finite()
            && self.blocks.iter().all(|b| {
                b.w1.is_finite()
                    && b.w2.is_finite()
                    && b.b1.iter().all(|v| v.is_finite())
                    && b.b2.iter().all(|v| v.is_finite())
            })
    }

    /// All-zero parameters with the given architecture. Useful as a gradient
    /// accumulator and for the zero-network edge case.
    pub fn zeros(c_in: usize, c_hid: usize, c_out: usize, num_blocks: usize) -> Result<ProxParams> {
        let expand = ConvKernel::zeros(c_in, c_hid, 3)?;
        let compress = ConvKernel::zeros(c_hid, c_out, 3)?;
        let blocks = (0..num_blocks)
            .map(|_| {
                Ok(ResBlock {
                    w1: ConvKernel::zeros(c_hid, c_hid, 3)?,
                    b1: vec![0.0; c_hid],
                    w2: ConvKernel::zeros(c_hid, c_hid, 3)?,
                    b2: vec![0.0; c_hid],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ProxParams { expand, blocks, compress };
        if num_blocks > 0 {
            p.validate()?;
        }
        Ok(p)
    }

    /// Near-identity initialization: expand/compress carry delta taps on the
    /// matching channels plus Gaussian noise, block convolutions start small
    /// so the operator begins close to a pass-through. Keeps early unfolded
    /// stages well-behaved before training moves the weights.
    pub fn near_identity(
        c_in: usize,
        c_hid: usize,
        num_blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<ProxParams> {
        let noise = Normal::new(0.0, 0.01).expect("valid normal");
        let weight = Normal::new(0.0, 0.05).expect("valid normal");
        let mut expand = ConvKernel::identity(c_in, c_hid, 3)?;
        let mut compress = ConvKernel::identity(c_hid, c_in, 3)?;
        perturb(&mut expand, &noise, rng);
        perturb(&mut compress, &noise, rng);
        let blocks = (0..num_blocks)
            .map(|_| {
                let mut w1 = ConvKernel::zeros(c_hid, c_hid, 3)?;
                let mut w2 = ConvKernel::zeros(c_hid, c_hid, 3)?;
                perturb(&mut w1, &weight, rng);
                perturb(&mut w2, &weight, rng);
                Ok(ResBlock { w1, b1: vec![0.0; c_hid], w2, b2: vec![0.0; c_hid] })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ProxParams { expand, blocks, compress };
        p.validate()?;
        Ok(p)
    }

    /// Fully random parameters. Used by gradient tests.
    pub fn random(
        c_in: usize,
        c_hid: usize,
        num_blocks: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<ProxParams> {
        let dist = Normal::new(0.0, scale).expect("valid normal");
        let mut p = ProxParams::zeros(c_in, c_hid, c_in, num_blocks)?;
        perturb(&mut p.expand, &dist, rng);
        perturb(&mut p.compress, &dist, rng);
        for b in &mut p.blocks {
            perturb(&mut b.w1, &dist, rng);
            perturb(&mut b.w2, &dist, rng);
            for v in b.b1.iter_mut().chain(b.b2.iter_mut()) {
                *v = dist.sample(rng);
            }
        }
        Ok(p)
    }
}

impl ProxParams {
    /// Append every parameter in the canonical order: expand taps, then per
    /// block (w1, b1, w2, b2), then compress taps. Training, checkpoints and
    /// gradient checks all rely on this order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.expand.to_tensor().data());
        for b in &self.blocks {
            out.extend_from_slice(b.w1.to_tensor().data());
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(b.w2.to_tensor().data());
            out.extend_from_slice(&b.b2);
        }
        out.extend_from_slice(self.compress.to_tensor().data());
    }

    /// Inverse of [`ProxParams::flatten_into`]; advances `pos` past the
    /// consumed scalars.
    pub fn read_from_flat(&mut self, flat: &[f64], pos: &mut usize) -> Result<()> {
        fn read_kernel(k: &mut ConvKernel, flat: &[f64], pos: &mut usize) -> Result<()> {
            let t = k.to_tensor();
            let len = t.data().len();
            if *pos + len > flat.len() {
                return Err(Error::ShapeMismatch("flat parameter vector too short".into()));
            }
            let nt = Tensor::new(t.shape().to_vec(), flat[*pos..*pos + len].to_vec())?;
            *k = ConvKernel::from_tensor(&nt)?;
            *pos += len;
            Ok(())
        }
        read_kernel(&mut self.expand, flat, pos)?;
        for b in &mut self.blocks {
            read_kernel(&mut b.w1, flat, pos)?;
            b.b1.copy_from_slice(&flat[*pos..*pos + b.b1.len()]);
            *pos += b.b1.len();
            read_kernel(&mut b.w2, flat, pos)?;
            b.b2.copy_from_slice(&flat[*pos..*pos + b.b2.len()]);
            *pos += b.b2.len();
        }
        read_kernel(&mut self.compress, flat, pos)
    }
}

fn perturb(kernel: &mut ConvKernel, dist: &Normal<f64>, rng: &mut impl Rng) {
    for o in 0..kernel.c_out() {
        for i in 0..kernel.c_in() {
            let k = kernel.kernel_size();
            for u in 0..k {
                for v in 0..k {
                    let cur = kernel.tap(o, i).at(u, v);
                    kernel.tap_mut(o, i).set(u, v, cur + dist.sample(rng));
                }
            }
        }
    }
}

/// Cached intermediates of one residual-prox forward pass, enough to run the
/// exact backward pass. `hidden[t]` is the state entering block `t`
/// (so `hidden[0]` is the expand output and `hidden[T]` feeds compress);
/// `pre_relu[t]` is `w1 * hidden[t] + b1` of block `t`.
pub struct ProxTape {
    input: Vec<Plane>,
    hidden: Vec<Vec<Plane>>,
    pre_relu: Vec<Vec<Plane>>,
}

impl ProxTape {
    /// Smallest |pre-activation| across the tape. Finite-difference tests use
    /// this to reject evaluation points within 1e-6 of a ReLU kink.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_relu
            .iter()
            .flatten()
            .flat_map(|p| p.data().iter())
            .fold(f64::INFINITY, |m, &v| m.min(v.abs()))
    }
}

fn add_bias(planes: &mut [Plane], bias: &[f64]) {
    for (p, &b) in planes.iter_mut().zip(bias) {
        if b != 0.0 {
            for v in p.data_mut() {
                *v += b;
            }
        }
    }
}

fn relu(planes: &[Plane]) -> Vec<Plane> {
    planes.iter().map(|p| p.map(|v| if v > 0.0 { v } else { 0.0 })).collect()
}

/// y = compress(block_T(... block_1(expand(x)) ...)).
pub fn residual_prox_forward(params: &ProxParams, x: &[Plane]) -> Result<Vec<Plane>> {
    let (y, _) = residual_prox_forward_tape(params, x)?;
    Ok(y)
}

/// Forward pass that also returns the tape needed by
/// [`residual_prox_backward`].
pub fn residual_prox_forward_tape(
    params: &ProxParams,
    x: &[Plane],
) -> Result<(Vec<Plane>, ProxTape)> {
    if x.len() != params.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "residual prox expects {} channels, got {}",
            params.c_in(),
            x.len()
        )));
    }
    let mut hidden = Vec::with_capacity(params.num_blocks() + 1);
    let mut pre_relu = Vec::with_capacity(params.num_blocks());
    let mut h = params.expand.forward(x)?;
    for block in &params.blocks {
        let mut u = block.w1.forward(&h)?;
        add_bias(&mut u, &block.b1);
        let v = relu(&u);
        let mut wv = block.w2.forward(&v)?;
        add_bias(&mut wv, &block.b2);
        for (hc, wc) in wv.iter_mut().zip(&h) {
            hc.add_assign(wc);
        }
        hidden.push(std::mem::replace(&mut h, wv));
        pre_relu.push(u);
    }
    let y = params.compress.forward(&h)?;
    hidden.push(h);
    let tape = ProxTape { input: x.to_vec(), hidden, pre_relu };
    Ok((y, tape))
}

/// Exact vector-Jacobian products of [`residual_prox_forward`]: returns the
/// gradient with respect to the input stack and a `ProxParams` of parameter
/// gradients.
pub fn residual_prox_backward(
    params: &ProxParams,
    tape: &ProxTape,
    upstream: &[Plane],
) -> Result<(Vec<Plane>, ProxParams)> {
    if upstream.len() != params.c_out() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} channels, prox outputs {}",
            upstream.len(),
            params.c_out()
        )));
    }
    let t = params.num_blocks();
    let mut grads = ProxParams::zeros(params.c_in(), params.c_hid(), params.c_out(), t)?;

    grads.compress = params.compress.kernel_grad(&tape.hidden[t], upstream)?;
    let mut g_h = params.compress.input_grad(upstream)?;

    for bi in (0..t).rev() {
        let block = &params.blocks[bi];
        let h_in = &tape.hidden[bi];
        let u = &tape.pre_relu[bi];
        let v = relu(u);

        // g through: h_out = h_in + w2 * v + b2
        let g_block_out = g_h.clone();
        for (gb, gp) in grads.blocks[bi].b2.iter_mut().zip(&g_block_out) {
            *gb = gp.sum();
        }
        grads.blocks[bi].w2 = block.w2.kernel_grad(&v, &g_block_out)?;
        let g_v = block.w2.input_grad(&g_block_out)?;

        // relu mask: subgradient 0 at exactly 0
        let g_u: Vec<Plane> = g_v
            .iter()
            .zip(u)
            .map(|(g, pre)| {
                let mut masked = g.clone();
                for (m, &p) in masked.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *m = 0.0;
                    }
                }
                masked
            })
            .collect();

        for (gb, gp) in grads.blocks[bi].b1.iter_mut().zip(&g_u) {
            *gb = gp.sum();
        }
        grads.blocks[bi].w1 = block.w1.kernel_grad(h_in, &g_u)?;
        let g_from_conv = block.w1.input_grad(&g_u)?;
        for (gh, gc) in g_h.iter_mut().zip(&g_from_conv) {
            gh.add_assign(gc);
        }
    }

    grads.expand = params.expand.kernel_grad(&tape.input, &g_h)?;
    let g_x = params.expand.input_grad(&g_h)?;
    Ok((g_x, grads))
}

/// The prox choices a solver stage can be configured with.
#[derive(Clone, Debug)]
pub enum ProxKind {
    /// prox of `tau * |.|_1`
    SoftThreshold(f64),
    /// prox of the box indicator on `[lo, hi]`
    BoxProject { lo: f64, hi: f64 },
    /// pass-through (zero regularizer)
    Identity,
    /// learnable residual operator
    Residual(ProxParams),
}

impl ProxKind {
    /// Apply to a stack of planes (N rain maps or 3 image channels).
    pub fn apply_stack(&self, planes: &[Plane]) -> Result<Vec<Plane>> {
        match self {
            ProxKind::SoftThreshold(tau) => {
                if *tau < 0.0 || !tau.is_finite() {
                    return Err(Error::Config(format!("soft threshold needs tau >= 0, got {tau}")));
                }
                Ok(planes.iter().map(|p| p.map(|v| soft_threshold_scalar(v, *tau))).collect())
            }
            ProxKind::BoxProject { lo, hi } => {
                if lo > hi {
                    return Err(Error::Config(format!("box needs lo <= hi, got [{lo}, {hi}]")));
                }
                Ok(planes.iter().map(|p| p.map(|v| v.clamp(*lo, *hi))).collect())
            }
            ProxKind::Identity => Ok(planes.to_vec()),
            ProxKind::Residual(params) => residual_prox_forward(params, planes),
        }
    }

    /// Value of the regularizer this prox realizes, when it has a closed
    /// form: l1 norm for the soft threshold, 0 / +inf for the box indicator,
    /// 0 for the identity. `None` for learned residual operators (their
    /// regularizer is implicit).
    pub fn penalty_value(&self, planes: &[Plane]) -> Option<f64> {
        match self {
            ProxKind::SoftThreshold(_) => {
                Some(planes.iter().map(|p| p.data().iter().map(|v| v.abs()).sum::<f64>()).sum())
            }
            ProxKind::BoxProject { lo, hi } => {
                let feasible = planes
                    .iter()
                    .all(|p| p.data().iter().all(|&v| v >= *lo && v <= *hi));
                Some(if feasible { 0.0 } else { f64::INFINITY })
            }
            ProxKind::Identity => Some(0.0),
            ProxKind::Residual(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_planes(n: usize, h: usize, w: usize, seed: u64) -> Vec<Plane> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn soft_threshold_closed_form() {
        let x = Tensor::new(vec![3], vec![0.0, 2.0, -0.3]).unwrap();
        let y = soft_threshold(&x, 0.5).unwrap();
        assert_eq!(y.data(), &[0.0, 1.5, 0.0]);
        assert!(soft_threshold(&x, -0.1).is_err());
        // tau = 0 is the identity
        let y0 = soft_threshold(&x, 0.0).unwrap();
        assert_eq!(y0.data(), x.data());
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        // prox definition: argmin_z 0.5 (z - v)^2 + tau |z|
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let v: f64 = rng.random_range(-2.0..2.0);
            let tau: f64 = rng.random_range(0.0..1.0);
            let lim = v.abs() + 1.0;
            let mut best = (f64::INFINITY, 0.0);
            let steps = (2.0 * lim / 1e-4) as usize;
            for s in 0..=steps {
                let z = -lim + s as f64 * 1e-4;
                let obj = 0.5 * (z - v).powi(2) + tau * z.abs();
                if obj < best.0 {
                    best = (obj, z);
                }
            }
            let got = soft_threshold_scalar(v, tau);
            assert!((got - best.1).abs() < 2e-4, "v={v} tau={tau}: {got} vs {}", best.1);
        }
    }

    #[test]
    fn box_project_closed_form_and_grid() {
        let x = Tensor::new(vec![3], vec![0.4, 1.7, -0.2]).unwrap();
        let y = box_project(&x, 0.0, 1.0).unwrap();
        assert_eq!(y.data(), &[0.4, 1.0, 0.0]);
        assert!(box_project(&x, 1.0, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let v: f64 = rng.random_range(-2.0..2.0);
            let (lo, hi) = (-0.5, 0.75);
            let mut best = (f64::INFINITY, lo);
            let steps = ((hi - lo) / 1e-4) as usize;
            for s in 0..=steps {
                let z: f64 = lo + s as f64 * 1e-4;
                let obj = 0.5 * (z - v).powi(2);
                if obj < best.0 {
                    best = (obj, z);
                }
            }
            assert!((v.clamp(lo, hi) - best.1).abs() < 2e-4);
        }
    }

    #[test]
    fn prox_firmly_nonexpansive_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let y: f64 = rng.random_range(-3.0..3.0);
            let tau = rng.random_range(0.0..1.0);
            let d = (soft_threshold_scalar(x, tau) - soft_threshold_scalar(y, tau)).abs();
            assert!(d <= (x - y).abs() + 1e-15);
            let cx = x.clamp(-1.0, 1.0);
            let cy = y.clamp(-1.0, 1.0);
            assert!((cx - cy).abs() <= (x - y).abs() + 1e-15);
            assert_eq!(cx.clamp(-1.0, 1.0), cx);
        }
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let p = ProxParams::zeros(2, 4, 2, 2).unwrap();
        let x = rng_planes(2, 4, 4, 10);
        let y = residual_prox_forward(&p, &x).unwrap();
        assert!(y.iter().all(|pl| pl.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_wiring_passes_input_through() {
        // delta expand/compress with c_hid = c_in and zero blocks
        let c = 2;
        let mut p = ProxParams::zeros(c, c, c, 1).unwrap();
        p.expand = ConvKernel::identity(c, c, 3).unwrap();
        p.compress = ConvKernel::identity(c, c, 3).unwrap();
        let x = rng_planes(c, 5, 4, 11);
        let y = residual_prox_forward(&p, &x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_matches_direct_summation_reimplementation() {
        // independent oracle: scalar loops over every conv, no shared helpers
        fn oracle_conv(x: &[Plane], kernel: &ConvKernel) -> Vec<Plane> {
            let (h, w) = x[0].shape();
            let k = kernel.kernel_size();
            let p = (k / 2) as isize;
            (0..kernel.c_out())
                .map(|o| {
                    Plane::from_fn(h, w, |i, j| {
                        let mut acc = 0.0;
                        for (ci, xi) in x.iter().enumerate() {
                            for u in 0..k {
                                for v in 0..k {
                                    let si = i as isize + u as isize - p;
                                    let sj = j as isize + v as isize - p;
                                    if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                                        acc += kernel.tap(o, ci).at(u, v)
                                            * xi.at(si as usize, sj as usize);
                                    }
                                }
                            }
                        }
                        acc
                    })
                })
                .collect()
        }

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = ProxParams::random(2, 3, 2, 0.5, &mut rng).unwrap();
        let x = rng_planes(2, 4, 4, 13);
        let got = residual_prox_forward(&p, &x).unwrap();

        let mut h = oracle_conv(&x, &p.expand);
        for block in &p.blocks {
            let mut u = oracle_conv(&h, &block.w1);
            for (pl, &b) in u.iter_mut().zip(&block.b1) {
                for v in pl.data_mut() {
                    *v += b;
                }
            }
            let v: Vec<Plane> = u.iter().map(|pl| pl.map(|t| t.max(0.0))).collect();
            let mut wv = oracle_conv(&v, &block.w2);
            for (pl, &b) in wv.iter_mut().zip(&block.b2) {
                for t in pl.data_mut() {
                    *t += b;
                }
            }
            for (a, b) in wv.iter_mut().zip(&h) {
                a.add_assign(b);
            }
            h = wv;
        }
        let want = oracle_conv(&h, &p.compress);
        for (a, b) in got.iter().zip(&want) {
            for (x1, x2) in a.data().iter().zip(b.data()) {
                assert!((x1 - x2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = ProxParams::random(2, 3, 1, 0.5, &mut rng).unwrap();
        let x = rng_planes(2, 4, 4, 15);
        let (_, tape) = residual_prox_forward_tape(&p, &x).unwrap();
        let upstream = vec![Plane::zeros(4, 4); 2];
        let (gx, gp) = residual_prox_backward(&p, &tape, &upstream).unwrap();
        assert!(gx.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(gp.expand.to_tensor().data().iter().all(|&v| v == 0.0));
        assert!(gp.compress.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    /// Exhaustive finite-difference check over every parameter and input
    /// entry on small instances, skipping evaluation points near ReLU kinks.
    #[test]
    fn backward_matches_finite_differences() {
        for (cfg_idx, (c_in, c_hid, t, h, w)) in
            [(2usize, 3usize, 1usize, 4usize, 5usize), (1, 4, 2, 5, 3)].iter().enumerate()
        {
            let mut seed = 20 + cfg_idx as u64;
            let (p, x) = loop {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = ProxParams::random(*c_in, *c_hid, *t, 0.5, &mut rng).unwrap();
                let x = rng_planes(*c_in, *h, *w, seed + 500);
                let (_, tape) = residual_prox_forward_tape(&p, &x).unwrap();
                if tape.min_abs_pre_activation() > 1e-6 {
                    break (p, x);
                }
                seed += 1000;
            };
            let upstream = rng_planes(*c_in, *h, *w, seed + 900);

            let loss = |params: &ProxParams, input: &[Plane]| -> f64 {
                let y = residual_prox_forward(params, input).unwrap();
                y.iter().zip(&upstream).map(|(a, b)| a.dot(b)).sum()
            };

            let (_, tape) = residual_prox_forward_tape(&p, &x).unwrap();
            let (gx, gp) = residual_prox_backward(&p, &tape, &upstream).unwrap();

            let eps = 1e-6;
            let check = |analytic: f64, fd: f64, what: &str| {
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-5, "{what}: analytic {analytic} vs fd {fd} (rel {rel})");
            };

            // input entries
            for (ci, plane) in x.iter().enumerate() {
                for idx in 0..plane.data().len() {
                    let mut xp = x.clone();
                    xp[ci].data_mut()[idx] += eps;
                    let mut xm = x.clone();
                    xm[ci].data_mut()[idx] -= eps;
                    let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
                    check(gx[ci].data()[idx], fd, "input");
                }
            }

            // every parameter, via the canonical flatten order
            let mut flat = Vec::new();
            p.flatten_into(&mut flat);
            let mut gflat = Vec::new();
            gp.flatten_into(&mut gflat);
            let rebuild = |values: &[f64]| {
                let mut np = p.clone();
                let mut pos = 0;
                np.read_from_flat(values, &mut pos).unwrap();
                assert_eq!(pos, values.len());
                np
            };
            for i in 0..flat.len() {
                let mut fp = flat.clone();
                fp[i] += eps;
                let mut fm = flat.clone();
                fm[i] -= eps;
                let fd = (loss(&rebuild(&fp), &x) - loss(&rebuild(&fm), &x)) / (2.0 * eps);
                check(gflat[i], fd, &format!("param {i}"));
            }
        }
    }

    #[test]
    fn penalty_values() {
        let planes = vec![Plane::from_vec(1, 3, vec![0.5, -0.25, 0.0]).unwrap()];
        assert_eq!(ProxKind::SoftThreshold(0.1).penalty_value(&planes), Some(0.75));
        assert_eq!(
            ProxKind::BoxProject { lo: 0.0, hi: 1.0 }.penalty_value(&planes),
            Some(f64::INFINITY)
        );
        let feasible = vec![Plane::from_vec(1, 2, vec![0.2, 0.9]).unwrap()];
        assert_eq!(
            ProxKind::BoxProject { lo: 0.0, hi: 1.0 }.penalty_value(&feasible),
            Some(0.0)
        );
        assert_eq!(ProxKind::Identity.penalty_value(&planes), Some(0.0));
    }
}
