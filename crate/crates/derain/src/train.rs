//! Toy-scale end-to-end training of the unfolded solver.
//!
//! Learnables: the kernel bank (appearing in both its synthesis and analysis
//! roles), per-stage residual prox parameters, per-stage step sizes, and the
//! background init convolution. The stage-wise loss is
//!
//! ```text
//! L = sum_{s=0}^{S} lambda_s |B^(s) - B|_F^2  +  sum_{s=1}^{S} gamma_s |O - B - R^(s)|_F^2
//! ```
//!
//! Gradients are exact reverse-mode through all stages, built from the
//! convolution adjoints in [`crate::tensor`] and the prox backward in
//! [`crate::prox`]. The optimizer is a self-contained Adam
//! (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) with stepwise learning-rate
//! decay. Step sizes are reparameterized so their effective values stay in
//! range: `eta1 = softplus(raw)` and `eta2 = sigmoid(raw)`.
//!
//! Everything is deterministic given the seed and dataset order: batch
//! composition and patch crops are drawn sequentially from one seeded
//! stream, per-sample gradients may be computed in parallel but are reduced
//! in batch order.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adjoint_bank_grad, synthesize_rain, synthesize_rain_adjoint, synthesize_rain_bank_grad, Image,
    KernelBank, RainMapStack,
};
use crate::prox::{residual_prox_backward, residual_prox_forward_tape, ProxParams, ProxTape};
use crate::solver::{b_step_pre_prox, m_step_pre_prox, InitOp, SolverConfig, StageParams};
use crate::tensor::{read_rcdt, write_rcdt, ConvKernel, Plane, Tensor};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    y.exp_m1().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    (p / (1.0 - p)).ln()
}

/// Training configuration: network dimensions, stage-wise loss weights, and
/// the optimizer schedule.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stages: usize,
    pub num_kernels: usize,
    pub kernel_size: usize,
    /// Residual blocks per prox.
    pub prox_blocks: usize,
    /// Hidden channels per prox.
    pub prox_hidden: usize,
    /// Weight of `|B^(s) - B|^2` for s = 0..=S; length `stages + 1`.
    pub lambda: Vec<f64>,
    /// Weight of `|O - B - R^(s)|^2` for s = 1..=S; length `stages`.
    pub gamma: Vec<f64>,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

/// Final-stage weights are 1, earlier stages 0.1, so the last stage
/// dominates by a factor of 10.
pub fn stage_loss_weights(stages: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lambda = vec![0.1; stages + 1];
    lambda[stages] = 1.0;
    let mut gamma = vec![0.1; stages];
    if stages > 0 {
        gamma[stages - 1] = 1.0;
    }
    if stages > 0 {
        let max_other = lambda[..stages].iter().cloned().fold(0.0_f64, f64::max);
        debug_assert_eq!(lambda[stages] / max_other, 10.0);
    }
    (lambda, gamma)
}

impl TrainConfig {
    /// Full-scale defaults: batch 16, 64x64 patches, lr 1e-3 divided by 5
    /// every 25 epochs, 100 epochs.
    pub fn full_scale(stages: usize) -> TrainConfig {
        let (lambda, gamma) = stage_loss_weights(stages);
        TrainConfig {
            stages,
            num_kernels: crate::model::DEFAULT_NUM_KERNELS,
            kernel_size: 9,
            prox_blocks: 4,
            prox_hidden: 32,
            lambda,
            gamma,
            learning_rate: 1e-3,
            lr_decay_factor: 5.0,
            lr_decay_every: 25,
            epochs: 100,
            batch_size: 16,
            patch_size: 64,
            seed: 0,
        }
    }

    /// Desk-scale recipe: N = 4 kernels of size 9, S = 5 stages, 32x32
    /// patches, sized to train in minutes on a laptop CPU.
    pub fn desk() -> TrainConfig {
        let stages = 5;
        let (lambda, gamma) = stage_loss_weights(stages);
        TrainConfig {
            stages,
            num_kernels: 4,
            kernel_size: 9,
            prox_blocks: 2,
            prox_hidden: 16,
            lambda,
            gamma,
            learning_rate: 1e-3,
            lr_decay_factor: 5.0,
            lr_decay_every: 25,
            epochs: 50,
            batch_size: 8,
            patch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "lambda needs {} weights for {} stages, got {}",
                self.stages + 1,
                self.stages,
                self.lambda.len()
            )));
        }
        if self.gamma.len() != self.stages {
            return Err(Error::Config(format!(
                "gamma needs {} weights for {} stages, got {}",
                self.stages,
                self.stages,
                self.gamma.len()
            )));
        }
        if self.lambda.iter().chain(&self.gamma).any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.lambda[self.stages] > 0.0) {
            return Err(Error::Config("the final-stage background weight must be positive".into()));
        }
        if self.stages > 0 && !(self.gamma[self.stages - 1] > 0.0) {
            return Err(Error::Config("the final-stage rain weight must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lr_decay_factor < 1.0 {
            return Err(Error::Config("lr decay factor must be at least 1".into()));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "lr_decay_every, batch_size and patch_size must be positive".into(),
            ));
        }
        if self.kernel_size % 2 == 0 || self.num_kernels == 0 {
            return Err(Error::Config("kernel size must be odd and kernel count positive".into()));
        }
        if self.stages > 0 && (self.prox_blocks == 0 || self.prox_hidden < 3) {
            return Err(Error::Config("prox needs at least one block and 3 hidden channels".into()));
        }
        Ok(())
    }
}

/// Per-stage learnable parameters.
#[derive(Clone, Debug)]
pub struct StageLearnables {
    pub prox_m: ProxParams,
    pub prox_b: ProxParams,
    /// eta1 = softplus(eta1_raw)
    pub eta1_raw: f64,
    /// eta2 = sigmoid(eta2_raw)
    pub eta2_raw: f64,
}

/// Everything training updates.
#[derive(Clone, Debug)]
pub struct LearnableSet {
    pub bank: KernelBank,
    pub init_kernel: ConvKernel,
    pub stages: Vec<StageLearnables>,
}

const ETA2_INIT: f64 = 0.8;

impl LearnableSet {
    /// Seeded initialization: Gaussian slice-normalized bank, box-blur init
    /// kernel, near-identity proxes, eta1 backed off from the step-size
    /// bound at the configured patch size.
    pub fn init(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<LearnableSet> {
        cfg.validate()?;
        let bank = KernelBank::random_gaussian(cfg.kernel_size, cfg.num_kernels, rng)?;
        let eta1_init = 0.9
            * crate::solver::estimate_eta1_bound(&bank, cfg.patch_size, cfg.patch_size)?;
        let stages = (0..cfg.stages)
            .map(|_| {
                Ok(StageLearnables {
                    prox_m: ProxParams::near_identity(
                        cfg.num_kernels,
                        cfg.prox_hidden,
                        cfg.prox_blocks,
                        rng,
                    )?,
                    prox_b: ProxParams::near_identity(3, cfg.prox_hidden, cfg.prox_blocks, rng)?,
                    eta1_raw: inv_softplus(eta1_init),
                    eta2_raw: logit(ETA2_INIT),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LearnableSet { bank, init_kernel: InitOp::box_blur_kernel(), stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn eta1(&self, s: usize) -> f64 {
        softplus(self.stages[s].eta1_raw)
    }

    pub fn eta2(&self, s: usize) -> f64 {
        sigmoid(self.stages[s].eta2_raw)
    }

    /// Same shapes, all values zero. The gradient accumulator.
    pub fn zeros_like(&self) -> LearnableSet {
        LearnableSet {
            bank: KernelBank::zeros(self.bank.kernel_size(), self.bank.num_kernels())
                .expect("valid bank shape"),
            init_kernel: ConvKernel::zeros(3, 3, self.init_kernel.kernel_size())
                .expect("valid kernel shape"),
            stages: self
                .stages
                .iter()
                .map(|st| StageLearnables {
                    prox_m: ProxParams::zeros(
                        st.prox_m.c_in(),
                        st.prox_m.c_hid(),
                        st.prox_m.c_out(),
                        st.prox_m.num_blocks(),
                    )
                    .expect("valid prox shape"),
                    prox_b: ProxParams::zeros(
                        st.prox_b.c_in(),
                        st.prox_b.c_hid(),
                        st.prox_b.c_out(),
                        st.prox_b.num_blocks(),
                    )
                    .expect("valid prox shape"),
                    eta1_raw: 0.0,
                    eta2_raw: 0.0,
                })
                .collect(),
        }
    }

    /// Canonical parameter order: bank taps, init kernel, then per stage
    /// (prox_m, prox_b, eta1_raw, eta2_raw).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.bank.to_tensor().data());
        out.extend_from_slice(self.init_kernel.to_tensor().data());
        for st in &self.stages {
            st.prox_m.flatten_into(&mut out);
            st.prox_b.flatten_into(&mut out);
            out.push(st.eta1_raw);
            out.push(st.eta2_raw);
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0;
        let bank_tensor = self.bank.to_tensor();
        let bank_len = bank_tensor.data().len();
        let nt = Tensor::new(bank_tensor.shape().to_vec(), flat[..bank_len].to_vec())?;
        self.bank = KernelBank::from_tensor(&nt)?;
        pos += bank_len;

        let init_tensor = self.init_kernel.to_tensor();
        let init_len = init_tensor.data().len();
        let it = Tensor::new(init_tensor.shape().to_vec(), flat[pos..pos + init_len].to_vec())?;
        self.init_kernel = ConvKernel::from_tensor(&it)?;
        pos += init_len;

        for st in &mut self.stages {
            st.prox_m.read_from_flat(flat, &mut pos)?;
            st.prox_b.read_from_flat(flat, &mut pos)?;
            st.eta1_raw = flat[pos];
            st.eta2_raw = flat[pos + 1];
            pos += 2;
        }
        if pos != flat.len() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} scalars, parameters need {pos}",
                flat.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bank.is_finite()
            && self.init_kernel.is_finite()
            && self.stages.iter().all(|st| {
                st.prox_m.is_finite()
                    && st.prox_b.is_finite()
                    && st.eta1_raw.is_finite()
                    && st.eta2_raw.is_finite()
            })
    }

    /// Per-stage solver parameters for [`crate::solver::run`].
    pub fn stage_params(&self) -> Vec<StageParams> {
        self.stages
            .iter()
            .map(|st| StageParams {
                eta1: softplus(st.eta1_raw),
                eta2: sigmoid(st.eta2_raw),
                prox_m: crate::prox::ProxKind::Residual(st.prox_m.clone()),
                prox_b: crate::prox::ProxKind::Residual(st.prox_b.clone()),
            })
            .collect()
    }

    /// Solver configuration for running this trained model.
    pub fn solver_config(&self, record_trace: bool) -> SolverConfig {
        let first = self.stages.first();
        SolverConfig {
            stages: self.stages.len(),
            eta1: first.map_or(0.1, |st| softplus(st.eta1_raw)),
            eta2: first.map_or(ETA2_INIT, |st| sigmoid(st.eta2_raw)),
            prox_m: crate::prox::ProxKind::Identity,
            prox_b: crate::prox::ProxKind::Identity,
            init: InitOp::Conv(self.init_kernel.clone()),
            record_trace,
        }
    }
}

/// Stage-wise training loss over recorded backgrounds `B^(0)..B^(S)` and
/// rain estimates `R^(1)..R^(S)`.
pub fn loss(
    backgrounds: &[Image],
    rains: &[Image],
    b_true: &Image,
    o: &Image,
    cfg: &TrainConfig,
) -> Result<f64> {
    if backgrounds.len() != cfg.lambda.len() || rains.len() != cfg.gamma.len() {
        return Err(Error::Config(format!(
            "stage outputs incomplete: {} backgrounds and {} rains for {} stages",
            backgrounds.len(),
            rains.len(),
            cfg.stages
        )));
    }
    let rain_target = o.sub(b_true);
    let mut total = 0.0;
    for (b, &weight) in backgrounds.iter().zip(&cfg.lambda) {
        total += weight * b.sub(b_true).norm_sq();
    }
    for (r, &weight) in rains.iter().zip(&cfg.gamma) {
        total += weight * rain_target.sub(r).norm_sq();
    }
    Ok(total)
}

struct StageTape {
    m_prev: RainMapStack,
    b_prev: Image,
    /// Rtil - Rhat, the analysis input.
    diff: Image,
    /// C^T diff, before scaling by eta1.
    analysis: RainMapStack,
    prox_m_tape: ProxTape,
    m_new: RainMapStack,
    rain: Image,
    b_hat: Image,
    prox_b_tape: ProxTape,
    b_new: Image,
}

/// Forward activations of the whole unfolded network for one sample.
pub struct NetTape {
    b0: Image,
    stages: Vec<StageTape>,
}

impl NetTape {
    /// `B^(0)..B^(S)`.
    pub fn backgrounds(&self) -> Vec<Image> {
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        out.push(self.b0.clone());
        out.extend(self.stages.iter().map(|st| st.b_new.clone()));
        out
    }

    /// `R^(1)..R^(S)`.
    pub fn rains(&self) -> Vec<Image> {
        self.stages.iter().map(|st| st.rain.clone()).collect()
    }

    pub fn final_background(&self) -> &Image {
        self.stages.last().map_or(&self.b0, |st| &st.b_new)
    }

    /// Smallest |pre-activation| over all prox tapes; finite-difference
    /// checks reject instances near a ReLU kink.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|st| [&st.prox_m_tape, &st.prox_b_tape])
            .fold(f64::INFINITY, |m, t| m.min(t.min_abs_pre_activation()))
    }
}

fn image_from_planes(planes: Vec<Plane>) -> Result<Image> {
    let mut it = planes.into_iter();
    Image::new([
        it.next().ok_or_else(|| Error::ShapeMismatch("expected 3 planes".into()))?,
        it.next().ok_or_else(|| Error::ShapeMismatch("expected 3 planes".into()))?,
        it.next().ok_or_else(|| Error::ShapeMismatch("expected 3 planes".into()))?,
    ])
}

/// Run the unfolded network, caching everything the backward pass needs.
/// Matches [`crate::solver::run`] with this parameter set bitwise.
pub fn forward_tape(o: &Image, params: &LearnableSet) -> Result<NetTape> {
    let (h, w) = o.shape();
    let n = params.bank.num_kernels();
    let b0 = InitOp::Conv(params.init_kernel.clone()).apply(o)?;
    let mut m = RainMapStack::zeros(n, h, w);
    let mut b = b0.clone();
    let mut stages = Vec::with_capacity(params.stages.len());
    for st in &params.stages {
        let eta1 = softplus(st.eta1_raw);
        let eta2 = sigmoid(st.eta2_raw);

        let pre = m_step_pre_prox(&m, &b, o, &params.bank, eta1)?;
        let (m_planes, prox_m_tape) =
            residual_prox_forward_tape(&st.prox_m, pre.prox_input.maps())?;
        let m_new = RainMapStack::new(m_planes)?;

        let bpre = b_step_pre_prox(&m_new, &b, o, &params.bank, eta2)?;
        let (b_planes, prox_b_tape) =
            residual_prox_forward_tape(&st.prox_b, bpre.prox_input.planes())?;
        let b_new = image_from_planes(b_planes)?;

        let diff = pre.rain_from_maps.sub(&pre.rain_from_background);
        stages.push(StageTape {
            m_prev: std::mem::replace(&mut m, m_new.clone()),
            b_prev: std::mem::replace(&mut b, b_new.clone()),
            diff,
            analysis: pre.analysis,
            prox_m_tape,
            m_new,
            rain: bpre.rain,
            b_hat: bpre.background_estimate,
            prox_b_tape,
            b_new,
        });
    }
    Ok(NetTape { b0, stages })
}

pub fn loss_from_tape(
    tape: &NetTape,
    b_true: &Image,
    o: &Image,
    cfg: &TrainConfig,
) -> Result<f64> {
    loss(&tape.backgrounds(), &tape.rains(), b_true, o, cfg)
}

/// Exact reverse-mode gradients of the stage-wise loss with respect to every
/// learnable. Returns the loss value and a [`LearnableSet`] holding the
/// gradients.
pub fn backward(
    o: &Image,
    b_true: &Image,
    params: &LearnableSet,
    cfg: &TrainConfig,
) -> Result<(f64, LearnableSet)> {
    let tape = forward_tape(o, params)?;
    backward_from_tape(&tape, o, b_true, params, cfg)
}

pub fn backward_from_tape(
    tape: &NetTape,
    o: &Image,
    b_true: &Image,
    params: &LearnableSet,
    cfg: &TrainConfig,
) -> Result<(f64, LearnableSet)> {
    if params.stages.len() != cfg.stages {
        return Err(Error::Config(format!(
            "parameter set has {} stages, config expects {}",
            params.stages.len(),
            cfg.stages
        )));
    }
    let loss_val = loss_from_tape(tape, b_true, o, cfg)?;
    let mut grads = params.zeros_like();
    let (h, w) = o.shape();
    let n = params.bank.num_kernels();
    let rain_target = o.sub(b_true);

    // gradients flowing backwards through the recursion
    let mut g_b = Image::zeros(h, w);
    let mut g_m = RainMapStack::zeros(n, h, w);

    for (s, tp) in tape.stages.iter().enumerate().rev() {
        let st = &params.stages[s];
        let eta1 = softplus(st.eta1_raw);
        let eta2 = sigmoid(st.eta2_raw);

        // direct loss term on B^(s+1 in paper indexing)
        g_b.axpy(2.0 * cfg.lambda[s + 1], &tp.b_new.sub(b_true));

        // B = prox_b(P), P = (1 - eta2) B_prev + eta2 Bhat
        let (g_p_planes, g_prox_b) =
            residual_prox_backward(&st.prox_b, &tp.prox_b_tape, g_b.planes())?;
        grads.stages[s].prox_b = g_prox_b;
        let g_p = image_from_planes(g_p_planes)?;
        let g_eta2 = g_p.dot(&tp.b_hat.sub(&tp.b_prev));
        grads.stages[s].eta2_raw = g_eta2 * eta2 * (1.0 - eta2);
        let mut g_b_prev = g_p.scaled(1.0 - eta2);

        // Bhat = O - R, plus the direct loss term on R
        let mut g_r = g_p.scaled(-eta2);
        g_r.axpy(2.0 * cfg.gamma[s], &tp.rain.sub(&rain_target));

        // R = synth(C, M_new)
        grads.bank.axpy(1.0, &synthesize_rain_bank_grad(&params.bank, &tp.m_new, &g_r)?);
        g_m.axpy(1.0, &synthesize_rain_adjoint(&params.bank, &g_r)?);

        // M_new = prox_m(Q), Q = M_prev - eta1 * A
        let (g_q_planes, g_prox_m) =
            residual_prox_backward(&st.prox_m, &tp.prox_m_tape, g_m.maps())?;
        grads.stages[s].prox_m = g_prox_m;
        let g_q = RainMapStack::new(g_q_planes)?;
        let g_eta1 = -g_q.dot(&tp.analysis);
        grads.stages[s].eta1_raw = g_eta1 * sigmoid(st.eta1_raw);

        // A = C^T diff: bank grad through the analysis path, then g to diff
        let g_a = g_q.scaled(-eta1);
        grads.bank.axpy(1.0, &adjoint_bank_grad(&params.bank, &tp.diff, &g_a)?);
        let g_diff = synthesize_rain(&params.bank, &g_a)?;

        // diff = Rtil - Rhat; Rtil = synth(C, M_prev); Rhat = O - B_prev
        grads.bank.axpy(1.0, &synthesize_rain_bank_grad(&params.bank, &tp.m_prev, &g_diff)?);
        let mut g_m_prev = g_q;
        g_m_prev.axpy(1.0, &synthesize_rain_adjoint(&params.bank, &g_diff)?);
        g_b_prev.axpy(1.0, &g_diff);

        g_b = g_b_prev;
        g_m = g_m_prev;
    }

    // B^(0) = init_kernel * O; the gradient reaching M^(0) = 0 is dropped
    g_b.axpy(2.0 * cfg.lambda[0], &tape.b0.sub(b_true));
    grads.init_kernel = params.init_kernel.kernel_grad(o.planes(), g_b.planes())?;

    Ok((loss_val, grads))
}

/// Central finite differences of the loss over the canonical parameter
/// order. The independent check for [`backward`].
pub fn finite_difference_gradients(
    o: &Image,
    b_true: &Image,
    params: &LearnableSet,
    cfg: &TrainConfig,
    step: f64,
) -> Result<Vec<f64>> {
    let flat = params.flatten();
    let mut grads = Vec::with_capacity(flat.len());
    let mut work = params.clone();
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += step;
        work.assign_from_flat(&plus)?;
        let lp = loss_from_tape(&forward_tape(o, &work)?, b_true, o, cfg)?;
        let mut minus = flat.clone();
        minus[i] -= step;
        work.assign_from_flat(&minus)?;
        let lm = loss_from_tape(&forward_tape(o, &work)?, b_true, o, cfg)?;
        grads.push((lp - lm) / (2.0 * step));
    }
    Ok(grads)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(dim: usize) -> Adam {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

pub struct TrainReport {
    pub params: LearnableSet,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// End-to-end training from a seeded initialization.
pub fn train(dataset: &[(Image, Image)], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = LearnableSet::init(cfg, &mut rng)?;
    train_loop(params, dataset, cfg, &mut rng)
}

/// Continue training from an existing parameter set (checkpoint resume).
pub fn train_from(
    init: LearnableSet,
    dataset: &[(Image, Image)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_7375_6d65); // "resume"
    train_loop(init, dataset, cfg, &mut rng)
}

fn train_loop(
    mut params: LearnableSet,
    dataset: &[(Image, Image)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (o, b) in dataset {
        let (h, w) = o.shape();
        if o.shape() != b.shape() {
            return Err(Error::ShapeMismatch("rainy/clean pair shapes differ".into()));
        }
        if cfg.patch_size > h || cfg.patch_size > w {
            return Err(Error::Config(format!(
                "patch size {} exceeds an image of {h}x{w}",
                cfg.patch_size
            )));
        }
    }

    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // crops drawn sequentially so parallel execution cannot change them
            let jobs: Vec<(usize, usize, usize)> = batch
                .iter()
                .map(|&idx| {
                    let (h, w) = dataset[idx].0.shape();
                    let i0 = rng.random_range(0..=h - cfg.patch_size);
                    let j0 = rng.random_range(0..=w - cfg.patch_size);
                    (idx, i0, j0)
                })
                .collect();

            let results: Vec<Result<(f64, Vec<f64>)>> = jobs
                .par_iter()
                .map(|&(idx, i0, j0)| {
                    let (o, b) = &dataset[idx];
                    let oc = o.crop(i0, j0, cfg.patch_size);
                    let bc = b.crop(i0, j0, cfg.patch_size);
                    let (l, g) = backward(&oc, &bc, &params, cfg)?;
                    Ok((l, g.flatten()))
                })
                .collect();

            // fixed-order reduction over the batch
            let mut grad_sum = vec![0.0; flat.len()];
            let mut loss_sum = 0.0;
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                for (a, b) in grad_sum.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            loss_sum *= inv;
            for g in &mut grad_sum {
                *g *= inv;
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite { stage: format!("training epoch {epoch}") });
            }

            adam.step(&mut flat, &grad_sum, lr);
            params.assign_from_flat(&flat)?;
            epoch_loss += loss_sum;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    Ok(TrainReport { params, epoch_losses })
}

/// Write `epoch,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(f, "{},{:.8}", e + 1, l)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------
//
// u32 LE tensor count, then per tensor (u32 LE name length, name bytes, RCDT
// blob), then a UTF-8 JSON manifest to end of file. Tensor payloads are f32;
// step-size raw values live in the manifest at full precision.

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    version: u32,
    stages: usize,
    num_kernels: usize,
    kernel_size: usize,
    prox_blocks: usize,
    prox_hidden: usize,
    init_kernel_size: usize,
    bank_normalized: bool,
    eta1_raw: Vec<f64>,
    eta2_raw: Vec<f64>,
    eta1: Vec<f64>,
    eta2: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

fn named_tensors(params: &LearnableSet) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    out.push(("c".to_string(), params.bank.to_tensor()));
    out.push(("init_kernel".to_string(), params.init_kernel.to_tensor()));
    for (s, st) in params.stages.iter().enumerate() {
        for (tag, prox) in [("m", &st.prox_m), ("b", &st.prox_b)] {
            out.push((format!("prox_{tag}.{s}.expand"), prox.expand.to_tensor()));
            for (t, block) in prox.blocks.iter().enumerate() {
                out.push((format!("prox_{tag}.{s}.block{t}.w1"), block.w1.to_tensor()));
                out.push((
                    format!("prox_{tag}.{s}.block{t}.b1"),
                    Tensor::new(vec![block.b1.len()], block.b1.clone()).expect("bias tensor"),
                ));
                out.push((format!("prox_{tag}.{s}.block{t}.w2"), block.w2.to_tensor()));
                out.push((
                    format!("prox_{tag}.{s}.block{t}.b2"),
                    Tensor::new(vec![block.b2.len()], block.b2.clone()).expect("bias tensor"),
                ));
            }
            out.push((format!("prox_{tag}.{s}.compress"), prox.compress.to_tensor()));
        }
    }
    out
}

pub fn write_checkpoint(w: &mut impl Write, params: &LearnableSet) -> Result<()> {
    let tensors = named_tensors(params);
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_rcdt(w, tensor)?;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stages: params.stages.len(),
        num_kernels: params.bank.num_kernels(),
        kernel_size: params.bank.kernel_size(),
        prox_blocks: params.stages.first().map_or(0, |st| st.prox_m.num_blocks()),
        prox_hidden: params.stages.first().map_or(0, |st| st.prox_m.c_hid()),
        init_kernel_size: params.init_kernel.kernel_size(),
        bank_normalized: params.bank.normalized,
        eta1_raw: params.stages.iter().map(|st| st.eta1_raw).collect(),
        eta2_raw: params.stages.iter().map(|st| st.eta2_raw).collect(),
        eta1: (0..params.stages.len()).map(|s| params.eta1(s)).collect(),
        eta2: (0..params.stages.len()).map(|s| params.eta2(s)).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::corrupt(format!("manifest encode failed: {e}")))?;
    w.write_all(json.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<LearnableSet> {
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)
        .map_err(|_| Error::corrupt("truncated checkpoint: missing tensor count"))?;
    let count = u32::from_le_bytes(count_buf);
    if count == 0 || count > 100_000 {
        return Err(Error::corrupt(format!("implausible tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)
            .map_err(|_| Error::corrupt("truncated checkpoint: missing name length"))?;
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::corrupt(format!("implausible tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::corrupt("truncated checkpoint: missing name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::corrupt("tensor name is not UTF-8"))?;
        let tensor = read_rcdt(r)?;
        tensors.push((name, tensor));
    }
    let mut manifest_bytes = Vec::new();
    r.read_to_end(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::corrupt(format!("manifest parse failed: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }

    let per_prox = 2 + 4 * manifest.prox_blocks;
    let expected = 2 + manifest.stages * 2 * per_prox;
    if tensors.len() != expected {
        return Err(Error::corrupt(format!(
            "manifest declares {} stages with {} blocks ({expected} tensors), file has {}",
            manifest.stages,
            manifest.prox_blocks,
            tensors.len()
        )));
    }
    if manifest.eta1_raw.len() != manifest.stages || manifest.eta2_raw.len() != manifest.stages {
        return Err(Error::corrupt("manifest step-size lists do not match the stage count".into()));
    }

    let mut iter = tensors.into_iter();
    let mut take = |expect: &str| -> Result<Tensor> {
        let (name, tensor) =
            iter.next().ok_or_else(|| Error::corrupt("tensor list ended early"))?;
        if name != expect {
            return Err(Error::corrupt(format!("expected tensor '{expect}', found '{name}'")));
        }
        Ok(tensor)
    };

    let bank_tensor = take("c")?;
    let mut bank = KernelBank::from_tensor(&bank_tensor)?;
    if bank.kernel_size() != manifest.kernel_size || bank.num_kernels() != manifest.num_kernels {
        return Err(Error::corrupt("bank tensor disagrees with the manifest dimensions"));
    }
    bank.normalized = manifest.bank_normalized;
    let init_kernel = ConvKernel::from_tensor(&take("init_kernel")?)?;
    if init_kernel.kernel_size() != manifest.init_kernel_size
        || init_kernel.c_in() != 3
        || init_kernel.c_out() != 3
    {
        return Err(Error::corrupt("init kernel tensor disagrees with the manifest"));
    }

    let mut stages = Vec::with_capacity(manifest.stages);
    for s in 0..manifest.stages {
        let mut read_prox = |tag: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<ProxParams> {
            let expand = ConvKernel::from_tensor(&take(&format!("prox_{tag}.{s}.expand"))?)?;
            let mut blocks = Vec::with_capacity(manifest.prox_blocks);
            for t in 0..manifest.prox_blocks {
                let w1 = ConvKernel::from_tensor(&take(&format!("prox_{tag}.{s}.block{t}.w1"))?)?;
                let b1 = take(&format!("prox_{tag}.{s}.block{t}.b1"))?.data().to_vec();
                let w2 = ConvKernel::from_tensor(&take(&format!("prox_{tag}.{s}.block{t}.w2"))?)?;
                let b2 = take(&format!("prox_{tag}.{s}.block{t}.b2"))?.data().to_vec();
                blocks.push(crate::prox::ResBlock { w1, b1, w2, b2 });
            }
            let compress = ConvKernel::from_tensor(&take(&format!("prox_{tag}.{s}.compress"))?)?;
            let prox = ProxParams { expand, blocks, compress };
            prox.validate().map_err(|e| Error::corrupt(format!("prox_{tag}.{s}: {e}")))?;
            if prox.c_hid() != manifest.prox_hidden {
                return Err(Error::corrupt(format!(
                    "prox_{tag}.{s} hidden width {} disagrees with manifest {}",
                    prox.c_hid(),
                    manifest.prox_hidden
                )));
            }
            Ok(prox)
        };
        let prox_m = read_prox("m", &mut take)?;
        let prox_b = read_prox("b", &mut take)?;
        if prox_m.c_in() != manifest.num_kernels || prox_b.c_in() != 3 {
            return Err(Error::corrupt("prox channel counts disagree with the manifest"));
        }
        stages.push(StageLearnables {
            prox_m,
            prox_b,
            eta1_raw: manifest.eta1_raw[s],
            eta2_raw: manifest.eta2_raw[s],
        });
    }

    let params = LearnableSet { bank, init_kernel, stages };
    if !params.is_finite() {
        return Err(Error::corrupt("checkpoint contains non-finite parameters"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &LearnableSet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_checkpoint(&mut f, params)
}

pub fn load_checkpoint(path: &Path) -> Result<LearnableSet> {
    let mut f = std::fs::File::open(path)?;
    read_checkpoint(&mut f).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(stages: usize) -> TrainConfig {
        let (lambda, gamma) = stage_loss_weights(stages);
        TrainConfig {
            stages,
            num_kernels: 2,
            kernel_size: 3,
            prox_blocks: 1,
            prox_hidden: 4,
            lambda,
            gamma,
            learning_rate: 1e-3,
            lr_decay_factor: 5.0,
            lr_decay_every: 25,
            epochs: 2,
            batch_size: 2,
            patch_size: 8,
            seed: 7,
        }
    }

    fn tiny_instance(stages: usize, seed: u64) -> (Image, Image, LearnableSet, TrainConfig) {
        let cfg = tiny_config(stages);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LearnableSet::init(&cfg, &mut rng).unwrap();
        let (_, pairs) = generate_dataset(
            &SynthConfig {
                kernel_size: 3,
                num_kernels: 2,
                density: 20.0,
                length_range: (1.5, 3.0),
                ..SynthConfig::default()
            },
            1,
            8,
            8,
            seed + 1,
        )
        .unwrap();
        (pairs[0].o.clone(), pairs[0].b_true.clone(), params, cfg)
    }

    #[test]
    fn default_weights_make_final_stage_dominant() {
        let (lambda, gamma) = stage_loss_weights(5);
        assert_eq!(lambda.len(), 6);
        assert_eq!(gamma.len(), 5);
        assert_eq!(lambda[5], 1.0);
        assert_eq!(gamma[4], 1.0);
        let max_other = lambda[..5].iter().cloned().fold(0.0_f64, f64::max);
        assert_eq!(lambda[5] / max_other, 10.0);
    }

    #[test]
    fn loss_cases() {
        let cfg = tiny_config(1);
        let b_true = Image::constant(4, 4, 0.5);
        let o = Image::constant(4, 4, 0.7);
        // perfect outputs at every stage
        let r_true = o.sub(&b_true);
        let l = loss(
            &[b_true.clone(), b_true.clone()],
            &[r_true.clone()],
            &b_true,
            &o,
            &cfg,
        )
        .unwrap();
        assert_eq!(l, 0.0);

        // unit-error outputs with lambda = [0, 1], gamma = [1]
        let mut cfg2 = cfg.clone();
        cfg2.lambda = vec![0.0, 1.0];
        cfg2.gamma = vec![1.0];
        let b_off = b_true.map(|v| v + 1.0);
        let r_off = r_true.map(|v| v + 1.0);
        let l2 = loss(&[b_true.clone(), b_off], &[r_off], &b_true, &o, &cfg2).unwrap();
        let hw3 = 4.0 * 4.0 * 3.0;
        assert!((l2 - 2.0 * hw3).abs() < 1e-9, "{l2}");

        // missing stage output
        assert!(loss(&[b_true.clone()], &[], &b_true, &o, &cfg).is_err());

        // random outputs against a scalar loop
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mk = |rng: &mut ChaCha8Rng| {
            Image::new(std::array::from_fn(|_| {
                Plane::from_fn(4, 4, |_, _| rng.random_range(0.0..1.0))
            }))
            .unwrap()
        };
        let (b0, b1, r1) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let got = loss(&[b0.clone(), b1.clone()], &[r1.clone()], &b_true, &o, &cfg).unwrap();
        let mut want = 0.0;
        for c in 0..3 {
            for i in 0..16 {
                let d0 = b0.plane(c).data()[i] - 0.5;
                let d1 = b1.plane(c).data()[i] - 0.5;
                let dr = (0.7 - 0.5) - r1.plane(c).data()[i];
                want += cfg.lambda[0] * d0 * d0 + cfg.lambda[1] * d1 * d1 + cfg.gamma[0] * dr * dr;
            }
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn forward_tape_matches_solver_run_bitwise() {
        let (o, _b, params, _cfg) = tiny_instance(2, 50);
        let tape = forward_tape(&o, &params).unwrap();
        let solver_cfg = params.solver_config(false);
        let stage_params = params.stage_params();
        let out = crate::solver::run(&o, &params.bank, &solver_cfg, Some(&stage_params)).unwrap();
        assert_eq!(out.background, *tape.final_background());
        assert_eq!(out.rain, tape.stages.last().unwrap().rain);
        assert_eq!(out.maps, tape.stages.last().unwrap().m_new);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let (o, b_true, params, mut cfg) = tiny_instance(1, 60);
        cfg.lambda = vec![0.0, 0.0];
        cfg.gamma = vec![0.0];
        // validate() would reject all-zero weights; call backward directly
        let (l, grads) = backward(&o, &b_true, &params, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn eta2_gradient_matches_hand_derived_closed_form() {
        // S = 1 with exactly-identity proxes: B1 = (1 - eta2) B0 + eta2 Bhat,
        // so dL/deta2 = 2 lambda1 <B1 - B_true, Bhat - B0> and only the
        // lambda1 term depends on eta2.
        let (o, b_true, mut params, cfg) = tiny_instance(1, 70);
        let st = &mut params.stages[0];
        st.prox_m = ProxParams::zeros(2, 4, 2, 1).unwrap();
        st.prox_m.expand = ConvKernel::identity(2, 4, 3).unwrap();
        st.prox_m.compress = ConvKernel::identity(4, 2, 3).unwrap();
        st.prox_b = ProxParams::zeros(3, 4, 3, 1).unwrap();
        st.prox_b.expand = ConvKernel::identity(3, 4, 3).unwrap();
        st.prox_b.compress = ConvKernel::identity(4, 3, 3).unwrap();

        let tape = forward_tape(&o, &params).unwrap();
        let (_, grads) = backward(&o, &b_true, &params, &cfg).unwrap();

        let b0 = &tape.b0;
        let b1 = &tape.stages[0].b_new;
        let b_hat = &tape.stages[0].b_hat;
        let eta2_raw = params.stages[0].eta2_raw;
        let eta2 = sigmoid(eta2_raw);
        let closed = 2.0 * cfg.lambda[1] * b1.sub(&b_true).dot(&b_hat.sub(b0));
        let want_raw = closed * eta2 * (1.0 - eta2);
        let got = grads.stages[0].eta2_raw;
        assert!(
            (got - want_raw).abs() <= 1e-8 * want_raw.abs().max(1.0),
            "got {got}, closed form {want_raw}"
        );
    }

    #[test]
    fn full_gradient_matches_finite_differences_small() {
        // one small instance here; the acceptance suite runs five seeds
        let (o, b_true, params, cfg) = tiny_instance(2, 80);
        let tape = forward_tape(&o, &params).unwrap();
        assert!(tape.min_abs_pre_activation() > 1e-6, "instance sits on a ReLU kink");
        let (_, grads) = backward(&o, &b_true, &params, &cfg).unwrap();
        let analytic = grads.flatten();
        let numeric = finite_difference_gradients(&o, &b_true, &params, &cfg, 1e-5).unwrap();
        let gmax = analytic.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        let floor = (1e-3 * gmax).max(1e-9);
        let mut worst = 0.0_f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (_, pairs) = generate_dataset(
            &SynthConfig { kernel_size: 3, num_kernels: 2, ..SynthConfig::default() },
            2,
            8,
            8,
            90,
        )
        .unwrap();
        let data: Vec<(Image, Image)> =
            pairs.iter().map(|p| (p.o.clone(), p.b_true.clone())).collect();
        let mut cfg = tiny_config(1);
        cfg.epochs = 0;
        let report = train(&data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = LearnableSet::init(&cfg, &mut rng).unwrap();
        assert_eq!(report.params.flatten(), fresh.flatten());
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_finite() {
        let (_, pairs) = generate_dataset(
            &SynthConfig { kernel_size: 3, num_kernels: 2, ..SynthConfig::default() },
            3,
            8,
            8,
            91,
        )
        .unwrap();
        let data: Vec<(Image, Image)> =
            pairs.iter().map(|p| (p.o.clone(), p.b_true.clone())).collect();
        let cfg = tiny_config(1);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let data = vec![(Image::constant(8, 8, 0.4), Image::constant(8, 8, 0.4))];
        let mut cfg = tiny_config(1);
        cfg.patch_size = 16;
        assert!(matches!(train(&data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_bitwise_at_f32() {
        let (_o, _b, params, _cfg) = tiny_instance(2, 100);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();
        let loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &loaded).unwrap();
        assert_eq!(bytes, bytes2, "second save must be byte-identical");
        // raw step sizes travel through the manifest at full precision
        assert_eq!(loaded.stages[0].eta1_raw, params.stages[0].eta1_raw);
        assert_eq!(loaded.stages[0].eta2_raw, params.stages[0].eta2_raw);
    }

    #[test]
    fn checkpoint_detects_stage_count_mismatch() {
        // hand-write a container whose manifest claims one stage more than
        // the tensor list carries
        let (_o, _b, params, _cfg) = tiny_instance(2, 101);
        let tensors = named_tensors(&params);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &tensors {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            write_rcdt(&mut bytes, tensor).unwrap();
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            stages: 3,
            num_kernels: params.bank.num_kernels(),
            kernel_size: params.bank.kernel_size(),
            prox_blocks: params.stages[0].prox_m.num_blocks(),
            prox_hidden: params.stages[0].prox_m.c_hid(),
            init_kernel_size: 3,
            bank_normalized: true,
            eta1_raw: vec![0.0; 3],
            eta2_raw: vec![0.0; 3],
            eta1: vec![0.1; 3],
            eta2: vec![0.8; 3],
        };
        bytes.extend_from_slice(serde_json::to_string(&manifest).unwrap().as_bytes());
        assert!(matches!(
            read_checkpoint(&mut bytes.as_slice()),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn truncated_checkpoint_is_an_error_not_a_crash() {
        let (_o, _b, params, _cfg) = tiny_instance(1, 102);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();
        for cut in [0, 1, 3, 7, 64, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_checkpoint(&mut &bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
