//! The unfolded alternating proximal-gradient solver.
//!
//! Each stage updates the rain maps and then the background:
//!
//! ```text
//! M-step:  Rhat = O - B,   Rtil = synth(C, M)
//!          E    = eta1 * C^T (Rtil - Rhat)
//!          M'   = prox_m(M - E)
//! B-step:  R    = synth(C, M')
//!          Bhat = O - R
//!          B'   = prox_b((1 - eta2) * B + eta2 * Bhat)
//! ```
//!
//! Initialization: `M = 0`, `B` from a local convolution of the input.
//! With analytic proxes (soft threshold / box projection) this is plain
//! proximal gradient descent; with learned residual proxes and per-stage
//! parameters it is the trained unfolded network.
//!
//! Step-size bookkeeping: the fidelity gradients follow the crate's
//! half-derivative convention (see [`crate::model`]), so the m-step with
//! threshold `tau` is exactly ISTA on `fidelity + (2 tau / eta1) |M|_1`
//! with true-gradient step `eta1 / 2`. [`estimate_eta1_bound`] returns
//! `1 / (2 lambda_max)`, which keeps that step safely inside the descent
//! region; the monitored objective uses the matching l1 weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    objective, synthesize_rain, synthesize_rain_adjoint, Image, KernelBank, RainMapStack,
    Regularizers,
};
use crate::prox::ProxKind;
use crate::tensor::{conv2d_same, ConvKernel, Plane};

/// How the background is initialized from the observed image.
#[derive(Clone, Debug)]
pub enum InitOp {
    /// Count-normalized 3x3 local mean per channel (default). A constant
    /// image initializes to the same constant, including at borders.
    MeanBlur,
    /// Plain zero-padded channel-mixing convolution; the learnable form.
    Conv(ConvKernel),
}

impl InitOp {
    pub fn apply(&self, o: &Image) -> Result<Image> {
        match self {
            InitOp::MeanBlur => {
                let (h, w) = o.shape();
                let ones = Plane::constant(3, 3, 1.0);
                let counts = conv2d_same(&Plane::constant(h, w, 1.0), &ones)?;
                let blur = |p: &Plane| -> Result<Plane> {
                    let sums = conv2d_same(p, &ones)?;
                    let data = sums
                        .data()
                        .iter()
                        .zip(counts.data())
                        .map(|(s, c)| s / c)
                        .collect();
                    Plane::from_vec(h, w, data)
                };
                Ok(Image::new([
                    blur(o.plane(0))?,
                    blur(o.plane(1))?,
                    blur(o.plane(2))?,
                ])?)
            }
            InitOp::Conv(kernel) => {
                if kernel.c_in() != 3 || kernel.c_out() != 3 {
                    return Err(Error::ShapeMismatch(
                        "init kernel must map 3 channels to 3 channels".into(),
                    ));
                }
                let out = kernel.forward(o.planes())?;
                let mut it = out.into_iter();
                Ok(Image::new([
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                ])?)
            }
        }
    }

    /// Channel-preserving 3x3 box-blur taps; the starting point for the
    /// learnable init convolution.
    pub fn box_blur_kernel() -> ConvKernel {
        let mut kernel = ConvKernel::zeros(3, 3, 3).expect("static shape");
        for c in 0..3 {
            for u in 0..3 {
                for v in 0..3 {
                    kernel.tap_mut(c, c).set(u, v, 1.0 / 9.0);
                }
            }
        }
        kernel
    }
}

/// Per-stage update parameters. The optimization mode shares one set across
/// stages; the trained mode supplies one per stage.
#[derive(Clone, Debug)]
pub struct StageParams {
    pub eta1: f64,
    pub eta2: f64,
    pub prox_m: ProxKind,
    pub prox_b: ProxKind,
}

impl StageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0) || !self.eta1.is_finite() {
            return Err(Error::Config(format!("eta1 must be positive, got {}", self.eta1)));
        }
        if !(self.eta2 > 0.0 && self.eta2 <= 1.0) {
            return Err(Error::Config(format!(
                "eta2 must lie in (0, 1], got {}",
                self.eta2
            )));
        }
        Ok(())
    }

    /// The objective the analytic update provably decreases, when the prox
    /// choices have closed-form penalties. l1 weights are `2 tau / eta` per
    /// the step-size convention in the module docs.
    pub fn objective_regs(&self) -> Option<Regularizers> {
        let alpha = match &self.prox_m {
            ProxKind::SoftThreshold(tau) => 2.0 * tau / self.eta1,
            ProxKind::Identity => 0.0,
            ProxKind::BoxProject { .. } => 1.0,
            ProxKind::Residual(_) => return None,
        };
        let beta = match &self.prox_b {
            ProxKind::SoftThreshold(tau) => 2.0 * tau / self.eta2,
            ProxKind::Identity => 0.0,
            ProxKind::BoxProject { .. } => 1.0,
            ProxKind::Residual(_) => return None,
        };
        Some(Regularizers {
            alpha,
            beta,
            g1: self.prox_m.clone(),
            g2: self.prox_b.clone(),
        })
    }
}

/// Solver configuration. `stages = 0` returns the initialization directly.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub stages: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub prox_m: ProxKind,
    pub prox_b: ProxKind,
    pub init: InitOp,
    pub record_trace: bool,
}

/// Default soft-threshold level for analytic deraining of [0, 1] images.
pub const DEFAULT_SOFT_THRESHOLD: f64 = 1e-3;
/// Default number of stages.
pub const DEFAULT_STAGES: usize = 17;
/// Default background step size.
pub const DEFAULT_ETA2: f64 = 0.8;
/// Safety factor applied to the step-size bound.
pub const ETA1_SAFETY: f64 = 0.9;

impl SolverConfig {
    /// Optimization-mode defaults for a given bank and image size: sparse
    /// maps via a soft threshold, box prior on the background, and a step
    /// size backed off from the power-iteration bound.
    pub fn analytic(bank: &KernelBank, h: usize, w: usize) -> Result<SolverConfig> {
        let bound = estimate_eta1_bound(bank, h, w)?;
        Ok(SolverConfig {
            stages: DEFAULT_STAGES,
            eta1: ETA1_SAFETY * bound,
            eta2: DEFAULT_ETA2,
            prox_m: ProxKind::SoftThreshold(DEFAULT_SOFT_THRESHOLD),
            prox_b: ProxKind::BoxProject { lo: 0.0, hi: 1.0 },
            init: InitOp::MeanBlur,
            record_trace: false,
        })
    }

    pub fn stage_params(&self) -> StageParams {
        StageParams {
            eta1: self.eta1,
            eta2: self.eta2,
            prox_m: self.prox_m.clone(),
            prox_b: self.prox_b.clone(),
        }
    }
}

/// The pair the stages iterate on.
#[derive(Clone, Debug)]
pub struct StageState {
    pub maps: RainMapStack,
    pub background: Image,
}

/// Everything the m-step computes before its prox.
pub struct MStepPre {
    /// Rhat: rain implied by the previous background.
    pub rain_from_background: Image,
    /// Rtil: rain synthesized from the previous maps.
    pub rain_from_maps: Image,
    /// C^T (Rtil - Rhat), before scaling by eta1.
    pub analysis: RainMapStack,
    /// M - eta1 * analysis, the prox argument.
    pub prox_input: RainMapStack,
}

/// Everything the b-step computes before its prox.
pub struct BStepPre {
    /// R: rain synthesized from the updated maps.
    pub rain: Image,
    /// Bhat = O - R.
    pub background_estimate: Image,
    /// (1 - eta2) * B + eta2 * Bhat, the prox argument.
    pub prox_input: Image,
}

pub fn m_step_pre_prox(
    maps: &RainMapStack,
    background: &Image,
    o: &Image,
    bank: &KernelBank,
    eta1: f64,
) -> Result<MStepPre> {
    if o.shape() != background.shape() || o.shape() != maps.shape() {
        return Err(Error::ShapeMismatch("state and observation shapes differ".into()));
    }
    let rain_from_background = o.sub(background);
    let rain_from_maps = synthesize_rain(bank, maps)?;
    let diff = rain_from_maps.sub(&rain_from_background);
    let analysis = synthesize_rain_adjoint(bank, &diff)?;
    let mut prox_input = maps.clone();
    prox_input.axpy(-eta1, &analysis);
    Ok(MStepPre { rain_from_background, rain_from_maps, analysis, prox_input })
}

/// One rain-map update. `state` holds the previous `(M, B)`.
pub fn m_step(
    state: &StageState,
    o: &Image,
    bank: &KernelBank,
    eta1: f64,
    prox_m: &ProxKind,
) -> Result<RainMapStack> {
    let pre = m_step_pre_prox(&state.maps, &state.background, o, bank, eta1)?;
    let maps = prox_m.apply_stack(pre.prox_input.maps())?;
    RainMapStack::new(maps)
}

pub fn b_step_pre_prox(
    maps_new: &RainMapStack,
    background_prev: &Image,
    o: &Image,
    bank: &KernelBank,
    eta2: f64,
) -> Result<BStepPre> {
    let rain = synthesize_rain(bank, maps_new)?;
    let background_estimate = o.sub(&rain);
    let mut prox_input = background_prev.scaled(1.0 - eta2);
    prox_input.axpy(eta2, &background_estimate);
    Ok(BStepPre { rain, background_estimate, prox_input })
}

/// One background update. `state_after_m` holds the updated maps and the
/// previous background. Returns the new background and the stage's rain
/// estimate (the loss consumes both).
pub fn b_step(
    state_after_m: &StageState,
    o: &Image,
    bank: &KernelBank,
    eta2: f64,
    prox_b: &ProxKind,
) -> Result<(Image, Image)> {
    let pre = b_step_pre_prox(&state_after_m.maps, &state_after_m.background, o, bank, eta2)?;
    let planes = prox_b.apply_stack(pre.prox_input.planes())?;
    let mut it = planes.into_iter();
    let b_new = Image::new([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])?;
    Ok((b_new, pre.rain))
}

/// `M = 0`, `B` from the init operator.
pub fn init_state(o: &Image, bank: &KernelBank, init: &InitOp) -> Result<StageState> {
    let background = init.apply(o)?;
    let (h, w) = o.shape();
    Ok(StageState { maps: RainMapStack::zeros(bank.num_kernels(), h, w), background })
}

/// Intermediates of one recorded stage.
#[derive(Clone, Debug)]
pub struct StageRecord {
    pub rain_from_background: Image,
    pub rain_from_maps: Image,
    /// E = eta1 * C^T (Rtil - Rhat).
    pub map_step: RainMapStack,
    pub background_estimate: Image,
    pub rain: Image,
    pub background: Image,
    /// Objective after the m half-step (with the previous background), and
    /// after the b half-step. Uses [`StageParams::objective_regs`] when the
    /// proxes are analytic; plain fidelity otherwise.
    pub objective_after_m: f64,
    pub objective_after_b: f64,
    /// Y-channel PSNR of the stage background against the ground truth,
    /// when a truth image was supplied.
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StageTrace {
    pub records: Vec<StageRecord>,
}

pub struct RunOutput {
    pub background: Image,
    pub rain: Image,
    pub maps: RainMapStack,
    pub trace: StageTrace,
}

fn stage_objective(
    params: &StageParams,
    o: &Image,
    b: &Image,
    maps: &RainMapStack,
    bank: &KernelBank,
) -> Result<f64> {
    match params.objective_regs() {
        Some(regs) => objective(o, b, maps, bank, &regs),
        None => crate::model::fidelity(o, b, maps, bank),
    }
}

/// Run the full S-stage solver. `per_stage`, when given, must have exactly
/// `cfg.stages` entries and overrides the shared stage parameters.
pub fn run(
    o: &Image,
    bank: &KernelBank,
    cfg: &SolverConfig,
    per_stage: Option<&[StageParams]>,
) -> Result<RunOutput> {
    run_with_truth(o, bank, cfg, per_stage, None)
}

/// As [`run`], additionally recording per-stage Y-channel PSNR against a
/// ground-truth background when tracing is enabled.
pub fn run_with_truth(
    o: &Image,
    bank: &KernelBank,
    cfg: &SolverConfig,
    per_stage: Option<&[StageParams]>,
    truth: Option<&Image>,
) -> Result<RunOutput> {
    if let Some(list) = per_stage {
        if list.len() != cfg.stages {
            return Err(Error::Config(format!(
                "per-stage parameter list has {} entries for {} stages",
                list.len(),
                cfg.stages
            )));
        }
        for p in list {
            p.validate()?;
        }
    } else if cfg.stages > 0 {
        cfg.stage_params().validate()?;
    }

    let mut state = init_state(o, bank, &cfg.init)?;
    if cfg.stages == 0 {
        let rain = o.sub(&state.background);
        return Ok(RunOutput {
            background: state.background,
            rain,
            maps: state.maps,
            trace: StageTrace::default(),
        });
    }

    let shared = cfg.stage_params();
    let mut trace = StageTrace::default();
    let mut last_rain = None;
    for s in 0..cfg.stages {
        let params = per_stage.map_or(&shared, |list| &list[s]);

        let m_pre = m_step_pre_prox(&state.maps, &state.background, o, bank, params.eta1)?;
        let maps_new = RainMapStack::new(params.prox_m.apply_stack(m_pre.prox_input.maps())?)?;
        let after_m = StageState { maps: maps_new, background: state.background.clone() };

        let b_pre = b_step_pre_prox(&after_m.maps, &after_m.background, o, bank, params.eta2)?;
        let planes = params.prox_b.apply_stack(b_pre.prox_input.planes())?;
        let mut it = planes.into_iter();
        let b_new = Image::new([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])?;

        if cfg.record_trace {
            let objective_after_m =
                stage_objective(params, o, &state.background, &after_m.maps, bank)?;
            let objective_after_b = stage_objective(params, o, &b_new, &after_m.maps, bank)?;
            let psnr = truth.map(|t| {
                crate::metrics::psnr(
                    &crate::metrics::rgb_to_y(t),
                    &crate::metrics::rgb_to_y(&b_new),
                    1.0,
                )
                .unwrap_or(f64::NAN)
            });
            trace.records.push(StageRecord {
                rain_from_background: m_pre.rain_from_background.clone(),
                rain_from_maps: m_pre.rain_from_maps.clone(),
                map_step: m_pre.analysis.scaled(params.eta1),
                background_estimate: b_pre.background_estimate.clone(),
                rain: b_pre.rain.clone(),
                background: b_new.clone(),
                objective_after_m,
                objective_after_b,
                psnr,
            });
        }

        state = StageState { maps: after_m.maps, background: b_new };
        last_rain = Some(b_pre.rain);
    }

    Ok(RunOutput {
        background: state.background,
        rain: last_rain.expect("at least one stage ran"),
        maps: state.maps,
        trace,
    })
}

const POWER_ITERATION_SEED: u64 = 0x5eed_0001;
const POWER_ITERATIONS: usize = 30;

/// Safe step-size bound for the m-step: `1 / L` with
/// `L = 2 * lambda_max(M -> C^T (C (x) M))`, the largest eigenvalue of the
/// synthesis normal operator scaled by the gradient-convention factor 2.
/// Estimated by 30 seeded power iterations on an H x W map stack. Any
/// `eta1 <=` the returned bound keeps the quadratic majorization a descent
/// step. Errors on a zero bank (operator norm 0).
pub fn estimate_eta1_bound(bank: &KernelBank, h: usize, w: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let n = bank.num_kernels();
    let mut z = RainMapStack::new(
        (0..n)
            .map(|_| Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)))
            .collect(),
    )?;
    let norm0 = z.norm_sq().sqrt();
    for m in z.maps_mut() {
        m.scale_in_place(1.0 / norm0);
    }
    let apply = |m: &RainMapStack| -> Result<RainMapStack> {
        synthesize_rain_adjoint(bank, &synthesize_rain(bank, m)?)
    };
    for _ in 0..POWER_ITERATIONS {
        let tz = apply(&z)?;
        let norm = tz.norm_sq().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Config(
                "step-size bound undefined: kernel bank has operator norm 0".into(),
            ));
        }
        z = tz;
        for m in z.maps_mut() {
            m.scale_in_place(1.0 / norm);
        }
    }
    let lambda = z.dot(&apply(&z)?) / z.norm_sq();
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(
            "step-size bound undefined: kernel bank has operator norm 0".into(),
        ));
    }
    Ok(1.0 / (2.0 * lambda))
}

/// Write per-stage panels (background / rain / background-estimate rows) and
/// a CSV of per-stage objective and PSNR values into `dir`.
pub fn export_trace(dir: &std::path::Path, trace: &StageTrace) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let mut csv = std::fs::File::create(dir.join("trace.csv"))?;
    writeln!(csv, "stage,objective_after_m,objective_after_b,psnr_db")?;
    for (s, rec) in trace.records.iter().enumerate() {
        let stage = s + 1;
        let psnr = rec
            .psnr
            .map(|p| format!("{:.4}", p.min(crate::metrics::PSNR_CAP_DB)))
            .unwrap_or_default();
        writeln!(
            csv,
            "{stage},{:.6},{:.6},{psnr}",
            rec.objective_after_m, rec.objective_after_b
        )?;
        let panel = stack_panel(&[&rec.background, &rec.rain, &rec.background_estimate]);
        crate::imgio::save_png(&dir.join(format!("stage_{stage:02}.png")), &panel)?;
    }
    Ok(())
}

/// Stack images vertically with a thin white separator, clamping to [0, 1].
fn stack_panel(rows: &[&Image]) -> Image {
    let (h, w) = rows[0].shape();
    let gap = 2;
    let total_h = h * rows.len() + gap * (rows.len() - 1);
    let mut planes = [
        Plane::constant(total_h, w, 1.0),
        Plane::constant(total_h, w, 1.0),
        Plane::constant(total_h, w, 1.0),
    ];
    for (r, img) in rows.iter().enumerate() {
        let y0 = r * (h + gap);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    planes[c].set(y0 + i, j, img.plane(c).at(i, j).clamp(0.0, 1.0));
                }
            }
        }
    }
    Image::new(planes).expect("consistent panel shape")
}
